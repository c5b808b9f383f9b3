//! Layer stacks and the three ways of running them: regular strided
//! downsampling, dilated convolution in place of the last downsampling
//! stages, and adaptive downsampling with sparse convolution.

use std::collections::BTreeSet;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::multires::{adaptive_downsample, adaptive_downsample_stage, DownsampleMask, MultiResMap};
use crate::par;
use crate::sparse_conv::{count_active_taps, multires_conv};
use crate::tensor::{conv2d_dilated, regular_downsample, ConvLayer, DenseTensor, PatchReducer};

#[derive(Clone, Debug, PartialEq)]
pub enum Item {
    Conv(ConvLayer),
    Downsample { factor: usize, reducer: PatchReducer },
}

/// An ordered layer stack. The last `n_adaptive` downsampling items are the
/// ones replaced by adaptive downsampling.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkSpec {
    name: String,
    items: Vec<Item>,
    n_adaptive: usize,
    input_dims: Option<(usize, usize, usize)>,
}

impl NetworkSpec {
    pub fn new(name: impl Into<String>, items: Vec<Item>, n_adaptive: usize) -> Result<Self> {
        let mut channels: Option<usize> = None;
        let mut downs = Vec::new();
        for (i, item) in items.iter().enumerate() {
            match item {
                Item::Conv(layer) => {
                    if let Some(c) = channels {
                        if c != layer.in_channels() {
                            return Err(Error::invalid(format!(
                                "item {i}: conv expects {} channels but receives {c}",
                                layer.in_channels()
                            )));
                        }
                    }
                    channels = Some(layer.out_channels());
                }
                Item::Downsample { factor, .. } => {
                    if *factor < 2 {
                        return Err(Error::invalid(format!("item {i}: downsampling factor must be >= 2")));
                    }
                    downs.push(*factor);
                }
            }
        }
        if n_adaptive > downs.len() {
            return Err(Error::invalid(format!(
                "n_adaptive = {n_adaptive} but the spec has only {} downsampling items",
                downs.len()
            )));
        }
        let adaptive = &downs[downs.len() - n_adaptive..];
        if adaptive.windows(2).any(|w| w[0] != w[1]) {
            return Err(Error::invalid("adaptive downsampling stages must share one factor"));
        }
        Ok(Self {
            name: name.into(),
            items,
            n_adaptive,
            input_dims: None,
        })
    }

    pub fn with_input_dims(mut self, dims: (usize, usize, usize)) -> Self {
        self.input_dims = Some(dims);
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn items(&self) -> &[Item] {
        &self.items
    }

    pub fn n_adaptive(&self) -> usize {
        self.n_adaptive
    }

    pub fn input_dims(&self) -> Option<(usize, usize, usize)> {
        self.input_dims
    }

    pub fn convs(&self) -> impl Iterator<Item = &ConvLayer> {
        self.items.iter().filter_map(|i| match i {
            Item::Conv(l) => Some(l),
            _ => None,
        })
    }

    /// Item indices of the downsampling layers, in order.
    pub fn downsample_indices(&self) -> Vec<usize> {
        self.items
            .iter()
            .enumerate()
            .filter(|(_, i)| matches!(i, Item::Downsample { .. }))
            .map(|(idx, _)| idx)
            .collect()
    }

    /// Item indices of the downsampling layers run adaptively.
    pub fn adaptive_indices(&self) -> Vec<usize> {
        let downs = self.downsample_indices();
        downs[downs.len() - self.n_adaptive..].to_vec()
    }

    /// Factor shared by the adaptive stages, if any.
    pub fn adaptive_factor(&self) -> Option<usize> {
        self.adaptive_indices().first().map(|&i| match self.items[i] {
            Item::Downsample { factor, .. } => factor,
            Item::Conv(_) => unreachable!(),
        })
    }

    /// Channel count entering the first conv, if the spec has one.
    pub fn input_channels(&self) -> Option<usize> {
        self.convs().next().map(|l| l.in_channels())
    }

    /// Mask grid shapes for the adaptive stages on an `h × w` input.
    pub fn stage_mask_shapes(&self, h: usize, w: usize) -> Result<Vec<(usize, usize)>> {
        let adaptive = self.adaptive_indices();
        let Some(&first) = adaptive.first() else {
            return Ok(Vec::new());
        };
        let mut scale = 1;
        for item in &self.items[..first] {
            if let Item::Downsample { factor, .. } = item {
                scale *= factor;
            }
        }
        let d = self.adaptive_factor().expect("adaptive stages exist");
        let mut shapes = Vec::with_capacity(adaptive.len());
        for _ in 0..adaptive.len() {
            scale *= d;
            if h % scale != 0 || w % scale != 0 {
                return Err(Error::shape(format!("{h}x{w} input is not divisible by {scale}")));
            }
            shapes.push((h / scale, w / scale));
        }
        Ok(shapes)
    }

    /// The first `len` items, with the adaptive count clipped to the
    /// adaptive stages that survive the cut.
    pub fn truncated(&self, len: usize) -> NetworkSpec {
        let len = len.min(self.items.len());
        let n = self.adaptive_indices().iter().filter(|&&i| i < len).count();
        NetworkSpec {
            name: format!("{}[..{len}]", self.name),
            items: self.items[..len].to_vec(),
            n_adaptive: n,
            input_dims: self.input_dims,
        }
    }

    /// Rewrites every conv layer through `f`, keeping downsampling items.
    pub fn map_convs(&self, mut f: impl FnMut(usize, &ConvLayer) -> Result<ConvLayer>) -> Result<NetworkSpec> {
        let mut conv_index = 0;
        let mut items = Vec::with_capacity(self.items.len());
        for item in &self.items {
            items.push(match item {
                Item::Conv(layer) => {
                    let l = f(conv_index, layer)?;
                    conv_index += 1;
                    Item::Conv(l)
                }
                other => other.clone(),
            });
        }
        let mut spec = NetworkSpec::new(self.name.clone(), items, self.n_adaptive)?;
        spec.input_dims = self.input_dims;
        Ok(spec)
    }

    /// Single-channel copy with all weights 1, no bias and no activation.
    /// Every path through it carries a strictly positive weight, so the set
    /// of inputs with nonzero response at an output is its receptive field.
    pub fn unit(&self) -> NetworkSpec {
        self.map_convs(|_, l| ConvLayer::new(l.kernel_size(), 1, 1, vec![1.0; l.kernel_size() * l.kernel_size()]))
            .expect("unit layers are valid")
    }

    fn total_factor(&self, skip_last: usize) -> usize {
        let downs = self.downsample_indices();
        downs[..downs.len() - skip_last]
            .iter()
            .map(|&i| match self.items[i] {
                Item::Downsample { factor, .. } => factor,
                Item::Conv(_) => unreachable!(),
            })
            .product()
    }

    /// Output grid of the regular variant on an `h × w` input.
    pub fn regular_output_dims(&self, h: usize, w: usize) -> (usize, usize) {
        let s = self.total_factor(0);
        (h / s, w / s)
    }
}

/// Intermediate or final activations of a network run.
#[derive(Clone, Debug, PartialEq)]
pub enum Feature {
    Dense(DenseTensor),
    Multi(MultiResMap),
}

/// Which execution strategy to run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case", tag = "variant")]
pub enum Variant {
    Regular,
    /// Skip the last `keep_last` downsampling items and dilate later convs.
    Dilated { keep_last: usize },
    Adaptive,
}

impl Variant {
    pub fn name(&self) -> &'static str {
        match self {
            Variant::Regular => "regular",
            Variant::Dilated { .. } => "dilated",
            Variant::Adaptive => "adaptive",
        }
    }
}

#[derive(Clone, Copy)]
enum Plan<'a> {
    Regular,
    Dilated { keep_last: usize },
    Adaptive { masks: &'a [DownsampleMask] },
}

fn check_input(spec: &NetworkSpec, input: &DenseTensor, factor: usize) -> Result<()> {
    if let Some(c) = spec.input_channels() {
        if c != input.channels() {
            return Err(Error::invalid(format!(
                "network expects {c} input channels, got {}",
                input.channels()
            )));
        }
    }
    if input.height() % factor != 0 || input.width() % factor != 0 {
        return Err(Error::shape(format!(
            "{}x{} input is not divisible by the total downsampling factor {factor}",
            input.height(),
            input.width()
        )));
    }
    Ok(())
}

fn execute(
    spec: &NetworkSpec,
    input: &DenseTensor,
    plan: Plan<'_>,
    observe: &mut dyn FnMut(usize, &Feature),
) -> Result<Feature> {
    let downs = spec.downsample_indices();
    let (skipped, adaptive): (&[usize], Vec<usize>) = match plan {
        Plan::Regular => {
            check_input(spec, input, spec.total_factor(0))?;
            (&[], Vec::new())
        }
        Plan::Dilated { keep_last } => {
            if keep_last > downs.len() {
                return Err(Error::invalid(format!(
                    "keep_last = {keep_last} exceeds the {} downsampling items",
                    downs.len()
                )));
            }
            check_input(spec, input, spec.total_factor(keep_last))?;
            (&downs[downs.len() - keep_last..], Vec::new())
        }
        Plan::Adaptive { masks } => {
            if masks.len() != spec.n_adaptive {
                return Err(Error::invalid(format!(
                    "adaptive run needs {} mask(s), got {}",
                    spec.n_adaptive,
                    masks.len()
                )));
            }
            check_input(spec, input, spec.total_factor(0))?;
            (&[], spec.adaptive_indices())
        }
    };

    let mut feature = Feature::Dense(input.clone());
    let mut dilation = 1usize;
    let mut stage = 0usize;
    for (idx, item) in spec.items.iter().enumerate() {
        feature = match (item, feature) {
            (Item::Conv(layer), Feature::Dense(f)) => Feature::Dense(conv2d_dilated(&f, layer, dilation)?),
            (Item::Conv(layer), Feature::Multi(mr)) => {
                let d = mr.factor().pow(stage as u32);
                Feature::Multi(multires_conv(&mr, layer, d)?)
            }
            (Item::Downsample { factor, reducer }, f) => {
                if skipped.contains(&idx) {
                    dilation *= factor;
                    f
                } else if adaptive.contains(&idx) {
                    let Plan::Adaptive { masks } = plan else { unreachable!() };
                    let mask = &masks[stage];
                    stage += 1;
                    match f {
                        Feature::Dense(t) => Feature::Multi(adaptive_downsample(&t, mask, *factor, *reducer)?),
                        Feature::Multi(mr) => Feature::Multi(adaptive_downsample_stage(&mr, mask, *reducer)?),
                    }
                } else {
                    match f {
                        Feature::Dense(t) => Feature::Dense(regular_downsample(&t, *factor, *reducer)?),
                        Feature::Multi(_) => unreachable!("regular stages precede adaptive ones"),
                    }
                }
            }
        };
        observe(idx, &feature);
    }
    Ok(feature)
}

/// Runs every conv at dilation 1 and every downsampling item regularly.
pub fn run_regular(spec: &NetworkSpec, input: &DenseTensor) -> Result<DenseTensor> {
    match execute(spec, input, Plan::Regular, &mut |_, _| {})? {
        Feature::Dense(t) => Ok(t),
        Feature::Multi(_) => unreachable!(),
    }
}

/// Skips the last `keep_last` downsampling items; every conv after the i-th
/// skipped item has its dilation multiplied by the skipped factors so far.
pub fn run_dilated(spec: &NetworkSpec, input: &DenseTensor, keep_last: usize) -> Result<DenseTensor> {
    match execute(spec, input, Plan::Dilated { keep_last }, &mut |_, _| {})? {
        Feature::Dense(t) => Ok(t),
        Feature::Multi(_) => unreachable!(),
    }
}

/// Replaces the last `n_adaptive` downsampling items by adaptive ones driven
/// by `masks[i]`; convs after `i` adaptive stages run sparsely at dilation
/// `d^i`.
pub fn run_adaptive(spec: &NetworkSpec, input: &DenseTensor, masks: &[DownsampleMask]) -> Result<MultiResMap> {
    match execute(spec, input, Plan::Adaptive { masks }, &mut |_, _| {})? {
        Feature::Multi(mr) => Ok(mr),
        Feature::Dense(t) => MultiResMap::from_dense(&t, spec.adaptive_factor().unwrap_or(2)),
    }
}

/// Runs a variant and returns the activations after every item.
pub fn run_traced(
    spec: &NetworkSpec,
    input: &DenseTensor,
    variant: Variant,
    masks: &[DownsampleMask],
) -> Result<Vec<Feature>> {
    let mut trace = Vec::with_capacity(spec.items.len());
    execute(spec, input, plan_for(variant, masks), &mut |_, f| trace.push(f.clone()))?;
    Ok(trace)
}

fn plan_for(variant: Variant, masks: &[DownsampleMask]) -> Plan<'_> {
    match variant {
        Variant::Regular => Plan::Regular,
        Variant::Dilated { keep_last } => Plan::Dilated { keep_last },
        Variant::Adaptive => Plan::Adaptive { masks },
    }
}

/// Multiply-adds of one item.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ItemCost {
    pub index: usize,
    pub kind: &'static str,
    pub grid: (usize, usize),
    /// Elements produced: grid area for dense items, active count for sparse ones.
    pub elements: u64,
    pub mult_adds: u64,
    pub reducer_ops: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StageStats {
    pub stage: usize,
    pub mask_cells: usize,
    pub mask_ones: usize,
    pub active_elements: u64,
    pub base_elements: u64,
    /// Active elements over base-grid pixels after this stage.
    pub active_fraction: f64,
}

/// Multiply-add accounting of one variant. `total_mult_adds` counts conv
/// multiply-adds only; reducer work is tallied separately.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CostReport {
    pub network: String,
    pub variant: Variant,
    pub input: (usize, usize),
    pub items: Vec<ItemCost>,
    pub total_mult_adds: u64,
    pub total_reducer_ops: u64,
    pub stages: Vec<StageStats>,
}

/// Counts multiply-adds for `variant` on an `h × w` input. Every produced
/// (or active) element of a conv is charged the full `K²·Cin·Cout`.
pub fn cost_report(
    spec: &NetworkSpec,
    (h, w): (usize, usize),
    variant: Variant,
    masks: Option<&[DownsampleMask]>,
) -> Result<CostReport> {
    let masks = match (variant, masks) {
        (Variant::Adaptive, Some(m)) => m,
        (Variant::Adaptive, None) => return Err(Error::invalid("adaptive cost report needs masks")),
        (_, Some(_)) => return Err(Error::invalid("masks are only meaningful for the adaptive variant")),
        (_, None) => &[][..],
    };
    let channels = spec.input_channels().unwrap_or(1);
    // Active sets do not depend on values, so a zero single-channel probe
    // through the real stage operators tracks them.
    let probe = spec.map_convs(|_, _| ConvLayer::new(1, 1, 1, vec![0.0]))?;
    let input = DenseTensor::zeros(h, w, 1);
    let trace = run_traced(&probe, &input, variant, masks)?;

    let mut items = Vec::with_capacity(spec.items.len());
    let mut stages = Vec::new();
    let mut channels_now = channels;
    let adaptive = spec.adaptive_indices();
    for (idx, (item, out)) in spec.items.iter().zip(&trace).enumerate() {
        let grid = match out {
            Feature::Dense(t) => (t.height(), t.width()),
            Feature::Multi(m) => (m.height(), m.width()),
        };
        let cost = match item {
            Item::Conv(layer) => {
                channels_now = layer.out_channels();
                match out {
                    Feature::Dense(_) => {
                        let elements = (grid.0 * grid.1) as u64;
                        ItemCost {
                            index: idx,
                            kind: "conv",
                            grid,
                            elements,
                            mult_adds: elements * layer.taps(),
                            reducer_ops: 0,
                        }
                    }
                    Feature::Multi(m) => ItemCost {
                        index: idx,
                        kind: "sparse-conv",
                        grid,
                        elements: m.active_count() as u64,
                        mult_adds: count_active_taps(m, layer),
                        reducer_ops: 0,
                    },
                }
            }
            Item::Downsample { factor, .. } => {
                let per_patch = (factor * factor * channels_now) as u64;
                match out {
                    Feature::Dense(_) if matches!(variant, Variant::Dilated { .. }) && is_skipped(spec, idx, variant) => {
                        ItemCost {
                            index: idx,
                            kind: "down-skipped",
                            grid,
                            elements: (grid.0 * grid.1) as u64,
                            mult_adds: 0,
                            reducer_ops: 0,
                        }
                    }
                    Feature::Dense(_) => {
                        let elements = (grid.0 * grid.1) as u64;
                        ItemCost {
                            index: idx,
                            kind: "down",
                            grid,
                            elements,
                            mult_adds: 0,
                            reducer_ops: elements * per_patch,
                        }
                    }
                    Feature::Multi(m) => {
                        let stage = adaptive.iter().position(|&a| a == idx).expect("adaptive item");
                        let new_level = (stage + 1) as u8;
                        let block = factor.pow(new_level as u32);
                        let reduced = m.levels().iter().filter(|&&l| l == new_level).count() / (block * block);
                        let mask = &masks[stage];
                        let active = m.active_count() as u64;
                        let base = (m.height() * m.width()) as u64;
                        stages.push(StageStats {
                            stage: stage + 1,
                            mask_cells: mask.rows() * mask.cols(),
                            mask_ones: mask.count_ones(),
                            active_elements: active,
                            base_elements: base,
                            active_fraction: active as f64 / base as f64,
                        });
                        ItemCost {
                            index: idx,
                            kind: "down-adaptive",
                            grid,
                            elements: active,
                            mult_adds: 0,
                            reducer_ops: reduced as u64 * per_patch,
                        }
                    }
                }
            }
        };
        items.push(cost);
    }
    Ok(CostReport {
        network: spec.name.clone(),
        variant,
        input: (h, w),
        total_mult_adds: items.iter().map(|i| i.mult_adds).sum(),
        total_reducer_ops: items.iter().map(|i| i.reducer_ops).sum(),
        items,
        stages,
    })
}

fn is_skipped(spec: &NetworkSpec, idx: usize, variant: Variant) -> bool {
    match variant {
        Variant::Dilated { keep_last } => {
            let downs = spec.downsample_indices();
            downs[downs.len() - keep_last..].contains(&idx)
        }
        _ => false,
    }
}

/// Receptive fields of every output position at one layer boundary.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SupportMap {
    pub out_height: usize,
    pub out_width: usize,
    /// `None` for positions that hold no value (inactive elements).
    sets: Vec<Option<BTreeSet<(usize, usize)>>>,
}

impl SupportMap {
    pub fn get(&self, y: usize, x: usize) -> Option<&BTreeSet<(usize, usize)>> {
        self.sets[y * self.out_width + x].as_ref()
    }
}

/// Impulse-response sweep: for every input pixel, run the unit network on a
/// one-hot input and record which outputs respond. Returns one support map
/// per item boundary (entry `i` is after item `i`).
pub fn receptive_field_supports(
    spec: &NetworkSpec,
    (h, w): (usize, usize),
    variant: Variant,
    masks: &[DownsampleMask],
) -> Result<Vec<SupportMap>> {
    let unit = spec.unit();
    let zeros = DenseTensor::zeros(h, w, 1);
    let shapes: Vec<(usize, usize, Vec<bool>)> = run_traced(&unit, &zeros, variant, masks)?
        .iter()
        .map(|f| match f {
            Feature::Dense(t) => (t.height(), t.width(), vec![true; t.height() * t.width()]),
            Feature::Multi(m) => {
                let active = (0..m.height())
                    .flat_map(|y| (0..m.width()).map(move |x| (y, x)))
                    .map(|(y, x)| m.is_active(y, x))
                    .collect();
                (m.height(), m.width(), active)
            }
        })
        .collect();

    // responses[p][b] = flat output indices at boundary b reached from input pixel p
    let responses: Vec<Result<Vec<Vec<u32>>>> = par::map_indices(h * w, |p| {
        let mut impulse = DenseTensor::zeros(h, w, 1);
        impulse.data_mut()[p] = 1.0;
        let trace = run_traced(&unit, &impulse, variant, masks)?;
        Ok(trace
            .iter()
            .map(|f| match f {
                Feature::Dense(t) => t
                    .data()
                    .iter()
                    .enumerate()
                    .filter(|(_, v)| **v != 0.0)
                    .map(|(i, _)| i as u32)
                    .collect(),
                Feature::Multi(m) => m
                    .active_positions()
                    .filter(|&(y, x)| m.active_value(y, x).is_some_and(|v| v[0] != 0.0))
                    .map(|(y, x)| (y * m.width() + x) as u32)
                    .collect(),
            })
            .collect())
    });

    let mut maps: Vec<SupportMap> = shapes
        .iter()
        .map(|(oh, ow, active)| SupportMap {
            out_height: *oh,
            out_width: *ow,
            sets: active.iter().map(|&a| a.then(BTreeSet::new)).collect(),
        })
        .collect();
    for (p, resp) in responses.into_iter().enumerate() {
        let coord = (p / w, p % w);
        for (b, hits) in resp?.into_iter().enumerate() {
            for o in hits {
                if let Some(set) = maps[b].sets[o as usize].as_mut() {
                    set.insert(coord);
                }
            }
        }
    }
    Ok(maps)
}

/// Receptive field of one output position of the full network.
pub fn receptive_field_support(
    spec: &NetworkSpec,
    dims: (usize, usize),
    variant: Variant,
    output_pos: (usize, usize),
    masks: &[DownsampleMask],
) -> Result<BTreeSet<(usize, usize)>> {
    let maps = receptive_field_supports(spec, dims, variant, masks)?;
    let Some(last) = maps.last() else {
        // Empty network: the identity map.
        return Ok(BTreeSet::from([output_pos]));
    };
    let (y, x) = output_pos;
    if y >= last.out_height || x >= last.out_width {
        return Err(Error::invalid(format!(
            "output position ({y},{x}) outside the {}x{} output",
            last.out_height, last.out_width
        )));
    }
    last.get(y, x)
        .cloned()
        .ok_or_else(|| Error::invalid(format!("output position ({y},{x}) is inactive")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::multires::densify;

    fn conv(k: usize, cin: usize, cout: usize, seed: u32) -> ConvLayer {
        let n = k * k * cin * cout;
        let w = (0..n)
            .map(|i| (((i as u32).wrapping_mul(2654435761u32).wrapping_add(seed * 97)) % 1000) as f32 / 1000.0 - 0.5)
            .collect();
        ConvLayer::new(k, cin, cout, w).unwrap()
    }

    fn down(factor: usize) -> Item {
        Item::Downsample {
            factor,
            reducer: PatchReducer::UniformTopLeft,
        }
    }

    fn input(h: usize, w: usize, c: usize) -> DenseTensor {
        DenseTensor::from_fn(h, w, c, |y, x, ch| ((y * 31 + x * 17 + ch * 7) % 23) as f32 / 23.0)
    }

    fn two_stage() -> NetworkSpec {
        NetworkSpec::new(
            "two-stage",
            vec![
                Item::Conv(conv(3, 2, 3, 1)),
                down(2),
                Item::Conv(conv(3, 3, 3, 2).with_relu(true)),
                down(2),
                Item::Conv(conv(3, 3, 2, 3)),
            ],
            2,
        )
        .unwrap()
    }

    #[test]
    fn spec_validation() {
        assert!(NetworkSpec::new("x", vec![Item::Conv(conv(3, 1, 2, 0)), Item::Conv(conv(3, 1, 1, 0))], 0).is_err());
        assert!(NetworkSpec::new("x", vec![down(2)], 2).is_err());
        assert!(NetworkSpec::new("x", vec![down(2), down(3)], 2).is_err());
        assert!(NetworkSpec::new("x", vec![down(3), down(2)], 1).is_ok());
    }

    #[test]
    fn regular_without_downsampling_is_conv_composition() {
        let spec = NetworkSpec::new("c", vec![Item::Conv(conv(3, 1, 2, 4)), Item::Conv(conv(1, 2, 1, 5))], 0).unwrap();
        let f = input(6, 5, 1);
        let expected = conv2d_dilated(&conv2d_dilated(&f, &conv(3, 1, 2, 4), 1).unwrap(), &conv(1, 2, 1, 5), 1).unwrap();
        assert_eq!(run_regular(&spec, &f).unwrap(), expected);
    }

    #[test]
    fn regular_identity_downsample() {
        let spec = NetworkSpec::new(
            "id",
            vec![Item::Conv(ConvLayer::identity(1, 1).unwrap()), down(2), Item::Conv(ConvLayer::identity(1, 1).unwrap())],
            0,
        )
        .unwrap();
        let f = DenseTensor::from_fn(4, 4, 1, |y, x, _| (y * 4 + x) as f32);
        assert_eq!(run_regular(&spec, &f).unwrap().data(), &[0.0, 2.0, 8.0, 10.0]);
    }

    #[test]
    fn regular_matches_hand_composition() {
        let spec = two_stage();
        let f = input(16, 16, 2);
        let mut t = conv2d_dilated(&f, &conv(3, 2, 3, 1), 1).unwrap();
        t = regular_downsample(&t, 2, PatchReducer::UniformTopLeft).unwrap();
        t = conv2d_dilated(&t, &conv(3, 3, 3, 2).with_relu(true), 1).unwrap();
        t = regular_downsample(&t, 2, PatchReducer::UniformTopLeft).unwrap();
        t = conv2d_dilated(&t, &conv(3, 3, 2, 3), 1).unwrap();
        assert_eq!(run_regular(&spec, &f).unwrap(), t);
    }

    #[test]
    fn indivisible_input_is_a_shape_error() {
        let err = run_regular(&two_stage(), &input(10, 16, 2)).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }

    #[test]
    fn dilated_variant() {
        let spec = two_stage();
        let f = input(16, 16, 2);
        assert_eq!(run_dilated(&spec, &f, 0).unwrap(), run_regular(&spec, &f).unwrap());
        let fine = run_dilated(&spec, &f, 2).unwrap();
        assert_eq!(fine.dims(), (16, 16, 2));
        assert_eq!(fine.sublattice(4).unwrap(), run_regular(&spec, &f).unwrap());

        let single = NetworkSpec::new("s", vec![down(2), Item::Conv(conv(3, 1, 1, 9))], 1).unwrap();
        let g = input(8, 8, 1);
        assert_eq!(
            run_dilated(&single, &g, 1).unwrap(),
            conv2d_dilated(&g, &conv(3, 1, 1, 9), 2).unwrap()
        );
    }

    #[test]
    fn adaptive_endpoints() {
        let spec = two_stage();
        let f = input(16, 16, 2);
        let shapes = spec.stage_mask_shapes(16, 16).unwrap();
        assert_eq!(shapes, vec![(8, 8), (4, 4)]);
        let ones: Vec<_> = shapes.iter().map(|&(r, c)| DownsampleMask::ones(r, c)).collect();
        let zeros: Vec<_> = shapes.iter().map(|&(r, c)| DownsampleMask::zeros(r, c)).collect();
        let regular = run_regular(&spec, &f).unwrap();
        let a = run_adaptive(&spec, &f, &ones).unwrap();
        assert_eq!(crate::multires::extract_level_dense(&a, 2).unwrap().values, regular);
        let b = run_adaptive(&spec, &f, &zeros).unwrap();
        assert_eq!(densify(&b), run_dilated(&spec, &f, 2).unwrap());
    }

    #[test]
    fn adaptive_coarse_positions_match_regular() {
        let spec = two_stage();
        let f = input(16, 16, 2);
        let regular = run_regular(&spec, &f).unwrap();
        let masks = vec![DownsampleMask::checkerboard(8, 8), DownsampleMask::from_fn(4, 4, |i, j| (i * j) % 3 != 1)];
        let mr = run_adaptive(&spec, &f, &masks).unwrap();
        assert_eq!(mr.lattice_values(), regular);
    }

    #[test]
    fn adaptive_needs_masks() {
        let err = run_adaptive(&two_stage(), &input(16, 16, 2), &[]).unwrap_err();
        assert!(matches!(err, Error::InvalidArgument(_)));
    }

    #[test]
    fn half_downsampled_toy_cost() {
        let spec = NetworkSpec::new(
            "toy",
            vec![Item::Conv(conv(3, 8, 8, 0)), down(2), Item::Conv(conv(3, 8, 8, 1))],
            1,
        )
        .unwrap();
        let mask = DownsampleMask::from_fn(16, 16, |i, _| i % 2 == 0);
        assert_eq!(mask.count_ones(), 128);
        let report = cost_report(&spec, (32, 32), Variant::Adaptive, Some(&[mask])).unwrap();
        // 128 retained patches x 4 pixels + 128 downsampled patches x 1 element.
        assert_eq!(report.items[2].elements, 640);
        assert_eq!(report.items[2].mult_adds, 640 * 9 * 64);
        assert_eq!(report.items[0].mult_adds, 1024 * 9 * 64);
        assert_eq!(report.items[1].reducer_ops, 128 * 4 * 8);
        assert_eq!(report.stages[0].active_elements, 640);

        let regular = cost_report(&spec, (32, 32), Variant::Regular, None).unwrap();
        assert_eq!(regular.total_mult_adds, (1024 + 256) * 576);
        let dilated = cost_report(&spec, (32, 32), Variant::Dilated { keep_last: 1 }, None).unwrap();
        assert_eq!(dilated.total_mult_adds, (1024 + 1024) * 576);
        assert_eq!(dilated.total_reducer_ops, 0);
    }

    #[test]
    fn cost_endpoints_match_variants() {
        let spec = two_stage();
        let shapes = spec.stage_mask_shapes(16, 16).unwrap();
        let ones: Vec<_> = shapes.iter().map(|&(r, c)| DownsampleMask::ones(r, c)).collect();
        let zeros: Vec<_> = shapes.iter().map(|&(r, c)| DownsampleMask::zeros(r, c)).collect();
        let reg = cost_report(&spec, (16, 16), Variant::Regular, None).unwrap();
        let dil = cost_report(&spec, (16, 16), Variant::Dilated { keep_last: 2 }, None).unwrap();
        let a1 = cost_report(&spec, (16, 16), Variant::Adaptive, Some(&ones)).unwrap();
        let a0 = cost_report(&spec, (16, 16), Variant::Adaptive, Some(&zeros)).unwrap();
        assert_eq!(a1.total_mult_adds, reg.total_mult_adds);
        assert_eq!(a0.total_mult_adds, dil.total_mult_adds);
        assert!(cost_report(&spec, (16, 16), Variant::Adaptive, None).is_err());
    }

    #[test]
    fn single_conv_support_is_kernel_footprint() {
        let spec = NetworkSpec::new("one", vec![Item::Conv(conv(3, 1, 1, 0))], 0).unwrap();
        let s = receptive_field_support(&spec, (7, 7), Variant::Regular, (3, 3), &[]).unwrap();
        let expected: BTreeSet<_> = (2..5).flat_map(|y| (2..5).map(move |x| (y, x))).collect();
        assert_eq!(s, expected);
        let corner = receptive_field_support(&spec, (7, 7), Variant::Regular, (0, 0), &[]).unwrap();
        assert_eq!(corner.len(), 4);
    }

    #[test]
    fn conv_down_conv_support_is_mask_independent() {
        let spec = NetworkSpec::new(
            "cdc",
            vec![Item::Conv(conv(3, 1, 1, 0)), down(2), Item::Conv(conv(3, 1, 1, 1))],
            1,
        )
        .unwrap();
        let regular = receptive_field_support(&spec, (8, 8), Variant::Regular, (0, 0), &[]).unwrap();
        // Coarse taps at fine offsets {-2,0,2}, each widened by the first conv's ±1, clipped to the grid.
        let expected: BTreeSet<_> = (0..4).flat_map(|y| (0..4).map(move |x| (y, x))).collect();
        assert_eq!(regular, expected);
        for mask in [DownsampleMask::ones(4, 4), DownsampleMask::zeros(4, 4), DownsampleMask::checkerboard(4, 4)] {
            let a = receptive_field_support(&spec, (8, 8), Variant::Adaptive, (0, 0), &[mask]).unwrap();
            assert_eq!(a, regular);
        }
        let dil = receptive_field_support(&spec, (8, 8), Variant::Dilated { keep_last: 1 }, (0, 0), &[]).unwrap();
        assert_eq!(dil, regular);
    }

    #[test]
    fn inactive_support_query_fails() {
        let spec = NetworkSpec::new("cdc", vec![down(2), Item::Conv(conv(3, 1, 1, 1))], 1).unwrap();
        let err = receptive_field_support(&spec, (4, 4), Variant::Adaptive, (1, 1), &[DownsampleMask::ones(2, 2)]);
        assert!(matches!(err, Err(Error::InvalidArgument(_))));
    }
}
