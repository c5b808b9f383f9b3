//! Machine-checkable reports for the structural guarantees of adaptive
//! downsampling: endpoint equivalences, coarse-value equality with the
//! regular network, receptive-field equality and quadtree validity.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::multires::{densify, DownsampleMask, MultiResMap};
use crate::network::{
    receptive_field_supports, run_adaptive, run_dilated, run_regular, Item, NetworkSpec, SupportMap, Variant,
};
use crate::tensor::{ConvLayer, DenseTensor, PatchReducer};

/// Default absolute tolerance on activations.
pub const DEFAULT_TOL: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub pass: bool,
    pub max_dev: f64,
    pub detail: String,
}

impl CheckResult {
    pub fn new(name: impl Into<String>, pass: bool, max_dev: f64, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            pass,
            max_dev,
            detail: detail.into(),
        }
    }

    fn deviation(name: &str, max_dev: f64, tol: f64, detail: String) -> Self {
        Self::new(name, max_dev <= tol, max_dev, detail)
    }
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "CHECK {} {} max_dev={:.6e} detail={}",
            self.name,
            if self.pass { "pass" } else { "fail" },
            self.max_dev,
            self.detail
        )
    }
}

/// An ordered list of check results.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct Report {
    pub checks: Vec<CheckResult>,
}

impl Report {
    pub fn push(&mut self, check: CheckResult) {
        self.checks.push(check);
    }

    pub fn extend(&mut self, checks: impl IntoIterator<Item = CheckResult>) {
        self.checks.extend(checks);
    }

    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    /// One `CHECK` line per result.
    pub fn to_text(&self) -> String {
        self.checks.iter().map(|c| format!("{c}\n")).collect()
    }

    pub fn to_json(&self) -> String {
        #[derive(Serialize)]
        struct Summary<'a> {
            passed: usize,
            failed: usize,
            all_passed: bool,
            checks: &'a [CheckResult],
        }
        let passed = self.checks.iter().filter(|c| c.pass).count();
        serde_json::to_string_pretty(&Summary {
            passed,
            failed: self.checks.len() - passed,
            all_passed: self.all_passed(),
            checks: &self.checks,
        })
        .expect("report serializes")
    }
}

/// Random network family used by the guarantee suites.
#[derive(Clone, Debug)]
pub struct SpecFamily {
    pub max_convs: usize,
    pub min_downsamples: usize,
    pub max_downsamples: usize,
    pub base_sizes: Vec<usize>,
    pub max_channels: usize,
    pub reducer: PatchReducer,
}

impl Default for SpecFamily {
    fn default() -> Self {
        Self {
            max_convs: 3,
            min_downsamples: 1,
            max_downsamples: 2,
            base_sizes: vec![16, 20, 24, 28, 32],
            max_channels: 4,
            reducer: PatchReducer::UniformTopLeft,
        }
    }
}

/// Weights uniform in `[-1, 1] / K²`, biases uniform in `[-0.1, 0.1]`.
pub fn random_conv(rng: &mut impl Rng, k: usize, cin: usize, cout: usize, bias: bool, relu: bool) -> ConvLayer {
    let scale = 1.0 / (k * k) as f32;
    let w = (0..k * k * cin * cout).map(|_| rng.gen_range(-1.0f32..=1.0) * scale).collect();
    let layer = ConvLayer::new(k, cin, cout, w).expect("valid random layer").with_relu(relu);
    if bias {
        layer
            .with_bias((0..cout).map(|_| rng.gen_range(-0.1f32..=0.1)).collect())
            .expect("bias length matches")
    } else {
        layer
    }
}

/// Same architecture with fresh random parameters.
pub fn randomize_weights(spec: &NetworkSpec, rng: &mut impl Rng) -> NetworkSpec {
    spec.map_convs(|_, l| {
        Ok(random_conv(
            rng,
            l.kernel_size(),
            l.in_channels(),
            l.out_channels(),
            l.bias().is_some(),
            l.relu(),
        ))
    })
    .expect("architecture unchanged")
}

/// Inputs uniform in `[0, 1]`.
pub fn random_input(rng: &mut impl Rng, h: usize, w: usize, c: usize) -> DenseTensor {
    DenseTensor::new(h, w, c, (0..h * w * c).map(|_| rng.gen_range(0.0f32..=1.0)).collect())
        .expect("positive dims")
}

/// Draws a spec from `family` together with an input size it accepts.
/// At least one conv follows the last downsampling item.
pub fn random_spec(rng: &mut impl Rng, family: &SpecFamily) -> (NetworkSpec, (usize, usize)) {
    let n_down = rng.gen_range(family.min_downsamples..=family.max_downsamples);
    let n_conv = rng.gen_range(1..=family.max_convs.max(1));
    // slot i holds the convs placed after the i-th downsampling item
    let mut slots = vec![0usize; n_down + 1];
    slots[n_down] = 1;
    for _ in 1..n_conv {
        let s = rng.gen_range(0..=n_down);
        slots[s] += 1;
    }
    let mut channels = rng.gen_range(1..=family.max_channels.min(3));
    let input_channels = channels;
    let mut items = Vec::new();
    for (slot, &count) in slots.iter().enumerate() {
        if slot > 0 {
            items.push(Item::Downsample {
                factor: 2,
                reducer: family.reducer,
            });
        }
        for _ in 0..count {
            let k = [1, 3, 3, 5][rng.gen_range(0..4)];
            let cout = rng.gen_range(1..=family.max_channels);
            let bias = rng.gen_bool(0.5);
            let relu = rng.gen_bool(0.5);
            items.push(Item::Conv(random_conv(rng, k, channels, cout, bias, relu)));
            channels = cout;
        }
    }
    let n_adaptive = rng.gen_range(1..=n_down);
    let align = 1usize << n_down;
    let sizes: Vec<usize> = family.base_sizes.iter().copied().filter(|s| s % align == 0).collect();
    let h = sizes[rng.gen_range(0..sizes.len())];
    let w = sizes[rng.gen_range(0..sizes.len())];
    let spec = NetworkSpec::new("random", items, n_adaptive)
        .expect("generated spec is consistent")
        .with_input_dims((h, w, input_channels));
    (spec, (h, w))
}

/// How masks are drawn for each trial.
#[derive(Clone, Debug, PartialEq)]
pub enum MaskSampler {
    AllOnes,
    AllZeros,
    /// Each bit is 1 with probability `p`.
    Bernoulli(f64),
    /// Bernoulli with `p` drawn uniformly per trial.
    RandomDensity,
    Checkerboard,
    /// All ones except one random retained patch per stage.
    SingleRetained,
    /// The complement of another sampler's masks.
    Inverted(Box<MaskSampler>),
}

impl MaskSampler {
    pub fn sample(&self, rng: &mut impl Rng, shapes: &[(usize, usize)]) -> Vec<DownsampleMask> {
        match self {
            MaskSampler::AllOnes => shapes.iter().map(|&(r, c)| DownsampleMask::ones(r, c)).collect(),
            MaskSampler::AllZeros => shapes.iter().map(|&(r, c)| DownsampleMask::zeros(r, c)).collect(),
            MaskSampler::Bernoulli(p) => shapes
                .iter()
                .map(|&(r, c)| DownsampleMask::from_fn(r, c, |_, _| rng.gen_bool(*p)))
                .collect(),
            MaskSampler::RandomDensity => {
                let p = rng.gen_range(0.0..=1.0);
                MaskSampler::Bernoulli(p).sample(rng, shapes)
            }
            MaskSampler::Checkerboard => shapes.iter().map(|&(r, c)| DownsampleMask::checkerboard(r, c)).collect(),
            MaskSampler::SingleRetained => shapes
                .iter()
                .map(|&(r, c)| {
                    let mut m = DownsampleMask::ones(r, c);
                    m.set(rng.gen_range(0..r), rng.gen_range(0..c), false);
                    m
                })
                .collect(),
            MaskSampler::Inverted(inner) => inner.sample(rng, shapes).iter().map(|m| m.inverted()).collect(),
        }
    }

    pub fn name(&self) -> String {
        match self {
            MaskSampler::AllOnes => "ones".into(),
            MaskSampler::AllZeros => "zeros".into(),
            MaskSampler::Bernoulli(p) => format!("bernoulli({p})"),
            MaskSampler::RandomDensity => "random".into(),
            MaskSampler::Checkerboard => "checkerboard".into(),
            MaskSampler::SingleRetained => "single-retained".into(),
            MaskSampler::Inverted(inner) => format!("inverted-{}", inner.name()),
        }
    }
}

/// Largest deviation between the adaptive network's values on the coarse
/// lattice and the regular network's output.
pub fn lattice_deviation(spec: &NetworkSpec, input: &DenseTensor, masks: &[DownsampleMask]) -> Result<f64> {
    let regular = run_regular(spec, input)?;
    let adaptive = run_adaptive(spec, input, masks)?;
    Ok(adaptive.lattice_values().max_abs_diff(&regular))
}

/// All-ones masks must reproduce the regular network, all-zeros masks the
/// dilated one.
pub fn check_endpoint_equivalences(spec: &NetworkSpec, input: &DenseTensor, tol: f64) -> Vec<CheckResult> {
    let shapes = match spec.stage_mask_shapes(input.height(), input.width()) {
        Ok(s) => s,
        Err(e) => {
            return vec![
                CheckResult::new("endpoint_ones", false, f64::INFINITY, e.to_string()),
                CheckResult::new("endpoint_zeros", false, f64::INFINITY, e.to_string()),
            ]
        }
    };
    let ones: Vec<_> = shapes.iter().map(|&(r, c)| DownsampleMask::ones(r, c)).collect();
    let zeros: Vec<_> = shapes.iter().map(|&(r, c)| DownsampleMask::zeros(r, c)).collect();

    let ones_check = (|| -> Result<CheckResult> {
        let regular = run_regular(spec, input)?;
        let adaptive = run_adaptive(spec, input, &ones)?;
        let grid = crate::multires::extract_level_dense(&adaptive, spec.n_adaptive() as u8)?;
        let complete = grid.occupied_count() == regular.height() * regular.width();
        let dev = if grid.values.dims() == regular.dims() {
            grid.values.max_abs_diff(&regular)
        } else {
            f64::INFINITY
        };
        let detail = format!("stages={} coarse_grid_complete={complete}", spec.n_adaptive());
        Ok(CheckResult::new("endpoint_ones", complete && dev <= tol, dev, detail))
    })()
    .unwrap_or_else(|e| CheckResult::new("endpoint_ones", false, f64::INFINITY, e.to_string()));

    let zeros_check = (|| -> Result<CheckResult> {
        let dilated = run_dilated(spec, input, spec.n_adaptive())?;
        let adaptive = densify(&run_adaptive(spec, input, &zeros)?);
        let dev = if adaptive.dims() == dilated.dims() {
            adaptive.max_abs_diff(&dilated)
        } else {
            f64::INFINITY
        };
        Ok(CheckResult::deviation(
            "endpoint_zeros",
            dev,
            tol,
            format!("keep_last={}", spec.n_adaptive()),
        ))
    })()
    .unwrap_or_else(|e| CheckResult::new("endpoint_zeros", false, f64::INFINITY, e.to_string()));

    vec![ones_check, zeros_check]
}

/// Settings of a randomized Guarantee-2 run.
#[derive(Clone, Debug)]
pub struct TrialConfig {
    pub trials: usize,
    pub tol: f64,
    pub seed: u64,
    /// Draw fresh weights for every trial instead of using the spec's own.
    pub randomize_weights: bool,
    /// Negative control: perturb the adaptive path's post-stage weights.
    pub perturb_coarse: bool,
}

impl Default for TrialConfig {
    fn default() -> Self {
        Self {
            trials: 100,
            tol: DEFAULT_TOL,
            seed: 0,
            randomize_weights: true,
            perturb_coarse: false,
        }
    }
}

fn perturbed(spec: &NetworkSpec) -> NetworkSpec {
    let first_adaptive = spec.adaptive_indices().first().copied().unwrap_or(usize::MAX);
    let conv_items: Vec<usize> = spec
        .items()
        .iter()
        .enumerate()
        .filter(|(_, i)| matches!(i, Item::Conv(_)))
        .map(|(i, _)| i)
        .collect();
    spec.map_convs(|ci, l| {
        if conv_items[ci] > first_adaptive {
            let w = l.weights().iter().map(|w| w + 0.25).collect();
            l.with_parameters(w, l.bias().map(|b| b.to_vec()))
        } else {
            Ok(l.clone())
        }
    })
    .expect("perturbation keeps shapes")
}

/// Over `cfg.trials` random masks (and weights), the adaptive network must
/// agree with the regular one at every coarse-lattice position.
pub fn check_guarantee2(
    spec: &NetworkSpec,
    input: &DenseTensor,
    sampler: &MaskSampler,
    cfg: &TrialConfig,
) -> CheckResult {
    let name = format!("guarantee2_{}", sampler.name());
    if let Some(bad) = spec.adaptive_indices().iter().find_map(|&i| match spec.items()[i] {
        Item::Downsample { reducer, .. } if reducer != PatchReducer::UniformTopLeft => Some(reducer),
        _ => None,
    }) {
        return CheckResult::new(
            name,
            false,
            f64::NAN,
            format!("requires uniform top-left reducers, found {bad}"),
        );
    }
    let shapes = match spec.stage_mask_shapes(input.height(), input.width()) {
        Ok(s) => s,
        Err(e) => return CheckResult::new(name, false, f64::INFINITY, e.to_string()),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut worst = 0.0f64;
    let mut worst_trial = 0;
    for t in 0..cfg.trials {
        let net = if cfg.randomize_weights {
            randomize_weights(spec, &mut rng)
        } else {
            spec.clone()
        };
        let masks = sampler.sample(&mut rng, &shapes);
        let result = (|| -> Result<f64> {
            let regular = run_regular(&net, input)?;
            let adaptive_net = if cfg.perturb_coarse { perturbed(&net) } else { net.clone() };
            let adaptive = run_adaptive(&adaptive_net, input, &masks)?;
            Ok(adaptive.lattice_values().max_abs_diff(&regular))
        })();
        match result {
            Ok(dev) if dev > worst || dev.is_nan() => {
                worst = if dev.is_nan() { f64::INFINITY } else { dev };
                worst_trial = t;
            }
            Ok(_) => {}
            Err(e) => return CheckResult::new(name, false, f64::INFINITY, format!("trial {t}: {e}")),
        }
    }
    CheckResult::deviation(
        &name,
        worst,
        cfg.tol,
        format!("trials={} tol={:e} worst_trial={worst_trial}", cfg.trials, cfg.tol),
    )
}

fn compare_supports(
    regular: &SupportMap,
    adaptive: &SupportMap,
    stride: usize,
) -> std::result::Result<usize, String> {
    let mut compared = 0;
    for i in 0..regular.out_height {
        for j in 0..regular.out_width {
            let (y, x) = (i * stride, j * stride);
            let r = regular.get(i, j).ok_or_else(|| format!("regular ({i},{j}) missing"))?;
            let a = adaptive
                .get(y, x)
                .ok_or_else(|| format!("adaptive ({y},{x}) inactive on the coarse lattice"))?;
            if r != a {
                return Err(format!(
                    "support differs at coarse ({i},{j}): regular {} px, adaptive {} px",
                    r.len(),
                    a.len()
                ));
            }
            compared += 1;
        }
    }
    Ok(compared)
}

/// Receptive fields of the adaptive and regular networks must coincide at
/// every coarse-lattice position, after every item.
pub fn check_guarantee1(
    spec: &NetworkSpec,
    dims: (usize, usize),
    mask_sets: &[Vec<DownsampleMask>],
) -> CheckResult {
    let name = "guarantee1";
    let regular = match receptive_field_supports(spec, dims, Variant::Regular, &[]) {
        Ok(r) => r,
        Err(e) => return CheckResult::new(name, false, f64::INFINITY, e.to_string()),
    };
    let adaptive_idx = spec.adaptive_indices();
    let d = spec.adaptive_factor().unwrap_or(2);
    let mut compared = 0usize;
    for (m, masks) in mask_sets.iter().enumerate() {
        let adaptive = match receptive_field_supports(spec, dims, Variant::Adaptive, masks) {
            Ok(a) => a,
            Err(e) => return CheckResult::new(name, false, f64::INFINITY, format!("mask set {m}: {e}")),
        };
        for (b, (r, a)) in regular.iter().zip(&adaptive).enumerate() {
            let stages = adaptive_idx.iter().filter(|&&i| i <= b).count();
            match compare_supports(r, a, d.pow(stages as u32)) {
                Ok(n) => compared += n,
                Err(msg) => {
                    return CheckResult::new(name, false, 1.0, format!("mask set {m}, after item {b}: {msg}"))
                }
            }
        }
    }
    CheckResult::new(
        name,
        true,
        0.0,
        format!(
            "mask_sets={} boundaries={} positions_compared={compared}",
            mask_sets.len(),
            spec.items().len()
        ),
    )
}

/// With all-zeros masks the adaptive network's receptive fields equal the
/// dilated network's at every position.
pub fn check_dilated_support(spec: &NetworkSpec, dims: (usize, usize)) -> CheckResult {
    let name = "guarantee1_dilated";
    let result = (|| -> Result<std::result::Result<usize, String>> {
        let shapes = spec.stage_mask_shapes(dims.0, dims.1)?;
        let zeros: Vec<_> = shapes.iter().map(|&(r, c)| DownsampleMask::zeros(r, c)).collect();
        let dilated = receptive_field_supports(spec, dims, Variant::Dilated { keep_last: spec.n_adaptive() }, &[])?;
        let adaptive = receptive_field_supports(spec, dims, Variant::Adaptive, &zeros)?;
        let (Some(dl), Some(al)) = (dilated.last(), adaptive.last()) else {
            return Ok(Ok(0));
        };
        Ok(compare_supports(dl, al, 1))
    })();
    match result {
        Ok(Ok(n)) => CheckResult::new(name, true, 0.0, format!("positions_compared={n}")),
        Ok(Err(msg)) => CheckResult::new(name, false, 1.0, msg),
        Err(e) => CheckResult::new(name, false, f64::INFINITY, e.to_string()),
    }
}

/// Validates block alignment, level bounds and the active-element rule.
pub fn check_quadtree(mr: &MultiResMap) -> CheckResult {
    let violations = mr.violations();
    let mut detail = format!(
        "{}x{} d={} stages={} active={}",
        mr.height(),
        mr.width(),
        mr.factor(),
        mr.stages(),
        mr.active_count()
    );
    if mr.factor() != 2 {
        detail.push_str(" (checked with d!=2)");
    }
    if !violations.is_empty() {
        let shown: Vec<String> = violations.iter().take(5).map(|v| v.to_string()).collect();
        detail = format!("{} violation(s): {}", violations.len(), shown.join("; "));
    }
    CheckResult::new("quadtree", violations.is_empty(), violations.len() as f64, detail)
}
