//! Downsampling-mask generators and the mask budget loss.
//!
//! Every generator first builds a pixel-level importance map, dilates it with
//! a square structuring element and then pools it to the patch grid: a patch
//! keeps its resolution (bit 0) if any of its pixels is important.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::multires::DownsampleMask;
use crate::tensor::{sobel_magnitude, DenseTensor};

/// A binary pixel map.
#[derive(Clone, PartialEq, Eq)]
pub struct BinaryGrid {
    rows: usize,
    cols: usize,
    bits: Vec<bool>,
}

impl BinaryGrid {
    pub fn new(rows: usize, cols: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != rows * cols {
            return Err(Error::shape(format!(
                "grid {rows}x{cols} needs {} bits, got {}",
                rows * cols,
                bits.len()
            )));
        }
        Ok(Self { rows, cols, bits })
    }

    pub fn empty(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            bits: vec![false; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(rows * cols);
        for y in 0..rows {
            for x in 0..cols {
                bits.push(f(y, x));
            }
        }
        Self { rows, cols, bits }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.cols + x]
    }

    pub fn set(&mut self, y: usize, x: usize, on: bool) {
        self.bits[y * self.cols + x] = on;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

impl fmt::Debug for BinaryGrid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "BinaryGrid {}x{}", self.rows, self.cols)?;
        for y in 0..self.rows {
            for x in 0..self.cols {
                f.write_str(if self.get(y, x) { "#" } else { "." })?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

/// Morphological dilation with a `k × k` square, clipped at the borders.
/// Runs as a horizontal pass followed by a vertical pass.
pub fn dilate_binary(grid: &BinaryGrid, k: usize) -> Result<BinaryGrid> {
    if k == 0 || k % 2 == 0 {
        return Err(Error::invalid(format!("dilation size must be odd and positive, got {k}")));
    }
    if k == 1 {
        return Ok(grid.clone());
    }
    let r = k / 2;
    let (rows, cols) = (grid.rows, grid.cols);
    let mut horiz = BinaryGrid::empty(rows, cols);
    for y in 0..rows {
        for x in 0..cols {
            let lo = x.saturating_sub(r);
            let hi = (x + r).min(cols - 1);
            horiz.bits[y * cols + x] = (lo..=hi).any(|xx| grid.get(y, xx));
        }
    }
    let mut out = BinaryGrid::empty(rows, cols);
    for y in 0..rows {
        let lo = y.saturating_sub(r);
        let hi = (y + r).min(rows - 1);
        for x in 0..cols {
            out.bits[y * cols + x] = (lo..=hi).any(|yy| horiz.get(yy, x));
        }
    }
    Ok(out)
}

/// Pools pixel importance to a `d × d` patch grid. Bit 0 (retain) iff any
/// pixel of the patch is set.
pub fn pool_retain_any(grid: &BinaryGrid, d: usize) -> Result<DownsampleMask> {
    if d == 0 || grid.rows % d != 0 || grid.cols % d != 0 || grid.rows == 0 || grid.cols == 0 {
        return Err(Error::shape(format!(
            "{}x{} grid is not divisible by factor {d}",
            grid.rows, grid.cols
        )));
    }
    Ok(DownsampleMask::from_fn(grid.rows / d, grid.cols / d, |i, j| {
        !(0..d).any(|dy| (0..d).any(|dx| grid.get(i * d + dy, j * d + dx)))
    }))
}

/// Pools one input-resolution importance map to each stage grid in `shapes`.
pub fn stage_masks(importance: &BinaryGrid, shapes: &[(usize, usize)]) -> Result<Vec<DownsampleMask>> {
    shapes
        .iter()
        .map(|&(rows, cols)| {
            if rows == 0 || importance.rows % rows != 0 || importance.rows / rows != importance.cols / cols.max(1)
            {
                return Err(Error::shape(format!(
                    "cannot pool a {}x{} importance map to a {rows}x{cols} stage grid",
                    importance.rows, importance.cols
                )));
            }
            pool_retain_any(importance, importance.rows / rows)
        })
        .collect()
}

/// Pixels whose normalized Sobel response reaches `threshold`, dilated by `dilate_k`.
pub fn edge_importance(gray: &DenseTensor, threshold: f32, dilate_k: usize) -> Result<BinaryGrid> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::invalid(format!("edge threshold must lie in [0, 1], got {threshold}")));
    }
    let magnitude = sobel_magnitude(gray)?;
    let raw = BinaryGrid::new(
        gray.height(),
        gray.width(),
        magnitude.data().iter().map(|&m| m >= threshold).collect(),
    )?;
    dilate_binary(&raw, dilate_k)
}

/// Edge-driven mask: edges and their neighborhood retain resolution.
pub fn edge_mask(gray: &DenseTensor, threshold: f32, dilate_k: usize, d: usize) -> Result<DownsampleMask> {
    if gray.height() % d.max(1) != 0 || gray.width() % d.max(1) != 0 {
        return Err(Error::shape(format!(
            "{}x{} image is not divisible by factor {d}",
            gray.height(),
            gray.width()
        )));
    }
    pool_retain_any(&edge_importance(gray, threshold, dilate_k)?, d)
}

/// De-duplicated keypoint coordinates on an `H × W` grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KeypointSet {
    height: usize,
    width: usize,
    points: BTreeSet<(usize, usize)>,
}

impl KeypointSet {
    pub fn new(height: usize, width: usize, points: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let mut set = BTreeSet::new();
        let mut offenders = Vec::new();
        for (y, x) in points {
            if y >= height || x >= width {
                offenders.push(format!("({y},{x})"));
            } else {
                set.insert((y, x));
            }
        }
        if !offenders.is_empty() {
            return Err(Error::invalid(format!(
                "keypoints outside the {height}x{width} grid: {}",
                offenders.join(", ")
            )));
        }
        Ok(Self {
            height,
            width,
            points: set,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.points.iter().copied()
    }

    pub fn rasterize(&self) -> BinaryGrid {
        let mut g = BinaryGrid::empty(self.height, self.width);
        for (y, x) in self.iter() {
            g.set(y, x, true);
        }
        g
    }
}

/// Dilation applied around keypoints. `None` downsamples the whole map,
/// `Full` retains it entirely.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KeypointDilation {
    None,
    Size(usize),
    Full,
}

impl FromStr for KeypointDilation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "inf" | "∞" | "full" => Ok(KeypointDilation::Full),
            "0" => Ok(KeypointDilation::None),
            other => other
                .parse::<usize>()
                .map(KeypointDilation::Size)
                .map_err(|_| Error::invalid(format!("bad dilation size {other:?}"))),
        }
    }
}

pub fn keypoint_mask(kps: &KeypointSet, dilation: KeypointDilation, d: usize) -> Result<DownsampleMask> {
    let (h, w) = (kps.height, kps.width);
    if d == 0 || h % d != 0 || w % d != 0 || h == 0 || w == 0 {
        return Err(Error::shape(format!("{h}x{w} grid is not divisible by factor {d}")));
    }
    match dilation {
        KeypointDilation::None => Ok(DownsampleMask::ones(h / d, w / d)),
        KeypointDilation::Full => Ok(DownsampleMask::zeros(h / d, w / d)),
        KeypointDilation::Size(k) => pool_retain_any(&dilate_binary(&kps.rasterize(), k)?, d),
    }
}

/// Per-pixel class labels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    rows: usize,
    cols: usize,
    labels: Vec<u32>,
}

impl LabelMap {
    pub fn new(rows: usize, cols: usize, labels: Vec<u32>) -> Result<Self> {
        if labels.len() != rows * cols {
            return Err(Error::shape(format!(
                "label map {rows}x{cols} needs {} labels, got {}",
                rows * cols,
                labels.len()
            )));
        }
        Ok(Self { rows, cols, labels })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }
}

/// Pixels where the coarse model is wrong and the fine model is right.
pub fn benefit_set(pred_low: &LabelMap, pred_high: &LabelMap, labels: &LabelMap) -> Result<BinaryGrid> {
    if pred_low.shape() != labels.shape() || pred_high.shape() != labels.shape() {
        return Err(Error::shape(format!(
            "label maps disagree in shape: low {:?}, high {:?}, labels {:?}",
            pred_low.shape(),
            pred_high.shape(),
            labels.shape()
        )));
    }
    let bits = labels
        .labels
        .iter()
        .zip(&pred_low.labels)
        .zip(&pred_high.labels)
        .map(|((gt, lo), hi)| lo != gt && hi == gt)
        .collect();
    BinaryGrid::new(labels.rows, labels.cols, bits)
}

pub fn oracle_mask(
    pred_low: &LabelMap,
    pred_high: &LabelMap,
    labels: &LabelMap,
    k: usize,
    d: usize,
) -> Result<DownsampleMask> {
    let benefit = benefit_set(pred_low, pred_high, labels)?;
    pool_retain_any(&dilate_binary(&benefit, k)?, d)
}

/// Weights of the mask budget loss. `gamma` is the target fraction of
/// 1-bits (downsampled patches).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BudgetParams {
    alpha: f64,
    beta: f64,
    gamma: f64,
}

impl BudgetParams {
    pub fn new(alpha: f64, beta: f64, gamma: f64) -> Result<Self> {
        if !(alpha >= 0.0 && beta >= 0.0) {
            return Err(Error::invalid("budget weights must be non-negative"));
        }
        if !(0.0..=1.0).contains(&gamma) {
            return Err(Error::invalid(format!("gamma must lie in [0, 1], got {gamma}")));
        }
        Ok(Self { alpha, beta, gamma })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }
}

/// `α·task_loss + β·(γ − m̂)²`.
pub fn mask_budget_loss(task_loss: f64, active_fraction: f64, p: &BudgetParams) -> Result<f64> {
    if !(0.0..=1.0).contains(&active_fraction) {
        return Err(Error::invalid(format!(
            "active fraction must lie in [0, 1], got {active_fraction}"
        )));
    }
    let gap = p.gamma - active_fraction;
    Ok(p.alpha * task_loss + p.beta * gap * gap)
}
