//! Multi-resolution feature maps and the adaptive downsampling operator.
//!
//! A [`MultiResMap`] keeps every feature at the base (highest) resolution of
//! the current stage. Each base pixel carries a level `ℓ`: it belongs to a
//! `d^ℓ × d^ℓ` block whose top-left pixel is the block's single active
//! element. Other pixels of the block are inactive and resolve to that
//! representative on read.

use std::fmt;

use crate::error::{Error, Result};
use crate::tensor::{DenseTensor, PatchReducer};

/// Value written into inactive storage. Debug builds poison it so that any
/// read which bypasses representative lookup shows up as NaN.
#[inline]
pub(crate) fn inactive_fill() -> f32 {
    if cfg!(debug_assertions) {
        f32::NAN
    } else {
        0.0
    }
}

/// Per-patch downsampling decision: `true` (1) downsamples the patch, `false`
/// (0) retains its resolution.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct DownsampleMask {
    rows: usize,
    cols: usize,
    bits: Vec<bool>,
}

impl DownsampleMask {
    pub fn new(rows: usize, cols: usize, bits: Vec<bool>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::invalid("mask dims must be positive"));
        }
        if bits.len() != rows * cols {
            return Err(Error::shape(format!(
                "mask {rows}x{cols} needs {} bits, got {}",
                rows * cols,
                bits.len()
            )));
        }
        Ok(Self { rows, cols, bits })
    }

    pub fn filled(rows: usize, cols: usize, downsample: bool) -> Self {
        assert!(rows > 0 && cols > 0, "mask dims must be positive");
        Self {
            rows,
            cols,
            bits: vec![downsample; rows * cols],
        }
    }

    /// Downsample everywhere.
    pub fn ones(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, true)
    }

    /// Retain resolution everywhere.
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, false)
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                bits.push(f(i, j));
            }
        }
        Self { rows, cols, bits }
    }

    /// Alternating pattern; `(0, 0)` is downsampled.
    pub fn checkerboard(rows: usize, cols: usize) -> Self {
        Self::from_fn(rows, cols, |i, j| (i + j) % 2 == 0)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, downsample: bool) {
        self.bits[i * self.cols + j] = downsample;
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn count_zeros(&self) -> usize {
        self.bits.len() - self.count_ones()
    }

    /// Fraction of 1-bits (downsampled patches).
    pub fn active_fraction(&self) -> f64 {
        self.count_ones() as f64 / self.bits.len() as f64
    }

    pub fn inverted(&self) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            bits: self.bits.iter().map(|b| !b).collect(),
        }
    }
}

impl fmt::Debug for DownsampleMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "DownsampleMask {}x{}", self.rows, self.cols)?;
        for i in 0..self.rows {
            for j in 0..self.cols {
                f.write_str(if self.get(i, j) { "1" } else { "0" })?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

/// A structural defect found by [`MultiResMap::violations`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QuadtreeViolation {
    pub y: usize,
    pub x: usize,
    pub message: String,
}

impl fmt::Display for QuadtreeViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{}): {}", self.y, self.x, self.message)
    }
}

/// Mixed-resolution feature map projected onto the base grid.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiResMap {
    height: usize,
    width: usize,
    channels: usize,
    factor: usize,
    stages: u32,
    levels: Vec<u8>,
    values: Vec<f32>,
}

impl MultiResMap {
    /// Wraps a dense tensor: every pixel active at level 0, no stages applied.
    pub fn from_dense(f: &DenseTensor, factor: usize) -> Result<Self> {
        if factor < 2 {
            return Err(Error::invalid(format!("downsampling factor must be >= 2, got {factor}")));
        }
        Ok(Self {
            height: f.height(),
            width: f.width(),
            channels: f.channels(),
            factor,
            stages: 0,
            levels: vec![0; f.height() * f.width()],
            values: f.data().to_vec(),
        })
    }

    /// Assembles a map from raw planes and validates the quadtree invariants.
    pub fn from_parts(
        height: usize,
        width: usize,
        channels: usize,
        factor: usize,
        stages: u32,
        levels: Vec<u8>,
        values: Vec<f32>,
    ) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::invalid("map dims must be positive"));
        }
        if factor < 2 {
            return Err(Error::invalid(format!("downsampling factor must be >= 2, got {factor}")));
        }
        if levels.len() != height * width || values.len() != height * width * channels {
            return Err(Error::shape("level or value plane length does not match map dims"));
        }
        let map = Self::from_parts_unchecked(height, width, channels, factor, stages, levels, values);
        if let Some(v) = map.violations().first() {
            return Err(Error::invalid(format!("invalid multi-resolution map: {v}")));
        }
        Ok(map)
    }

    /// Assembles a map without validation. Intended for negative controls of
    /// the quadtree checker; other operations assume a valid map.
    pub fn from_parts_unchecked(
        height: usize,
        width: usize,
        channels: usize,
        factor: usize,
        stages: u32,
        levels: Vec<u8>,
        values: Vec<f32>,
    ) -> Self {
        Self {
            height,
            width,
            channels,
            factor,
            stages,
            levels,
            values,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn factor(&self) -> usize {
        self.factor
    }

    /// Number of adaptive downsampling stages applied so far.
    pub fn stages(&self) -> u32 {
        self.stages
    }

    pub fn levels(&self) -> &[u8] {
        &self.levels
    }

    /// Raw value plane; inactive entries are unspecified.
    pub fn raw_values(&self) -> &[f32] {
        &self.values
    }

    #[inline]
    pub fn level(&self, y: usize, x: usize) -> u8 {
        self.levels[y * self.width + x]
    }

    pub fn max_level(&self) -> u8 {
        self.levels.iter().copied().max().unwrap_or(0)
    }

    #[inline]
    pub(crate) fn block_size(&self, level: u8) -> usize {
        self.factor.pow(level as u32)
    }

    /// Top-left corner of the block containing `(y, x)`.
    #[inline]
    pub fn representative(&self, y: usize, x: usize) -> (usize, usize) {
        let s = self.block_size(self.level(y, x));
        (y / s * s, x / s * s)
    }

    #[inline]
    pub fn is_active(&self, y: usize, x: usize) -> bool {
        self.representative(y, x) == (y, x)
    }

    #[inline]
    fn raw_pixel(&self, y: usize, x: usize) -> &[f32] {
        let start = (y * self.width + x) * self.channels;
        &self.values[start..start + self.channels]
    }

    /// Channels stored at an active position, `None` if `(y, x)` is inactive.
    pub fn active_value(&self, y: usize, x: usize) -> Option<&[f32]> {
        self.is_active(y, x).then(|| self.raw_pixel(y, x))
    }

    /// Channels of `(y, x)` after representative fill: the pixel's own value
    /// when active, its block representative's value otherwise.
    #[inline]
    pub fn resolved(&self, y: usize, x: usize) -> &[f32] {
        let (ry, rx) = self.representative(y, x);
        self.raw_pixel(ry, rx)
    }

    pub fn active_positions(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.height)
            .flat_map(move |y| (0..self.width).map(move |x| (y, x)))
            .filter(move |&(y, x)| self.is_active(y, x))
    }

    pub fn active_count(&self) -> usize {
        self.active_positions().count()
    }

    /// Spacing of the lattice that a regular network would produce after the
    /// stages applied so far, `d^stages`.
    pub fn lattice_stride(&self) -> usize {
        self.factor.pow(self.stages)
    }

    /// Values on the `d^stages` lattice, i.e. the positions that correspond
    /// one-to-one with the regular network's coarse feature map. Lattice
    /// positions are always active in a valid map.
    pub fn lattice_values(&self) -> DenseTensor {
        let s = self.lattice_stride();
        let (h, w) = (self.height / s, self.width / s);
        DenseTensor::from_fn(h, w, self.channels, |i, j, c| self.resolved(i * s, j * s)[c])
    }

    /// All quadtree invariant violations, in raster order. An empty result
    /// means the level field is a valid partition into aligned blocks.
    pub fn violations(&self) -> Vec<QuadtreeViolation> {
        let mut out = Vec::new();
        let mut push = |y, x, message: String| out.push(QuadtreeViolation { y, x, message });
        if self.levels.len() != self.height * self.width {
            push(0, 0, "level plane length does not match map dims".into());
            return out;
        }
        for y in 0..self.height {
            for x in 0..self.width {
                let l = self.level(y, x);
                if l as u32 > self.stages {
                    push(y, x, format!("level {l} exceeds stage count {}", self.stages));
                    continue;
                }
                let s = self.block_size(l);
                let (oy, ox) = (y / s * s, x / s * s);
                if oy + s > self.height || ox + s > self.width {
                    push(y, x, format!("level-{l} block at ({oy},{ox}) exceeds the grid"));
                    continue;
                }
                // Each block is scanned once, from its origin.
                if (oy, ox) != (y, x) {
                    if self.level(oy, ox) != l {
                        push(
                            y,
                            x,
                            format!("level {l} but block origin ({oy},{ox}) has level {}", self.level(oy, ox)),
                        );
                    }
                    continue;
                }
                for by in oy..oy + s {
                    for bx in ox..ox + s {
                        if self.level(by, bx) != l {
                            push(
                                by,
                                bx,
                                format!(
                                    "level {} inside level-{l} block at ({oy},{ox})",
                                    self.level(by, bx)
                                ),
                            );
                        }
                    }
                }
                if self.values.len() == self.height * self.width * self.channels
                    && self.raw_pixel(y, x).iter().any(|v| !v.is_finite())
                {
                    push(y, x, "active element holds a non-finite value".into());
                }
            }
        }
        out
    }
}

/// Applies adaptive downsampling to a dense feature map.
///
/// Patches with mask bit 0 keep all `d²` pixels active at level 0; patches
/// with bit 1 are reduced to one level-1 element stored at the patch's
/// top-left pixel.
pub fn adaptive_downsample(
    f: &DenseTensor,
    mask: &DownsampleMask,
    d: usize,
    reducer: PatchReducer,
) -> Result<MultiResMap> {
    let base = MultiResMap::from_dense(f, d)?;
    adaptive_downsample_stage(&base, mask, reducer)
}

/// Applies one further adaptive downsampling stage to a multi-resolution map.
///
/// After `k` stages, only `d^(k+1)`-blocks made entirely of level-`k`
/// elements are eligible. Their level-`k` elements form a `d × d` patch on
/// the current coarse lattice; patches with mask bit 1 are reduced to a single
/// level-`k+1` element. Ineligible blocks are left unchanged whatever their
/// mask bit says.
pub fn adaptive_downsample_stage(
    mr: &MultiResMap,
    mask: &DownsampleMask,
    reducer: PatchReducer,
) -> Result<MultiResMap> {
    let d = mr.factor;
    let k = mr.stages;
    if k >= u8::MAX as u32 {
        return Err(Error::invalid("too many downsampling stages"));
    }
    let step = d
        .checked_pow(k)
        .ok_or_else(|| Error::invalid("downsampling factor overflow"))?;
    let block = step
        .checked_mul(d)
        .ok_or_else(|| Error::invalid("downsampling factor overflow"))?;
    if mr.height % block != 0 || mr.width % block != 0 {
        return Err(Error::shape(format!(
            "{}x{} map cannot host stage {} with {block}x{block} blocks",
            mr.height,
            mr.width,
            k + 1
        )));
    }
    let expected = (mr.height / block, mr.width / block);
    if mask.shape() != expected {
        return Err(Error::shape(format!(
            "stage {} mask must be {}x{}, got {}x{}",
            k + 1,
            expected.0,
            expected.1,
            mask.rows(),
            mask.cols()
        )));
    }

    let mut out = mr.clone();
    out.stages = k + 1;
    let level = k as u8;
    let c = mr.channels;
    let mut reduced = vec![0.0f32; c];
    let mut ignored = 0usize;
    for i in 0..expected.0 {
        for j in 0..expected.1 {
            if !mask.get(i, j) {
                continue;
            }
            let (oy, ox) = (i * block, j * block);
            let eligible = (oy..oy + block)
                .all(|y| (ox..ox + block).all(|x| mr.level(y, x) == level));
            if !eligible {
                ignored += 1;
                continue;
            }
            reducer.reduce(d, |dy, dx| mr.raw_pixel(oy + dy * step, ox + dx * step), &mut reduced);
            for y in oy..oy + block {
                for x in ox..ox + block {
                    out.levels[y * mr.width + x] = level + 1;
                }
            }
            for dy in 0..d {
                for dx in 0..d {
                    let start = ((oy + dy * step) * mr.width + ox + dx * step) * c;
                    out.values[start..start + c].fill(inactive_fill());
                }
            }
            let start = (oy * mr.width + ox) * c;
            out.values[start..start + c].copy_from_slice(&reduced);
        }
    }
    if ignored > 0 {
        log::warn!(
            "stage {}: ignored {ignored} mask bit(s) over patches that already hold finer elements",
            k + 1
        );
    }
    Ok(out)
}

/// Expands a map to a dense base-resolution tensor: inactive pixels take the
/// value of their block representative.
pub fn densify(mr: &MultiResMap) -> DenseTensor {
    let mut data = Vec::with_capacity(mr.values.len());
    for y in 0..mr.height {
        for x in 0..mr.width {
            data.extend_from_slice(mr.resolved(y, x));
        }
    }
    DenseTensor::new(mr.height, mr.width, mr.channels, data).expect("map dims are positive")
}

/// Dense grid of the elements living at exactly one level, plus the
/// occupancy bitmap saying which grid cells are represented at that level.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelGrid {
    pub level: u8,
    pub values: DenseTensor,
    pub occupied: Vec<bool>,
}

impl LevelGrid {
    pub fn is_occupied(&self, i: usize, j: usize) -> bool {
        self.occupied[i * self.values.width() + j]
    }

    pub fn occupied_count(&self) -> usize {
        self.occupied.iter().filter(|&&o| o).count()
    }
}

/// Gathers the active elements of exactly-level-`level` blocks into a grid of
/// shape `(H/d^level, W/d^level, C)`. Unoccupied cells hold 0.0.
pub fn extract_level_dense(mr: &MultiResMap, level: u8) -> Result<LevelGrid> {
    let limit = mr.stages.max(mr.max_level() as u32);
    if level as u32 > limit {
        return Err(Error::invalid(format!(
            "level {level} exceeds the map's maximum level {limit}"
        )));
    }
    let s = mr.block_size(level);
    if mr.height % s != 0 || mr.width % s != 0 {
        return Err(Error::shape(format!(
            "{}x{} map is not divisible into level-{level} blocks",
            mr.height, mr.width
        )));
    }
    let (h, w, c) = (mr.height / s, mr.width / s, mr.channels);
    let mut values = DenseTensor::zeros(h, w, c);
    let mut occupied = vec![false; h * w];
    for i in 0..h {
        for j in 0..w {
            if mr.level(i * s, j * s) == level {
                occupied[i * w + j] = true;
                let start = (i * w + j) * c;
                values.data_mut()[start..start + c].copy_from_slice(mr.raw_pixel(i * s, j * s));
            }
        }
    }
    Ok(LevelGrid {
        level,
        values,
        occupied,
    })
}
