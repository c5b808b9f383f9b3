//! Dense feature maps and the regular building blocks: zero-padded
//! cross-correlation, patch reducers, regular downsampling and the Sobel
//! gradient magnitude used by the edge-mask recipe.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;

/// An `H × W × C` feature map stored row-major in `(y, x, c)` order.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseTensor {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl DenseTensor {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::invalid(format!(
                "tensor dims must be positive, got {height}x{width}x{channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::shape(format!(
                "tensor {height}x{width}x{channels} needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::filled(height, width, channels, 0.0)
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Self {
        assert!(height > 0 && width > 0 && channels > 0, "tensor dims must be positive");
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    /// Builds a tensor by evaluating `f(y, x, c)` at every element.
    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Self {
        let mut t = Self::zeros(height, width, channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    t.data[(y * width + x) * channels + c] = f(y, x, c);
                }
            }
        }
        t
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

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, value: f32) {
        self.data[(y * self.width + x) * self.channels + c] = value;
    }

    /// All channels of pixel `(y, x)`.
    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> &[f32] {
        let start = (y * self.width + x) * self.channels;
        &self.data[start..start + self.channels]
    }

    /// Largest absolute elementwise difference. Panics on shape mismatch.
    pub fn max_abs_diff(&self, other: &DenseTensor) -> f64 {
        assert_eq!(self.dims(), other.dims(), "max_abs_diff on mismatched shapes");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (*a as f64 - *b as f64).abs())
            .fold(0.0, f64::max)
    }

    /// Samples every `stride`-th pixel in both axes starting at the origin,
    /// i.e. `f[0::stride, 0::stride, :]`.
    pub fn sublattice(&self, stride: usize) -> Result<DenseTensor> {
        check_divisible(self.height, self.width, stride)?;
        let (h, w) = (self.height / stride, self.width / stride);
        let mut out = DenseTensor::zeros(h, w, self.channels);
        for y in 0..h {
            for x in 0..w {
                let src = self.pixel(y * stride, x * stride);
                let start = (y * w + x) * self.channels;
                out.data[start..start + self.channels].copy_from_slice(src);
            }
        }
        Ok(out)
    }
}

fn check_divisible(height: usize, width: usize, d: usize) -> Result<()> {
    if d == 0 || height % d != 0 || width % d != 0 {
        return Err(Error::shape(format!(
            "{height}x{width} grid is not divisible by factor {d}"
        )));
    }
    Ok(())
}

/// A same-padded 2-D cross-correlation layer with optional bias and ReLU.
///
/// Weights are stored in `(ky, kx, ci, co)` order.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    kernel_size: usize,
    in_channels: usize,
    out_channels: usize,
    weights: Vec<f32>,
    bias: Option<Vec<f32>>,
    dilation: usize,
    relu: bool,
}

impl ConvLayer {
    pub fn new(
        kernel_size: usize,
        in_channels: usize,
        out_channels: usize,
        weights: Vec<f32>,
    ) -> Result<Self> {
        if kernel_size == 0 || kernel_size % 2 == 0 {
            return Err(Error::invalid(format!(
                "kernel size must be odd and positive, got {kernel_size}"
            )));
        }
        if in_channels == 0 || out_channels == 0 {
            return Err(Error::invalid("conv channels must be positive"));
        }
        let expected = kernel_size * kernel_size * in_channels * out_channels;
        if weights.len() != expected {
            return Err(Error::invalid(format!(
                "{kernel_size}x{kernel_size} conv {in_channels}->{out_channels} needs {expected} weights, got {}",
                weights.len()
            )));
        }
        Ok(Self {
            kernel_size,
            in_channels,
            out_channels,
            weights,
            bias: None,
            dilation: 1,
            relu: false,
        })
    }

    /// Kernel whose center tap maps channel `c` to channel `c`.
    pub fn identity(kernel_size: usize, channels: usize) -> Result<Self> {
        let mut w = vec![0.0; kernel_size * kernel_size * channels * channels];
        let center = kernel_size / 2;
        for c in 0..channels {
            w[((center * kernel_size + center) * channels + c) * channels + c] = 1.0;
        }
        Self::new(kernel_size, channels, channels, w)
    }

    pub fn with_bias(mut self, bias: Vec<f32>) -> Result<Self> {
        if bias.len() != self.out_channels {
            return Err(Error::invalid(format!(
                "bias needs {} values, got {}",
                self.out_channels,
                bias.len()
            )));
        }
        self.bias = Some(bias);
        Ok(self)
    }

    pub fn with_dilation(mut self, dilation: usize) -> Result<Self> {
        if dilation == 0 {
            return Err(Error::invalid("dilation must be >= 1"));
        }
        self.dilation = dilation;
        Ok(self)
    }

    pub fn with_relu(mut self, relu: bool) -> Self {
        self.relu = relu;
        self
    }

    pub fn kernel_size(&self) -> usize {
        self.kernel_size
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn weights(&self) -> &[f32] {
        &self.weights
    }

    pub fn bias(&self) -> Option<&[f32]> {
        self.bias.as_deref()
    }

    pub fn dilation(&self) -> usize {
        self.dilation
    }

    pub fn relu(&self) -> bool {
        self.relu
    }

    /// Multiply-adds charged per produced output element.
    pub fn taps(&self) -> u64 {
        (self.kernel_size * self.kernel_size * self.in_channels * self.out_channels) as u64
    }

    /// Same layer with all weights replaced by `weight`, bias dropped and
    /// activation disabled. Used for impulse-response sweeps.
    pub fn as_unit(&self, weight: f32) -> ConvLayer {
        ConvLayer {
            weights: vec![weight; self.weights.len()],
            bias: None,
            relu: false,
            ..self.clone()
        }
    }

    /// Same layer with new weights and bias, keeping shape and flags.
    pub fn with_parameters(&self, weights: Vec<f32>, bias: Option<Vec<f32>>) -> Result<ConvLayer> {
        let layer = ConvLayer::new(self.kernel_size, self.in_channels, self.out_channels, weights)?
            .with_relu(self.relu)
            .with_dilation(self.dilation)?;
        match bias {
            Some(b) => layer.with_bias(b),
            None => Ok(layer),
        }
    }

    /// Accumulates one output pixel. `fetch(y, x)` returns the input channels
    /// at an in-bounds base position; taps outside `height × width` read zero
    /// and are skipped. Summation order is ky, then kx, then ci.
    #[inline]
    pub(crate) fn accumulate<'a, F>(
        &self,
        dilation: usize,
        y: usize,
        x: usize,
        height: usize,
        width: usize,
        fetch: F,
        out: &mut [f32],
    ) where
        F: Fn(usize, usize) -> &'a [f32],
    {
        let k = self.kernel_size;
        let half = (k / 2) as isize;
        let cin = self.in_channels;
        let cout = self.out_channels;
        let dil = dilation as isize;
        out.fill(0.0);
        for ky in 0..k {
            let iy = y as isize + (ky as isize - half) * dil;
            if iy < 0 || iy >= height as isize {
                continue;
            }
            for kx in 0..k {
                let ix = x as isize + (kx as isize - half) * dil;
                if ix < 0 || ix >= width as isize {
                    continue;
                }
                let px = fetch(iy as usize, ix as usize);
                let wbase = (ky * k + kx) * cin * cout;
                for (ci, &v) in px.iter().enumerate().take(cin) {
                    let w = &self.weights[wbase + ci * cout..wbase + (ci + 1) * cout];
                    for (acc, &wv) in out.iter_mut().zip(w) {
                        *acc += wv * v;
                    }
                }
            }
        }
        if let Some(bias) = &self.bias {
            for (acc, b) in out.iter_mut().zip(bias) {
                *acc += b;
            }
        }
        if self.relu {
            for acc in out.iter_mut() {
                if *acc < 0.0 {
                    *acc = 0.0;
                }
            }
        }
    }
}

/// Zero-padded, same-size cross-correlation using the layer's own dilation.
pub fn conv2d(input: &DenseTensor, layer: &ConvLayer) -> Result<DenseTensor> {
    conv2d_dilated(input, layer, layer.dilation)
}

/// [`conv2d`] with the layer's dilation overridden.
pub fn conv2d_dilated(input: &DenseTensor, layer: &ConvLayer, dilation: usize) -> Result<DenseTensor> {
    if input.channels != layer.in_channels {
        return Err(Error::invalid(format!(
            "conv expects {} input channels, tensor has {}",
            layer.in_channels, input.channels
        )));
    }
    if dilation == 0 {
        return Err(Error::invalid("dilation must be >= 1"));
    }
    let (h, w) = (input.height, input.width);
    let cout = layer.out_channels;
    let mut out = DenseTensor::zeros(h, w, cout);
    par::for_each_chunk(&mut out.data, w * cout, |y, row| {
        for (x, px) in row.chunks_mut(cout).enumerate() {
            layer.accumulate(dilation, y, x, h, w, |iy, ix| input.pixel(iy, ix), px);
        }
    });
    Ok(out)
}

/// The patch-wise function collapsing a `d × d × C` patch to one `C`-vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PatchReducer {
    /// Keep the top-left element (sampling every d-th element).
    UniformTopLeft,
    Max,
    Average,
}

impl PatchReducer {
    /// Reduces the `d × d` patch whose element `(dy, dx)` is `fetch(dy, dx)`.
    pub(crate) fn reduce<'a, F>(self, d: usize, fetch: F, out: &mut [f32])
    where
        F: Fn(usize, usize) -> &'a [f32],
    {
        out.copy_from_slice(fetch(0, 0));
        match self {
            PatchReducer::UniformTopLeft => {}
            PatchReducer::Max => {
                for dy in 0..d {
                    for dx in 0..d {
                        if dy == 0 && dx == 0 {
                            continue;
                        }
                        for (o, &v) in out.iter_mut().zip(fetch(dy, dx)) {
                            if v > *o {
                                *o = v;
                            }
                        }
                    }
                }
            }
            PatchReducer::Average => {
                for dy in 0..d {
                    for dx in 0..d {
                        if dy == 0 && dx == 0 {
                            continue;
                        }
                        for (o, &v) in out.iter_mut().zip(fetch(dy, dx)) {
                            *o += v;
                        }
                    }
                }
                let n = (d * d) as f32;
                for o in out.iter_mut() {
                    *o /= n;
                }
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            PatchReducer::UniformTopLeft => "uniform",
            PatchReducer::Max => "max",
            PatchReducer::Average => "avg",
        }
    }
}

impl std::str::FromStr for PatchReducer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(PatchReducer::UniformTopLeft),
            "max" => Ok(PatchReducer::Max),
            "avg" => Ok(PatchReducer::Average),
            other => Err(Error::invalid(format!(
                "unknown reducer {other:?} (expected uniform, max or avg)"
            ))),
        }
    }
}

impl std::fmt::Display for PatchReducer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Reduces every non-overlapping `d × d` patch of `f` to one element.
pub fn regular_downsample(f: &DenseTensor, d: usize, reducer: PatchReducer) -> Result<DenseTensor> {
    if d < 2 {
        return Err(Error::invalid(format!("downsampling factor must be >= 2, got {d}")));
    }
    check_divisible(f.height, f.width, d)?;
    let (h, w, c) = (f.height / d, f.width / d, f.channels);
    let mut out = DenseTensor::zeros(h, w, c);
    par::for_each_chunk(&mut out.data, w * c, |i, row| {
        for (j, px) in row.chunks_mut(c).enumerate() {
            reducer.reduce(d, |dy, dx| f.pixel(i * d + dy, j * d + dx), px);
        }
    });
    Ok(out)
}

/// Largest unnormalized Sobel magnitude reachable on inputs in `[0, 1]`:
/// `|(Gx, Gy)| = |(4, 2)| = √20`.
pub const SOBEL_MAX_MAGNITUDE: f32 = 4.472_136;

/// Normalized Sobel gradient magnitude of a single-channel image, zero
/// padded. Inputs in `[0, 1]` map to outputs in `[0, 1]`.
pub fn sobel_magnitude(gray: &DenseTensor) -> Result<DenseTensor> {
    if gray.channels != 1 {
        return Err(Error::invalid(format!(
            "sobel expects a single-channel image, got {} channels",
            gray.channels
        )));
    }
    let (h, w) = (gray.height, gray.width);
    let mut out = DenseTensor::zeros(h, w, 1);
    let at = |y: isize, x: isize| -> f32 {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            0.0
        } else {
            gray.get(y as usize, x as usize, 0)
        }
    };
    par::for_each_chunk(&mut out.data, w, |y, row| {
        let y = y as isize;
        for (x, o) in row.iter_mut().enumerate() {
            let x = x as isize;
            let right = at(y - 1, x + 1) + 2.0 * at(y, x + 1) + at(y + 1, x + 1);
            let left = at(y - 1, x - 1) + 2.0 * at(y, x - 1) + at(y + 1, x - 1);
            let below = at(y + 1, x - 1) + 2.0 * at(y + 1, x) + at(y + 1, x + 1);
            let above = at(y - 1, x - 1) + 2.0 * at(y - 1, x) + at(y - 1, x + 1);
            let (gx, gy) = (right - left, below - above);
            *o = (gx * gx + gy * gy).sqrt() / SOBEL_MAX_MAGNITUDE;
        }
    });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize) -> DenseTensor {
        DenseTensor::from_fn(h, w, 1, |y, x, _| (y * w + x) as f32)
    }

    #[test]
    fn identity_kernel_is_identity() {
        let f = DenseTensor::from_fn(5, 4, 3, |y, x, c| (y * 7 + x * 3 + c) as f32 * 0.25 - 2.0);
        let out = conv2d(&f, &ConvLayer::identity(1, 3).unwrap()).unwrap();
        assert_eq!(out, f);
        let out = conv2d(&f, &ConvLayer::identity(3, 3).unwrap()).unwrap();
        assert_eq!(out, f);
    }

    #[test]
    fn zero_kernel_annihilates() {
        let f = ramp(4, 4);
        let layer = ConvLayer::new(3, 1, 2, vec![0.0; 18])
            .unwrap()
            .with_bias(vec![0.0, 0.0])
            .unwrap();
        let out = conv2d(&f, &layer).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ones_kernel_on_ones_counts_in_bounds_taps() {
        let f = DenseTensor::filled(3, 3, 1, 1.0);
        let layer = ConvLayer::new(3, 1, 1, vec![1.0; 9]).unwrap();
        let out = conv2d(&f, &layer).unwrap();
        let expected = [4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0];
        assert_eq!(out.data(), &expected);
    }

    #[test]
    fn conv_rejects_bad_shapes() {
        assert!(matches!(
            ConvLayer::new(2, 1, 1, vec![0.0; 4]),
            Err(Error::InvalidArgument(_))
        ));
        let f = ramp(4, 4);
        let layer = ConvLayer::new(3, 2, 1, vec![0.0; 18]).unwrap();
        assert!(matches!(conv2d(&f, &layer), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn relu_clamps_negatives() {
        let f = DenseTensor::from_fn(2, 2, 1, |y, x, _| y as f32 - x as f32);
        let layer = ConvLayer::new(1, 1, 1, vec![1.0]).unwrap().with_relu(true);
        let out = conv2d(&f, &layer).unwrap();
        assert_eq!(out.data(), &[0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn downsample_reducers() {
        let f = ramp(4, 4);
        let top = regular_downsample(&f, 2, PatchReducer::UniformTopLeft).unwrap();
        assert_eq!(top.data(), &[0.0, 2.0, 8.0, 10.0]);
        let max = regular_downsample(&f, 2, PatchReducer::Max).unwrap();
        assert_eq!(max.data(), &[5.0, 7.0, 13.0, 15.0]);
        let avg = regular_downsample(&f, 2, PatchReducer::Average).unwrap();
        assert_eq!(avg.data(), &[2.5, 4.5, 10.5, 12.5]);
    }

    #[test]
    fn downsample_of_constant_is_constant() {
        let f = DenseTensor::filled(12, 12, 2, 0.3);
        for d in [2, 3, 4, 6] {
            for r in [PatchReducer::UniformTopLeft, PatchReducer::Max, PatchReducer::Average] {
                let out = regular_downsample(&f, d, r).unwrap();
                assert_eq!(out.dims(), (12 / d, 12 / d, 2));
                assert!(out.data().iter().all(|&v| (v - 0.3).abs() < 1e-7), "{r} d={d}");
            }
        }
    }

    #[test]
    fn downsample_rejects_indivisible() {
        let f = ramp(5, 4);
        assert!(matches!(
            regular_downsample(&f, 2, PatchReducer::Max),
            Err(Error::Shape(_))
        ));
    }

    /// Enumerates every binary 3×3 neighborhood; the magnitude is convex in
    /// the inputs so its maximum over [0,1]^9 sits at a vertex.
    const SOBEL_X: [[f32; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
    const SOBEL_Y: [[f32; 3]; 3] = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];

    #[test]
    fn sobel_normalizer_is_the_true_maximum() {
        let mut best = 0.0f64;
        for bits in 0u32..512 {
            let v = |i: usize| ((bits >> i) & 1) as f64;
            let (mut gx, mut gy) = (0.0, 0.0);
            for ky in 0..3 {
                for kx in 0..3 {
                    gx += SOBEL_X[ky][kx] as f64 * v(ky * 3 + kx);
                    gy += SOBEL_Y[ky][kx] as f64 * v(ky * 3 + kx);
                }
            }
            best = best.max((gx * gx + gy * gy).sqrt());
        }
        assert!((best - 20f64.sqrt()).abs() < 1e-12);
        assert!((SOBEL_MAX_MAGNITUDE as f64 - best).abs() < 1e-6);
    }

    #[test]
    fn sobel_constant_is_zero_in_interior() {
        let f = DenseTensor::filled(6, 6, 1, 0.0);
        assert!(sobel_magnitude(&f).unwrap().data().iter().all(|&v| v == 0.0));
        let f = DenseTensor::filled(6, 6, 1, 0.7);
        let s = sobel_magnitude(&f).unwrap();
        for y in 1..5 {
            for x in 1..5 {
                assert_eq!(s.get(y, x, 0), 0.0);
            }
        }
    }

    #[test]
    fn sobel_vertical_step() {
        let f = DenseTensor::from_fn(8, 8, 1, |_, x, _| if x >= 4 { 1.0 } else { 0.0 });
        let s = sobel_magnitude(&f).unwrap();
        // Away from the zero-padded border only the two columns next to the step respond.
        for y in 1..7 {
            for x in 0..7 {
                let v = s.get(y, x, 0);
                if x == 3 || x == 4 {
                    assert!((v - 4.0 / SOBEL_MAX_MAGNITUDE).abs() < 1e-6);
                } else {
                    assert_eq!(v, 0.0, "({y},{x})");
                }
            }
        }
    }

    #[test]
    fn sobel_single_pixel() {
        let f = DenseTensor::from_fn(5, 5, 1, |y, x, _| if y == 2 && x == 2 { 1.0 } else { 0.0 });
        let s = sobel_magnitude(&f).unwrap();
        for y in 0usize..5 {
            for x in 0usize..5 {
                let ring = y.abs_diff(2) <= 1 && x.abs_diff(2) <= 1 && !(y == 2 && x == 2);
                assert_eq!(s.get(y, x, 0) != 0.0, ring, "({y},{x})");
            }
        }
        assert!((s.get(2, 1, 0) - 2.0 / SOBEL_MAX_MAGNITUDE).abs() < 1e-6);
        assert!((s.get(1, 1, 0) - 2f32.sqrt() / SOBEL_MAX_MAGNITUDE).abs() < 1e-6);
    }

    #[test]
    fn sobel_rejects_multichannel() {
        let f = DenseTensor::zeros(3, 3, 2);
        assert!(matches!(sobel_magnitude(&f), Err(Error::InvalidArgument(_))));
    }
}
