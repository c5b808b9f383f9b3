//! Binary and text file formats.
//!
//! | magic  | content                                                      |
//! |--------|--------------------------------------------------------------|
//! | `MRT1` | dense tensor: H, W, C (u32 LE), then H·W·C f32 LE            |
//! | `MRM1` | multi-resolution map: H, W, C, d (u32 LE), H·W level bytes,  |
//! |        | then the H·W·C f32 value plane (inactive entries 0.0)        |
//! | `MSK1` | mask: rows, cols (u32 LE), then bits row-major, MSB first    |
//! | `MRW1` | weights: per conv K, Cin, Cout (u32 LE), K²·Cin·Cout weights |
//! |        | in (ky, kx, ci, co) order, Cout biases (all f32 LE)          |
//!
//! `MRM1` carries no stage count; decoding assumes as many stages as the
//! deepest level present.
//!
//! Network specs are UTF-8 text with one item per line:
//!
//! ```text
//! name: toy
//! n_adaptive: 2
//! input: 32 32 3
//! conv 3 3 8 relu bias
//! down 2 uniform
//! ```
//!
//! Blank lines and `#` comments are ignored.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::masks::LabelMap;
use crate::multires::{DownsampleMask, MultiResMap};
use crate::network::{Item, NetworkSpec};
use crate::tensor::{ConvLayer, DenseTensor, PatchReducer};

/// A decoding failure before the file path is attached.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecodeError {
    pub offset: usize,
    pub msg: String,
}

impl DecodeError {
    fn new(offset: usize, msg: impl Into<String>) -> Self {
        Self {
            offset,
            msg: msg.into(),
        }
    }

    pub fn at(self, path: &Path) -> Error {
        Error::Format {
            path: path.to_path_buf(),
            offset: self.offset,
            msg: self.msg,
        }
    }
}

type Decoded<T> = std::result::Result<T, DecodeError>;

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize, what: &str) -> Decoded<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(DecodeError::new(
                self.pos,
                format!(
                    "truncated: expected {n} byte(s) of {what}, {} left",
                    self.bytes.len() - self.pos
                ),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn magic(&mut self, magic: &[u8; 4]) -> Decoded<()> {
        let start = self.pos;
        let got = self.take(4, "magic")?;
        if got != magic {
            return Err(DecodeError::new(
                start,
                format!("bad magic {:?}, expected {:?}", String::from_utf8_lossy(got), std::str::from_utf8(magic).unwrap()),
            ));
        }
        Ok(())
    }

    fn u32(&mut self, what: &str) -> Decoded<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn dim(&mut self, what: &str) -> Decoded<usize> {
        let at = self.pos;
        let v = self.u32(what)? as usize;
        if v == 0 {
            return Err(DecodeError::new(at, format!("{what} must be positive")));
        }
        Ok(v)
    }

    fn f32s(&mut self, n: usize, what: &str) -> Decoded<Vec<f32>> {
        let len = n
            .checked_mul(4)
            .ok_or_else(|| DecodeError::new(self.pos, format!("{what} length overflows")))?;
        let b = self.take(len, what)?;
        Ok(b.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
    }

    fn finish(&self) -> Decoded<()> {
        if self.pos != self.bytes.len() {
            return Err(DecodeError::new(
                self.pos,
                format!("{} trailing byte(s)", self.bytes.len() - self.pos),
            ));
        }
        Ok(())
    }
}

fn checked_area(offset: usize, dims: &[usize]) -> Decoded<usize> {
    dims.iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .filter(|&n| n <= 1 << 32)
        .ok_or_else(|| DecodeError::new(offset, "dimensions too large"))
}

fn push_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn push_f32s(out: &mut Vec<u8>, vs: &[f32]) {
    for v in vs {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn encode_tensor(t: &DenseTensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + t.data().len() * 4);
    out.extend_from_slice(b"MRT1");
    push_u32(&mut out, t.height());
    push_u32(&mut out, t.width());
    push_u32(&mut out, t.channels());
    push_f32s(&mut out, t.data());
    out
}

pub fn decode_tensor(bytes: &[u8]) -> Decoded<DenseTensor> {
    let mut c = Cursor::new(bytes);
    c.magic(b"MRT1")?;
    let h = c.dim("height")?;
    let w = c.dim("width")?;
    let ch = c.dim("channels")?;
    let n = checked_area(4, &[h, w, ch])?;
    let data = c.f32s(n, "tensor values")?;
    c.finish()?;
    Ok(DenseTensor::new(h, w, ch, data).expect("length checked"))
}

pub fn encode_multires(mr: &MultiResMap) -> Vec<u8> {
    let mut out = Vec::with_capacity(20 + mr.levels().len() * (1 + 4 * mr.channels()));
    out.extend_from_slice(b"MRM1");
    push_u32(&mut out, mr.height());
    push_u32(&mut out, mr.width());
    push_u32(&mut out, mr.channels());
    push_u32(&mut out, mr.factor());
    out.extend_from_slice(mr.levels());
    for y in 0..mr.height() {
        for x in 0..mr.width() {
            match mr.active_value(y, x) {
                Some(v) => push_f32s(&mut out, v),
                None => push_f32s(&mut out, &vec![0.0; mr.channels()]),
            }
        }
    }
    out
}

pub fn decode_multires(bytes: &[u8]) -> Decoded<MultiResMap> {
    let mut c = Cursor::new(bytes);
    c.magic(b"MRM1")?;
    let h = c.dim("height")?;
    let w = c.dim("width")?;
    let ch = c.dim("channels")?;
    let d_at = c.pos;
    let d = c.u32("factor")? as usize;
    if d < 2 {
        return Err(DecodeError::new(d_at, format!("factor must be >= 2, got {d}")));
    }
    let area = checked_area(4, &[h, w])?;
    let levels_at = c.pos;
    let levels = c.take(area, "level plane")?.to_vec();
    let n = checked_area(4, &[h, w, ch])?;
    let values = c.f32s(n, "value plane")?;
    c.finish()?;
    let stages = levels.iter().copied().max().unwrap_or(0) as u32;
    MultiResMap::from_parts(h, w, ch, d, stages, levels, values)
        .map_err(|e| DecodeError::new(levels_at, e.to_string()))
}

pub fn encode_mask(m: &DownsampleMask) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + m.bits().len().div_ceil(8));
    out.extend_from_slice(b"MSK1");
    push_u32(&mut out, m.rows());
    push_u32(&mut out, m.cols());
    for chunk in m.bits().chunks(8) {
        let mut byte = 0u8;
        for (i, &b) in chunk.iter().enumerate() {
            if b {
                byte |= 0x80 >> i;
            }
        }
        out.push(byte);
    }
    out
}

pub fn decode_mask(bytes: &[u8]) -> Decoded<DownsampleMask> {
    let mut c = Cursor::new(bytes);
    c.magic(b"MSK1")?;
    let rows = c.dim("rows")?;
    let cols = c.dim("cols")?;
    let n = checked_area(4, &[rows, cols])?;
    let packed = c.take(n.div_ceil(8), "mask bits")?;
    c.finish()?;
    let bits = (0..n).map(|i| packed[i / 8] & (0x80 >> (i % 8)) != 0).collect();
    Ok(DownsampleMask::new(rows, cols, bits).expect("length checked"))
}

/// Parameters of one conv as stored in an `MRW1` file.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams {
    pub kernel_size: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub weights: Vec<f32>,
    pub bias: Vec<f32>,
    /// Byte offset of this record in the file.
    pub offset: usize,
}

pub fn encode_weights(spec: &NetworkSpec) -> Vec<u8> {
    let mut out = b"MRW1".to_vec();
    for l in spec.convs() {
        push_u32(&mut out, l.kernel_size());
        push_u32(&mut out, l.in_channels());
        push_u32(&mut out, l.out_channels());
        push_f32s(&mut out, l.weights());
        match l.bias() {
            Some(b) => push_f32s(&mut out, b),
            None => push_f32s(&mut out, &vec![0.0; l.out_channels()]),
        }
    }
    out
}

pub fn decode_weights(bytes: &[u8]) -> Decoded<Vec<ConvParams>> {
    let mut c = Cursor::new(bytes);
    c.magic(b"MRW1")?;
    let mut out = Vec::new();
    while c.pos < bytes.len() {
        let offset = c.pos;
        let k = c.dim("kernel size")?;
        let cin = c.dim("in channels")?;
        let cout = c.dim("out channels")?;
        let n = checked_area(offset, &[k, k, cin, cout])?;
        let weights = c.f32s(n, "conv weights")?;
        let bias = c.f32s(cout, "conv bias")?;
        out.push(ConvParams {
            kernel_size: k,
            in_channels: cin,
            out_channels: cout,
            weights,
            bias,
            offset,
        });
    }
    Ok(out)
}

/// One line of a network spec file, before weights are attached.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ItemDesc {
    Conv {
        kernel_size: usize,
        in_channels: usize,
        out_channels: usize,
        relu: bool,
        bias: bool,
    },
    Down {
        factor: usize,
        reducer: PatchReducer,
    },
}

/// A parsed network spec file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SpecFile {
    pub name: String,
    pub n_adaptive: usize,
    pub input_dims: Option<(usize, usize, usize)>,
    pub items: Vec<ItemDesc>,
}

pub fn parse_spec(text: &str) -> Decoded<SpecFile> {
    let mut name = String::from("unnamed");
    let mut n_adaptive = 0;
    let mut input_dims = None;
    let mut items = Vec::new();
    let mut offset = 0;
    for raw in text.split_inclusive('\n') {
        let line_at = offset;
        offset += raw.len();
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |msg: String| DecodeError::new(line_at, msg);
        let num = |tok: Option<&str>, what: &str| -> Decoded<usize> {
            let tok = tok.ok_or_else(|| err(format!("missing {what}")))?;
            match tok.parse::<usize>() {
                Ok(v) if v > 0 => Ok(v),
                _ => Err(err(format!("bad {what} {tok:?}"))),
            }
        };
        if let Some(rest) = line.strip_prefix("name:") {
            name = rest.trim().to_string();
            continue;
        }
        if let Some(rest) = line.strip_prefix("n_adaptive:") {
            n_adaptive = rest
                .trim()
                .parse()
                .map_err(|_| err(format!("bad n_adaptive {:?}", rest.trim())))?;
            continue;
        }
        if let Some(rest) = line.strip_prefix("input:") {
            let mut toks = rest.split_whitespace();
            input_dims = Some((num(toks.next(), "height")?, num(toks.next(), "width")?, num(toks.next(), "channels")?));
            continue;
        }
        let mut toks = line.split_whitespace();
        match toks.next() {
            Some("conv") => {
                let kernel_size = num(toks.next(), "kernel size")?;
                let in_channels = num(toks.next(), "in channels")?;
                let out_channels = num(toks.next(), "out channels")?;
                let (mut relu, mut bias) = (false, false);
                for flag in toks {
                    match flag {
                        "relu" => relu = true,
                        "bias" => bias = true,
                        other => return Err(err(format!("unknown conv flag {other:?}"))),
                    }
                }
                if kernel_size % 2 == 0 {
                    return Err(err(format!("kernel size must be odd, got {kernel_size}")));
                }
                items.push(ItemDesc::Conv {
                    kernel_size,
                    in_channels,
                    out_channels,
                    relu,
                    bias,
                });
            }
            Some("down") => {
                let factor = num(toks.next(), "factor")?;
                let reducer = toks
                    .next()
                    .ok_or_else(|| err("missing reducer".into()))?
                    .parse::<PatchReducer>()
                    .map_err(|e| err(e.to_string()))?;
                if let Some(extra) = toks.next() {
                    return Err(err(format!("unexpected token {extra:?}")));
                }
                items.push(ItemDesc::Down { factor, reducer });
            }
            Some(other) => return Err(err(format!("unknown item {other:?}"))),
            None => unreachable!(),
        }
    }
    Ok(SpecFile {
        name,
        n_adaptive,
        input_dims,
        items,
    })
}

pub fn format_spec(spec: &NetworkSpec) -> String {
    let mut out = format!("name: {}\nn_adaptive: {}\n", spec.name(), spec.n_adaptive());
    if let Some((h, w, c)) = spec.input_dims() {
        out.push_str(&format!("input: {h} {w} {c}\n"));
    }
    for item in spec.items() {
        match item {
            Item::Conv(l) => {
                out.push_str(&format!("conv {} {} {}", l.kernel_size(), l.in_channels(), l.out_channels()));
                if l.relu() {
                    out.push_str(" relu");
                }
                if l.bias().is_some() {
                    out.push_str(" bias");
                }
                out.push('\n');
            }
            Item::Downsample { factor, reducer } => out.push_str(&format!("down {factor} {reducer}\n")),
        }
    }
    out
}

/// Attaches weights to a parsed spec. Errors carry the weights-file offset
/// of the offending record.
pub fn assemble_network(file: &SpecFile, weights: &[ConvParams], weights_len: usize) -> Decoded<NetworkSpec> {
    let mut params = weights.iter();
    let mut items = Vec::with_capacity(file.items.len());
    for desc in &file.items {
        match *desc {
            ItemDesc::Conv {
                kernel_size,
                in_channels,
                out_channels,
                relu,
                bias,
            } => {
                let p = params
                    .next()
                    .ok_or_else(|| DecodeError::new(weights_len, "fewer weight records than convs in the spec"))?;
                if (p.kernel_size, p.in_channels, p.out_channels) != (kernel_size, in_channels, out_channels) {
                    return Err(DecodeError::new(
                        p.offset,
                        format!(
                            "record is {}x{} {}->{}, spec expects {kernel_size}x{kernel_size} {in_channels}->{out_channels}",
                            p.kernel_size, p.kernel_size, p.in_channels, p.out_channels
                        ),
                    ));
                }
                let layer = ConvLayer::new(kernel_size, in_channels, out_channels, p.weights.clone())
                    .map_err(|e| DecodeError::new(p.offset, e.to_string()))?
                    .with_relu(relu);
                let layer = if bias {
                    layer
                        .with_bias(p.bias.clone())
                        .map_err(|e| DecodeError::new(p.offset, e.to_string()))?
                } else {
                    layer
                };
                items.push(Item::Conv(layer));
            }
            ItemDesc::Down { factor, reducer } => items.push(Item::Downsample { factor, reducer }),
        }
    }
    if let Some(extra) = params.next() {
        return Err(DecodeError::new(extra.offset, "more weight records than convs in the spec"));
    }
    let spec = NetworkSpec::new(file.name.clone(), items, file.n_adaptive).map_err(|e| DecodeError::new(0, e.to_string()))?;
    Ok(match file.input_dims {
        Some(d) => spec.with_input_dims(d),
        None => spec,
    })
}

/// Keypoints as text, one `y x` pair per line.
pub fn parse_keypoints(text: &str) -> Decoded<Vec<(usize, usize)>> {
    let mut out = Vec::new();
    let mut offset = 0;
    for raw in text.split_inclusive('\n') {
        let at = offset;
        offset += raw.len();
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        let parsed = match toks.as_slice() {
            [y, x] => y.parse().ok().zip(x.parse().ok()),
            _ => None,
        };
        out.push(parsed.ok_or_else(|| DecodeError::new(at, format!("expected \"y x\", got {line:?}")))?);
    }
    Ok(out)
}

fn pgm_header(bytes: &[u8]) -> Decoded<(usize, usize, usize, usize)> {
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(DecodeError::new(pos, "truncated PGM header"));
        }
        fields.push((start, std::str::from_utf8(&bytes[start..pos]).unwrap_or("")));
    }
    if fields[0].1 != "P5" {
        return Err(DecodeError::new(0, format!("not a binary PGM (magic {:?})", fields[0].1)));
    }
    let mut nums = [0usize; 3];
    for (i, (at, tok)) in fields[1..].iter().enumerate() {
        nums[i] = tok
            .parse()
            .ok()
            .filter(|&v| v > 0)
            .ok_or_else(|| DecodeError::new(*at, format!("bad PGM header field {tok:?}")))?;
    }
    if nums[2] > 65535 {
        return Err(DecodeError::new(fields[3].0, "PGM maxval above 65535"));
    }
    // exactly one whitespace byte separates the header from the raster
    Ok((nums[0], nums[1], nums[2], pos + 1))
}

fn pgm_samples(bytes: &[u8]) -> Decoded<(usize, usize, usize, Vec<u16>)> {
    let (w, h, maxval, start) = pgm_header(bytes)?;
    let bpp = if maxval > 255 { 2 } else { 1 };
    let n = checked_area(start, &[w, h])?;
    let mut c = Cursor::new(bytes);
    c.pos = start.min(bytes.len());
    let raster = c.take(n * bpp, "PGM raster")?;
    c.finish()?;
    let samples = if bpp == 1 {
        raster.iter().map(|&v| v as u16).collect()
    } else {
        raster.chunks_exact(2).map(|b| u16::from_be_bytes([b[0], b[1]])).collect()
    };
    Ok((w, h, maxval, samples))
}

/// Binary PGM as a single-channel tensor scaled to `[0, 1]`.
pub fn decode_pgm(bytes: &[u8]) -> Decoded<DenseTensor> {
    let (w, h, maxval, samples) = pgm_samples(bytes)?;
    let data = samples.iter().map(|&v| v as f32 / maxval as f32).collect();
    Ok(DenseTensor::new(h, w, 1, data).expect("length checked"))
}

/// Mask visualization: 0 (dark) = retain, 255 (bright) = downsample.
pub fn encode_mask_pgm(m: &DownsampleMask) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", m.cols(), m.rows()).into_bytes();
    out.extend(m.bits().iter().map(|&b| if b { 255u8 } else { 0 }));
    out
}

/// Grayscale image from a tensor with values in `[0, 1]` (clamped).
pub fn encode_gray_pgm(t: &DenseTensor) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", t.width(), t.height()).into_bytes();
    out.extend(
        (0..t.height())
            .flat_map(|y| (0..t.width()).map(move |x| (y, x)))
            .map(|(y, x)| (t.get(y, x, 0).clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    out
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<DenseTensor> {
    let path = path.as_ref();
    decode_tensor(&read_file(path)?).map_err(|e| e.at(path))
}

pub fn write_tensor(path: impl AsRef<Path>, t: &DenseTensor) -> Result<()> {
    write_file(path.as_ref(), &encode_tensor(t))
}

/// Reads an `MRT1` tensor or a binary PGM, chosen by magic bytes.
pub fn read_image(path: impl AsRef<Path>) -> Result<DenseTensor> {
    let path = path.as_ref();
    let bytes = read_file(path)?;
    if bytes.starts_with(b"P5") {
        decode_pgm(&bytes).map_err(|e| e.at(path))
    } else {
        decode_tensor(&bytes).map_err(|e| e.at(path))
    }
}

pub fn read_multires(path: impl AsRef<Path>) -> Result<MultiResMap> {
    let path = path.as_ref();
    decode_multires(&read_file(path)?).map_err(|e| e.at(path))
}

pub fn write_multires(path: impl AsRef<Path>, mr: &MultiResMap) -> Result<()> {
    write_file(path.as_ref(), &encode_multires(mr))
}

pub fn read_mask(path: impl AsRef<Path>) -> Result<DownsampleMask> {
    let path = path.as_ref();
    decode_mask(&read_file(path)?).map_err(|e| e.at(path))
}

pub fn write_mask(path: impl AsRef<Path>, m: &DownsampleMask) -> Result<()> {
    write_file(path.as_ref(), &encode_mask(m))
}

pub fn write_mask_pgm(path: impl AsRef<Path>, m: &DownsampleMask) -> Result<()> {
    write_file(path.as_ref(), &encode_mask_pgm(m))
}

/// Loads a spec file and its weights file into a runnable network.
pub fn read_network(spec_path: impl AsRef<Path>, weights_path: impl AsRef<Path>) -> Result<NetworkSpec> {
    let (spec_path, weights_path) = (spec_path.as_ref(), weights_path.as_ref());
    let text_bytes = read_file(spec_path)?;
    let text = std::str::from_utf8(&text_bytes).map_err(|e| DecodeError::new(e.valid_up_to(), "not UTF-8").at(spec_path))?;
    let file = parse_spec(text).map_err(|e| e.at(spec_path))?;
    let bytes = read_file(weights_path)?;
    let params = decode_weights(&bytes).map_err(|e| e.at(weights_path))?;
    assemble_network(&file, &params, bytes.len()).map_err(|e| e.at(weights_path))
}

/// Loads a spec file with zero weights and biases, enough for shape checks
/// and cost accounting.
pub fn read_network_shape(spec_path: impl AsRef<Path>) -> Result<NetworkSpec> {
    let spec_path = spec_path.as_ref();
    let text_bytes = read_file(spec_path)?;
    let text = std::str::from_utf8(&text_bytes).map_err(|e| DecodeError::new(e.valid_up_to(), "not UTF-8").at(spec_path))?;
    let file = parse_spec(text).map_err(|e| e.at(spec_path))?;
    let params: Vec<ConvParams> = file
        .items
        .iter()
        .filter_map(|d| match *d {
            ItemDesc::Conv {
                kernel_size,
                in_channels,
                out_channels,
                ..
            } => Some(ConvParams {
                kernel_size,
                in_channels,
                out_channels,
                weights: vec![0.0; kernel_size * kernel_size * in_channels * out_channels],
                bias: vec![0.0; out_channels],
                offset: 0,
            }),
            ItemDesc::Down { .. } => None,
        })
        .collect();
    assemble_network(&file, &params, 0).map_err(|e| e.at(spec_path))
}

pub fn write_network(spec_path: impl AsRef<Path>, weights_path: impl AsRef<Path>, spec: &NetworkSpec) -> Result<()> {
    write_file(spec_path.as_ref(), format_spec(spec).as_bytes())?;
    write_file(weights_path.as_ref(), &encode_weights(spec))
}

pub fn read_keypoints(path: impl AsRef<Path>) -> Result<Vec<(usize, usize)>> {
    let path = path.as_ref();
    let bytes = read_file(path)?;
    let text = std::str::from_utf8(&bytes).map_err(|e| DecodeError::new(e.valid_up_to(), "not UTF-8").at(path))?;
    parse_keypoints(text).map_err(|e| e.at(path))
}

/// Label map from a binary PGM (raw sample values) or a single-channel
/// `MRT1` tensor holding non-negative integers.
pub fn read_label_map(path: impl AsRef<Path>) -> Result<LabelMap> {
    let path = path.as_ref();
    let bytes = read_file(path)?;
    if bytes.starts_with(b"P5") {
        let (w, h, _, samples) = pgm_samples(&bytes).map_err(|e| e.at(path))?;
        return LabelMap::new(h, w, samples.into_iter().map(u32::from).collect());
    }
    let t = decode_tensor(&bytes).map_err(|e| e.at(path))?;
    if t.channels() != 1 {
        return Err(DecodeError::new(12, "label tensor must have one channel").at(path));
    }
    let mut labels = Vec::with_capacity(t.data().len());
    for (i, &v) in t.data().iter().enumerate() {
        if !(v >= 0.0 && v.fract() == 0.0 && v <= u32::MAX as f32) {
            return Err(DecodeError::new(16 + 4 * i, format!("label {v} is not a non-negative integer")).at(path));
        }
        labels.push(v as u32);
    }
    LabelMap::new(t.height(), t.width(), labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::multires::adaptive_downsample;
    use proptest::prelude::*;

    #[test]
    fn tensor_layout_is_bit_exact() {
        let t = DenseTensor::new(1, 2, 1, vec![1.0, -2.5]).unwrap();
        let bytes = encode_tensor(&t);
        let mut expected = b"MRT1".to_vec();
        expected.extend([1, 0, 0, 0, 2, 0, 0, 0, 1, 0, 0, 0]);
        expected.extend(1.0f32.to_le_bytes());
        expected.extend((-2.5f32).to_le_bytes());
        assert_eq!(bytes, expected);
    }

    #[test]
    fn truncated_tensor_reports_offset() {
        let t = DenseTensor::zeros(2, 2, 1);
        let bytes = encode_tensor(&t);
        let err = decode_tensor(&bytes[..bytes.len() - 3]).unwrap_err();
        assert_eq!(err.offset, 16);
        let err = decode_tensor(b"MRTX").unwrap_err();
        assert_eq!(err.offset, 0);
    }

    #[test]
    fn mask_bits_are_msb_first() {
        let m = DownsampleMask::new(3, 3, vec![true, false, false, false, false, false, false, true, true]).unwrap();
        let bytes = encode_mask(&m);
        assert_eq!(&bytes[12..], &[0b1000_0001, 0b1000_0000]);
        assert_eq!(decode_mask(&bytes).unwrap(), m);
    }

    #[test]
    fn multires_roundtrip_and_stage_inference() {
        let f = DenseTensor::from_fn(4, 4, 2, |y, x, c| (y * 4 + x) as f32 + c as f32 * 0.5);
        let mr = adaptive_downsample(&f, &DownsampleMask::checkerboard(2, 2), 2, PatchReducer::Max).unwrap();
        let bytes = encode_multires(&mr);
        assert_eq!(bytes.len(), 20 + 16 + 16 * 2 * 4);
        let back = decode_multires(&bytes).unwrap();
        assert_eq!(back.stages(), 1);
        assert_eq!(back.levels(), mr.levels());
        for (y, x) in mr.active_positions() {
            assert_eq!(back.active_value(y, x), mr.active_value(y, x));
        }
        let mut corrupt = bytes.clone();
        corrupt[20 + 1] = 0; // (0,1) leaves its level-1 block
        assert!(decode_multires(&corrupt).is_err());
    }

    #[test]
    fn spec_parsing() {
        let text = "# toy\nname: toy\nn_adaptive: 1\ninput: 8 8 1\nconv 3 1 2 relu bias\ndown 2 uniform\nconv 1 2 1\n";
        let file = parse_spec(text).unwrap();
        assert_eq!(file.name, "toy");
        assert_eq!(file.n_adaptive, 1);
        assert_eq!(file.input_dims, Some((8, 8, 1)));
        assert_eq!(file.items.len(), 3);
        let err = parse_spec("name: x\nconv 2 1 1\n").unwrap_err();
        assert_eq!(err.offset, 8);
        assert!(parse_spec("down 2 median\n").is_err());
        assert!(parse_spec("pool 2\n").is_err());
    }

    #[test]
    fn weights_mismatch_and_truncation() {
        let file = parse_spec("conv 3 1 2 bias\n").unwrap();
        let layer = ConvLayer::new(3, 1, 2, vec![0.5; 18]).unwrap().with_bias(vec![1.0, 2.0]).unwrap();
        let spec = NetworkSpec::new("w", vec![Item::Conv(layer)], 0).unwrap();
        let bytes = encode_weights(&spec);
        let params = decode_weights(&bytes).unwrap();
        assert_eq!(assemble_network(&file, &params, bytes.len()).unwrap().items(), spec.items());
        let err = decode_weights(&bytes[..bytes.len() - 1]).unwrap_err();
        assert!(err.msg.contains("truncated"));
        assert_eq!(err.offset, 4 + 12 + 18 * 4);
        let other = parse_spec("conv 3 1 3\n").unwrap();
        assert_eq!(assemble_network(&other, &params, bytes.len()).unwrap_err().offset, 4);
    }

    #[test]
    fn keypoints_and_pgm() {
        assert_eq!(parse_keypoints("1 2\n\n3 4 # c\n").unwrap(), vec![(1, 2), (3, 4)]);
        assert_eq!(parse_keypoints("1 2\n3\n").unwrap_err().offset, 4);
        let pgm = b"P5\n# c\n3 2\n255\n\x00\x80\xff\x00\x00\xff";
        let t = decode_pgm(pgm).unwrap();
        assert_eq!(t.dims(), (2, 3, 1));
        assert_eq!(t.get(0, 2, 0), 1.0);
        assert!((t.get(0, 1, 0) - 128.0 / 255.0).abs() < 1e-7);
        let m = DownsampleMask::new(1, 2, vec![false, true]).unwrap();
        assert_eq!(encode_mask_pgm(&m), b"P5\n2 1\n255\n\x00\xff".to_vec());
        assert!(decode_pgm(b"P5\n3 2\n255\n\x00").is_err());
    }

    proptest! {
        #[test]
        fn tensor_codec_roundtrips(h in 1usize..6, w in 1usize..6, c in 1usize..4, seed in any::<u64>()) {
            let t = DenseTensor::from_fn(h, w, c, |y, x, ch| {
                let v = seed.wrapping_mul(6364136223846793005).wrapping_add((y * 97 + x * 13 + ch) as u64);
                (v >> 40) as f32 / 1024.0 - 8000.0
            });
            prop_assert_eq!(decode_tensor(&encode_tensor(&t)).unwrap(), t);
        }

        #[test]
        fn mask_codec_roundtrips(rows in 1usize..12, cols in 1usize..12, seed in any::<u64>()) {
            let m = DownsampleMask::from_fn(rows, cols, |i, j| (seed >> ((i * cols + j) % 64)) & 1 == 1);
            prop_assert_eq!(decode_mask(&encode_mask(&m)).unwrap(), m);
        }
    }
}
