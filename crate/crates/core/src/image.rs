//! Image and map files: binary PGM (`P5`) and PPM (`P6`) at 8 or 16 bits,
//! and a raw planar float format.
//!
//! The float format is a 16-byte header, `"DPTF"` followed by `u32`
//! channels, height and width (little-endian), then `C*H*W` little-endian
//! `f32` values in channel-major order.

use std::path::Path;

use dpt_tensor::{Scalar, Tensor};

use crate::error::{DptError, Result};

pub const FLOAT_MAGIC: &[u8; 4] = b"DPTF";

fn image_err(msg: impl Into<String>) -> DptError {
    DptError::Image(msg.into())
}

/// Planar image with samples stored as read (not normalized).
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Largest representable sample; `None` for float images.
    pub maxval: Option<u16>,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(image_err(format!(
                "{} samples for a {channels}x{height}x{width} image",
                data.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            maxval: None,
            data,
        })
    }

    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Result<Self> {
        let (c, h, w) = match *t.shape() {
            [h, w] => (1, h, w),
            [c, h, w] => (c, h, w),
            ref s => return Err(image_err(format!("cannot store a tensor of shape {s:?} as an image"))),
        };
        Self::new(c, h, w, t.data().iter().map(|v| v.as_f64() as f32).collect())
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_fn(&[self.channels, self.height, self.width], |i| T::lit(self.data[i] as f64))
    }

    /// Single channel as an `H x W` tensor.
    pub fn plane<T: Scalar>(&self, c: usize) -> Tensor<T> {
        let n = self.height * self.width;
        Tensor::from_fn(&[self.height, self.width], |i| T::lit(self.data[c * n + i] as f64))
    }
}

/// Per-channel `((x / maxval) - mean) / std`.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalization {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for Normalization {
    fn default() -> Self {
        Self {
            mean: [0.5; 3],
            std: [0.5; 3],
        }
    }
}

impl Normalization {
    pub fn identity() -> Self {
        Self {
            mean: [0.0; 3],
            std: [1.0; 3],
        }
    }

    /// `3 x H x W` network input. Grey images are replicated to three
    /// channels; float images are taken as already in `[0, 1]`.
    pub fn apply<T: Scalar>(&self, img: &Image) -> Result<Tensor<T>> {
        let src: Vec<usize> = match img.channels {
            1 => vec![0, 0, 0],
            3 => vec![0, 1, 2],
            c => return Err(image_err(format!("expected 1 or 3 channels, got {c}"))),
        };
        let scale = img.maxval.map_or(1.0, |m| m as f64);
        let n = img.height * img.width;
        Ok(Tensor::from_fn(&[3, img.height, img.width], |i| {
            let (c, p) = (i / n, i % n);
            let x = img.data[src[c] * n + p] as f64 / scale;
            T::lit((x - self.mean[c]) / self.std[c])
        }))
    }
}

fn next_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a str> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(image_err("truncated header"));
    }
    std::str::from_utf8(&bytes[start..*pos]).map_err(|_| image_err("header is not ASCII"))
}

fn header_number(bytes: &[u8], pos: &mut usize, what: &str) -> Result<usize> {
    let tok = next_token(bytes, pos)?;
    tok.parse()
        .map_err(|_| image_err(format!("bad {what} `{tok}` in header")))
}

pub fn decode_netpbm(bytes: &[u8]) -> Result<Image> {
    let mut pos = 0;
    let channels = match next_token(bytes, &mut pos)? {
        "P5" => 1,
        "P6" => 3,
        m => return Err(image_err(format!("unsupported format `{m}`, expected P5 or P6"))),
    };
    let width = header_number(bytes, &mut pos, "width")?;
    let height = header_number(bytes, &mut pos, "height")?;
    let maxval = header_number(bytes, &mut pos, "maxval")?;
    if maxval == 0 || maxval > 65535 {
        return Err(image_err(format!("maxval {maxval} out of range")));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let wide = maxval > 255;
    let bps = if wide { 2 } else { 1 };
    let n = width * height;
    let need = n * channels * bps;
    let raster = bytes
        .get(pos..pos + need)
        .ok_or_else(|| image_err(format!("truncated raster: need {need} bytes, have {}", bytes.len().saturating_sub(pos))))?;
    let mut data = vec![0.0f32; n * channels];
    for p in 0..n {
        for c in 0..channels {
            let k = (p * channels + c) * bps;
            let v = if wide {
                u16::from_be_bytes([raster[k], raster[k + 1]])
            } else {
                raster[k] as u16
            };
            data[c * n + p] = v as f32;
        }
    }
    Ok(Image {
        channels,
        height,
        width,
        maxval: Some(maxval as u16),
        data,
    })
}

/// Writes `P5` or `P6` depending on the channel count. Samples are
/// rounded and clamped to `[0, maxval]`.
pub fn encode_netpbm(img: &Image, maxval: u16) -> Result<Vec<u8>> {
    let magic = match img.channels {
        1 => "P5",
        3 => "P6",
        c => return Err(image_err(format!("netpbm stores 1 or 3 channels, got {c}"))),
    };
    if maxval == 0 {
        return Err(image_err("maxval must be positive"));
    }
    let mut out = format!("{magic}\n{} {}\n{maxval}\n", img.width, img.height).into_bytes();
    let n = img.width * img.height;
    for p in 0..n {
        for c in 0..img.channels {
            let v = img.data[c * n + p].round().clamp(0.0, maxval as f32) as u16;
            if maxval > 255 {
                out.extend_from_slice(&v.to_be_bytes());
            } else {
                out.push(v as u8);
            }
        }
    }
    Ok(out)
}

pub fn decode_float(bytes: &[u8]) -> Result<Image> {
    if bytes.len() < 16 || &bytes[..4] != FLOAT_MAGIC {
        return Err(image_err("not a float map (missing DPTF header)"));
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize;
    let (c, h, w) = (dim(0), dim(1), dim(2));
    let body = &bytes[16..];
    if body.len() != c * h * w * 4 {
        return Err(image_err(format!(
            "float map {c}x{h}x{w} needs {} data bytes, found {}",
            c * h * w * 4,
            body.len()
        )));
    }
    let data = body
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
        .collect();
    Image::new(c, h, w, data)
}

pub fn encode_float(img: &Image) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + img.data.len() * 4);
    out.extend_from_slice(FLOAT_MAGIC);
    for d in [img.channels, img.height, img.width] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in &img.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Decodes by magic bytes.
pub fn decode(bytes: &[u8]) -> Result<Image> {
    if bytes.starts_with(FLOAT_MAGIC) {
        decode_float(bytes)
    } else {
        decode_netpbm(bytes)
    }
}

pub fn read(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let bytes = std::fs::read(path)?;
    decode(&bytes).map_err(|e| image_err(format!("{}: {e}", path.display())))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Float,
    Netpbm8,
    Netpbm16,
}

impl Format {
    /// `.pgm`/`.ppm` give 8-bit netpbm, anything else the float format.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("pgm") | Some("ppm") => Format::Netpbm8,
            _ => Format::Float,
        }
    }
}

pub fn write(path: impl AsRef<Path>, img: &Image, format: Format) -> Result<()> {
    let bytes = match format {
        Format::Float => encode_float(img),
        Format::Netpbm8 => encode_netpbm(img, 255)?,
        Format::Netpbm16 => encode_netpbm(img, 65535)?,
    };
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Linearly rescales to `[0, maxval]` for viewing.
pub fn to_display(img: &Image, maxval: u16) -> Image {
    let lo = img.data.iter().cloned().fold(f32::INFINITY, f32::min);
    let hi = img.data.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let range = if hi > lo { hi - lo } else { 1.0 };
    Image {
        maxval: Some(maxval),
        data: img.data.iter().map(|v| (v - lo) / range * maxval as f32).collect(),
        ..img.clone()
    }
}

/// Mirror index without edge repetition (`dcb|abcd|cba`), folded as often
/// as needed for pads wider than the input.
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

/// Smallest multiple of `m` that is `>= n` (and at least `m`).
pub fn round_up(n: usize, m: usize) -> usize {
    n.div_ceil(m).max(1) * m
}

/// Reflect-pads a `C x H x W` tensor on the bottom and right up to the next
/// multiple of `multiple`.
pub fn pad_reflect<T: Scalar>(x: &Tensor<T>, multiple: usize) -> Result<Tensor<T>> {
    let [c, h, w] = *x.shape() else {
        return Err(image_err(format!("pad expects C x H x W, got {:?}", x.shape())));
    };
    let (ph, pw) = (round_up(h, multiple), round_up(w, multiple));
    let d = x.data();
    Ok(Tensor::from_fn(&[c, ph, pw], |i| {
        let (ch, r) = (i / (ph * pw), i % (ph * pw));
        let (y, xx) = (reflect((r / pw) as isize, h), reflect((r % pw) as isize, w));
        d[ch * h * w + y * w + xx]
    }))
}

/// Top-left `h x w` window of a `C x H x W` tensor.
pub fn crop<T: Scalar>(x: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let [c, ih, iw] = *x.shape() else {
        return Err(image_err(format!("crop expects C x H x W, got {:?}", x.shape())));
    };
    if h > ih || w > iw {
        return Err(image_err(format!("cannot crop {ih}x{iw} to {h}x{w}")));
    }
    let d = x.data();
    Ok(Tensor::from_fn(&[c, h, w], |i| {
        let (ch, r) = (i / (h * w), i % (h * w));
        d[ch * ih * iw + (r / w) * iw + r % w]
    }))
}
