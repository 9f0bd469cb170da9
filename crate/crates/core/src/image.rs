//! Binary PPM (P6) colour images and PGM (P5) label maps, 8 bits per sample.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{bilinear_resize_slice, Float, Tensor};

/// Interleaved RGB, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

/// Single-channel 8-bit map, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

fn header(magic: &str, w: usize, h: usize) -> Vec<u8> {
    format!("{magic}\n{w} {h}\n255\n").into_bytes()
}

/// Parses a netpbm header, returning `(width, height, data offset)`.
fn parse_header(bytes: &[u8], magic: &[u8; 2]) -> Result<(usize, usize, usize)> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(Error::format(
            0,
            format!("expected {} header", String::from_utf8_lossy(magic)),
        ));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| b.is_ascii_digit()) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::format(start as u64, "malformed header field"))?;
    }
    if fields[2] != 255 {
        return Err(Error::format(pos as u64, format!("unsupported maxval {}", fields[2])));
    }
    if !bytes.get(pos).is_some_and(|b| b.is_ascii_whitespace()) {
        return Err(Error::format(pos as u64, "missing whitespace after header"));
    }
    Ok((fields[0], fields[1], pos + 1))
}

fn body(bytes: &[u8], offset: usize, len: usize) -> Result<Vec<u8>> {
    let data = &bytes[offset.min(bytes.len())..];
    if data.len() != len {
        return Err(Error::format(
            offset as u64,
            format!("expected {len} pixel bytes, found {}", data.len()),
        ));
    }
    Ok(data.to_vec())
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::dim(format!(
                "{} bytes for a {width}x{height} RGB image",
                data.len()
            )));
        }
        Ok(RgbImage { width, height, data })
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = header("P6", self.width, self.height);
        out.extend_from_slice(&self.data);
        out
    }

    pub fn from_ppm(bytes: &[u8]) -> Result<Self> {
        let (w, h, off) = parse_header(bytes, b"P6")?;
        Self::new(w, h, body(bytes, off, w * h * 3)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_ppm()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_ppm(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }

    /// `[side, side, 3]` tensor with samples mapped from `[0, 255]` to
    /// `[-1, 1]`, resized bilinearly (box-averaged for integer downscales).
    pub fn to_tensor<T: Float>(&self, side: usize) -> Result<Tensor<T>> {
        if self.width != self.height {
            return Err(Error::dim(format!(
                "only square images are supported, got {}x{}",
                self.width, self.height
            )));
        }
        let src: Vec<f64> = self.data.iter().map(|&v| v as f64 / 127.5 - 1.0).collect();
        let s = self.width;
        let out = if side == s {
            src
        } else if side < s && s.is_multiple_of(side) {
            let k = s / side;
            let mut out = vec![0.0; side * side * 3];
            for y in 0..s {
                for x in 0..s {
                    for c in 0..3 {
                        out[((y / k) * side + x / k) * 3 + c] += src[(y * s + x) * 3 + c];
                    }
                }
            }
            let norm = (k * k) as f64;
            out.iter_mut().for_each(|v| *v /= norm);
            out
        } else {
            bilinear_resize_slice(&src, s, s, 3, side, side)
        };
        Tensor::from_f64([side, side, 3], &out)
    }
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::dim(format!(
                "{} bytes for a {width}x{height} gray image",
                data.len()
            )));
        }
        Ok(GrayImage { width, height, data })
    }

    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = header("P5", self.width, self.height);
        out.extend_from_slice(&self.data);
        out
    }

    pub fn from_pgm(bytes: &[u8]) -> Result<Self> {
        let (w, h, off) = parse_header(bytes, b"P5")?;
        Self::new(w, h, body(bytes, off, w * h)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_pgm()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_pgm(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}
