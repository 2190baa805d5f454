//! Binary greymap (P5) images, 8- or 16-bit.

use std::fs;
use std::path::Path;

use dkgh_core::{Real, Tensor};

use crate::error::{Error, IoContext, Result};

/// Raw greymap: row-major samples plus the declared maximum.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Greymap {
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    pub pixels: Vec<u16>,
}

impl Greymap {
    /// Quantizes `[0, 1]` values to 8 bits (values outside are clamped).
    pub fn from_unit(width: usize, height: usize, values: &[f64]) -> Self {
        assert_eq!(values.len(), width * height);
        Greymap {
            width,
            height,
            maxval: 255,
            pixels: values
                .iter()
                .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u16)
                .collect(),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n{}\n", self.width, self.height, self.maxval).into_bytes();
        if self.maxval < 256 {
            out.extend(self.pixels.iter().map(|&p| p as u8));
        } else {
            out.extend(self.pixels.iter().flat_map(|p| p.to_be_bytes()));
        }
        out
    }

    pub fn decode(bytes: &[u8], origin: &Path) -> Result<Self> {
        let bad = |msg: &str| Error::parse(origin, None, format!("PGM: {msg}"));
        if bytes.len() < 2 || &bytes[..2] != b"P5" {
            return Err(bad("missing P5 magic"));
        }
        let mut pos = 2;
        let mut fields = [0usize; 3];
        for f in &mut fields {
            // whitespace and comments between header fields
            loop {
                match bytes.get(pos) {
                    Some(b) if b.is_ascii_whitespace() => pos += 1,
                    Some(b'#') => {
                        while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                            pos += 1;
                        }
                    }
                    _ => break,
                }
            }
            let start = pos;
            while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
                pos += 1;
            }
            *f = std::str::from_utf8(&bytes[start..pos])
                .ok()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| bad("malformed header"))?;
        }
        if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
            return Err(bad("malformed header"));
        }
        pos += 1;
        let [width, height, maxval] = fields;
        if width == 0 || height == 0 || maxval == 0 || maxval > 65535 {
            return Err(bad("unsupported dimensions or maxval"));
        }
        let n = width * height;
        let payload = &bytes[pos..];
        let pixels: Vec<u16> = if maxval < 256 {
            if payload.len() < n {
                return Err(bad("truncated payload"));
            }
            payload[..n].iter().map(|&b| b as u16).collect()
        } else {
            if payload.len() < 2 * n {
                return Err(bad("truncated payload"));
            }
            payload[..2 * n]
                .chunks_exact(2)
                .map(|c| u16::from_be_bytes([c[0], c[1]]))
                .collect()
        };
        if pixels.iter().any(|&p| p as usize > maxval) {
            return Err(bad("sample exceeds maxval"));
        }
        Ok(Greymap {
            width,
            height,
            maxval: maxval as u16,
            pixels,
        })
    }

    /// `[1, H, W]` tensor scaled into `[0, 1]` by `maxval`.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        let m = self.maxval as f64;
        let data = self.pixels.iter().map(|&p| T::lit(p as f64 / m)).collect();
        Tensor::new(&[1, self.height, self.width], data).expect("sizes agree")
    }
}

pub fn write(path: &Path, img: &Greymap) -> Result<()> {
    fs::write(path, img.encode()).at(path)
}

pub fn read(path: &Path) -> Result<Greymap> {
    let bytes = fs::read(path).at(path)?;
    Greymap::decode(&bytes, path)
}

/// Loads a P5 file as a `[1, H, W]` tensor in `[0, 1]`.
pub fn load_image<T: Real>(path: &Path) -> Result<Tensor<T>> {
    Ok(read(path)?.to_tensor())
}
