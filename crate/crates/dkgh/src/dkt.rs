//! DKT1 tensor files: `"DKT1"`, dtype tag (u8, 0 = f64, 1 = f32), rank (u8),
//! `rank` little-endian u32 dimensions, then the little-endian payload.

use std::fs;
use std::path::Path;

use dkgh_core::{DType, Real, Tensor};

use crate::error::{Error, IoContext, Result};

const MAGIC: &[u8; 4] = b"DKT1";

pub fn encode<T: Real>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(6 + 4 * t.rank() + t.numel() * T::DTYPE.size());
    out.extend_from_slice(MAGIC);
    out.push(T::DTYPE.tag());
    out.push(u8::try_from(t.rank()).expect("rank fits in a byte"));
    for &d in t.shape() {
        out.extend_from_slice(&u32::try_from(d).expect("dimension fits in u32").to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(&mut out);
    }
    out
}

/// Parses a DKT1 buffer; `origin` only labels error messages.
pub fn decode<T: Real>(bytes: &[u8], origin: &Path) -> Result<Tensor<T>> {
    let bad = |msg: String| Error::parse(origin, None, msg);
    if bytes.len() < 6 || &bytes[..4] != MAGIC {
        return Err(bad("not a DKT1 tensor file".into()));
    }
    let dtype = DType::from_tag(bytes[4]).ok_or_else(|| bad(format!("unknown dtype tag {}", bytes[4])))?;
    if dtype != T::DTYPE {
        return Err(bad(format!("stored as {dtype:?}, expected {:?}", T::DTYPE)));
    }
    let rank = bytes[5] as usize;
    let dims_end = 6 + 4 * rank;
    if bytes.len() < dims_end {
        return Err(bad("truncated header".into()));
    }
    let shape: Vec<usize> = bytes[6..dims_end]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    let numel: usize = shape.iter().product();
    let size = dtype.size();
    let payload = &bytes[dims_end..];
    if payload.len() != numel * size {
        return Err(bad(format!(
            "payload holds {} bytes, shape {shape:?} needs {}",
            payload.len(),
            numel * size
        )));
    }
    let data = payload.chunks_exact(size).map(T::read_le).collect();
    Ok(Tensor::new(&shape, data)?)
}

pub fn write<T: Real>(path: &Path, t: &Tensor<T>) -> Result<()> {
    fs::write(path, encode(t)).at(path)
}

pub fn read<T: Real>(path: &Path) -> Result<Tensor<T>> {
    let bytes = fs::read(path).at(path)?;
    decode(&bytes, path)
}

/// Dtype recorded in a DKT1 file header.
pub fn peek_dtype(path: &Path) -> Result<DType> {
    let bytes = fs::read(path).at(path)?;
    if bytes.len() < 6 || &bytes[..4] != MAGIC {
        return Err(Error::parse(path, None, "not a DKT1 tensor file"));
    }
    DType::from_tag(bytes[4]).ok_or_else(|| Error::parse(path, None, format!("unknown dtype tag {}", bytes[4])))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_as_documented() {
        let t = Tensor::<f32>::from_f64(&[2, 1], &[1.0, -2.0]).unwrap();
        let b = encode(&t);
        assert_eq!(&b[..4], b"DKT1");
        assert_eq!(b[4], 1);
        assert_eq!(b[5], 2);
        assert_eq!(&b[6..14], &[2, 0, 0, 0, 1, 0, 0, 0]);
        assert_eq!(&b[14..18], &1.0f32.to_le_bytes());
        assert_eq!(b.len(), 22);
    }

    #[test]
    fn scalar_round_trip() {
        let t = Tensor::<f64>::scalar(-0.0);
        let back: Tensor<f64> = decode(&encode(&t), Path::new("x")).unwrap();
        assert_eq!(back.shape(), &[] as &[usize]);
        assert_eq!(back.data()[0].to_bits(), (-0.0f64).to_bits());
    }

    #[test]
    fn corrupt_input_rejected() {
        let t = Tensor::<f64>::ones(&[3]);
        let mut b = encode(&t);
        assert!(decode::<f32>(&b, Path::new("x")).is_err());
        b.pop();
        assert!(decode::<f64>(&b, Path::new("x")).is_err());
        assert!(decode::<f64>(b"DKT0\0\0", Path::new("x")).is_err());
    }
}
