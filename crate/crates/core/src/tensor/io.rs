//! `TNSR` container: magic, `u8` version, `u32` rank, `u32` dims, then a
//! little-endian `f32` payload.

use std::io::{Read, Write};
use std::path::Path;

use super::{Result, Tensor, TensorError};

pub const TNSR_MAGIC: &[u8; 4] = b"TNSR";
pub const TNSR_VERSION: u8 = 1;

pub fn write_tnsr(t: &Tensor<f32>, mut w: impl Write) -> std::io::Result<()> {
    let mut buf = Vec::with_capacity(9 + 4 * t.rank() + 4 * t.numel());
    buf.extend_from_slice(TNSR_MAGIC);
    buf.push(TNSR_VERSION);
    buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)
}

pub fn read_tnsr(mut r: impl Read) -> Result<Tensor<f32>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)
        .map_err(|e| TensorError::Container(e.to_string()))?;
    let bad = |m: &str| TensorError::Container(m.to_string());
    if bytes.len() < 9 || &bytes[..4] != TNSR_MAGIC {
        return Err(bad("missing TNSR magic"));
    }
    if bytes[4] != TNSR_VERSION {
        return Err(bad(&format!("unsupported version {}", bytes[4])));
    }
    let u32_at = |off: usize| -> Result<u32> {
        bytes
            .get(off..off + 4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
            .ok_or_else(|| bad("truncated header"))
    };
    let rank = u32_at(5)? as usize;
    let mut shape = Vec::with_capacity(rank);
    for i in 0..rank {
        shape.push(u32_at(9 + 4 * i)? as usize);
    }
    let start = 9 + 4 * rank;
    let n: usize = shape.iter().product();
    if bytes.len() != start + 4 * n {
        return Err(bad(&format!(
            "payload is {} bytes, shape {shape:?} needs {}",
            bytes.len().saturating_sub(start),
            4 * n
        )));
    }
    let data = bytes[start..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::new(shape, data)
}

pub fn write_tnsr_file(t: &Tensor<f32>, path: impl AsRef<Path>) -> std::io::Result<()> {
    let f = std::fs::File::create(path)?;
    write_tnsr(t, std::io::BufWriter::new(f))
}

pub fn read_tnsr_file(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    let f = std::fs::File::open(path)
        .map_err(|e| TensorError::Container(format!("{}: {e}", path.display())))?;
    read_tnsr(std::io::BufReader::new(f))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let t = Tensor::new([2, 1], vec![1.0f32, -0.5]).unwrap();
        let mut buf = Vec::new();
        write_tnsr(&t, &mut buf).unwrap();
        assert_eq!(&buf[..4], b"TNSR");
        assert_eq!(buf[4], 1);
        assert_eq!(&buf[5..9], &2u32.to_le_bytes());
        assert_eq!(&buf[9..13], &2u32.to_le_bytes());
        assert_eq!(&buf[13..17], &1u32.to_le_bytes());
        assert_eq!(&buf[17..21], &1.0f32.to_le_bytes());
        assert_eq!(buf.len(), 25);
    }

    #[test]
    fn rejects_corrupt_input() {
        assert!(read_tnsr(&b"TNSX\x01"[..]).is_err());
        let t = Tensor::new([3], vec![1.0f32, 2.0, 3.0]).unwrap();
        let mut buf = Vec::new();
        write_tnsr(&t, &mut buf).unwrap();
        buf.pop();
        assert!(read_tnsr(&buf[..]).is_err());
        buf[4] = 2;
        assert!(read_tnsr(&buf[..]).is_err());
    }

    proptest! {
        #[test]
        fn bit_exact_roundtrip(dims in prop::collection::vec(1usize..5, 1..4), seed in any::<u64>()) {
            let n: usize = dims.iter().product();
            let data: Vec<f32> = (0..n).map(|i| f32::from_bits((seed as u32).wrapping_mul(2654435761).wrapping_add(i as u32 * 97) & 0x7f7f_ffff)).collect();
            let t = Tensor::new(dims, data).unwrap();
            let mut buf = Vec::new();
            write_tnsr(&t, &mut buf).unwrap();
            let back = read_tnsr(&buf[..]).unwrap();
            prop_assert_eq!(back.shape(), t.shape());
            let a: Vec<u32> = back.data().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = t.data().iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(a, b);
        }
    }
}
