//! Binary tensor files: 8-byte magic `STQATNSR`, little-endian u32 rank,
//! u32 extents, then the payload as little-endian f64. Bit-exact and
//! self-describing.

use std::fs;
use std::path::Path;

use crate::error::{EngineError, Result};
use crate::tensor::Tensor;

pub const TENSOR_MAGIC: &[u8; 8] = b"STQATNSR";
const MAX_RANK: usize = 8;

/// Serialize a tensor to its byte representation.
pub fn tensor_bytes(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 + 4 * t.shape().len() + 8 * t.numel());
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for &e in t.shape() {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Parse a tensor from bytes, naming `origin` in every error.
pub fn tensor_from_bytes(bytes: &[u8], origin: &str) -> Result<Tensor> {
    let fail = |msg: String| EngineError::Validation(format!("{origin}: {msg}"));
    if bytes.len() < 12 {
        return Err(fail("truncated header".into()));
    }
    if &bytes[..8] != TENSOR_MAGIC {
        return Err(fail("bad magic, not a tensor file".into()));
    }
    let rank = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if rank > MAX_RANK {
        return Err(fail(format!("rank {rank} exceeds limit {MAX_RANK}")));
    }
    let header = 12 + 4 * rank;
    if bytes.len() < header {
        return Err(fail("truncated shape".into()));
    }
    let mut shape = Vec::with_capacity(rank);
    let mut numel: usize = 1;
    for i in 0..rank {
        let e = u32::from_le_bytes(bytes[12 + 4 * i..16 + 4 * i].try_into().unwrap()) as usize;
        numel = numel
            .checked_mul(e)
            .ok_or_else(|| fail("extent overflow".into()))?;
        shape.push(e);
    }
    let expect = header + 8 * numel;
    if bytes.len() != expect {
        return Err(fail(format!(
            "payload length {} does not match shape {:?} (expected {} bytes)",
            bytes.len() - header,
            shape,
            8 * numel
        )));
    }
    let data: Vec<f64> = bytes[header..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::from_vec(shape, data)
}

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    fs::write(path, tensor_bytes(t))
        .map_err(|e| EngineError::io(format!("writing tensor {}", path.display()), e))
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path)
        .map_err(|e| EngineError::io(format!("reading tensor {}", path.display()), e))?;
    tensor_from_bytes(&bytes, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_identical() {
        let t = Tensor::from_vec(
            vec![2, 3],
            vec![1.5, -0.25, 1e-300, f64::MIN_POSITIVE, 0.0, -0.0],
        )
        .unwrap();
        let bytes = tensor_bytes(&t);
        let back = tensor_from_bytes(&bytes, "test").unwrap();
        assert_eq!(back.shape(), t.shape());
        for (a, b) in t.data().iter().zip(back.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(tensor_bytes(&back), bytes);
    }

    #[test]
    fn scalar_round_trip() {
        let t = Tensor::scalar(42.5);
        let back = tensor_from_bytes(&tensor_bytes(&t), "test").unwrap();
        assert_eq!(back.shape(), &[] as &[usize]);
        assert_eq!(back.data(), &[42.5]);
    }

    #[test]
    fn corrupted_payload_names_origin() {
        let t = Tensor::from_vec(vec![4], vec![1.0; 4]).unwrap();
        let mut bytes = tensor_bytes(&t);
        bytes.truncate(bytes.len() - 8);
        let err = tensor_from_bytes(&bytes, "clips/q3/rgb.bin").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("clips/q3/rgb.bin"), "{msg}");
        assert!(msg.contains("payload"), "{msg}");
    }

    #[test]
    fn bad_magic_rejected() {
        let mut bytes = tensor_bytes(&Tensor::scalar(1.0));
        bytes[0] = b'X';
        assert!(tensor_from_bytes(&bytes, "f").is_err());
    }
}
