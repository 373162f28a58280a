//! Flat binary tensor container.
//!
//! Layout, all integers little-endian:
//!
//! | bytes        | content                      |
//! |--------------|------------------------------|
//! | 8            | magic `PHYSTNSR`             |
//! | 4            | `u32` rank `r`               |
//! | 4·r          | `u32` extents                |
//! | 4·numel      | `f32` payload, row-major     |
//!
//! Tensors of any [`Element`] are written as `f32`.

use std::io::{Read, Write};
use std::path::Path;

use super::{numel, Element, Tensor};
use crate::error::{Error, Result};

pub const TENSOR_MAGIC: &[u8; 8] = b"PHYSTNSR";

pub fn write_tensor<E: Element, W: Write>(tensor: &Tensor<E>, mut w: W) -> Result<()> {
    w.write_all(TENSOR_MAGIC)?;
    w.write_all(&(tensor.rank() as u32).to_le_bytes())?;
    for &d in tensor.shape() {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(tensor.len() * 4);
    for v in tensor.data() {
        buf.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_tensor<E: Element, R: Read>(mut r: R) -> Result<Tensor<E>> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != TENSOR_MAGIC {
        return Err(Error::Format("bad tensor magic".into()));
    }
    let rank = read_u32(&mut r)? as usize;
    if rank == 0 || rank > 16 {
        return Err(Error::Format(format!("implausible tensor rank {rank}")));
    }
    let shape = (0..rank).map(|_| read_u32(&mut r).map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
    let n = numel(&shape);
    let mut bytes = vec![0u8; n * 4];
    r.read_exact(&mut bytes)?;
    let data = bytes
        .chunks_exact(4)
        .map(|c| E::from_f64(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
        .collect();
    Tensor::new(shape, data)
}

pub fn save_tensor<E: Element>(tensor: &Tensor<E>, path: impl AsRef<Path>) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    write_tensor(tensor, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_tensor<E: Element>(path: impl AsRef<Path>) -> Result<Tensor<E>> {
    let file = std::fs::File::open(path)?;
    read_tensor(std::io::BufReader::new(file))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_layout_is_exact() {
        let t = Tensor::<f32>::new(vec![1, 2], vec![1.0, -2.5]).unwrap();
        let mut buf = Vec::new();
        write_tensor(&t, &mut buf).unwrap();
        let mut expect = b"PHYSTNSR".to_vec();
        expect.extend_from_slice(&2u32.to_le_bytes());
        expect.extend_from_slice(&1u32.to_le_bytes());
        expect.extend_from_slice(&2u32.to_le_bytes());
        expect.extend_from_slice(&1.0f32.to_le_bytes());
        expect.extend_from_slice(&(-2.5f32).to_le_bytes());
        assert_eq!(buf, expect);
        let back: Tensor<f32> = read_tensor(&buf[..]).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let t = Tensor::<f32>::ones(vec![3]);
        let mut buf = Vec::new();
        write_tensor(&t, &mut buf).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_tensor::<f32, _>(&bad[..]), Err(Error::Format(_))));
        assert!(read_tensor::<f32, _>(&buf[..buf.len() - 1]).is_err());
    }
}
