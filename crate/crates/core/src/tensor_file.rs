//! Raw tensor files: little-endian `u32` rank, `u32` dimensions, then the
//! values as row-major little-endian `f32`.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub fn write_tensor_file(path: impl AsRef<Path>, shape: &[usize], values: &[f32]) -> Result<()> {
    let n: usize = shape.iter().product();
    if n != values.len() {
        return Err(Error::Argument(format!(
            "shape {shape:?} holds {n} values, got {}",
            values.len()
        )));
    }
    let mut buf = Vec::with_capacity(4 * (1 + shape.len() + values.len()));
    buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &d in shape {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn read_tensor_file(path: impl AsRef<Path>) -> Result<(Vec<usize>, Vec<f32>)> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    let fail = |m: &str| Error::Format {
        path: path.to_path_buf(),
        record: "header".into(),
        message: m.to_string(),
    };
    let word = |i: usize| -> Option<u32> {
        bytes.get(4 * i..4 * i + 4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    };
    let rank = word(0).ok_or_else(|| fail("missing rank"))? as usize;
    if rank > 8 {
        return Err(fail("implausible rank"));
    }
    let shape: Vec<usize> = (0..rank)
        .map(|i| word(1 + i).map(|d| d as usize).ok_or_else(|| fail("truncated shape")))
        .collect::<Result<_>>()?;
    let n: usize = shape.iter().product();
    let offset = 4 * (1 + rank);
    if bytes.len() != offset + 4 * n {
        return Err(fail(&format!(
            "expected {} value bytes, found {}",
            4 * n,
            bytes.len().saturating_sub(offset)
        )));
    }
    let values = bytes[offset..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Ok((shape, values))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.bin");
        write_tensor_file(&p, &[2, 3], &[1.0, -2.0, 3.5, 0.0, 1e-8, 7.0]).unwrap();
        let (shape, values) = read_tensor_file(&p).unwrap();
        assert_eq!(shape, vec![2, 3]);
        assert_eq!(values, vec![1.0, -2.0, 3.5, 0.0, 1e-8, 7.0]);
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 2]).unwrap();
        assert!(read_tensor_file(&p).is_err());
        assert!(write_tensor_file(&p, &[2, 2], &[1.0]).is_err());
    }
}
