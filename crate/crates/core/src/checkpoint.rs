//! Model checkpoint file format.
//!
//! A checkpoint is a single binary file mapping parameter name -> shape ->
//! flat float64 values, versioned with the leading magic string "RLAB1".
//! Layout (all integers little-endian):
//!
//! ```text
//! b"RLAB1"
//! u32  n_params
//! per parameter:
//!   u32  name_len,  name bytes (utf-8)
//!   u32  ndim,      u64 * ndim dims
//!   f64 * numel     values
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::optim::ParamStore;
use crate::tensor::Tensor;
use crate::{Error, Result};

pub const MAGIC: &[u8; 5] = b"RLAB1";

pub fn save_params(params: &ParamStore, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&(params.len() as u32).to_le_bytes())?;
    for (name, tensor) in params.iter() {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u32).to_le_bytes())?;
        w.write_all(bytes)?;
        w.write_all(&(tensor.shape().len() as u32).to_le_bytes())?;
        for &d in tensor.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in tensor.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Load a checkpoint into a fresh store. `requires_grad` is not stored in the
/// file; loaded tensors come back frozen and the owning model re-marks them.
pub fn load_params(path: &Path) -> Result<ParamStore> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 5];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::contract(format!(
            "{} is not a checkpoint: bad magic {:?}",
            path.display(),
            magic
        )));
    }
    let n = read_u32(&mut r)? as usize;
    let mut params = ParamStore::new();
    for _ in 0..n {
        let name_len = read_u32(&mut r)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| Error::contract("checkpoint parameter name is not utf-8"))?;
        let ndim = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u64(&mut r)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = vec![0.0f64; numel];
        let mut buf = [0u8; 8];
        for v in data.iter_mut() {
            r.read_exact(&mut buf)?;
            *v = f64::from_le_bytes(buf);
        }
        params.insert(name, Tensor::new(shape, data)?);
    }
    Ok(params)
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_preserves_names_shapes_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.rlab");
        let mut params = ParamStore::new();
        params.insert("emb", Tensor::new(vec![3, 2], vec![0.0, 0.5, -1.5, 2.25, 1e-30, 9.9]).unwrap());
        params.insert("head.w", Tensor::new(vec![2, 1], vec![0.125, -0.25]).unwrap());
        save_params(&params, &path).unwrap();
        let loaded = load_params(&path).unwrap();
        assert_eq!(loaded.len(), 2);
        for (name, t) in params.iter() {
            let lt = loaded.get(name).unwrap();
            assert_eq!(lt.shape(), t.shape());
            assert_eq!(lt.data(), t.data());
        }
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.bin");
        std::fs::write(&path, b"NOPE!xxxxxxxx").unwrap();
        assert!(load_params(&path).is_err());
    }
}
