//! Versioned binary checkpoint container.
//!
//! Layout (all integers little-endian):
//! ```text
//! magic      8  bytes  b"SPJEPA\x00\x01"
//! version    u32
//! digest     32 bytes  sha256 of the canonical config text
//! config_len u64, followed by the canonical config text (utf-8)
//! count      u64       number of named tensors
//! per tensor:
//!   name_len u64, name utf-8
//!   dtype    u8        0 = f32, 1 = f64
//!   ndim     u64, dims u64 each
//!   payload            numel * dtype-size bytes, little-endian
//! seed       u64
//! step       u64
//! ```

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::tensor::{Dtype, Scalar, Tensor};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"SPJEPA\x00\x01";
const VERSION: u32 = 1;

#[derive(Debug)]
pub struct CheckpointData<T: Scalar> {
    pub config: TrainConfig,
    pub tensors: BTreeMap<String, Tensor<T>>,
    pub seed: u64,
    pub step: u64,
}

fn write_u64(w: &mut impl Write, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

pub fn save_checkpoint<T: Scalar>(
    path: &Path,
    config: &TrainConfig,
    tensors: &[(String, Tensor<T>)],
    seed: u64,
    step: u64,
) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let canonical = config.canonical();
    let digest = Sha256::digest(canonical.as_bytes());
    w.write_all(&digest)?;
    write_u64(&mut w, canonical.len() as u64)?;
    w.write_all(canonical.as_bytes())?;
    write_u64(&mut w, tensors.len() as u64)?;
    for (name, t) in tensors {
        write_u64(&mut w, name.len() as u64)?;
        w.write_all(name.as_bytes())?;
        w.write_all(&[T::DTYPE as u8])?;
        write_u64(&mut w, t.shape().len() as u64)?;
        for &d in t.shape() {
            write_u64(&mut w, d as u64)?;
        }
        match T::DTYPE {
            Dtype::F32 => {
                for &v in t.data() {
                    w.write_all(&(v.to_f64() as f32).to_le_bytes())?;
                }
            }
            Dtype::F64 => {
                for &v in t.data() {
                    w.write_all(&v.to_f64().to_le_bytes())?;
                }
            }
        }
    }
    write_u64(&mut w, seed)?;
    write_u64(&mut w, step)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<CheckpointData<T>> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    let mut r = BufReader::new(file);
    let bad = |msg: String| Error::Checkpoint(format!("{}: {msg}", path.display()));

    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| bad("truncated header".into()))?;
    if &magic != MAGIC {
        return Err(bad("bad magic".into()));
    }
    let mut ver = [0u8; 4];
    r.read_exact(&mut ver)?;
    let version = u32::from_le_bytes(ver);
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let mut digest = [0u8; 32];
    r.read_exact(&mut digest)?;
    let config_len = read_u64(&mut r)? as usize;
    let mut config_bytes = vec![0u8; config_len];
    r.read_exact(&mut config_bytes)?;
    let actual: [u8; 32] = Sha256::digest(&config_bytes).into();
    if actual != digest {
        return Err(bad("config digest mismatch (corrupted checkpoint)".into()));
    }
    let config_text =
        String::from_utf8(config_bytes).map_err(|_| bad("config is not utf-8".into()))?;
    let config = TrainConfig::parse(&config_text)
        .map_err(|e| bad(format!("embedded config invalid: {e}")))?;

    let count = read_u64(&mut r)? as usize;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let name_len = read_u64(&mut r)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes).map_err(|_| bad("bad tensor name".into()))?;
        let mut dtype = [0u8; 1];
        r.read_exact(&mut dtype)?;
        if dtype[0] != T::DTYPE as u8 {
            return Err(bad(format!(
                "tensor {name}: dtype tag {} does not match requested element type",
                dtype[0]
            )));
        }
        let ndim = read_u64(&mut r)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u64(&mut r)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        match T::DTYPE {
            Dtype::F32 => {
                let mut buf = [0u8; 4];
                for _ in 0..numel {
                    r.read_exact(&mut buf).map_err(|_| bad("truncated payload".into()))?;
                    data.push(T::from_f64(f32::from_le_bytes(buf) as f64));
                }
            }
            Dtype::F64 => {
                let mut buf = [0u8; 8];
                for _ in 0..numel {
                    r.read_exact(&mut buf).map_err(|_| bad("truncated payload".into()))?;
                    data.push(T::from_f64(f64::from_le_bytes(buf)));
                }
            }
        }
        if tensors.insert(name.clone(), Tensor::from_vec(data, &shape)?).is_some() {
            return Err(bad(format!("duplicate tensor {name}")));
        }
    }
    let seed = read_u64(&mut r)?;
    let step = read_u64(&mut r)?;
    Ok(CheckpointData { config, tensors, seed, step })
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn round_trip_bit_exact() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        let cfg = TrainConfig::default();
        let t1 = Tensor::from_vec(vec![1.5f32, -2.25, 3.125], &[3]).unwrap();
        let t2 = Tensor::from_vec((0..12).map(|i| i as f32 * 0.37).collect(), &[3, 4]).unwrap();
        save_checkpoint(
            &path,
            &cfg,
            &[("x.a".to_string(), t1.clone()), ("x.b".to_string(), t2.clone())],
            99,
            1234,
        )
        .unwrap();
        let ck: CheckpointData<f32> = load_checkpoint(&path).unwrap();
        assert_eq!(ck.config, cfg);
        assert_eq!((ck.seed, ck.step), (99, 1234));
        assert_eq!(ck.tensors["x.a"].data(), t1.data());
        assert_eq!(ck.tensors["x.b"].data(), t2.data());
        assert_eq!(ck.tensors["x.b"].shape(), &[3, 4]);
    }

    #[test]
    fn bad_magic_is_checkpoint_error() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, b"NOTACKPT restoffile").unwrap();
        let err = load_checkpoint::<f32>(&path).unwrap_err();
        assert!(matches!(err, Error::Checkpoint(_)));
    }

    #[test]
    fn corrupted_config_digest_detected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("c.ckpt");
        let cfg = TrainConfig::default();
        save_checkpoint::<f32>(&path, &cfg, &[], 0, 0).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        // flip one byte inside the embedded config text
        let idx = 8 + 4 + 32 + 8 + 5;
        bytes[idx] ^= 0x01;
        std::fs::write(&path, bytes).unwrap();
        let err = load_checkpoint::<f32>(&path).unwrap_err();
        assert!(matches!(err, Error::Checkpoint(_)));
        assert!(format!("{err}").contains("digest"));
    }

    #[test]
    fn missing_file_is_checkpoint_error() {
        let err = load_checkpoint::<f32>(Path::new("/nonexistent/x.ckpt")).unwrap_err();
        assert!(matches!(err, Error::Checkpoint(_)));
    }

    #[test]
    fn dtype_mismatch_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("d.ckpt");
        let cfg = TrainConfig::default();
        let t = Tensor::from_vec(vec![1.0f64], &[1]).unwrap();
        save_checkpoint(&path, &cfg, &[("p".to_string(), t)], 0, 0).unwrap();
        assert!(load_checkpoint::<f32>(&path).is_err());
    }
}
