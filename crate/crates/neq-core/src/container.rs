//! Flat binary container of named tensors with a text manifest.
//!
//! Layout:
//! ```text
//! bytes 0..8    magic "NEQTENS1"
//! bytes 8..16   manifest length, u64 little-endian
//! manifest      UTF-8 TOML: free-form metadata plus a [[tensors]] array
//!               (name, dtype, shape, offset); offsets are relative to the
//!               start of the data section
//! data          concatenated element payloads, little-endian
//! ```
//! Used for model checkpoints and signature dumps.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"NEQTENS1";

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    #[serde(flatten)]
    meta: toml::Table,
    tensors: Vec<TensorEntry>,
}

pub fn write_container<T: Scalar>(
    path: &Path,
    meta: toml::Table,
    tensors: &[(String, &Tensor<T>)],
) -> Result<()> {
    let mut entries = Vec::with_capacity(tensors.len());
    let mut data = Vec::new();
    for (name, t) in tensors {
        entries.push(TensorEntry {
            name: name.clone(),
            dtype: T::DTYPE.to_string(),
            shape: t.shape().to_vec(),
            offset: data.len() as u64,
        });
        for &v in t.data() {
            v.write_le(&mut data);
        }
    }
    let manifest = toml::to_string(&Manifest { meta, tensors: entries })
        .map_err(|e| Error::Checkpoint(format!("manifest encode: {e}")))?;

    let mut out = Vec::with_capacity(16 + manifest.len() + data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    out.extend_from_slice(manifest.as_bytes());
    out.extend_from_slice(&data);

    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    f.write_all(&out).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

pub struct ContainerReader {
    pub meta: toml::Table,
    tensors: Vec<TensorEntry>,
    data: Vec<u8>,
}

impl ContainerReader {
    pub fn open(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let mlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        if bytes.len() < 16 + mlen {
            return Err(Error::Checkpoint("truncated manifest".into()));
        }
        let manifest: Manifest = toml::from_str(
            std::str::from_utf8(&bytes[16..16 + mlen])
                .map_err(|e| Error::Checkpoint(format!("manifest not utf-8: {e}")))?,
        )
        .map_err(|e| Error::Checkpoint(format!("manifest parse: {e}")))?;
        let data = bytes.split_off(16 + mlen);
        Ok(ContainerReader { meta: manifest.meta, tensors: manifest.tensors, data })
    }

    pub fn names(&self) -> Vec<&str> {
        self.tensors.iter().map(|t| t.name.as_str()).collect()
    }

    pub fn read_tensor<T: Scalar>(&self, name: &str) -> Result<Tensor<T>> {
        let entry = self
            .tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::Checkpoint(format!("tensor `{name}` missing")))?;
        if entry.dtype != T::DTYPE {
            return Err(Error::Checkpoint(format!(
                "tensor `{name}` has dtype {}, expected {}",
                entry.dtype,
                T::DTYPE
            )));
        }
        let n: usize = entry.shape.iter().product();
        let start = entry.offset as usize;
        let end = start + n * T::BYTE_WIDTH;
        if end > self.data.len() {
            return Err(Error::Checkpoint(format!("tensor `{name}` payload truncated")));
        }
        let mut data = Vec::with_capacity(n);
        for i in 0..n {
            data.push(T::read_le(&self.data[start + i * T::BYTE_WIDTH..]));
        }
        Tensor::from_vec(&entry.shape, data)
    }

    pub fn read_all<T: Scalar>(&self) -> Result<BTreeMap<String, Tensor<T>>> {
        let mut out = BTreeMap::new();
        for e in &self.tensors {
            out.insert(e.name.clone(), self.read_tensor::<T>(&e.name)?);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_preserves_bits() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.bin");
        let a = Tensor::<f32>::from_vec(&[2, 2], vec![1.5, -0.0, 3.25, f32::MIN_POSITIVE]).unwrap();
        let b = Tensor::<f32>::from_vec(&[3], vec![0.1, 0.2, 0.3]).unwrap();
        let mut meta = toml::Table::new();
        meta.insert("note".into(), toml::Value::String("x".into()));
        write_container(&path, meta, &[("a".into(), &a), ("b".into(), &b)]).unwrap();

        let r = ContainerReader::open(&path).unwrap();
        assert_eq!(r.names(), vec!["a", "b"]);
        assert!(r.read_tensor::<f32>("a").unwrap().bit_eq(&a));
        assert!(r.read_tensor::<f32>("b").unwrap().bit_eq(&b));
        assert!(r.read_tensor::<f64>("a").is_err()); // dtype mismatch
    }
}
