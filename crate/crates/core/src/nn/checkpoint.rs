//! Binary parameter checkpoints.
//!
//! Layout: the magic bytes `LPNAT1`, a newline, one line of JSON header,
//! a newline, then every tensor as little-endian `f64` in header order.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 6] = b"LPNAT1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    /// Model family, e.g. `teacher` or `student`.
    pub model: String,
    pub config_hash: String,
    /// Serialized model configuration.
    pub config: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
    /// Free-form extra sections (the student stores its head manifest here).
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub extra: serde_json::Value,
}

pub fn save(path: &Path, header: &CheckpointHeader, store: &ParamStore) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_to(&mut w, header, store)?;
    w.flush()?;
    Ok(())
}

pub fn write_to<W: Write>(w: &mut W, header: &CheckpointHeader, store: &ParamStore) -> Result<()> {
    if header.tensors.len() != store.len() {
        return Err(Error::Checkpoint("header does not list every parameter".into()));
    }
    w.write_all(MAGIC)?;
    w.write_all(b"\n")?;
    serde_json::to_writer(&mut *w, header)?;
    w.write_all(b"\n")?;
    for entry in &header.tensors {
        let id = store
            .find(&entry.name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {}", entry.name)))?;
        for v in store.get(id).data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Header entries for every parameter of `store`, in store order.
pub fn tensor_entries(store: &ParamStore) -> Vec<TensorEntry> {
    store
        .iter()
        .map(|(_, p)| TensorEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
        })
        .collect()
}

pub fn load(path: &Path) -> Result<(CheckpointHeader, ParamStore)> {
    let mut r = BufReader::new(File::open(path)?);
    read_from(&mut r)
}

pub fn read_from<R: BufRead>(r: &mut R) -> Result<(CheckpointHeader, ParamStore)> {
    let mut magic = [0u8; 7];
    r.read_exact(&mut magic)?;
    if &magic[..6] != MAGIC || magic[6] != b'\n' {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let mut line = String::new();
    r.read_line(&mut line)?;
    let header: CheckpointHeader = serde_json::from_str(line.trim_end())?;
    let mut store = ParamStore::new();
    let mut buf = [0u8; 8];
    for entry in &header.tensors {
        let n: usize = entry.shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            r.read_exact(&mut buf)
                .map_err(|_| Error::Checkpoint(format!("truncated tensor {}", entry.name)))?;
            data.push(f64::from_le_bytes(buf));
        }
        store.add(entry.name.clone(), Tensor::new(entry.shape.clone(), data)?);
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", rest.len())));
    }
    Ok((header, store))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_bits() {
        let mut store = ParamStore::new();
        store.add("a", Tensor::matrix(2, 2, vec![1.0, -0.0, f64::MIN_POSITIVE, 1e300]).unwrap());
        store.add("b", Tensor::row_vector(vec![0.1, 0.2, 0.3]));
        let header = CheckpointHeader {
            model: "test".into(),
            config_hash: "abc".into(),
            config: serde_json::json!({"d": 2}),
            tensors: tensor_entries(&store),
            extra: serde_json::Value::Null,
        };
        let mut bytes = Vec::new();
        write_to(&mut bytes, &header, &store).unwrap();
        assert!(bytes.starts_with(b"LPNAT1\n"));
        let (h2, s2) = read_from(&mut bytes.as_slice()).unwrap();
        assert_eq!(h2, header);
        for (id, p) in store.iter() {
            let q = s2.get(id);
            assert_eq!(p.value.shape(), q.shape());
            let a: Vec<u64> = p.value.data().iter().map(|x| x.to_bits()).collect();
            let b: Vec<u64> = q.data().iter().map(|x| x.to_bits()).collect();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(read_from(&mut b"LPNAT2\n{}\n".as_slice()).is_err());
        let mut store = ParamStore::new();
        store.add("a", Tensor::scalar(1.0));
        let header = CheckpointHeader {
            model: "t".into(),
            config_hash: String::new(),
            config: serde_json::Value::Null,
            tensors: tensor_entries(&store),
            extra: serde_json::Value::Null,
        };
        let mut bytes = Vec::new();
        write_to(&mut bytes, &header, &store).unwrap();
        bytes.truncate(bytes.len() - 3);
        assert!(read_from(&mut bytes.as_slice()).is_err());
    }
}
