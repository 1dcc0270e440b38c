//! Parameter checkpoint file: one line of compact JSON manifest terminated by
//! `\n`, followed by every tensor's values as little-endian `f64`, in
//! manifest order.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const FORMAT_NAME: &str = "ilflow-tensors";
pub const FORMAT_VERSION: u32 = 1;
pub const DTYPE_TAG: &str = "f64-le";

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    dtype: String,
    tensors: Vec<Entry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
}

pub fn encode(tensors: &[(String, Tensor)]) -> Result<Vec<u8>> {
    let manifest = Manifest {
        format: FORMAT_NAME.into(),
        version: FORMAT_VERSION,
        dtype: DTYPE_TAG.into(),
        tensors: tensors
            .iter()
            .map(|(n, t)| Entry {
                name: n.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let mut out = serde_json::to_vec(&manifest)?;
    out.push(b'\n');
    for (_, t) in tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode<R: Read>(reader: R) -> Result<Vec<(String, Tensor)>> {
    let mut reader = BufReader::new(reader);
    let mut line = Vec::new();
    reader.read_until(b'\n', &mut line)?;
    if line.last() != Some(&b'\n') {
        return Err(Error::Format("checkpoint manifest is not newline-terminated".into()));
    }
    let manifest: Manifest = serde_json::from_slice(&line[..line.len() - 1])?;
    if manifest.format != FORMAT_NAME || manifest.dtype != DTYPE_TAG {
        return Err(Error::Format(format!(
            "unexpected checkpoint format {}/{}",
            manifest.format, manifest.dtype
        )));
    }
    if manifest.version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {}",
            manifest.version
        )));
    }
    let mut out = Vec::with_capacity(manifest.tensors.len());
    let mut buf = [0u8; 8];
    for e in manifest.tensors {
        let n: usize = e.shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            reader
                .read_exact(&mut buf)
                .map_err(|_| Error::Format(format!("truncated data for tensor `{}`", e.name)))?;
            data.push(f64::from_le_bytes(buf));
        }
        out.push((e.name, Tensor::new(e.shape, data)?));
    }
    let mut rest = Vec::new();
    reader.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(Error::Format(format!("{} trailing bytes in checkpoint", rest.len())));
    }
    Ok(out)
}

pub fn save(path: &Path, tensors: &[(String, Tensor)]) -> Result<()> {
    let bytes = encode(tensors)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Vec<(String, Tensor)>> {
    decode(std::fs::File::open(path)?)
}

pub fn store_tensors(store: &ParamStore) -> Vec<(String, Tensor)> {
    store.named().map(|(n, t)| (n.to_string(), t.clone())).collect()
}

/// Copies values from `tensors` into the same-named parameters of `store`.
/// Every parameter must be present with a matching shape.
pub fn restore_store(store: &mut ParamStore, tensors: &[(String, Tensor)]) -> Result<()> {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let name = store.name(id).to_string();
        let (_, t) = tensors
            .iter()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| Error::Format(format!("checkpoint lacks parameter `{name}`")))?;
        if t.shape() != store.value(id).shape() {
            return Err(Error::Shape(format!(
                "parameter `{name}`: checkpoint shape {:?}, model shape {:?}",
                t.shape(),
                store.value(id).shape()
            )));
        }
        store.value_mut(id).data_mut().copy_from_slice(t.data());
    }
    Ok(())
}
