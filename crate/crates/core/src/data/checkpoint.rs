use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::float::Scalar;
use crate::optim::AdamConfig;
use crate::rng::RngSnapshot;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"RVCDCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    dims: Vec<usize>,
    offset: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamMeta {
    pub config: AdamConfig,
    pub step: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    dtype: String,
    tensors: Vec<TensorEntry>,
    config: serde_json::Value,
    rng: RngSnapshot,
    step: u64,
    adam: Option<AdamMeta>,
}

/// Named tensors plus everything needed to resume a run.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<F> {
    pub config: serde_json::Value,
    pub tensors: Vec<(String, Tensor<F>)>,
    pub rng: RngSnapshot,
    pub step: u64,
    pub adam: Option<AdamMeta>,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl<F: Scalar> Checkpoint<F> {
    pub fn get(&self, name: &str) -> Option<&Tensor<F>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut seen = HashSet::new();
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0u64;
        for (name, t) in &self.tensors {
            if !seen.insert(name.as_str()) {
                return Err(corrupt(format!("duplicate tensor name {name}")));
            }
            entries.push(TensorEntry {
                name: name.clone(),
                dims: t.dims().to_vec(),
                offset,
            });
            offset += (t.len() * F::BYTES) as u64;
        }
        let header = serde_json::to_vec(&Header {
            dtype: F::DTYPE.into(),
            tensors: entries,
            config: self.config.clone(),
            rng: self.rng,
            step: self.step,
            adam: self.adam,
        })?;
        let mut out = Vec::with_capacity(20 + header.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, t) in &self.tensors {
            for &v in t.data() {
                v.write_le(&mut out);
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(corrupt("missing RVCDCKPT magic"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(corrupt(format!(
                "format version {version} is not supported (expected {VERSION})"
            )));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = &bytes[20..];
        if hlen > body.len() {
            return Err(corrupt("header extends past end of file"));
        }
        let header: Header = serde_json::from_slice(&body[..hlen])
            .map_err(|e| corrupt(format!("corrupt header: {e}")))?;
        if header.dtype != F::DTYPE {
            return Err(corrupt(format!(
                "stored dtype {} cannot be read as {}",
                header.dtype,
                F::DTYPE
            )));
        }
        let payload = &body[hlen..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        let mut expected = 0usize;
        for e in header.tensors {
            let count: usize = e.dims.iter().product();
            let start = e.offset as usize;
            let end = start + count * F::BYTES;
            if start != expected || end > payload.len() {
                return Err(corrupt(format!(
                    "payload for {} is truncated or misplaced",
                    e.name
                )));
            }
            expected = end;
            let data = payload[start..end]
                .chunks_exact(F::BYTES)
                .map(F::read_le)
                .collect();
            tensors.push((e.name, Tensor::new(e.dims, data)?));
        }
        if expected != payload.len() {
            return Err(corrupt(format!(
                "{} trailing bytes after the last tensor",
                payload.len() - expected
            )));
        }
        Ok(Checkpoint {
            config: header.config,
            tensors,
            rng: header.rng,
            step: header.step,
            adam: header.adam,
        })
    }

    /// Writes to a sibling temporary file, then renames over `path`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        let tmp = Path::new(&tmp);
        let mut f = fs::File::create(tmp).map_err(|e| Error::io(tmp, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(tmp, e))?;
        f.sync_all().map_err(|e| Error::io(tmp, e))?;
        fs::rename(tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
