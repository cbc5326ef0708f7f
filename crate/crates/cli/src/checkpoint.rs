//! Versioned binary container of named f32 tensors.
//!
//! Layout (little-endian):
//! `"CRRG"`, `u32` version, `u32` metadata count, then `(u32 len, key, u32 len, value)`
//! pairs, `u32` tensor count, then per tensor `u32` name length, name, `u32` rank,
//! `u64` dims, and `prod(dims)` f32 values.

use std::collections::BTreeMap;
use std::path::Path;

use crrg_core::params::ParamStore;
use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"CRRG";
pub const VERSION: u32 = 1;
pub const NAMESPACES: [&str; 5] = ["selector.", "gen.", "clip.", "cls.", "det."];

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint format error: {0}")]
    Format(String),
    #[error("tensor name {0:?} is outside the checkpoint namespaces")]
    Namespace(String),
    #[error("duplicate tensor name {0:?}")]
    Duplicate(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Core(#[from] crrg_core::Error),
}

type Result<T> = std::result::Result<T, CheckpointError>;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub metadata: BTreeMap<String, String>,
    pub tensors: Vec<Tensor>,
}

fn check_name(name: &str) -> Result<()> {
    if NAMESPACES
        .iter()
        .any(|ns| name.starts_with(ns) && name.len() > ns.len())
    {
        Ok(())
    } else {
        Err(CheckpointError::Namespace(name.to_string()))
    }
}

impl Checkpoint {
    /// Rounds every parameter to f32.
    pub fn from_store(store: &ParamStore, metadata: BTreeMap<String, String>) -> Result<Self> {
        let tensors = store
            .export()
            .into_iter()
            .map(|(name, shape, data)| Tensor {
                name,
                shape,
                data: data.iter().map(|&v| v as f32).collect(),
            })
            .collect();
        let ck = Self { metadata, tensors };
        ck.validate()?;
        Ok(ck)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for t in &self.tensors {
            check_name(&t.name)?;
            if !seen.insert(t.name.as_str()) {
                return Err(CheckpointError::Duplicate(t.name.clone()));
            }
            if t.shape.iter().product::<usize>() != t.data.len() {
                return Err(CheckpointError::Format(format!(
                    "payload of {} does not match its shape",
                    t.name
                )));
            }
        }
        Ok(())
    }

    /// Copies matching tensors into `store`; every store tensor must be present.
    pub fn load_into(&self, store: &mut ParamStore) -> Result<()> {
        let exported: Vec<(String, Vec<usize>, Vec<f64>)> = self
            .tensors
            .iter()
            .map(|t| {
                (
                    t.name.clone(),
                    t.shape.clone(),
                    t.data.iter().map(|&v| f64::from(v)).collect(),
                )
            })
            .collect();
        store.import(&exported)?;
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        Ok(self.encode())
    }

    fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let put_str = |out: &mut Vec<u8>, s: &str| {
            out.extend_from_slice(&(s.len() as u32).to_le_bytes());
            out.extend_from_slice(s.as_bytes());
        };
        out.extend_from_slice(&(self.metadata.len() as u32).to_le_bytes());
        for (k, v) in &self.metadata {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            put_str(&mut out, &t.name);
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &d in &t.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(CheckpointError::Format("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(CheckpointError::Format(format!(
                "unsupported version {version}"
            )));
        }
        let mut metadata = BTreeMap::new();
        for _ in 0..r.u32()? {
            let k = r.string()?;
            let v = r.string()?;
            metadata.insert(k, v);
        }
        let count = r.u32()?;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let name = r.string()?;
            check_name(&name)?;
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| CheckpointError::Format(format!("shape of {name} overflows")))?;
            let raw = r.take(
                n.checked_mul(4)
                    .ok_or_else(|| CheckpointError::Format("payload overflows".into()))?,
            )?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.push(Tensor { name, shape, data });
        }
        if r.pos != bytes.len() {
            return Err(CheckpointError::Format(
                "trailing bytes after last tensor".into(),
            ));
        }
        let ck = Self { metadata, tensors };
        ck.validate()?;
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("ckpt.tmp");
        std::fs::write(&tmp, bytes)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| CheckpointError::Format(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().expect("eight bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| CheckpointError::Format("name is not UTF-8".into()))
    }
}
