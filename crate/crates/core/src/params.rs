//! Flat parameter storage shared by every trainable model.
//!
//! Each model registers named tensors in a [`ParamStore`]; all values live in
//! one contiguous `f64` buffer so the optimizer, the finite-difference oracle
//! and the checkpoint writer can treat a model as a single vector.

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: Vec<TensorInfo>,
    data: Vec<f64>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a zero-initialized tensor.
    pub fn add(&mut self, name: impl Into<String>, shape: &[usize]) -> TensorId {
        let name = name.into();
        assert!(self.id(&name).is_none(), "duplicate parameter name {name}");
        let len = shape.iter().product();
        let offset = self.data.len();
        self.data.resize(offset + len, 0.0);
        self.tensors.push(TensorInfo {
            name,
            shape: shape.to_vec(),
            offset,
            len,
        });
        TensorId(self.tensors.len() - 1)
    }

    /// Registers a tensor drawn uniformly from `[-bound, bound]`.
    pub fn add_uniform(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        bound: f64,
        rng: &mut Rng,
    ) -> TensorId {
        let id = self.add(name, shape);
        for v in self.get_mut(id) {
            *v = rng.random_range(-bound..=bound);
        }
        id
    }

    pub fn get(&self, id: TensorId) -> &[f64] {
        let t = &self.tensors[id.0];
        &self.data[t.offset..t.offset + t.len]
    }

    pub fn get_mut(&mut self, id: TensorId) -> &mut [f64] {
        let t = &self.tensors[id.0];
        &mut self.data[t.offset..t.offset + t.len]
    }

    pub fn info(&self, id: TensorId) -> &TensorInfo {
        &self.tensors[id.0]
    }

    pub fn id(&self, name: &str) -> Option<TensorId> {
        self.tensors
            .iter()
            .position(|t| t.name == name)
            .map(TensorId)
    }

    pub fn tensors(&self) -> &[TensorInfo] {
        &self.tensors
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// A zeroed buffer with the same layout, used for gradients.
    pub fn zeros_like(&self) -> Vec<f64> {
        vec![0.0; self.data.len()]
    }

    /// The region of a flat gradient buffer belonging to tensor `id`.
    pub fn slot<'a>(&self, buf: &'a mut [f64], id: TensorId) -> &'a mut [f64] {
        let t = &self.tensors[id.0];
        &mut buf[t.offset..t.offset + t.len]
    }

    /// Two disjoint regions of a flat gradient buffer.
    pub fn slot_pair<'a>(
        &self,
        buf: &'a mut [f64],
        a: TensorId,
        b: TensorId,
    ) -> (&'a mut [f64], &'a mut [f64]) {
        assert_ne!(a, b, "slot_pair needs distinct tensors");
        let (ta, tb) = (&self.tensors[a.0], &self.tensors[b.0]);
        if ta.offset < tb.offset {
            let (lo, hi) = buf.split_at_mut(tb.offset);
            (&mut lo[ta.offset..ta.offset + ta.len], &mut hi[..tb.len])
        } else {
            let (lo, hi) = buf.split_at_mut(ta.offset);
            (&mut hi[..ta.len], &mut lo[tb.offset..tb.offset + tb.len])
        }
    }

    /// Named tensors as `(name, shape, values)` triples.
    pub fn export(&self) -> Vec<(String, Vec<usize>, Vec<f64>)> {
        self.tensors
            .iter()
            .map(|t| {
                (
                    t.name.clone(),
                    t.shape.clone(),
                    self.data[t.offset..t.offset + t.len].to_vec(),
                )
            })
            .collect()
    }

    /// Overwrites every registered tensor from `(name, shape, values)` triples.
    ///
    /// Every registered name must be present with a matching shape. Extra
    /// entries are ignored so one container can hold several models.
    pub fn import(&mut self, tensors: &[(String, Vec<usize>, Vec<f64>)]) -> Result<()> {
        for i in 0..self.tensors.len() {
            let info = self.tensors[i].clone();
            let (_, shape, values) = tensors
                .iter()
                .find(|(n, _, _)| *n == info.name)
                .ok_or_else(|| Error::Format(format!("missing tensor {}", info.name)))?;
            if *shape != info.shape {
                return Err(Error::Format(format!(
                    "tensor {} has shape {:?}, expected {:?}",
                    info.name, shape, info.shape
                )));
            }
            self.data[info.offset..info.offset + info.len].copy_from_slice(values);
        }
        Ok(())
    }
}

/// Bound for fan-in scaled uniform initialization.
pub fn fan_in_bound(fan_in: usize) -> f64 {
    1.0 / (fan_in.max(1) as f64).sqrt()
}
