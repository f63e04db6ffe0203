use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Result, TensorError};
use crate::tape::Gradients;
use crate::tensor::Tensor;

static NEXT_STORE_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named tensors owned by one model: trainable parameters (with grad) and
/// non-trainable buffers such as batch-norm running statistics.
#[derive(Debug)]
pub struct ParamStore {
    uid: u64,
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl Clone for ParamStore {
    // A clone is a distinct model; gradients recorded against the original
    // must never land in it.
    fn clone(&self) -> Self {
        Self {
            uid: NEXT_STORE_ID.fetch_add(1, Ordering::Relaxed),
            names: self.names.clone(),
            tensors: self.tensors.clone(),
        }
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self {
            uid: NEXT_STORE_ID.fetch_add(1, Ordering::Relaxed),
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub(crate) fn uid(&self) -> u64 {
        self.uid
    }

    fn insert(&mut self, name: &str, t: Tensor) -> ParamId {
        assert!(self.find(name).is_none(), "duplicate parameter name `{name}`");
        self.names.push(name.to_string());
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    /// Adds a trainable tensor.
    pub fn add_param(&mut self, name: &str, t: Tensor) -> ParamId {
        let t = if t.requires_grad() { t } else { t.with_grad() };
        self.insert(name, t)
    }

    /// Adds a non-trainable buffer.
    pub fn add_buffer(&mut self, name: &str, t: Tensor) -> ParamId {
        let shape = t.shape().to_vec();
        let t = Tensor::new(&shape, t.into_data()).expect("buffer values are finite");
        self.insert(name, t)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn trainable(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.ids().filter(|&id| self.tensors[id.0].requires_grad())
    }

    pub fn num_trainable_values(&self) -> usize {
        self.trainable().map(|id| self.tensors[id.0].numel()).sum()
    }

    /// Adds the gradients this store's parameters received in `grads`.
    pub fn accumulate(&mut self, grads: &Gradients) {
        for (id, g) in grads.for_store(self.uid) {
            if let Some(dst) = self.tensors[id.0].grad_mut() {
                dst.iter_mut().zip(g).for_each(|(d, s)| *d += s);
            }
        }
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Overwrites the value of the tensor named `name`, keeping its grad flag.
    pub fn assign(&mut self, name: &str, value: &Tensor) -> Result<()> {
        let id = self.find(name).ok_or_else(|| TensorError::UnknownParam(name.to_string()))?;
        let dst = &mut self.tensors[id.0];
        if dst.shape() != value.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "assign",
                lhs: dst.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        dst.data_mut().copy_from_slice(value.data());
        dst.zero_grad();
        Ok(())
    }

    /// Copies every value from `other`, which must have the same layout.
    pub fn copy_values_from(&mut self, other: &ParamStore) -> Result<()> {
        for (name, t) in other.iter() {
            self.assign(name, t)?;
        }
        Ok(())
    }
}
