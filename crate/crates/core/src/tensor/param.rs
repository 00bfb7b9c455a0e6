use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Which optimizer owns a parameter. Architecture logits and network weights
/// are disjoint sets and are never stepped together.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamGroup {
    Weights,
    Architecture,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub value: Tensor,
    #[serde(skip)]
    pub grad: Option<Tensor>,
    pub group: ParamGroup,
}

/// Owner of all trainable tensors of a network.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, value: Tensor, group: ParamGroup) -> ParamId {
        self.params.push(Param { value, grad: None, group });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> Option<&Tensor> {
        self.params[id.0].grad.as_ref()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn ids_in(&self, group: ParamGroup) -> Vec<ParamId> {
        self.ids().filter(|&id| self.params[id.0].group == group).collect()
    }

    /// Add `grad` into the parameter's gradient buffer.
    pub fn accumulate_grad(&mut self, id: ParamId, grad: &[f64]) -> Result<()> {
        let p = &mut self.params[id.0];
        if grad.len() != p.value.numel() {
            return Err(Error::Shape(alloc::format!(
                "gradient of length {} for parameter {} with {} values",
                grad.len(),
                id.0,
                p.value.numel()
            )));
        }
        match &mut p.grad {
            Some(g) => g.data_mut().iter_mut().zip(grad).for_each(|(a, b)| *a += b),
            None => {
                p.grad = Some(Tensor::new(p.value.shape().to_vec(), grad.to_vec())?);
            }
        }
        Ok(())
    }

    /// Give every parameter of `ids` without a gradient a zero one.
    pub fn fill_missing_grads(&mut self, ids: &[ParamId]) {
        for &id in ids {
            let p = &mut self.params[id.0];
            if p.grad.is_none() {
                p.grad = Some(Tensor::zeros(p.value.shape()));
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    pub fn num_values(&self, group: ParamGroup) -> usize {
        self.params.iter().filter(|p| p.group == group).map(|p| p.value.numel()).sum()
    }

    /// Copy the values (not gradients) of `ids` from another store of identical layout.
    pub fn copy_values_from(&mut self, other: &ParamStore, ids: &[ParamId]) {
        for &id in ids {
            self.params[id.0].value = other.params[id.0].value.clone();
        }
    }

    /// 64-bit FNV-1a over the bit patterns of the selected values.
    pub fn fingerprint(&self, ids: &[ParamId]) -> u64 {
        let mut h = crate::data::Fnv::new();
        for &id in ids {
            for v in self.params[id.0].value.data() {
                h.write_u64(v.to_bits());
            }
        }
        h.finish()
    }
}
