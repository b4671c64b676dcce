//! Named learnable parameters and their initialization.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{s, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// Learning-rate group. Freshly initialized modules train at the primary
/// rate; the backbone tail and its adapter at the alternate rate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Primary,
    Backbone,
}

#[derive(Debug, Clone)]
pub struct Parameter<T: Scalar> {
    pub name: String,
    pub value: Tensor<T>,
    /// `None` until a backward pass or [`ParamStore::zero_grad`] populates it.
    pub grad: Option<Tensor<T>>,
    pub trainable: bool,
    pub group: ParamGroup,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore<T: Scalar = f32> {
    params: Vec<Parameter<T>>,
    by_name: BTreeMap<String, ParamId>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new(), by_name: BTreeMap::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, group: ParamGroup) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter {name}");
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter { name, value, grad: None, trainable: true, group });
        id
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter<T>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].trainable = trainable;
    }

    pub fn trainable_count(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.numel()).sum()
    }

    pub fn total_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = Some(Tensor::from_shape(p.value.shape().clone(), vec![T::zero(); p.value.numel()]));
        }
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, g: &Tensor<T>) {
        let p = &mut self.params[id.0];
        if !p.trainable {
            return;
        }
        match &mut p.grad {
            Some(acc) => acc.add_assign(g),
            slot @ None => *slot = Some(g.clone()),
        }
    }

    /// Same parameters at another precision (gradients dropped).
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter { name: p.name.clone(), value: p.value.cast(), grad: None, trainable: p.trainable, group: p.group })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }

    /// `(name, value)` pairs in name order, at `f32`.
    pub fn named_tensors(&self) -> Vec<(String, Tensor<f32>)> {
        self.by_name.iter().map(|(n, &id)| (n.clone(), self.get(id).value.cast())).collect()
    }

    /// Overwrites every parameter from `entries`. Every parameter must be
    /// present with a matching shape; extra entries are ignored.
    pub fn load_named(&mut self, entries: &[(String, Tensor<f32>)]) -> Result<()> {
        let lookup: BTreeMap<&str, &Tensor<f32>> = entries.iter().map(|(n, t)| (n.as_str(), t)).collect();
        for p in &mut self.params {
            let t = lookup
                .get(p.name.as_str())
                .ok_or_else(|| Error::Parameter { name: p.name.clone(), reason: "missing from checkpoint".into() })?;
            if t.shape() != p.value.shape() {
                return Err(Error::Parameter {
                    name: p.name.clone(),
                    reason: format!("checkpoint shape {} but model expects {}", t.shape(), p.value.shape()),
                });
            }
            p.value = t.cast();
        }
        Ok(())
    }
}

/// Glorot-uniform `[fan_in × fan_out]` matrix.
pub fn glorot<T: Scalar>(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Tensor<T> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| s(rng.random_range(-limit..limit))).collect();
    Tensor::new(&[fan_in, fan_out], data).expect("positive fan")
}
