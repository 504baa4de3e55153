//! Named parameters and the few layer types the networks are built from.

use std::collections::HashMap;
use std::ops::Index;

use rand::Rng as _;
use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// The single seeded generator used for initialization and data synthesis.
pub type Rng = Xoshiro256PlusPlus;

pub fn seeded_rng(seed: u64) -> Rng {
    Xoshiro256PlusPlus::seed_from_u64(seed)
}

/// Which learning rate a parameter trains under.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamGroup {
    Fusion,
    Segmentation,
}

impl ParamGroup {
    pub(crate) fn code(self) -> u8 {
        match self {
            ParamGroup::Fusion => 0,
            ParamGroup::Segmentation => 1,
        }
    }

    pub(crate) fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(ParamGroup::Fusion),
            1 => Ok(ParamGroup::Segmentation),
            other => Err(Error::format(format!("unknown parameter group {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor,
    pub grad: Option<Tensor>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, ParamId>,
}

/// Graph handles for every parameter of a store, valid for one graph.
#[derive(Debug, Clone)]
pub struct Bound(Vec<Var>);

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

impl Bound {
    /// Wraps handles that stand in for a store's parameters, in store order.
    pub(crate) fn from_vars(vars: Vec<Var>) -> Self {
        Bound(vars)
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            group,
            value,
            grad: None,
        });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Total scalar count.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Inserts every parameter into `g` as a differentiable leaf.
    pub fn bind(&self, g: &mut Graph) -> Result<Bound> {
        self.params
            .iter()
            .map(|p| g.leaf(p.value.clone()))
            .collect::<Result<_>>()
            .map(Bound)
    }

    /// Inserts every parameter as a constant; nothing is recorded on the tape.
    pub fn bind_frozen(&self, g: &mut Graph) -> Result<Bound> {
        self.params
            .iter()
            .map(|p| g.constant(p.value.clone()))
            .collect::<Result<_>>()
            .map(Bound)
    }

    /// Adds the gradients held by `g` into each parameter's `grad`.
    /// Parameters the loss did not reach receive zeros.
    pub fn accumulate_grads(&mut self, g: &Graph, bound: &Bound) {
        for (p, &var) in self.params.iter_mut().zip(&bound.0) {
            let acc = p
                .grad
                .get_or_insert_with(|| Tensor::zeros(p.value.shape()));
            if let Some(src) = g.grad(var) {
                for (a, b) in acc.data_mut().iter_mut().zip(src) {
                    *a += b;
                }
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Largest absolute gradient entry over the parameters of `group`.
    pub fn max_abs_grad(&self, group: ParamGroup) -> f64 {
        self.params
            .iter()
            .filter(|p| p.group == group)
            .filter_map(|p| p.grad.as_ref())
            .flat_map(|g| g.data().iter())
            .fold(0.0, |m, v| m.max(v.abs()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    /// He-uniform weights, zero bias.
    Kaiming,
    Zeros,
}

/// Builder context that registers layers under a common name prefix.
pub struct LayerBuilder<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut Rng,
    pub group: ParamGroup,
    pub prefix: String,
}

impl LayerBuilder<'_> {
    pub fn conv(
        &mut self,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        init: Init,
    ) -> Result<Conv2d> {
        let fan_in = in_ch * kernel * kernel;
        let shape = [out_ch, in_ch, kernel, kernel];
        let weight = match init {
            Init::Kaiming => {
                let bound = (6.0 / fan_in as f64).sqrt();
                Tensor::from_fn(&shape, |_| self.rng.random_range(-bound..bound))
            }
            Init::Zeros => Tensor::zeros(&shape),
        };
        let full = format!("{}.{}", self.prefix, name);
        let weight = self.store.add(format!("{full}.weight"), self.group, weight)?;
        let bias = self
            .store
            .add(format!("{full}.bias"), self.group, Tensor::zeros(&[out_ch]))?;
        Ok(Conv2d {
            weight,
            bias,
            stride,
            padding: kernel / 2,
        })
    }

    pub fn linear(&mut self, name: &str, in_dim: usize, out_dim: usize) -> Result<Linear> {
        let bound = (3.0 / in_dim as f64).sqrt();
        let weight = Tensor::from_fn(&[in_dim, out_dim], |_| self.rng.random_range(-bound..bound));
        let full = format!("{}.{}", self.prefix, name);
        Ok(Linear {
            weight: self.store.add(format!("{full}.weight"), self.group, weight)?,
            bias: self
                .store
                .add(format!("{full}.bias"), self.group, Tensor::zeros(&[out_dim]))?,
        })
    }
}

/// Square-kernel convolution with "same" padding for odd kernels.
#[derive(Debug, Clone, Copy)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        g.conv2d(x, p[self.weight], Some(p[self.bias]), self.stride, self.padding)
    }

    pub fn forward_relu(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let y = self.forward(g, p, x)?;
        g.relu(y)
    }
}

/// Row-vector affine map `x W + b` for `[rows, in]` inputs.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let y = g.matmul(x, p[self.weight])?;
        g.add(y, p[self.bias])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut store = ParamStore::new();
        store.add("a", ParamGroup::Fusion, Tensor::scalar(1.0)).unwrap();
        assert!(store.add("a", ParamGroup::Fusion, Tensor::scalar(2.0)).is_err());
    }

    #[test]
    fn accumulate_fills_unreached_with_zeros() {
        let mut store = ParamStore::new();
        let a = store.add("a", ParamGroup::Fusion, Tensor::scalar(3.0)).unwrap();
        store.add("b", ParamGroup::Segmentation, Tensor::scalar(1.0)).unwrap();
        let mut g = Graph::new();
        let bound = store.bind(&mut g).unwrap();
        let sq = g.square(bound[a]).unwrap();
        let loss = g.sum(sq).unwrap();
        g.backward(loss).unwrap();
        store.accumulate_grads(&g, &bound);
        assert_eq!(store.by_name("a").unwrap().grad.as_ref().unwrap().data(), &[6.0]);
        assert_eq!(store.by_name("b").unwrap().grad.as_ref().unwrap().data(), &[0.0]);
        assert_eq!(store.max_abs_grad(ParamGroup::Segmentation), 0.0);
    }
}
