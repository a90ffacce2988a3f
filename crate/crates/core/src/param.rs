//! Named learnable parameters.

use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub tensor: Tensor<T>,
}

/// Ordered collection of parameters. Insertion order is the checkpoint order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.find(&name).is_some() {
            return Err(Error::config(format!("duplicate parameter name {name}")));
        }
        let mut tensor = tensor.with_grad();
        tensor.grad = Some(vec![T::zero(); tensor.len()]);
        self.params.push(Param { name, tensor });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].tensor
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].tensor
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn zero_grads(&mut self) {
        self.params.iter_mut().for_each(|p| p.tensor.zero_grad());
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    /// Overwrites values from `other`, matching by name and shape.
    pub fn load_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                self.len(),
                other.len()
            )));
        }
        for p in &mut self.params {
            let src = other
                .find(&p.name)
                .map(|id| other.tensor(id))
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {}", p.name)))?;
            if src.shape() != p.tensor.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {} has shape {:?}, expected {:?}",
                    p.name,
                    src.shape(),
                    p.tensor.shape()
                )));
            }
            p.tensor.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }
}

/// Weight initializers.
pub mod init {
    use super::*;

    /// `Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in))`
    pub fn fan_in_uniform<T: Scalar>(shape: &[usize], fan_in: usize, rng: &mut Rng) -> Tensor<T> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        sample(shape, || dist.sample(rng))
    }

    /// `Normal(0, std)`
    pub fn normal<T: Scalar>(shape: &[usize], std: f64, rng: &mut Rng) -> Tensor<T> {
        let dist = Normal::new(0.0, std).expect("finite std");
        sample(shape, || dist.sample(rng))
    }

    fn sample<T: Scalar>(shape: &[usize], mut draw: impl FnMut() -> f64) -> Tensor<T> {
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::lit(draw())).collect();
        Tensor::new(shape, data).expect("valid shape")
    }
}
