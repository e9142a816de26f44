//! Dense float64 tensors with tape-based reverse-mode differentiation.
//!
//! Values live in [`Tensor`]. Trainable weights live in a [`ParamStore`]
//! owned by a model; a forward pass copies them onto a [`Tape`], builds the
//! graph, and [`Tape::backward`] accumulates gradients back into the store.
//! A tape is confined to the thread that builds it; parameter stores and
//! tensors are plain data and can be shared across threads for inference.

mod checkpoint;
mod conv;
mod gradcheck;
mod optim;
mod tape;

pub use checkpoint::{Checkpoint, CheckpointHeader, ParamEntry};
pub use conv::ConvGeometry;
pub use gradcheck::{gradient_check, GradCheckReport};
pub use optim::{Optimizer, OptimizerKind};
pub use tape::{ElementwiseKind, Tape, Var};

use crate::error::{Error, Result};
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Dense row-major array of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::shape(format!("zero extent in shape {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} holds {n} elements but {} were given",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    /// Normal(0, std) entries from `rng`.
    pub fn randn(shape: &[usize], std: f64, rng: &mut impl Rng) -> Self {
        let n: usize = shape.iter().product();
        let normal = Normal::new(0.0, std).expect("finite std");
        let data = (0..n).map(|_| normal.sample(rng)).collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.contains(&0) {
            return Err(Error::shape(format!("cannot reshape {:?} into {shape:?}", self.shape)));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Index of a parameter inside its [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub requires_grad: bool,
    /// Accumulated gradient; `None` until the first backward pass reaches it.
    pub grad: Option<Vec<f64>>,
}

/// Named, ordered collection of trainable tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let id = ParamId(self.params.len());
        self.params.push(Param {
            name: name.into(),
            value,
            requires_grad: true,
            grad: None,
        });
        id
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

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, grad: &[f64]) {
        let p = &mut self.params[id.0];
        if !p.requires_grad {
            return;
        }
        match &mut p.grad {
            Some(g) => g.iter_mut().zip(grad).for_each(|(a, b)| *a += b),
            None => p.grad = Some(grad.to_vec()),
        }
    }

    /// Sets every parameter value to zero.
    pub fn fill_zero(&mut self) {
        for p in &mut self.params {
            p.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Replaces values with those of `other`, matched by name and shape.
    pub fn load_values_from(&mut self, other: &ParamStore) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::Format(format!(
                "parameter count mismatch: expected {}, found {}",
                self.len(),
                other.len()
            )));
        }
        for (dst, src) in self.params.iter_mut().zip(&other.params) {
            if dst.name != src.name || dst.value.shape() != src.value.shape() {
                return Err(Error::Format(format!(
                    "parameter mismatch: expected {} {:?}, found {} {:?}",
                    dst.name,
                    dst.value.shape(),
                    src.name,
                    src.value.shape()
                )));
            }
            dst.value = src.value.clone();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_checks_element_count() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(matches!(Tensor::new(vec![2, 3], vec![0.0; 5]), Err(Error::Shape(_))));
        assert!(Tensor::new(vec![0, 3], vec![]).is_err());
    }

    #[test]
    fn reshape_keeps_data() {
        let t = Tensor::new(vec![2, 3], (0..6).map(f64::from).collect()).unwrap();
        let r = t.clone().reshape(&[3, 2]).unwrap();
        assert_eq!(r.data(), t.data());
        assert!(t.reshape(&[4, 2]).is_err());
    }

    #[test]
    fn accumulate_respects_requires_grad() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::zeros(&[2]));
        let b = store.add("b", Tensor::zeros(&[2]));
        store.get_mut(b).requires_grad = false;
        store.accumulate_grad(a, &[1.0, 2.0]);
        store.accumulate_grad(a, &[1.0, 2.0]);
        store.accumulate_grad(b, &[1.0, 2.0]);
        assert_eq!(store.get(a).grad.as_deref(), Some(&[2.0, 4.0][..]));
        assert!(store.get(b).grad.is_none());
    }
}
