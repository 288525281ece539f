use crate::tensor::{Element, Graph, Tensor, Var};
use crate::{Error, Result};
use rand::Rng;

const INIT_STD: f64 = 0.02;

/// Named, ordered parameter tensors. Indices are stable for the life of the
/// store and double as graph parameter tags.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<E: Element = f32> {
    names: Vec<String>,
    tensors: Vec<Tensor<E>>,
}

/// Indices of a dense layer's weight `[in, out]` and optional bias `[out]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub weight: usize,
    pub bias: Option<usize>,
}

impl Linear {
    pub fn apply<E: Element>(&self, g: &mut Graph<E>, p: &[Var], x: Var) -> Result<Var> {
        Ok(g.linear(x, p[self.weight], self.bias.map(|b| p[b]))?)
    }
}

impl<E: Element> ParamStore<E> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    /// Appends a tensor; panics on a duplicate name.
    pub fn add(&mut self, name: &str, t: Tensor<E>) -> usize {
        assert!(self.index_of(name).is_none(), "duplicate parameter `{name}`");
        self.names.push(name.to_string());
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    /// Truncated-normal weight, zero bias.
    pub fn linear<R: Rng + ?Sized>(&mut self, name: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> Linear {
        let w = Tensor::trunc_normal(&[fan_in, fan_out], INIT_STD, rng);
        self.linear_with(name, w, true)
    }

    /// Zero weight and bias.
    pub fn zero_linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Linear {
        self.linear_with(name, Tensor::zeros(&[fan_in, fan_out]), true)
    }

    pub fn linear_with(&mut self, name: &str, weight: Tensor<E>, bias: bool) -> Linear {
        let out = weight.shape()[1];
        let w = self.add(&format!("{name}.weight"), weight);
        let b = bias.then(|| self.add(&format!("{name}.bias"), Tensor::zeros(&[out])));
        Linear { weight: w, bias: b }
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, i: usize) -> &Tensor<E> {
        &self.tensors[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Tensor<E> {
        &mut self.tensors[i]
    }

    pub fn tensors(&self) -> &[Tensor<E>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<E>] {
        &mut self.tensors
    }

    /// Replaces a tensor by name, keeping the shape.
    pub fn set(&mut self, name: &str, t: Tensor<E>) -> Result<()> {
        let i = self
            .index_of(name)
            .ok_or_else(|| Error::Param(format!("no parameter named `{name}`")))?;
        if t.shape() != self.tensors[i].shape() {
            return Err(Error::Param(format!(
                "parameter `{name}` has shape {:?}, got {:?}",
                self.tensors[i].shape(),
                t.shape()
            )));
        }
        self.tensors[i] = t;
        Ok(())
    }

    /// Adds every tensor to `g` as a parameter leaf, in store order.
    pub fn bind(&self, g: &mut Graph<E>) -> Vec<Var> {
        self.tensors
            .iter()
            .enumerate()
            .map(|(i, t)| g.param(i, t.clone()))
            .collect()
    }

    /// Same names and shapes with values converted to `F`.
    pub fn cast<F: Element>(&self) -> ParamStore<F> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }
}
