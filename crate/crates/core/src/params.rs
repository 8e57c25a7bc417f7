//! Named parameter storage shared by the model, the optimizer and the
//! checkpoint format.

use alloc::string::String;
use alloc::vec::Vec;
use core::ops::Index;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Tensor with entries drawn uniformly from `[-bound, bound)`.
pub fn uniform<T: Real, R: rand::Rng + ?Sized>(rng: &mut R, shape: &[usize], bound: f64) -> Tensor<T> {
    Tensor::from_fn(shape.to_vec(), |_| T::lit(if bound > 0.0 { rng.gen_range(-bound..bound) } else { 0.0 }))
}

/// Uniform init scaled by `1/sqrt(fan_in)`.
pub fn fan_in_uniform<T: Real, R: rand::Rng + ?Sized>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor<T> {
    uniform(rng, shape, 1.0 / num_traits::Float::sqrt(fan_in.max(1) as f64))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Feasible set a parameter is projected back onto after each update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Constraint {
    /// Every entry at most `-margin`.
    Negative { margin: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub tensor: Tensor<T>,
    pub constraint: Option<Constraint>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

/// Tape handles for every parameter of a store, indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bindings(Vec<Var>);

impl Index<ParamId> for Bindings {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> ParamId {
        self.add_constrained(name, tensor, None)
    }

    pub fn add_constrained(&mut self, name: impl Into<String>, mut tensor: Tensor<T>, constraint: Option<Constraint>) -> ParamId {
        tensor.set_requires_grad(true);
        self.params.push(Param { name: name.into(), tensor, constraint });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].tensor
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
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

    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    /// Records every parameter as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape<T>) -> Bindings {
        Bindings(self.params.iter().map(|p| tape.leaf(p.tensor.clone())).collect())
    }

    /// Adds the tape's leaf gradients into the parameters' buffers.
    pub fn accumulate_from(&mut self, tape: &Tape<T>, bindings: &Bindings) -> Result<()> {
        for (p, &v) in self.params.iter_mut().zip(&bindings.0) {
            if let Some(g) = tape.grad(v) {
                p.tensor.accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    /// Adds `scale * grads[i]` into parameter `i`.
    pub fn accumulate_scaled(&mut self, grads: &[Vec<T>], scale: T) -> Result<()> {
        if grads.len() != self.params.len() {
            return Err(Error::shape("accumulate_scaled", &[self.params.len()], &[grads.len()]));
        }
        for (p, g) in self.params.iter_mut().zip(grads) {
            let scaled: Vec<T> = g.iter().map(|&v| v * scale).collect();
            p.tensor.accumulate_grad(&scaled)?;
        }
        Ok(())
    }

    /// Gradients as owned buffers, zero-filled where absent.
    pub fn grads(&self) -> Vec<Vec<T>> {
        self.params
            .iter()
            .map(|p| match p.tensor.grad() {
                Some(g) => g.to_vec(),
                None => alloc::vec![T::zero(); p.tensor.numel()],
            })
            .collect()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.tensor.zero_grad();
        }
    }

    /// Clamps constrained parameters back into their feasible sets.
    pub fn project(&mut self) {
        for p in &mut self.params {
            if let Some(Constraint::Negative { margin }) = p.constraint {
                let cap = -T::lit(margin);
                for v in p.tensor.data_mut() {
                    if *v > cap {
                        *v = cap;
                    }
                }
            }
        }
    }

    /// Replaces values from another store with identical names and shapes.
    pub fn load_values(&mut self, values: &[(String, Tensor<T>)]) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(Error::invalid(
                "load",
                alloc::format!("expected {} parameters, found {}", self.params.len(), values.len()),
            ));
        }
        for (p, (name, t)) in self.params.iter().zip(values) {
            if &p.name != name {
                return Err(Error::invalid("load", alloc::format!("expected parameter {:?}, found {:?}", p.name, name)));
            }
            if p.tensor.shape() != t.shape() {
                return Err(Error::shape("load", p.tensor.shape(), t.shape()));
            }
        }
        for (p, (_, t)) in self.params.iter_mut().zip(values) {
            p.tensor.data_mut().copy_from_slice(t.data());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn projection_keeps_entries_negative() {
        let mut s = ParamStore::<f64>::new();
        s.add_constrained("a", Tensor::from_vec(vec![-2.0, 0.5, 0.0]), Some(Constraint::Negative { margin: 1e-3 }));
        s.project();
        assert_eq!(s.iter().next().unwrap().tensor.data(), &[-2.0, -1e-3, -1e-3]);
    }

    #[test]
    fn load_validates_names_and_shapes() {
        let mut s = ParamStore::<f64>::new();
        s.add("w", Tensor::zeros([2]));
        assert!(s.load_values(&[("v".into(), Tensor::zeros([2]))]).is_err());
        assert!(s.load_values(&[("w".into(), Tensor::zeros([3]))]).is_err());
        s.load_values(&[("w".into(), Tensor::from_vec(vec![1.0, 2.0]))]).unwrap();
        assert_eq!(s.get(ParamId(0)).data(), &[1.0, 2.0]);
    }
}
