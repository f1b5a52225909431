//! Minimal neural network toolkit: autodiff tape, parameter store with Adam,
//! dense layers and the radiance MLP.

mod checkpoint;
pub mod gradcheck;
mod mlp;
mod tape;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint};
pub use mlp::{Activation, Linear, MlpConfig, MlpOutput, RadianceMlp};
pub use tape::{pairwise_sum, sigmoid, softplus, Gradients, ImgShape, Matrix, Real, Tape, Var};

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Location of a parameter block inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamRef {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl ParamRef {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn on<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>) -> Result<Var> {
        tape.param(&store.params, self.offset, self.rows, self.cols)
    }
}

/// Flat parameter vector with Adam moments.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    pub params: Vec<T>,
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub step: u64,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            m: Vec::new(),
            v: Vec::new(),
            step: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Appends a block initialized uniformly in `[-bound, bound]`.
    pub fn alloc_uniform(&mut self, rows: usize, cols: usize, bound: f64, rng: &mut Rng) -> ParamRef {
        let offset = self.params.len();
        for _ in 0..rows * cols {
            let u: f64 = rng.gen_range(-1.0..1.0);
            self.params.push(T::of(u * bound));
        }
        self.m.resize(self.params.len(), T::zero());
        self.v.resize(self.params.len(), T::zero());
        ParamRef { offset, rows, cols }
    }

    pub fn alloc_const(&mut self, rows: usize, cols: usize, value: f64) -> ParamRef {
        let offset = self.params.len();
        self.params.extend(std::iter::repeat(T::of(value)).take(rows * cols));
        self.m.resize(self.params.len(), T::zero());
        self.v.resize(self.params.len(), T::zero());
        ParamRef { offset, rows, cols }
    }

    pub fn block(&self, r: ParamRef) -> &[T] {
        &self.params[r.offset..r.offset + r.len()]
    }

    pub fn block_mut(&mut self, r: ParamRef) -> &mut [T] {
        &mut self.params[r.offset..r.offset + r.len()]
    }

    pub fn adam_step(&mut self, grads: &[T], cfg: &AdamConfig) -> Result<AdamOutcome> {
        if grads.len() != self.params.len() {
            return Err(Error::dim(format!(
                "{} gradients for {} parameters",
                grads.len(),
                self.params.len()
            )));
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Ok(AdamOutcome::Skipped);
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let (b1t, b2t) = (T::of(b1), T::of(b2));
        let (ob1, ob2) = (T::of(1.0 - b1), T::of(1.0 - b2));
        let (lr, eps) = (cfg.lr, cfg.eps);
        for i in 0..self.params.len() {
            let g = grads[i];
            self.m[i] = b1t * self.m[i] + ob1 * g;
            self.v[i] = b2t * self.v[i] + ob2 * g * g;
            let m_hat = self.m[i].f64() / c1;
            let v_hat = self.v[i].f64() / c2;
            let delta = lr * m_hat / (v_hat.sqrt() + eps);
            self.params[i] = self.params[i] - T::of(delta);
        }
        Ok(AdamOutcome::Applied)
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        let c = |xs: &[T]| xs.iter().map(|x| U::of(x.f64())).collect();
        ParamStore {
            params: c(&self.params),
            m: c(&self.m),
            v: c(&self.v),
            step: self.step,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdamOutcome {
    Applied,
    /// A gradient was non-finite; parameters and moments are untouched.
    Skipped,
}

/// Elementwise sum of gradient vectors in a fixed pairwise order.
pub fn reduce_gradients<T: Real>(mut parts: Vec<Vec<T>>) -> Vec<T> {
    if parts.is_empty() {
        return Vec::new();
    }
    while parts.len() > 1 {
        let mut next = Vec::with_capacity(parts.len().div_ceil(2));
        let mut it = parts.into_iter();
        while let Some(mut a) = it.next() {
            if let Some(b) = it.next() {
                a.iter_mut().zip(&b).for_each(|(x, y)| *x += *y);
            }
            next.push(a);
        }
        parts = next;
    }
    parts.pop().unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(values: &[f64]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        let r = s.alloc_const(1, values.len(), 0.0);
        s.block_mut(r).copy_from_slice(values);
        s
    }

    #[test]
    fn adam_first_step_is_lr() {
        let mut s = store(&[0.0, 1.0]);
        s.adam_step(&[1.0, 1.0], &AdamConfig::default()).unwrap();
        let expect = -1e-4 / (1.0 + 1e-8);
        assert!((s.params[0] - expect).abs() < 1e-15);
        assert!((s.params[1] - (1.0 + expect)).abs() < 1e-15);
    }

    #[test]
    fn adam_zero_gradient_is_a_no_op() {
        let mut s = store(&[0.3, -0.7]);
        for _ in 0..10 {
            s.adam_step(&[0.0, 0.0], &AdamConfig::default()).unwrap();
        }
        assert_eq!(s.params, vec![0.3, -0.7]);
    }

    #[test]
    fn adam_is_odd_in_the_gradient_at_step_one() {
        let cfg = AdamConfig::default();
        let (mut a, mut b) = (store(&[0.0; 3]), store(&[0.0; 3]));
        a.adam_step(&[0.2, -3.0, 1e-3], &cfg).unwrap();
        b.adam_step(&[-0.2, 3.0, -1e-3], &cfg).unwrap();
        for (x, y) in a.params.iter().zip(&b.params) {
            assert_eq!(*x, -*y);
        }
    }

    #[test]
    fn adam_skips_non_finite() {
        let mut s = store(&[1.0]);
        let out = s.adam_step(&[f64::NAN], &AdamConfig::default()).unwrap();
        assert_eq!(out, AdamOutcome::Skipped);
        assert_eq!((s.params[0], s.step), (1.0, 0));
    }

    #[test]
    fn adam_defaults() {
        let d = AdamConfig::default();
        assert_eq!((d.lr, d.beta1, d.beta2, d.eps), (1e-4, 0.9, 0.999, 1e-8));
    }

    #[test]
    fn gradient_reduction_is_ordered() {
        let parts: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64, 1.0]).collect();
        assert_eq!(reduce_gradients(parts), vec![10.0, 5.0]);
    }
}
