use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::real::Real;

/// Adam with decoupled weight decay.
///
/// Moment buffers are created lazily on the first step and keyed by
/// parameter order in the store.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub betas: (T, T),
    pub eps: T,
    pub weight_decay: T,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(betas: (T, T), weight_decay: T) -> Self {
        Self {
            betas,
            eps: T::lit(1e-8),
            weight_decay,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update with learning rate `lr`. Every parameter must carry a
    /// gradient; nothing is modified otherwise.
    pub fn step(&mut self, params: &mut ParamStore<T>, lr: T) -> Result<()> {
        if let Some(p) = params.iter().find(|p| p.tensor.grad().is_none()) {
            return Err(Error::MissingGrad(p.name.clone()));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| alloc::vec![T::zero(); p.tensor.numel()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() {
            return Err(Error::invalid("adamw", "parameter set changed between steps"));
        }
        self.step += 1;
        let (b1, b2) = self.betas;
        let t = self.step as i32;
        let bc1 = T::one() - b1.powi(t);
        let bc2 = T::one() - b2.powi(t);
        let decay = T::one() - lr * self.weight_decay;
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let (data, grad) = p.tensor.data_and_grad_mut();
            let grad = grad.expect("checked above");
            for (((w, &g), m), v) in data.iter_mut().zip(grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *w = *w * decay - lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        params.project();
        Ok(())
    }
}

/// Cosine annealing from `base_lr` at step 0 to 0 at `total_steps`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CosineSchedule {
    pub base_lr: f64,
    pub total_steps: usize,
}

impl CosineSchedule {
    pub fn lr_at(&self, step: usize) -> f64 {
        if self.total_steps == 0 {
            return self.base_lr;
        }
        let progress = (step.min(self.total_steps)) as f64 / self.total_steps as f64;
        0.5 * self.base_lr * (1.0 + libm_cos(core::f64::consts::PI * progress))
    }
}

fn libm_cos(x: f64) -> f64 {
    num_traits::Float::cos(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn store(w: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("w", Tensor::from_vec(alloc::vec![w]));
        s
    }

    fn set_grad(s: &mut ParamStore<f64>, g: f64) {
        s.zero_grad();
        s.iter_mut().next().unwrap().tensor.accumulate_grad(&[g]).unwrap();
    }

    fn w(s: &ParamStore<f64>) -> f64 {
        s.iter().next().unwrap().tensor.data()[0]
    }

    #[test]
    fn descends_on_square() {
        let mut s = store(1.0);
        let mut opt = AdamW::new((0.9, 0.999), 0.0);
        let g = 2.0 * w(&s);
        set_grad(&mut s, g);
        opt.step(&mut s, 0.1).unwrap();
        assert!(w(&s) < 1.0);
    }

    #[test]
    fn zero_grad_zero_decay_is_fixed_point() {
        let mut s = store(0.37);
        let mut opt = AdamW::new((0.9, 0.999), 0.0);
        set_grad(&mut s, 0.0);
        opt.step(&mut s, 0.1).unwrap();
        assert_eq!(w(&s), 0.37);
    }

    #[test]
    fn converges_on_shifted_square() {
        let mut s = store(0.0);
        let mut opt = AdamW::new((0.9, 0.999), 0.0);
        for _ in 0..100 {
            let g = 2.0 * (w(&s) - 3.0);
            set_grad(&mut s, g);
            opt.step(&mut s, 0.1).unwrap();
        }
        assert!((w(&s) - 3.0).abs() < 0.05, "w = {}", w(&s));
    }

    #[test]
    fn missing_grad_is_an_error() {
        let mut s = store(1.0);
        let mut opt = AdamW::new((0.9, 0.999), 0.0);
        assert!(matches!(opt.step(&mut s, 0.1), Err(Error::MissingGrad(name)) if name == "w"));
        assert_eq!(w(&s), 1.0);
    }

    #[test]
    fn cosine_endpoints() {
        let s = CosineSchedule { base_lr: 1e-4, total_steps: 200 };
        assert_eq!(s.lr_at(0), 1e-4);
        assert!(s.lr_at(200).abs() < 1e-20);
        assert!((s.lr_at(100) - 5e-5).abs() < 1e-18);
    }
}
