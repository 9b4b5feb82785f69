//! AdaBelief optimizer.
//!
//! Like Adam, but the second moment tracks the squared deviation of the
//! gradient from its own EMA (the "belief" in the gradient direction), with
//! epsilon added inside the s-update per the optimizer's published form:
//!   m <- b1 m + (1 - b1) g
//!   s <- b2 s + (1 - b2) (g - m)^2 + eps
//!   theta <- theta - lr * m_hat / (sqrt(s_hat) + eps)
//! with the usual bias corrections of m_hat and s_hat.

use super::params::ModelParams;
use super::TensorError;
use crate::real::Real;
use indexmap::IndexMap;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdaBeliefConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdaBeliefConfig {
    fn default() -> Self {
        AdaBeliefConfig {
            lr: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Per-parameter moments plus the shared step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<F: Real> {
    pub config: AdaBeliefConfig,
    pub m: IndexMap<String, Vec<F>>,
    pub s: IndexMap<String, Vec<F>>,
    pub t: u64,
}

impl<F: Real> OptimizerState<F> {
    /// Fresh zeroed moments shaped after `params`.
    pub fn new(config: AdaBeliefConfig, params: &ModelParams<F>) -> Self {
        let mut m = IndexMap::new();
        let mut s = IndexMap::new();
        for (name, p) in &params.params {
            m.insert(name.clone(), vec![F::zero(); p.data.len()]);
            s.insert(name.clone(), vec![F::zero(); p.data.len()]);
        }
        OptimizerState { config, m, s, t: 0 }
    }

    /// One update over every parameter. Every parameter must have a gradient
    /// written since the last step.
    pub fn step(&mut self, params: &mut ModelParams<F>) -> Result<(), TensorError> {
        for (name, p) in &params.params {
            if !p.grad_ready {
                return Err(TensorError::MissingGrad { name: name.clone() });
            }
        }
        self.t += 1;
        let t = self.t as i32;
        let b1 = self.config.beta1;
        let b2 = self.config.beta2;
        let eps = self.config.eps;
        let lr = self.config.lr;
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        for (name, p) in params.params.iter_mut() {
            let m = self.m.get_mut(name).expect("optimizer state matches params");
            let s = self.s.get_mut(name).expect("optimizer state matches params");
            for k in 0..p.data.len() {
                let g = p.grad[k].as_f64();
                let mk = b1 * m[k].as_f64() + (1.0 - b1) * g;
                let dev = g - mk;
                let sk = b2 * s[k].as_f64() + (1.0 - b2) * dev * dev + eps;
                m[k] = F::from_f64(mk);
                s[k] = F::from_f64(sk);
                let m_hat = mk / bc1;
                let s_hat = sk / bc2;
                let upd = lr * m_hat / (s_hat.sqrt() + eps);
                p.data[k] = F::from_f64(p.data[k].as_f64() - upd);
            }
            p.grad_ready = false;
            p.grad.iter_mut().for_each(|g| *g = F::zero());
        }
        Ok(())
    }
}
