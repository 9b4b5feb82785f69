//! Named parameter storage shared by both networks.
//!
//! Insertion order is load-bearing: it fixes the initialization draw order and
//! the checkpoint layout, so two runs that register the same names in the same
//! order are bit-compatible.

use super::{numel, Graph, TensorError, Var};
use crate::real::Real;
use indexmap::IndexMap;

/// One named tensor: trainable parameters carry a same-shape gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct PTensor<F: Real> {
    pub shape: Vec<usize>,
    pub data: Vec<F>,
    pub grad: Vec<F>,
    /// Set by `write_grads`, cleared by the optimizer step; guards against
    /// stepping on stale or absent gradients.
    pub grad_ready: bool,
}

impl<F: Real> PTensor<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Self {
        assert_eq!(numel(&shape), data.len());
        let n = data.len();
        PTensor {
            shape,
            data,
            grad: vec![F::zero(); n],
            grad_ready: false,
        }
    }
}

/// All parameters and non-trainable buffers (batch-norm running statistics)
/// for the modulator/demodulator pair.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelParams<F: Real> {
    pub params: IndexMap<String, PTensor<F>>,
    pub buffers: IndexMap<String, PTensor<F>>,
}

impl<F: Real> ModelParams<F> {
    pub fn new() -> Self {
        ModelParams {
            params: IndexMap::new(),
            buffers: IndexMap::new(),
        }
    }

    pub fn insert_param(&mut self, name: &str, shape: Vec<usize>, data: Vec<F>) {
        let prev = self.params.insert(name.to_string(), PTensor::new(shape, data));
        assert!(prev.is_none(), "duplicate parameter name {}", name);
    }

    pub fn insert_buffer(&mut self, name: &str, shape: Vec<usize>, data: Vec<F>) {
        let prev = self.buffers.insert(name.to_string(), PTensor::new(shape, data));
        assert!(prev.is_none(), "duplicate buffer name {}", name);
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(|p| p.data.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.values_mut() {
            p.grad.iter_mut().for_each(|g| *g = F::zero());
            p.grad_ready = false;
        }
    }
}

/// Parameters bound into one graph as trainable leaves, in registration order.
pub struct BoundParams {
    vars: IndexMap<String, Var>,
}

impl BoundParams {
    pub fn get(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter {} not bound", name))
    }
}

/// Bind every parameter as a `needs_grad` leaf of `graph`.
pub fn bind_params<F: Real>(
    graph: &mut Graph<F>,
    params: &ModelParams<F>,
) -> Result<BoundParams, TensorError> {
    let mut vars = IndexMap::new();
    for (name, p) in &params.params {
        let v = graph.leaf(p.data.clone(), p.shape.clone(), true)?;
        vars.insert(name.clone(), v);
    }
    Ok(BoundParams { vars })
}

/// Copy the graph's leaf gradients back into the parameter store, adding to
/// whatever is already accumulated there. Parameters the loss never touched
/// contribute zero; their ready flag is still set so the optimizer can step.
pub fn write_grads<F: Real>(
    graph: &Graph<F>,
    bound: &BoundParams,
    params: &mut ModelParams<F>,
) {
    for (name, var) in &bound.vars {
        let p = params
            .params
            .get_mut(name)
            .unwrap_or_else(|| panic!("bound parameter {} missing from store", name));
        if let Some(g) = graph.grad(*var) {
            for (dst, src) in p.grad.iter_mut().zip(g) {
                *dst += *src;
            }
        }
        p.grad_ready = true;
    }
}

/// Scale all gradients so their global L2 norm is at most `max_norm`; returns
/// the pre-clip norm. Norm accumulation is in f64.
pub fn clip_global_norm<F: Real>(params: &mut ModelParams<F>, max_norm: f64) -> f64 {
    let mut sq = 0.0f64;
    for p in params.params.values() {
        for g in &p.grad {
            let v = g.as_f64();
            sq += v * v;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = F::from_f64(max_norm / norm);
        for p in params.params.values_mut() {
            for g in p.grad.iter_mut() {
                *g *= s;
            }
        }
    }
    norm
}
