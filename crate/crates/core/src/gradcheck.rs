//! Central finite-difference gradient oracle.
//!
//! Runs at f64: with the default step 1e-4 the difference quotient carries
//! roughly 1e-8 relative error, leaving the full 1e-3 budget to catch real
//! backward-pass bugs. The engine is generic over the float type precisely so
//! the same graph code paths can be checked here and trained at f32.

use crate::real::Real;
use crate::tensor::{Graph, TensorError, Var};

pub const DEFAULT_STEP: f64 = 1e-4;
pub const DEFAULT_TOL: f64 = 1e-3;

/// Largest relative error between analytic and central-difference gradients
/// over every element of every input. `build` must construct a scalar loss
/// from leaves created in the order of `inputs`.
pub fn max_relative_error<B>(
    inputs: &[(Vec<f64>, Vec<usize>)],
    step: f64,
    build: B,
) -> Result<f64, TensorError>
where
    B: Fn(&mut Graph<f64>, &[Var]) -> Result<Var, TensorError>,
{
    let forward = |data: &[(Vec<f64>, Vec<usize>)]| -> Result<f64, TensorError> {
        let mut g = Graph::<f64>::new();
        let mut vars = Vec::with_capacity(data.len());
        for (d, s) in data {
            vars.push(g.leaf(d.clone(), s.clone(), true)?);
        }
        let loss = build(&mut g, &vars)?;
        Ok(g.scalar(loss))
    };

    let mut g = Graph::<f64>::new();
    let mut vars = Vec::with_capacity(inputs.len());
    for (d, s) in inputs {
        vars.push(g.leaf(d.clone(), s.clone(), true)?);
    }
    let loss = build(&mut g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, (d, _))| g.grad(v).map(|x| x.to_vec()).unwrap_or_else(|| vec![0.0; d.len()]))
        .collect();

    let mut worst = 0.0f64;
    let mut probe: Vec<(Vec<f64>, Vec<usize>)> = inputs.to_vec();
    for (which, (data, _)) in inputs.iter().enumerate() {
        for k in 0..data.len() {
            probe[which].0[k] = data[k] + step;
            let up = forward(&probe)?;
            probe[which].0[k] = data[k] - step;
            let down = forward(&probe)?;
            probe[which].0[k] = data[k];
            let numeric = (up - down) / (2.0 * step);
            let a = analytic[which][k];
            let denom = a.abs().max(numeric.abs()).max(1e-3);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}

/// Deterministic small random values in [-1, 1) for building test instances.
pub fn uniform_input<F: Real>(rng: &mut impl rand::Rng, n: usize) -> Vec<F> {
    (0..n).map(|_| F::from_f64(rng.gen_range(-1.0..1.0))).collect()
}
