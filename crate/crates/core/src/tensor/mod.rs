//! Dense row-major tensor graph with reverse-mode automatic differentiation.
//!
//! A `Graph` is a tape: every operation evaluates eagerly, appends a node
//! holding the result plus whatever context its backward pass needs, and
//! returns a `Var` handle. `backward` walks the tape in reverse. Graphs are
//! cheap and short-lived; training builds one per batch. A `Var` is only
//! meaningful for the graph that produced it.
//!
//! Every forward op verifies its output is finite and reports a structured
//! error otherwise, so numerical faults surface at the op that caused them.
//!
//! Reductions, normalization statistics, and loss sums accumulate in f64
//! regardless of the storage type; matrix-multiply inner loops accumulate in
//! the storage type for speed.

mod backward;
pub mod optim;
pub mod params;

use crate::real::Real;
use rayon::prelude::*;

/// Handle to a node in one specific graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Clone, PartialEq)]
pub enum TensorError {
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    BadShape {
        op: &'static str,
        detail: String,
    },
    NonFinite {
        op: &'static str,
    },
    NotScalar {
        op: &'static str,
        shape: Vec<usize>,
    },
    MissingGrad {
        name: String,
    },
}

impl std::fmt::Display for TensorError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TensorError::ShapeMismatch { op, lhs, rhs } => {
                write!(f, "{}: shape mismatch {:?} vs {:?}", op, lhs, rhs)
            }
            TensorError::BadShape { op, detail } => write!(f, "{}: {}", op, detail),
            TensorError::NonFinite { op } => write!(f, "{}: non-finite value produced", op),
            TensorError::NotScalar { op, shape } => {
                write!(f, "{}: expected a scalar, got shape {:?}", op, shape)
            }
            TensorError::MissingGrad { name } => {
                write!(f, "parameter {} has no gradient; run backward first", name)
            }
        }
    }
}

impl std::error::Error for TensorError {}

pub(crate) enum Op<F: Real> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    /// rhs shape is a suffix of lhs shape; rhs is tiled over the leading dims.
    AddSuffix(usize, usize),
    MulSuffix(usize, usize),
    Scale(usize, F),
    /// lhs [.., K] times shared rhs [K, N] -> [.., N].
    MatmulShared(usize, usize),
    /// lhs [.., M, K] times rhs [.., K, N], equal leading dims -> [.., M, N].
    MatmulPair(usize, usize),
    /// Row lookup: table [R, W] indexed by `idx` -> [len(idx), W].
    GatherRows(usize, Vec<usize>),
    SoftmaxLast(usize),
    /// Normalizes over the last axis; `rstd` holds 1/sqrt(var + eps) per row.
    LayerNormLast { x: usize, rstd: Vec<F> },
    /// Normalizes [B, F] over the batch axis; per-column context saved for
    /// backward and for the caller's running-statistics update.
    BatchNorm0 {
        x: usize,
        rstd: Vec<F>,
        mean: Vec<F>,
        var_biased: Vec<F>,
    },
    Gelu(usize),
    Sigmoid(usize),
    SumAll(usize),
    MeanAll(usize),
    Reshape(usize),
    Permute(usize, Vec<usize>),
    ConcatLast(Vec<usize>),
    /// Mean of per-element sigmoid BCE, weighted; weights 0/1 mask components
    /// out of both the sum and the normalizer.
    BceMean {
        x: usize,
        targets: Vec<F>,
        weights: Vec<F>,
        wsum: f64,
    },
    /// Symmetric nearest-neighbor set loss between graph points [n, 2] and a
    /// constant target set [m, 2]; argmins saved, ties keep the first index.
    Chamfer {
        points: usize,
        target: Vec<F>,
        nn_sig_to_tgt: Vec<usize>,
        nn_tgt_to_sig: Vec<usize>,
    },
}

pub(crate) struct Node<F: Real> {
    pub value: Vec<F>,
    pub shape: Vec<usize>,
    pub needs_grad: bool,
    pub grad: Option<Vec<F>>,
    pub op: Op<F>,
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn all_finite<F: Real>(data: &[F]) -> bool {
    data.iter().all(|x| x.is_finite())
}

/// Parallelize a matmul only when it is big enough to pay for the fan-out.
const PAR_FLOP_THRESHOLD: usize = 1 << 18;

/// Row-major [R, K] x [K, N] -> [R, N] with the K loop outside N so the inner
/// loop is stride-1 in both operands.
fn matmul_kernel<F: Real>(a: &[F], b: &[F], out: &mut [F], k: usize, n: usize) {
    for (orow, arow) in out.chunks_exact_mut(n).zip(a.chunks_exact(k)) {
        for (ak, brow) in arow.iter().zip(b.chunks_exact(n)) {
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += *ak * *bv;
            }
        }
    }
}

fn matmul<F: Real>(a: &[F], b: &[F], r: usize, k: usize, n: usize) -> Vec<F> {
    let mut out = vec![F::zero(); r * n];
    if r * k * n >= PAR_FLOP_THRESHOLD {
        out.par_chunks_mut(n)
            .zip(a.par_chunks(k))
            .for_each(|(orow, arow)| {
                for (ak, brow) in arow.iter().zip(b.chunks_exact(n)) {
                    for (o, bv) in orow.iter_mut().zip(brow) {
                        *o += *ak * *bv;
                    }
                }
            });
    } else {
        matmul_kernel(a, b, &mut out, k, n);
    }
    out
}

fn transpose<F: Real>(m: &[F], rows: usize, cols: usize) -> Vec<F> {
    let mut out = vec![F::zero(); m.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = m[r * cols + c];
        }
    }
    out
}

fn permute_data<F: Real>(data: &[F], shape: &[usize], perm: &[usize]) -> (Vec<F>, Vec<usize>) {
    let nd = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&d| shape[d]).collect();
    let mut in_strides = vec![1usize; nd];
    for d in (0..nd.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * shape[d + 1];
    }
    let mut out = vec![F::zero(); data.len()];
    let mut out_index = vec![0usize; nd];
    for (lin, slot) in out.iter_mut().enumerate() {
        let mut rem = lin;
        for d in (0..nd).rev() {
            out_index[d] = rem % out_shape[d];
            rem /= out_shape[d];
        }
        let mut src = 0usize;
        for d in 0..nd {
            src += out_index[d] * in_strides[perm[d]];
        }
        *slot = data[src];
    }
    (out, out_shape)
}

fn sigmoid_f64(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub struct Graph<F: Real> {
    nodes: Vec<Node<F>>,
}

impl<F: Real> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn value(&self, v: Var) -> &[F] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Scalar convenience: the single value of a one-element node.
    pub fn scalar(&self, v: Var) -> F {
        debug_assert_eq!(numel(&self.nodes[v.0].shape), 1);
        self.nodes[v.0].value[0]
    }

    pub fn grad(&self, v: Var) -> Option<&[F]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Batch statistics of a `batch_norm_train` node: (mean, biased variance)
    /// per column, for the caller's running-buffer update.
    pub fn bn_stats(&self, v: Var) -> Option<(&[F], &[F])> {
        match &self.nodes[v.0].op {
            Op::BatchNorm0 { mean, var_biased, .. } => Some((mean, var_biased)),
            _ => None,
        }
    }

    fn push(
        &mut self,
        op_name: &'static str,
        value: Vec<F>,
        shape: Vec<usize>,
        needs_grad: bool,
        op: Op<F>,
    ) -> Result<Var, TensorError> {
        debug_assert_eq!(numel(&shape), value.len());
        if !all_finite(&value) {
            return Err(TensorError::NonFinite { op: op_name });
        }
        self.nodes.push(Node {
            value,
            shape,
            needs_grad,
            grad: None,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn leaf(
        &mut self,
        data: Vec<F>,
        shape: Vec<usize>,
        needs_grad: bool,
    ) -> Result<Var, TensorError> {
        if numel(&shape) != data.len() {
            return Err(TensorError::BadShape {
                op: "leaf",
                detail: format!("shape {:?} does not hold {} elements", shape, data.len()),
            });
        }
        self.push("leaf", data, shape, needs_grad, Op::Leaf)
    }

    pub fn constant(&mut self, data: Vec<F>, shape: Vec<usize>) -> Result<Var, TensorError> {
        self.leaf(data, shape, false)
    }

    fn same_shape(
        &self,
        op: &'static str,
        a: Var,
        b: Var,
    ) -> Result<(), TensorError> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("add", a, b)?;
        let value: Vec<F> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let needs = self.needs(a) || self.needs(b);
        self.push("add", value, shape, needs, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("sub", a, b)?;
        let value: Vec<F> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(&x, &y)| x - y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let needs = self.needs(a) || self.needs(b);
        self.push("sub", value, shape, needs, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("mul", a, b)?;
        let value: Vec<F> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let needs = self.needs(a) || self.needs(b);
        self.push("mul", value, shape, needs, Op::Mul(a.0, b.0))
    }

    fn suffix_check(
        &self,
        op: &'static str,
        a: Var,
        b: Var,
    ) -> Result<usize, TensorError> {
        let big = &self.nodes[a.0].shape;
        let small = &self.nodes[b.0].shape;
        if small.len() > big.len() || &big[big.len() - small.len()..] != small.as_slice() {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: big.clone(),
                rhs: small.clone(),
            });
        }
        Ok(numel(small))
    }

    /// a + b with b tiled over a's leading dims (bias add, positional add).
    pub fn add_suffix(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let chunk = self.suffix_check("add_suffix", a, b)?;
        let bv = &self.nodes[b.0].value;
        let value: Vec<F> = self.nodes[a.0]
            .value
            .chunks_exact(chunk)
            .flat_map(|ch| ch.iter().zip(bv).map(|(&x, &y)| x + y))
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let needs = self.needs(a) || self.needs(b);
        self.push("add_suffix", value, shape, needs, Op::AddSuffix(a.0, b.0))
    }

    /// a * b with b tiled over a's leading dims (affine scale).
    pub fn mul_suffix(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let chunk = self.suffix_check("mul_suffix", a, b)?;
        let bv = &self.nodes[b.0].value;
        let value: Vec<F> = self.nodes[a.0]
            .value
            .chunks_exact(chunk)
            .flat_map(|ch| ch.iter().zip(bv).map(|(&x, &y)| x * y))
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let needs = self.needs(a) || self.needs(b);
        self.push("mul_suffix", value, shape, needs, Op::MulSuffix(a.0, b.0))
    }

    pub fn scale(&mut self, a: Var, c: F) -> Result<Var, TensorError> {
        let value: Vec<F> = self.nodes[a.0].value.iter().map(|&x| x * c).collect();
        let shape = self.nodes[a.0].shape.clone();
        let needs = self.needs(a);
        self.push("scale", value, shape, needs, Op::Scale(a.0, c))
    }

    /// [.., K] x [K, N] -> [.., N]; the rhs is shared across leading dims.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let ashape = self.nodes[a.0].shape.clone();
        let bshape = self.nodes[b.0].shape.clone();
        if bshape.len() != 2 || ashape.is_empty() || ashape[ashape.len() - 1] != bshape[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: ashape,
                rhs: bshape,
            });
        }
        let k = bshape[0];
        let n = bshape[1];
        let r = numel(&ashape) / k;
        let value = matmul(&self.nodes[a.0].value, &self.nodes[b.0].value, r, k, n);
        let mut shape = ashape;
        *shape.last_mut().unwrap() = n;
        let needs = self.needs(a) || self.needs(b);
        self.push("matmul", value, shape, needs, Op::MatmulShared(a.0, b.0))
    }

    /// [.., M, K] x [.., K, N] -> [.., M, N]; leading dims must match.
    pub fn matmul_pair(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let ashape = self.nodes[a.0].shape.clone();
        let bshape = self.nodes[b.0].shape.clone();
        let ok = ashape.len() >= 2
            && bshape.len() == ashape.len()
            && ashape[..ashape.len() - 2] == bshape[..bshape.len() - 2]
            && ashape[ashape.len() - 1] == bshape[bshape.len() - 2];
        if !ok {
            return Err(TensorError::ShapeMismatch {
                op: "matmul_pair",
                lhs: ashape,
                rhs: bshape,
            });
        }
        let nd = ashape.len();
        let m = ashape[nd - 2];
        let k = ashape[nd - 1];
        let n = bshape[nd - 1];
        let batches = numel(&ashape[..nd - 2]);
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let mut value = vec![F::zero(); batches * m * n];
        if batches * m * k * n >= PAR_FLOP_THRESHOLD {
            value
                .par_chunks_mut(m * n)
                .enumerate()
                .for_each(|(bi, out)| {
                    matmul_kernel(&av[bi * m * k..(bi + 1) * m * k], &bv[bi * k * n..(bi + 1) * k * n], out, k, n);
                });
        } else {
            for bi in 0..batches {
                matmul_kernel(
                    &av[bi * m * k..(bi + 1) * m * k],
                    &bv[bi * k * n..(bi + 1) * k * n],
                    &mut value[bi * m * n..(bi + 1) * m * n],
                    k,
                    n,
                );
            }
        }
        let mut shape = ashape;
        shape[nd - 2] = m;
        shape[nd - 1] = n;
        let needs = self.needs(a) || self.needs(b);
        self.push("matmul_pair", value, shape, needs, Op::MatmulPair(a.0, b.0))
    }

    /// table [R, W] -> [len(idx), W]; gradient scatter-adds into the table.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var, TensorError> {
        let tshape = self.nodes[table.0].shape.clone();
        if tshape.len() != 2 {
            return Err(TensorError::BadShape {
                op: "gather_rows",
                detail: format!("table must be 2-D, got {:?}", tshape),
            });
        }
        let (rows, w) = (tshape[0], tshape[1]);
        if let Some(&bad) = idx.iter().find(|&&r| r >= rows) {
            return Err(TensorError::BadShape {
                op: "gather_rows",
                detail: format!("row index {} out of range for table with {} rows", bad, rows),
            });
        }
        let tv = &self.nodes[table.0].value;
        let mut value = Vec::with_capacity(idx.len() * w);
        for &r in idx {
            value.extend_from_slice(&tv[r * w..(r + 1) * w]);
        }
        let needs = self.needs(table);
        self.push(
            "gather_rows",
            value,
            vec![idx.len(), w],
            needs,
            Op::GatherRows(table.0, idx.to_vec()),
        )
    }

    pub fn softmax_last(&mut self, a: Var) -> Result<Var, TensorError> {
        let shape = self.nodes[a.0].shape.clone();
        let d = *shape.last().ok_or(TensorError::BadShape {
            op: "softmax",
            detail: "input must have at least one axis".into(),
        })?;
        let mut value = Vec::with_capacity(self.nodes[a.0].value.len());
        for row in self.nodes[a.0].value.chunks_exact(d) {
            let max = row.iter().fold(F::neg_infinity(), |m, &x| m.max(x));
            let exps: Vec<f64> = row.iter().map(|&x| (x - max).as_f64().exp()).collect();
            let denom: f64 = exps.iter().sum();
            value.extend(exps.iter().map(|&e| F::from_f64(e / denom)));
        }
        let needs = self.needs(a);
        self.push("softmax", value, shape, needs, Op::SoftmaxLast(a.0))
    }

    /// Normalize over the last axis to zero mean, unit variance (no affine;
    /// compose with mul_suffix/add_suffix for gain and bias).
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Result<Var, TensorError> {
        let shape = self.nodes[a.0].shape.clone();
        let d = *shape.last().ok_or(TensorError::BadShape {
            op: "layer_norm",
            detail: "input must have at least one axis".into(),
        })?;
        let av = &self.nodes[a.0].value;
        let mut value = Vec::with_capacity(av.len());
        let mut rstd = Vec::with_capacity(av.len() / d);
        for row in av.chunks_exact(d) {
            let mean: f64 = row.iter().map(|x| x.as_f64()).sum::<f64>() / d as f64;
            let var: f64 =
                row.iter().map(|x| (x.as_f64() - mean).powi(2)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd.push(F::from_f64(r));
            value.extend(row.iter().map(|x| F::from_f64((x.as_f64() - mean) * r)));
        }
        let needs = self.needs(a);
        self.push(
            "layer_norm",
            value,
            shape,
            needs,
            Op::LayerNormLast { x: a.0, rstd },
        )
    }

    /// Training-mode batch norm over axis 0 of [B, F], B >= 2; biased variance
    /// normalizes the batch, and the saved stats let the caller maintain
    /// running buffers. Eval mode is composed from constants instead.
    pub fn batch_norm_train(&mut self, a: Var, eps: f64) -> Result<Var, TensorError> {
        let shape = self.nodes[a.0].shape.clone();
        if shape.len() != 2 {
            return Err(TensorError::BadShape {
                op: "batch_norm",
                detail: format!("input must be [batch, features], got {:?}", shape),
            });
        }
        let (b, fdim) = (shape[0], shape[1]);
        if b < 2 {
            return Err(TensorError::BadShape {
                op: "batch_norm",
                detail: format!("batch statistics need batch size >= 2, got {}", b),
            });
        }
        let av = &self.nodes[a.0].value;
        let mut mean = vec![0.0f64; fdim];
        for row in av.chunks_exact(fdim) {
            for (m, x) in mean.iter_mut().zip(row) {
                *m += x.as_f64();
            }
        }
        for m in mean.iter_mut() {
            *m /= b as f64;
        }
        let mut var = vec![0.0f64; fdim];
        for row in av.chunks_exact(fdim) {
            for ((v, x), m) in var.iter_mut().zip(row).zip(&mean) {
                *v += (x.as_f64() - m).powi(2);
            }
        }
        for v in var.iter_mut() {
            *v /= b as f64;
        }
        let rstd: Vec<F> = var.iter().map(|&v| F::from_f64(1.0 / (v + eps).sqrt())).collect();
        let mut value = Vec::with_capacity(av.len());
        for row in av.chunks_exact(fdim) {
            for ((x, m), r) in row.iter().zip(&mean).zip(&rstd) {
                value.push(F::from_f64((x.as_f64() - m) * r.as_f64()));
            }
        }
        let needs = self.needs(a);
        self.push(
            "batch_norm",
            value,
            shape,
            needs,
            Op::BatchNorm0 {
                x: a.0,
                rstd,
                mean: mean.iter().map(|&m| F::from_f64(m)).collect(),
                var_biased: var.iter().map(|&v| F::from_f64(v)).collect(),
            },
        )
    }

    /// Exact geLU, x * Phi(x) with the Gauss CDF via erf.
    pub fn gelu(&mut self, a: Var) -> Result<Var, TensorError> {
        let value: Vec<F> = self.nodes[a.0]
            .value
            .iter()
            .map(|&x| {
                let half = F::from_f64(0.5);
                let inv_sqrt2 = F::from_f64(std::f64::consts::FRAC_1_SQRT_2);
                x * half * (F::one() + (x * inv_sqrt2).erf())
            })
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let needs = self.needs(a);
        self.push("gelu", value, shape, needs, Op::Gelu(a.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, TensorError> {
        let value: Vec<F> = self.nodes[a.0]
            .value
            .iter()
            .map(|&x| F::from_f64(sigmoid_f64(x.as_f64())))
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let needs = self.needs(a);
        self.push("sigmoid", value, shape, needs, Op::Sigmoid(a.0))
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var, TensorError> {
        let s: f64 = self.nodes[a.0].value.iter().map(|x| x.as_f64()).sum();
        let needs = self.needs(a);
        self.push("sum", vec![F::from_f64(s)], vec![], needs, Op::SumAll(a.0))
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var, TensorError> {
        let n = self.nodes[a.0].value.len();
        if n == 0 {
            return Err(TensorError::BadShape {
                op: "mean",
                detail: "mean of an empty tensor".into(),
            });
        }
        let s: f64 = self.nodes[a.0].value.iter().map(|x| x.as_f64()).sum();
        let needs = self.needs(a);
        self.push(
            "mean",
            vec![F::from_f64(s / n as f64)],
            vec![],
            needs,
            Op::MeanAll(a.0),
        )
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var, TensorError> {
        if numel(&shape) != self.nodes[a.0].value.len() {
            return Err(TensorError::BadShape {
                op: "reshape",
                detail: format!(
                    "cannot view {} elements as {:?}",
                    self.nodes[a.0].value.len(),
                    shape
                ),
            });
        }
        let value = self.nodes[a.0].value.clone();
        let needs = self.needs(a);
        self.push("reshape", value, shape, needs, Op::Reshape(a.0))
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var, TensorError> {
        let shape = self.nodes[a.0].shape.clone();
        let nd = shape.len();
        let mut seen = vec![false; nd];
        let valid = perm.len() == nd && perm.iter().all(|&d| d < nd && !std::mem::replace(&mut seen[d], true));
        if !valid {
            return Err(TensorError::BadShape {
                op: "permute",
                detail: format!("{:?} is not a permutation of {} axes", perm, nd),
            });
        }
        let (value, out_shape) = permute_data(&self.nodes[a.0].value, &shape, perm);
        let needs = self.needs(a);
        self.push("permute", value, out_shape, needs, Op::Permute(a.0, perm.to_vec()))
    }

    /// Concatenate along the last axis; all other dims must match.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::BadShape {
                op: "concat",
                detail: "need at least one part".into(),
            });
        }
        let first = self.nodes[parts[0].0].shape.clone();
        if first.is_empty() {
            return Err(TensorError::BadShape {
                op: "concat",
                detail: "parts must have at least one axis".into(),
            });
        }
        let lead = &first[..first.len() - 1];
        let mut last_total = 0usize;
        for &p in parts {
            let s = &self.nodes[p.0].shape;
            if s.len() != first.len() || &s[..s.len() - 1] != lead {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: s.clone(),
                });
            }
            last_total += s[s.len() - 1];
        }
        let rows = numel(lead);
        let mut value = Vec::with_capacity(rows * last_total);
        for row in 0..rows {
            for &p in parts {
                let d = *self.nodes[p.0].shape.last().unwrap();
                let pv = &self.nodes[p.0].value;
                value.extend_from_slice(&pv[row * d..(row + 1) * d]);
            }
        }
        let mut shape = first;
        *shape.last_mut().unwrap() = last_total;
        let needs = parts.iter().any(|&p| self.needs(p));
        self.push(
            "concat",
            value,
            shape,
            needs,
            Op::ConcatLast(parts.iter().map(|p| p.0).collect()),
        )
    }

    /// Weighted mean sigmoid-BCE of logits against constant targets, in the
    /// numerically stable max(x,0) - x t + ln(1 + exp(-|x|)) form. Weights are
    /// 0/1 masks; the mean is over the unmasked components only.
    pub fn bce_mean(
        &mut self,
        logits: Var,
        targets: &[F],
        weights: &[F],
    ) -> Result<Var, TensorError> {
        let n = self.nodes[logits.0].value.len();
        if targets.len() != n || weights.len() != n {
            return Err(TensorError::BadShape {
                op: "bce",
                detail: format!(
                    "logits have {} elements, targets {} and weights {}",
                    n,
                    targets.len(),
                    weights.len()
                ),
            });
        }
        let wsum: f64 = weights.iter().map(|w| w.as_f64()).sum();
        if wsum <= 0.0 {
            return Err(TensorError::BadShape {
                op: "bce",
                detail: "all components are masked out".into(),
            });
        }
        let mut total = 0.0f64;
        for ((x, t), w) in self.nodes[logits.0].value.iter().zip(targets).zip(weights) {
            let x = x.as_f64();
            let t = t.as_f64();
            let w = w.as_f64();
            if w != 0.0 {
                total += w * (x.max(0.0) - x * t + (-x.abs()).exp().ln_1p());
            }
        }
        let needs = self.needs(logits);
        self.push(
            "bce",
            vec![F::from_f64(total / wsum)],
            vec![],
            needs,
            Op::BceMean {
                x: logits.0,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                wsum,
            },
        )
    }

    /// Symmetric nearest-neighbor loss between `points` [n, 2] and a constant
    /// target set given as interleaved (i, q) pairs. Per-pair distance is the
    /// mean of the two squared component differences.
    pub fn chamfer(&mut self, points: Var, target: &[F]) -> Result<Var, TensorError> {
        let pshape = self.nodes[points.0].shape.clone();
        if pshape.len() != 2 || pshape[1] != 2 || pshape[0] == 0 {
            return Err(TensorError::BadShape {
                op: "chamfer",
                detail: format!("signal points must be a nonempty [n, 2], got {:?}", pshape),
            });
        }
        if target.len() < 2 || target.len() % 2 != 0 {
            return Err(TensorError::BadShape {
                op: "chamfer",
                detail: format!("target must hold a nonempty list of point pairs, got {} values", target.len()),
            });
        }
        if !all_finite(target) {
            return Err(TensorError::NonFinite { op: "chamfer" });
        }
        let n = pshape[0];
        let m = target.len() / 2;
        let pv = &self.nodes[points.0].value;
        let mut nn_sig_to_tgt = vec![0usize; n];
        let mut min_sig = vec![f64::INFINITY; n];
        let mut nn_tgt_to_sig = vec![0usize; m];
        let mut min_tgt = vec![f64::INFINITY; m];
        for i in 0..n {
            let si = pv[2 * i].as_f64();
            let sq = pv[2 * i + 1].as_f64();
            for j in 0..m {
                let di = si - target[2 * j].as_f64();
                let dq = sq - target[2 * j + 1].as_f64();
                let d = (di * di + dq * dq) / 2.0;
                if d < min_sig[i] {
                    min_sig[i] = d;
                    nn_sig_to_tgt[i] = j;
                }
                if d < min_tgt[j] {
                    min_tgt[j] = d;
                    nn_tgt_to_sig[j] = i;
                }
            }
        }
        let loss = min_sig.iter().sum::<f64>() / n as f64 + min_tgt.iter().sum::<f64>() / m as f64;
        let needs = self.needs(points);
        self.push(
            "chamfer",
            vec![F::from_f64(loss)],
            vec![],
            needs,
            Op::Chamfer {
                points: points.0,
                target: target.to_vec(),
                nn_sig_to_tgt,
                nn_tgt_to_sig,
            },
        )
    }

    // Composites built from the primitive ops.

    /// x [.., K] -> x w + b with w [K, N], b [N].
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var, TensorError> {
        let y = self.matmul(x, w)?;
        self.add_suffix(y, b)
    }

    /// Pointwise channel mix: x [.., C_in] with conv weight [C_out, C_in] and
    /// bias [C_out]. A kernel-1 1-D convolution over a channels-last layout.
    pub fn conv1d_k1(&mut self, x: Var, w: Var, b: Var) -> Result<Var, TensorError> {
        let wshape = self.nodes[w.0].shape.clone();
        if wshape.len() != 2 {
            return Err(TensorError::BadShape {
                op: "conv1d_k1",
                detail: format!("weight must be [out, in], got {:?}", wshape),
            });
        }
        // matmul wants [C_in, C_out]; transpose through permute to keep the
        // stored parameter in its natural [out, in] orientation.
        let wt = self.permute(w, &[1, 0])?;
        let y = self.matmul(x, wt)?;
        self.add_suffix(y, b)
    }
}
