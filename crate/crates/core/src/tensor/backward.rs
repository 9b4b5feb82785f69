//! Reverse pass over the tape.
//!
//! Accumulation semantics: `backward` clears the gradients of interior nodes
//! and then adds into leaf gradients, so calling it twice on the same graph
//! doubles every leaf gradient. Interior gradients are left in place after
//! the walk for inspection.

use super::{matmul, numel, permute_data, sigmoid_f64, transpose, Graph, Node, Op, TensorError, Var};
use crate::real::Real;

fn accum<F: Real>(node: &mut Node<F>, contrib: &[F]) {
    let grad = node
        .grad
        .get_or_insert_with(|| vec![F::zero(); node.value.len()]);
    for (g, c) in grad.iter_mut().zip(contrib) {
        *g += *c;
    }
}

impl<F: Real> Graph<F> {
    /// Propagate d(loss)/d(node) from a scalar loss to every `needs_grad`
    /// node beneath it.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        let lid = loss.0;
        if numel(&self.nodes[lid].shape) != 1 {
            return Err(TensorError::NotScalar {
                op: "backward",
                shape: self.nodes[lid].shape.clone(),
            });
        }
        for node in &mut self.nodes {
            if !matches!(node.op, Op::Leaf) {
                node.grad = None;
            }
        }
        if !self.nodes[lid].needs_grad {
            // Nothing trainable feeds the loss; a no-op, not an error.
            return Ok(());
        }
        accum(&mut self.nodes[lid], &[F::one()]);
        for id in (0..=lid).rev() {
            if !self.nodes[id].needs_grad || self.nodes[id].grad.is_none() {
                continue;
            }
            if matches!(self.nodes[id].op, Op::Leaf) {
                continue;
            }
            let (head, tail) = self.nodes.split_at_mut(id);
            let node = &tail[0];
            let dy = node.grad.as_deref().unwrap();
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Add(a, b) => {
                    if head[*a].needs_grad {
                        accum(&mut head[*a], dy);
                    }
                    if head[*b].needs_grad {
                        accum(&mut head[*b], dy);
                    }
                }
                Op::Sub(a, b) => {
                    if head[*a].needs_grad {
                        accum(&mut head[*a], dy);
                    }
                    if head[*b].needs_grad {
                        let neg: Vec<F> = dy.iter().map(|&d| -d).collect();
                        accum(&mut head[*b], &neg);
                    }
                }
                Op::Mul(a, b) => {
                    if head[*a].needs_grad {
                        let ca: Vec<F> = dy
                            .iter()
                            .zip(&head[*b].value)
                            .map(|(&d, &v)| d * v)
                            .collect();
                        accum(&mut head[*a], &ca);
                    }
                    if head[*b].needs_grad {
                        let cb: Vec<F> = dy
                            .iter()
                            .zip(&head[*a].value)
                            .map(|(&d, &v)| d * v)
                            .collect();
                        accum(&mut head[*b], &cb);
                    }
                }
                Op::AddSuffix(a, b) => {
                    if head[*a].needs_grad {
                        accum(&mut head[*a], dy);
                    }
                    if head[*b].needs_grad {
                        let chunk = head[*b].value.len();
                        let mut cb = vec![F::zero(); chunk];
                        for row in dy.chunks_exact(chunk) {
                            for (c, d) in cb.iter_mut().zip(row) {
                                *c += *d;
                            }
                        }
                        accum(&mut head[*b], &cb);
                    }
                }
                Op::MulSuffix(a, b) => {
                    let chunk = head[*b].value.len();
                    if head[*a].needs_grad {
                        let bv = &head[*b].value;
                        let ca: Vec<F> = dy
                            .chunks_exact(chunk)
                            .flat_map(|row| row.iter().zip(bv).map(|(&d, &v)| d * v))
                            .collect();
                        accum(&mut head[*a], &ca);
                    }
                    if head[*b].needs_grad {
                        let av = &head[*a].value;
                        let mut cb = vec![F::zero(); chunk];
                        for (drow, arow) in dy.chunks_exact(chunk).zip(av.chunks_exact(chunk)) {
                            for ((c, d), v) in cb.iter_mut().zip(drow).zip(arow) {
                                *c += *d * *v;
                            }
                        }
                        accum(&mut head[*b], &cb);
                    }
                }
                Op::Scale(a, c) => {
                    if head[*a].needs_grad {
                        let ca: Vec<F> = dy.iter().map(|&d| d * *c).collect();
                        accum(&mut head[*a], &ca);
                    }
                }
                Op::MatmulShared(a, b) => {
                    let k = head[*b].shape[0];
                    let n = head[*b].shape[1];
                    let r = head[*a].value.len() / k;
                    if head[*a].needs_grad {
                        let bt = transpose(&head[*b].value, k, n);
                        let ca = matmul(dy, &bt, r, n, k);
                        accum(&mut head[*a], &ca);
                    }
                    if head[*b].needs_grad {
                        let at = transpose(&head[*a].value, r, k);
                        let cb = matmul(&at, dy, k, r, n);
                        accum(&mut head[*b], &cb);
                    }
                }
                Op::MatmulPair(a, b) => {
                    let nd = head[*a].shape.len();
                    let m = head[*a].shape[nd - 2];
                    let k = head[*a].shape[nd - 1];
                    let n = head[*b].shape[nd - 1];
                    let batches = head[*a].value.len() / (m * k);
                    if head[*a].needs_grad {
                        let mut ca = Vec::with_capacity(batches * m * k);
                        for bi in 0..batches {
                            let bt = transpose(&head[*b].value[bi * k * n..(bi + 1) * k * n], k, n);
                            ca.extend(matmul(&dy[bi * m * n..(bi + 1) * m * n], &bt, m, n, k));
                        }
                        accum(&mut head[*a], &ca);
                    }
                    if head[*b].needs_grad {
                        let mut cb = Vec::with_capacity(batches * k * n);
                        for bi in 0..batches {
                            let at = transpose(&head[*a].value[bi * m * k..(bi + 1) * m * k], m, k);
                            cb.extend(matmul(&at, &dy[bi * m * n..(bi + 1) * m * n], k, m, n));
                        }
                        accum(&mut head[*b], &cb);
                    }
                }
                Op::GatherRows(t, idx) => {
                    if head[*t].needs_grad {
                        let w = head[*t].shape[1];
                        let mut ct = vec![F::zero(); head[*t].value.len()];
                        for (j, &row) in idx.iter().enumerate() {
                            for (c, d) in ct[row * w..(row + 1) * w].iter_mut().zip(&dy[j * w..(j + 1) * w]) {
                                *c += *d;
                            }
                        }
                        accum(&mut head[*t], &ct);
                    }
                }
                Op::SoftmaxLast(a) => {
                    if head[*a].needs_grad {
                        let d = *node.shape.last().unwrap();
                        let y = &node.value;
                        let mut ca = Vec::with_capacity(y.len());
                        for (yrow, drow) in y.chunks_exact(d).zip(dy.chunks_exact(d)) {
                            let dot: f64 = yrow
                                .iter()
                                .zip(drow)
                                .map(|(&yv, &dv)| yv.as_f64() * dv.as_f64())
                                .sum();
                            let dot = F::from_f64(dot);
                            ca.extend(yrow.iter().zip(drow).map(|(&yv, &dv)| yv * (dv - dot)));
                        }
                        accum(&mut head[*a], &ca);
                    }
                }
                Op::LayerNormLast { x, rstd } => {
                    if head[*x].needs_grad {
                        let d = *node.shape.last().unwrap();
                        let xhat = &node.value;
                        let mut ca = Vec::with_capacity(xhat.len());
                        for ((hrow, drow), &r) in
                            xhat.chunks_exact(d).zip(dy.chunks_exact(d)).zip(rstd)
                        {
                            let m1: f64 =
                                drow.iter().map(|v| v.as_f64()).sum::<f64>() / d as f64;
                            let m2: f64 = drow
                                .iter()
                                .zip(hrow)
                                .map(|(&dv, &hv)| dv.as_f64() * hv.as_f64())
                                .sum::<f64>()
                                / d as f64;
                            let (m1, m2) = (F::from_f64(m1), F::from_f64(m2));
                            ca.extend(
                                drow.iter()
                                    .zip(hrow)
                                    .map(|(&dv, &hv)| r * (dv - m1 - hv * m2)),
                            );
                        }
                        accum(&mut head[*x], &ca);
                    }
                }
                Op::BatchNorm0 { x, rstd, .. } => {
                    if head[*x].needs_grad {
                        let fdim = node.shape[1];
                        let b = node.shape[0];
                        let xhat = &node.value;
                        let mut m1 = vec![0.0f64; fdim];
                        let mut m2 = vec![0.0f64; fdim];
                        for (drow, hrow) in dy.chunks_exact(fdim).zip(xhat.chunks_exact(fdim)) {
                            for j in 0..fdim {
                                m1[j] += drow[j].as_f64();
                                m2[j] += drow[j].as_f64() * hrow[j].as_f64();
                            }
                        }
                        for j in 0..fdim {
                            m1[j] /= b as f64;
                            m2[j] /= b as f64;
                        }
                        let mut ca = Vec::with_capacity(xhat.len());
                        for (drow, hrow) in dy.chunks_exact(fdim).zip(xhat.chunks_exact(fdim)) {
                            for j in 0..fdim {
                                let v = drow[j].as_f64() - m1[j] - hrow[j].as_f64() * m2[j];
                                ca.push(F::from_f64(rstd[j].as_f64() * v));
                            }
                        }
                        accum(&mut head[*x], &ca);
                    }
                }
                Op::Gelu(a) => {
                    if head[*a].needs_grad {
                        let ca: Vec<F> = head[*a]
                            .value
                            .iter()
                            .zip(dy)
                            .map(|(&x, &d)| {
                                let xf = x.as_f64();
                                let phi_cdf =
                                    0.5 * (1.0 + libm::erf(xf * std::f64::consts::FRAC_1_SQRT_2));
                                let phi_pdf = (-0.5 * xf * xf).exp()
                                    / (2.0 * std::f64::consts::PI).sqrt();
                                d * F::from_f64(phi_cdf + xf * phi_pdf)
                            })
                            .collect();
                        accum(&mut head[*a], &ca);
                    }
                }
                Op::Sigmoid(a) => {
                    if head[*a].needs_grad {
                        let ca: Vec<F> = node
                            .value
                            .iter()
                            .zip(dy)
                            .map(|(&y, &d)| d * y * (F::one() - y))
                            .collect();
                        accum(&mut head[*a], &ca);
                    }
                }
                Op::SumAll(a) => {
                    if head[*a].needs_grad {
                        let ca = vec![dy[0]; head[*a].value.len()];
                        accum(&mut head[*a], &ca);
                    }
                }
                Op::MeanAll(a) => {
                    if head[*a].needs_grad {
                        let n = head[*a].value.len();
                        let ca = vec![dy[0] * F::from_f64(1.0 / n as f64); n];
                        accum(&mut head[*a], &ca);
                    }
                }
                Op::Reshape(a) => {
                    if head[*a].needs_grad {
                        accum(&mut head[*a], dy);
                    }
                }
                Op::Permute(a, perm) => {
                    if head[*a].needs_grad {
                        let mut inv = vec![0usize; perm.len()];
                        for (d, &p) in perm.iter().enumerate() {
                            inv[p] = d;
                        }
                        let (ca, _) = permute_data(dy, &node.shape, &inv);
                        accum(&mut head[*a], &ca);
                    }
                }
                Op::ConcatLast(parts) => {
                    let total = *node.shape.last().unwrap();
                    let rows = node.value.len() / total;
                    let mut offset = 0usize;
                    for &p in parts {
                        let d = *head[p].shape.last().unwrap();
                        if head[p].needs_grad {
                            let mut cp = Vec::with_capacity(rows * d);
                            for row in 0..rows {
                                cp.extend_from_slice(&dy[row * total + offset..row * total + offset + d]);
                            }
                            accum(&mut head[p], &cp);
                        }
                        offset += d;
                    }
                }
                Op::BceMean {
                    x,
                    targets,
                    weights,
                    wsum,
                } => {
                    if head[*x].needs_grad {
                        let dv = dy[0].as_f64();
                        let ca: Vec<F> = head[*x]
                            .value
                            .iter()
                            .zip(targets)
                            .zip(weights)
                            .map(|((&xv, &t), &w)| {
                                let s = sigmoid_f64(xv.as_f64());
                                F::from_f64(w.as_f64() * (s - t.as_f64()) / wsum * dv)
                            })
                            .collect();
                        accum(&mut head[*x], &ca);
                    }
                }
                Op::Chamfer {
                    points,
                    target,
                    nn_sig_to_tgt,
                    nn_tgt_to_sig,
                } => {
                    if head[*points].needs_grad {
                        let pv = &head[*points].value;
                        let n = nn_sig_to_tgt.len();
                        let m = nn_tgt_to_sig.len();
                        let dv = dy[0].as_f64();
                        let mut ca = vec![F::zero(); pv.len()];
                        for (i, &j) in nn_sig_to_tgt.iter().enumerate() {
                            for c in 0..2 {
                                let diff = pv[2 * i + c].as_f64() - target[2 * j + c].as_f64();
                                ca[2 * i + c] += F::from_f64(diff / n as f64 * dv);
                            }
                        }
                        for (j, &i) in nn_tgt_to_sig.iter().enumerate() {
                            for c in 0..2 {
                                let diff = pv[2 * i + c].as_f64() - target[2 * j + c].as_f64();
                                ca[2 * i + c] += F::from_f64(diff / m as f64 * dv);
                            }
                        }
                        accum(&mut head[*points], &ca);
                    }
                }
            }
        }
        Ok(())
    }
}
