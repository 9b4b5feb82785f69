//! Shared gradient-check instances: every differentiable graph op over
//! randomized small shapes, plus both networks end to end through the joint
//! loss. The op list is data so the acceptance gate can run the exact same
//! suite the per-op tests assert on.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use specfill_core::gradcheck::{max_relative_error, DEFAULT_STEP};
use specfill_core::losses::{loss_a, loss_b};
use specfill_core::modem::{modulate, ModulationKind};
use specfill_core::networks::{
    demodulator_forward, init_params, modulator_forward, BnMode, DemodulatorConfig,
    ModulatorConfig, NORM_EPS,
};
use specfill_core::tensor::params::{bind_params, write_grads, BoundParams, ModelParams};
use specfill_core::tensor::{Graph, TensorError, Var};

pub const INSTANCES: usize = 20;

/// Every differentiable op the graph exposes.
pub const OP_NAMES: &[&str] = &[
    "add",
    "sub",
    "mul",
    "add_suffix",
    "mul_suffix",
    "scale",
    "matmul",
    "matmul_pair",
    "gather_rows",
    "softmax_last",
    "layer_norm",
    "batch_norm_train",
    "gelu",
    "sigmoid",
    "sum_all",
    "mean_all",
    "reshape",
    "permute",
    "concat_last",
    "bce_mean",
    "chamfer",
    "linear",
    "conv1d_k1",
];

fn vals(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// Reduce an op's output to a scalar through a fixed random weighting, so the
/// check sees a nondegenerate cotangent instead of all ones.
fn weighted(
    inputs: &[(Vec<f64>, Vec<usize>)],
    out_numel: usize,
    rng: &mut ChaCha8Rng,
    op: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var, TensorError>,
) -> f64 {
    let w = vals(rng, out_numel);
    max_relative_error(inputs, DEFAULT_STEP, move |g, v| {
        let y = op(g, v)?;
        let shape = g.shape(y).to_vec();
        let wv = g.constant(w.clone(), shape)?;
        let yw = g.mul(y, wv)?;
        g.sum_all(yw)
    })
    .expect("gradient instance builds")
}

/// Worst relative error for `name` across `INSTANCES` randomized instances.
pub fn op_error(name: &str) -> f64 {
    let idx = OP_NAMES
        .iter()
        .position(|&n| n == name)
        .unwrap_or_else(|| panic!("unknown op {}", name));
    let mut rng = ChaCha8Rng::seed_from_u64(0x67AD_0000 + idx as u64);
    let mut worst = 0.0f64;
    for _ in 0..INSTANCES {
        worst = worst.max(one_instance(name, &mut rng));
    }
    worst
}

fn one_instance(name: &str, rng: &mut ChaCha8Rng) -> f64 {
    match name {
        "add" | "sub" | "mul" => {
            let (r, c) = (rng.gen_range(1..5), rng.gen_range(1..5));
            let inputs = vec![
                (vals(rng, r * c), vec![r, c]),
                (vals(rng, r * c), vec![r, c]),
            ];
            weighted(&inputs, r * c, rng, |g, v| match name {
                "add" => g.add(v[0], v[1]),
                "sub" => g.sub(v[0], v[1]),
                _ => g.mul(v[0], v[1]),
            })
        }
        "add_suffix" | "mul_suffix" => {
            let (r, c, d) = (
                rng.gen_range(1..4),
                rng.gen_range(1..4),
                rng.gen_range(1..4),
            );
            let inputs = vec![
                (vals(rng, r * c * d), vec![r, c, d]),
                (vals(rng, d), vec![d]),
            ];
            weighted(&inputs, r * c * d, rng, |g, v| {
                if name == "add_suffix" {
                    g.add_suffix(v[0], v[1])
                } else {
                    g.mul_suffix(v[0], v[1])
                }
            })
        }
        "scale" => {
            let n = rng.gen_range(1..9);
            let k = rng.gen_range(-2.0..2.0);
            let inputs = vec![(vals(rng, n), vec![n])];
            weighted(&inputs, n, rng, move |g, v| g.scale(v[0], k))
        }
        "matmul" => {
            let (b, r, k, n) = (
                rng.gen_range(1..3),
                rng.gen_range(1..4),
                rng.gen_range(1..4),
                rng.gen_range(1..4),
            );
            let inputs = vec![
                (vals(rng, b * r * k), vec![b, r, k]),
                (vals(rng, k * n), vec![k, n]),
            ];
            weighted(&inputs, b * r * n, rng, |g, v| g.matmul(v[0], v[1]))
        }
        "matmul_pair" => {
            let (b, m, k, n) = (
                rng.gen_range(1..3),
                rng.gen_range(1..4),
                rng.gen_range(1..4),
                rng.gen_range(1..4),
            );
            let inputs = vec![
                (vals(rng, b * m * k), vec![b, m, k]),
                (vals(rng, b * k * n), vec![b, k, n]),
            ];
            weighted(&inputs, b * m * n, rng, |g, v| g.matmul_pair(v[0], v[1]))
        }
        "gather_rows" => {
            // repeated indices exercise the scatter-add in backward
            let (rows, w, l) = (
                rng.gen_range(2..5),
                rng.gen_range(1..4),
                rng.gen_range(1..7),
            );
            let idx: Vec<usize> = (0..l).map(|_| rng.gen_range(0..rows)).collect();
            let inputs = vec![(vals(rng, rows * w), vec![rows, w])];
            weighted(&inputs, l * w, rng, move |g, v| g.gather_rows(v[0], &idx))
        }
        "softmax_last" => {
            let (r, c) = (rng.gen_range(1..4), rng.gen_range(2..5));
            let inputs = vec![(vals(rng, r * c), vec![r, c])];
            weighted(&inputs, r * c, rng, |g, v| g.softmax_last(v[0]))
        }
        "layer_norm" => {
            let (r, c) = (rng.gen_range(1..4), rng.gen_range(2..5));
            // a nearly constant row makes the true gradient ill-conditioned
            // and the difference quotient meaningless, so keep rows spread
            let data = loop {
                let d = vals(rng, r * c);
                if d.chunks_exact(c).all(|row| variance(row) >= 0.05) {
                    break d;
                }
            };
            let inputs = vec![(data, vec![r, c])];
            weighted(&inputs, r * c, rng, |g, v| g.layer_norm(v[0], NORM_EPS))
        }
        "batch_norm_train" => {
            let (b, f) = (rng.gen_range(2..5), rng.gen_range(1..4));
            let data = loop {
                let d = vals(rng, b * f);
                let spread = (0..f).all(|col| {
                    let column: Vec<f64> = (0..b).map(|row| d[row * f + col]).collect();
                    variance(&column) >= 0.05
                });
                if spread {
                    break d;
                }
            };
            let inputs = vec![(data, vec![b, f])];
            weighted(&inputs, b * f, rng, |g, v| g.batch_norm_train(v[0], NORM_EPS))
        }
        "gelu" | "sigmoid" => {
            let n = rng.gen_range(1..9);
            let inputs = vec![(vals(rng, n), vec![n])];
            weighted(&inputs, n, rng, |g, v| {
                if name == "gelu" {
                    g.gelu(v[0])
                } else {
                    g.sigmoid(v[0])
                }
            })
        }
        "sum_all" | "mean_all" => {
            let (r, c) = (rng.gen_range(1..5), rng.gen_range(1..5));
            let inputs = vec![(vals(rng, r * c), vec![r, c])];
            weighted(&inputs, 1, rng, |g, v| {
                if name == "sum_all" {
                    g.sum_all(v[0])
                } else {
                    g.mean_all(v[0])
                }
            })
        }
        "reshape" => {
            let (r, c) = (rng.gen_range(1..5), rng.gen_range(1..5));
            let inputs = vec![(vals(rng, r * c), vec![r, c])];
            weighted(&inputs, r * c, rng, move |g, v| {
                g.reshape(v[0], vec![c, r])
            })
        }
        "permute" => {
            let (a, b, c) = (
                rng.gen_range(1..4),
                rng.gen_range(1..4),
                rng.gen_range(1..4),
            );
            let perms: [[usize; 3]; 4] = [[2, 0, 1], [1, 0, 2], [2, 1, 0], [0, 2, 1]];
            let perm = perms[rng.gen_range(0..perms.len())];
            let inputs = vec![(vals(rng, a * b * c), vec![a, b, c])];
            weighted(&inputs, a * b * c, rng, move |g, v| g.permute(v[0], &perm))
        }
        "concat_last" => {
            let parts = rng.gen_range(2..4);
            let r = rng.gen_range(1..4);
            let widths: Vec<usize> = (0..parts).map(|_| rng.gen_range(1..4)).collect();
            let inputs: Vec<(Vec<f64>, Vec<usize>)> = widths
                .iter()
                .map(|&w| (vals(rng, r * w), vec![r, w]))
                .collect();
            let total: usize = widths.iter().sum();
            weighted(&inputs, r * total, rng, |g, v| g.concat_last(v))
        }
        "bce_mean" => {
            let n = rng.gen_range(2..7);
            let targets: Vec<f64> = (0..n).map(|_| rng.gen_range(0..2) as f64).collect();
            let weights = loop {
                let w: Vec<f64> = (0..n).map(|_| rng.gen_range(0..2) as f64).collect();
                if w.iter().any(|&x| x != 0.0) {
                    break w;
                }
            };
            let inputs = vec![(vals(rng, n), vec![n])];
            weighted(&inputs, 1, rng, move |g, v| {
                g.bce_mean(v[0], &targets, &weights)
            })
        }
        "chamfer" => {
            // redraw until every nearest-neighbor assignment has a clear
            // margin; a 1e-4 probe must not flip any argmin
            let n = rng.gen_range(2..5);
            let m = rng.gen_range(2..5);
            let (points, target) = loop {
                let p = vals(rng, 2 * n);
                let t = vals(rng, 2 * m);
                if chamfer_margins_ok(&p, &t, 1e-2) {
                    break (p, t);
                }
            };
            let inputs = vec![(points, vec![n, 2])];
            weighted(&inputs, 1, rng, move |g, v| g.chamfer(v[0], &target))
        }
        "linear" => {
            let (r, k, n) = (
                rng.gen_range(1..4),
                rng.gen_range(1..4),
                rng.gen_range(1..4),
            );
            let inputs = vec![
                (vals(rng, r * k), vec![r, k]),
                (vals(rng, k * n), vec![k, n]),
                (vals(rng, n), vec![n]),
            ];
            weighted(&inputs, r * n, rng, |g, v| g.linear(v[0], v[1], v[2]))
        }
        "conv1d_k1" => {
            let (b, l, cin, cout) = (
                rng.gen_range(1..3),
                rng.gen_range(1..4),
                rng.gen_range(1..4),
                rng.gen_range(1..4),
            );
            let inputs = vec![
                (vals(rng, b * l * cin), vec![b, l, cin]),
                (vals(rng, cout * cin), vec![cout, cin]),
                (vals(rng, cout), vec![cout]),
            ];
            weighted(&inputs, b * l * cout, rng, |g, v| {
                g.conv1d_k1(v[0], v[1], v[2])
            })
        }
        other => panic!("unknown op {}", other),
    }
}

fn variance(xs: &[f64]) -> f64 {
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / xs.len() as f64
}

fn chamfer_margins_ok(points: &[f64], target: &[f64], margin: f64) -> bool {
    let n = points.len() / 2;
    let m = target.len() / 2;
    let dist = |i: usize, j: usize| {
        let di = points[2 * i] - target[2 * j];
        let dq = points[2 * i + 1] - target[2 * j + 1];
        (di * di + dq * dq) / 2.0
    };
    for i in 0..n {
        let mut ds: Vec<f64> = (0..m).map(|j| dist(i, j)).collect();
        ds.sort_by(|a, b| a.partial_cmp(b).unwrap());
        if ds.len() > 1 && ds[1] - ds[0] < margin {
            return false;
        }
    }
    for j in 0..m {
        let mut ds: Vec<f64> = (0..n).map(|i| dist(i, j)).collect();
        ds.sort_by(|a, b| a.partial_cmp(b).unwrap());
        if ds.len() > 1 && ds[1] - ds[0] < margin {
            return false;
        }
    }
    true
}

/// Both networks in one graph as training wires them: carrier plus message B
/// through the modulator, a fixed noise offset, carrier BCE on the received
/// signal, demodulator in batch-statistics mode, message-B BCE, summed. Every
/// parameter of both networks gets the central-difference treatment.
pub fn network_end_to_end_error() -> f64 {
    const LA: usize = 8;
    const LB: usize = 2;
    const BATCH: usize = 3;

    let mut rng = ChaCha8Rng::seed_from_u64(0x67AD_E2E);
    let mod_cfg = ModulatorConfig::new(LA, LB).unwrap();
    let dem_cfg = DemodulatorConfig::new(LA, LB).unwrap();
    let mut params: ModelParams<f64> = init_params(&mod_cfg, &dem_cfg, &mut rng);

    let mut iq_a = Vec::with_capacity(BATCH * LA * 2);
    let mut msg_b = Vec::with_capacity(BATCH * LB);
    for _ in 0..BATCH {
        let bits: Vec<u8> = (0..LA).map(|_| rng.gen_range(0..2)).collect();
        let sig = modulate(&bits, ModulationKind::Bpsk).unwrap();
        for k in 0..LA {
            iq_a.push(sig.i[k]);
            iq_a.push(sig.q[k]);
        }
        msg_b.extend((0..LB).map(|_| rng.gen_range(0..2u8)));
    }
    let clean = iq_a.clone();
    let noise: Vec<f64> = vals(&mut rng, BATCH * LA * 2)
        .into_iter()
        .map(|x| 0.3 * x)
        .collect();

    let build = |g: &mut Graph<f64>, params: &ModelParams<f64>| -> (Var, BoundParams) {
        let bound = bind_params(g, params).unwrap();
        let a = g.constant(iq_a.clone(), vec![BATCH, LA, 2]).unwrap();
        let tx = modulator_forward(g, &bound, &mod_cfg, a, &msg_b).unwrap();
        let nv = g.constant(noise.clone(), vec![BATCH, LA, 2]).unwrap();
        let rx = g.add(tx, nv).unwrap();
        let keep_a = loss_a(g, rx, &clean).unwrap();
        let out = demodulator_forward(g, &bound, &dem_cfg, rx, BnMode::Train).unwrap();
        let keep_b = loss_b(g, out.logits, &msg_b).unwrap();
        (g.add(keep_a, keep_b).unwrap(), bound)
    };

    let mut g = Graph::<f64>::new();
    let (loss, bound) = build(&mut g, &params);
    g.backward(loss).unwrap();
    write_grads(&g, &bound, &mut params);

    let value_at = |params: &ModelParams<f64>| -> f64 {
        let mut g = Graph::<f64>::new();
        let (loss, _) = build(&mut g, params);
        g.scalar(loss)
    };

    let names: Vec<String> = params.params.keys().cloned().collect();
    let mut worst = 0.0f64;
    for name in &names {
        let len = params.params[name.as_str()].data.len();
        for k in 0..len {
            let orig = params.params[name.as_str()].data[k];
            params.params.get_mut(name.as_str()).unwrap().data[k] = orig + DEFAULT_STEP;
            let up = value_at(&params);
            params.params.get_mut(name.as_str()).unwrap().data[k] = orig - DEFAULT_STEP;
            let down = value_at(&params);
            params.params.get_mut(name.as_str()).unwrap().data[k] = orig;
            let numeric = (up - down) / (2.0 * DEFAULT_STEP);
            let analytic = params.params[name.as_str()].grad[k];
            let denom = analytic.abs().max(numeric.abs()).max(1e-3);
            worst = worst.max((analytic - numeric).abs() / denom);
        }
    }
    worst
}
