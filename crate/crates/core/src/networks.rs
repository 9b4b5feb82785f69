//! Modulator and demodulator transformer networks.
//!
//! The modulator rides a second message on top of a fixed-modem carrier: each
//! bit of message B selects one of two learned embedding rows, the selected
//! rows are laid end to end into a track as long as the carrier, stacked with
//! the carrier's I and Q tracks into a three-channel sequence, and refined by
//! a three-layer transformer plus a pointwise conv into a new IQ pair. The
//! demodulator runs a received IQ pair through a four-layer transformer, a
//! pointwise conv down to one channel, and a dense head with batch norm to
//! produce one logit per bit of message B.
//!
//! Channel widths and depths are fixed; only the message lengths vary, and
//! with them the embedding width (length_a / length_b) and the dense head's
//! input. Parameters are registered and drawn in one deterministic order, so
//! a seed fully determines the model and checkpoints can address tensors by
//! that order.

use rand::Rng;

use crate::real::Real;
use crate::tensor::params::{BoundParams, ModelParams};
use crate::tensor::{Graph, TensorError, Var};

/// Shared by layer norm and batch norm denominators.
pub const NORM_EPS: f64 = 1e-5;
/// Fraction of the fresh batch statistic blended into the running buffers.
pub const BN_MOMENTUM: f64 = 0.1;
/// The two embedding rows start antipodal, near unit amplitude per slot, so
/// the message-B track is a binary antipodal signal from the first batch. A
/// track buried under the carrier never bootstraps: the demodulator's logits
/// settle at zero and the joint system stays there.
pub const EMBED_INIT_AMP: std::ops::Range<f64> = 0.9..1.1;

pub const BN_MEAN_BUFFER: &str = "dem.head.bn.mean";
pub const BN_VAR_BUFFER: &str = "dem.head.bn.var";

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum NetworkError {
    ZeroLength { field: &'static str },
    IndivisibleLengths { length_a: usize, length_b: usize },
}

impl std::fmt::Display for NetworkError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            NetworkError::ZeroLength { field } => write!(f, "{} must be positive", field),
            NetworkError::IndivisibleLengths { length_a, length_b } => write!(
                f,
                "length_b ({}) must divide length_a ({}) so the bit embeddings tile the carrier",
                length_b, length_a
            ),
        }
    }
}

impl std::error::Error for NetworkError {}

/// Modulator geometry. Widths are fixed: the three channels are the carrier's
/// I and Q plus the embedding track, and three heads of dimension one cover
/// them.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModulatorConfig {
    pub length_a: usize,
    pub length_b: usize,
}

impl ModulatorConfig {
    pub const D_MODEL: usize = 3;
    pub const LAYERS: usize = 3;
    pub const HEADS: usize = 3;

    pub fn new(length_a: usize, length_b: usize) -> Result<Self, NetworkError> {
        if length_a == 0 {
            return Err(NetworkError::ZeroLength { field: "length_a" });
        }
        if length_b == 0 {
            return Err(NetworkError::ZeroLength { field: "length_b" });
        }
        if length_a % length_b != 0 {
            return Err(NetworkError::IndivisibleLengths { length_a, length_b });
        }
        Ok(ModulatorConfig { length_a, length_b })
    }

    /// Width of one embedding row; length_b of them tile the carrier exactly.
    pub fn embed_width(&self) -> usize {
        self.length_a / self.length_b
    }
}

/// Demodulator geometry. The dense head's first layer is length-dependent
/// (length_a inputs to `HIDDEN`), everything else is fixed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DemodulatorConfig {
    pub length_a: usize,
    pub length_b: usize,
}

impl DemodulatorConfig {
    pub const D_MODEL: usize = 2;
    pub const LAYERS: usize = 4;
    pub const HEADS: usize = 2;
    pub const HIDDEN: usize = 128;

    pub fn new(length_a: usize, length_b: usize) -> Result<Self, NetworkError> {
        if length_a == 0 {
            return Err(NetworkError::ZeroLength { field: "length_a" });
        }
        if length_b == 0 {
            return Err(NetworkError::ZeroLength { field: "length_b" });
        }
        Ok(DemodulatorConfig { length_a, length_b })
    }
}

/// Fixed sinusoidal position table, shape [len, dim], row-major. Even columns
/// carry sines, odd columns the matching cosines, with the classic 10000^(2i/d)
/// wavelength ladder.
pub fn positional_encoding<F: Real>(len: usize, dim: usize) -> Vec<F> {
    let mut out = Vec::with_capacity(len * dim);
    for pos in 0..len {
        for d in 0..dim {
            let pair = (d / 2) as f64;
            let angle = pos as f64 / f64::powf(10000.0, 2.0 * pair / dim as f64);
            out.push(F::from_f64(if d % 2 == 0 { angle.sin() } else { angle.cos() }));
        }
    }
    out
}

/// The encoding is added straight onto IQ channels whose rails are near unit
/// amplitude, so it goes in quiet; full-scale sines would swamp the signal
/// they are meant to annotate.
const PE_SCALE: f64 = 0.1;

fn scaled_pe<F: Real>(len: usize, dim: usize) -> Vec<F> {
    positional_encoding::<F>(len, dim)
        .into_iter()
        .map(|v| F::from_f64(v.as_f64() * PE_SCALE))
        .collect()
}

fn xavier<F: Real>(rng: &mut impl Rng, fan_in: usize, fan_out: usize, n: usize) -> Vec<F> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..n).map(|_| F::from_f64(rng.gen_range(-bound..bound))).collect()
}

fn antipodal_rows<F: Real>(rng: &mut impl Rng, width: usize) -> Vec<F> {
    let row: Vec<f64> = (0..width)
        .map(|_| {
            let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            sign * rng.gen_range(EMBED_INIT_AMP)
        })
        .collect();
    let mut out: Vec<F> = row.iter().map(|&v| F::from_f64(v)).collect();
    out.extend(row.iter().map(|&v| F::from_f64(-v)));
    out
}

/// Scale on the last projection of each residual branch. Blocks start close
/// to the identity, so the init-time signal layout survives the whole stack;
/// kept away from zero so every projection still receives gradient.
const RESIDUAL_INIT_SCALE: f64 = 0.05;

fn register_block<F: Real>(
    params: &mut ModelParams<F>,
    rng: &mut impl Rng,
    prefix: &str,
    d: usize,
) {
    let hidden = 4 * d;
    let damp = |w: Vec<F>| -> Vec<F> {
        w.into_iter()
            .map(|v| F::from_f64(v.as_f64() * RESIDUAL_INIT_SCALE))
            .collect()
    };
    params.insert_param(&format!("{prefix}.ln1.gamma"), vec![d], vec![F::one(); d]);
    params.insert_param(&format!("{prefix}.ln1.beta"), vec![d], vec![F::zero(); d]);
    for proj in ["q", "k", "v", "o"] {
        let mut w = xavier(rng, d, d, d * d);
        if proj == "o" {
            w = damp(w);
        }
        params.insert_param(&format!("{prefix}.attn.w{proj}"), vec![d, d], w);
        params.insert_param(&format!("{prefix}.attn.b{proj}"), vec![d], vec![F::zero(); d]);
    }
    params.insert_param(&format!("{prefix}.ln2.gamma"), vec![d], vec![F::one(); d]);
    params.insert_param(&format!("{prefix}.ln2.beta"), vec![d], vec![F::zero(); d]);
    params.insert_param(
        &format!("{prefix}.ffn.w1"),
        vec![d, hidden],
        xavier(rng, d, hidden, d * hidden),
    );
    params.insert_param(&format!("{prefix}.ffn.b1"), vec![hidden], vec![F::zero(); hidden]);
    params.insert_param(
        &format!("{prefix}.ffn.w2"),
        vec![hidden, d],
        damp(xavier(rng, hidden, d, hidden * d)),
    );
    params.insert_param(&format!("{prefix}.ffn.b2"), vec![d], vec![F::zero(); d]);
}

/// Allocate and initialize every tensor of both networks: Xavier-uniform
/// weights, zero biases, antipodal embedding rows, passthrough output and
/// head convs, unit norm scales. Registration order is the draw order, so a
/// given rng state fixes the model.
pub fn init_params<F: Real>(
    mod_cfg: &ModulatorConfig,
    dem_cfg: &DemodulatorConfig,
    rng: &mut impl Rng,
) -> ModelParams<F> {
    let mut params = ModelParams::new();
    let w = mod_cfg.embed_width();
    params.insert_param("mod.embed", vec![2, w], antipodal_rows(rng, w));
    for i in 0..ModulatorConfig::LAYERS {
        register_block(&mut params, rng, &format!("mod.blk{i}"), ModulatorConfig::D_MODEL);
    }
    // Passthrough at init: I keeps the carrier's I, Q keeps the carrier's Q
    // plus the embedding track. The conv starts at the layout it is meant to
    // refine instead of a random mix of the three channels.
    let passthrough = [1.0, 0.0, 0.0, 0.0, 1.0, 1.0];
    params.insert_param(
        "mod.out.w",
        vec![2, ModulatorConfig::D_MODEL],
        passthrough.iter().map(|&v| F::from_f64(v)).collect(),
    );
    params.insert_param("mod.out.b", vec![2], vec![F::zero(); 2]);

    let hidden = DemodulatorConfig::HIDDEN;
    for i in 0..DemodulatorConfig::LAYERS {
        register_block(&mut params, rng, &format!("dem.blk{i}"), DemodulatorConfig::D_MODEL);
    }
    // The second message rides the quadrature of a BPSK carrier, so the head
    // starts by reading Q; training moves it wherever the signal ends up.
    params.insert_param(
        "dem.head.conv.w",
        vec![1, DemodulatorConfig::D_MODEL],
        [0.0, 1.0].iter().map(|&v| F::from_f64(v)).collect(),
    );
    params.insert_param("dem.head.conv.b", vec![1], vec![F::zero(); 1]);
    params.insert_param(
        "dem.head.fc1.w",
        vec![dem_cfg.length_a, hidden],
        xavier(rng, dem_cfg.length_a, hidden, dem_cfg.length_a * hidden),
    );
    params.insert_param("dem.head.fc1.b", vec![hidden], vec![F::zero(); hidden]);
    params.insert_param("dem.head.bn.gamma", vec![hidden], vec![F::one(); hidden]);
    params.insert_param("dem.head.bn.beta", vec![hidden], vec![F::zero(); hidden]);
    params.insert_param(
        "dem.head.fc2.w",
        vec![hidden, dem_cfg.length_b],
        xavier(rng, hidden, dem_cfg.length_b, hidden * dem_cfg.length_b),
    );
    params.insert_param("dem.head.fc2.b", vec![dem_cfg.length_b], vec![F::zero(); dem_cfg.length_b]);

    params.insert_buffer(BN_MEAN_BUFFER, vec![hidden], vec![F::zero(); hidden]);
    params.insert_buffer(BN_VAR_BUFFER, vec![hidden], vec![F::one(); hidden]);
    params
}

fn layer_norm_affine<F: Real>(
    g: &mut Graph<F>,
    p: &BoundParams,
    prefix: &str,
    x: Var,
) -> Result<Var, TensorError> {
    let n = g.layer_norm(x, NORM_EPS)?;
    let n = g.mul_suffix(n, p.get(&format!("{prefix}.gamma")))?;
    g.add_suffix(n, p.get(&format!("{prefix}.beta")))
}

fn attention<F: Real>(
    g: &mut Graph<F>,
    p: &BoundParams,
    prefix: &str,
    x: Var,
    batch: usize,
    len: usize,
    d: usize,
    heads: usize,
) -> Result<Var, TensorError> {
    let dh = d / heads;
    let q = g.linear(x, p.get(&format!("{prefix}.wq")), p.get(&format!("{prefix}.bq")))?;
    let k = g.linear(x, p.get(&format!("{prefix}.wk")), p.get(&format!("{prefix}.bk")))?;
    let v = g.linear(x, p.get(&format!("{prefix}.wv")), p.get(&format!("{prefix}.bv")))?;
    let q = g.reshape(q, vec![batch, len, heads, dh])?;
    let q = g.permute(q, &[0, 2, 1, 3])?;
    let k = g.reshape(k, vec![batch, len, heads, dh])?;
    let k = g.permute(k, &[0, 2, 3, 1])?;
    let v = g.reshape(v, vec![batch, len, heads, dh])?;
    let v = g.permute(v, &[0, 2, 1, 3])?;
    let scores = g.matmul_pair(q, k)?;
    let scores = g.scale(scores, F::from_f64(1.0 / (dh as f64).sqrt()))?;
    let weights = g.softmax_last(scores)?;
    let ctx = g.matmul_pair(weights, v)?;
    let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = g.reshape(ctx, vec![batch, len, d])?;
    g.linear(ctx, p.get(&format!("{prefix}.wo")), p.get(&format!("{prefix}.bo")))
}

fn transformer_block<F: Real>(
    g: &mut Graph<F>,
    p: &BoundParams,
    prefix: &str,
    x: Var,
    batch: usize,
    len: usize,
    d: usize,
    heads: usize,
) -> Result<Var, TensorError> {
    let normed = layer_norm_affine(g, p, &format!("{prefix}.ln1"), x)?;
    let att = attention(g, p, &format!("{prefix}.attn"), normed, batch, len, d, heads)?;
    let x = g.add(x, att)?;
    let normed = layer_norm_affine(g, p, &format!("{prefix}.ln2"), x)?;
    let h = g.linear(normed, p.get(&format!("{prefix}.ffn.w1")), p.get(&format!("{prefix}.ffn.b1")))?;
    let h = g.gelu(h)?;
    let h = g.linear(h, p.get(&format!("{prefix}.ffn.w2")), p.get(&format!("{prefix}.ffn.b2")))?;
    g.add(x, h)
}

fn expect_iq_batch<F: Real>(
    g: &Graph<F>,
    x: Var,
    length_a: usize,
    who: &'static str,
) -> Result<(usize, usize), TensorError> {
    let shape = g.shape(x);
    if shape.len() != 3 || shape[2] != 2 || shape[1] != length_a {
        return Err(TensorError::BadShape {
            op: who,
            detail: format!(
                "expected input [batch, {}, 2], got {:?}",
                length_a, shape
            ),
        });
    }
    Ok((shape[0], shape[1]))
}

/// Embed message B alongside the carrier and produce the combined IQ pair.
///
/// `iq_a` is [batch, length_a, 2] with I in channel 0; `msg_b` is row-major
/// [batch, length_b] bits. Returns [batch, length_a, 2].
pub fn modulator_forward<F: Real>(
    g: &mut Graph<F>,
    p: &BoundParams,
    cfg: &ModulatorConfig,
    iq_a: Var,
    msg_b: &[u8],
) -> Result<Var, TensorError> {
    let (batch, len) = expect_iq_batch(g, iq_a, cfg.length_a, "modulator")?;
    if msg_b.len() != batch * cfg.length_b {
        return Err(TensorError::BadShape {
            op: "modulator",
            detail: format!(
                "need {} message-B bits for batch {}, got {}",
                batch * cfg.length_b,
                batch,
                msg_b.len()
            ),
        });
    }
    if let Some(bad) = msg_b.iter().find(|&&b| b > 1) {
        return Err(TensorError::BadShape {
            op: "modulator",
            detail: format!("message bits must be 0 or 1, got {}", bad),
        });
    }
    let idx: Vec<usize> = msg_b.iter().map(|&b| b as usize).collect();
    let rows = g.gather_rows(p.get("mod.embed"), &idx)?;
    let emb = g.reshape(rows, vec![batch, len, 1])?;
    let x = g.concat_last(&[iq_a, emb])?;
    let d = ModulatorConfig::D_MODEL;
    let pe = g.constant(scaled_pe(len, d), vec![len, d])?;
    let mut x = g.add_suffix(x, pe)?;
    for i in 0..ModulatorConfig::LAYERS {
        x = transformer_block(
            g,
            p,
            &format!("mod.blk{i}"),
            x,
            batch,
            len,
            d,
            ModulatorConfig::HEADS,
        )?;
    }
    g.conv1d_k1(x, p.get("mod.out.w"), p.get("mod.out.b"))
}

/// Batch-norm mode for the demodulator head: training uses the batch's own
/// statistics (and exposes them for the running update), evaluation
/// standardizes with the stored running statistics.
pub enum BnMode<'a, F: Real> {
    Train,
    Eval {
        running_mean: &'a [F],
        running_var: &'a [F],
    },
}

#[derive(Debug)]
pub struct DemodOutput {
    /// Raw logits, [batch, length_b]; no sigmoid applied.
    pub logits: Var,
    /// Train mode only: the normalization node whose batch statistics feed
    /// the running-buffer update.
    pub bn_node: Option<Var>,
}

/// Recover message-B logits from a received IQ pair, [batch, length_a, 2].
pub fn demodulator_forward<F: Real>(
    g: &mut Graph<F>,
    p: &BoundParams,
    cfg: &DemodulatorConfig,
    iq_ab: Var,
    mode: BnMode<'_, F>,
) -> Result<DemodOutput, TensorError> {
    let (batch, len) = expect_iq_batch(g, iq_ab, cfg.length_a, "demodulator")?;
    let d = DemodulatorConfig::D_MODEL;
    let pe = g.constant(scaled_pe(len, d), vec![len, d])?;
    let mut x = g.add_suffix(iq_ab, pe)?;
    for i in 0..DemodulatorConfig::LAYERS {
        x = transformer_block(
            g,
            p,
            &format!("dem.blk{i}"),
            x,
            batch,
            len,
            d,
            DemodulatorConfig::HEADS,
        )?;
    }
    let x = g.conv1d_k1(x, p.get("dem.head.conv.w"), p.get("dem.head.conv.b"))?;
    let x = g.reshape(x, vec![batch, len])?;
    let x = g.linear(x, p.get("dem.head.fc1.w"), p.get("dem.head.fc1.b"))?;
    let hidden = DemodulatorConfig::HIDDEN;
    let (x, bn_node) = match mode {
        BnMode::Train => {
            let n = g.batch_norm_train(x, NORM_EPS)?;
            (n, Some(n))
        }
        BnMode::Eval {
            running_mean,
            running_var,
        } => {
            let rstd: Vec<f64> = running_var
                .iter()
                .map(|v| 1.0 / (v.as_f64() + NORM_EPS).sqrt())
                .collect();
            let shift: Vec<F> = running_mean
                .iter()
                .zip(&rstd)
                .map(|(m, r)| F::from_f64(-m.as_f64() * r))
                .collect();
            let rstd: Vec<F> = rstd.iter().map(|&r| F::from_f64(r)).collect();
            let rstd = g.constant(rstd, vec![hidden])?;
            let shift = g.constant(shift, vec![hidden])?;
            let n = g.mul_suffix(x, rstd)?;
            let n = g.add_suffix(n, shift)?;
            (n, None)
        }
    };
    let x = g.mul_suffix(x, p.get("dem.head.bn.gamma"))?;
    let x = g.add_suffix(x, p.get("dem.head.bn.beta"))?;
    let x = g.gelu(x)?;
    let logits = g.linear(x, p.get("dem.head.fc2.w"), p.get("dem.head.fc2.b"))?;
    Ok(DemodOutput { logits, bn_node })
}

/// Blend a train-mode forward's batch statistics into the running buffers.
/// The stored variance is the unbiased estimate (factor batch/(batch-1)).
pub fn update_bn_running<F: Real>(
    g: &Graph<F>,
    bn_node: Var,
    batch: usize,
    params: &mut ModelParams<F>,
) {
    let (mean, var_biased) = g
        .bn_stats(bn_node)
        .expect("running update needs a train-mode batch-norm node");
    assert!(batch >= 2, "batch statistics need batch size >= 2");
    let correction = batch as f64 / (batch - 1) as f64;
    let mean: Vec<f64> = mean.iter().map(|m| m.as_f64()).collect();
    let var: Vec<f64> = var_biased.iter().map(|v| v.as_f64() * correction).collect();
    let mbuf = params.buffers.get_mut(BN_MEAN_BUFFER).expect("mean buffer");
    for (old, new) in mbuf.data.iter_mut().zip(&mean) {
        *old = F::from_f64((1.0 - BN_MOMENTUM) * old.as_f64() + BN_MOMENTUM * new);
    }
    let vbuf = params.buffers.get_mut(BN_VAR_BUFFER).expect("var buffer");
    for (old, new) in vbuf.data.iter_mut().zip(&var) {
        *old = F::from_f64((1.0 - BN_MOMENTUM) * old.as_f64() + BN_MOMENTUM * new);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::modem::{modulate, ModulationKind};
    use crate::rng::{purpose, stream};
    use crate::tensor::params::{bind_params, write_grads};

    fn iq_batch<F: Real>(g: &mut Graph<F>, msgs: &[Vec<u8>], len: usize) -> Var {
        let mut data = Vec::with_capacity(msgs.len() * len * 2);
        for bits in msgs {
            let sig = modulate(bits, ModulationKind::Bpsk).unwrap();
            for k in 0..len {
                data.push(F::from_f64(sig.i[k]));
                data.push(F::from_f64(sig.q[k]));
            }
        }
        g.constant(data, vec![msgs.len(), len, 2]).unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(ModulatorConfig::new(32, 32).is_ok());
        assert_eq!(ModulatorConfig::new(32, 4).unwrap().embed_width(), 8);
        assert!(matches!(
            ModulatorConfig::new(0, 4),
            Err(NetworkError::ZeroLength { field: "length_a" })
        ));
        assert!(matches!(
            ModulatorConfig::new(32, 0),
            Err(NetworkError::ZeroLength { field: "length_b" })
        ));
        assert!(matches!(
            ModulatorConfig::new(32, 5),
            Err(NetworkError::IndivisibleLengths { .. })
        ));
        assert!(DemodulatorConfig::new(32, 32).is_ok());
        assert!(DemodulatorConfig::new(0, 1).is_err());
    }

    #[test]
    fn positional_encoding_known_values() {
        let pe: Vec<f64> = positional_encoding(2, 3);
        assert_eq!(pe.len(), 6);
        assert_eq!(&pe[..3], &[0.0, 1.0, 0.0]);
        assert!((pe[3] - 1.0f64.sin()).abs() < 1e-15);
        assert!((pe[4] - 1.0f64.cos()).abs() < 1e-15);
        let w = 1.0 / f64::powf(10000.0, 2.0 / 3.0);
        assert!((pe[5] - w.sin()).abs() < 1e-15);
    }

    #[test]
    fn init_is_deterministic_in_the_seed() {
        let mc = ModulatorConfig::new(32, 32).unwrap();
        let dc = DemodulatorConfig::new(32, 32).unwrap();
        let a: ModelParams<f32> = init_params(&mc, &dc, &mut stream(7, purpose::INIT, 0, 0));
        let b: ModelParams<f32> = init_params(&mc, &dc, &mut stream(7, purpose::INIT, 0, 0));
        assert_eq!(a, b);
        let c: ModelParams<f32> = init_params(&mc, &dc, &mut stream(8, purpose::INIT, 0, 0));
        assert_ne!(a.params["mod.embed"].data, c.params["mod.embed"].data);
    }

    #[test]
    fn parameter_count_is_frozen() {
        let mc = ModulatorConfig::new(32, 32).unwrap();
        let dc = DemodulatorConfig::new(32, 32).unwrap();
        let p: ModelParams<f32> = init_params(&mc, &dc, &mut stream(1, purpose::INIT, 0, 0));
        let count = |prefix: &str| -> usize {
            p.params
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(_, t)| t.data.len())
                .sum()
        };
        assert_eq!(count("mod."), 451);
        assert_eq!(count("dem."), 8907);
        assert_eq!(p.param_count(), 9358);
    }

    #[test]
    fn modulator_output_shape_and_errors() {
        let mc = ModulatorConfig::new(8, 2).unwrap();
        let dc = DemodulatorConfig::new(8, 2).unwrap();
        let params: ModelParams<f32> = init_params(&mc, &dc, &mut stream(3, purpose::INIT, 0, 0));
        let mut g = Graph::<f32>::new();
        let bound = bind_params(&mut g, &params).unwrap();
        let iq = iq_batch(&mut g, &[vec![0; 8], vec![1; 8]], 8);
        let out = modulator_forward(&mut g, &bound, &mc, iq, &[0, 1, 1, 0]).unwrap();
        assert_eq!(g.shape(out), &[2, 8, 2]);

        let short = modulator_forward(&mut g, &bound, &mc, iq, &[0, 1]);
        assert!(matches!(short, Err(TensorError::BadShape { op: "modulator", .. })));
        let bad = modulator_forward(&mut g, &bound, &mc, iq, &[0, 2, 0, 0]);
        assert!(matches!(bad, Err(TensorError::BadShape { op: "modulator", .. })));
        let wrong_shape = {
            let mut g2 = Graph::<f32>::new();
            let b2 = bind_params(&mut g2, &params).unwrap();
            let iq2 = iq_batch(&mut g2, &[vec![0; 4]], 4);
            modulator_forward(&mut g2, &b2, &mc, iq2, &[0, 0])
        };
        assert!(wrong_shape.is_err());
    }

    #[test]
    fn demodulator_logit_shape_and_eval_determinism() {
        let mc = ModulatorConfig::new(8, 2).unwrap();
        let dc = DemodulatorConfig::new(8, 2).unwrap();
        let params: ModelParams<f32> = init_params(&mc, &dc, &mut stream(4, purpose::INIT, 0, 0));
        let run = || {
            let mut g = Graph::<f32>::new();
            let bound = bind_params(&mut g, &params).unwrap();
            let iq = iq_batch(&mut g, &[vec![0, 1, 0, 1, 1, 0, 0, 1]], 8);
            let out = demodulator_forward(
                &mut g,
                &bound,
                &dc,
                iq,
                BnMode::Eval {
                    running_mean: &params.buffers[BN_MEAN_BUFFER].data,
                    running_var: &params.buffers[BN_VAR_BUFFER].data,
                },
            )
            .unwrap();
            assert!(out.bn_node.is_none());
            assert_eq!(g.shape(out.logits), &[1, 2]);
            g.value(out.logits).to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn eval_logits_do_not_depend_on_batch_company() {
        let mc = ModulatorConfig::new(8, 2).unwrap();
        let dc = DemodulatorConfig::new(8, 2).unwrap();
        let params: ModelParams<f32> = init_params(&mc, &dc, &mut stream(5, purpose::INIT, 0, 0));
        let target = vec![0u8, 1, 1, 1, 0, 0, 1, 0];
        let other = vec![1u8, 1, 0, 0, 1, 0, 1, 1];
        let eval = |msgs: &[Vec<u8>]| {
            let mut g = Graph::<f32>::new();
            let bound = bind_params(&mut g, &params).unwrap();
            let iq = iq_batch(&mut g, msgs, 8);
            let out = demodulator_forward(
                &mut g,
                &bound,
                &dc,
                iq,
                BnMode::Eval {
                    running_mean: &params.buffers[BN_MEAN_BUFFER].data,
                    running_var: &params.buffers[BN_VAR_BUFFER].data,
                },
            )
            .unwrap();
            g.value(out.logits).to_vec()
        };
        let alone = eval(&[target.clone()]);
        let together = eval(&[other, target]);
        assert_eq!(alone, together[2..].to_vec());
    }

    #[test]
    fn train_mode_batch_of_one_is_rejected() {
        let mc = ModulatorConfig::new(8, 2).unwrap();
        let dc = DemodulatorConfig::new(8, 2).unwrap();
        let params: ModelParams<f32> = init_params(&mc, &dc, &mut stream(6, purpose::INIT, 0, 0));
        let mut g = Graph::<f32>::new();
        let bound = bind_params(&mut g, &params).unwrap();
        let iq = iq_batch(&mut g, &[vec![0; 8]], 8);
        let err = demodulator_forward(&mut g, &bound, &dc, iq, BnMode::Train).unwrap_err();
        assert!(err.to_string().contains("batch size >= 2"), "{}", err);
    }

    #[test]
    fn gradients_reach_every_parameter_group() {
        let mc = ModulatorConfig::new(8, 2).unwrap();
        let dc = DemodulatorConfig::new(8, 2).unwrap();
        let mut params: ModelParams<f32> =
            init_params(&mc, &dc, &mut stream(9, purpose::INIT, 0, 0));
        let mut g = Graph::<f32>::new();
        let bound = bind_params(&mut g, &params).unwrap();
        let iq = iq_batch(&mut g, &[vec![0, 1, 1, 0, 0, 1, 1, 0], vec![1; 8]], 8);
        let tx = modulator_forward(&mut g, &bound, &mc, iq, &[1, 0, 0, 1]).unwrap();
        let out = demodulator_forward(&mut g, &bound, &dc, tx, BnMode::Train).unwrap();
        let loss = g.mean_all(out.logits).unwrap();
        g.backward(loss).unwrap();
        write_grads(&g, &bound, &mut params);
        for (name, p) in &params.params {
            assert!(p.grad_ready, "{} not marked ready", name);
        }
        let nonzero = |name: &str| params.params[name].grad.iter().any(|&v| v != 0.0);
        assert!(nonzero("mod.embed"));
        assert!(nonzero("mod.out.w"));
        assert!(nonzero("dem.head.fc2.b"));
        assert!(nonzero("mod.blk0.attn.wq"));
    }

    #[test]
    fn running_statistics_blend_with_momentum() {
        let mut params = ModelParams::<f64>::new();
        params.insert_buffer(BN_MEAN_BUFFER, vec![2], vec![0.0, 0.0]);
        params.insert_buffer(BN_VAR_BUFFER, vec![2], vec![1.0, 1.0]);
        let mut g = Graph::<f64>::new();
        let x = g
            .leaf(vec![0.0, 10.0, 2.0, 14.0], vec![2, 2], false)
            .unwrap();
        let bn = g.batch_norm_train(x, NORM_EPS).unwrap();
        update_bn_running(&g, bn, 2, &mut params);
        let mean = &params.buffers[BN_MEAN_BUFFER].data;
        let var = &params.buffers[BN_VAR_BUFFER].data;
        // column means 1 and 12; biased vars 1 and 4, unbiased 2 and 8
        assert!((mean[0] - 0.1).abs() < 1e-12);
        assert!((mean[1] - 1.2).abs() < 1e-12);
        assert!((var[0] - (0.9 + 0.2)).abs() < 1e-12);
        assert!((var[1] - (0.9 + 0.8)).abs() < 1e-12);
    }
}
