//! The joint training loop, epoch metrics, and checkpoint/resume plumbing.
//!
//! One optimizer drives both networks. Each batch runs modulator, channel,
//! and demodulator in a single graph; the channel noise enters as a constant
//! leaf, so gradients pass it straight through to the modulator while the
//! noise itself stays outside the learned system. Every random draw comes
//! from a stream addressed by loop counters (epoch, dataset index), which
//! makes a resumed run replay an uninterrupted one exactly, to the byte, and
//! keeps the loss history reproducible at fixed seed.
//!
//! Epoch metrics come from a separate eval pass over the train split with
//! batch norm in eval mode; model selection uses the test split at a fixed
//! reference SNR so checkpoints from different channel configs compare on
//! equal footing.

use std::io::Write as IoWrite;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::channel::{noise_variance, sample_snr, fill_standard_normal, ChannelConfig};
use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError, CheckpointMeta};
use crate::dataset::Example;
use crate::losses::{
    alpha_schedule, combined_loss, loss_a, loss_b, loss_mse, loss_shape, sample_signal_points,
    sample_target, LossConfig, LossError, LossMode, LossParts,
};
use crate::modem::{demodulate, IqSignal, ModulationKind};
use crate::networks::{
    demodulator_forward, init_params, modulator_forward, update_bn_running, BnMode,
    DemodulatorConfig, ModulatorConfig, NetworkError, BN_MEAN_BUFFER, BN_VAR_BUFFER,
};
use crate::real::Real;
use crate::rng::{purpose, stream};
use crate::tensor::optim::{AdaBeliefConfig, OptimizerState};
use crate::tensor::params::{bind_params, clip_global_norm, write_grads, BoundParams, ModelParams};
use crate::tensor::{Graph, TensorError, Var};

/// Reference SNR for test-split evaluation and model selection.
pub const SELECTION_SNR_DB: f64 = 10.0;
pub const HISTORY_FILE: &str = "history.csv";
pub const HISTORY_HEADER: &str = "epoch,alpha,loss_a,loss_b,loss_aux,loss_total,ber_a,ber_b";
pub const BEST_DIR: &str = "best";
pub const LAST_DIR: &str = "last";

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub dataset_size: usize,
    pub train_fraction: f64,
    pub batch_size: usize,
    pub epochs: u64,
    pub modulation: ModulationKind,
    pub length_a: usize,
    pub length_b: usize,
    pub channel: ChannelConfig,
    pub loss: LossConfig,
    pub optimizer: AdaBeliefConfig,
    /// Global-norm gradient clip; 0 disables.
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            dataset_size: 16384,
            train_fraction: 0.8,
            batch_size: 64,
            epochs: 128,
            modulation: ModulationKind::Bpsk,
            length_a: 32,
            length_b: 32,
            channel: ChannelConfig {
                snr_low_db: 5.0,
                snr_high_db: 15.0,
                fixed_snr_db: None,
                seed: 0,
            },
            loss: LossConfig::default(),
            optimizer: AdaBeliefConfig::default(),
            grad_clip: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug)]
pub enum TrainError {
    Config { detail: String },
    DataMismatch { detail: String },
    /// A batch produced NaN or infinity; training aborts, completed-epoch
    /// history rows are already on disk.
    NonFinite { epoch: u64, batch: usize, op: &'static str },
    Tensor(TensorError),
    Loss(LossError),
    Checkpoint(CheckpointError),
    Io { path: String, source: std::io::Error },
}

impl std::fmt::Display for TrainError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TrainError::Config { detail } => write!(f, "config: {}", detail),
            TrainError::DataMismatch { detail } => write!(f, "dataset: {}", detail),
            TrainError::NonFinite { epoch, batch, op } => write!(
                f,
                "non-finite loss at epoch {} batch {} (op {}); training aborted",
                epoch, batch, op
            ),
            TrainError::Tensor(e) => write!(f, "{}", e),
            TrainError::Loss(e) => write!(f, "{}", e),
            TrainError::Checkpoint(e) => write!(f, "{}", e),
            TrainError::Io { path, source } => write!(f, "{}: {}", path, source),
        }
    }
}

impl std::error::Error for TrainError {}

impl From<TensorError> for TrainError {
    fn from(e: TensorError) -> Self {
        TrainError::Tensor(e)
    }
}

impl From<LossError> for TrainError {
    fn from(e: LossError) -> Self {
        match e {
            LossError::Tensor(t) => TrainError::Tensor(t),
            other => TrainError::Loss(other),
        }
    }
}

impl From<CheckpointError> for TrainError {
    fn from(e: CheckpointError) -> Self {
        TrainError::Checkpoint(e)
    }
}

impl From<NetworkError> for TrainError {
    fn from(e: NetworkError) -> Self {
        TrainError::Config { detail: e.to_string() }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |detail: String| Err(TrainError::Config { detail });
        ModulatorConfig::new(self.length_a, self.length_b)?;
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return bad(format!(
                "train.train_fraction must be inside (0, 1), got {}",
                self.train_fraction
            ));
        }
        if self.batch_size < 2 {
            return bad(format!(
                "train.batch_size must be >= 2 for batch statistics, got {}",
                self.batch_size
            ));
        }
        if self.dataset_size < self.batch_size {
            return bad(format!(
                "train.dataset_size ({}) must be at least train.batch_size ({})",
                self.dataset_size, self.batch_size
            ));
        }
        let cut = (self.train_fraction * self.dataset_size as f64).floor() as usize;
        if cut < self.batch_size {
            return bad(format!(
                "train split holds {} examples, fewer than one batch of {}",
                cut, self.batch_size
            ));
        }
        if self.epochs == 0 {
            return bad("train.epochs must be >= 1".into());
        }
        if !(self.grad_clip >= 0.0 && self.grad_clip.is_finite()) {
            return bad(format!(
                "train.grad_clip must be a finite value >= 0, got {}",
                self.grad_clip
            ));
        }
        if !(self.optimizer.lr > 0.0 && self.optimizer.lr.is_finite()) {
            return bad(format!("optimizer.lr must be positive, got {}", self.optimizer.lr));
        }
        for (name, beta) in [("beta1", self.optimizer.beta1), ("beta2", self.optimizer.beta2)] {
            if !(0.0..1.0).contains(&beta) {
                return bad(format!("optimizer.{} must be in [0, 1), got {}", name, beta));
            }
        }
        if !(self.optimizer.eps > 0.0) {
            return bad(format!("optimizer.eps must be positive, got {}", self.optimizer.eps));
        }
        self.channel
            .validate()
            .or_else(|detail| bad(detail))?;
        self.loss.validate()?;
        Ok(())
    }

    pub fn modulator_config(&self) -> Result<ModulatorConfig, TrainError> {
        Ok(ModulatorConfig::new(self.length_a, self.length_b)?)
    }

    pub fn demodulator_config(&self) -> Result<DemodulatorConfig, TrainError> {
        Ok(DemodulatorConfig::new(self.length_a, self.length_b)?)
    }

    /// Bits carried by message A per example.
    pub fn bits_a(&self) -> usize {
        self.length_a * self.modulation.bits_per_symbol()
    }
}

/// One history row; the CSV columns in order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRow {
    pub epoch: u64,
    pub alpha: f64,
    pub loss_a: f64,
    pub loss_b: f64,
    pub loss_aux: f64,
    pub loss_total: f64,
    pub ber_a: f64,
    pub ber_b: f64,
}

impl EpochRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.epoch,
            self.alpha,
            self.loss_a,
            self.loss_b,
            self.loss_aux,
            self.loss_total,
            self.ber_a,
            self.ber_b
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalMetrics {
    pub loss_a: f64,
    pub loss_b: f64,
    pub loss_aux: f64,
    pub loss_total: f64,
    pub ber_a: f64,
    pub ber_b: f64,
}

/// Where a run writes its artifacts and how it resumes.
pub struct TrainSession<'a> {
    /// When set: history.csv plus best/ and last/ checkpoints live here.
    pub out_dir: Option<&'a Path>,
    /// Stored verbatim inside each checkpoint.
    pub config_text: &'a str,
    /// Loaded last/ and best/ checkpoints of the run being continued.
    pub resume: Option<ResumePoint>,
    /// Called after each epoch with the history row and the test-split loss.
    pub on_epoch: Option<&'a mut dyn FnMut(&EpochRow, f64)>,
}

pub struct ResumePoint {
    pub last: Checkpoint,
    pub best: Checkpoint,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub history: Vec<EpochRow>,
    pub best_epoch: u64,
    pub best_loss: f64,
    pub best_params: ModelParams<f32>,
    pub last_params: ModelParams<f32>,
}

/// Flat [batch, len, 2] carrier components plus concatenated message bits.
pub(crate) fn assemble_batch<F: Real>(examples: &[&Example]) -> (Vec<F>, Vec<u8>, Vec<u8>) {
    let len = examples[0].iq_a.len();
    let mut iq = Vec::with_capacity(examples.len() * len * 2);
    let mut msg_a = Vec::new();
    let mut msg_b = Vec::new();
    for ex in examples {
        for k in 0..len {
            iq.push(F::from_f64(ex.iq_a.i[k]));
            iq.push(F::from_f64(ex.iq_a.q[k]));
        }
        msg_a.extend_from_slice(&ex.msg_a);
        msg_b.extend_from_slice(&ex.msg_b);
    }
    (iq, msg_a, msg_b)
}

/// Add channel noise to a [batch, len, 2] signal inside the graph. Each
/// example gets its own rng: one SNR draw, then len I/Q pairs of standard
/// normals, the same order the plain-signal channel uses. Noise is a constant
/// leaf, so the modulator sees d(received)/d(signal) = 1.
pub fn apply_awgn_in_graph<F: Real>(
    g: &mut Graph<F>,
    signal: Var,
    channel: &ChannelConfig,
    rngs: &mut [ChaCha8Rng],
) -> Result<(Var, Vec<f64>), TensorError> {
    let shape = g.shape(signal).to_vec();
    assert_eq!(shape.len(), 3, "channel expects [batch, len, 2]");
    assert_eq!(shape[0], rngs.len(), "one rng per example");
    let (batch, len) = (shape[0], shape[1]);
    let values = g.value(signal).to_vec();
    let mut noise = vec![F::zero(); values.len()];
    let mut snrs = Vec::with_capacity(batch);
    let mut draws = vec![0.0f64; 2 * len];
    for b in 0..batch {
        let rng = &mut rngs[b];
        let snr_db = sample_snr(channel, rng);
        snrs.push(snr_db);
        let row = &values[b * len * 2..(b + 1) * len * 2];
        // Per-sample i^2 + q^2 first, matching the plain channel's energy
        // accumulation order so both paths agree bit for bit.
        let es = (0..len)
            .map(|k| {
                let i = row[2 * k].as_f64();
                let q = row[2 * k + 1].as_f64();
                i * i + q * q
            })
            .sum::<f64>()
            / len as f64;
        let sigma2 = noise_variance(es, snr_db);
        if sigma2 == 0.0 || !sigma2.is_finite() {
            continue;
        }
        let sigma = sigma2.sqrt();
        fill_standard_normal(rng, &mut draws);
        for (slot, d) in noise[b * len * 2..(b + 1) * len * 2].iter_mut().zip(&draws) {
            *slot = F::from_f64(sigma * d);
        }
    }
    let noise = g.constant(noise, shape)?;
    let received = g.add(signal, noise)?;
    Ok((received, snrs))
}

fn demodulated_bit(logit: f32) -> u8 {
    (logit > 0.0) as u8
}

struct BatchLoss {
    total: Var,
    loss_a: Var,
    loss_b: Var,
    loss_aux: Option<Var>,
    received: Var,
    logits: Var,
    bn_node: Option<Var>,
    bound: BoundParams,
}

/// Build the full forward graph for one batch. `first_global` keys the shape
/// sampling stream; `shape_purpose` separates training draws from eval draws.
#[allow(clippy::too_many_arguments)]
fn batch_forward(
    g: &mut Graph<f32>,
    params: &ModelParams<f32>,
    config: &TrainConfig,
    mod_cfg: &ModulatorConfig,
    dem_cfg: &DemodulatorConfig,
    examples: &[&Example],
    channel: &ChannelConfig,
    channel_purpose: u64,
    shape_purpose: u64,
    global_indices: &[usize],
    epoch: u64,
    alpha: f64,
    train_mode: bool,
) -> Result<BatchLoss, TrainError> {
    let bound = bind_params(g, params)?;
    let (iq_data, _msg_a, msg_b) = assemble_batch::<f32>(examples);
    let iq_a = g.constant(iq_data.clone(), vec![examples.len(), config.length_a, 2])?;
    let iq_ab = modulator_forward(g, &bound, mod_cfg, iq_a, &msg_b)?;

    let l_mse = if config.loss.mode == LossMode::MseAux {
        Some(loss_mse(g, iq_ab, &iq_data)?)
    } else {
        None
    };
    let l_shape = if config.loss.mode == LossMode::Shape {
        let target_shape = config.loss.shape_target.as_ref().ok_or(LossError::MissingPart {
            mode: "shape",
            part: "shape_target",
        })?;
        let mut rng = stream(config.seed, shape_purpose, epoch, global_indices[0] as u64);
        let pts = sample_signal_points(g, iq_ab, config.loss.shape_sample_n, &mut rng)?;
        let target: Vec<f32> = sample_target(target_shape, config.loss.shape_sample_m, &mut rng);
        Some(loss_shape(g, pts, &target)?)
    } else {
        None
    };

    let mut rngs: Vec<ChaCha8Rng> = global_indices
        .iter()
        .map(|&gi| stream(channel.seed, channel_purpose, epoch, gi as u64))
        .collect();
    let (received, _snrs) = apply_awgn_in_graph(g, iq_ab, channel, &mut rngs)?;

    let l_a = loss_a(g, received, &iq_data)?;
    let mode = if train_mode {
        BnMode::Train
    } else {
        BnMode::Eval {
            running_mean: &params.buffers[BN_MEAN_BUFFER].data,
            running_var: &params.buffers[BN_VAR_BUFFER].data,
        }
    };
    let demod = demodulator_forward(g, &bound, dem_cfg, received, mode)?;
    let l_b = loss_b(g, demod.logits, &msg_b)?;

    let parts = LossParts {
        loss_a: l_a,
        loss_b: l_b,
        loss_mse: l_mse,
        loss_shape: l_shape,
    };
    let total = combined_loss(g, &parts, &config.loss, alpha)?;
    Ok(BatchLoss {
        total,
        loss_a: l_a,
        loss_b: l_b,
        loss_aux: l_mse.or(l_shape),
        received,
        logits: demod.logits,
        bn_node: demod.bn_node,
        bound,
    })
}

fn check_examples(config: &TrainConfig, examples: &[Example], who: &str) -> Result<(), TrainError> {
    for ex in examples {
        if ex.msg_a.len() != config.bits_a()
            || ex.msg_b.len() != config.length_b
            || ex.iq_a.len() != config.length_a
        {
            return Err(TrainError::DataMismatch {
                detail: format!(
                    "{} example carries {}/{} bits over {} symbols but the config expects {}/{} over {}",
                    who,
                    ex.msg_a.len(),
                    ex.msg_b.len(),
                    ex.iq_a.len(),
                    config.bits_a(),
                    config.length_b,
                    config.length_a
                ),
            });
        }
    }
    Ok(())
}

/// Metrics over `examples` with batch norm in eval mode. `global_offset` is
/// the dataset index of the first example; `channel` decides the SNR policy,
/// so selection can pin the reference SNR while epoch metrics keep the
/// training distribution.
pub fn evaluate(
    params: &ModelParams<f32>,
    config: &TrainConfig,
    examples: &[Example],
    global_offset: usize,
    epoch: u64,
    channel: &ChannelConfig,
    alpha: f64,
) -> Result<EvalMetrics, TrainError> {
    check_examples(config, examples, "eval")?;
    let mod_cfg = config.modulator_config()?;
    let dem_cfg = config.demodulator_config()?;
    let mut weighted = [0.0f64; 4];
    let mut bit_errors_a = 0u64;
    let mut bits_a = 0u64;
    let mut bit_errors_b = 0u64;
    let mut bits_b = 0u64;
    let total = examples.len();
    for (chunk_idx, chunk) in examples.chunks(config.batch_size).enumerate() {
        let refs: Vec<&Example> = chunk.iter().collect();
        let global: Vec<usize> = (0..chunk.len())
            .map(|j| global_offset + chunk_idx * config.batch_size + j)
            .collect();
        let mut g = Graph::<f32>::new();
        let out = batch_forward(
            &mut g,
            params,
            config,
            &mod_cfg,
            &dem_cfg,
            &refs,
            channel,
            purpose::EVAL,
            purpose::EVAL_SHAPE,
            &global,
            epoch,
            alpha,
            false,
        )?;
        let w = chunk.len() as f64;
        weighted[0] += g.scalar(out.loss_a) as f64 * w;
        weighted[1] += g.scalar(out.loss_b) as f64 * w;
        weighted[2] += out.loss_aux.map(|v| g.scalar(v) as f64).unwrap_or(0.0) * w;
        weighted[3] += g.scalar(out.total) as f64 * w;

        let received = g.value(out.received);
        let len = config.length_a;
        for (j, ex) in chunk.iter().enumerate() {
            let row = &received[j * len * 2..(j + 1) * len * 2];
            let i: Vec<f64> = (0..len).map(|k| row[2 * k] as f64).collect();
            let q: Vec<f64> = (0..len).map(|k| row[2 * k + 1] as f64).collect();
            let decoded = demodulate(&IqSignal::new(i, q), config.modulation);
            bit_errors_a += decoded
                .iter()
                .zip(&ex.msg_a)
                .filter(|(a, b)| a != b)
                .count() as u64;
            bits_a += ex.msg_a.len() as u64;
        }
        let logits = g.value(out.logits);
        for (j, ex) in chunk.iter().enumerate() {
            let row = &logits[j * config.length_b..(j + 1) * config.length_b];
            bit_errors_b += row
                .iter()
                .zip(&ex.msg_b)
                .filter(|(&l, &b)| demodulated_bit(l) != b)
                .count() as u64;
            bits_b += ex.msg_b.len() as u64;
        }
    }
    let n = total as f64;
    Ok(EvalMetrics {
        loss_a: weighted[0] / n,
        loss_b: weighted[1] / n,
        loss_aux: weighted[2] / n,
        loss_total: weighted[3] / n,
        ber_a: bit_errors_a as f64 / bits_a as f64,
        ber_b: bit_errors_b as f64 / bits_b as f64,
    })
}

fn open_history(
    path: &PathBuf,
    resuming: bool,
) -> Result<std::io::BufWriter<std::fs::File>, TrainError> {
    let io_err = |source| TrainError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut options = std::fs::OpenOptions::new();
    if resuming {
        options.create(true).append(true);
    } else {
        options.create(true).write(true).truncate(true);
    }
    let file = options.open(path).map_err(io_err)?;
    let fresh = file.metadata().map_err(io_err)?.len() == 0;
    let mut w = std::io::BufWriter::new(file);
    if fresh {
        writeln!(w, "{}", HISTORY_HEADER).map_err(io_err)?;
        w.flush().map_err(io_err)?;
    }
    Ok(w)
}

/// Train on `train_set`, selecting by combined test loss at the reference
/// SNR. Returns the history plus both the best and final parameters; when the
/// session names an out_dir, history.csv and the best/ and last/ checkpoints
/// are kept current after every epoch.
pub fn train(
    train_set: &[Example],
    test_set: &[Example],
    config: &TrainConfig,
    mut session: TrainSession<'_>,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    check_examples(config, train_set, "train")?;
    check_examples(config, test_set, "test")?;
    if train_set.len() < config.batch_size {
        return Err(TrainError::Config {
            detail: format!(
                "train split holds {} examples, fewer than one batch of {}",
                train_set.len(),
                config.batch_size
            ),
        });
    }
    let mod_cfg = config.modulator_config()?;
    let dem_cfg = config.demodulator_config()?;

    let reference: ModelParams<f32> =
        init_params(&mod_cfg, &dem_cfg, &mut stream(config.seed, purpose::INIT, 0, 0));
    let (mut params, mut opt, start_epoch, mut best_loss, mut best_epoch, mut best_params) =
        match session.resume.take() {
            None => {
                let opt = OptimizerState::new(config.optimizer, &reference);
                let params = reference;
                let best = params.clone();
                (params, opt, 0u64, f64::INFINITY, 0u64, best)
            }
            Some(point) => {
                let ResumePoint { last, best } = point;
                for (ck, fresh) in [(&last.params, &reference), (&best.params, &reference)] {
                    for (name, p) in &fresh.params {
                        match ck.params.get(name) {
                            Some(q) if q.shape == p.shape => {}
                            _ => {
                                return Err(TrainError::Config {
                                    detail: format!(
                                        "checkpoint does not provide parameter {} with shape {:?}; it was saved from a different configuration",
                                        name, p.shape
                                    ),
                                })
                            }
                        }
                    }
                }
                let opt = OptimizerState {
                    config: config.optimizer,
                    m: last.opt_m,
                    s: last.opt_s,
                    t: last.meta.opt_step,
                };
                (
                    last.params,
                    opt,
                    last.meta.epoch,
                    last.meta.best_loss,
                    best.meta.epoch,
                    best.params,
                )
            }
        };

    let mut history_file = match session.out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|source| TrainError::Io {
                path: dir.display().to_string(),
                source,
            })?;
            Some(open_history(&dir.join(HISTORY_FILE), start_epoch > 0)?)
        }
        None => None,
    };

    let mut history = Vec::new();
    for epoch in start_epoch..config.epochs {
        let alpha = alpha_schedule(epoch);
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut stream(config.seed, purpose::SHUFFLE, epoch, 0));

        for (batch_idx, batch) in order.chunks_exact(config.batch_size).enumerate() {
            let refs: Vec<&Example> = batch.iter().map(|&i| &train_set[i]).collect();
            let mut g = Graph::<f32>::new();
            let out = batch_forward(
                &mut g,
                &params,
                config,
                &mod_cfg,
                &dem_cfg,
                &refs,
                &config.channel,
                purpose::NOISE,
                purpose::SHAPE,
                batch,
                epoch,
                alpha,
                true,
            )
            .map_err(|e| match e {
                TrainError::Tensor(TensorError::NonFinite { op }) => TrainError::NonFinite {
                    epoch,
                    batch: batch_idx,
                    op,
                },
                other => other,
            })?;
            if let Some(bn) = out.bn_node {
                update_bn_running(&g, bn, refs.len(), &mut params);
            }
            g.backward(out.total).map_err(|e| match e {
                TensorError::NonFinite { op } => TrainError::NonFinite {
                    epoch,
                    batch: batch_idx,
                    op,
                },
                other => TrainError::Tensor(other),
            })?;
            write_grads(&g, &out.bound, &mut params);
            if config.grad_clip > 0.0 {
                clip_global_norm(&mut params, config.grad_clip);
            }
            opt.step(&mut params)?;
        }

        let metrics = evaluate(
            &params,
            config,
            train_set,
            0,
            epoch,
            &config.channel,
            alpha,
        )?;
        let row = EpochRow {
            epoch,
            alpha,
            loss_a: metrics.loss_a,
            loss_b: metrics.loss_b,
            loss_aux: metrics.loss_aux,
            loss_total: metrics.loss_total,
            ber_a: metrics.ber_a,
            ber_b: metrics.ber_b,
        };

        let selection_channel = ChannelConfig {
            fixed_snr_db: Some(SELECTION_SNR_DB),
            ..config.channel
        };
        let test_metrics = evaluate(
            &params,
            config,
            test_set,
            train_set.len(),
            epoch,
            &selection_channel,
            config.loss.alpha,
        )?;
        let test_loss = test_metrics.loss_total;

        if let Some(w) = history_file.as_mut() {
            let io_err = |source| TrainError::Io {
                path: "history.csv".into(),
                source,
            };
            writeln!(w, "{}", row.csv_line()).map_err(io_err)?;
            w.flush().map_err(io_err)?;
        }
        history.push(row);

        let improved = test_loss < best_loss;
        if improved {
            best_loss = test_loss;
            best_epoch = epoch;
            best_params = params.clone();
        }
        if let Some(dir) = session.out_dir {
            let meta = CheckpointMeta {
                epoch: epoch + 1,
                opt_step: opt.t,
                best_loss,
            };
            save_checkpoint(&dir.join(LAST_DIR), &params, &opt, &meta, session.config_text)?;
            if improved {
                let best_meta = CheckpointMeta {
                    epoch,
                    opt_step: opt.t,
                    best_loss,
                };
                save_checkpoint(
                    &dir.join(BEST_DIR),
                    &best_params,
                    &opt,
                    &best_meta,
                    session.config_text,
                )?;
            }
        }
        if let Some(cb) = session.on_epoch.as_mut() {
            cb(&row, test_loss);
        }
    }

    Ok(TrainOutcome {
        history,
        best_epoch,
        best_loss,
        best_params,
        last_params: params,
    })
}

/// Load the last/ and best/ checkpoints under `out_dir` for resumption.
pub fn load_resume_point(out_dir: &Path) -> Result<ResumePoint, TrainError> {
    let last = load_checkpoint(&out_dir.join(LAST_DIR))?;
    let best = load_checkpoint(&out_dir.join(BEST_DIR))?;
    Ok(ResumePoint { last, best })
}
