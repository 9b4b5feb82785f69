//! Bit-error measurement, Es/N0 sweeps, capacity arithmetic, and signal
//! exports.
//!
//! Everything here runs the networks in inference mode (batch norm on its
//! running statistics) and aggregates bit counts in integers, so a sweep is
//! deterministic at fixed seed regardless of batch slicing. The fixed-modem
//! reference link lives here too; it shares the channel code with the learned
//! system, which is what makes A-vs-A comparisons meaningful.

use std::path::{Path, PathBuf};

use rand_chacha::ChaCha8Rng;

use crate::channel::{awgn, ChannelConfig};
use crate::dataset::Example;
use crate::modem::{demodulate, modulate, symbol_labels, IqSignal, ModulationKind};
use crate::networks::{demodulator_forward, modulator_forward, BnMode, BN_MEAN_BUFFER, BN_VAR_BUFFER};
use crate::rng::{purpose, stream};
use crate::tensor::params::{bind_params, ModelParams};
use crate::tensor::{Graph, TensorError};
use crate::training::{apply_awgn_in_graph, assemble_batch, TrainConfig};

#[derive(Debug)]
pub enum EvalError {
    LengthMismatch { want: usize, got: usize },
    Domain { field: &'static str, detail: String },
    Data { detail: String },
    Tensor(TensorError),
    Io { path: String, source: std::io::Error },
}

impl std::fmt::Display for EvalError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            EvalError::LengthMismatch { want, got } => {
                write!(f, "bit sequences differ in length: {} vs {}", want, got)
            }
            EvalError::Domain { field, detail } => write!(f, "{}: {}", field, detail),
            EvalError::Data { detail } => write!(f, "{}", detail),
            EvalError::Tensor(e) => write!(f, "{}", e),
            EvalError::Io { path, source } => write!(f, "{}: {}", path, source),
        }
    }
}

impl std::error::Error for EvalError {}

impl From<TensorError> for EvalError {
    fn from(e: TensorError) -> Self {
        EvalError::Tensor(e)
    }
}

/// Fraction of differing bits.
pub fn ber(predicted: &[u8], truth: &[u8]) -> Result<f64, EvalError> {
    if predicted.len() != truth.len() {
        return Err(EvalError::LengthMismatch {
            want: truth.len(),
            got: predicted.len(),
        });
    }
    if predicted.is_empty() {
        return Err(EvalError::Domain {
            field: "bits",
            detail: "cannot measure a bit error rate over zero bits".into(),
        });
    }
    let errors = predicted.iter().zip(truth).filter(|(a, b)| a != b).count();
    Ok(errors as f64 / predicted.len() as f64)
}

/// One sweep measurement. `bits_*` are the denominators behind the rates, so
/// downstream plots can attach binomial error bars.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BerPoint {
    pub esn0_db: f64,
    pub ber_a: f64,
    pub ber_b: f64,
    pub bits_a: u64,
    pub bits_b: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepConfig {
    /// Minimum bits counted per point, for each of the two messages.
    pub min_bits: u64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            min_bits: 100_000,
            batch_size: 64,
            seed: 0,
        }
    }
}

struct LinkCounts {
    errors_a: u64,
    bits_a: u64,
    errors_b: u64,
    bits_b: u64,
}

/// One inference pass of a batch through modulator, channel, and both
/// demodulators; returns the bit-error tallies against the ground truth.
fn link_pass(
    params: &ModelParams<f32>,
    config: &TrainConfig,
    examples: &[&Example],
    channel: &ChannelConfig,
    rngs: &mut [ChaCha8Rng],
) -> Result<LinkCounts, EvalError> {
    let mod_cfg = config
        .modulator_config()
        .map_err(|e| EvalError::Data { detail: e.to_string() })?;
    let dem_cfg = config
        .demodulator_config()
        .map_err(|e| EvalError::Data { detail: e.to_string() })?;
    let mut g = Graph::<f32>::new();
    let bound = bind_params(&mut g, params)?;
    let (iq_data, msg_a, msg_b) = assemble_batch::<f32>(examples);
    let iq_a = g.constant(iq_data, vec![examples.len(), config.length_a, 2])?;
    let iq_ab = modulator_forward(&mut g, &bound, &mod_cfg, iq_a, &msg_b)?;
    let (received, _) = apply_awgn_in_graph(&mut g, iq_ab, channel, rngs)?;
    let demod = demodulator_forward(
        &mut g,
        &bound,
        &dem_cfg,
        received,
        BnMode::Eval {
            running_mean: &params.buffers[BN_MEAN_BUFFER].data,
            running_var: &params.buffers[BN_VAR_BUFFER].data,
        },
    )?;

    let len = config.length_a;
    let bits_per_example = config.bits_a();
    let rec = g.value(received);
    let mut counts = LinkCounts {
        errors_a: 0,
        bits_a: 0,
        errors_b: 0,
        bits_b: 0,
    };
    for (j, _) in examples.iter().enumerate() {
        let row = &rec[j * len * 2..(j + 1) * len * 2];
        let i: Vec<f64> = (0..len).map(|k| row[2 * k] as f64).collect();
        let q: Vec<f64> = (0..len).map(|k| row[2 * k + 1] as f64).collect();
        let decoded = demodulate(&IqSignal::new(i, q), config.modulation);
        let truth = &msg_a[j * bits_per_example..(j + 1) * bits_per_example];
        counts.errors_a += decoded.iter().zip(truth).filter(|(a, b)| a != b).count() as u64;
        counts.bits_a += bits_per_example as u64;
    }
    let logits = g.value(demod.logits);
    for (j, _) in examples.iter().enumerate() {
        let row = &logits[j * config.length_b..(j + 1) * config.length_b];
        let truth = &msg_b[j * config.length_b..(j + 1) * config.length_b];
        counts.errors_b += row
            .iter()
            .zip(truth)
            .filter(|(&l, &b)| ((l > 0.0) as u8) != b)
            .count() as u64;
        counts.bits_b += config.length_b as u64;
    }
    Ok(counts)
}

/// Measure both messages' BER at each Es/N0, repeating passes over the test
/// set until both bit budgets are met. An infinite Es/N0 means a noiseless
/// channel. Deterministic at fixed sweep seed.
pub fn sweep_ber(
    params: &ModelParams<f32>,
    config: &TrainConfig,
    test_set: &[Example],
    esn0_list_db: &[f64],
    sweep: &SweepConfig,
) -> Result<Vec<BerPoint>, EvalError> {
    if test_set.is_empty() {
        return Err(EvalError::Data {
            detail: "sweep needs a nonempty test set".into(),
        });
    }
    if sweep.batch_size == 0 {
        return Err(EvalError::Domain {
            field: "sweep.batch_size",
            detail: "must be at least 1".into(),
        });
    }
    for &e in esn0_list_db {
        if e.is_nan() {
            return Err(EvalError::Domain {
                field: "esn0_db",
                detail: "sweep points must be numbers".into(),
            });
        }
    }
    let mut points = Vec::with_capacity(esn0_list_db.len());
    for (pi, &esn0) in esn0_list_db.iter().enumerate() {
        let channel = ChannelConfig {
            snr_low_db: esn0,
            snr_high_db: esn0,
            fixed_snr_db: Some(esn0),
            seed: sweep.seed,
        };
        let mut errors_a = 0u64;
        let mut bits_a = 0u64;
        let mut errors_b = 0u64;
        let mut bits_b = 0u64;
        let mut pass = 0u64;
        while bits_a < sweep.min_bits || bits_b < sweep.min_bits {
            for (chunk_idx, chunk) in test_set.chunks(sweep.batch_size).enumerate() {
                let refs: Vec<&Example> = chunk.iter().collect();
                let mut rngs: Vec<ChaCha8Rng> = (0..chunk.len())
                    .map(|j| {
                        let idx = pass * test_set.len() as u64
                            + (chunk_idx * sweep.batch_size + j) as u64;
                        stream(sweep.seed, purpose::SWEEP, pi as u64, idx)
                    })
                    .collect();
                let c = link_pass(params, config, &refs, &channel, &mut rngs)?;
                errors_a += c.errors_a;
                bits_a += c.bits_a;
                errors_b += c.errors_b;
                bits_b += c.bits_b;
            }
            pass += 1;
        }
        points.push(BerPoint {
            esn0_db: esn0,
            ber_a: errors_a as f64 / bits_a as f64,
            ber_b: errors_b as f64 / bits_b as f64,
            bits_a,
            bits_b,
        });
    }
    Ok(points)
}

/// Monte-Carlo BER of the plain modem (no learned networks) over the same
/// channel, for baseline capacity comparisons. Returns (ber, bits counted).
pub fn fixed_link_ber(
    kind: ModulationKind,
    esn0_db: f64,
    min_bits: u64,
    seed: u64,
    point_idx: usize,
) -> (f64, u64) {
    const FRAME_SYMBOLS: usize = 4096;
    let bits_per_frame = FRAME_SYMBOLS * kind.bits_per_symbol();
    let mut errors = 0u64;
    let mut bits = 0u64;
    let mut frame = 0u64;
    while bits < min_bits {
        let mut rng = stream(seed, purpose::BASELINE, point_idx as u64, frame);
        let msg: Vec<u8> = (0..bits_per_frame)
            .map(|_| rand::Rng::gen_range(&mut rng, 0..=1u8))
            .collect();
        let clean = modulate(&msg, kind).expect("bits are 0/1 by construction");
        let noisy = awgn(&clean, esn0_db, &mut rng);
        let decoded = demodulate(&noisy, kind);
        errors += decoded.iter().zip(&msg).filter(|(a, b)| a != b).count() as u64;
        bits += bits_per_frame as u64;
        frame += 1;
    }
    (errors as f64 / bits as f64, bits)
}

/// Throughput credited to a stream: its raw bitrate times the fraction of
/// bits that arrive intact.
pub fn capacity_empirical(bitrate: f64, accuracy: f64) -> f64 {
    bitrate * accuracy
}

/// Message A rate in bits/sec at one sample per symbol and unit sample rate.
pub fn bitrate_a(kind: ModulationKind) -> f64 {
    kind.bits_per_symbol() as f64
}

/// Message B rate: length_b bits spread over length_a symbol times.
pub fn bitrate_b(length_a: usize, length_b: usize) -> f64 {
    length_b as f64 / length_a as f64
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CapacityPoint {
    pub snr_db: f64,
    pub capacity_a_only: f64,
    pub capacity_learned: f64,
}

/// Empirical capacity of the learned system (both messages) against the
/// fixed modem alone, at each Es/N0.
pub fn capacity_curve(
    params: &ModelParams<f32>,
    config: &TrainConfig,
    test_set: &[Example],
    esn0_list_db: &[f64],
    sweep: &SweepConfig,
) -> Result<Vec<CapacityPoint>, EvalError> {
    let learned = sweep_ber(params, config, test_set, esn0_list_db, sweep)?;
    let ra = bitrate_a(config.modulation);
    let rb = bitrate_b(config.length_a, config.length_b);
    Ok(learned
        .iter()
        .enumerate()
        .map(|(pi, pt)| {
            let (fixed, _) = fixed_link_ber(
                config.modulation,
                pt.esn0_db,
                sweep.min_bits,
                sweep.seed,
                pi,
            );
            CapacityPoint {
                snr_db: pt.esn0_db,
                capacity_a_only: capacity_empirical(ra, 1.0 - fixed),
                capacity_learned: capacity_empirical(ra, 1.0 - pt.ber_a)
                    + capacity_empirical(rb, 1.0 - pt.ber_b),
            }
        })
        .collect())
}

/// Channel capacity B * log2(1 + S/N) in bits/sec.
pub fn shannon_capacity(
    bandwidth_hz: f64,
    signal_power: f64,
    noise_power: f64,
) -> Result<f64, EvalError> {
    if !(bandwidth_hz > 0.0) || !bandwidth_hz.is_finite() {
        return Err(EvalError::Domain {
            field: "bandwidth_hz",
            detail: format!("must be positive and finite, got {}", bandwidth_hz),
        });
    }
    if !(noise_power > 0.0) || !noise_power.is_finite() {
        return Err(EvalError::Domain {
            field: "noise_power",
            detail: format!("must be positive and finite, got {}", noise_power),
        });
    }
    if !(signal_power >= 0.0) {
        return Err(EvalError::Domain {
            field: "signal_power",
            detail: format!("must be nonnegative, got {}", signal_power),
        });
    }
    Ok(bandwidth_hz * (1.0 + signal_power / noise_power).log2())
}

/// Run one example through the modulator alone; the clean learned signal.
pub fn modulate_learned(
    params: &ModelParams<f32>,
    config: &TrainConfig,
    example: &Example,
) -> Result<IqSignal, EvalError> {
    let mod_cfg = config
        .modulator_config()
        .map_err(|e| EvalError::Data { detail: e.to_string() })?;
    let mut g = Graph::<f32>::new();
    let bound = bind_params(&mut g, params)?;
    let (iq_data, _, msg_b) = assemble_batch::<f32>(&[example]);
    let iq_a = g.constant(iq_data, vec![1, config.length_a, 2])?;
    let iq_ab = modulator_forward(&mut g, &bound, &mod_cfg, iq_a, &msg_b)?;
    let out = g.value(iq_ab);
    let len = config.length_a;
    let i: Vec<f64> = (0..len).map(|k| out[2 * k] as f64).collect();
    let q: Vec<f64> = (0..len).map(|k| out[2 * k + 1] as f64).collect();
    Ok(IqSignal::new(i, q))
}

/// Unbiased sample variance of the Q component; how much of the quadrature
/// dimension the signal actually uses. A fixed BPSK signal scores exactly 0.
pub fn q_component_utilization(iq: &IqSignal) -> f64 {
    let n = iq.q.len();
    if n < 2 {
        return 0.0;
    }
    let mean = iq.q.iter().sum::<f64>() / n as f64;
    let ss = iq.q.iter().map(|&q| (q - mean) * (q - mean)).sum::<f64>();
    ss / (n - 1) as f64
}

pub const TIME_DOMAIN_FILE: &str = "time_domain.csv";
pub const CONSTELLATION_FILE: &str = "constellation.csv";

#[derive(Debug)]
pub struct ExportReport {
    pub time_domain: PathBuf,
    pub constellation: PathBuf,
    /// Single-example demo BERs through the channel at the requested SNR.
    pub ber_a: f64,
    pub ber_b: f64,
}

/// Write the fixed-vs-learned time series and the learned constellation for
/// one example, both from the clean (pre-channel) signals; the requested SNR
/// only drives the demo BER figures in the report.
pub fn export_signals(
    params: &ModelParams<f32>,
    config: &TrainConfig,
    example: &Example,
    snr_db: f64,
    seed: u64,
    out_dir: &Path,
) -> Result<ExportReport, EvalError> {
    let learned = modulate_learned(params, config, example)?;
    let io_err = |path: &Path| {
        let shown = path.display().to_string();
        move |source| EvalError::Io {
            path: shown.clone(),
            source,
        }
    };
    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;

    let mut time = String::from("index,i_fixed,q_fixed,i_learned,q_learned\n");
    for k in 0..config.length_a {
        time.push_str(&format!(
            "{},{},{},{},{}\n",
            k, example.iq_a.i[k], example.iq_a.q[k], learned.i[k], learned.q[k]
        ));
    }
    let time_path = out_dir.join(TIME_DOMAIN_FILE);
    std::fs::write(&time_path, time).map_err(io_err(&time_path))?;

    let labels = symbol_labels(&example.msg_a, config.modulation);
    let mut cons = String::from("i,q,symbol_label\n");
    for k in 0..config.length_a {
        cons.push_str(&format!("{},{},{}\n", learned.i[k], learned.q[k], labels[k]));
    }
    let cons_path = out_dir.join(CONSTELLATION_FILE);
    std::fs::write(&cons_path, cons).map_err(io_err(&cons_path))?;

    let channel = ChannelConfig {
        snr_low_db: snr_db,
        snr_high_db: snr_db,
        fixed_snr_db: Some(snr_db),
        seed,
    };
    let mut rngs = vec![stream(seed, purpose::SWEEP, 0, 0)];
    let counts = link_pass(params, config, &[example], &channel, &mut rngs)?;
    Ok(ExportReport {
        time_domain: time_path,
        constellation: cons_path,
        ber_a: counts.errors_a as f64 / counts.bits_a as f64,
        ber_b: counts.errors_b as f64 / counts.bits_b as f64,
    })
}
