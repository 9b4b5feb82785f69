//! Command line front end: dataset synthesis, training, BER sweeps, signal
//! exports, and the capacity formula, glued to the library crate.
//!
//! Exit codes: 0 when all outputs were written, 2 for config problems (the
//! offending key is named), 1 for runtime failures. Every command echoes the
//! config it resolved before doing anything, so logs are self-describing.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use specfill_core::checkpoint::load_checkpoint;
use specfill_core::config::{ExperimentConfig, Mode, ShapeTargetSection};
use specfill_core::dataset::{read_dataset, split, synthesize_dataset, write_dataset, Example};
use specfill_core::eval::{export_signals, shannon_capacity, sweep_ber, SweepConfig};
use specfill_core::rng::{purpose, stream};
use specfill_core::training::{
    load_resume_point, train, TrainConfig, TrainError, TrainSession, BEST_DIR, HISTORY_FILE,
    LAST_DIR,
};

const PRESETS: &[(&str, &str)] = &[
    ("exp1-bpsk", include_str!("../../../configs/exp1-bpsk.toml")),
    ("exp2-qpsk-mse", include_str!("../../../configs/exp2-qpsk-mse.toml")),
    ("exp3-shape", include_str!("../../../configs/exp3-shape.toml")),
];

#[derive(Parser)]
#[command(
    name = "specfill",
    version,
    about = "Train and measure a learned second channel inside a fixed PSK signal"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a dataset file of (message A, message B) records.
    GenData {
        /// Experiment config file.
        #[arg(long, conflicts_with = "preset")]
        config: Option<PathBuf>,
        /// Built-in experiment name: exp1-bpsk, exp2-qpsk-mse, exp3-shape.
        #[arg(long)]
        preset: Option<String>,
        /// Output dataset path.
        #[arg(long, default_value = "dataset.jsonl")]
        out: PathBuf,
        /// Override train.seed and channel.seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Cap rayon worker threads.
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Train the modulator/demodulator pair.
    Train {
        #[arg(long, conflicts_with = "preset")]
        config: Option<PathBuf>,
        #[arg(long)]
        preset: Option<String>,
        /// Dataset file; synthesized in memory when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Where history.csv and the best/ and last/ checkpoints go.
        #[arg(long, default_value = "run")]
        out_dir: PathBuf,
        /// Continue from the checkpoints already in --out-dir.
        #[arg(long)]
        resume: bool,
        #[arg(long)]
        seed: Option<u64>,
        /// Replace the shape-loss target (shape mode only).
        #[arg(long)]
        target: Option<TargetKind>,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Measure BER of both messages across Es/N0 points.
    Sweep {
        /// Checkpoint directory (e.g. run/best).
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated Es/N0 values in dB, e.g. "5,8,11,14".
        #[arg(long, allow_hyphen_values = true)]
        esn0: String,
        #[arg(long, default_value = "sweep.csv")]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Minimum bits counted per point for each message.
        #[arg(long, default_value_t = 100_000)]
        min_bits: u64,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Export time-domain and constellation CSVs for one test example.
    Export {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Index into the held-out test split.
        #[arg(long)]
        example_index: usize,
        /// Channel SNR for the reported demo error rates.
        #[arg(long, default_value_t = 10.0, allow_negative_numbers = true)]
        snr: f64,
        #[arg(long, default_value = "export")]
        out_dir: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Print the channel capacity for a bandwidth and SNR.
    Shannon {
        /// Bandwidth in Hz.
        #[arg(long, allow_negative_numbers = true)]
        bandwidth: f64,
        /// Signal-to-noise ratio in dB.
        #[arg(long, allow_negative_numbers = true)]
        snr_db: f64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum TargetKind {
    Ring,
    Ellipse,
    QpskCloud,
}

struct Failure {
    code: u8,
    message: String,
}

fn config_failure(message: impl Into<String>) -> Failure {
    Failure {
        code: 2,
        message: message.into(),
    }
}

fn run_failure(message: impl Into<String>) -> Failure {
    Failure {
        code: 1,
        message: message.into(),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn apply_threads(threads: Option<usize>) -> Result<(), Failure> {
    if let Some(n) = threads {
        if n == 0 {
            return Err(config_failure("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| run_failure(format!("thread pool: {}", e)))?;
    }
    Ok(())
}

/// Load and validate the experiment config, apply command-line overrides,
/// and return it with its canonical serialized form.
fn resolve_config(
    config: &Option<PathBuf>,
    preset: &Option<String>,
    seed: Option<u64>,
    target: Option<TargetKind>,
) -> Result<(ExperimentConfig, String), Failure> {
    let text = match (config, preset) {
        (Some(path), None) => std::fs::read_to_string(path)
            .map_err(|e| config_failure(format!("{}: {}", path.display(), e)))?,
        (None, Some(name)) => PRESETS
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t.to_string())
            .ok_or_else(|| {
                let names: Vec<&str> = PRESETS.iter().map(|(n, _)| *n).collect();
                config_failure(format!(
                    "unknown preset {}; available: {}",
                    name,
                    names.join(", ")
                ))
            })?,
        _ => {
            return Err(config_failure(
                "pass exactly one of --config <file> or --preset <name>",
            ))
        }
    };
    let mut parsed =
        ExperimentConfig::from_toml(&text).map_err(|e| config_failure(e.to_string()))?;
    if let Some(s) = seed {
        parsed.train.seed = s;
        parsed.channel.seed = s;
    }
    if let Some(kind) = target {
        if parsed.loss.mode != Mode::Shape {
            return Err(config_failure(
                "--target applies only when loss.mode is \"shape\"",
            ));
        }
        parsed.loss.shape_target = Some(match kind {
            TargetKind::Ring => ShapeTargetSection::Ring { r: 1.0, width: 0.2 },
            TargetKind::Ellipse => ShapeTargetSection::Ellipse { a: 1.25, b: 0.5 },
            TargetKind::QpskCloud => ShapeTargetSection::QpskCloud { sigma: 0.1 },
        });
    }
    parsed
        .validate()
        .map_err(|e| config_failure(e.to_string()))?;
    let resolved = parsed.to_toml();
    Ok((parsed, resolved))
}

fn echo_config(resolved: &str) {
    println!("--- resolved config ---");
    print!("{}", resolved);
    println!("-----------------------");
}

fn synthesize(tc: &TrainConfig) -> Result<Vec<Example>, Failure> {
    let mut rng = stream(tc.seed, purpose::DATA, 0, 0);
    synthesize_dataset(
        tc.dataset_size,
        tc.length_a,
        tc.length_b,
        tc.modulation,
        &mut rng,
    )
    .map_err(|e| run_failure(e.to_string()))
}

/// Checkpoint directory -> (params plus the experiment it was trained with).
fn load_experiment(
    checkpoint: &PathBuf,
) -> Result<(specfill_core::checkpoint::Checkpoint, ExperimentConfig, String), Failure> {
    let ck = load_checkpoint(checkpoint)
        .map_err(|e| run_failure(format!("{}: {}", checkpoint.display(), e)))?;
    let parsed = ExperimentConfig::from_toml(&ck.config_text)
        .map_err(|e| config_failure(format!("embedded config: {}", e)))?;
    parsed
        .validate()
        .map_err(|e| config_failure(format!("embedded config: {}", e)))?;
    let resolved = parsed.to_toml();
    Ok((ck, parsed, resolved))
}

fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::GenData {
            config,
            preset,
            out,
            seed,
            threads,
        } => {
            apply_threads(threads)?;
            let (parsed, resolved) = resolve_config(&config, &preset, seed, None)?;
            echo_config(&resolved);
            let tc = parsed.to_train_config();
            let data = synthesize(&tc)?;
            write_dataset(&out, &data).map_err(|e| run_failure(e.to_string()))?;
            println!("wrote {} records to {}", data.len(), out.display());
            Ok(())
        }
        Command::Train {
            config,
            preset,
            data,
            out_dir,
            resume,
            seed,
            target,
            threads,
        } => {
            apply_threads(threads)?;
            let (parsed, resolved) = resolve_config(&config, &preset, seed, target)?;
            echo_config(&resolved);
            let tc = parsed.to_train_config();
            let dataset = match &data {
                Some(path) => {
                    let records = read_dataset(path, tc.modulation)
                        .map_err(|e| run_failure(e.to_string()))?;
                    if records.len() != tc.dataset_size {
                        println!(
                            "note: {} holds {} records; train.dataset_size {} ignored",
                            path.display(),
                            records.len(),
                            tc.dataset_size
                        );
                    }
                    records
                }
                None => synthesize(&tc)?,
            };
            let (train_set, test_set) = split(dataset, tc.train_fraction);
            println!(
                "training on {} examples, testing on {}",
                train_set.len(),
                test_set.len()
            );
            let resume_point = if resume {
                Some(load_resume_point(&out_dir).map_err(|e| {
                    run_failure(format!("cannot resume from {}: {}", out_dir.display(), e))
                })?)
            } else {
                None
            };
            let mut print_epoch = |row: &specfill_core::training::EpochRow, test_loss: f64| {
                println!(
                    "epoch {:>3}  alpha {:.2}  loss_a {:.4}  loss_b {:.4}  aux {:.4}  total {:.4}  ber_a {:.3e}  ber_b {:.3e}  test {:.4}",
                    row.epoch,
                    row.alpha,
                    row.loss_a,
                    row.loss_b,
                    row.loss_aux,
                    row.loss_total,
                    row.ber_a,
                    row.ber_b,
                    test_loss
                );
            };
            let session = TrainSession {
                out_dir: Some(&out_dir),
                config_text: &resolved,
                resume: resume_point,
                on_epoch: Some(&mut print_epoch),
            };
            let outcome = train(&train_set, &test_set, &tc, session).map_err(|e| match e {
                TrainError::Config { .. } => config_failure(e.to_string()),
                other => run_failure(other.to_string()),
            })?;
            println!(
                "best test loss {} at epoch {}; wrote {}, {} and {} under {}",
                outcome.best_loss,
                outcome.best_epoch,
                HISTORY_FILE,
                BEST_DIR,
                LAST_DIR,
                out_dir.display()
            );
            Ok(())
        }
        Command::Sweep {
            checkpoint,
            esn0,
            out,
            seed,
            min_bits,
            threads,
        } => {
            apply_threads(threads)?;
            let (ck, parsed, resolved) = load_experiment(&checkpoint)?;
            echo_config(&resolved);
            let mut points = Vec::new();
            for part in esn0.split(',') {
                let trimmed = part.trim();
                let value: f64 = trimmed
                    .parse()
                    .map_err(|_| config_failure(format!("--esn0: cannot parse {:?}", trimmed)))?;
                points.push(value);
            }
            let tc = parsed.to_train_config();
            let (_, test_set) = split(synthesize(&tc)?, tc.train_fraction);
            let sweep = SweepConfig {
                min_bits,
                batch_size: tc.batch_size,
                seed: seed.unwrap_or(0),
            };
            let rows = sweep_ber(&ck.params, &tc, &test_set, &points, &sweep)
                .map_err(|e| run_failure(e.to_string()))?;
            let mut csv = String::from("esn0_db,ber_a,ber_b,bits_a,bits_b\n");
            for r in &rows {
                csv.push_str(&format!(
                    "{},{},{},{},{}\n",
                    r.esn0_db, r.ber_a, r.ber_b, r.bits_a, r.bits_b
                ));
                println!(
                    "esn0 {:>6} dB  ber_a {:.3e} ({} bits)  ber_b {:.3e} ({} bits)",
                    r.esn0_db, r.ber_a, r.bits_a, r.ber_b, r.bits_b
                );
            }
            std::fs::write(&out, csv)
                .map_err(|e| run_failure(format!("{}: {}", out.display(), e)))?;
            println!("wrote {} points to {}", rows.len(), out.display());
            Ok(())
        }
        Command::Export {
            checkpoint,
            example_index,
            snr,
            out_dir,
            seed,
            threads,
        } => {
            apply_threads(threads)?;
            let (ck, parsed, resolved) = load_experiment(&checkpoint)?;
            echo_config(&resolved);
            let tc = parsed.to_train_config();
            let (_, test_set) = split(synthesize(&tc)?, tc.train_fraction);
            let example = test_set.get(example_index).ok_or_else(|| {
                run_failure(format!(
                    "--example-index {} is out of range; the test split holds {} examples",
                    example_index,
                    test_set.len()
                ))
            })?;
            let report = export_signals(
                &ck.params,
                &tc,
                example,
                snr,
                seed.unwrap_or(0),
                &out_dir,
            )
            .map_err(|e| run_failure(e.to_string()))?;
            println!(
                "wrote {} and {}",
                report.time_domain.display(),
                report.constellation.display()
            );
            println!(
                "demo at {} dB: ber_a {:.3e}  ber_b {:.3e}",
                snr, report.ber_a, report.ber_b
            );
            Ok(())
        }
        Command::Shannon { bandwidth, snr_db } => {
            println!("--- resolved config ---");
            println!("bandwidth_hz = {}", bandwidth);
            println!("snr_db = {}", snr_db);
            println!("-----------------------");
            let linear = 10f64.powf(snr_db / 10.0);
            let capacity = shannon_capacity(bandwidth, linear, 1.0)
                .map_err(|e| config_failure(e.to_string()))?;
            println!("capacity_bits_per_sec = {}", capacity);
            Ok(())
        }
    }
}
