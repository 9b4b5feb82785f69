//! Example synthesis, train/test split, and the line-delimited dataset file.
//!
//! An example pairs a carrier message A with a rider message B; the carrier's
//! IQ trace is a pure function of its bits, so the on-disk record stores only
//! the two bit strings and the loader recomputes the trace. Records are one
//! JSON object per line, which keeps files diffable and streamable.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::modem::{modulate, Bits, IqSignal, ModemError, ModulationKind};

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub msg_a: Bits,
    pub msg_b: Bits,
    pub iq_a: IqSignal,
}

#[derive(Debug)]
pub enum DatasetError {
    Io { path: String, source: std::io::Error },
    Parse { line: usize, detail: String },
    Modem { line: usize, source: ModemError },
}

impl std::fmt::Display for DatasetError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DatasetError::Io { path, source } => write!(f, "{}: {}", path, source),
            DatasetError::Parse { line, detail } => write!(f, "line {}: {}", line, detail),
            DatasetError::Modem { line, source } => write!(f, "line {}: {}", line, source),
        }
    }
}

impl std::error::Error for DatasetError {}

/// Draw `size` examples: every bit of both messages is an independent fair
/// coin, and the carrier trace is modulated from the A bits. Message A load
/// is `length_a` symbols worth of bits.
pub fn synthesize_dataset(
    size: usize,
    length_a: usize,
    length_b: usize,
    kind: ModulationKind,
    rng: &mut impl Rng,
) -> Result<Vec<Example>, ModemError> {
    let bits_a = length_a * kind.bits_per_symbol();
    let mut out = Vec::with_capacity(size);
    for _ in 0..size {
        let msg_a: Bits = (0..bits_a).map(|_| rng.gen_range(0..=1u8)).collect();
        let msg_b: Bits = (0..length_b).map(|_| rng.gen_range(0..=1u8)).collect();
        let iq_a = modulate(&msg_a, kind)?;
        out.push(Example { msg_a, msg_b, iq_a });
    }
    Ok(out)
}

/// First floor(fraction * N) examples train, the rest test. Synthesis order is
/// already random, so a prefix split is an unbiased partition.
pub fn split(dataset: Vec<Example>, train_fraction: f64) -> (Vec<Example>, Vec<Example>) {
    assert!(
        train_fraction > 0.0 && train_fraction < 1.0,
        "train fraction must be in (0, 1)"
    );
    let cut = (train_fraction * dataset.len() as f64).floor() as usize;
    let mut train = dataset;
    let test = train.split_off(cut);
    (train, test)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    msg_a: String,
    msg_b: String,
}

fn bits_to_string(bits: &[u8]) -> String {
    bits.iter().map(|&b| if b == 0 { '0' } else { '1' }).collect()
}

fn string_to_bits(s: &str, field: &str, line: usize) -> Result<Bits, DatasetError> {
    if s.is_empty() {
        return Err(DatasetError::Parse {
            line,
            detail: format!("{} is empty", field),
        });
    }
    s.chars()
        .map(|c| match c {
            '0' => Ok(0u8),
            '1' => Ok(1u8),
            other => Err(DatasetError::Parse {
                line,
                detail: format!("{} contains {:?}; only 0 and 1 are allowed", field, other),
            }),
        })
        .collect()
}

/// Write one JSON record per line: {"msg_a":"0101...","msg_b":"10..."}.
pub fn write_dataset(path: &Path, dataset: &[Example]) -> Result<(), DatasetError> {
    let io_err = |source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    };
    let file = std::fs::File::create(path).map_err(io_err)?;
    let mut w = BufWriter::new(file);
    for ex in dataset {
        let record = Record {
            msg_a: bits_to_string(&ex.msg_a),
            msg_b: bits_to_string(&ex.msg_b),
        };
        let json = serde_json::to_string(&record).expect("record serialization cannot fail");
        writeln!(w, "{}", json).map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

/// Read a dataset file back, recomputing each carrier trace. All records must
/// agree on both message lengths.
pub fn read_dataset(path: &Path, kind: ModulationKind) -> Result<Vec<Example>, DatasetError> {
    let file = std::fs::File::open(path).map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let reader = BufReader::new(file);
    let mut out: Vec<Example> = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|source| DatasetError::Io {
            path: path.display().to_string(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let record: Record = serde_json::from_str(&line).map_err(|e| DatasetError::Parse {
            line: lineno,
            detail: e.to_string(),
        })?;
        let msg_a = string_to_bits(&record.msg_a, "msg_a", lineno)?;
        let msg_b = string_to_bits(&record.msg_b, "msg_b", lineno)?;
        if let Some(first) = out.first() {
            if msg_a.len() != first.msg_a.len() || msg_b.len() != first.msg_b.len() {
                return Err(DatasetError::Parse {
                    line: lineno,
                    detail: format!(
                        "message lengths {}/{} disagree with the first record's {}/{}",
                        msg_a.len(),
                        msg_b.len(),
                        first.msg_a.len(),
                        first.msg_b.len()
                    ),
                });
            }
        }
        let iq_a = modulate(&msg_a, kind).map_err(|source| DatasetError::Modem {
            line: lineno,
            source,
        })?;
        out.push(Example { msg_a, msg_b, iq_a });
    }
    Ok(out)
}
