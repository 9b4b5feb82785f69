//! Self-describing checkpoint directories.
//!
//! A checkpoint is a directory of three files: `manifest.txt` (structured
//! key/value text naming every tensor with its shape, byte offset, and
//! element count), `tensors.bin` (the values, 32-bit little-endian floats,
//! laid out exactly as the manifest says), and `config.toml` (the experiment
//! configuration, stored verbatim). Parameters, batch-norm buffers, and both
//! optimizer moment vectors are all stored, so a loaded checkpoint resumes
//! training bit-for-bit. Saving a loaded checkpoint reproduces every file
//! byte-identically.

use std::path::Path;

use indexmap::IndexMap;

use crate::tensor::numel;
use crate::tensor::optim::OptimizerState;
use crate::tensor::params::ModelParams;

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const TENSORS_FILE: &str = "tensors.bin";
pub const CONFIG_FILE: &str = "config.toml";
const FORMAT_TAG: &str = "specfill-checkpoint-v1";

#[derive(Debug)]
pub enum CheckpointError {
    Io { path: String, source: std::io::Error },
    Format { line: usize, detail: String },
    Layout { detail: String },
}

impl std::fmt::Display for CheckpointError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CheckpointError::Io { path, source } => write!(f, "{}: {}", path, source),
            CheckpointError::Format { line, detail } => {
                write!(f, "manifest line {}: {}", line, detail)
            }
            CheckpointError::Layout { detail } => write!(f, "checkpoint layout: {}", detail),
        }
    }
}

impl std::error::Error for CheckpointError {}

/// Run position stored with the tensors. `best_loss` round-trips through its
/// raw bit pattern, so save/load cannot drift.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CheckpointMeta {
    /// Completed epochs; resume starts at this epoch index.
    pub epoch: u64,
    /// Optimizer step counter (bias-correction time).
    pub opt_step: u64,
    /// Lowest test-set combined loss seen so far.
    pub best_loss: f64,
}

/// Everything a checkpoint holds. Optimizer moments come back as raw vectors;
/// the caller reassembles an optimizer with its configured hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams<f32>,
    pub opt_m: IndexMap<String, Vec<f32>>,
    pub opt_s: IndexMap<String, Vec<f32>>,
    pub meta: CheckpointMeta,
    pub config_text: String,
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn shape_token(shape: &[usize]) -> String {
    shape
        .iter()
        .map(|d| d.to_string())
        .collect::<Vec<_>>()
        .join("x")
}

pub fn save_checkpoint(
    dir: &Path,
    params: &ModelParams<f32>,
    opt: &OptimizerState<f32>,
    meta: &CheckpointMeta,
    config_text: &str,
) -> Result<(), CheckpointError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut manifest = String::new();
    manifest.push_str(&format!("format = {}\n", FORMAT_TAG));
    manifest.push_str("dtype = f32\n");
    manifest.push_str("endian = little\n");
    manifest.push_str(&format!("epoch = {}\n", meta.epoch));
    manifest.push_str(&format!("opt_step = {}\n", meta.opt_step));
    manifest.push_str(&format!(
        "best_loss_bits = 0x{:016X}\n",
        meta.best_loss.to_bits()
    ));

    let mut blob: Vec<u8> = Vec::new();
    let mut record = |manifest: &mut String, section: &str, name: &str, shape: &[usize], data: &[f32]| {
        manifest.push_str(&format!(
            "tensor = {} {} {} {} {}\n",
            section,
            name,
            shape_token(shape),
            blob.len(),
            data.len()
        ));
        for x in data {
            blob.extend_from_slice(&x.to_le_bytes());
        }
    };
    for (name, p) in &params.params {
        record(&mut manifest, "param", name, &p.shape, &p.data);
    }
    for (name, b) in &params.buffers {
        record(&mut manifest, "buffer", name, &b.shape, &b.data);
    }
    for (name, p) in &params.params {
        let m = opt
            .m
            .get(name)
            .unwrap_or_else(|| panic!("optimizer has no first moment for {}", name));
        record(&mut manifest, "opt_m", name, &p.shape, m);
    }
    for (name, p) in &params.params {
        let s = opt
            .s
            .get(name)
            .unwrap_or_else(|| panic!("optimizer has no second moment for {}", name));
        record(&mut manifest, "opt_s", name, &p.shape, s);
    }

    let manifest_path = dir.join(MANIFEST_FILE);
    std::fs::write(&manifest_path, manifest).map_err(io_err(&manifest_path))?;
    let tensors_path = dir.join(TENSORS_FILE);
    std::fs::write(&tensors_path, blob).map_err(io_err(&tensors_path))?;
    let config_path = dir.join(CONFIG_FILE);
    std::fs::write(&config_path, config_text).map_err(io_err(&config_path))?;
    Ok(())
}

struct TensorEntry {
    section: String,
    name: String,
    shape: Vec<usize>,
    offset: usize,
    count: usize,
}

fn parse_manifest(
    text: &str,
) -> Result<(CheckpointMeta, Vec<TensorEntry>), CheckpointError> {
    let mut epoch = None;
    let mut opt_step = None;
    let mut best_loss = None;
    let mut entries = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let lineno = idx + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let bad = |detail: String| CheckpointError::Format { line: lineno, detail };
        let (key, value) = line
            .split_once(" = ")
            .ok_or_else(|| bad(format!("expected `key = value`, got {:?}", line)))?;
        match key {
            "format" => {
                if value != FORMAT_TAG {
                    return Err(bad(format!("unsupported format {:?}", value)));
                }
            }
            "dtype" => {
                if value != "f32" {
                    return Err(bad(format!("unsupported dtype {:?}", value)));
                }
            }
            "endian" => {
                if value != "little" {
                    return Err(bad(format!("unsupported endianness {:?}", value)));
                }
            }
            "epoch" => {
                epoch = Some(value.parse::<u64>().map_err(|e| bad(format!("epoch: {}", e)))?)
            }
            "opt_step" => {
                opt_step =
                    Some(value.parse::<u64>().map_err(|e| bad(format!("opt_step: {}", e)))?)
            }
            "best_loss_bits" => {
                let hex = value
                    .strip_prefix("0x")
                    .ok_or_else(|| bad(format!("best_loss_bits must be 0x-prefixed hex, got {:?}", value)))?;
                let bits = u64::from_str_radix(hex, 16)
                    .map_err(|e| bad(format!("best_loss_bits: {}", e)))?;
                best_loss = Some(f64::from_bits(bits));
            }
            "tensor" => {
                let fields: Vec<&str> = value.split_whitespace().collect();
                if fields.len() != 5 {
                    return Err(bad(format!(
                        "tensor line needs 5 fields (section name shape offset count), got {}",
                        fields.len()
                    )));
                }
                let shape: Vec<usize> = fields[2]
                    .split('x')
                    .map(|d| d.parse::<usize>())
                    .collect::<Result<_, _>>()
                    .map_err(|e| bad(format!("shape {:?}: {}", fields[2], e)))?;
                let offset = fields[3]
                    .parse::<usize>()
                    .map_err(|e| bad(format!("offset: {}", e)))?;
                let count = fields[4]
                    .parse::<usize>()
                    .map_err(|e| bad(format!("count: {}", e)))?;
                if numel(&shape) != count {
                    return Err(bad(format!(
                        "shape {:?} holds {} elements but count says {}",
                        shape,
                        numel(&shape),
                        count
                    )));
                }
                entries.push(TensorEntry {
                    section: fields[0].to_string(),
                    name: fields[1].to_string(),
                    shape,
                    offset,
                    count,
                });
            }
            other => {
                return Err(bad(format!("unknown key {:?}", other)));
            }
        }
    }
    let meta = CheckpointMeta {
        epoch: epoch.ok_or(CheckpointError::Layout { detail: "manifest is missing epoch".into() })?,
        opt_step: opt_step
            .ok_or(CheckpointError::Layout { detail: "manifest is missing opt_step".into() })?,
        best_loss: best_loss
            .ok_or(CheckpointError::Layout { detail: "manifest is missing best_loss_bits".into() })?,
    };
    Ok((meta, entries))
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint, CheckpointError> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let manifest = std::fs::read_to_string(&manifest_path).map_err(io_err(&manifest_path))?;
    let (meta, entries) = parse_manifest(&manifest)?;
    let tensors_path = dir.join(TENSORS_FILE);
    let blob = std::fs::read(&tensors_path).map_err(io_err(&tensors_path))?;
    let config_path = dir.join(CONFIG_FILE);
    let config_text = std::fs::read_to_string(&config_path).map_err(io_err(&config_path))?;

    let mut expected_offset = 0usize;
    let mut params = ModelParams::<f32>::new();
    let mut opt_m: IndexMap<String, Vec<f32>> = IndexMap::new();
    let mut opt_s: IndexMap<String, Vec<f32>> = IndexMap::new();
    for e in &entries {
        if e.offset != expected_offset {
            return Err(CheckpointError::Layout {
                detail: format!(
                    "{} {} starts at byte {} but the previous tensor ends at {}",
                    e.section, e.name, e.offset, expected_offset
                ),
            });
        }
        let bytes = e.count * 4;
        if e.offset + bytes > blob.len() {
            return Err(CheckpointError::Layout {
                detail: format!(
                    "{} {} needs bytes {}..{} but the blob holds {}",
                    e.section,
                    e.name,
                    e.offset,
                    e.offset + bytes,
                    blob.len()
                ),
            });
        }
        let mut data = Vec::with_capacity(e.count);
        for chunk in blob[e.offset..e.offset + bytes].chunks_exact(4) {
            data.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(CheckpointError::Layout {
                detail: format!("{} {} contains non-finite values", e.section, e.name),
            });
        }
        expected_offset += bytes;
        match e.section.as_str() {
            "param" => params.insert_param(&e.name, e.shape.clone(), data),
            "buffer" => params.insert_buffer(&e.name, e.shape.clone(), data),
            "opt_m" => {
                if opt_m.insert(e.name.clone(), data).is_some() {
                    return Err(CheckpointError::Layout {
                        detail: format!("duplicate opt_m tensor {}", e.name),
                    });
                }
            }
            "opt_s" => {
                if opt_s.insert(e.name.clone(), data).is_some() {
                    return Err(CheckpointError::Layout {
                        detail: format!("duplicate opt_s tensor {}", e.name),
                    });
                }
            }
            other => {
                return Err(CheckpointError::Layout {
                    detail: format!("unknown tensor section {:?}", other),
                });
            }
        }
    }
    if expected_offset != blob.len() {
        return Err(CheckpointError::Layout {
            detail: format!(
                "manifest accounts for {} bytes but the blob holds {}",
                expected_offset,
                blob.len()
            ),
        });
    }
    for name in params.params.keys() {
        let len = params.params[name].data.len();
        for (label, side) in [("opt_m", &opt_m), ("opt_s", &opt_s)] {
            match side.get(name) {
                None => {
                    return Err(CheckpointError::Layout {
                        detail: format!("parameter {} has no {} tensor", name, label),
                    })
                }
                Some(v) if v.len() != len => {
                    return Err(CheckpointError::Layout {
                        detail: format!(
                            "{} {} holds {} values but the parameter holds {}",
                            label,
                            name,
                            v.len(),
                            len
                        ),
                    })
                }
                _ => {}
            }
        }
    }
    Ok(Checkpoint {
        params,
        opt_m,
        opt_s,
        meta,
        config_text,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::networks::{init_params, DemodulatorConfig, ModulatorConfig};
    use crate::rng::{purpose, stream};
    use crate::tensor::optim::AdaBeliefConfig;

    fn sample_state() -> (ModelParams<f32>, OptimizerState<f32>, CheckpointMeta) {
        let mc = ModulatorConfig::new(8, 2).unwrap();
        let dc = DemodulatorConfig::new(8, 2).unwrap();
        let mut params = init_params::<f32>(&mc, &dc, &mut stream(1, purpose::INIT, 0, 0));
        // plant values that expose byte-level slips: a subnormal and a
        // negative zero survive only if bit patterns are preserved
        params.params["mod.embed"].data[0] = f32::from_bits(0x0000_0001);
        params.params["mod.embed"].data[1] = -0.0;
        let mut opt = OptimizerState::new(AdaBeliefConfig::default(), &params);
        opt.t = 17;
        opt.m.get_mut("mod.out.w").unwrap()[0] = 0.125;
        opt.s.get_mut("mod.out.w").unwrap()[0] = 3.0e-7;
        let meta = CheckpointMeta {
            epoch: 4,
            opt_step: 17,
            best_loss: 0.1 + 0.2,
        };
        (params, opt, meta)
    }

    fn temp_dir(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("specfill-checkpoint-tests").join(name);
        std::fs::remove_dir_all(&dir).ok();
        std::fs::create_dir_all(&dir).unwrap();
        dir
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let (params, opt, meta) = sample_state();
        let dir = temp_dir("roundtrip");
        save_checkpoint(&dir, &params, &opt, &meta, "config text here\n").unwrap();
        let back = load_checkpoint(&dir).unwrap();
        assert_eq!(back.meta, meta);
        assert_eq!(back.meta.best_loss.to_bits(), (0.1f64 + 0.2).to_bits());
        assert_eq!(back.config_text, "config text here\n");
        for (name, p) in &params.params {
            let q = &back.params.params[name];
            assert_eq!(p.shape, q.shape, "{}", name);
            let pb: Vec<u32> = p.data.iter().map(|x| x.to_bits()).collect();
            let qb: Vec<u32> = q.data.iter().map(|x| x.to_bits()).collect();
            assert_eq!(pb, qb, "{}", name);
        }
        for (name, b) in &params.buffers {
            assert_eq!(b.data, back.params.buffers[name].data, "{}", name);
        }
        assert_eq!(back.opt_m["mod.out.w"][0], 0.125);
        assert_eq!(back.opt_s["mod.out.w"][0], 3.0e-7);
        assert_eq!(
            back.params.params["mod.embed"].data[0].to_bits(),
            0x0000_0001
        );
        assert_eq!(back.params.params["mod.embed"].data[1].to_bits(), (-0.0f32).to_bits());
        // registration order survives, so later binding and saving agree
        let names: Vec<&String> = back.params.params.keys().collect();
        let orig: Vec<&String> = params.params.keys().collect();
        assert_eq!(names, orig);
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let (params, opt, meta) = sample_state();
        let first = temp_dir("first");
        save_checkpoint(&first, &params, &opt, &meta, "[train]\nseed = 3\n").unwrap();
        let loaded = load_checkpoint(&first).unwrap();
        let second = temp_dir("second");
        let opt2 = OptimizerState {
            config: AdaBeliefConfig::default(),
            m: loaded.opt_m.clone(),
            s: loaded.opt_s.clone(),
            t: loaded.meta.opt_step,
        };
        save_checkpoint(&second, &loaded.params, &opt2, &loaded.meta, &loaded.config_text).unwrap();
        for file in [MANIFEST_FILE, TENSORS_FILE, CONFIG_FILE] {
            let a = std::fs::read(first.join(file)).unwrap();
            let b = std::fs::read(second.join(file)).unwrap();
            assert_eq!(a, b, "{} differs", file);
        }
    }

    #[test]
    fn corrupt_checkpoints_are_rejected() {
        let (params, opt, meta) = sample_state();
        let dir = temp_dir("corrupt");
        save_checkpoint(&dir, &params, &opt, &meta, "c\n").unwrap();

        let manifest_path = dir.join(MANIFEST_FILE);
        let clean = std::fs::read_to_string(&manifest_path).unwrap();

        // count disagrees with shape
        let tampered = clean.replacen("tensor = param mod.embed 2x4 0 8", "tensor = param mod.embed 2x4 0 9", 1);
        assert_ne!(tampered, clean, "expected the embed line to be present");
        std::fs::write(&manifest_path, &tampered).unwrap();
        let err = load_checkpoint(&dir).unwrap_err();
        assert!(err.to_string().contains("count"), "{}", err);

        // unknown key
        std::fs::write(&manifest_path, format!("mystery = 1\n{}", clean)).unwrap();
        let err = load_checkpoint(&dir).unwrap_err();
        assert!(err.to_string().contains("unknown key"), "{}", err);

        // truncated blob
        std::fs::write(&manifest_path, &clean).unwrap();
        let tensors_path = dir.join(TENSORS_FILE);
        let blob = std::fs::read(&tensors_path).unwrap();
        std::fs::write(&tensors_path, &blob[..blob.len() - 4]).unwrap();
        let err = load_checkpoint(&dir).unwrap_err();
        assert!(err.to_string().contains("blob"), "{}", err);
        std::fs::write(&tensors_path, &blob).unwrap();

        // missing directory
        let missing = dir.join("nope");
        assert!(load_checkpoint(&missing).is_err());
    }
}
