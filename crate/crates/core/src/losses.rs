//! Training objectives and their weighting.
//!
//! Message A has no learned decoder: the fixed modem slices components at
//! zero, so its objective treats each received component as a logit and asks
//! the sigmoid to agree with the clean carrier's sign. Components the clean
//! carrier leaves at exactly zero (the Q rail under BPSK) are masked out of
//! the mean; forcing them toward a sign would forbid precisely the freedom
//! the modulator is supposed to exploit.
//!
//! Message B is a plain mean BCE on the demodulator's logits. The optional
//! extras are a mean-squared pull of the learned signal toward the clean
//! carrier, and a symmetric nearest-neighbor loss between sampled signal
//! points and points drawn from a target constellation shape. A weight
//! schedule holds the carrier's loss at full strength for three epochs, then
//! ramps linearly down to an even split.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::modem::{QPSK_AMP_I, QPSK_AMP_Q};
use crate::real::Real;
use crate::tensor::{Graph, TensorError, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossMode {
    /// Weighted sum of the two message losses.
    Base,
    /// Splits the carrier weight evenly with a mean-squared anchor.
    MseAux,
    /// Adds a constellation-shape penalty scaled by beta.
    Shape,
}

impl LossMode {
    pub fn name(self) -> &'static str {
        match self {
            LossMode::Base => "base",
            LossMode::MseAux => "mse-aux",
            LossMode::Shape => "shape",
        }
    }
}

/// Target constellation distributions for the shape penalty.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TargetShape {
    /// The four unit-energy QPSK points blurred by per-component noise.
    QpskCloud { sigma: f64 },
    /// Axis-aligned ellipse traced uniformly in angle.
    Ellipse { a: f64, b: f64 },
    /// Annulus: uniform angle, radius uniform in [r - width/2, r + width/2].
    Ring { r: f64, width: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    pub mode: LossMode,
    /// Weight on the carrier loss when not driven by the schedule.
    pub alpha: f64,
    pub beta: f64,
    pub shape_target: Option<TargetShape>,
    pub shape_sample_n: usize,
    pub shape_sample_m: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            mode: LossMode::Base,
            alpha: 0.5,
            beta: 1.0,
            shape_target: None,
            shape_sample_n: 2500,
            shape_sample_m: 2500,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LossError {
    BadField { field: &'static str, detail: String },
    MissingPart { mode: &'static str, part: &'static str },
    Tensor(TensorError),
}

impl std::fmt::Display for LossError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LossError::BadField { field, detail } => write!(f, "loss.{}: {}", field, detail),
            LossError::MissingPart { mode, part } => {
                write!(f, "{} mode needs the {} part", mode, part)
            }
            LossError::Tensor(e) => write!(f, "{}", e),
        }
    }
}

impl std::error::Error for LossError {}

impl From<TensorError> for LossError {
    fn from(e: TensorError) -> Self {
        LossError::Tensor(e)
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        let bad = |field: &'static str, detail: String| Err(LossError::BadField { field, detail });
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad("alpha", format!("must be in [0, 1], got {}", self.alpha));
        }
        if !self.beta.is_finite() || self.beta < 0.0 {
            return bad("beta", format!("must be a finite value >= 0, got {}", self.beta));
        }
        if self.mode == LossMode::Shape {
            match self.shape_target {
                None => return bad("shape_target", "required in shape mode".into()),
                Some(TargetShape::QpskCloud { sigma }) if sigma < 0.0 => {
                    return bad("shape_target", format!("sigma must be >= 0, got {}", sigma))
                }
                Some(TargetShape::Ellipse { a, b }) if a <= 0.0 || b <= 0.0 => {
                    return bad("shape_target", format!("axes must be > 0, got {} and {}", a, b))
                }
                Some(TargetShape::Ring { r, width }) if r <= 0.0 || width < 0.0 => {
                    return bad(
                        "shape_target",
                        format!("need radius > 0 and width >= 0, got {} and {}", r, width),
                    )
                }
                _ => {}
            }
            if self.shape_sample_n == 0 {
                return bad("shape_sample_n", "must be >= 1".into());
            }
            if self.shape_sample_m == 0 {
                return bad("shape_sample_m", "must be >= 1".into());
            }
        }
        Ok(())
    }
}

/// Carrier-preservation loss: received components as logits, clean-carrier
/// signs as targets, exactly-zero clean components masked out.
///
/// `received` and `clean` share any shape whose elements pair up one to one
/// (training uses [batch, len, 2]).
pub fn loss_a<F: Real>(
    g: &mut Graph<F>,
    received: Var,
    clean: &[F],
) -> Result<Var, TensorError> {
    let n = crate::tensor::numel(g.shape(received));
    if n != clean.len() {
        return Err(TensorError::BadShape {
            op: "loss_a",
            detail: format!("{} received components vs {} clean components", n, clean.len()),
        });
    }
    let mut targets = Vec::with_capacity(n);
    let mut weights = Vec::with_capacity(n);
    for &c in clean {
        let c = c.as_f64();
        targets.push(if c > 0.0 { F::one() } else { F::zero() });
        weights.push(if c == 0.0 { F::zero() } else { F::one() });
    }
    g.bce_mean(received, &targets, &weights)
}

/// Mean BCE of demodulator logits against the bits of message B.
pub fn loss_b<F: Real>(g: &mut Graph<F>, logits: Var, msg_b: &[u8]) -> Result<Var, TensorError> {
    let n = crate::tensor::numel(g.shape(logits));
    if n != msg_b.len() {
        return Err(TensorError::BadShape {
            op: "loss_b",
            detail: format!("{} logits vs {} bits", n, msg_b.len()),
        });
    }
    let targets: Vec<F> = msg_b
        .iter()
        .map(|&b| if b == 0 { F::zero() } else { F::one() })
        .collect();
    let weights = vec![F::one(); n];
    g.bce_mean(logits, &targets, &weights)
}

/// Mean squared difference between the learned signal and the clean carrier,
/// over every component.
pub fn loss_mse<F: Real>(g: &mut Graph<F>, iq_ab: Var, clean: &[F]) -> Result<Var, TensorError> {
    let shape = g.shape(iq_ab).to_vec();
    if crate::tensor::numel(&shape) != clean.len() {
        return Err(TensorError::BadShape {
            op: "loss_mse",
            detail: format!(
                "{} signal components vs {} reference components",
                crate::tensor::numel(&shape),
                clean.len()
            ),
        });
    }
    let reference = g.constant(clean.to_vec(), shape)?;
    let diff = g.sub(iq_ab, reference)?;
    let sq = g.mul(diff, diff)?;
    g.mean_all(sq)
}

/// Symmetric nearest-neighbor loss between signal points [n, 2] and a constant
/// target point set (interleaved pairs). Both directions are averaged, so
/// signal points clustering on a single target mode score strictly worse than
/// points covering every mode.
pub fn loss_shape<F: Real>(g: &mut Graph<F>, points: Var, target: &[F]) -> Result<Var, TensorError> {
    g.chamfer(points, target)
}

/// Draw `n` signal points for the shape penalty: the [batch, len, 2] signal is
/// viewed as batch*len IQ points and sampled uniformly without replacement.
/// Asking for more points than exist yields all of them.
pub fn sample_signal_points<F: Real>(
    g: &mut Graph<F>,
    iq_ab: Var,
    n: usize,
    rng: &mut impl Rng,
) -> Result<Var, TensorError> {
    let shape = g.shape(iq_ab).to_vec();
    if shape.len() != 3 || shape[2] != 2 {
        return Err(TensorError::BadShape {
            op: "sample_signal_points",
            detail: format!("expected [batch, len, 2], got {:?}", shape),
        });
    }
    let total = shape[0] * shape[1];
    let flat = g.reshape(iq_ab, vec![total, 2])?;
    let take = n.min(total);
    let mut idx: Vec<usize> = (0..total).collect();
    for i in 0..take {
        let j = rng.gen_range(i..total);
        idx.swap(i, j);
    }
    idx.truncate(take);
    g.gather_rows(flat, &idx)
}

/// Draw `m` points from a target constellation shape, interleaved pairs.
pub fn sample_target<F: Real>(shape: &TargetShape, m: usize, rng: &mut impl Rng) -> Vec<F> {
    let mut out = Vec::with_capacity(2 * m);
    let tau = 2.0 * std::f64::consts::PI;
    for _ in 0..m {
        let (i, q) = match *shape {
            TargetShape::QpskCloud { sigma } => {
                let corner = rng.gen_range(0..4u8);
                let i = if corner & 2 == 0 { QPSK_AMP_I } else { -QPSK_AMP_I };
                let q = if corner & 1 == 0 { QPSK_AMP_Q } else { -QPSK_AMP_Q };
                let ni: f64 = StandardNormal.sample(rng);
                let nq: f64 = StandardNormal.sample(rng);
                (i + sigma * ni, q + sigma * nq)
            }
            TargetShape::Ellipse { a, b } => {
                let theta = rng.gen_range(0.0..tau);
                (a * theta.cos(), b * theta.sin())
            }
            TargetShape::Ring { r, width } => {
                let theta = rng.gen_range(0.0..tau);
                let rho = if width == 0.0 {
                    r
                } else {
                    rng.gen_range(r - width / 2.0..r + width / 2.0)
                };
                (rho * theta.cos(), rho * theta.sin())
            }
        };
        out.push(F::from_f64(i));
        out.push(F::from_f64(q));
    }
    out
}

/// The scalar loss nodes entering the weighted total.
#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub loss_a: Var,
    pub loss_b: Var,
    pub loss_mse: Option<Var>,
    pub loss_shape: Option<Var>,
}

/// Weighted total for the configured mode. `alpha` is passed explicitly
/// because training drives it from the epoch schedule; evaluation passes the
/// config's fixed value.
pub fn combined_loss<F: Real>(
    g: &mut Graph<F>,
    parts: &LossParts,
    config: &LossConfig,
    alpha: f64,
) -> Result<Var, LossError> {
    let a = F::from_f64(alpha);
    let one_minus = F::from_f64(1.0 - alpha);
    let half_a = F::from_f64(alpha / 2.0);
    let total = match config.mode {
        LossMode::Base => {
            let wa = g.scale(parts.loss_a, a)?;
            let wb = g.scale(parts.loss_b, one_minus)?;
            g.add(wa, wb)?
        }
        LossMode::MseAux => {
            let mse = parts.loss_mse.ok_or(LossError::MissingPart {
                mode: "mse-aux",
                part: "loss_mse",
            })?;
            let wa = g.scale(parts.loss_a, half_a)?;
            let wb = g.scale(parts.loss_b, one_minus)?;
            let wm = g.scale(mse, half_a)?;
            let s = g.add(wa, wb)?;
            g.add(s, wm)?
        }
        LossMode::Shape => {
            let shape = parts.loss_shape.ok_or(LossError::MissingPart {
                mode: "shape",
                part: "loss_shape",
            })?;
            let wa = g.scale(parts.loss_a, a)?;
            let wb = g.scale(parts.loss_b, one_minus)?;
            let ws = g.scale(shape, F::from_f64(config.beta))?;
            let s = g.add(wa, wb)?;
            g.add(s, ws)?
        }
    };
    Ok(total)
}

/// Carrier-loss weight by epoch: 1 for the first three epochs, then down
/// 0.01 per epoch to a floor of 0.5.
pub fn alpha_schedule(epoch: u64) -> f64 {
    if epoch < 3 {
        1.0
    } else {
        (1.0 - 0.01 * (epoch - 3) as f64).max(0.5)
    }
}
