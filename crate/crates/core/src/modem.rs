//! Fixed BPSK and QPSK modem for message A, one IQ sample per symbol.
//!
//! Mapping conventions (any consistent choice works; these are frozen for
//! reproducibility): BPSK sends bit 0 as +1 and bit 1 as -1 on I with Q = 0.
//! QPSK Gray-maps each bit pair (b_i, b_q) to (sign(b_i), sign(b_q)) scaled to
//! unit symbol energy, first bit on I, so the I and Q slicers are independent.
//! Slicers tie-break the boundary 0 to bit 0, which is measure-zero under
//! noise but keeps demodulation total and deterministic.

/// One bit per entry, values 0 or 1.
pub type Bits = Vec<u8>;

/// Baseband IQ signal, one (i, q) pair per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct IqSignal {
    pub i: Vec<f64>,
    pub q: Vec<f64>,
}

impl IqSignal {
    pub fn new(i: Vec<f64>, q: Vec<f64>) -> Self {
        assert_eq!(i.len(), q.len(), "I and Q lengths differ");
        IqSignal { i, q }
    }

    pub fn len(&self) -> usize {
        self.i.len()
    }

    pub fn is_empty(&self) -> bool {
        self.i.is_empty()
    }

    /// Mean per-symbol energy, accumulated in f64.
    pub fn mean_energy(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        let sum: f64 = self
            .i
            .iter()
            .zip(&self.q)
            .map(|(&i, &q)| i * i + q * q)
            .sum();
        sum / self.len() as f64
    }
}

/// QPSK component amplitudes. No single f64 squares to exactly 0.5 (the
/// rounding window around 1/sqrt(2) skips it), so the two adjacent roundings
/// are paired: AMP_I * AMP_I + AMP_Q * AMP_Q == 1.0 exactly, keeping measured
/// symbol energy bit-for-bit equal to 1. The 1-ulp I/Q asymmetry is far below
/// any noise level and invisible to the sign-based slicers.
pub const QPSK_AMP_I: f64 = f64::from_bits(0x3fe6a09e667f3bcd);
pub const QPSK_AMP_Q: f64 = f64::from_bits(0x3fe6a09e667f3bcc);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModulationKind {
    Bpsk,
    Qpsk,
}

impl ModulationKind {
    pub fn bits_per_symbol(self) -> usize {
        match self {
            ModulationKind::Bpsk => 1,
            ModulationKind::Qpsk => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ModulationKind::Bpsk => "bpsk",
            ModulationKind::Qpsk => "qpsk",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ModemError {
    /// QPSK needs an even bit count.
    OddBitCount { bits: usize },
    EmptyMessage,
    /// Bits must be 0 or 1.
    BadBitValue { index: usize, value: u8 },
}

impl std::fmt::Display for ModemError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ModemError::OddBitCount { bits } => {
                write!(f, "QPSK requires an even bit count, got {}", bits)
            }
            ModemError::EmptyMessage => write!(f, "message must contain at least one bit"),
            ModemError::BadBitValue { index, value } => {
                write!(f, "bit {} has value {}, expected 0 or 1", index, value)
            }
        }
    }
}

impl std::error::Error for ModemError {}

fn check_bits(bits: &[u8]) -> Result<(), ModemError> {
    if bits.is_empty() {
        return Err(ModemError::EmptyMessage);
    }
    for (index, &value) in bits.iter().enumerate() {
        if value > 1 {
            return Err(ModemError::BadBitValue { index, value });
        }
    }
    Ok(())
}

/// Map bits to an IQ signal with unit symbol energy, 1 sample per symbol.
pub fn modulate(bits: &[u8], kind: ModulationKind) -> Result<IqSignal, ModemError> {
    check_bits(bits)?;
    match kind {
        ModulationKind::Bpsk => {
            let i: Vec<f64> = bits.iter().map(|&b| if b == 0 { 1.0 } else { -1.0 }).collect();
            let q = vec![0.0; bits.len()];
            Ok(IqSignal::new(i, q))
        }
        ModulationKind::Qpsk => {
            if bits.len() % 2 != 0 {
                return Err(ModemError::OddBitCount { bits: bits.len() });
            }
            let n = bits.len() / 2;
            let mut i = Vec::with_capacity(n);
            let mut q = Vec::with_capacity(n);
            for pair in bits.chunks_exact(2) {
                i.push(if pair[0] == 0 { QPSK_AMP_I } else { -QPSK_AMP_I });
                q.push(if pair[1] == 0 { QPSK_AMP_Q } else { -QPSK_AMP_Q });
            }
            Ok(IqSignal::new(i, q))
        }
    }
}

/// Slice a component to a bit; the boundary 0 goes to bit 0.
#[inline]
pub fn slice_bit(x: f64) -> u8 {
    if x >= 0.0 {
        0
    } else {
        1
    }
}

/// Hard-decision demodulation. Total: any finite signal slices to bits.
pub fn demodulate(signal: &IqSignal, kind: ModulationKind) -> Bits {
    match kind {
        ModulationKind::Bpsk => signal.i.iter().map(|&x| slice_bit(x)).collect(),
        ModulationKind::Qpsk => {
            let mut bits = Vec::with_capacity(2 * signal.len());
            for (&i, &q) in signal.i.iter().zip(&signal.q) {
                bits.push(slice_bit(i));
                bits.push(slice_bit(q));
            }
            bits
        }
    }
}

/// Ground-truth constellation label per sample: the BPSK bit, or the QPSK
/// index 2 * b_i + b_q, for coloring constellation exports.
pub fn symbol_labels(bits: &[u8], kind: ModulationKind) -> Vec<u8> {
    match kind {
        ModulationKind::Bpsk => bits.to_vec(),
        ModulationKind::Qpsk => bits.chunks_exact(2).map(|p| 2 * p[0] + p[1]).collect(),
    }
}
