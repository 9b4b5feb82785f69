//! Deterministic random streams.
//!
//! Every source of randomness in the toolkit is a ChaCha8 stream addressed by
//! (seed, purpose, a, b). Purposes keep unrelated draws independent; the two
//! index words key per-epoch and per-example streams. Because the address is
//! reconstructible from loop counters, a resumed run replays the exact noise
//! and shuffle sequences of an uninterrupted one without serializing RNG state.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream purposes. Values are part of the reproducibility contract: changing
/// them changes every seeded run.
pub mod purpose {
    /// Parameter initialization.
    pub const INIT: u64 = 1;
    /// Dataset synthesis (message bits).
    pub const DATA: u64 = 2;
    /// Per-epoch shuffle of the train split, keyed (epoch, 0).
    pub const SHUFFLE: u64 = 3;
    /// Training-time channel noise and SNR draws, keyed (epoch, example).
    pub const NOISE: u64 = 4;
    /// Epoch-metric eval pass noise and SNR draws, keyed (epoch, example).
    pub const EVAL: u64 = 5;
    /// BER sweep noise, keyed (sweep point, pass * dataset + example).
    pub const SWEEP: u64 = 6;
    /// Shape-loss point sampling during training, keyed (epoch, first
    /// dataset index of the batch).
    pub const SHAPE: u64 = 7;
    /// Shape-loss point sampling during eval passes, keyed like SHAPE.
    pub const EVAL_SHAPE: u64 = 8;
    /// Fixed-modem reference link Monte Carlo (message bits then noise),
    /// keyed (sweep point, frame).
    pub const BASELINE: u64 = 9;
}

const INDEX_BITS: u32 = 28;
const INDEX_MAX: u64 = (1 << INDEX_BITS) - 1;

/// Stream for (seed, purpose, a, b). Indices are packed into the 64-bit
/// ChaCha stream id as purpose:8 | a:28 | b:28, so distinct addresses are
/// distinct streams by construction.
pub fn stream(seed: u64, purpose: u64, a: u64, b: u64) -> ChaCha8Rng {
    assert!(purpose < 1 << 8, "purpose {} out of range", purpose);
    assert!(a <= INDEX_MAX, "stream index a={} exceeds {} bits", a, INDEX_BITS);
    assert!(b <= INDEX_MAX, "stream index b={} exceeds {} bits", b, INDEX_BITS);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((purpose << (2 * INDEX_BITS)) | (a << INDEX_BITS) | b);
    rng
}
