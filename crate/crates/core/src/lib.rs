//! Spectral filling toolkit.
//!
//! A fixed BPSK/QPSK modem carries message A; a learned modulator embeds a
//! second message B into the same IQ signal, and a learned demodulator
//! recovers it after an AWGN channel. The crate provides the tensor/autodiff
//! engine, the two networks, the training objectives and loop, evaluation
//! (BER sweeps, capacity, signal exports), and the experiment configuration
//! those pieces share. The `specfill` binary in the companion crate drives it
//! from the command line.

pub mod channel;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod eval;
pub mod gradcheck;
pub mod losses;
pub mod modem;
pub mod networks;
pub mod real;
pub mod rng;
pub mod tensor;
pub mod training;
