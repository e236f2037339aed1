//! U2++ style unified streaming / non-streaming speech recognition.
//!
//! A shared encoder (Transformer or Conformer blocks over a convolutional
//! front end) feeds a CTC head and two attention decoders, one reading
//! label context from the left and one from the right. Training optimizes
//! a weighted sum of the CTC loss and both decoder losses; decoding runs a
//! frame-synchronous CTC prefix beam search and then rescores its n-best
//! list with both decoders.
//!
//! Everything is built on a small reverse-mode autodiff engine in
//! [`numerics`], so the whole stack can be checked against brute-force
//! oracles in double precision.

pub mod config;
pub mod decode;
pub mod error;
pub mod frontend;
pub mod loss;
pub mod model;
pub mod numerics;
pub mod train;
pub mod verify;

pub use error::{Error, Result};

/// Reserved CTC blank id. `sos` and `eos` are `vocab - 2` and `vocab - 1`.
pub const BLANK: usize = 0;

pub fn sos_id(vocab: usize) -> usize {
    vocab - 2
}

pub fn eos_id(vocab: usize) -> usize {
    vocab - 1
}

/// True when `id` is an ordinary label (not blank, sos or eos).
pub fn is_label(id: usize, vocab: usize) -> bool {
    id != BLANK && id < vocab.saturating_sub(2)
}
