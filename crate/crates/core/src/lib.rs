//! Desk-scale generative audio codec.
//!
//! The pipeline has two learned stages over a synthetic labeled corpus:
//! a semantic vector-quantized bottleneck (`stage1`) whose discrete tokens
//! are the only data transmitted, and a conditional rectified-flow decoder
//! (`stage2`) that regenerates feature frames from those tokens. Around
//! them sit the corpus/feature front-end (`signal`), a bit-exact wire
//! format (`codec`), self-contained quality metrics (`evalkit`), and the
//! capacity-law experiment harness (`ic1`).

pub mod codec;
pub mod config;
pub mod crc;
pub mod error;
pub mod evalkit;
pub mod ic1;
pub mod signal;
pub mod stage1;
pub mod stage2;
pub mod tensorkit;

pub use error::{Error, Result};
