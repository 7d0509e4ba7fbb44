//! Minimal dense-math and learning substrate: row-major matrices, MLPs with
//! hand-derived reverse-mode gradients, Adam, deterministic splittable PRNG
//! streams, finite-difference gradient verification, and the checkpoint file
//! format. Everything is f64; there is no autodiff graph.

mod adam;
mod checkpoint;
mod gradcheck;
mod mat;
mod mlp;
mod rng;

pub use adam::{adam_step, AdamState};
pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint};
pub use gradcheck::finite_diff_check;
pub use mat::Mat;
pub use mlp::{mlp_backward, mlp_forward, Activation, ForwardCache, GradBundle, Layer, MlpParams};
pub use rng::Rng;
