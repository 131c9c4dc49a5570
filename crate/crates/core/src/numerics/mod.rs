//! Dense `f64` tensors, a reverse-mode tape, Adam, seeded RNG and the
//! tensor container format.

pub mod adam;
pub mod checkpoint;
mod rng;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{load_tensors, save_tensors};
pub use rng::{derive_seed, Rng};
pub use tape::{Gradients, Tape, Var, NEG_LARGE};
pub use tensor::Tensor;
