//! Prompt-tuned knowledge distillation for small autoregressive language
//! models.
//!
//! The crate is layered bottom-up:
//!
//! - [`tensor`]: reverse-mode autodiff over dense `f64` tensors, with
//!   [`gradcheck`] as its finite-difference oracle and [`optim`] for AdamW.
//! - [`model`]: a decoder-only transformer with soft-prompt prepending.
//! - [`data`]: character vocabulary, the instruction template, synthetic tasks.
//! - [`sampler`]: temperature / top-k / top-p decoding without gradients.
//! - [`distill`]: the KL objectives, the prompt/student step, and baselines.
//! - [`eval`]: ROUGE-L, the exposure-bias meter, and the prompted-teacher probe.
//! - [`checkpoint`]: versioned binary checkpoints.

pub mod checkpoint;
pub mod data;
pub mod distill;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod model;
pub mod optim;
pub mod sampler;
pub mod tensor;

pub use error::{Error, Result};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// An independent random stream keyed by `(seed, stream)`.
pub fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
