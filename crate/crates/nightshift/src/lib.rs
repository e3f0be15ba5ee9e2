//! Instance-aware unpaired image-to-image translation at desk scale:
//! a content/style encoder pair, a token transformer that mixes grid and
//! per-object tokens under style-conditioned normalization, a PatchGAN
//! discriminator, contrastive and reconstruction objectives, and a
//! deterministic trainer — all on a small f64 reverse-mode tensor engine.

pub mod aggregator;
pub mod backbone;
pub mod data;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod tensor;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::{grad_check, numeric_grad, primitive_forward, GradMap, Op, PadMode, Tape, Tensor};
