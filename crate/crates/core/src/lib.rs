//! Concurrent multi-label sequence recognition with tri-axial self-attention.
//!
//! The pipeline turns a `[T, W, H, C']` feature map into per-activity logits
//! in four stages: soft-assignment residual clustering, learned per-activity
//! spatial attention, per-activity temporal self-attention with directional
//! masks, and an association-mask-aware decoder over the activity axis.
//! Everything runs in deterministic f64 on a single core; every layer ships
//! with a hand-written backward pass checked against central differences.

// Index-style loops mirror the tensor layouts; negated comparisons like
// `!(x > 0.0)` deliberately treat NaN as out of range.
#![allow(clippy::needless_range_loop)]
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod activity_attention;
pub mod config;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod macc;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod optim;
pub mod synth;
pub mod tensor;
pub(crate) mod textio;
pub mod train;
pub mod vlad;

pub use error::{Error, Result};
pub use tensor::Tensor;

/// Seeded RNG used everywhere randomness is needed; fixed so that identical
/// seeds reproduce identical runs on any platform.
pub type SeededRng = rand_chacha::ChaCha12Rng;
