//! Weakly-supervised video task/action classification, from scratch in f64.
//!
//! The model is a single-layer GRU over per-frame features followed by an
//! action attention layer (one temporal attention distribution per action),
//! attention-weighted pooling into per-action features, and a recipe
//! attention head that turns those into a video-level recipe prediction.
//! Training uses only video-level labels (recipe id + action set); frame
//! labels are touched by evaluation code alone.
//!
//! Everything here is `no_std` + `alloc`: pure value-semantics compute with
//! no IO. File formats, plotting and the CLI live in the companion `watn`
//! crate. All transcendentals go through `libm` so results are bit-identical
//! across platforms and build profiles.
//!
//! Module map:
//! - [`tensor`]: dense row-major `Matrix`, stable softmax, finite-difference
//!   gradient checking.
//! - [`net`]: the GRU/attention model, its losses (recipe cross-entropy,
//!   action-presence BCE, attention diversity penalty) and the hand-written
//!   backward pass.
//! - [`optim`]: SGD/Adam with L2 weight decay, deterministic batching, the
//!   training loop and best-checkpoint retention.
//! - [`align`]: transcript-constrained Viterbi alignment and the framewise
//!   cross-entropy baseline.
//! - [`metrics`]: recipe/frame accuracy, macro action F1 and the
//!   attention-quality score.
//! - [`data`]: dataset model, deterministic synthetic generator and
//!   stratified splitting.

#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod align;
pub mod data;
pub mod metrics;
pub mod net;
pub mod optim;
pub mod tensor;

/// Frame-level / transcript action class id. Id 0 is the background class.
pub type ActionId = u16;

/// Video-level task (recipe) class id.
pub type RecipeId = u16;
