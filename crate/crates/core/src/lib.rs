//! Fruit video segmentation from three cooperating models: a supervised
//! encoder-decoder over single frames, a cycle-consistency tracker trained on
//! unlabelled clips that propagates a first-frame mask through a video, and
//! a self-attention network that fuses both predictions.

// `!(x > 0.0)` checks are deliberate: they reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cycletrack;
pub mod error;
pub mod fusion;
pub mod image;
pub mod metrics;
pub mod parallel;
pub mod segnet;
pub mod synthdata;
pub mod tensor;

pub use error::{Error, Result};
