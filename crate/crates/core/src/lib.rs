//! Semantic patch memory banks for realistic image translation.
//!
//! Real photos are cut into multi-scale sliding-window patches, grouped by
//! semantic class into memory banks and indexed for approximate k-NN search.
//! A generated image is scored by the multi-scale contextual loss against
//! those banks, with an analytic pixel gradient that drives the pixel-space
//! optimizer in [`realify`]. FID and entropy metrics and the adversarial and
//! cycle objectives complete the evaluation toolkit.

pub mod ann;
pub mod bank;
pub mod cxloss;
pub mod error;
pub mod imaging;
pub mod metrics;
pub mod objectives;
pub mod persist;
pub mod realify;

pub use error::{Error, Result};
