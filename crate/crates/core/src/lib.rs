//! Multi-scale Vision-Transformer image tokenizer.
//!
//! The encoder maps an image to a single base grid of Gaussian latent tokens.
//! The decoder rebuilds a pyramid of token maps from that grid, attends over
//! the concatenated pyramid under a scale-aware mask and regresses RGB
//! patches at every scale.

pub mod error;
pub mod numerics;

pub use error::{Error, Result};
pub use numerics::{Real, Tensor};
pub mod pyramid;
pub mod attention;
pub mod objectives;
pub mod tokenizer;
pub mod latentlab;
pub mod checks;
