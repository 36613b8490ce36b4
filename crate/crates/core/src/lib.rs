//! Scale-inconsistency refinement for semi-supervised video object
//! segmentation.
//!
//! A small encoder-decoder segmenter is run on every frame at two input
//! scales. A learned pixel attention map fuses the two predictions, and the
//! per-pixel KL divergence between them (the variance map) both reweights
//! the offline training loss and guides self-supervised test-time
//! adaptation.

pub mod backbone;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod heatmap;
pub mod losses;
pub mod metrics;
pub mod pipeline;
pub mod tensor;

pub use error::{Error, Result};
