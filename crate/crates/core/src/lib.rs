//! Dual-stream contrastive learning for weakly-supervised semantic
//! segmentation, at desk scale.

pub mod cam;
pub mod contrastive;
pub mod data;
pub mod error;
pub mod eval;
pub mod grouping;
pub mod pipeline;
pub mod tensor;

pub use error::{Error, Result};
