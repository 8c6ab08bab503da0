//! Weakly-supervised segmentation by erasing: two cooperating Q-learning
//! agents erase superpixels inside an annotation box, replacing them with a
//! synthesized background, until a nodule classifier's tag flips. The
//! erased region is the segmentation.

pub mod agent;
pub mod classifier;
pub mod env;
pub mod error;
pub mod fill;
pub mod harness;
pub mod imaging;
pub mod metrics;
pub mod pipeline;
pub mod superpixel;

pub use error::{Error, Result};
