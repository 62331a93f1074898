//! Zero-shot classification with attribute prototypes and contrastive
//! attribute-feature training.

pub mod backbone;
pub mod config;
pub mod datamodel;
pub mod error;
pub mod eval;
pub mod export;
pub mod losses;
pub mod model;
pub mod ops;
pub mod parallel;
pub mod params;
pub mod prototype;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
