//! Class-incremental semantic segmentation on synthetic scenes with
//! decomposed knowledge distillation.

pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod numcore;
pub mod protocol;
pub mod report;
pub mod synthdata;

pub use error::{Error, Result};
