pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod features;
pub mod harness;
pub mod lm;
pub mod nn;
pub mod numcheck;
pub mod pipeline;
pub mod plots;
pub mod prompt;
pub mod vision;
pub mod vq;

pub use error::{Error, Result};
