//! Phrase-to-pixel grounding with multi-scale deformable attention.

pub mod aggregation;
pub mod autodiff;
pub mod cli;
pub mod cluster;
pub mod config;
pub mod deform;
pub mod dtf;
pub mod error;
pub mod featuremaps;
pub mod loss;
pub mod matching;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod store;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{RngState, Tensor};
