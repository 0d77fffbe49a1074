pub mod aggregation;
pub mod autodiff;
pub mod cli;
pub mod contrastive;
pub mod data;
pub mod encoders;
pub mod error;
pub mod fusion;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod training;

pub use error::{Error, Result};
