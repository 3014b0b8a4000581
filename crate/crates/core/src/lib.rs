pub mod corrupt;
pub mod error;
pub mod harness;
pub mod dataio;
pub mod metrics;
pub mod models;
pub mod pipeline;
pub mod stats;
pub mod trust;

pub use error::{Error, Result};
