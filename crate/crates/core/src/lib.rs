pub mod config;
pub mod data;
pub mod error;
pub mod inference;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod training;
pub mod volumetry;

pub use error::{ConfigError, Error, FormatError, Result};
