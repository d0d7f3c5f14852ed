//! Benchmarking framework for adapting frozen vision-transformer feature
//! extractors to binary mitotic-figure patch classification.

pub mod adapt;
pub mod archive;
pub mod backbone;
pub mod bench;
pub mod error;
pub mod ingest;
pub mod metrics;
pub mod real;
pub mod seed;
pub mod splits;
pub mod train;

pub use error::{Error, Result};
pub use real::Real;

