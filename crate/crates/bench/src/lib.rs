//! Instance generators and experiment protocols for tensor-train completion
//! benchmarks.

pub mod experiments;
pub mod generators;
pub mod report;
pub mod sampling;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error(transparent)]
    Core(#[from] ttq::Error),
    #[error("invalid experiment: {0}")]
    Spec(String),
    #[error("generated tensor has condition number {found}, expected {expected}")]
    Conditioning { expected: f64, found: f64 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, BenchError>;
