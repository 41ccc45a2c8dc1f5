//! Synthetic sequences, sequence bundles on disk, pipeline configuration and
//! the stage runner behind the `sio` command-line tool.

pub mod bundle;
pub mod config;
pub mod error;
pub mod pipeline;
pub mod sim;

pub use bundle::{export, ingest, SequenceBundle};
pub use config::PipelineConfig;
pub use error::{AppError, Result};
pub use pipeline::{run_pipeline, Metrics, Stage};
pub use sim::{simulate, SimConfig};
