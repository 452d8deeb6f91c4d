//! Preprocessing for multimodal ICU and emergency-department survival data:
//! raw CSV ingestion, hourly and windowed aggregation, survival labels,
//! static encodings, tensor assembly and on-disk artifacts.

pub mod artifacts;
pub mod config;
pub mod error;
pub mod ingest;
pub mod labels;
pub mod pipeline;
pub mod split;
pub mod staticfeat;
pub mod synthgen;
pub mod tensorize;
pub mod timeseries;

pub use config::{load_config, parse_config, Dataset, PipelineConfig};
pub use error::{Error, Result};
pub use pipeline::{run_pipeline, RunOptions, RunSummary, StageError};
