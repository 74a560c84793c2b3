//! Benchmark protocol harness: synthetic and ingested dataset pairs,
//! filters and split policies, experiment orchestration with always-on
//! source-only baselines, and flat result tables.

pub mod config;
pub mod error;
pub mod manifest;
pub mod results;
pub mod run;
pub mod synth;

pub use config::{Algorithm, DataSource, ExperimentConfig, LrSchedule, Modality};
pub use error::{HarnessError, Result};
pub use manifest::{apply_filters, ingest, make_splits, DatasetManifest, ManifestRecord, SplitPolicy};
pub use results::{ResultRow, ResultTable};
pub use run::{distance_sweep, prepare, run_experiment, train_algorithm, PreparedData, TrainedModel};
pub use synth::{synth_shift_dataset, SynthKind, SynthPair, SynthParams};
