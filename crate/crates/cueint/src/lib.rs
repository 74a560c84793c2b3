//! High-level cue integration: extract penultimate-layer features from the
//! per-modality adapted networks, concatenate them per sample, train a
//! linear SVM on source features and test it on target features.

pub mod error;
pub mod features;
pub mod pipeline;
pub mod svm;

pub use error::{CueError, Result};
pub use features::{concat_cues, extract_features, filter_null_pairs, Cue, FeatureSet};
pub use pipeline::{rgbd_pipeline, CueArtifacts, RgbdOutcome};
pub use svm::{svm_objective, svm_predict, svm_train, SvmConfig, SvmModel};
