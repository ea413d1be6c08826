//! Churn prediction from call detail records: ingestion, the feature tree,
//! labeling, feature selection, supervised learners and evaluation.

pub mod cdr;
pub mod error;
pub mod features;
pub mod labeling;
pub mod matrix;
pub mod metrics;
pub mod models;
pub mod selection;
pub mod simgen;
pub mod tree;

pub use cdr::{AlterClass, CdrRecord, DayRange, Direction, EventKind, RecordStore, StoreView, StudyWindow};
pub use error::{Error, ErrorCategory, Result};
pub use features::{compute_matrix, enumerate_features, AxesConfig, Feature, FeatureSpec};
pub use labeling::{compute_labels, split_windows, LabelSet};
pub use matrix::FeatureMatrix;
pub use models::{kfold_cv, threshold_baseline, train, ModelFamily, ModelSpec, Target, TrainedModel};
pub use selection::{FeatureRanking, ScoreKind};
pub use simgen::{generate, generate_store, SimConfig};
