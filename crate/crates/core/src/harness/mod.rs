//! Experiment orchestration: configuration, folds, augmentation, λ search
//! and the cross-validated ablation.

pub mod ablation;
pub mod augment;
pub mod config;
pub mod folds;
pub mod search;

pub use ablation::{
    case_metrics, run_ablation, AblationReport, CellStatus, Experiment, VariantRow, TABLE_METRICS,
};
pub use augment::{augment, augment_mask, AugmentSpec};
pub use config::{ExperimentConfig, PriorStage, SearchSpec, SEED_ENV};
pub use folds::{make_folds, Fold, FoldSplit};
pub use search::{search_lambda, SearchResult, Trial};
