//! memprobe-core: diagnostics that separate how much a small neural network
//! has *learned* (label structure) from how much it has *memorized*
//! (background structure) over the course of training.
//!
//! The pipeline trains a network as usual, extracts last hidden-layer
//! features at a grid of epochs, perturbs the training images into
//! shared-structure validation sets by shuffling a fraction of pixels per
//! image, and compares a shallow classifier fit on the real labels against a
//! permutation null of the same classifier fit on shuffled labels. Where the
//! null sits relative to the random-guess baseline measures memorization;
//! where the observed score sits relative to the null measures learning.

pub mod data;
pub mod diagnosis;
pub mod error;
pub mod forest;
pub mod nn;
pub mod permnull;
pub mod perturb;
pub mod report;
pub mod runner;
pub mod seed;

pub use data::{
    gaussian_noise_like, make_validation_split, parse_idx, select_binary_subset, serialize_idx,
    DataSource, DatasetPair, ImageDataset,
};
pub use diagnosis::{classify_outcome, compare_runs, ComparisonTable, DiagnosisOutcome, Verdict};
pub use error::{Error, Result};
pub use forest::{
    accuracy, fit_forest, predict, DecisionTree, FeatureMatrix, FeatureSource, Forest,
    ForestParams,
};
pub use nn::{
    extract_features, forward, init_network, loss_and_gradients, preset, train, Activation,
    LayerSpec, Mode, NetworkSpec, OptimizerKind, OptimizerSpec, TrainedNetwork, Value,
};
pub use permnull::{
    baseline_guess, empirical_p_value, observed_score, permutation_null, NullDistribution,
};
pub use perturb::{make_s_validation, standard_fraction_suite, SValidationSet};
pub use runner::{
    build_dataset, default_epoch_grid, load_config, log_epoch_grid, resume, run_cells,
    run_experiment, CellResult, CellSeeds, DatasetConfig, ExperimentConfig, Store,
};
pub use seed::derive_seed;
