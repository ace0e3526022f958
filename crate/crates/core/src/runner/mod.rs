//! End-to-end experiment orchestration.
//!
//! One run: build the dataset and its validation split, generate one
//! s-validation set per fraction, train the network once with checkpoints
//! over the epoch grid, then probe every checkpoint. Per checkpoint a single
//! forest fit on the real labels supplies the observed score for every
//! s-validation set plus the validation sanity accuracy, and B shuffled-label
//! fits supply the permutation nulls (each permutation's forest predicts all
//! s-validation sets, so every cell's null matches per-cell generation with
//! the same sub-seeds).
//!
//! All randomness derives from `master_seed` through labeled sub-streams
//! (dataset, split, s-validation, init, training, per-epoch forests), and the
//! store persists checkpoints, s-validation sets and cells as they are
//! produced, so an interrupted run resumes without recomputation and two runs
//! of one config agree bit for bit.

mod config;
mod store;

pub use config::{load_config, DatasetConfig, ExperimentConfig};
pub use store::Store;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{
    concat_datasets, gaussian_noise_like, load_idx_pair, make_validation_split,
    select_binary_subset, DatasetPair,
};
use crate::diagnosis::{classify_outcome, DiagnosisOutcome, RunCells};
use crate::error::{Error, Result};
use crate::forest::{accuracy, fit_forest, predict, FeatureMatrix, FeatureSource, ForestParams};
use crate::nn::{extract_features, init_network, train, TrainedNetwork};
use crate::permnull::{permutation_null_multi, baseline_guess, NullDistribution};
use crate::perturb::make_s_validation;
use crate::seed::derive_seed;

/// The exact sub-seeds a cell was computed from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellSeeds {
    pub dataset: u64,
    pub svalidation: u64,
    pub network_init: u64,
    pub train: u64,
    /// Seed of the real-label forest shared by this epoch's cells.
    pub observed_forest: u64,
    /// Master seed of this epoch's permutation streams.
    pub null_master: u64,
}

/// One (epoch, fraction) probe result.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellResult {
    pub run_label: String,
    pub epoch: usize,
    pub fraction: f64,
    pub null: NullDistribution,
    pub diagnosis: DiagnosisOutcome,
    /// Real-label forest accuracy on validation features (sanity curve);
    /// fraction-independent, repeated on each of the epoch's rows.
    pub validation_accuracy: f64,
    /// Accuracy of the network's own output head on the training set.
    pub dnn_train_accuracy: f64,
    pub seeds: CellSeeds,
}

/// ~`points` log-spaced unique integers from 1 to `epochs` inclusive.
pub fn log_epoch_grid(epochs: usize, points: usize) -> Vec<usize> {
    if epochs <= 1 || points <= 1 {
        return vec![epochs.max(1)];
    }
    let ln_max = (epochs as f64).ln();
    let mut grid: Vec<usize> = (0..points)
        .map(|i| {
            let t = ln_max * i as f64 / (points - 1) as f64;
            (t.exp().round() as usize).clamp(1, epochs)
        })
        .collect();
    grid[0] = 1;
    *grid.last_mut().unwrap() = epochs;
    grid.dedup();
    grid
}

/// The default probe grid: about 20 log-spaced checkpoints.
pub fn default_epoch_grid(epochs: usize) -> Vec<usize> {
    log_epoch_grid(epochs, 20)
}

struct SeedPlan {
    dataset: u64,
    split: u64,
    noise_train: u64,
    noise_val: u64,
    init: u64,
    train: u64,
}

impl SeedPlan {
    fn new(master: u64) -> Self {
        SeedPlan {
            dataset: derive_seed(master, "dataset", 0),
            split: derive_seed(master, "val-split", 0),
            noise_train: derive_seed(master, "noise-train", 0),
            noise_val: derive_seed(master, "noise-val", 0),
            init: derive_seed(master, "net-init", 0),
            train: derive_seed(master, "train", 0),
        }
    }

    fn sval(master: u64, fraction_index: usize) -> u64 {
        derive_seed(master, "svalidation", fraction_index as u64)
    }

    fn real_forest(master: u64, epoch: usize) -> u64 {
        derive_seed(master, "real-forest", epoch as u64)
    }

    fn null_master(master: u64, epoch: usize) -> u64 {
        derive_seed(master, "null", epoch as u64)
    }
}

fn idx_file(dir: &Path, stem: &str) -> Result<std::path::PathBuf> {
    let gz = dir.join(format!("{stem}.gz"));
    if gz.exists() {
        return Ok(gz);
    }
    let plain = dir.join(stem);
    if plain.exists() {
        return Ok(plain);
    }
    Err(Error::io(
        dir.join(stem),
        std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("missing {stem}[.gz] in {}", dir.display()),
        ),
    ))
}

/// Build the train/validation pair for a config, deterministically.
pub fn build_dataset(config: &ExperimentConfig) -> Result<DatasetPair> {
    let seeds = SeedPlan::new(config.master_seed);
    let (class_a, class_b, per_class, val_size) = config.dataset.fields();
    let dir = config.dataset.data_dir();

    let (train_images, train_labels) = load_idx_pair(
        &idx_file(dir, "train-images-idx3-ubyte")?,
        &idx_file(dir, "train-labels-idx1-ubyte")?,
    )?;
    let (test_images, test_labels) = load_idx_pair(
        &idx_file(dir, "t10k-images-idx3-ubyte")?,
        &idx_file(dir, "t10k-labels-idx1-ubyte")?,
    )?;

    let train_ds = select_binary_subset(
        &train_images,
        &train_labels,
        class_a,
        class_b,
        per_class,
        seeds.dataset,
    )?;
    // The held-out pool: the balanced maximum of the official test split.
    let pool_per_class = [class_a, class_b]
        .iter()
        .map(|c| test_labels.iter().filter(|&&l| l == *c).count())
        .min()
        .unwrap_or(0);
    if pool_per_class == 0 {
        return Err(Error::InsufficientSamples {
            needed: 1,
            available: 0,
            context: "held-out validation pool".into(),
        });
    }
    let pool_ds = select_binary_subset(
        &test_images,
        &test_labels,
        class_a,
        class_b,
        pool_per_class,
        derive_seed(config.master_seed, "val-pool", 0),
    )?;

    let full = concat_datasets(&train_ds, &pool_ds)?;
    let train_indices: Vec<usize> = (0..train_ds.len()).collect();
    let mut pair = make_validation_split(&full, &train_indices, val_size, seeds.split)?;

    if config.dataset.is_noise() {
        pair.train = gaussian_noise_like(&pair.train, seeds.noise_train)?;
        pair.validation = gaussian_noise_like(&pair.validation, seeds.noise_val)?;
    }
    Ok(pair)
}

/// Run an experiment end to end, reusing whatever the store already holds.
pub fn run_experiment(config: &ExperimentConfig) -> Result<Vec<CellResult>> {
    config.validate()?;
    let store = Store::create(config)?;
    execute(&store, config)
}

/// Recompute only what is missing from an existing run directory.
pub fn resume(output_dir: &Path) -> Result<Vec<CellResult>> {
    let (store, config) = Store::open(output_dir)?;
    execute(&store, &config)
}

fn execute(store: &Store, config: &ExperimentConfig) -> Result<Vec<CellResult>> {
    // Fast path: everything already on disk.
    if let Some(cells) = store.read_all_cells(&config.epoch_grid, &config.fractions)? {
        return Ok(cells);
    }

    let seeds = SeedPlan::new(config.master_seed);
    let pair = build_dataset(config)?;

    // s-validation sets: load persisted copies, generate what is missing.
    let mut svals = Vec::with_capacity(config.fractions.len());
    for (j, &fraction) in config.fractions.iter().enumerate() {
        let sval = match store.read_sval(fraction)? {
            Some(s) => s,
            None => {
                let s = make_s_validation(
                    &pair.train.images,
                    fraction,
                    SeedPlan::sval(config.master_seed, j),
                )?;
                store.write_sval(&s)?;
                s
            }
        };
        svals.push(sval);
    }

    ensure_checkpoints(store, config, &pair, &seeds)?;

    let mut cells = Vec::with_capacity(config.epoch_grid.len() * config.fractions.len());
    for &epoch in &config.epoch_grid {
        let missing: Vec<f64> = config
            .fractions
            .iter()
            .copied()
            .filter(|&f| !store.has_cell(epoch, f))
            .collect();
        if missing.is_empty() {
            for &f in &config.fractions {
                cells.push(store.read_cell(epoch, f)?);
            }
            continue;
        }
        let epoch_cells = probe_checkpoint(store, config, &pair, &svals, epoch, &seeds)?;
        for cell in epoch_cells {
            if missing.contains(&cell.fraction) {
                store.write_cell(&cell)?;
            }
            cells.push(cell);
        }
    }
    Ok(cells)
}

/// Train (or continue training) until every grid epoch has a checkpoint.
fn ensure_checkpoints(
    store: &Store,
    config: &ExperimentConfig,
    pair: &DatasetPair,
    seeds: &SeedPlan,
) -> Result<()> {
    let have = store.checkpoint_epochs()?;
    let missing: Vec<usize> = config
        .epoch_grid
        .iter()
        .copied()
        .filter(|e| !have.contains(e))
        .collect();
    if missing.is_empty() {
        return Ok(());
    }
    let first_missing = missing[0];
    let start_epoch = have
        .iter()
        .copied()
        .filter(|&e| e < first_missing)
        .max();
    let net = match start_epoch {
        Some(epoch) => store.read_network(epoch)?,
        None => init_network(&config.network, seeds.init)?,
    };
    let remaining: Vec<usize> = config
        .epoch_grid
        .iter()
        .copied()
        .filter(|&e| e > net.epoch)
        .collect();
    let final_epoch = *config.epoch_grid.last().unwrap();
    train(
        &net,
        &pair.train,
        &config.optimizer,
        final_epoch,
        &remaining,
        seeds.train,
        |cp| store.write_network(cp),
    )?;
    Ok(())
}

/// Probe one checkpoint: one real-label forest for observed scores and the
/// validation curve, B shuffled-label forests for the nulls.
fn probe_checkpoint(
    store: &Store,
    config: &ExperimentConfig,
    pair: &DatasetPair,
    svals: &[crate::perturb::SValidationSet],
    epoch: usize,
    seeds: &SeedPlan,
) -> Result<Vec<CellResult>> {
    let net: TrainedNetwork = store.read_network(epoch)?;
    let labels = &pair.train.labels;
    let baseline = baseline_guess(labels)?;

    let train_feats = extract_features(&net, &pair.train.images, FeatureSource::Train)?;
    let val_feats = extract_features(&net, &pair.validation.images, FeatureSource::Validation)?;
    let mut sval_feats = Vec::with_capacity(svals.len());
    for sval in svals {
        let mut fm = extract_features(&net, &sval.images, FeatureSource::SValidation)?;
        fm.fraction = Some(sval.fraction);
        sval_feats.push(fm);
    }

    let observed_forest_seed = SeedPlan::real_forest(config.master_seed, epoch);
    let forest_params = ForestParams {
        seed: observed_forest_seed,
        ..config.forest
    };
    let real_forest = fit_forest(&train_feats.values, labels, &forest_params)?;
    let observed: Vec<f64> = sval_feats
        .iter()
        .map(|fm| accuracy(&predict(&real_forest, &fm.values)?, labels))
        .collect::<Result<_>>()?;
    let validation_accuracy = accuracy(
        &predict(&real_forest, &val_feats.values)?,
        &pair.validation.labels,
    )?;
    let dnn_train_accuracy = crate::nn::training_accuracy(&net, &pair.train)?;

    let null_master = SeedPlan::null_master(config.master_seed, epoch);
    let sval_refs: Vec<&FeatureMatrix> = sval_feats.iter().collect();
    let nulls = permutation_null_multi(
        &train_feats,
        labels,
        &sval_refs,
        config.permutations,
        &config.forest,
        null_master,
    )?;

    let mut out = Vec::with_capacity(config.fractions.len());
    for (j, (&fraction, scores)) in config.fractions.iter().zip(nulls).enumerate() {
        let null = NullDistribution {
            b: scores.len(),
            scores,
            observed: observed[j],
            baseline,
            epoch,
            fraction,
            forest_params,
            seed: null_master,
        };
        let diagnosis = classify_outcome(&null, config.delta_mem, config.alpha)?;
        out.push(CellResult {
            run_label: config.run_label.clone(),
            epoch,
            fraction,
            null,
            diagnosis,
            validation_accuracy,
            dnn_train_accuracy,
            seeds: CellSeeds {
                dataset: seeds.dataset,
                svalidation: SeedPlan::sval(config.master_seed, j),
                network_init: seeds.init,
                train: seeds.train,
                observed_forest: observed_forest_seed,
                null_master,
            },
        });
    }
    Ok(out)
}

/// View a result table as comparison input for [`crate::diagnosis::compare_runs`].
pub fn run_cells(config: &ExperimentConfig, cells: &[CellResult]) -> RunCells {
    RunCells {
        label: config.run_label.clone(),
        dataset_seed: derive_seed(config.master_seed, "dataset", 0),
        fractions: config.fractions.clone(),
        cells: cells
            .iter()
            .map(|c| (c.epoch, c.fraction, c.null.clone()))
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn degenerate_grid() {
        assert_eq!(default_epoch_grid(1), vec![1]);
    }

    #[test]
    fn large_grid_is_log_spaced_with_endpoints() {
        let grid = default_epoch_grid(10_000);
        assert!(grid.len() <= 20);
        assert_eq!(grid.first(), Some(&1));
        assert_eq!(grid.last(), Some(&10_000));
        assert!(grid.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn small_epoch_counts_dedup() {
        let grid = default_epoch_grid(10);
        assert!(grid.len() <= 10);
        assert_eq!(grid.first(), Some(&1));
        assert_eq!(grid.last(), Some(&10));
        assert!(grid.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn fifteen_point_grid_for_2000_epochs() {
        let grid = log_epoch_grid(2000, 15);
        assert_eq!(grid.first(), Some(&1));
        assert_eq!(grid.last(), Some(&2000));
        assert!(grid.len() >= 13 && grid.len() <= 15, "{grid:?}");
    }
}
