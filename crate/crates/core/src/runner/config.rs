//! Experiment configuration: the file-facing schema with optional fields, and
//! the fully-resolved form echoed into every run directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forest::ForestParams;
use crate::nn::{preset, NetworkSpec, OptimizerSpec};
use crate::perturb::standard_fraction_suite;

/// Which inputs an experiment trains on.
///
/// Both modes build the same balanced two-class subset; the noise mode then
/// replaces every training and validation pixel with an independent
/// standard-normal draw while keeping the label vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetConfig {
    FashionBinary {
        data_dir: PathBuf,
        class_a: u8,
        class_b: u8,
        per_class: usize,
        val_size: usize,
    },
    GaussianNoise {
        data_dir: PathBuf,
        class_a: u8,
        class_b: u8,
        per_class: usize,
        val_size: usize,
    },
}

impl DatasetConfig {
    pub fn data_dir(&self) -> &Path {
        match self {
            DatasetConfig::FashionBinary { data_dir, .. }
            | DatasetConfig::GaussianNoise { data_dir, .. } => data_dir,
        }
    }

    pub fn fields(&self) -> (u8, u8, usize, usize) {
        match self {
            DatasetConfig::FashionBinary {
                class_a,
                class_b,
                per_class,
                val_size,
                ..
            }
            | DatasetConfig::GaussianNoise {
                class_a,
                class_b,
                per_class,
                val_size,
                ..
            } => (*class_a, *class_b, *per_class, *val_size),
        }
    }

    pub fn is_noise(&self) -> bool {
        matches!(self, DatasetConfig::GaussianNoise { .. })
    }
}

/// A fully-resolved experiment: every knob concrete, serializable as the
/// run's self-documenting echo.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub run_label: String,
    pub master_seed: u64,
    pub output_dir: PathBuf,
    pub dataset: DatasetConfig,
    pub network: NetworkSpec,
    pub optimizer: OptimizerSpec,
    /// Total training epochs; the probe grid must stay within them.
    pub epochs: usize,
    pub epoch_grid: Vec<usize>,
    pub fractions: Vec<f64>,
    /// Number of permutations per cell.
    pub permutations: usize,
    pub forest: ForestParams,
    pub delta_mem: f64,
    pub alpha: f64,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.optimizer.validate()?;
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.epoch_grid.is_empty() {
            return Err(Error::Config("epoch grid is empty".into()));
        }
        if self.epoch_grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("epoch grid must be strictly increasing".into()));
        }
        if self.epoch_grid[0] < 1 || *self.epoch_grid.last().unwrap() > self.epochs {
            return Err(Error::Config(format!(
                "epoch grid must lie within [1, {}]",
                self.epochs
            )));
        }
        if self.fractions.is_empty() {
            return Err(Error::Config("fraction suite is empty".into()));
        }
        if self
            .fractions
            .iter()
            .any(|f| !(0.0..=1.0).contains(f) || f.is_nan())
        {
            return Err(Error::Config("fractions must lie in [0, 1]".into()));
        }
        if self.permutations == 0 {
            return Err(Error::Config("need at least one permutation".into()));
        }
        let (_, _, per_class, val_size) = self.dataset.fields();
        if per_class == 0 || val_size == 0 {
            return Err(Error::Config(
                "per_class and val_size must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// File-facing schema: everything optional except the dataset kind, falling
// back to the toolkit defaults.
// ---------------------------------------------------------------------------

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    run_label: Option<String>,
    master_seed: Option<u64>,
    output_dir: Option<PathBuf>,
    dataset: FileDataset,
    #[serde(default)]
    network: FileNetwork,
    #[serde(default)]
    optimizer: FileOptimizer,
    #[serde(default)]
    probe: FileProbe,
    #[serde(default)]
    forest: FileForest,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileDataset {
    kind: String,
    data_dir: Option<PathBuf>,
    class_a: Option<u8>,
    class_b: Option<u8>,
    per_class: Option<usize>,
    val_size: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileNetwork {
    preset: Option<String>,
    layers: Option<Vec<crate::nn::LayerSpec>>,
    input_shape: Option<(usize, usize)>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileOptimizer {
    kind: Option<String>,
    learning_rate: Option<f64>,
    rho: Option<f64>,
    epsilon: Option<f64>,
    batch_size: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileProbe {
    epochs: Option<usize>,
    epoch_grid: Option<Vec<usize>>,
    /// Size of the auto-generated log grid when `epoch_grid` is absent.
    grid_points: Option<usize>,
    fractions: Option<Vec<f64>>,
    permutations: Option<usize>,
    delta_mem: Option<f64>,
    alpha: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileForest {
    n_trees: Option<usize>,
    mtry: Option<usize>,
    min_leaf: Option<usize>,
    max_depth: Option<usize>,
}

/// Parse a TOML config file and resolve every unset field to its default.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: FileConfig = toml::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    resolve(file, path)
}

fn resolve(file: FileConfig, path: &Path) -> Result<ExperimentConfig> {
    let d = file.dataset;
    let data_dir = d.data_dir.unwrap_or_else(|| PathBuf::from("data/fashion"));
    let class_a = d.class_a.unwrap_or(2); // pullover
    let class_b = d.class_b.unwrap_or(4); // coat
    let per_class = d.per_class.unwrap_or(1000);
    let val_size = d.val_size.unwrap_or(2000);
    let dataset = match d.kind.as_str() {
        "fashion_binary" => DatasetConfig::FashionBinary {
            data_dir,
            class_a,
            class_b,
            per_class,
            val_size,
        },
        "gaussian_noise" => DatasetConfig::GaussianNoise {
            data_dir,
            class_a,
            class_b,
            per_class,
            val_size,
        },
        other => {
            return Err(Error::Config(format!(
                "unknown dataset kind '{other}' (expected fashion_binary or gaussian_noise)"
            )))
        }
    };

    let network = match (file.network.preset, file.network.layers) {
        (Some(name), None) => preset(&name)?,
        (None, Some(layers)) => {
            let input_shape = file.network.input_shape.unwrap_or((28, 28));
            NetworkSpec::new(layers, input_shape)?
        }
        (None, None) => preset("mlp2")?,
        (Some(_), Some(_)) => {
            return Err(Error::Config(
                "give either a network preset or explicit layers, not both".into(),
            ))
        }
    };

    let o = file.optimizer;
    let base = match o.kind.as_deref() {
        None | Some("sgd") => OptimizerSpec::sgd_default(),
        Some("rmsprop") => OptimizerSpec::rmsprop_default(),
        Some(other) => {
            return Err(Error::Config(format!(
                "unknown optimizer kind '{other}' (expected sgd or rmsprop)"
            )))
        }
    };
    let optimizer = OptimizerSpec {
        kind: base.kind,
        learning_rate: o.learning_rate.unwrap_or(base.learning_rate),
        rho: o.rho.unwrap_or(base.rho),
        epsilon: o.epsilon.unwrap_or(base.epsilon),
        batch_size: o.batch_size.unwrap_or(base.batch_size),
    };

    let p = file.probe;
    let epochs = p.epochs.unwrap_or(2000);
    let epoch_grid = match p.epoch_grid {
        Some(grid) => grid,
        None => super::log_epoch_grid(epochs, p.grid_points.unwrap_or(20)),
    };
    let f = file.forest;
    let config = ExperimentConfig {
        run_label: file.run_label.unwrap_or_else(|| {
            network
                .preset_name
                .clone()
                .unwrap_or_else(|| "experiment".to_string())
        }),
        master_seed: file.master_seed.unwrap_or(42),
        output_dir: file
            .output_dir
            .unwrap_or_else(|| default_output_dir(path)),
        dataset,
        network,
        optimizer,
        epochs,
        epoch_grid,
        fractions: p.fractions.unwrap_or_else(standard_fraction_suite),
        permutations: p.permutations.unwrap_or(100),
        forest: ForestParams {
            n_trees: f.n_trees.unwrap_or(500),
            mtry: f.mtry,
            min_leaf: f.min_leaf.unwrap_or(1),
            max_depth: f.max_depth,
            seed: 0, // per-fit seeds are derived by the runner
        },
        delta_mem: p.delta_mem.unwrap_or(crate::diagnosis::DEFAULT_DELTA_MEM),
        alpha: p.alpha.unwrap_or(crate::diagnosis::DEFAULT_ALPHA),
    };
    config.validate()?;
    Ok(config)
}

fn default_output_dir(config_path: &Path) -> PathBuf {
    let stem = config_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "experiment".to_string());
    PathBuf::from("runs").join(stem)
}
