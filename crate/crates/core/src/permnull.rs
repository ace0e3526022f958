//! Observed s-validation scores and permutation null distributions.
//!
//! The observed score comes from a forest fit on the real training labels and
//! evaluated on s-validation features against those same labels. The null
//! repeats the fit B times with uniformly shuffled labels, scoring each fit's
//! s-validation predictions against its own shuffled labels. A null centered
//! above the random-guess baseline indicates memorized background structure;
//! an observed score above the null indicates learned label structure.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forest::{accuracy, fit_forest, predict, FeatureMatrix, ForestParams};
use crate::seed::{derive_seed, rng_from_seed};

/// The permutation null for one (epoch, fraction) cell.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NullDistribution {
    /// B permutation accuracies.
    pub scores: Vec<f64>,
    /// Observed s-validation accuracy (real-label fit).
    pub observed: f64,
    /// Random-guess baseline from the training label proportions.
    pub baseline: f64,
    pub b: usize,
    pub epoch: usize,
    pub fraction: f64,
    pub forest_params: ForestParams,
    /// Master seed the permutation streams derive from.
    pub seed: u64,
}

impl NullDistribution {
    pub fn median(&self) -> f64 {
        quantile(&sorted_copy(&self.scores), 0.5)
    }

    pub fn min(&self) -> f64 {
        self.scores.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.scores
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

pub(crate) fn sorted_copy(values: &[f64]) -> Vec<f64> {
    let mut v = values.to_vec();
    v.sort_unstable_by(f64::total_cmp);
    v
}

/// Linear-interpolation quantile over pre-sorted values.
pub(crate) fn quantile(sorted: &[f64], p: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

fn check_shapes(
    train_feats: &Array2<f64>,
    train_labels: &[u8],
    sval_feats: &Array2<f64>,
) -> Result<()> {
    if train_feats.dim() != sval_feats.dim() {
        return Err(Error::ShapeMismatch(format!(
            "training features {:?} vs s-validation features {:?}",
            train_feats.dim(),
            sval_feats.dim()
        )));
    }
    if train_feats.dim().0 != train_labels.len() {
        return Err(Error::LengthMismatch {
            left: train_feats.dim().0,
            right: train_labels.len(),
        });
    }
    Ok(())
}

/// Fit on `(train_feats, train_labels)`, predict `sval_feats`, score against
/// the training labels (which are the s-validation labels by construction).
pub fn observed_score(
    train_feats: &FeatureMatrix,
    train_labels: &[u8],
    sval_feats: &FeatureMatrix,
    params: &ForestParams,
    seed: u64,
) -> Result<f64> {
    check_shapes(&train_feats.values, train_labels, &sval_feats.values)?;
    let forest = fit_forest(&train_feats.values, train_labels, &ForestParams {
        seed,
        ..*params
    })?;
    let predictions = predict(&forest, &sval_feats.values)?;
    accuracy(&predictions, train_labels)
}

/// Permutation scores against several s-validation feature sets at once.
///
/// Permutation `i` shuffles the labels with sub-seed `(master_seed, i)`, fits
/// one forest on the shuffled labels, and scores its predictions on *each*
/// feature set against those shuffled labels. Returns one score vector per
/// input set. Each column is exactly the null that per-set generation with
/// the same master seed would produce, and the B jobs are independent, so a
/// parallel run reproduces sequential results.
pub fn permutation_null_multi(
    train_feats: &FeatureMatrix,
    train_labels: &[u8],
    sval_feats: &[&FeatureMatrix],
    b: usize,
    params: &ForestParams,
    master_seed: u64,
) -> Result<Vec<Vec<f64>>> {
    if b == 0 {
        return Err(Error::Config("need at least one permutation".into()));
    }
    for sv in sval_feats {
        check_shapes(&train_feats.values, train_labels, &sv.values)?;
    }
    let per_perm: Vec<Vec<f64>> = (0..b)
        .into_par_iter()
        .map(|i| -> Result<Vec<f64>> {
            let mut shuffled = train_labels.to_vec();
            let mut rng = rng_from_seed(derive_seed(master_seed, "perm-labels", i as u64));
            shuffled.shuffle(&mut rng);
            let forest = fit_forest(&train_feats.values, &shuffled, &ForestParams {
                seed: derive_seed(master_seed, "perm-forest", i as u64),
                ..*params
            })?;
            sval_feats
                .iter()
                .map(|sv| {
                    let predictions = predict(&forest, &sv.values)?;
                    accuracy(&predictions, &shuffled)
                })
                .collect()
        })
        .collect::<Result<_>>()?;

    let mut out = vec![Vec::with_capacity(b); sval_feats.len()];
    for row in per_perm {
        for (set_idx, score) in row.into_iter().enumerate() {
            out[set_idx].push(score);
        }
    }
    Ok(out)
}

/// Algorithm-style single-set permutation null; see [`permutation_null_multi`].
pub fn permutation_null(
    train_feats: &FeatureMatrix,
    train_labels: &[u8],
    sval_feats: &FeatureMatrix,
    b: usize,
    params: &ForestParams,
    master_seed: u64,
) -> Result<Vec<f64>> {
    Ok(
        permutation_null_multi(train_feats, train_labels, &[sval_feats], b, params, master_seed)?
            .remove(0),
    )
}

/// Expected accuracy of proportion-matched random guessing: Σ p_k².
pub fn baseline_guess(train_labels: &[u8]) -> Result<f64> {
    if train_labels.is_empty() {
        return Err(Error::EmptyInput("baseline over empty labels".into()));
    }
    let n = train_labels.len() as f64;
    let ones = train_labels.iter().filter(|&&l| l == 1).count() as f64;
    let p1 = ones / n;
    let p0 = 1.0 - p1;
    Ok(p0 * p0 + p1 * p1)
}

/// Add-one permutation p-value: `(1 + #{scores >= observed}) / (B + 1)`.
///
/// Reported for orientation only; the s-validation construction makes the
/// absolute p-value depend on the chosen perturbation strength, so comparisons
/// across runs are the meaningful use.
pub fn empirical_p_value(null_scores: &[f64], observed: f64) -> f64 {
    let ge = null_scores.iter().filter(|&&s| s >= observed).count();
    (1 + ge) as f64 / (null_scores.len() + 1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forest::FeatureSource;
    use rand_distr::{Distribution, StandardNormal};

    fn feats(values: Array2<f64>) -> FeatureMatrix {
        FeatureMatrix {
            values,
            source: FeatureSource::Train,
            epoch: 0,
            fraction: None,
        }
    }

    fn random_features(n: usize, d: usize, seed: u64) -> FeatureMatrix {
        let mut rng = rng_from_seed(seed);
        feats(Array2::from_shape_fn((n, d), |_| {
            StandardNormal.sample(&mut rng)
        }))
    }

    fn balanced_labels(n: usize) -> Vec<u8> {
        (0..n).map(|i| (i % 2) as u8).collect()
    }

    #[test]
    fn baseline_examples() {
        assert!((baseline_guess(&balanced_labels(100)).unwrap() - 0.5).abs() < 1e-12);
        assert!((baseline_guess(&[1, 1, 1]).unwrap() - 1.0).abs() < 1e-12);
        let labels: Vec<u8> = (0..10).map(|i| u8::from(i >= 8)).collect(); // 0.8 / 0.2
        assert!((baseline_guess(&labels).unwrap() - 0.68).abs() < 1e-12);
        assert!(matches!(baseline_guess(&[]), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn p_value_examples() {
        let scores: Vec<f64> = (0..100).map(|i| i as f64 / 200.0).collect();
        assert!((empirical_p_value(&scores, 0.9) - 1.0 / 101.0).abs() < 1e-12);
        assert!((empirical_p_value(&scores, -1.0) - 1.0).abs() < 1e-12);
        assert!((empirical_p_value(&[0.5], 0.5) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn identical_features_reclassify_perfectly_under_any_shuffle() {
        // Distinct rows + unlimited depth: every tree memorizes its labels,
        // so predicting the same rows returns them, shuffled or not.
        let train = random_features(40, 4, 1);
        let labels = balanced_labels(40);
        let params = ForestParams {
            n_trees: 100,
            seed: 5,
            ..Default::default()
        };
        let observed = observed_score(&train, &labels, &train, &params, 7).unwrap();
        assert!((observed - 1.0).abs() < 1e-15);
        let scores = permutation_null(&train, &labels, &train, 20, &params, 9).unwrap();
        assert!(scores.iter().all(|&s| (s - 1.0).abs() < 1e-15));
    }

    #[test]
    fn independent_features_center_the_null_at_baseline() {
        // Small-scale smoke version of the no-shared-structure sanity check.
        let train = random_features(400, 8, 2);
        let sval = random_features(400, 8, 3);
        let labels = balanced_labels(400);
        let params = ForestParams {
            n_trees: 60,
            seed: 1,
            ..Default::default()
        };
        let scores = permutation_null(&train, &labels, &sval, 30, &params, 11).unwrap();
        assert_eq!(scores.len(), 30);
        assert!(scores.iter().all(|&s| (0.0..=1.0).contains(&s)));
        let mean = scores.iter().sum::<f64>() / scores.len() as f64;
        assert!(
            (mean - 0.5).abs() <= 0.07,
            "null mean {mean} should sit near 0.5"
        );
    }

    #[test]
    fn constant_features_center_the_null_at_baseline() {
        let train = feats(Array2::from_elem((200, 4), 0.3));
        let labels = balanced_labels(200);
        let params = ForestParams {
            n_trees: 30,
            seed: 2,
            ..Default::default()
        };
        let scores = permutation_null(&train, &labels, &train, 20, &params, 13).unwrap();
        let mean = scores.iter().sum::<f64>() / scores.len() as f64;
        assert!((mean - 0.5).abs() <= 0.05, "null mean {mean}");
    }

    #[test]
    fn multi_set_nulls_match_single_set_nulls() {
        let train = random_features(100, 4, 4);
        let sval_a = random_features(100, 4, 5);
        let sval_b = random_features(100, 4, 6);
        let labels = balanced_labels(100);
        let params = ForestParams {
            n_trees: 20,
            seed: 3,
            ..Default::default()
        };
        let multi =
            permutation_null_multi(&train, &labels, &[&sval_a, &sval_b], 10, &params, 17).unwrap();
        let single_a = permutation_null(&train, &labels, &sval_a, 10, &params, 17).unwrap();
        let single_b = permutation_null(&train, &labels, &sval_b, 10, &params, 17).unwrap();
        assert_eq!(multi[0], single_a);
        assert_eq!(multi[1], single_b);
    }

    #[test]
    fn shape_guards() {
        let train = random_features(20, 4, 1);
        let sval = random_features(20, 3, 1);
        let labels = balanced_labels(20);
        let params = ForestParams::default();
        assert!(matches!(
            observed_score(&train, &labels, &sval, &params, 0),
            Err(Error::ShapeMismatch(_))
        ));
        assert!(matches!(
            observed_score(&train, &labels[..10], &train, &params, 0),
            Err(Error::LengthMismatch { .. })
        ));
    }

    #[test]
    fn quantile_interpolates() {
        let v = vec![1.0, 2.0, 3.0, 4.0];
        assert!((quantile(&v, 0.5) - 2.5).abs() < 1e-12);
        assert!((quantile(&v, 0.0) - 1.0).abs() < 1e-12);
        assert!((quantile(&v, 1.0) - 4.0).abs() < 1e-12);
        assert!((quantile(&v, 0.25) - 1.75).abs() < 1e-12);
    }
}
