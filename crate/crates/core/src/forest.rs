//! From-scratch random-forest classifier over learned-feature matrices.
//!
//! Binary CART trees grown on bootstrap samples, Gini impurity splits over
//! `mtry` candidate features, thresholds at midpoints of sorted distinct
//! values. All tie-breaks are deterministic (lower class, lower feature
//! index, lower threshold) and every tree draws from a sub-seed derived from
//! `(seed, tree index)`, so parallel fitting reproduces sequential results.

use ndarray::Array2;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{derive_seed, rng_from_seed};

/// Which split of an experiment a feature matrix was extracted from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSource {
    Train,
    SValidation,
    Validation,
}

/// N×d last-hidden-layer activations tagged with their origin.
#[derive(Debug, Clone)]
pub struct FeatureMatrix {
    pub values: Array2<f64>,
    pub source: FeatureSource,
    /// Training epoch of the generating network.
    pub epoch: usize,
    /// Shuffle fraction for s-validation features, absent otherwise.
    pub fraction: Option<f64>,
}

impl FeatureMatrix {
    pub fn rows(&self) -> usize {
        self.values.dim().0
    }

    pub fn cols(&self) -> usize {
        self.values.dim().1
    }
}

/// Random-forest hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForestParams {
    pub n_trees: usize,
    /// Candidate features per split; `None` means `floor(sqrt(d))`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mtry: Option<usize>,
    pub min_leaf: usize,
    /// `None` grows to purity.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_depth: Option<usize>,
    pub seed: u64,
}

impl Default for ForestParams {
    fn default() -> Self {
        ForestParams {
            n_trees: 500,
            mtry: None,
            min_leaf: 1,
            max_depth: None,
            seed: 0,
        }
    }
}

impl ForestParams {
    pub fn resolved_mtry(&self, n_features: usize) -> usize {
        self.mtry
            .unwrap_or_else(|| ((n_features as f64).sqrt().floor() as usize).max(1))
            .min(n_features)
    }
}

#[derive(Debug, Clone)]
enum Node {
    Leaf {
        class: u8,
    },
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
}

/// A single CART tree.
#[derive(Debug, Clone)]
pub struct DecisionTree {
    nodes: Vec<Node>,
}

impl DecisionTree {
    /// Grow one tree on the full data (no bootstrap), to purity unless capped.
    pub fn fit(
        features: &Array2<f64>,
        labels: &[u8],
        mtry: Option<usize>,
        min_leaf: usize,
        max_depth: Option<usize>,
        seed: u64,
    ) -> Result<Self> {
        let data = ColumnData::new(features, labels)?;
        let mut indices: Vec<u32> = (0..data.n_rows as u32).collect();
        let mut rng = rng_from_seed(seed);
        let mtry = ForestParams {
            mtry,
            ..ForestParams::default()
        }
        .resolved_mtry(data.n_cols);
        Ok(grow_tree(
            &data,
            &mut indices,
            mtry,
            min_leaf,
            max_depth,
            &mut rng,
        ))
    }

    pub fn predict_row(&self, row: &[f64]) -> u8 {
        let mut at = 0;
        loop {
            match &self.nodes[at] {
                Node::Leaf { class } => return *class,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    at = if row[*feature] <= *threshold {
                        *left
                    } else {
                        *right
                    };
                }
            }
        }
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_single_leaf(&self) -> bool {
        self.nodes.len() == 1
    }
}

/// A fitted forest.
#[derive(Debug, Clone)]
pub struct Forest {
    pub trees: Vec<DecisionTree>,
    pub params: ForestParams,
    pub n_features: usize,
}

/// Fit a forest: each tree grows on its own bootstrap sample (N draws with
/// replacement) from a sub-seed derived from `(params.seed, tree index)`.
pub fn fit_forest(features: &Array2<f64>, labels: &[u8], params: &ForestParams) -> Result<Forest> {
    if params.n_trees == 0 {
        return Err(Error::Config("forest needs at least one tree".into()));
    }
    let data = ColumnData::new(features, labels)?;
    let mtry = params.resolved_mtry(data.n_cols);
    let trees: Vec<DecisionTree> = (0..params.n_trees)
        .into_par_iter()
        .map(|t| {
            let mut rng = rng_from_seed(derive_seed(params.seed, "tree", t as u64));
            let mut indices: Vec<u32> = (0..data.n_rows)
                .map(|_| rng.gen_range(0..data.n_rows) as u32)
                .collect();
            grow_tree(
                &data,
                &mut indices,
                mtry,
                params.min_leaf,
                params.max_depth,
                &mut rng,
            )
        })
        .collect();
    Ok(Forest {
        trees,
        params: *params,
        n_features: data.n_cols,
    })
}

/// Majority vote over trees; ties go to the lower class index.
pub fn predict(forest: &Forest, features: &Array2<f64>) -> Result<Vec<u8>> {
    let (n, d) = features.dim();
    if d != forest.n_features {
        return Err(Error::ShapeMismatch(format!(
            "forest was fit on {} features, input has {d}",
            forest.n_features
        )));
    }
    let flat = features.as_standard_layout();
    let flat = flat.as_slice().expect("standard layout");
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let row = &flat[i * d..(i + 1) * d];
        let votes_one: usize = forest
            .trees
            .iter()
            .map(|t| t.predict_row(row) as usize)
            .sum();
        out.push(u8::from(votes_one * 2 > forest.trees.len()));
    }
    Ok(out)
}

/// Fraction of positions where the two label vectors agree.
pub fn accuracy(predicted: &[u8], actual: &[u8]) -> Result<f64> {
    if predicted.len() != actual.len() {
        return Err(Error::LengthMismatch {
            left: predicted.len(),
            right: actual.len(),
        });
    }
    if predicted.is_empty() {
        return Err(Error::EmptyInput("accuracy over empty vectors".into()));
    }
    let hits = predicted
        .iter()
        .zip(actual)
        .filter(|(p, a)| p == a)
        .count();
    Ok(hits as f64 / predicted.len() as f64)
}

// ---------------------------------------------------------------------------
// Tree growing
// ---------------------------------------------------------------------------

/// Feature matrix in column-major order for cache-friendly per-feature scans.
struct ColumnData {
    columns: Vec<f64>,
    labels: Vec<u8>,
    n_rows: usize,
    n_cols: usize,
}

impl ColumnData {
    fn new(features: &Array2<f64>, labels: &[u8]) -> Result<Self> {
        let (n, d) = features.dim();
        if n != labels.len() {
            return Err(Error::LengthMismatch {
                left: n,
                right: labels.len(),
            });
        }
        if n < 2 {
            return Err(Error::EmptyInput(format!(
                "forest needs at least 2 samples, got {n}"
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l > 1) {
            return Err(Error::Config(format!("label {bad} is not binary")));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("non-finite feature value".into()));
        }
        let mut columns = vec![0.0; n * d];
        for (i, row) in features.rows().into_iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                columns[j * n + i] = v;
            }
        }
        Ok(ColumnData {
            columns,
            labels: labels.to_vec(),
            n_rows: n,
            n_cols: d,
        })
    }

    #[inline]
    fn value(&self, col: usize, row: u32) -> f64 {
        self.columns[col * self.n_rows + row as usize]
    }
}

struct BestSplit {
    weighted_impurity: f64,
    feature: usize,
    threshold: f64,
}

fn grow_tree(
    data: &ColumnData,
    indices: &mut [u32],
    mtry: usize,
    min_leaf: usize,
    max_depth: Option<usize>,
    rng: &mut impl Rng,
) -> DecisionTree {
    let mut nodes = Vec::new();
    let mut scratch: Vec<(f64, u8)> = Vec::with_capacity(indices.len());
    let mut feature_order: Vec<usize> = (0..data.n_cols).collect();
    // Stack of (start, end, depth, slot); the root goes in slot 0.
    nodes.push(Node::Leaf { class: 0 });
    let mut stack = vec![(0usize, indices.len(), 0usize, 0usize)];

    while let Some((start, end, depth, slot)) = stack.pop() {
        let span = &mut indices[start..end];
        let ones = span
            .iter()
            .filter(|&&i| data.labels[i as usize] == 1)
            .count();
        let zeros = span.len() - ones;
        let majority = u8::from(ones > zeros);

        let pure = ones == 0 || zeros == 0;
        let depth_capped = max_depth.is_some_and(|d| depth >= d);
        if pure || depth_capped || span.len() < 2 * min_leaf {
            nodes[slot] = Node::Leaf { class: majority };
            continue;
        }

        // Draw mtry candidates (partial Fisher-Yates); if none of them admit
        // a valid split, keep scanning the remaining features before giving
        // up, so a node only becomes a leaf when it is truly unsplittable.
        for i in 0..mtry {
            let j = rng.gen_range(i..feature_order.len());
            feature_order.swap(i, j);
        }
        let mut best: Option<BestSplit> = None;
        for (rank, &feature) in feature_order.iter().enumerate() {
            if rank >= mtry && best.is_some() {
                break;
            }
            evaluate_feature(data, span, feature, min_leaf, &mut scratch, &mut best);
        }

        let Some(split) = best else {
            nodes[slot] = Node::Leaf { class: majority };
            continue;
        };

        // Partition the span in place around the threshold.
        let mut lt = 0;
        for i in 0..span.len() {
            if data.value(split.feature, span[i]) <= split.threshold {
                span.swap(lt, i);
                lt += 1;
            }
        }
        debug_assert!(lt > 0 && lt < span.len());

        let left_slot = nodes.len();
        nodes.push(Node::Leaf { class: 0 });
        let right_slot = nodes.len();
        nodes.push(Node::Leaf { class: 0 });
        nodes[slot] = Node::Split {
            feature: split.feature,
            threshold: split.threshold,
            left: left_slot,
            right: right_slot,
        };
        stack.push((start + lt, end, depth + 1, right_slot));
        stack.push((start, start + lt, depth + 1, left_slot));
    }
    DecisionTree { nodes }
}

/// Scan one feature's midpoint splits, updating `best` under the
/// deterministic (impurity, feature, threshold) ordering.
fn evaluate_feature(
    data: &ColumnData,
    span: &[u32],
    feature: usize,
    min_leaf: usize,
    scratch: &mut Vec<(f64, u8)>,
    best: &mut Option<BestSplit>,
) {
    scratch.clear();
    scratch.extend(
        span.iter()
            .map(|&i| (data.value(feature, i), data.labels[i as usize])),
    );
    scratch.sort_unstable_by(|a, b| a.0.total_cmp(&b.0));

    let n = scratch.len();
    let total_ones = scratch.iter().filter(|(_, l)| *l == 1).count();
    let mut left_ones = 0usize;
    for i in 0..n - 1 {
        if scratch[i].1 == 1 {
            left_ones += 1;
        }
        if scratch[i].0 == scratch[i + 1].0 {
            continue;
        }
        let nl = i + 1;
        let nr = n - nl;
        if nl < min_leaf || nr < min_leaf {
            continue;
        }
        let right_ones = total_ones - left_ones;
        let weighted = weighted_gini(nl, left_ones) + weighted_gini(nr, right_ones);
        let threshold = 0.5 * (scratch[i].0 + scratch[i + 1].0);
        let better = match best {
            None => true,
            Some(b) => {
                weighted < b.weighted_impurity
                    || (weighted == b.weighted_impurity
                        && (feature < b.feature
                            || (feature == b.feature && threshold < b.threshold)))
            }
        };
        if better {
            *best = Some(BestSplit {
                weighted_impurity: weighted,
                feature,
                threshold,
            });
        }
    }
}

/// `n * gini(ones/n)`, the size-weighted Gini impurity of one child.
#[inline]
fn weighted_gini(n: usize, ones: usize) -> f64 {
    let n_f = n as f64;
    let p1 = ones as f64 / n_f;
    let p0 = 1.0 - p1;
    n_f * (1.0 - p0 * p0 - p1 * p1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use proptest::prelude::*;
    use rand_distr::{Distribution, StandardNormal};

    fn random_matrix(n: usize, d: usize, seed: u64) -> Array2<f64> {
        let mut rng = rng_from_seed(seed);
        Array2::from_shape_fn((n, d), |_| StandardNormal.sample(&mut rng))
    }

    /// Exhaustive-split oracle for 1-D data: is there a single midpoint
    /// threshold that separates the classes perfectly?
    fn separable_by_single_split(values: &[f64], labels: &[u8]) -> bool {
        let mut pairs: Vec<(f64, u8)> = values.iter().copied().zip(labels.iter().copied()).collect();
        pairs.sort_unstable_by(|a, b| a.0.total_cmp(&b.0));
        (0..pairs.len() - 1).any(|i| {
            pairs[i].0 < pairs[i + 1].0
                && pairs[..=i].iter().all(|(_, l)| *l == pairs[0].1)
                && pairs[i + 1..].iter().all(|(_, l)| *l != pairs[0].1)
        })
    }

    #[test]
    fn all_one_class_yields_single_leaf_trees() {
        let x = random_matrix(20, 3, 1);
        let y = vec![1u8; 20];
        let forest = fit_forest(&x, &y, &ForestParams {
            n_trees: 10,
            ..Default::default()
        })
        .unwrap();
        assert!(forest.trees.iter().all(DecisionTree::is_single_leaf));
        assert_eq!(predict(&forest, &x).unwrap(), y);
    }

    #[test]
    fn separable_1d_classified_perfectly() {
        // All class-0 values below all class-1 values.
        let values: Vec<f64> = (0..30).map(|i| i as f64 / 10.0).collect();
        let labels: Vec<u8> = (0..30).map(|i| u8::from(i >= 15)).collect();
        assert!(separable_by_single_split(&values, &labels));
        let x = Array2::from_shape_vec((30, 1), values).unwrap();
        let forest = fit_forest(&x, &labels, &ForestParams {
            n_trees: 50,
            seed: 3,
            ..Default::default()
        })
        .unwrap();
        let predicted = predict(&forest, &x).unwrap();
        assert_eq!(predicted, labels);
        assert!((accuracy(&predicted, &labels).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn same_seed_same_predictions() {
        let x = random_matrix(60, 4, 5);
        let y: Vec<u8> = (0..60).map(|i| (i % 2) as u8).collect();
        let params = ForestParams {
            n_trees: 30,
            seed: 11,
            ..Default::default()
        };
        let a = fit_forest(&x, &y, &params).unwrap();
        let b = fit_forest(&x, &y, &params).unwrap();
        let probe = random_matrix(40, 4, 6);
        assert_eq!(predict(&a, &probe).unwrap(), predict(&b, &probe).unwrap());
    }

    #[test]
    fn vote_ties_break_to_class_zero() {
        // Two single-leaf trees voting 0 and 1: forced 50/50 tie.
        let forest = Forest {
            trees: vec![
                DecisionTree {
                    nodes: vec![Node::Leaf { class: 0 }],
                },
                DecisionTree {
                    nodes: vec![Node::Leaf { class: 1 }],
                },
            ],
            params: ForestParams::default(),
            n_features: 1,
        };
        let x = Array2::from_shape_vec((1, 1), vec![0.0]).unwrap();
        assert_eq!(predict(&forest, &x).unwrap(), vec![0]);
    }

    #[test]
    fn single_tree_without_bootstrap_memorizes_distinct_rows() {
        let x = random_matrix(50, 4, 7);
        let y: Vec<u8> = (0..50).map(|i| u8::from(i % 3 == 0)).collect();
        let tree = DecisionTree::fit(&x, &y, None, 1, None, 9).unwrap();
        let flat = x.as_standard_layout();
        let flat = flat.as_slice().unwrap().to_vec();
        let predicted: Vec<u8> = (0..50).map(|i| tree.predict_row(&flat[i * 4..(i + 1) * 4])).collect();
        assert_eq!(predicted, y);
    }

    #[test]
    fn accuracy_examples() {
        assert!((accuracy(&[1, 1, 0], &[1, 0, 0]).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!((accuracy(&[1, 0, 1], &[1, 0, 1]).unwrap() - 1.0).abs() < 1e-15);
        assert!((accuracy(&[1, 1], &[0, 0]).unwrap() - 0.0).abs() < 1e-15);
        assert!(matches!(
            accuracy(&[1], &[1, 0]),
            Err(Error::LengthMismatch { .. })
        ));
        assert!(matches!(accuracy(&[], &[]), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn predict_rejects_wrong_width() {
        let x = random_matrix(20, 3, 1);
        let y: Vec<u8> = (0..20).map(|i| (i % 2) as u8).collect();
        let forest = fit_forest(&x, &y, &ForestParams {
            n_trees: 5,
            ..Default::default()
        })
        .unwrap();
        let wrong = random_matrix(4, 2, 2);
        assert!(matches!(
            predict(&forest, &wrong),
            Err(Error::ShapeMismatch(_))
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        /// Threshold splits only compare order, so a strictly monotone
        /// transformation of a feature column leaves the fitted partition of
        /// the training samples unchanged.
        #[test]
        fn monotone_transform_invariance(seed in 0u64..200) {
            let x = random_matrix(40, 3, seed);
            let y: Vec<u8> = (0..40).map(|i| u8::from((i * 7 + 3) % 5 < 2)).collect();
            let params = ForestParams { n_trees: 15, seed, ..Default::default() };
            let base = fit_forest(&x, &y, &params).unwrap();

            let mut warped = x.clone();
            for v in warped.column_mut(1).iter_mut() {
                *v = v.exp(); // strictly increasing
            }
            let transformed = fit_forest(&warped, &y, &params).unwrap();

            prop_assert_eq!(
                predict(&base, &x).unwrap(),
                predict(&transformed, &warped).unwrap()
            );
        }

        /// Predictions never leave the training label set.
        #[test]
        fn predictions_stay_in_label_set(seed in 0u64..100) {
            let x = random_matrix(30, 2, seed);
            let y = vec![1u8; 30]; // only class 1 present
            let forest = fit_forest(&x, &y, &ForestParams {
                n_trees: 9,
                seed,
                ..Default::default()
            })
            .unwrap();
            let probe = random_matrix(10, 2, seed ^ 1);
            prop_assert!(predict(&forest, &probe).unwrap().iter().all(|&p| p == 1));
        }
    }
}
