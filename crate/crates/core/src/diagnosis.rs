//! Mapping a null distribution to one of four verdicts, and comparing runs.
//!
//! The memorization call asks whether the null's center (its median) sits
//! above the baseline by more than a margin; the learning call asks whether
//! the observed score beats the null at level alpha under the add-one
//! permutation p-value. Both thresholds are configuration knobs echoed into
//! every outcome, since no single cutoff is canonical.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::permnull::{empirical_p_value, NullDistribution};

/// Minimum number of permutations for a meaningful verdict.
pub const MIN_PERMUTATIONS: usize = 20;

/// Default margin the null median must clear above baseline to call
/// memorization.
pub const DEFAULT_DELTA_MEM: f64 = 0.02;

/// Default significance level for the learning call.
pub const DEFAULT_ALPHA: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    LearnedAndMemorized,
    MemorizedOnly,
    LearnedOnly,
    Neither,
}

impl Verdict {
    pub fn as_str(&self) -> &'static str {
        match self {
            Verdict::LearnedAndMemorized => "learned_and_memorized",
            Verdict::MemorizedOnly => "memorized_only",
            Verdict::LearnedOnly => "learned_only",
            Verdict::Neither => "neither",
        }
    }
}

/// One cell's verdict with its supporting statistics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiagnosisOutcome {
    pub verdict: Verdict,
    /// Null median minus baseline.
    pub memorization_evidence: f64,
    /// Observed score minus the null maximum.
    pub learning_evidence: f64,
    /// Add-one permutation p-value (advisory).
    pub p_value: f64,
    pub delta_mem: f64,
    pub alpha: f64,
}

/// Classify one cell: memorized iff `median(null) > baseline + delta_mem`,
/// learned iff the p-value is at most `alpha`.
pub fn classify_outcome(
    null: &NullDistribution,
    delta_mem: f64,
    alpha: f64,
) -> Result<DiagnosisOutcome> {
    if null.scores.len() < MIN_PERMUTATIONS {
        return Err(Error::InsufficientPermutations {
            min: MIN_PERMUTATIONS,
            got: null.scores.len(),
        });
    }
    let median = null.median();
    let p_value = empirical_p_value(&null.scores, null.observed);
    let memorized = median > null.baseline + delta_mem;
    let learned = p_value <= alpha;
    let verdict = match (learned, memorized) {
        (true, true) => Verdict::LearnedAndMemorized,
        (false, true) => Verdict::MemorizedOnly,
        (true, false) => Verdict::LearnedOnly,
        (false, false) => Verdict::Neither,
    };
    Ok(DiagnosisOutcome {
        verdict,
        memorization_evidence: median - null.baseline,
        learning_evidence: null.observed - null.max(),
        p_value,
        delta_mem,
        alpha,
    })
}

/// One run's cells, keyed for comparison.
#[derive(Debug, Clone)]
pub struct RunCells {
    pub label: String,
    /// Seed of the dataset both runs must share for a valid comparison.
    pub dataset_seed: u64,
    pub fractions: Vec<f64>,
    /// (epoch, fraction, null) triples.
    pub cells: Vec<(usize, f64, NullDistribution)>,
}

/// Evidence for every run at one (epoch, fraction) key, plus pairwise
/// differences (`diff[i][j] = run_i - run_j`).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub epoch: usize,
    pub fraction: f64,
    pub memorization_evidence: Vec<f64>,
    pub learning_evidence: Vec<f64>,
    pub memorization_diff: Vec<Vec<f64>>,
    pub learning_diff: Vec<Vec<f64>>,
}

/// Aligned comparison of several runs over a shared (epoch, fraction) grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub run_labels: Vec<String>,
    pub rows: Vec<ComparisonRow>,
}

impl ComparisonTable {
    /// The row at an exact (epoch, fraction) key, if present.
    pub fn row(&self, epoch: usize, fraction: f64) -> Option<&ComparisonRow> {
        self.rows
            .iter()
            .find(|r| r.epoch == epoch && r.fraction == fraction)
    }
}

/// Align runs trained and probed on the same dataset and fraction suite.
pub fn compare_runs(runs: &[RunCells]) -> Result<ComparisonTable> {
    let first = runs
        .first()
        .ok_or_else(|| Error::EmptyInput("no runs to compare".into()))?;
    for run in &runs[1..] {
        if run.dataset_seed != first.dataset_seed {
            return Err(Error::MismatchedExperimentKeys(format!(
                "dataset seed {} (run '{}') vs {} (run '{}')",
                run.dataset_seed, run.label, first.dataset_seed, first.label
            )));
        }
        if run.fractions != first.fractions {
            return Err(Error::MismatchedExperimentKeys(format!(
                "fraction suite {:?} (run '{}') vs {:?} (run '{}')",
                run.fractions, run.label, first.fractions, first.label
            )));
        }
    }

    let mut keys: Vec<(usize, u64)> = first
        .cells
        .iter()
        .map(|(e, f, _)| (*e, f.to_bits()))
        .collect();
    keys.sort_unstable();
    keys.dedup();

    let mut rows = Vec::with_capacity(keys.len());
    for (epoch, fraction_bits) in keys {
        let fraction = f64::from_bits(fraction_bits);
        let mut mem = Vec::with_capacity(runs.len());
        let mut learn = Vec::with_capacity(runs.len());
        for run in runs {
            let (_, _, null) = run
                .cells
                .iter()
                .find(|(e, f, _)| *e == epoch && f.to_bits() == fraction_bits)
                .ok_or_else(|| {
                    Error::MismatchedExperimentKeys(format!(
                        "run '{}' is missing cell (epoch {epoch}, fraction {fraction})",
                        run.label
                    ))
                })?;
            mem.push(null.median() - null.baseline);
            learn.push(null.observed - null.max());
        }
        let diff = |v: &[f64]| -> Vec<Vec<f64>> {
            v.iter()
                .map(|a| v.iter().map(|b| a - b).collect())
                .collect()
        };
        rows.push(ComparisonRow {
            epoch,
            fraction,
            memorization_diff: diff(&mem),
            learning_diff: diff(&learn),
            memorization_evidence: mem,
            learning_evidence: learn,
        });
    }
    Ok(ComparisonTable {
        run_labels: runs.iter().map(|r| r.label.clone()).collect(),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forest::ForestParams;

    fn null_with(scores: Vec<f64>, observed: f64, baseline: f64) -> NullDistribution {
        NullDistribution {
            b: scores.len(),
            scores,
            observed,
            baseline,
            epoch: 10,
            fraction: 0.05,
            forest_params: ForestParams::default(),
            seed: 0,
        }
    }

    fn spread(center: f64, b: usize) -> Vec<f64> {
        // B scores tightly spread around `center`.
        (0..b)
            .map(|i| center + (i as f64 - b as f64 / 2.0) * 0.0005)
            .collect()
    }

    #[test]
    fn learned_and_memorized() {
        let null = null_with(spread(0.75, 100), 0.95, 0.5);
        let out = classify_outcome(&null, DEFAULT_DELTA_MEM, DEFAULT_ALPHA).unwrap();
        assert_eq!(out.verdict, Verdict::LearnedAndMemorized);
        assert!(out.memorization_evidence > 0.2);
        assert!(out.learning_evidence > 0.0);
        assert!((out.p_value - 1.0 / 101.0).abs() < 1e-12);
    }

    #[test]
    fn memorized_only_when_observed_sits_at_the_null_median() {
        let scores = spread(0.75, 100);
        let observed = {
            let sorted = crate::permnull::sorted_copy(&scores);
            crate::permnull::quantile(&sorted, 0.5)
        };
        let null = null_with(scores, observed, 0.5);
        let out = classify_outcome(&null, DEFAULT_DELTA_MEM, DEFAULT_ALPHA).unwrap();
        assert_eq!(out.verdict, Verdict::MemorizedOnly);
        assert!(out.p_value > 0.4);
    }

    #[test]
    fn learned_only_when_null_centers_at_baseline() {
        let null = null_with(spread(0.5, 100), 0.9, 0.5);
        let out = classify_outcome(&null, DEFAULT_DELTA_MEM, DEFAULT_ALPHA).unwrap();
        assert_eq!(out.verdict, Verdict::LearnedOnly);
    }

    #[test]
    fn neither_when_everything_sits_at_baseline() {
        let scores = spread(0.5, 100);
        let observed = scores[50];
        let null = null_with(scores, observed, 0.5);
        let out = classify_outcome(&null, DEFAULT_DELTA_MEM, DEFAULT_ALPHA).unwrap();
        assert_eq!(out.verdict, Verdict::Neither);
    }

    #[test]
    fn too_few_permutations_rejected() {
        let null = null_with(spread(0.5, 19), 0.5, 0.5);
        assert!(matches!(
            classify_outcome(&null, DEFAULT_DELTA_MEM, DEFAULT_ALPHA),
            Err(Error::InsufficientPermutations { min: 20, got: 19 })
        ));
    }

    fn toy_run(label: &str, dataset_seed: u64, center: f64) -> RunCells {
        let cells = [1usize, 10]
            .iter()
            .flat_map(|&e| {
                [0.05, 0.10].iter().map(move |&f| {
                    (e, f, null_with(spread(center, 30), center + 0.2, 0.5))
                })
            })
            .collect();
        RunCells {
            label: label.to_string(),
            dataset_seed,
            fractions: vec![0.05, 0.10],
            cells,
        }
    }

    #[test]
    fn self_comparison_differences_are_zero() {
        let run = toy_run("a", 1, 0.7);
        let table = compare_runs(&[run.clone(), run]).unwrap();
        for row in &table.rows {
            for i in 0..2 {
                for j in 0..2 {
                    assert_eq!(row.memorization_diff[i][j], 0.0);
                    assert_eq!(row.learning_diff[i][j], 0.0);
                }
            }
        }
    }

    #[test]
    fn pairwise_differences_are_antisymmetric() {
        let a = toy_run("a", 1, 0.7);
        let b = toy_run("b", 1, 0.6);
        let table = compare_runs(&[a, b]).unwrap();
        for row in &table.rows {
            for i in 0..2 {
                for j in 0..2 {
                    assert!(
                        (row.memorization_diff[i][j] + row.memorization_diff[j][i]).abs() < 1e-15
                    );
                    assert!((row.learning_diff[i][j] + row.learning_diff[j][i]).abs() < 1e-15);
                }
            }
        }
        assert!(table.rows.iter().all(|r| r.memorization_diff[0][1] > 0.05));
    }

    #[test]
    fn mismatched_runs_rejected() {
        let a = toy_run("a", 1, 0.7);
        let mut b = toy_run("b", 2, 0.7);
        assert!(matches!(
            compare_runs(&[a.clone(), b.clone()]),
            Err(Error::MismatchedExperimentKeys(_))
        ));
        b.dataset_seed = 1;
        b.fractions = vec![0.05];
        assert!(matches!(
            compare_runs(&[a, b]),
            Err(Error::MismatchedExperimentKeys(_))
        ));
    }
}
