//! Shared-structure validation (s-validation) sets: per-image shuffles of a
//! fixed fraction of pixel positions.
//!
//! For each image independently, `k = round(fraction * H * W)` distinct
//! positions are chosen uniformly at random and the values at those positions
//! are rearranged by a uniformly random permutation. Every image keeps its
//! exact multiset of values, and labels pass through untouched, so the result
//! shares both label structure and background structure with the training set.

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{derive_seed, rng_from_seed};

/// A perturbed copy of a training set at a given shuffle fraction.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SValidationSet {
    /// N×H×W perturbed images, aligned sample-for-sample with the source.
    pub images: Array3<f64>,
    /// Fraction of pixel positions shuffled per image.
    pub fraction: f64,
    /// Seed the set was generated from.
    pub seed: u64,
}

/// Number of positions shuffled per image at `fraction` (round half-up).
pub fn shuffle_count(fraction: f64, pixels_per_image: usize) -> usize {
    (fraction * pixels_per_image as f64).round() as usize
}

/// Build an s-validation set from training images.
///
/// Deterministic given `seed`; each image draws from its own sub-stream
/// derived from `(seed, image index)`, so per-image work is order-independent.
pub fn make_s_validation(
    train_images: &Array3<f64>,
    fraction: f64,
    seed: u64,
) -> Result<SValidationSet> {
    if !(0.0..=1.0).contains(&fraction) || fraction.is_nan() {
        return Err(Error::FractionOutOfRange(fraction));
    }
    let (n, h, w) = {
        let s = train_images.shape();
        (s[0], s[1], s[2])
    };
    let pixels = h * w;
    let k = shuffle_count(fraction, pixels);

    let mut images = train_images.clone();
    if k >= 2 {
        let flat = images
            .as_slice_mut()
            .expect("freshly cloned array is contiguous");
        for img_idx in 0..n {
            let mut rng = rng_from_seed(derive_seed(seed, "sval-image", img_idx as u64));
            let positions = sample_distinct(&mut rng, pixels, k);
            let image = &mut flat[img_idx * pixels..(img_idx + 1) * pixels];
            let mut values: Vec<f64> = positions.iter().map(|&p| image[p]).collect();
            values.shuffle(&mut rng);
            for (&p, &v) in positions.iter().zip(values.iter()) {
                image[p] = v;
            }
        }
    }
    Ok(SValidationSet {
        images,
        fraction,
        seed,
    })
}

/// `k` distinct values from `0..n`, uniformly, in selection order
/// (partial Fisher-Yates over an index table).
fn sample_distinct(rng: &mut impl Rng, n: usize, k: usize) -> Vec<usize> {
    debug_assert!(k <= n);
    let mut table: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = rng.gen_range(i..n);
        table.swap(i, j);
    }
    table.truncate(k);
    table
}

/// The default shuffle-fraction grid: 1%, 5%, 10%, and 100% of pixels.
pub fn standard_fraction_suite() -> Vec<f64> {
    vec![0.01, 0.05, 0.10, 1.00]
}
