//! Dataset ingestion: IDX parsing, balanced binary subsets, Gaussian-noise
//! replicas, and train/validation splitting.

use std::io::Read;
use std::path::Path;

use ndarray::{Array3, Axis};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::rng_from_seed;

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;
const GZIP_PREFIX: [u8; 2] = [0x1f, 0x8b];

/// Display names of the ten Fashion-MNIST classes, indexed by label value.
pub const FASHION_CLASS_NAMES: [&str; 10] = [
    "T-shirt/top",
    "Trouser",
    "Pullover",
    "Dress",
    "Coat",
    "Sandal",
    "Shirt",
    "Sneaker",
    "Bag",
    "Ankle boot",
];

/// Where a dataset's sample values came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Pixels,
    GaussianNoise,
}

/// A labeled binary image dataset. Pixel datasets hold values in `[0, 1]`;
/// noise datasets hold unbounded standard-normal draws.
#[derive(Debug, Clone)]
pub struct ImageDataset {
    /// N×H×W sample values.
    pub images: Array3<f64>,
    /// Class index per sample, each 0 or 1.
    pub labels: Vec<u8>,
    /// Display names for classes 0 and 1.
    pub class_names: [String; 2],
    pub source: DataSource,
    /// Seed used to generate or select the samples, when applicable.
    pub seed: Option<u64>,
}

impl ImageDataset {
    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// (H, W) of a single sample.
    pub fn image_dims(&self) -> (usize, usize) {
        let s = self.images.shape();
        (s[1], s[2])
    }

    fn check_invariants(&self) -> Result<()> {
        if self.images.shape()[0] != self.labels.len() {
            return Err(Error::CountMismatch {
                images: self.images.shape()[0],
                labels: self.labels.len(),
            });
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l > 1) {
            return Err(Error::Config(format!("label {bad} is not binary")));
        }
        if self.source == DataSource::Pixels {
            if let Some(&v) = self
                .images
                .iter()
                .find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0)
            {
                return Err(Error::Config(format!("pixel value {v} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// A training set and its independent validation set.
#[derive(Debug, Clone)]
pub struct DatasetPair {
    pub train: ImageDataset,
    pub validation: ImageDataset,
}

/// Parse a pair of IDX byte buffers (images + labels).
///
/// Returns the raw byte values (0–255) row-major as `N×H×W` together with the
/// label vector. Counts must agree across the two buffers.
pub fn parse_idx(image_bytes: &[u8], label_bytes: &[u8]) -> Result<(Array3<u8>, Vec<u8>)> {
    let (magic, dims_i) = read_idx_header(image_bytes, 3)?;
    if magic != IMAGES_MAGIC {
        return Err(Error::WrongMagic {
            expected: IMAGES_MAGIC,
            found: magic,
        });
    }
    let (n, h, w) = (dims_i[0], dims_i[1], dims_i[2]);
    let payload = &image_bytes[16..];
    let expected = n
        .checked_mul(h)
        .and_then(|x| x.checked_mul(w))
        .ok_or_else(|| Error::Config("IDX image dimensions overflow".into()))?;
    if payload.len() != expected {
        return Err(Error::TruncatedPayload {
            expected,
            found: payload.len(),
        });
    }

    let (magic_l, dims_l) = read_idx_header(label_bytes, 1)?;
    if magic_l != LABELS_MAGIC {
        return Err(Error::WrongMagic {
            expected: LABELS_MAGIC,
            found: magic_l,
        });
    }
    let n_labels = dims_l[0];
    let label_payload = &label_bytes[8..];
    if label_payload.len() != n_labels {
        return Err(Error::TruncatedPayload {
            expected: n_labels,
            found: label_payload.len(),
        });
    }
    if n != n_labels {
        return Err(Error::CountMismatch {
            images: n,
            labels: n_labels,
        });
    }

    let images = Array3::from_shape_vec((n, h, w), payload.to_vec())
        .expect("payload length checked against dims");
    Ok((images, label_payload.to_vec()))
}

/// Serialize images and labels into IDX byte buffers (inverse of [`parse_idx`]).
pub fn serialize_idx(images: &Array3<u8>, labels: &[u8]) -> Result<(Vec<u8>, Vec<u8>)> {
    let s = images.shape();
    if s[0] != labels.len() {
        return Err(Error::CountMismatch {
            images: s[0],
            labels: labels.len(),
        });
    }
    let mut image_bytes = Vec::with_capacity(16 + images.len());
    image_bytes.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
    for d in s {
        image_bytes.extend_from_slice(&(*d as u32).to_be_bytes());
    }
    image_bytes.extend(images.iter().copied());

    let mut label_bytes = Vec::with_capacity(8 + labels.len());
    label_bytes.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    label_bytes.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    label_bytes.extend_from_slice(labels);
    Ok((image_bytes, label_bytes))
}

fn read_idx_header(bytes: &[u8], n_dims: usize) -> Result<(u32, Vec<usize>)> {
    let header_len = 4 + 4 * n_dims;
    if bytes.len() < header_len {
        return Err(Error::TruncatedPayload {
            expected: header_len,
            found: bytes.len(),
        });
    }
    let magic = u32::from_be_bytes(bytes[0..4].try_into().unwrap());
    let dims = (0..n_dims)
        .map(|i| {
            let off = 4 + 4 * i;
            u32::from_be_bytes(bytes[off..off + 4].try_into().unwrap()) as usize
        })
        .collect();
    Ok((magic, dims))
}

/// Read a file, transparently gunzipping when it carries the gzip prefix.
pub fn read_maybe_gzip(path: &Path) -> Result<Vec<u8>> {
    let raw = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&GZIP_PREFIX) {
        let mut out = Vec::new();
        flate2::read::GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

/// Load an IDX image/label file pair from disk (plain or gzipped).
pub fn load_idx_pair(images_path: &Path, labels_path: &Path) -> Result<(Array3<u8>, Vec<u8>)> {
    let image_bytes = read_maybe_gzip(images_path)?;
    let label_bytes = read_maybe_gzip(labels_path)?;
    parse_idx(&image_bytes, &label_bytes)
}

/// Select a balanced two-class subset, relabeling `class_a → 0` and
/// `class_b → 1` and normalizing pixel values to `[0, 1]`.
///
/// Selection is a seeded shuffle of each class's index list followed by taking
/// the first `per_class` entries, so it is deterministic given the seed.
pub fn select_binary_subset(
    images: &Array3<u8>,
    labels: &[u8],
    class_a: u8,
    class_b: u8,
    per_class: usize,
    seed: u64,
) -> Result<ImageDataset> {
    if images.shape()[0] != labels.len() {
        return Err(Error::CountMismatch {
            images: images.shape()[0],
            labels: labels.len(),
        });
    }
    let mut rng = rng_from_seed(seed);
    let mut chosen: Vec<(usize, u8)> = Vec::with_capacity(2 * per_class);
    for (new_label, class) in [(0u8, class_a), (1u8, class_b)] {
        let mut idx: Vec<usize> = labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == class)
            .map(|(i, _)| i)
            .collect();
        if idx.len() < per_class {
            return Err(Error::InsufficientSamples {
                needed: per_class,
                available: idx.len(),
                context: format!("class {class}"),
            });
        }
        idx.shuffle(&mut rng);
        idx.truncate(per_class);
        idx.sort_unstable();
        chosen.extend(idx.into_iter().map(|i| (i, new_label)));
    }
    // Interleave classes in original sample order so the subset is not block-sorted.
    chosen.sort_unstable_by_key(|&(i, _)| i);

    let (_, h, w) = (images.shape()[0], images.shape()[1], images.shape()[2]);
    let mut out = Array3::<f64>::zeros((chosen.len(), h, w));
    let mut out_labels = Vec::with_capacity(chosen.len());
    for (row, &(src, label)) in chosen.iter().enumerate() {
        let img = images.index_axis(Axis(0), src);
        out.index_axis_mut(Axis(0), row)
            .zip_mut_with(&img, |dst, &v| *dst = f64::from(v) / 255.0);
        out_labels.push(label);
    }

    let name_of = |c: u8| {
        FASHION_CLASS_NAMES
            .get(c as usize)
            .map(|s| s.to_string())
            .unwrap_or_else(|| format!("class {c}"))
    };
    let ds = ImageDataset {
        images: out,
        labels: out_labels,
        class_names: [name_of(class_a), name_of(class_b)],
        source: DataSource::Pixels,
        seed: Some(seed),
    };
    ds.check_invariants()?;
    Ok(ds)
}

/// Replace every sample value with an independent standard-normal draw,
/// keeping shape and labels.
pub fn gaussian_noise_like(dataset: &ImageDataset, seed: u64) -> Result<ImageDataset> {
    if dataset.is_empty() {
        return Err(Error::EmptyInput("dataset for noise replica".into()));
    }
    let mut rng = rng_from_seed(seed);
    let shape = dataset.images.raw_dim();
    let values: Vec<f64> = (0..dataset.images.len())
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    Ok(ImageDataset {
        images: Array3::from_shape_vec(shape, values).expect("same element count"),
        labels: dataset.labels.clone(),
        class_names: dataset.class_names.clone(),
        source: DataSource::GaussianNoise,
        seed: Some(seed),
    })
}

/// Split a dataset into a training part (the rows named by `train_indices`)
/// and a validation part of `val_size` samples drawn from the complement.
///
/// The complement is typically the held-out official test pool appended after
/// the training rows, so validation shares label structure but no sample
/// identity with training.
pub fn make_validation_split(
    full: &ImageDataset,
    train_indices: &[usize],
    val_size: usize,
    seed: u64,
) -> Result<DatasetPair> {
    full.check_invariants()?;
    let n = full.len();
    if let Some(&bad) = train_indices.iter().find(|&&i| i >= n) {
        return Err(Error::Config(format!(
            "train index {bad} out of range for {n} samples"
        )));
    }
    let mut is_train = vec![false; n];
    for &i in train_indices {
        is_train[i] = true;
    }
    let pool: Vec<usize> = (0..n).filter(|&i| !is_train[i]).collect();
    if val_size == 0 || pool.len() < val_size {
        return Err(Error::InsufficientSamples {
            needed: val_size.max(1),
            available: pool.len(),
            context: "validation pool".into(),
        });
    }
    let mut rng = rng_from_seed(seed);
    let mut picked = pool;
    picked.shuffle(&mut rng);
    picked.truncate(val_size);
    picked.sort_unstable();

    let train = take_rows(full, train_indices);
    let validation = take_rows(full, &picked);
    Ok(DatasetPair { train, validation })
}

fn take_rows(ds: &ImageDataset, rows: &[usize]) -> ImageDataset {
    let (h, w) = ds.image_dims();
    let mut images = Array3::<f64>::zeros((rows.len(), h, w));
    let mut labels = Vec::with_capacity(rows.len());
    for (dst, &src) in rows.iter().enumerate() {
        images
            .index_axis_mut(Axis(0), dst)
            .assign(&ds.images.index_axis(Axis(0), src));
        labels.push(ds.labels[src]);
    }
    ImageDataset {
        images,
        labels,
        class_names: ds.class_names.clone(),
        source: ds.source,
        seed: ds.seed,
    }
}

/// Append `other`'s samples after `base`'s (same H, W and class names required).
pub fn concat_datasets(base: &ImageDataset, other: &ImageDataset) -> Result<ImageDataset> {
    if base.image_dims() != other.image_dims() {
        return Err(Error::ShapeMismatch(format!(
            "image dims {:?} vs {:?}",
            base.image_dims(),
            other.image_dims()
        )));
    }
    if base.class_names != other.class_names || base.source != other.source {
        return Err(Error::Config(
            "cannot concatenate datasets with different classes or sources".into(),
        ));
    }
    let images = ndarray::concatenate(Axis(0), &[base.images.view(), other.images.view()])
        .expect("dims checked");
    let mut labels = base.labels.clone();
    labels.extend_from_slice(&other.labels);
    Ok(ImageDataset {
        images,
        labels,
        class_names: base.class_names.clone(),
        source: base.source,
        seed: base.seed,
    })
}
