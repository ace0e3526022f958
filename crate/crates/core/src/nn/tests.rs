//! Engine-level tests: initialization arithmetic, forward semantics, the
//! finite-difference gradient oracle, and training behavior.

use ndarray::{Array1, Array2, Array3, Array4};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::layers::{conv_forward, dropout_mask};
use super::*;
use crate::data::{DataSource, ImageDataset};
use crate::error::Error;
use crate::forest::FeatureSource;
use crate::seed::rng_from_seed;

fn random_images(n: usize, h: usize, w: usize, seed: u64) -> Array3<f64> {
    let mut rng = rng_from_seed(seed);
    Array3::from_shape_fn((n, h, w), |_| StandardNormal.sample(&mut rng))
}

fn alternating_labels(n: usize) -> Vec<u8> {
    (0..n).map(|i| (i % 2) as u8).collect()
}

/// Central finite differences over the scalar loss, step 1e-5.
fn numerical_gradient(
    net: &mut TrainedNetwork,
    images: &Array3<f64>,
    labels: &[u8],
) -> Vec<f64> {
    const H: f64 = 1e-5;
    let base = net.flat_params();
    let mut grad = vec![0.0; base.len()];
    let mut probe = base.clone();
    for i in 0..base.len() {
        probe[i] = base[i] + H;
        net.set_flat_params(&probe);
        let (loss_plus, _) = loss_and_gradients(net, images, labels, &mut Mode::Eval).unwrap();
        probe[i] = base[i] - H;
        net.set_flat_params(&probe);
        let (loss_minus, _) = loss_and_gradients(net, images, labels, &mut Mode::Eval).unwrap();
        probe[i] = base[i];
        grad[i] = (loss_plus - loss_minus) / (2.0 * H);
    }
    net.set_flat_params(&base);
    grad
}

fn flat_gradients(grads: &GradientSet) -> Vec<f64> {
    let mut out = Vec::new();
    for g in grads {
        for s in g.slices() {
            out.extend_from_slice(s);
        }
    }
    out
}

/// Guarded relative error; tolerates exactly-zero analytic entries.
pub fn gradient_rel_error(analytic: &[f64], numerical: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numerical)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

/// Run the finite-difference oracle against the analytic backward pass.
pub fn check_gradients(spec: &NetworkSpec, input_hw: (usize, usize), seed: u64) -> f64 {
    let mut net = init_network(spec, seed).unwrap();
    let n = 6;
    let images = random_images(n, input_hw.0, input_hw.1, seed ^ 0x5eed);
    let labels = alternating_labels(n);
    let (_, analytic) = loss_and_gradients(&net, &images, &labels, &mut Mode::Eval).unwrap();
    let numerical = numerical_gradient(&mut net, &images, &labels);
    gradient_rel_error(&flat_gradients(&analytic), &numerical)
}

fn dense(units: usize, activation: Activation) -> LayerSpec {
    LayerSpec::Dense { units, activation }
}

fn head() -> LayerSpec {
    dense(2, Activation::Sigmoid)
}

#[test]
fn init_matches_panel_a_parameter_arithmetic() {
    // 784*256 + 256 + 256*16 + 16 + 16*2 + 2
    let expected = 784 * 256 + 256 + 256 * 16 + 16 + 16 * 2 + 2;
    assert_eq!(expected, 205_106);
    let net = init_network(&preset("mlp2").unwrap(), 0).unwrap();
    assert_eq!(net.param_count(), expected);
}

#[test]
fn init_biases_zero_and_deterministic() {
    let spec = preset("cnn").unwrap();
    let a = init_network(&spec, 7).unwrap();
    let b = init_network(&spec, 7).unwrap();
    assert_eq!(a.flat_params(), b.flat_params());
    for p in &a.params {
        match p {
            LayerParams::Dense { bias, .. } | LayerParams::Conv { bias, .. } => {
                assert!(bias.iter().all(|&v| v == 0.0));
            }
            LayerParams::Empty => {}
        }
    }
    let c = init_network(&spec, 8).unwrap();
    assert_ne!(a.flat_params(), c.flat_params());
}

#[test]
fn zero_network_outputs_exactly_half() {
    let spec = preset("mlp2").unwrap();
    let mut net = init_network(&spec, 0).unwrap();
    net.set_flat_params(&vec![0.0; net.param_count()]);
    let images = random_images(3, 28, 28, 1);
    let acts = forward(&net, &images, &mut Mode::Eval).unwrap();
    let out = acts.last().unwrap().as_flat().unwrap();
    assert!(out.iter().all(|&v| v == 0.5));
}

#[test]
fn one_by_one_conv_with_unit_weight_is_identity() {
    let input = Array4::from_shape_fn((2, 1, 3, 3), |(n, _, i, j)| {
        (n * 9 + i * 3 + j) as f64 * 0.1
    });
    let weights = Array4::from_elem((1, 1, 1, 1), 1.0);
    let bias = Array1::zeros(1);
    let (out, _, _) = conv_forward(&input, &weights, &bias, Activation::None);
    assert_eq!(out, input);
}

#[test]
fn dropout_mask_is_unbiased_at_large_scale() {
    let mut rng = rng_from_seed(42);
    let mask = dropout_mask(20_000, 0.5, &mut rng);
    // Applying the mask to all-ones: mean should stay within 2% of 1.
    let mean = mask.iter().sum::<f64>() / mask.len() as f64;
    assert!((mean - 1.0).abs() < 0.02, "mask mean {mean}");
    assert!(mask.iter().all(|&m| m == 0.0 || m == 2.0));
}

#[test]
fn dropout_eval_is_identity_and_train_masks() {
    let spec = NetworkSpec::new(
        vec![dense(8, Activation::Relu), LayerSpec::Dropout { rate: 0.5 }, head()],
        (3, 3),
    )
    .unwrap();
    let net = init_network(&spec, 3).unwrap();
    let images = random_images(4, 3, 3, 9);
    let eval_a = forward(&net, &images, &mut Mode::Eval).unwrap();
    let eval_b = forward(&net, &images, &mut Mode::Eval).unwrap();
    // Eval passes are deterministic and dropout passes values through.
    let dense_out = eval_a[1].as_flat().unwrap();
    let dropped = eval_a[2].as_flat().unwrap();
    assert_eq!(dense_out, dropped);
    assert_eq!(
        eval_a.last().unwrap().as_flat().unwrap(),
        eval_b.last().unwrap().as_flat().unwrap()
    );
    // Train mode zeroes roughly half and doubles the rest.
    let mut rng = rng_from_seed(11);
    let train = forward(&net, &images, &mut Mode::Train(&mut rng)).unwrap();
    let masked = train[2].as_flat().unwrap();
    let zeros = masked.iter().filter(|&&v| v == 0.0).count();
    assert!(zeros > 0, "train mode should mask some units");
}

#[test]
fn loss_at_perfect_prediction_vanishes() {
    let spec = NetworkSpec::new(vec![head()], (1, 1)).unwrap();
    let mut net = init_network(&spec, 0).unwrap();
    // Logits (+40, -40) for constant input 1.0: essentially perfect class 0.
    net.set_flat_params(&[40.0, -40.0, 0.0, 0.0]);
    let images = Array3::from_elem((5, 1, 1), 1.0);
    let labels = vec![0u8; 5];
    let (loss, _) = loss_and_gradients(&net, &images, &labels, &mut Mode::Eval).unwrap();
    assert!(loss < 1e-15, "loss {loss}");
}

#[test]
fn loss_at_uniform_half_is_two_ln_two() {
    let spec = preset("mlp2").unwrap();
    let mut net = init_network(&spec, 0).unwrap();
    net.set_flat_params(&vec![0.0; net.param_count()]);
    let images = random_images(8, 28, 28, 2);
    let labels = alternating_labels(8);
    let (loss, _) = loss_and_gradients(&net, &images, &labels, &mut Mode::Eval).unwrap();
    assert!((loss - 2.0 * std::f64::consts::LN_2).abs() < 1e-14);
}

#[test]
fn gradients_match_finite_differences_dense_stack() {
    let spec = NetworkSpec::new(
        vec![
            dense(5, Activation::Relu),
            dense(4, Activation::Sigmoid),
            dense(3, Activation::None),
            head(),
        ],
        (2, 3),
    )
    .unwrap();
    let err = check_gradients(&spec, (2, 3), 1);
    assert!(err < 1e-4, "relative error {err}");
}

#[test]
fn gradients_match_finite_differences_conv_pool() {
    let spec = NetworkSpec::new(
        vec![
            LayerSpec::Conv2d {
                filters: 2,
                kernel: (3, 3),
                activation: Activation::Relu,
            },
            LayerSpec::MaxPool2d { pool: (2, 2) },
            head(),
        ],
        (6, 6),
    )
    .unwrap();
    let err = check_gradients(&spec, (6, 6), 2);
    assert!(err < 1e-4, "relative error {err}");
}

#[test]
fn gradients_match_finite_differences_dropout_eval() {
    let spec = NetworkSpec::new(
        vec![
            dense(6, Activation::Relu),
            LayerSpec::Dropout { rate: 0.4 },
            head(),
        ],
        (2, 2),
    )
    .unwrap();
    let err = check_gradients(&spec, (2, 2), 3);
    assert!(err < 1e-4, "relative error {err}");
}

fn learnable_dataset(n: usize, seed: u64) -> ImageDataset {
    // Class 0 lights the left half, class 1 the right half, plus noise.
    let mut rng = rng_from_seed(seed);
    let mut images = Array3::<f64>::zeros((n, 6, 6));
    let mut labels = Vec::with_capacity(n);
    for s in 0..n {
        let class = (s % 2) as u8;
        for i in 0..6 {
            for j in 0..6 {
                let bright = (class == 0 && j < 3) || (class == 1 && j >= 3);
                let base: f64 = if bright { 0.8 } else { 0.1 };
                images[[s, i, j]] = (base + 0.1 * rng.gen::<f64>()).clamp(0.0, 1.0);
            }
        }
        labels.push(class);
    }
    ImageDataset {
        images,
        labels,
        class_names: ["left".into(), "right".into()],
        source: DataSource::Pixels,
        seed: Some(seed),
    }
}

fn small_spec() -> NetworkSpec {
    NetworkSpec::new(vec![dense(8, Activation::Relu), head()], (6, 6)).unwrap()
}

#[test]
fn training_improves_accuracy_on_learnable_task() {
    let data = learnable_dataset(60, 5);
    let net = init_network(&small_spec(), 1).unwrap();
    let opt = OptimizerSpec {
        learning_rate: 0.1,
        batch_size: 16,
        ..OptimizerSpec::sgd_default()
    };
    let before = training_accuracy(&net, &data).unwrap();
    let checkpoints = train(&net, &data, &opt, 30, &[30], 2, |_| Ok(())).unwrap();
    let after = training_accuracy(&checkpoints[0], &data).unwrap();
    assert!(after > before, "accuracy {before} -> {after}");
    assert!(after > 0.9, "accuracy {after}");
}

#[test]
fn zero_epochs_returns_only_the_initial_network() {
    let data = learnable_dataset(20, 6);
    let net = init_network(&small_spec(), 2).unwrap();
    let checkpoints = train(
        &net,
        &data,
        &OptimizerSpec::sgd_default(),
        0,
        &[0],
        3,
        |_| Ok(()),
    )
    .unwrap();
    assert_eq!(checkpoints.len(), 1);
    assert_eq!(checkpoints[0].epoch, 0);
    assert_eq!(checkpoints[0].flat_params(), net.flat_params());
}

#[test]
fn training_is_bitwise_deterministic() {
    let data = learnable_dataset(40, 7);
    let spec = NetworkSpec::new(
        vec![dense(8, Activation::Relu), LayerSpec::Dropout { rate: 0.25 }, head()],
        (6, 6),
    )
    .unwrap();
    let net = init_network(&spec, 3).unwrap();
    let opt = OptimizerSpec {
        batch_size: 16,
        ..OptimizerSpec::sgd_default()
    };
    let a = train(&net, &data, &opt, 12, &[6, 12], 9, |_| Ok(())).unwrap();
    let b = train(&net, &data, &opt, 12, &[6, 12], 9, |_| Ok(())).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.epoch, y.epoch);
        assert_eq!(x.flat_params(), y.flat_params());
    }
}

#[test]
fn resumed_training_matches_uninterrupted_run() {
    let data = learnable_dataset(40, 8);
    let net = init_network(&small_spec(), 4).unwrap();
    let opt = OptimizerSpec {
        batch_size: 16,
        ..OptimizerSpec::sgd_default()
    };
    let full = train(&net, &data, &opt, 10, &[4, 10], 11, |_| Ok(())).unwrap();
    let prefix = train(&net, &data, &opt, 4, &[4], 11, |_| Ok(())).unwrap();
    let resumed = train(&prefix[0], &data, &opt, 10, &[10], 11, |_| Ok(())).unwrap();
    assert_eq!(full[1].flat_params(), resumed[0].flat_params());
}

#[test]
fn rmsprop_produces_finite_losses_over_100_epochs() {
    let data = learnable_dataset(40, 9);
    let net = init_network(&small_spec(), 5).unwrap();
    let opt = OptimizerSpec {
        batch_size: 16,
        ..OptimizerSpec::rmsprop_default()
    };
    let checkpoints = train(&net, &data, &opt, 100, &[25, 50, 75, 100], 13, |_| Ok(())).unwrap();
    assert_eq!(checkpoints.len(), 4);
    for cp in &checkpoints {
        let (loss, _) =
            loss_and_gradients(&cp, &data.images, &data.labels, &mut Mode::Eval).unwrap();
        assert!(loss.is_finite(), "epoch {} loss {loss}", cp.epoch);
    }
}

#[test]
fn divergent_training_aborts_with_nonfinite_loss() {
    let data = learnable_dataset(30, 10);
    let net = init_network(&small_spec(), 6).unwrap();
    let opt = OptimizerSpec {
        learning_rate: 1e9,
        batch_size: 8,
        ..OptimizerSpec::sgd_default()
    };
    let mut persisted = 0usize;
    let result = train(&net, &data, &opt, 50, &[0], 15, |_| {
        persisted += 1;
        Ok(())
    });
    match result {
        Err(Error::NonFiniteLoss { epoch }) => assert!(epoch >= 1),
        other => panic!("expected NonFiniteLoss, got {other:?}"),
    }
    // The epoch-0 checkpoint was persisted before the abort.
    assert_eq!(persisted, 1);
}

#[test]
fn features_come_from_the_last_hidden_layer() {
    let spec = preset("mlp2_dropout").unwrap();
    let net = init_network(&spec, 12).unwrap();
    let images = random_images(10, 28, 28, 13);
    let feats = extract_features(&net, &images, FeatureSource::Train).unwrap();
    assert_eq!(feats.values.dim(), (10, 16));
    // Relu feature layer: nonnegative activations.
    assert!(feats.values.iter().all(|&v| v >= 0.0));
    // Eval-mode forward agrees with the dropout-free path.
    let acts = forward(&net, &images, &mut Mode::Eval).unwrap();
    let idx = acts.len() - 2;
    assert_eq!(acts[idx].as_flat().unwrap(), &feats.values);
}

#[test]
fn zero_network_features_are_all_zero() {
    let spec = preset("mlp2").unwrap();
    let mut net = init_network(&spec, 0).unwrap();
    net.set_flat_params(&vec![0.0; net.param_count()]);
    let images = random_images(5, 28, 28, 14);
    let feats = extract_features(&net, &images, FeatureSource::Train).unwrap();
    assert!(feats.values.iter().all(|&v| v == 0.0));
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("net.ckpt");
    let spec = preset("cnn_dropout").unwrap();
    let mut net = init_network(&spec, 21).unwrap();
    net.epoch = 17;
    net.train_seed = Some(99);
    checkpoint::write_checkpoint(&path, &net).unwrap();
    let loaded = checkpoint::read_checkpoint(&path).unwrap();
    assert_eq!(loaded.spec, net.spec);
    assert_eq!(loaded.epoch, 17);
    assert_eq!(loaded.init_seed, 21);
    assert_eq!(loaded.train_seed, Some(99));
    let a = net.flat_params();
    let b = loaded.flat_params();
    assert_eq!(a.len(), b.len());
    assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn corrupted_checkpoint_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("net.ckpt");
    let net = init_network(&small_spec(), 22).unwrap();
    checkpoint::write_checkpoint(&path, &net).unwrap();
    let mut bytes = std::fs::read(&path).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0xff;
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(
        checkpoint::read_checkpoint(&path),
        Err(Error::CorruptStore { .. })
    ));
}

#[test]
fn forward_rejects_wrong_input_shape() {
    let net = init_network(&preset("mlp2").unwrap(), 1).unwrap();
    let images = random_images(2, 14, 14, 0);
    assert!(matches!(
        forward(&net, &images, &mut Mode::Eval),
        Err(Error::ShapeMismatch(_))
    ));
}
