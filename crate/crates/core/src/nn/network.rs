//! Network state, initialization, forward/backward passes, and feature
//! extraction.

use ndarray::{Array1, Array2, Array3, Array4, Axis};
use rand::distributions::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use super::layers::{
    apply_mask, conv_backward, conv_forward, dense_backward, dense_forward, dropout_mask,
    flatten_backward, flatten_forward, pool_backward, pool_forward, sigmoid, value_map_slices,
    Cache, LayerParams,
};
use super::{LayerSpec, Mode, NetworkSpec, Value, ValueShape};
use crate::error::{Error, Result};
use crate::forest::{FeatureMatrix, FeatureSource};
use crate::seed::rng_from_seed;

/// A network together with its parameters and training position.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainedNetwork {
    pub spec: NetworkSpec,
    pub params: Vec<LayerParams>,
    /// Number of completed training epochs (0 = freshly initialized).
    pub epoch: usize,
    /// Seed the parameters were initialized from.
    pub init_seed: u64,
    /// Seed driving batch order and dropout masks, set once training starts.
    pub train_seed: Option<u64>,
}

/// Per-layer parameter gradients, aligned with `TrainedNetwork::params`.
pub type GradientSet = Vec<LayerParams>;

impl TrainedNetwork {
    pub fn param_count(&self) -> usize {
        self.params.iter().map(LayerParams::param_count).sum()
    }

    /// All parameters concatenated (layer order, weights then bias).
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for p in &self.params {
            for s in p.slices() {
                out.extend_from_slice(s);
            }
        }
        out
    }

    pub fn set_flat_params(&mut self, values: &[f64]) {
        let mut offset = 0;
        for p in &mut self.params {
            for s in p.slices_mut() {
                s.copy_from_slice(&values[offset..offset + s.len()]);
                offset += s.len();
            }
        }
        assert_eq!(offset, values.len(), "flat parameter length mismatch");
    }
}

/// Initialize a network: Glorot-uniform weights, zero biases.
///
/// Deterministic given `seed`; layers draw in order, row-major.
pub fn init_network(spec: &NetworkSpec, seed: u64) -> Result<TrainedNetwork> {
    spec.validate()?;
    let mut rng = rng_from_seed(seed);
    let mut shape = ValueShape::Spatial(1, spec.input_shape.0, spec.input_shape.1);
    let mut params = Vec::with_capacity(spec.layers.len());
    for layer in &spec.layers {
        let p = match (layer, shape) {
            (LayerSpec::Dense { units, .. }, ValueShape::Flat(d)) => {
                let limit = (6.0 / (d + units) as f64).sqrt();
                let dist = Uniform::new_inclusive(-limit, limit);
                let weights = Array2::from_shape_fn((d, *units), |_| dist.sample(&mut rng));
                LayerParams::Dense {
                    weights,
                    bias: Array1::zeros(*units),
                }
            }
            (
                LayerSpec::Conv2d {
                    filters, kernel, ..
                },
                ValueShape::Spatial(c, _, _),
            ) => {
                let (kh, kw) = *kernel;
                let fan_in = c * kh * kw;
                let fan_out = filters * kh * kw;
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let dist = Uniform::new_inclusive(-limit, limit);
                let weights =
                    Array4::from_shape_fn((*filters, c, kh, kw), |_| dist.sample(&mut rng));
                LayerParams::Conv {
                    weights,
                    bias: Array1::zeros(*filters),
                }
            }
            _ => LayerParams::Empty,
        };
        params.push(p);
        shape = super::infer_layer_shape(layer, shape)?;
    }
    Ok(TrainedNetwork {
        spec: spec.clone(),
        params,
        epoch: 0,
        init_seed: seed,
        train_seed: None,
    })
}

fn input_value(images: &Array3<f64>) -> Value {
    let (n, h, w) = images.dim();
    let data = images
        .as_standard_layout()
        .as_slice()
        .expect("standard layout")
        .to_vec();
    Value::Spatial(Array4::from_shape_vec((n, 1, h, w), data).unwrap())
}

pub(super) struct ForwardPass {
    /// Output of every layer, in order.
    pub activations: Vec<Value>,
    pub caches: Vec<Cache>,
}

pub(super) fn forward_full(
    net: &TrainedNetwork,
    images: &Array3<f64>,
    mode: &mut Mode,
) -> Result<ForwardPass> {
    let expected = net.spec.input_shape;
    let got = (images.dim().1, images.dim().2);
    if got != expected {
        return Err(Error::ShapeMismatch(format!(
            "input images are {got:?}, network expects {expected:?}"
        )));
    }
    let mut current = input_value(images);
    let mut activations = Vec::with_capacity(net.spec.layers.len());
    let mut caches = Vec::with_capacity(net.spec.layers.len());
    for (layer, params) in net.spec.layers.iter().zip(&net.params) {
        let (next, cache) = match (layer, params, &current) {
            (
                LayerSpec::Dense { activation, .. },
                LayerParams::Dense { weights, bias },
                Value::Flat(x),
            ) => {
                let (out, preact) = dense_forward(x, weights, bias, *activation);
                (
                    Value::Flat(out),
                    Cache::Dense {
                        input: x.clone(),
                        preact,
                    },
                )
            }
            (
                LayerSpec::Conv2d { activation, .. },
                LayerParams::Conv { weights, bias },
                Value::Spatial(x),
            ) => {
                let (out, cols, preact) = conv_forward(x, weights, bias, *activation);
                (
                    Value::Spatial(out),
                    Cache::Conv {
                        cols,
                        preact,
                        in_shape: x.dim(),
                    },
                )
            }
            (LayerSpec::MaxPool2d { pool }, _, Value::Spatial(x)) => {
                let (out, argmax) = pool_forward(x, pool.0, pool.1);
                (
                    Value::Spatial(out),
                    Cache::Pool {
                        argmax,
                        in_shape: x.dim(),
                    },
                )
            }
            (LayerSpec::Dropout { rate }, _, _) => {
                let mut out = current.clone();
                let mask = match mode {
                    Mode::Eval => None,
                    Mode::Train(rng) => {
                        let len = match &out {
                            Value::Flat(a) => a.len(),
                            Value::Spatial(a) => a.len(),
                        };
                        let mask = dropout_mask(len, *rate, rng);
                        value_map_slices(&mut out, |s| apply_mask(s, &mask));
                        Some(mask)
                    }
                };
                (out, Cache::Dropout { mask })
            }
            (LayerSpec::Flatten, _, Value::Spatial(x)) => (
                Value::Flat(flatten_forward(x)),
                Cache::Flatten {
                    in_shape: x.dim(),
                    was_flat: false,
                },
            ),
            (LayerSpec::Flatten, _, Value::Flat(x)) => (
                Value::Flat(x.clone()),
                Cache::Flatten {
                    in_shape: (x.dim().0, 1, 1, x.dim().1),
                    was_flat: true,
                },
            ),
            (layer, _, _) => {
                return Err(Error::ShapeMismatch(format!(
                    "layer {layer:?} is incompatible with its input value"
                )))
            }
        };
        activations.push(next.clone());
        caches.push(cache);
        current = next;
    }
    Ok(ForwardPass {
        activations,
        caches,
    })
}

/// Run the network on a batch of images, returning every layer's output.
///
/// Dropout is active only in train mode (inverted scaling); eval mode is
/// deterministic.
pub fn forward(net: &TrainedNetwork, images: &Array3<f64>, mode: &mut Mode) -> Result<Vec<Value>> {
    Ok(forward_full(net, images, mode)?.activations)
}

fn stable_softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Summed per-unit binary cross-entropy between the 2-unit sigmoid head and
/// one-hot labels, averaged over the batch; gradients are exact for the
/// sampled dropout masks.
pub fn loss_and_gradients(
    net: &TrainedNetwork,
    images: &Array3<f64>,
    labels: &[u8],
    mode: &mut Mode,
) -> Result<(f64, GradientSet)> {
    let n = images.dim().0;
    if n != labels.len() {
        return Err(Error::LengthMismatch {
            left: n,
            right: labels.len(),
        });
    }
    if n == 0 {
        return Err(Error::EmptyInput("loss over an empty batch".into()));
    }
    let pass = forward_full(net, images, mode)?;

    // Fused sigmoid + cross-entropy head, computed from the cached logits.
    let logits = match pass.caches.last() {
        Some(Cache::Dense { preact, .. }) => preact,
        _ => {
            return Err(Error::InvalidSpec(
                "loss head requires a dense output layer".into(),
            ))
        }
    };
    let classes = logits.dim().1;
    let mut loss = 0.0;
    let mut head_grad = Array2::<f64>::zeros(logits.raw_dim());
    for i in 0..n {
        let label = labels[i] as usize;
        if label >= classes {
            return Err(Error::ShapeMismatch(format!(
                "label {label} outside the {classes}-unit output head"
            )));
        }
        for k in 0..classes {
            let z = logits[[i, k]];
            let y = if k == label { 1.0 } else { 0.0 };
            // BCE(y, sigmoid(z)) = y*softplus(-z) + (1-y)*softplus(z)
            loss += y * stable_softplus(-z) + (1.0 - y) * stable_softplus(z);
            head_grad[[i, k]] = (sigmoid(z) - y) / n as f64;
        }
    }
    loss /= n as f64;
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss { epoch: net.epoch });
    }

    let mut grads: GradientSet = net.params.iter().map(LayerParams::zeros_like).collect();
    let mut grad: Value = Value::Flat(head_grad);
    for idx in (0..net.spec.layers.len()).rev() {
        let layer = &net.spec.layers[idx];
        let cache = &pass.caches[idx];
        let is_head = idx == net.spec.layers.len() - 1;
        grad = match (layer, cache, &net.params[idx], grad) {
            (
                LayerSpec::Dense { activation, .. },
                Cache::Dense { input, preact },
                LayerParams::Dense { weights, .. },
                Value::Flat(g),
            ) => {
                let (dx, dw, db) =
                    dense_backward(&g, input, preact, weights, *activation, is_head);
                grads[idx] = LayerParams::Dense {
                    weights: dw,
                    bias: db,
                };
                Value::Flat(dx)
            }
            (
                LayerSpec::Conv2d { activation, .. },
                Cache::Conv {
                    cols,
                    preact,
                    in_shape,
                },
                LayerParams::Conv { weights, .. },
                Value::Spatial(g),
            ) => {
                let (dx, dw, db) =
                    conv_backward(&g, cols, preact, weights, *in_shape, *activation);
                grads[idx] = LayerParams::Conv {
                    weights: dw,
                    bias: db,
                };
                Value::Spatial(dx)
            }
            (
                LayerSpec::MaxPool2d { .. },
                Cache::Pool {
                    argmax, in_shape, ..
                },
                _,
                Value::Spatial(g),
            ) => Value::Spatial(pool_backward(&g, argmax, *in_shape)),
            (LayerSpec::Dropout { .. }, Cache::Dropout { mask }, _, mut g) => {
                if let Some(mask) = mask {
                    value_map_slices(&mut g, |s| apply_mask(s, mask));
                }
                g
            }
            (LayerSpec::Flatten, Cache::Flatten { in_shape, was_flat }, _, Value::Flat(g)) => {
                if *was_flat {
                    Value::Flat(g)
                } else {
                    Value::Spatial(flatten_backward(&g, *in_shape))
                }
            }
            (layer, ..) => {
                return Err(Error::ShapeMismatch(format!(
                    "backward pass mismatch at layer {layer:?}"
                )))
            }
        };
    }
    Ok((loss, grads))
}

/// Activations of the last hidden layer (the input to the output layer),
/// computed in eval mode over chunks to bound memory.
pub fn extract_features(
    net: &TrainedNetwork,
    images: &Array3<f64>,
    source: FeatureSource,
) -> Result<FeatureMatrix> {
    let n = images.dim().0;
    let width = net.spec.feature_width()?;
    let mut values = Array2::<f64>::zeros((n, width));
    const CHUNK: usize = 512;
    let mut row = 0;
    while row < n {
        let end = (row + CHUNK).min(n);
        let chunk = images.slice(ndarray::s![row..end, .., ..]).to_owned();
        let pass = forward_full(net, &chunk, &mut Mode::Eval)?;
        let feature_idx = pass.activations.len() - 2;
        let feats = pass.activations[feature_idx].as_flat()?;
        values.slice_mut(ndarray::s![row..end, ..]).assign(feats);
        row = end;
    }
    Ok(FeatureMatrix {
        values,
        source,
        epoch: net.epoch,
        fraction: None,
    })
}

/// Head predictions: argmax over the two sigmoid units (ties to class 0).
pub fn predict_classes(net: &TrainedNetwork, images: &Array3<f64>) -> Result<Vec<u8>> {
    let n = images.dim().0;
    let mut out = Vec::with_capacity(n);
    const CHUNK: usize = 512;
    let mut row = 0;
    while row < n {
        let end = (row + CHUNK).min(n);
        let chunk = images.slice(ndarray::s![row..end, .., ..]).to_owned();
        let pass = forward_full(net, &chunk, &mut Mode::Eval)?;
        let head = pass.activations.last().unwrap().as_flat()?;
        for r in head.axis_iter(Axis(0)) {
            out.push(u8::from(r[1] > r[0]));
        }
        row = end;
    }
    Ok(out)
}
