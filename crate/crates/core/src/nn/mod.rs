//! Minimal feed-forward network engine: dense, conv2d, maxpool2d, dropout and
//! flatten layers, SGD/rmsProp training with checkpointing, and last
//! hidden-layer feature extraction.
//!
//! Everything runs in 64-bit floats, sequentially and deterministically given
//! a seed, which keeps training runs reproducible and gradient checks tight.

mod layers;
mod network;
mod optim;
mod train;

pub mod checkpoint;

#[cfg(test)]
mod tests;

pub use layers::LayerParams;
pub use network::{
    extract_features, forward, init_network, loss_and_gradients, predict_classes, GradientSet,
    TrainedNetwork,
};
pub use optim::{Optimizer, OptimizerKind, OptimizerSpec};
pub use train::{train, training_accuracy};

use ndarray::{Array2, Array4};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Element-wise nonlinearity attached to dense and conv layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Sigmoid,
    None,
}

/// One layer of a network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense {
        units: usize,
        activation: Activation,
    },
    Conv2d {
        filters: usize,
        kernel: (usize, usize),
        activation: Activation,
    },
    MaxPool2d {
        pool: (usize, usize),
    },
    Dropout {
        rate: f64,
    },
    Flatten,
}

/// An ordered stack of layers over single-channel H×W inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub layers: Vec<LayerSpec>,
    /// (H, W) of one input sample.
    pub input_shape: (usize, usize),
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset_name: Option<String>,
}

/// Per-sample shape flowing between layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ValueShape {
    Flat(usize),
    /// (channels, height, width)
    Spatial(usize, usize, usize),
}

/// A batch of activations: either flat (N×features) or spatial (N×C×H×W).
#[derive(Debug, Clone)]
pub enum Value {
    Flat(Array2<f64>),
    Spatial(Array4<f64>),
}

impl Value {
    pub fn batch_len(&self) -> usize {
        match self {
            Value::Flat(a) => a.shape()[0],
            Value::Spatial(a) => a.shape()[0],
        }
    }

    pub fn as_flat(&self) -> Result<&Array2<f64>> {
        match self {
            Value::Flat(a) => Ok(a),
            Value::Spatial(a) => Err(Error::ShapeMismatch(format!(
                "expected flat activations, found spatial {:?}",
                a.shape()
            ))),
        }
    }
}

/// Forward-pass mode: training samples dropout masks from the given stream,
/// evaluation applies no masks and is deterministic.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut ChaCha8Rng),
}

impl NetworkSpec {
    /// Build a spec, inserting a flatten layer wherever a dense layer would
    /// receive spatial input, and validating shapes end to end.
    pub fn new(layers: Vec<LayerSpec>, input_shape: (usize, usize)) -> Result<Self> {
        let mut normalized = Vec::with_capacity(layers.len() + 1);
        let mut shape = ValueShape::Spatial(1, input_shape.0, input_shape.1);
        for layer in layers {
            if matches!(layer, LayerSpec::Dense { .. })
                && matches!(shape, ValueShape::Spatial(..))
            {
                normalized.push(LayerSpec::Flatten);
                shape = infer_layer_shape(&LayerSpec::Flatten, shape)?;
            }
            shape = infer_layer_shape(&layer, shape)?;
            normalized.push(layer);
        }
        let spec = NetworkSpec {
            layers: normalized,
            input_shape,
            preset_name: None,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Per-layer output shapes, validating the stack.
    pub fn layer_shapes(&self) -> Result<Vec<ValueShape>> {
        let mut shape = ValueShape::Spatial(1, self.input_shape.0, self.input_shape.1);
        let mut out = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            shape = infer_layer_shape(layer, shape)?;
            out.push(shape);
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::InvalidSpec("network has no layers".into()));
        }
        let shapes = self.layer_shapes()?;
        match (self.layers.last().unwrap(), shapes.last().unwrap()) {
            (
                LayerSpec::Dense {
                    units: 2,
                    activation: Activation::Sigmoid,
                },
                _,
            ) => Ok(()),
            other => Err(Error::InvalidSpec(format!(
                "final layer must be a 2-unit sigmoid dense layer, found {:?}",
                other.0
            ))),
        }
    }

    /// Width of the feature layer: the activations feeding the output layer.
    pub fn feature_width(&self) -> Result<usize> {
        let shapes = self.layer_shapes()?;
        let idx = shapes.len().checked_sub(2).ok_or_else(|| {
            Error::InvalidSpec("network needs at least two layers for features".into())
        })?;
        match shapes[idx] {
            ValueShape::Flat(d) => Ok(d),
            ValueShape::Spatial(..) => Err(Error::InvalidSpec(
                "feature layer must produce flat activations".into(),
            )),
        }
    }
}

fn infer_layer_shape(layer: &LayerSpec, input: ValueShape) -> Result<ValueShape> {
    match layer {
        LayerSpec::Dense { units, .. } => {
            if *units == 0 {
                return Err(Error::InvalidSpec("dense layer with zero units".into()));
            }
            match input {
                ValueShape::Flat(_) => Ok(ValueShape::Flat(*units)),
                ValueShape::Spatial(..) => Err(Error::InvalidSpec(
                    "dense layer needs flat input; add a flatten layer".into(),
                )),
            }
        }
        LayerSpec::Conv2d {
            filters, kernel, ..
        } => {
            let (kh, kw) = *kernel;
            if *filters == 0 || kh == 0 || kw == 0 {
                return Err(Error::InvalidSpec("conv2d with zero-sized kernel or filters".into()));
            }
            match input {
                ValueShape::Spatial(_, h, w) if kh <= h && kw <= w => {
                    Ok(ValueShape::Spatial(*filters, h - kh + 1, w - kw + 1))
                }
                ValueShape::Spatial(_, h, w) => Err(Error::InvalidSpec(format!(
                    "conv kernel {kh}x{kw} larger than input {h}x{w}"
                ))),
                ValueShape::Flat(_) => {
                    Err(Error::InvalidSpec("conv2d needs spatial input".into()))
                }
            }
        }
        LayerSpec::MaxPool2d { pool } => {
            let (ph, pw) = *pool;
            if ph == 0 || pw == 0 {
                return Err(Error::InvalidSpec("maxpool2d with zero pool size".into()));
            }
            match input {
                ValueShape::Spatial(c, h, w) if ph <= h && pw <= w => {
                    Ok(ValueShape::Spatial(c, h / ph, w / pw))
                }
                ValueShape::Spatial(..) => Err(Error::InvalidSpec(
                    "pool size larger than input".into(),
                )),
                ValueShape::Flat(_) => {
                    Err(Error::InvalidSpec("maxpool2d needs spatial input".into()))
                }
            }
        }
        LayerSpec::Dropout { rate } => {
            if !(0.0..1.0).contains(rate) {
                return Err(Error::InvalidSpec(format!(
                    "dropout rate {rate} outside [0, 1)"
                )));
            }
            Ok(input)
        }
        LayerSpec::Flatten => match input {
            ValueShape::Spatial(c, h, w) => Ok(ValueShape::Flat(c * h * w)),
            ValueShape::Flat(d) => Ok(ValueShape::Flat(d)),
        },
    }
}

/// The six built-in architectures over 28×28 inputs.
pub fn preset(name: &str) -> Result<NetworkSpec> {
    use Activation::{Relu, Sigmoid};
    let dense = |units, activation| LayerSpec::Dense { units, activation };
    let conv = |filters| LayerSpec::Conv2d {
        filters,
        kernel: (3, 3),
        activation: Relu,
    };
    let drop = |rate| LayerSpec::Dropout { rate };
    let pool = LayerSpec::MaxPool2d { pool: (2, 2) };

    let layers = match name {
        "mlp2" => vec![dense(256, Relu), dense(16, Relu), dense(2, Sigmoid)],
        "mlp4" => vec![
            dense(256, Relu),
            dense(128, Relu),
            dense(64, Relu),
            dense(16, Relu),
            dense(2, Sigmoid),
        ],
        "cnn" => vec![conv(32), conv(64), pool, dense(16, Relu), dense(2, Sigmoid)],
        "mlp2_dropout" => vec![
            dense(256, Relu),
            drop(0.25),
            dense(16, Relu),
            drop(0.5),
            dense(2, Sigmoid),
        ],
        "mlp4_dropout" => vec![
            dense(256, Relu),
            drop(0.25),
            dense(128, Relu),
            drop(0.5),
            dense(64, Relu),
            drop(0.5),
            dense(16, Relu),
            drop(0.5),
            dense(2, Sigmoid),
        ],
        "cnn_dropout" => vec![
            conv(32),
            conv(64),
            pool,
            drop(0.25),
            dense(16, Relu),
            drop(0.5),
            dense(2, Sigmoid),
        ],
        other => {
            return Err(Error::InvalidSpec(format!(
                "unknown preset '{other}' (expected one of mlp2, mlp4, cnn, \
                 mlp2_dropout, mlp4_dropout, cnn_dropout)"
            )))
        }
    };
    let mut spec = NetworkSpec::new(layers, (28, 28))?;
    spec.preset_name = Some(name.to_string());
    Ok(spec)
}

pub const PRESET_NAMES: [&str; 6] = [
    "mlp2",
    "mlp4",
    "cnn",
    "mlp2_dropout",
    "mlp4_dropout",
    "cnn_dropout",
];

#[cfg(test)]
mod spec_tests {
    use super::*;

    #[test]
    fn presets_have_16_unit_feature_layers_and_sigmoid_heads() {
        for name in PRESET_NAMES {
            let spec = preset(name).unwrap();
            spec.validate().unwrap();
            assert_eq!(spec.feature_width().unwrap(), 16, "{name}");
            assert!(matches!(
                spec.layers.last().unwrap(),
                LayerSpec::Dense {
                    units: 2,
                    activation: Activation::Sigmoid
                }
            ));
        }
    }

    #[test]
    fn flatten_inserted_for_dense_on_spatial_input() {
        let spec = preset("mlp2").unwrap();
        assert_eq!(spec.layers[0], LayerSpec::Flatten);
        let shapes = spec.layer_shapes().unwrap();
        assert_eq!(shapes[0], ValueShape::Flat(784));
    }

    #[test]
    fn cnn_shape_algebra() {
        // 28x28 -> conv3 -> 26 -> conv3 -> 24 -> pool2 -> 12.
        let spec = preset("cnn").unwrap();
        let shapes = spec.layer_shapes().unwrap();
        assert_eq!(shapes[0], ValueShape::Spatial(32, 26, 26));
        assert_eq!(shapes[1], ValueShape::Spatial(64, 24, 24));
        assert_eq!(shapes[2], ValueShape::Spatial(64, 12, 12));
        assert_eq!(shapes[3], ValueShape::Flat(64 * 12 * 12));
    }

    #[test]
    fn invalid_specs_rejected() {
        // Head is not 2-unit sigmoid.
        assert!(NetworkSpec::new(
            vec![LayerSpec::Dense {
                units: 3,
                activation: Activation::Sigmoid
            }],
            (4, 4)
        )
        .is_err());
        // Kernel larger than input.
        assert!(NetworkSpec::new(
            vec![
                LayerSpec::Conv2d {
                    filters: 1,
                    kernel: (5, 5),
                    activation: Activation::Relu
                },
                LayerSpec::Dense {
                    units: 2,
                    activation: Activation::Sigmoid
                }
            ],
            (4, 4)
        )
        .is_err());
        // Dropout rate of exactly 1 is rejected.
        assert!(NetworkSpec::new(
            vec![
                LayerSpec::Dropout { rate: 1.0 },
                LayerSpec::Dense {
                    units: 2,
                    activation: Activation::Sigmoid
                }
            ],
            (4, 4)
        )
        .is_err());
    }
}
