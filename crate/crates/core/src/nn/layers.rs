//! Per-layer forward and backward passes with explicit caches.

use ndarray::{Array1, Array2, Array4, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Activation, Value};

/// Trainable tensors of one layer. Layers without parameters use `Empty`.
/// The same container holds gradients (identical shapes).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum LayerParams {
    Dense {
        /// in_features × out_features
        weights: Array2<f64>,
        bias: Array1<f64>,
    },
    Conv {
        /// filters × in_channels × kh × kw
        weights: Array4<f64>,
        bias: Array1<f64>,
    },
    Empty,
}

impl LayerParams {
    pub fn zeros_like(&self) -> LayerParams {
        match self {
            LayerParams::Dense { weights, bias } => LayerParams::Dense {
                weights: Array2::zeros(weights.raw_dim()),
                bias: Array1::zeros(bias.raw_dim()),
            },
            LayerParams::Conv { weights, bias } => LayerParams::Conv {
                weights: Array4::zeros(weights.raw_dim()),
                bias: Array1::zeros(bias.raw_dim()),
            },
            LayerParams::Empty => LayerParams::Empty,
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            LayerParams::Dense { weights, bias } => weights.len() + bias.len(),
            LayerParams::Conv { weights, bias } => weights.len() + bias.len(),
            LayerParams::Empty => 0,
        }
    }

    /// Mutable views over the flat tensors, weights first.
    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        match self {
            LayerParams::Dense { weights, bias } => vec![
                weights.as_slice_mut().expect("standard layout"),
                bias.as_slice_mut().expect("standard layout"),
            ],
            LayerParams::Conv { weights, bias } => vec![
                weights.as_slice_mut().expect("standard layout"),
                bias.as_slice_mut().expect("standard layout"),
            ],
            LayerParams::Empty => Vec::new(),
        }
    }

    pub fn slices(&self) -> Vec<&[f64]> {
        match self {
            LayerParams::Dense { weights, bias } => vec![
                weights.as_slice().expect("standard layout"),
                bias.as_slice().expect("standard layout"),
            ],
            LayerParams::Conv { weights, bias } => vec![
                weights.as_slice().expect("standard layout"),
                bias.as_slice().expect("standard layout"),
            ],
            LayerParams::Empty => Vec::new(),
        }
    }
}

/// Data cached by a forward pass for the matching backward pass.
pub enum Cache {
    Dense {
        input: Array2<f64>,
        preact: Array2<f64>,
    },
    Conv {
        /// im2col matrix, (N·OH·OW) × (C·kh·kw)
        cols: Array2<f64>,
        preact: Array4<f64>,
        in_shape: (usize, usize, usize, usize),
    },
    Pool {
        /// flat index into the input slab per output element
        argmax: Vec<usize>,
        in_shape: (usize, usize, usize, usize),
    },
    Dropout {
        /// scale per element (0 or 1/keep); `None` in eval mode
        mask: Option<Vec<f64>>,
    },
    Flatten {
        in_shape: (usize, usize, usize, usize),
        /// Input was already flat, so backward passes the gradient through.
        was_flat: bool,
    },
}

pub fn apply_activation(preact: &mut [f64], activation: Activation) {
    match activation {
        Activation::Relu => {
            for v in preact {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
        }
        Activation::Sigmoid => {
            for v in preact {
                *v = sigmoid(*v);
            }
        }
        Activation::None => {}
    }
}

/// dL/dz from dL/da and the cached pre-activation.
fn activation_backward(grad: &mut [f64], preact: &[f64], activation: Activation) {
    match activation {
        Activation::Relu => {
            for (g, &z) in grad.iter_mut().zip(preact) {
                if z <= 0.0 {
                    *g = 0.0;
                }
            }
        }
        Activation::Sigmoid => {
            for (g, &z) in grad.iter_mut().zip(preact) {
                let s = sigmoid(z);
                *g *= s * (1.0 - s);
            }
        }
        Activation::None => {}
    }
}

pub fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

// ---------------------------------------------------------------------------
// Dense
// ---------------------------------------------------------------------------

pub fn dense_forward(
    input: &Array2<f64>,
    weights: &Array2<f64>,
    bias: &Array1<f64>,
    activation: Activation,
) -> (Array2<f64>, Array2<f64>) {
    let mut preact = input.dot(weights);
    preact += bias;
    let mut out = preact.clone();
    apply_activation(out.as_slice_mut().unwrap(), activation);
    (out, preact)
}

/// Returns (grad_input, grad_weights, grad_bias). `skip_activation` is used by
/// the fused sigmoid/cross-entropy head, which hands over dL/dz directly.
pub fn dense_backward(
    grad_out: &Array2<f64>,
    input: &Array2<f64>,
    preact: &Array2<f64>,
    weights: &Array2<f64>,
    activation: Activation,
    skip_activation: bool,
) -> (Array2<f64>, Array2<f64>, Array1<f64>) {
    let mut dz = grad_out.clone();
    if !skip_activation {
        activation_backward(
            dz.as_slice_mut().unwrap(),
            preact.as_slice().unwrap(),
            activation,
        );
    }
    let grad_weights = input.t().dot(&dz);
    let grad_bias = dz.sum_axis(Axis(0));
    let grad_input = dz.dot(&weights.t());
    (grad_input, grad_weights, grad_bias)
}

// ---------------------------------------------------------------------------
// Conv2d (valid padding, stride 1) via im2col
// ---------------------------------------------------------------------------

fn im2col(input: &Array4<f64>, kh: usize, kw: usize) -> Array2<f64> {
    let (n, c, h, w) = input.dim();
    let (oh, ow) = (h - kh + 1, w - kw + 1);
    let x = input.as_slice().expect("standard layout");
    let mut cols = Array2::<f64>::zeros((n * oh * ow, c * kh * kw));
    let cols_slice = cols.as_slice_mut().unwrap();
    let row_len = c * kh * kw;
    for img in 0..n {
        let x_img = &x[img * c * h * w..];
        for orow in 0..oh {
            for ocol in 0..ow {
                let row = ((img * oh + orow) * ow + ocol) * row_len;
                let dst = &mut cols_slice[row..row + row_len];
                let mut t = 0;
                for ch in 0..c {
                    let base = ch * h * w + orow * w + ocol;
                    for ki in 0..kh {
                        let src = base + ki * w;
                        dst[t..t + kw].copy_from_slice(&x_img[src..src + kw]);
                        t += kw;
                    }
                }
            }
        }
    }
    cols
}

fn col2im(
    dcols: &Array2<f64>,
    in_shape: (usize, usize, usize, usize),
    kh: usize,
    kw: usize,
) -> Array4<f64> {
    let (n, c, h, w) = in_shape;
    let (oh, ow) = (h - kh + 1, w - kw + 1);
    let mut dx = Array4::<f64>::zeros(in_shape);
    let dx_slice = dx.as_slice_mut().unwrap();
    let d = dcols.as_slice().expect("standard layout");
    let row_len = c * kh * kw;
    for img in 0..n {
        let dx_img = &mut dx_slice[img * c * h * w..(img + 1) * c * h * w];
        for orow in 0..oh {
            for ocol in 0..ow {
                let row = ((img * oh + orow) * ow + ocol) * row_len;
                let src = &d[row..row + row_len];
                let mut t = 0;
                for ch in 0..c {
                    let base = ch * h * w + orow * w + ocol;
                    for ki in 0..kh {
                        let dst = base + ki * w;
                        for kj in 0..kw {
                            dx_img[dst + kj] += src[t];
                            t += 1;
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Weights (F×C×kh×kw) reshaped to (C·kh·kw) × F for the im2col product.
fn conv_weight_matrix(weights: &Array4<f64>) -> Array2<f64> {
    let (f, c, kh, kw) = weights.dim();
    let flat = weights.as_slice().expect("standard layout");
    let mut mat = Array2::<f64>::zeros((c * kh * kw, f));
    for filt in 0..f {
        let w_f = &flat[filt * c * kh * kw..(filt + 1) * c * kh * kw];
        for (row, &v) in w_f.iter().enumerate() {
            mat[[row, filt]] = v;
        }
    }
    mat
}

pub fn conv_forward(
    input: &Array4<f64>,
    weights: &Array4<f64>,
    bias: &Array1<f64>,
    activation: Activation,
) -> (Array4<f64>, Array2<f64>, Array4<f64>) {
    let (n, _, h, w) = input.dim();
    let (f, _, kh, kw) = weights.dim();
    let (oh, ow) = (h - kh + 1, w - kw + 1);
    let cols = im2col(input, kh, kw);
    let w_mat = conv_weight_matrix(weights);
    let z_mat = cols.dot(&w_mat); // (N·OH·OW) × F

    // Rearrange rows (n, oh, ow) × F into (N, F, OH, OW).
    let mut preact = Array4::<f64>::zeros((n, f, oh, ow));
    {
        let z = z_mat.as_slice().unwrap();
        let p = preact.as_slice_mut().unwrap();
        let b = bias.as_slice().unwrap();
        for img in 0..n {
            for orow in 0..oh {
                for ocol in 0..ow {
                    let zrow = ((img * oh + orow) * ow + ocol) * f;
                    for filt in 0..f {
                        p[((img * f + filt) * oh + orow) * ow + ocol] = z[zrow + filt] + b[filt];
                    }
                }
            }
        }
    }
    let mut out = preact.clone();
    apply_activation(out.as_slice_mut().unwrap(), activation);
    (out, cols, preact)
}

pub fn conv_backward(
    grad_out: &Array4<f64>,
    cols: &Array2<f64>,
    preact: &Array4<f64>,
    weights: &Array4<f64>,
    in_shape: (usize, usize, usize, usize),
    activation: Activation,
) -> (Array4<f64>, Array4<f64>, Array1<f64>) {
    let (f, c, kh, kw) = weights.dim();
    let (n, _, oh, ow) = grad_out.dim();

    let mut dz = grad_out.clone();
    activation_backward(
        dz.as_slice_mut().unwrap(),
        preact.as_slice().unwrap(),
        activation,
    );

    // (N, F, OH, OW) back to rows (n, oh, ow) × F.
    let mut dz_mat = Array2::<f64>::zeros((n * oh * ow, f));
    {
        let d = dz.as_slice().unwrap();
        let m = dz_mat.as_slice_mut().unwrap();
        for img in 0..n {
            for filt in 0..f {
                for orow in 0..oh {
                    for ocol in 0..ow {
                        m[((img * oh + orow) * ow + ocol) * f + filt] =
                            d[((img * f + filt) * oh + orow) * ow + ocol];
                    }
                }
            }
        }
    }

    let dw_mat = cols.t().dot(&dz_mat); // (C·kh·kw) × F
    let mut grad_weights = Array4::<f64>::zeros((f, c, kh, kw));
    {
        let gw = grad_weights.as_slice_mut().unwrap();
        for filt in 0..f {
            for row in 0..c * kh * kw {
                gw[filt * c * kh * kw + row] = dw_mat[[row, filt]];
            }
        }
    }
    let grad_bias = dz_mat.sum_axis(Axis(0));
    let w_mat = conv_weight_matrix(weights);
    let dcols = dz_mat.dot(&w_mat.t());
    let grad_input = col2im(&dcols, in_shape, kh, kw);
    (grad_input, grad_weights, grad_bias)
}

// ---------------------------------------------------------------------------
// MaxPool2d (stride = pool size, remainder truncated)
// ---------------------------------------------------------------------------

pub fn pool_forward(input: &Array4<f64>, ph: usize, pw: usize) -> (Array4<f64>, Vec<usize>) {
    let (n, c, h, w) = input.dim();
    let (oh, ow) = (h / ph, w / pw);
    let x = input.as_slice().expect("standard layout");
    let mut out = Array4::<f64>::zeros((n, c, oh, ow));
    let o = out.as_slice_mut().unwrap();
    let mut argmax = vec![0usize; n * c * oh * ow];
    for img in 0..n {
        for ch in 0..c {
            let plane = (img * c + ch) * h * w;
            for orow in 0..oh {
                for ocol in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0;
                    for pi in 0..ph {
                        let row_base = plane + (orow * ph + pi) * w + ocol * pw;
                        for pj in 0..pw {
                            let idx = row_base + pj;
                            // Strict '>' keeps the first maximum on ties.
                            if x[idx] > best {
                                best = x[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    let out_idx = ((img * c + ch) * oh + orow) * ow + ocol;
                    o[out_idx] = best;
                    argmax[out_idx] = best_idx;
                }
            }
        }
    }
    (out, argmax)
}

pub fn pool_backward(
    grad_out: &Array4<f64>,
    argmax: &[usize],
    in_shape: (usize, usize, usize, usize),
) -> Array4<f64> {
    let mut dx = Array4::<f64>::zeros(in_shape);
    let d = dx.as_slice_mut().unwrap();
    for (g, &idx) in grad_out
        .as_slice()
        .expect("standard layout")
        .iter()
        .zip(argmax)
    {
        d[idx] += g;
    }
    dx
}

// ---------------------------------------------------------------------------
// Dropout (inverted: kept units scaled by 1/keep at train time)
// ---------------------------------------------------------------------------

pub fn dropout_mask(len: usize, rate: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let keep = 1.0 - rate;
    let scale = 1.0 / keep;
    (0..len)
        .map(|_| if rng.gen::<f64>() < keep { scale } else { 0.0 })
        .collect()
}

pub fn apply_mask(values: &mut [f64], mask: &[f64]) {
    for (v, &m) in values.iter_mut().zip(mask) {
        *v *= m;
    }
}

// ---------------------------------------------------------------------------
// Flatten
// ---------------------------------------------------------------------------

pub fn flatten_forward(input: &Array4<f64>) -> Array2<f64> {
    let (n, c, h, w) = input.dim();
    let flat = input.as_slice().expect("standard layout").to_vec();
    Array2::from_shape_vec((n, c * h * w), flat).unwrap()
}

pub fn flatten_backward(
    grad_out: &Array2<f64>,
    in_shape: (usize, usize, usize, usize),
) -> Array4<f64> {
    let flat = grad_out.as_slice().expect("standard layout").to_vec();
    Array4::from_shape_vec(in_shape, flat).unwrap()
}

/// Apply a value-shaped unary transformation to either variant.
pub fn value_map_slices(value: &mut Value, f: impl Fn(&mut [f64])) {
    match value {
        Value::Flat(a) => f(a.as_slice_mut().expect("standard layout")),
        Value::Spatial(a) => f(a.as_slice_mut().expect("standard layout")),
    }
}
