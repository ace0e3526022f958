//! Mini-batch optimizers: plain SGD and rmsProp.

use serde::{Deserialize, Serialize};

use super::layers::LayerParams;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    RmsProp,
}

/// Optimizer settings. `rho` and `epsilon` only matter for rmsProp.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerSpec {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub rho: f64,
    pub epsilon: f64,
    pub batch_size: usize,
}

impl OptimizerSpec {
    pub fn sgd_default() -> Self {
        OptimizerSpec {
            kind: OptimizerKind::Sgd,
            learning_rate: 0.01,
            rho: 0.9,
            epsilon: 1e-7,
            batch_size: 128,
        }
    }

    pub fn rmsprop_default() -> Self {
        OptimizerSpec {
            kind: OptimizerKind::RmsProp,
            learning_rate: 0.001,
            rho: 0.9,
            epsilon: 1e-7,
            batch_size: 128,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!(
                "learning rate {} must be positive",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if self.kind == OptimizerKind::RmsProp {
            if !(0.0 < self.rho && self.rho < 1.0) {
                return Err(Error::Config(format!("rho {} outside (0, 1)", self.rho)));
            }
            if self.epsilon <= 0.0 {
                return Err(Error::Config(format!(
                    "epsilon {} must be positive",
                    self.epsilon
                )));
            }
        }
        Ok(())
    }
}

/// Mutable optimizer state over one network's parameters.
pub struct Optimizer {
    spec: OptimizerSpec,
    /// rmsProp squared-gradient accumulators, one tensor set per layer.
    accum: Option<Vec<LayerParams>>,
}

impl Optimizer {
    pub fn new(spec: OptimizerSpec) -> Self {
        Optimizer { spec, accum: None }
    }

    /// Apply one update: `w -= lr*g` for SGD, or
    /// `v = rho*v + (1-rho)*g^2; w -= lr*g/sqrt(v + eps)` for rmsProp.
    pub fn step(&mut self, params: &mut [LayerParams], grads: &[LayerParams]) {
        match self.spec.kind {
            OptimizerKind::Sgd => {
                let lr = self.spec.learning_rate;
                for (p, g) in params.iter_mut().zip(grads) {
                    for (ps, gs) in p.slices_mut().into_iter().zip(g.slices()) {
                        for (w, &gv) in ps.iter_mut().zip(gs) {
                            *w -= lr * gv;
                        }
                    }
                }
            }
            OptimizerKind::RmsProp => {
                let accum = self
                    .accum
                    .get_or_insert_with(|| grads.iter().map(LayerParams::zeros_like).collect());
                let (lr, rho, eps) = (self.spec.learning_rate, self.spec.rho, self.spec.epsilon);
                for ((p, g), v) in params.iter_mut().zip(grads).zip(accum.iter_mut()) {
                    for ((ps, gs), vs) in p
                        .slices_mut()
                        .into_iter()
                        .zip(g.slices())
                        .zip(v.slices_mut())
                    {
                        for ((w, &gv), av) in ps.iter_mut().zip(gs).zip(vs.iter_mut()) {
                            *av = rho * *av + (1.0 - rho) * gv * gv;
                            *w -= lr * gv / (*av + eps).sqrt();
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array1, Array2};

    fn one_param(value: f64) -> Vec<LayerParams> {
        vec![LayerParams::Dense {
            weights: Array2::from_elem((1, 1), value),
            bias: Array1::zeros(1),
        }]
    }

    fn weight(params: &[LayerParams]) -> f64 {
        match &params[0] {
            LayerParams::Dense { weights, .. } => weights[[0, 0]],
            _ => unreachable!(),
        }
    }

    #[test]
    fn sgd_step_is_lr_times_gradient() {
        let mut params = one_param(1.0);
        let grads = one_param(2.0);
        let mut opt = Optimizer::new(OptimizerSpec {
            learning_rate: 0.1,
            ..OptimizerSpec::sgd_default()
        });
        opt.step(&mut params, &grads);
        assert!((weight(&params) - (1.0 - 0.2)).abs() < 1e-15);
    }

    #[test]
    fn rmsprop_update_bounded_and_converges_to_lr() {
        // Constant unit gradient: |dw| <= lr/sqrt(eps) always, -> lr as t grows.
        let spec = OptimizerSpec::rmsprop_default();
        let mut params = one_param(0.0);
        let grads = one_param(1.0);
        let mut opt = Optimizer::new(spec);
        let bound = spec.learning_rate / spec.epsilon.sqrt();
        let mut prev = weight(&params);
        let mut last_step = f64::NAN;
        for _ in 0..400 {
            opt.step(&mut params, &grads);
            let cur = weight(&params);
            last_step = (cur - prev).abs();
            assert!(last_step <= bound + 1e-12);
            prev = cur;
        }
        assert!(
            (last_step - spec.learning_rate).abs() < 0.05 * spec.learning_rate,
            "step {last_step} should approach lr {}",
            spec.learning_rate
        );
    }

    #[test]
    fn spec_validation() {
        assert!(OptimizerSpec::sgd_default().validate().is_ok());
        let mut bad = OptimizerSpec::sgd_default();
        bad.learning_rate = -1.0;
        assert!(bad.validate().is_err());
        let mut bad = OptimizerSpec::rmsprop_default();
        bad.rho = 1.0;
        assert!(bad.validate().is_err());
    }
}
