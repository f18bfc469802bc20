//! Decoupled-weight-decay adaptive-moment optimizer with a step schedule.
//!
//! Decay is skipped for normalization parameters and biases (the
//! `no_decay` flag on each parameter field).

use super::model::ModelParams;
use super::tensor::Tensor;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Epochs (0-based) at whose start the learning rate is multiplied by
    /// `lr_drop_factor`.
    pub lr_drop_epochs: Vec<usize>,
    pub lr_drop_factor: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 2.25e-5,
            beta1: 0.95,
            beta2: 0.99,
            eps: 1e-8,
            weight_decay: 1e-4,
            lr_drop_epochs: vec![16, 22],
            lr_drop_factor: 0.1,
        }
    }
}

impl OptimizerConfig {
    /// Learning rate in effect during `epoch` (0-based).
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        let drops = self
            .lr_drop_epochs
            .iter()
            .filter(|&&e| epoch >= e)
            .count() as i32;
        self.lr * self.lr_drop_factor.powi(drops)
    }
}

/// First/second moment accumulators, shaped like the parameters.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: &ModelParams) -> Self {
        let shapes: Vec<Vec<usize>> = params
            .fields()
            .iter()
            .map(|(_, t, _)| t.shape.clone())
            .collect();
        Self {
            m: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            step: 0,
        }
    }
}

/// One update. `grads` must align with `params.fields()` order.
pub fn optimizer_step(
    params: &mut ModelParams,
    grads: &[Tensor],
    state: &mut OptimizerState,
    cfg: &OptimizerConfig,
    lr: f64,
) -> Result<()> {
    let mut fields = params.fields_mut();
    if grads.len() != fields.len() {
        return Err(Error::contract(format!(
            "optimizer_step: {} gradients for {} parameters",
            grads.len(),
            fields.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (i, (_, tensor, no_decay)) in fields.iter_mut().enumerate() {
        let g = &grads[i];
        if g.shape != tensor.shape {
            return Err(Error::contract(format!(
                "optimizer_step: gradient {i} shape {:?} vs parameter {:?}",
                g.shape, tensor.shape
            )));
        }
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        for j in 0..tensor.data.len() {
            let gj = g.data[j];
            m.data[j] = cfg.beta1 * m.data[j] + (1.0 - cfg.beta1) * gj;
            v.data[j] = cfg.beta2 * v.data[j] + (1.0 - cfg.beta2) * gj * gj;
            let mhat = m.data[j] / bc1;
            let vhat = v.data[j] / bc2;
            let mut w = tensor.data[j];
            w -= lr * mhat / (vhat.sqrt() + cfg.eps);
            if !*no_decay {
                w -= lr * cfg.weight_decay * tensor.data[j];
            }
            tensor.data[j] = w;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::model::ModelConfig;

    fn tiny() -> (ModelParams, ModelConfig) {
        let cfg = ModelConfig {
            hidden_dim: 8,
            geo_groups: 2,
            heads: 2,
            channels: 4,
            num_classes: 2,
            ..Default::default()
        };
        (ModelParams::init(&cfg, 1).unwrap(), cfg)
    }

    #[test]
    fn zero_gradients_zero_decay_leave_params_unchanged() {
        let (mut params, _) = tiny();
        let before: Vec<Vec<f64>> = params.fields().iter().map(|(_, t, _)| t.data.clone()).collect();
        let grads: Vec<Tensor> = params
            .fields()
            .iter()
            .map(|(_, t, _)| Tensor::zeros(&t.shape))
            .collect();
        let mut state = OptimizerState::new(&params);
        let cfg = OptimizerConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        optimizer_step(&mut params, &grads, &mut state, &cfg, cfg.lr).unwrap();
        for ((_, t, _), b) in params.fields().iter().zip(&before) {
            assert_eq!(&t.data, b);
        }
    }

    #[test]
    fn single_step_matches_hand_computed_update() {
        let (mut params, _) = tiny();
        // force one known weight value and gradient
        {
            let mut fields = params.fields_mut();
            fields[0].1.data[0] = 1.0;
        }
        let mut grads: Vec<Tensor> = params
            .fields()
            .iter()
            .map(|(_, t, _)| Tensor::zeros(&t.shape))
            .collect();
        grads[0].data[0] = 0.5;
        let mut state = OptimizerState::new(&params);
        let cfg = OptimizerConfig::default();
        optimizer_step(&mut params, &grads, &mut state, &cfg, cfg.lr).unwrap();
        // hand-derived: m = 0.05*0.5 = 0.025, v = 0.01*0.25 = 0.0025,
        // mhat = 0.5, vhat = 0.25, step = lr * 0.5/(0.5 + eps),
        // decay applies to field 0 (a weight)
        let mhat: f64 = 0.025 / (1.0 - 0.95);
        let vhat: f64 = 0.0025 / (1.0 - 0.99);
        let expect = 1.0 - cfg.lr * mhat / (vhat.sqrt() + cfg.eps) - cfg.lr * cfg.weight_decay;
        let got = params.fields()[0].1.data[0];
        assert!((got - expect).abs() < 1e-15, "{got} vs {expect}");
    }

    #[test]
    fn decay_skips_bias_and_norm_params() {
        let (mut params, _) = tiny();
        // nonzero decay, zero gradients: only decayed tensors change
        let grads: Vec<Tensor> = params
            .fields()
            .iter()
            .map(|(_, t, _)| Tensor::zeros(&t.shape))
            .collect();
        let before: Vec<(String, Vec<f64>, bool)> = params
            .fields()
            .iter()
            .map(|(n, t, nd)| (n.clone(), t.data.clone(), *nd))
            .collect();
        let mut state = OptimizerState::new(&params);
        let cfg = OptimizerConfig::default();
        optimizer_step(&mut params, &grads, &mut state, &cfg, cfg.lr).unwrap();
        for ((_, t, _), (name, b, no_decay)) in params.fields().iter().zip(&before) {
            if *no_decay {
                assert_eq!(&t.data, b, "{name} should be untouched");
            } else {
                for (a, x) in t.data.iter().zip(b) {
                    let expect = x - cfg.lr * cfg.weight_decay * x;
                    assert_eq!(*a, expect, "{name}");
                }
            }
        }
    }

    #[test]
    fn schedule_drops_tenfold_at_the_listed_epochs() {
        let cfg = OptimizerConfig::default();
        assert_eq!(cfg.lr_at_epoch(0), 2.25e-5);
        assert_eq!(cfg.lr_at_epoch(15), 2.25e-5);
        assert!((cfg.lr_at_epoch(16) - 2.25e-6).abs() < 1e-18);
        assert!((cfg.lr_at_epoch(21) - 2.25e-6).abs() < 1e-18);
        assert!((cfg.lr_at_epoch(22) - 2.25e-7).abs() < 1e-19);
        assert!((cfg.lr_at_epoch(23) - 2.25e-7).abs() < 1e-19);
    }
}
