//! Training losses: per-class focal loss over all proposals plus L1
//! size/position terms over the matched ones.

use super::model::ForwardVars;
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    /// Weight of the position term.
    pub lambda_loc: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            focal_alpha: 0.5,
            focal_gamma: 2.0,
            lambda_loc: 5.0,
        }
    }
}

/// Supervision for one scene, derived from the bipartite assignment.
/// Unmatched proposals are background: their one-hot row is all zero.
#[derive(Clone, Debug)]
pub struct LossTargets {
    /// [N, L] one-hot class targets.
    pub cls_onehot: Tensor,
    /// Matched prediction indices, in ground-truth slot order.
    pub matched: Vec<usize>,
    /// [M, 3] position residual targets in normalized coordinates.
    pub dp_star: Tensor,
    /// [M, 3] dimension residual targets in meters.
    pub dd_star: Tensor,
}

/// Scalar loss values for reporting.
#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub cls: f64,
    pub size: f64,
    pub loc: f64,
}

/// Per-class focal loss with all-zero targets for background rows,
/// normalized by `norm` (the matched count, floored at one).
///
/// Stable form: with z = logit * (2t - 1), the per-element loss is
/// `alpha_t * sigmoid(-z)^gamma * softplus(-z)`.
pub fn focal_loss(
    tape: &mut Tape,
    logits: Var,
    onehot: &Tensor,
    alpha: f64,
    gamma: f64,
    norm: f64,
) -> Result<Var> {
    let shape = tape.value(logits).shape.clone();
    if shape != onehot.shape {
        return Err(Error::contract(format!(
            "focal_loss: logits {shape:?} vs targets {:?}",
            onehot.shape
        )));
    }
    let sign = Tensor::from_vec(
        &shape,
        onehot.data.iter().map(|&t| 2.0 * t - 1.0).collect(),
    );
    let alpha_t = Tensor::from_vec(
        &shape,
        onehot
            .data
            .iter()
            .map(|&t| alpha * t + (1.0 - alpha) * (1.0 - t))
            .collect(),
    );
    let sign = tape.input(sign);
    let alpha_t = tape.input(alpha_t);
    let z = tape.mul(logits, sign);
    let neg_z = tape.scale(z, -1.0);
    let one_minus_pt = tape.sigmoid(neg_z);
    let modulator = tape.powf_const(one_minus_pt, gamma);
    let ce = tape.softplus(neg_z);
    let fl = tape.mul(modulator, ce);
    let fl = tape.mul(fl, alpha_t);
    let total = tape.sum_all(fl);
    Ok(tape.scale(total, 1.0 / norm))
}

/// L1 loss over the matched rows of a [N, 3] output against [M, 3]
/// targets, normalized by the matched count (floored at one).
fn matched_l1(tape: &mut Tape, output: Var, matched: &[usize], target: &Tensor) -> Result<Var> {
    let norm = matched.len().max(1) as f64;
    if matched.is_empty() {
        return Ok(tape.input(Tensor::scalar(0.0)));
    }
    if target.shape != vec![matched.len(), 3] {
        return Err(Error::contract(format!(
            "matched_l1: target shape {:?} for {} matches",
            target.shape,
            matched.len()
        )));
    }
    let rows = tape.gather_rows(output, matched);
    let tgt = tape.input(target.clone());
    let diff = tape.sub(rows, tgt);
    let l1 = tape.abs(diff);
    let s = tape.sum_all(l1);
    Ok(tape.scale(s, 1.0 / norm))
}

/// Classification + size + lambda * location (Eq.-style composite loss).
pub fn total_loss(
    tape: &mut Tape,
    out: &ForwardVars,
    targets: &LossTargets,
    cfg: &LossConfig,
) -> Result<(Var, LossParts)> {
    let norm = targets.matched.len().max(1) as f64;
    let cls = focal_loss(
        tape,
        out.logits,
        &targets.cls_onehot,
        cfg.focal_alpha,
        cfg.focal_gamma,
        norm,
    )?;
    let size = matched_l1(tape, out.delta_d, &targets.matched, &targets.dd_star)?;
    let loc = matched_l1(tape, out.delta_p, &targets.matched, &targets.dp_star)?;
    let loc_scaled = tape.scale(loc, cfg.lambda_loc);
    let t = tape.add(cls, size);
    let total = tape.add(t, loc_scaled);
    let parts = LossParts {
        total: tape.value(total).item(),
        cls: tape.value(cls).item(),
        size: tape.value(size).item(),
        loc: tape.value(loc).item(),
    };
    Ok((total, parts))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn onehot(n: usize, l: usize, hot: &[(usize, usize)]) -> Tensor {
        let mut t = Tensor::zeros(&[n, l]);
        for &(r, c) in hot {
            t.data[r * l + c] = 1.0;
        }
        t
    }

    fn eval_focal(logits: Tensor, targets: &Tensor, alpha: f64, gamma: f64, norm: f64) -> f64 {
        let mut tape = Tape::new();
        let lv = tape.input(logits);
        let fl = focal_loss(&mut tape, lv, targets, alpha, gamma, norm).unwrap();
        tape.value(fl).item()
    }

    #[test]
    fn perfectly_confident_is_zero() {
        // p_t -> 1 for both positive and negative elements
        let logits = Tensor::from_vec(&[2, 3], vec![60.0, -60.0, -60.0, -60.0, 60.0, -60.0]);
        let t = onehot(2, 3, &[(0, 0), (1, 1)]);
        let v = eval_focal(logits, &t, 0.5, 2.0, 2.0);
        assert!(v.abs() < 1e-12, "{v}");
    }

    #[test]
    fn half_probability_matches_direct_formula() {
        // p_t = 0.5 at zero logit: per element alpha*(1-p_t)^g*(-ln p_t)
        //  = 0.5 * 0.25 * ln 2
        let logits = Tensor::zeros(&[1, 1]);
        let t = onehot(1, 1, &[(0, 0)]);
        let expect = 0.5 * 0.25 * std::f64::consts::LN_2;
        let v = eval_focal(logits, &t, 0.5, 2.0, 1.0);
        assert!((v - expect).abs() < 1e-12, "{v} vs {expect}");
        // background element at zero logit gives the same value under
        // alpha = 0.5
        let t0 = Tensor::zeros(&[1, 1]);
        let v0 = eval_focal(Tensor::zeros(&[1, 1]), &t0, 0.5, 2.0, 1.0);
        assert!((v0 - expect).abs() < 1e-12);
    }

    #[test]
    fn gamma_zero_is_weighted_cross_entropy() {
        let logits = Tensor::from_vec(&[1, 2], vec![0.7, -0.3]);
        let t = onehot(1, 2, &[(0, 0)]);
        let v = eval_focal(logits.clone(), &t, 0.5, 0.0, 1.0);
        // direct: -alpha ln sigmoid(0.7) - (1-alpha) ln(1 - sigmoid(-0.3))
        let p0 = 1.0 / (1.0 + (-0.7f64).exp());
        let p1 = 1.0 / (1.0 + (0.3f64).exp());
        let expect = -0.5 * p0.ln() - 0.5 * (1.0 - p1).ln();
        assert!((v - expect).abs() < 1e-12, "{v} vs {expect}");
    }

    #[test]
    fn focal_extreme_logits_stay_finite() {
        let logits = Tensor::from_vec(&[1, 2], vec![500.0, -500.0]);
        let t = onehot(1, 2, &[(0, 1)]); // maximally wrong
        let v = eval_focal(logits, &t, 0.5, 2.0, 1.0);
        assert!(v.is_finite());
        assert!(v > 100.0); // two elements, each ~0.5 * 500
    }

    #[test]
    fn total_loss_zero_for_perfect_matches() {
        let mut tape = Tape::new();
        let logits = tape.input(Tensor::from_vec(
            &[2, 3],
            vec![60.0, -60.0, -60.0, -60.0, 60.0, -60.0],
        ));
        let dp = tape.input(Tensor::from_vec(&[2, 3], vec![0.1; 6]));
        let dd = tape.input(Tensor::from_vec(&[2, 3], vec![-0.2; 6]));
        let out = ForwardVars {
            logits,
            delta_p: dp,
            delta_d: dd,
        };
        let targets = LossTargets {
            cls_onehot: onehot(2, 3, &[(0, 0), (1, 1)]),
            matched: vec![0, 1],
            dp_star: Tensor::from_vec(&[2, 3], vec![0.1; 6]),
            dd_star: Tensor::from_vec(&[2, 3], vec![-0.2; 6]),
        };
        let (_, parts) = total_loss(&mut tape, &out, &targets, &LossConfig::default()).unwrap();
        assert!(parts.size.abs() < 1e-12);
        assert!(parts.loc.abs() < 1e-12);
        assert!(parts.cls.abs() < 1e-12);
    }

    #[test]
    fn doubling_lambda_doubles_loc_contribution() {
        let build = |lambda: f64| -> f64 {
            let mut tape = Tape::new();
            let logits = tape.input(Tensor::zeros(&[2, 3]));
            let dp = tape.input(Tensor::from_vec(&[2, 3], vec![0.3; 6]));
            let dd = tape.input(Tensor::zeros(&[2, 3]));
            let out = ForwardVars {
                logits,
                delta_p: dp,
                delta_d: dd,
            };
            let targets = LossTargets {
                cls_onehot: Tensor::zeros(&[2, 3]),
                matched: vec![0],
                dp_star: Tensor::zeros(&[1, 3]),
                dd_star: Tensor::zeros(&[1, 3]),
            };
            let cfg = LossConfig {
                lambda_loc: lambda,
                ..Default::default()
            };
            let (_, parts) = total_loss(&mut tape, &out, &targets, &cfg).unwrap();
            parts.total - parts.cls - parts.size
        };
        let a = build(5.0);
        let b = build(10.0);
        assert!((b - 2.0 * a).abs() < 1e-12);
    }

    #[test]
    fn no_matches_means_classification_only() {
        let mut tape = Tape::new();
        let logits = tape.input(Tensor::from_vec(&[2, 3], vec![0.2; 6]));
        let dp = tape.input(Tensor::from_vec(&[2, 3], vec![9.0; 6]));
        let dd = tape.input(Tensor::from_vec(&[2, 3], vec![9.0; 6]));
        let out = ForwardVars {
            logits,
            delta_p: dp,
            delta_d: dd,
        };
        let targets = LossTargets {
            cls_onehot: Tensor::zeros(&[2, 3]),
            matched: vec![],
            dp_star: Tensor::zeros(&[0, 3]),
            dd_star: Tensor::zeros(&[0, 3]),
        };
        let (_, parts) = total_loss(&mut tape, &out, &targets, &LossConfig::default()).unwrap();
        assert_eq!(parts.size, 0.0);
        assert_eq!(parts.loc, 0.0);
        assert!(parts.cls > 0.0);
    }
}
