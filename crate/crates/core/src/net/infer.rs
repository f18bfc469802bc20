//! Inference: expand anchors into grid proposals, run the network, apply
//! residuals, and keep the best few rescored proposals per anchor.

use super::model::{forward_values, ModelConfig, ModelParams, SceneInputs};
use super::tape::sigmoid_scalar;
use super::tensor::Tensor;
use crate::error::Result;
use crate::eval::Detection;
use crate::featurize::{self, FeatureMap, GEO_DIM};
use crate::geom::{Box2D, Box3D, CameraModel};
use crate::sampler::{sample_proposals, GridSpec, NormConstants};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferConfig {
    /// Applied to the network score before combining with the anchor
    /// score.
    pub score_threshold: f64,
    /// Kept proposals per anchor.
    pub top_k: usize,
}

impl Default for InferConfig {
    fn default() -> Self {
        Self {
            score_threshold: 0.03,
            top_k: 3,
        }
    }
}

/// Grid proposals of one scene plus their network inputs. Proposals whose
/// projection fails entirely (every corner behind the camera) are dropped
/// during preparation.
#[derive(Clone, Debug)]
pub struct ProposalBatch {
    pub boxes: Vec<Box3D>,
    /// Index of the originating anchor per proposal.
    pub anchor_of: Vec<usize>,
    /// Image-clamped projected boxes, aligned with `boxes`.
    pub bbox2d: Vec<Box2D>,
    pub inputs: SceneInputs,
}

/// Expand anchors over the grid and featurize every surviving proposal.
pub fn prepare_proposals(
    anchors: &[Box3D],
    grid: &GridSpec,
    cam: &CameraModel,
    fm: &FeatureMap,
    norm: &NormConstants,
) -> Result<ProposalBatch> {
    let mut boxes = Vec::new();
    let mut anchor_of = Vec::new();
    for (ai, anchor) in anchors.iter().enumerate() {
        for p in sample_proposals(anchor, grid) {
            if cam.project_box2d(&p).is_ok() {
                boxes.push(p);
                anchor_of.push(ai);
            }
        }
    }
    let n = boxes.len();
    let c = fm.channels;
    let mut geo = Vec::with_capacity(n * GEO_DIM);
    let mut pt = Vec::with_capacity(n * 9 * c);
    let mut roi = Vec::with_capacity(n * featurize::ROI_GRID * featurize::ROI_GRID * c);
    let mut bbox2d = Vec::with_capacity(n);
    for b in &boxes {
        let f = featurize::build_features(b, cam, fm, norm)?;
        geo.extend_from_slice(&f.geo);
        pt.extend_from_slice(&f.pt);
        roi.extend_from_slice(&f.roi);
        bbox2d.push(cam.project_box2d(b)?);
    }
    Ok(ProposalBatch {
        boxes,
        anchor_of,
        bbox2d,
        inputs: SceneInputs {
            geo: Tensor::from_vec(&[n, GEO_DIM], geo),
            pt: Tensor::from_vec(&[n, 9, c], pt),
            roi: Tensor::from_vec(&[n, featurize::ROI_GRID * featurize::ROI_GRID * c], roi),
        },
    })
}

/// A proposal after verification.
#[derive(Clone, Debug)]
pub struct RefinedProposal {
    pub box3d: Box3D,
    /// Network confidence: sigmoid of the winning class logit.
    pub head_score: f64,
    pub anchor_idx: usize,
}

/// Move a proposal by its predicted residuals: the position residual is
/// unnormalized back to meters, dimensions are additive with a small
/// positive floor, and angles are untouched (the head predicts no
/// orientation residual). The class is the logit argmax and the score its
/// sigmoid.
pub fn apply_residuals(
    proposal: &Box3D,
    delta_p: &[f64],
    delta_d: &[f64],
    logits: &[f64],
    norm: &NormConstants,
) -> (Box3D, u32, f64) {
    let (best_class, best_logit) = logits
        .iter()
        .enumerate()
        .fold((0usize, f64::NEG_INFINITY), |(bi, bv), (i, &v)| {
            if v > bv {
                (i, v)
            } else {
                (bi, bv)
            }
        });
    let shift = norm.unnormalize(crate::geom::Vec3::new(delta_p[0], delta_p[1], delta_p[2]));
    let mut refined = *proposal;
    refined.center.x += shift.x;
    refined.center.y += shift.y;
    refined.center.z += shift.z;
    refined.dims = (
        (proposal.dims.0 + delta_d[0]).max(0.05),
        (proposal.dims.1 + delta_d[1]).max(0.05),
        (proposal.dims.2 + delta_d[2]).max(0.05),
    );
    refined.label = best_class as u32;
    (refined, best_class as u32, sigmoid_scalar(best_logit))
}

/// Per anchor, keep at most `top_k` proposals whose network score clears
/// the threshold (the threshold gates the raw network score, not the
/// product); the emitted score is anchor score x network score.
pub fn select_predictions(
    refined: &[RefinedProposal],
    anchors: &[Box3D],
    cam: &CameraModel,
    cfg: &InferConfig,
) -> Vec<Detection> {
    let mut by_anchor: Vec<Vec<usize>> = vec![Vec::new(); anchors.len()];
    for (i, r) in refined.iter().enumerate() {
        by_anchor[r.anchor_idx].push(i);
    }
    let mut out = Vec::new();
    for (ai, group) in by_anchor.iter().enumerate() {
        let mut kept: Vec<usize> = group
            .iter()
            .copied()
            .filter(|&i| refined[i].head_score > cfg.score_threshold)
            .collect();
        kept.sort_by(|&a, &b| {
            refined[b]
                .head_score
                .partial_cmp(&refined[a].head_score)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        for &i in kept.iter().take(cfg.top_k) {
            let r = &refined[i];
            let Ok(bbox2d) = cam.project_box2d(&r.box3d) else {
                continue;
            };
            let mut b = r.box3d;
            b.score = (anchors[ai].score * r.head_score).clamp(0.0, 1.0);
            out.push(Detection { box3d: b, bbox2d });
        }
    }
    out
}

/// Full verification output for one scene.
#[derive(Clone, Debug)]
pub struct InferOutput {
    pub detections: Vec<Detection>,
    /// Highest-scoring refined box per anchor (before thresholding), for
    /// diagnostics; `None` when an anchor produced no proposals.
    pub top1_per_anchor: Vec<Option<Box3D>>,
}

/// Run the network over one scene's anchors.
pub fn infer_scene(
    params: &ModelParams,
    model_cfg: &ModelConfig,
    infer_cfg: &InferConfig,
    grid: &GridSpec,
    norm: &NormConstants,
    anchors: &[Box3D],
    cam: &CameraModel,
    features: &FeatureMap,
) -> Result<InferOutput> {
    let batch = prepare_proposals(anchors, grid, cam, features, norm)?;
    if batch.boxes.is_empty() {
        return Ok(InferOutput {
            detections: Vec::new(),
            top1_per_anchor: vec![None; anchors.len()],
        });
    }
    let (logits, dp, dd) = forward_values(params, model_cfg, &batch.inputs)?;
    let l = model_cfg.num_classes;
    let refined: Vec<RefinedProposal> = batch
        .boxes
        .iter()
        .enumerate()
        .map(|(i, b)| {
            let (rb, _, score) = apply_residuals(
                b,
                &dp.data[i * 3..(i + 1) * 3],
                &dd.data[i * 3..(i + 1) * 3],
                &logits.data[i * l..(i + 1) * l],
                norm,
            );
            RefinedProposal {
                box3d: rb,
                head_score: score,
                anchor_idx: batch.anchor_of[i],
            }
        })
        .collect();

    let mut best: Vec<Option<(f64, Box3D)>> = vec![None; anchors.len()];
    for r in &refined {
        let slot = &mut best[r.anchor_idx];
        if slot.map_or(true, |(s, _)| r.head_score > s) {
            *slot = Some((r.head_score, r.box3d));
        }
    }
    let top1: Vec<Option<Box3D>> = best.into_iter().map(|s| s.map(|(_, b)| b)).collect();

    let detections = select_predictions(&refined, anchors, cam, infer_cfg);
    Ok(InferOutput {
        detections,
        top1_per_anchor: top1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::Vec3;

    fn norm() -> NormConstants {
        NormConstants::default()
    }

    #[test]
    fn residual_identity_keeps_box() {
        let b = Box3D::new(0, Vec3::new(1.0, 0.8, 20.0), (1.5, 1.6, 3.9), 0.3, 0.9);
        let (r, class, score) =
            apply_residuals(&b, &[0.0; 3], &[0.0; 3], &[0.0, -1.0, -2.0], &norm());
        assert_eq!(r.center, b.center);
        assert_eq!(r.dims, b.dims);
        assert_eq!(r.yaw, b.yaw);
        assert_eq!(r.alpha, b.alpha);
        assert_eq!(class, 0);
        assert_eq!(score, 0.5);
    }

    #[test]
    fn normalized_x_residual_unnormalizes_to_meters() {
        let b = Box3D::new(0, Vec3::new(1.0, 0.8, 20.0), (1.5, 1.6, 3.9), 0.3, 0.9);
        let (r, _, _) = apply_residuals(&b, &[0.02, 0.0, 0.0], &[0.0; 3], &[1.0], &norm());
        assert!((r.center.x - 2.0).abs() < 1e-12); // 0.02 * 50 = 1 m
    }

    #[test]
    fn argmax_invariant_under_logit_shift() {
        let b = Box3D::new(0, Vec3::new(1.0, 0.8, 20.0), (1.5, 1.6, 3.9), 0.3, 0.9);
        let (_, c1, _) = apply_residuals(&b, &[0.0; 3], &[0.0; 3], &[0.1, 0.9, 0.4], &norm());
        let (_, c2, _) = apply_residuals(&b, &[0.0; 3], &[0.0; 3], &[5.1, 5.9, 5.4], &norm());
        assert_eq!(c1, c2);
        assert_eq!(c1, 1);
    }

    #[test]
    fn dims_clamped_positive() {
        let b = Box3D::new(0, Vec3::new(1.0, 0.8, 20.0), (1.5, 1.6, 3.9), 0.3, 0.9);
        let (r, _, _) = apply_residuals(&b, &[0.0; 3], &[-10.0, -10.0, -10.0], &[1.0], &norm());
        assert_eq!(r.dims, (0.05, 0.05, 0.05));
    }

    fn refined_at(score: f64, anchor: usize) -> RefinedProposal {
        RefinedProposal {
            box3d: Box3D::new(0, Vec3::new(0.0, 0.8, 20.0), (1.5, 1.6, 3.9), 0.0, 1.0),
            head_score: score,
            anchor_idx: anchor,
        }
    }

    #[test]
    fn selection_threshold_and_topk() {
        let cam = CameraModel::pinhole(700.0, 100.0, 100.0, (200.0, 200.0));
        let anchors = vec![Box3D::new(0, Vec3::new(0.0, 0.8, 20.0), (1.5, 1.6, 3.9), 0.0, 0.5)];
        let cfg = InferConfig::default();
        // all below threshold: nothing kept
        let refined: Vec<RefinedProposal> = (0..25).map(|_| refined_at(0.02, 0)).collect();
        assert!(select_predictions(&refined, &anchors, &cam, &cfg).is_empty());
        // descending scores: exactly top 3 kept
        let refined: Vec<RefinedProposal> = (0..6)
            .map(|i| refined_at(0.9 - i as f64 * 0.1, 0))
            .collect();
        let dets = select_predictions(&refined, &anchors, &cam, &cfg);
        assert_eq!(dets.len(), 3);
        // product scoring: anchor 0.5 x head 0.9
        assert!((dets[0].box3d.score - 0.45).abs() < 1e-12);
        // threshold applies to the head score, not the product: head 0.4
        // with anchor 0.05 is kept (product 0.02 < 0.03)
        let anchors = vec![Box3D::new(0, Vec3::new(0.0, 0.8, 20.0), (1.5, 1.6, 3.9), 0.0, 0.05)];
        let refined = vec![refined_at(0.4, 0)];
        let dets = select_predictions(&refined, &anchors, &cam, &cfg);
        assert_eq!(dets.len(), 1);
        assert!((dets[0].box3d.score - 0.02).abs() < 1e-12);
    }
}
