//! Empirical upper-bound analysis over the proposal grid and the
//! projection-overlap statistic.

use crate::error::{Error, Result};
use crate::eval::{ap_r40, Detection, EvalConfig, GroundTruthBox, Metric};
use crate::geom::{self, Box3D, CameraModel};
use crate::kitti::Difficulty;
use crate::sampler::{grid_offsets, GridSpec};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Best-case selection: expand each anchor over the grid and keep the
/// proposal with the highest volumetric IoU against any ground truth
/// (anchor score retained). Ties break toward the lowest grid index, i.e.
/// row-major from the most-negative offsets, so selection is
/// deterministic. Returns the selected proposals (one per anchor) and the
/// best IoU achieved for each ground truth by any proposal of any anchor.
pub fn oracle_select(
    gts: &[Box3D],
    anchors: &[Box3D],
    spec: &GridSpec,
    cam: &CameraModel,
) -> Result<(Vec<Detection>, Vec<f64>)> {
    let offsets = grid_offsets(spec);
    let mut per_gt_best = vec![0.0f64; gts.len()];
    let mut selected = Vec::with_capacity(anchors.len());
    for anchor in anchors {
        let mut best_iou = -1.0;
        let mut best_box = *anchor;
        for &(dx, dz) in &offsets {
            let mut p = *anchor;
            p.center.x += dx;
            p.center.z += dz;
            let mut prop_best = 0.0f64;
            for (gi, gt) in gts.iter().enumerate() {
                let iou = geom::iou_3d(&p, gt);
                prop_best = prop_best.max(iou);
                if iou > per_gt_best[gi] {
                    per_gt_best[gi] = iou;
                }
            }
            // strict improvement keeps the earliest (lowest grid index)
            // proposal on ties
            if prop_best > best_iou {
                best_iou = prop_best;
                best_box = p;
            }
        }
        let bbox2d = cam.project_box2d(&best_box)?;
        selected.push(Detection {
            box3d: best_box,
            bbox2d,
        });
    }
    Ok((selected, per_gt_best))
}

/// Mean over all proposals of the average 2D IoU with the k most
/// overlapping proposals from the same anchor.
pub fn iou_avg_topk(groups: &[Vec<Box3D>], cam: &CameraModel, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::contract("k must be positive"));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for group in groups {
        if group.len() <= k {
            return Err(Error::InsufficientNeighbors {
                group_size: group.len(),
                k,
            });
        }
        let boxes2d = group
            .iter()
            .map(|b| cam.project_box2d(b))
            .collect::<Result<Vec<_>>>()?;
        for (i, a) in boxes2d.iter().enumerate() {
            let mut ious: Vec<f64> = boxes2d
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, b)| geom::iou_2d(a, b))
                .collect();
            ious.sort_by(|x, y| y.partial_cmp(x).unwrap_or(std::cmp::Ordering::Equal));
            let topk: f64 = ious.iter().take(k).sum::<f64>() / k as f64;
            total += topk;
            count += 1;
        }
    }
    Ok(total / count.max(1) as f64)
}

/// Per-difficulty AP triple.
#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct ApTriple {
    pub easy: f64,
    pub moderate: f64,
    pub hard: f64,
}

/// Output of the upper-bound experiment.
///
/// Selection keeps, for each anchor, its best grid proposal by 3D IoU to
/// any ground truth; the reported AP evaluates that one-proposal-per-
/// anchor detection set (not the full expanded grid).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct UpperBoundReport {
    pub range_m: f64,
    pub stride_m: f64,
    pub proposals_per_anchor: usize,
    pub images: usize,
    pub anchors: usize,
    pub ground_truths: usize,
    /// AP of the oracle-selected proposals, per difficulty.
    pub oracle_ap: ApTriple,
    /// AP of the raw anchors, per difficulty.
    pub anchor_ap: ApTriple,
    /// Mean over ground truths of the best proposal IoU.
    pub mean_best_iou: f64,
    /// Best proposal IoU per ground truth, image-major order.
    pub per_gt_best_iou: Vec<f64>,
    /// Overlap statistic over proposals sharing an anchor.
    pub mean_iou_avg_k: f64,
    pub k: usize,
}

/// One image of input for the upper-bound experiment.
pub struct UpperBoundScene {
    pub gts: Vec<GroundTruthBox>,
    pub anchors: Vec<Box3D>,
    pub cam: CameraModel,
}

/// Run oracle selection + evaluation + overlap statistics over a set of
/// images.
pub fn upper_bound_report(
    scenes: &[UpperBoundScene],
    spec: &GridSpec,
    k: usize,
    iou_threshold: f64,
    category: u32,
) -> Result<UpperBoundReport> {
    struct PerImage {
        oracle: Vec<Detection>,
        raw: Vec<Detection>,
        best_iou: Vec<f64>,
        iou_avg_sum: f64,
        iou_avg_count: usize,
    }

    let per_image: Vec<PerImage> = scenes
        .par_iter()
        .map(|scene| -> Result<PerImage> {
            let gt_boxes: Vec<Box3D> = scene.gts.iter().map(|g| g.box3d).collect();
            let (oracle, best_iou) = oracle_select(&gt_boxes, &scene.anchors, spec, &scene.cam)?;
            let raw: Vec<Detection> = scene
                .anchors
                .iter()
                .filter_map(|a| {
                    scene.cam.project_box2d(a).ok().map(|bbox2d| Detection {
                        box3d: *a,
                        bbox2d,
                    })
                })
                .collect();
            // overlap statistic over this image's anchor groups
            let groups: Vec<Vec<Box3D>> = scene
                .anchors
                .iter()
                .map(|a| crate::sampler::sample_proposals(a, spec))
                .collect();
            let (iou_avg_sum, iou_avg_count) = if groups.is_empty() {
                (0.0, 0)
            } else {
                let v = iou_avg_topk(&groups, &scene.cam, k)?;
                let n: usize = groups.iter().map(|g| g.len()).sum();
                (v * n as f64, n)
            };
            Ok(PerImage {
                oracle,
                raw,
                best_iou,
                iou_avg_sum,
                iou_avg_count,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let eval_images: Vec<(Vec<Detection>, Vec<GroundTruthBox>)> = per_image
        .iter()
        .zip(scenes)
        .map(|(pi, s)| (pi.oracle.clone(), s.gts.clone()))
        .collect();
    let raw_images: Vec<(Vec<Detection>, Vec<GroundTruthBox>)> = per_image
        .iter()
        .zip(scenes)
        .map(|(pi, s)| (pi.raw.clone(), s.gts.clone()))
        .collect();

    let ap_for = |images: &[(Vec<Detection>, Vec<GroundTruthBox>)]| -> ApTriple {
        let mut t = ApTriple::default();
        for d in Difficulty::ALL {
            let cfg = EvalConfig {
                iou_threshold,
                metric: Metric::IoU3D,
                difficulty: d,
                category,
            };
            let ap = ap_r40(images, &cfg).ap();
            match d {
                Difficulty::Easy => t.easy = ap,
                Difficulty::Moderate => t.moderate = ap,
                Difficulty::Hard => t.hard = ap,
                Difficulty::Ignored => {}
            }
        }
        t
    };

    let per_gt_best_iou: Vec<f64> = per_image.iter().flat_map(|p| p.best_iou.clone()).collect();
    let mean_best_iou = if per_gt_best_iou.is_empty() {
        0.0
    } else {
        per_gt_best_iou.iter().sum::<f64>() / per_gt_best_iou.len() as f64
    };
    let stat_count: usize = per_image.iter().map(|p| p.iou_avg_count).sum();
    let mean_iou_avg_k = if stat_count == 0 {
        0.0
    } else {
        per_image.iter().map(|p| p.iou_avg_sum).sum::<f64>() / stat_count as f64
    };

    Ok(UpperBoundReport {
        range_m: spec.range_m,
        stride_m: spec.stride_m,
        proposals_per_anchor: spec.proposal_count(),
        images: scenes.len(),
        anchors: scenes.iter().map(|s| s.anchors.len()).sum(),
        ground_truths: scenes.iter().map(|s| s.gts.len()).sum(),
        oracle_ap: ap_for(&eval_images),
        anchor_ap: ap_for(&raw_images),
        mean_best_iou,
        per_gt_best_iou,
        mean_iou_avg_k,
        k,
    })
}
