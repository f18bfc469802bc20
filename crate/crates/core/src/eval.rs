//! KITTI-protocol detection evaluation: greedy score-ordered matching and
//! 40-point interpolated average precision in 3D or BEV.

use crate::geom::{self, Box2D, Box3D};
use crate::kitti::Difficulty;
use serde::{Deserialize, Serialize};

/// Overlap metric used to accept a detection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Metric {
    IoU3D,
    IoUBEV,
}

impl Metric {
    fn overlap(&self, a: &Box3D, b: &Box3D) -> f64 {
        match self {
            Metric::IoU3D => geom::iou_3d(a, b),
            Metric::IoUBEV => geom::iou_bev(a, b),
        }
    }
}

/// What to evaluate: category, overlap metric and threshold, and the
/// difficulty band (bands are cumulative: evaluating `Hard` includes
/// easier ground truths).
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct EvalConfig {
    pub iou_threshold: f64,
    pub metric: Metric,
    pub difficulty: Difficulty,
    pub category: u32,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_threshold: 0.7,
            metric: Metric::IoU3D,
            difficulty: Difficulty::Moderate,
            category: 0,
        }
    }
}

/// A scored detection.
#[derive(Clone, Debug)]
pub struct Detection {
    pub box3d: Box3D,
    pub bbox2d: Box2D,
}

/// A ground-truth box with its difficulty tag. DontCare regions carry only
/// a meaningful 2D box.
#[derive(Clone, Debug)]
pub struct GroundTruthBox {
    pub box3d: Box3D,
    pub bbox2d: Box2D,
    pub difficulty: Difficulty,
    pub dont_care: bool,
}

/// Per-detection outcome of matching.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DetFlag {
    TruePositive,
    FalsePositive,
    /// Matched only an out-of-band ground truth or a DontCare region;
    /// contributes to neither precision nor recall.
    Ignored,
}

/// Matching result in the original detection order.
#[derive(Clone, Debug)]
pub struct MatchOutcome {
    pub det_flags: Vec<DetFlag>,
    pub gt_matched: Vec<bool>,
    /// Ground truths eligible at the configured difficulty.
    pub eligible_gts: usize,
}

/// 2D IoU above which a detection falls inside a DontCare region.
pub const DONT_CARE_IOU: f64 = 0.5;

/// Greedy one-to-one matching in descending score order. Each detection
/// claims the unmatched in-band ground truth of its category with the
/// highest overlap, provided the overlap reaches the threshold; detections
/// that only reach out-of-band ground truths or DontCare regions are
/// ignored, everything else unmatched is a false positive.
pub fn match_detections(
    dets: &[Detection],
    gts: &[GroundTruthBox],
    cfg: &EvalConfig,
) -> MatchOutcome {
    let eligible: Vec<bool> = gts
        .iter()
        .map(|g| {
            !g.dont_care
                && g.box3d.label == cfg.category
                && g.difficulty != Difficulty::Ignored
                && g.difficulty <= cfg.difficulty
        })
        .collect();
    // out-of-band same-category boxes absorb detections instead of
    // penalizing them
    let ignorable: Vec<bool> = gts
        .iter()
        .zip(&eligible)
        .map(|(g, &e)| !g.dont_care && g.box3d.label == cfg.category && !e)
        .collect();

    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .box3d
            .score
            .partial_cmp(&dets[a].box3d.score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });

    let mut gt_matched = vec![false; gts.len()];
    let mut det_flags = vec![DetFlag::FalsePositive; dets.len()];
    for &di in &order {
        let det = &dets[di];
        if det.box3d.label != cfg.category {
            det_flags[di] = DetFlag::Ignored;
            continue;
        }
        let mut best: Option<(usize, f64)> = None;
        for (gi, gt) in gts.iter().enumerate() {
            if !eligible[gi] || gt_matched[gi] {
                continue;
            }
            let ov = cfg.metric.overlap(&det.box3d, &gt.box3d);
            if ov >= cfg.iou_threshold && best.map_or(true, |(_, b)| ov > b) {
                best = Some((gi, ov));
            }
        }
        if let Some((gi, _)) = best {
            gt_matched[gi] = true;
            det_flags[di] = DetFlag::TruePositive;
            continue;
        }
        // out-of-band ground truth?
        let hits_ignorable = gts.iter().enumerate().any(|(gi, gt)| {
            ignorable[gi] && cfg.metric.overlap(&det.box3d, &gt.box3d) >= cfg.iou_threshold
        });
        if hits_ignorable {
            det_flags[di] = DetFlag::Ignored;
            continue;
        }
        // DontCare region?
        let in_dont_care = gts
            .iter()
            .any(|g| g.dont_care && geom::iou_2d(&det.bbox2d, &g.bbox2d) > DONT_CARE_IOU);
        if in_dont_care {
            det_flags[di] = DetFlag::Ignored;
        }
    }

    MatchOutcome {
        det_flags,
        gt_matched,
        eligible_gts: eligible.iter().filter(|&&e| e).count(),
    }
}

/// The 41 recall sample points {0, 1/40, ..., 1} with interpolated
/// precision at each; AP is the mean over the 40 nonzero points, scaled
/// to [0, 100].
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PRCurve {
    pub recall: Vec<f64>,
    pub precision: Vec<f64>,
    pub ap: f64,
}

/// AP plus a flag for the degenerate no-ground-truth case.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ApResult {
    pub curve: PRCurve,
    /// Set when no eligible ground truth existed; AP is reported as 0.
    pub no_ground_truth: bool,
}

impl ApResult {
    pub fn ap(&self) -> f64 {
        self.curve.ap
    }
}

/// 40-point interpolated average precision over a set of images.
pub fn ap_r40(images: &[(Vec<Detection>, Vec<GroundTruthBox>)], cfg: &EvalConfig) -> ApResult {
    let mut scored: Vec<(f64, bool)> = Vec::new(); // (score, is_tp)
    let mut total_gts = 0usize;
    for (dets, gts) in images {
        let outcome = match_detections(dets, gts, cfg);
        total_gts += outcome.eligible_gts;
        for (di, flag) in outcome.det_flags.iter().enumerate() {
            match flag {
                DetFlag::TruePositive => scored.push((dets[di].box3d.score, true)),
                DetFlag::FalsePositive => scored.push((dets[di].box3d.score, false)),
                DetFlag::Ignored => {}
            }
        }
    }

    let recall_points: Vec<f64> = (0..=40).map(|i| i as f64 / 40.0).collect();
    if total_gts == 0 {
        return ApResult {
            curve: PRCurve {
                recall: recall_points,
                precision: vec![0.0; 41],
                ap: 0.0,
            },
            no_ground_truth: true,
        };
    }

    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(std::cmp::Ordering::Equal));
    let mut pr: Vec<(f64, f64)> = Vec::with_capacity(scored.len()); // (recall, precision)
    let mut tp = 0usize;
    for (rank, (_, is_tp)) in scored.iter().enumerate() {
        if *is_tp {
            tp += 1;
        }
        pr.push((
            tp as f64 / total_gts as f64,
            tp as f64 / (rank + 1) as f64,
        ));
    }

    // p_interp(r) = max precision over points with recall >= r
    let precision: Vec<f64> = recall_points
        .iter()
        .map(|&r| {
            pr.iter()
                .filter(|(rec, _)| *rec >= r - 1e-12)
                .map(|(_, p)| *p)
                .fold(0.0, f64::max)
        })
        .collect();
    let ap = precision.iter().skip(1).sum::<f64>() / 40.0 * 100.0;
    ApResult {
        curve: PRCurve {
            recall: recall_points,
            precision,
            ap,
        },
        no_ground_truth: false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::Vec3;

    fn mk_det(x: f64, z: f64, score: f64) -> Detection {
        Detection {
            box3d: Box3D::new(0, Vec3::new(x, 0.8, z), (1.5, 1.6, 3.9), 0.0, score),
            bbox2d: Box2D::new(x * 10.0, 0.0, x * 10.0 + 40.0, 50.0),
        }
    }

    fn mk_gt(x: f64, z: f64, difficulty: Difficulty) -> GroundTruthBox {
        GroundTruthBox {
            box3d: Box3D::new(0, Vec3::new(x, 0.8, z), (1.5, 1.6, 3.9), 0.0, 1.0),
            bbox2d: Box2D::new(x * 10.0, 0.0, x * 10.0 + 40.0, 50.0),
            difficulty,
            dont_care: false,
        }
    }

    #[test]
    fn all_exact_matches_are_tp() {
        let dets = vec![mk_det(0.0, 10.0, 0.9), mk_det(8.0, 20.0, 0.8)];
        let gts = vec![
            mk_gt(0.0, 10.0, Difficulty::Easy),
            mk_gt(8.0, 20.0, Difficulty::Easy),
        ];
        let out = match_detections(&dets, &gts, &EvalConfig::default());
        assert!(out.det_flags.iter().all(|f| *f == DetFlag::TruePositive));
        assert_eq!(out.eligible_gts, 2);
    }

    #[test]
    fn second_detection_on_same_gt_is_fp() {
        let dets = vec![mk_det(0.0, 10.0, 0.9), mk_det(0.05, 10.0, 0.5)];
        let gts = vec![mk_gt(0.0, 10.0, Difficulty::Easy)];
        let out = match_detections(&dets, &gts, &EvalConfig::default());
        assert_eq!(out.det_flags[0], DetFlag::TruePositive);
        assert_eq!(out.det_flags[1], DetFlag::FalsePositive);
    }

    #[test]
    fn out_of_band_gt_ignores_detection() {
        let dets = vec![mk_det(0.0, 10.0, 0.9)];
        let gts = vec![mk_gt(0.0, 10.0, Difficulty::Hard)];
        let cfg = EvalConfig {
            difficulty: Difficulty::Easy,
            ..Default::default()
        };
        let out = match_detections(&dets, &gts, &cfg);
        assert_eq!(out.det_flags[0], DetFlag::Ignored);
        assert_eq!(out.eligible_gts, 0);
    }

    #[test]
    fn dont_care_region_ignores_detection() {
        let dets = vec![mk_det(0.0, 10.0, 0.9)];
        let mut dc = mk_gt(0.0, 10.0, Difficulty::Ignored);
        dc.dont_care = true;
        dc.bbox2d = Box2D::new(-5.0, -5.0, 45.0, 55.0);
        let out = match_detections(&dets, &[dc], &EvalConfig::default());
        assert_eq!(out.det_flags[0], DetFlag::Ignored);
    }

    /// Direct transcription of the matching rules with plain loops,
    /// used as an independent oracle.
    fn oracle_flags(dets: &[Detection], gts: &[GroundTruthBox], cfg: &EvalConfig) -> Vec<DetFlag> {
        let mut idx: Vec<usize> = (0..dets.len()).collect();
        idx.sort_by(|&a, &b| dets[b].box3d.score.partial_cmp(&dets[a].box3d.score).unwrap());
        let mut taken = vec![false; gts.len()];
        let mut flags = vec![DetFlag::FalsePositive; dets.len()];
        for &i in &idx {
            if dets[i].box3d.label != cfg.category {
                flags[i] = DetFlag::Ignored;
                continue;
            }
            let mut best_gt = None;
            let mut best_ov = cfg.iou_threshold;
            for (j, g) in gts.iter().enumerate() {
                if g.dont_care || g.box3d.label != cfg.category || taken[j] {
                    continue;
                }
                if g.difficulty == Difficulty::Ignored || g.difficulty > cfg.difficulty {
                    continue;
                }
                let ov = cfg.metric.overlap(&dets[i].box3d, &g.box3d);
                if ov > best_ov || (best_gt.is_none() && ov >= cfg.iou_threshold) {
                    best_ov = ov;
                    best_gt = Some(j);
                }
            }
            if let Some(j) = best_gt {
                taken[j] = true;
                flags[i] = DetFlag::TruePositive;
                continue;
            }
            let near_ignorable = gts.iter().any(|g| {
                !g.dont_care
                    && g.box3d.label == cfg.category
                    && (g.difficulty == Difficulty::Ignored || g.difficulty > cfg.difficulty)
                    && cfg.metric.overlap(&dets[i].box3d, &g.box3d) >= cfg.iou_threshold
            });
            if near_ignorable {
                flags[i] = DetFlag::Ignored;
                continue;
            }
            if gts.iter().any(|g| {
                g.dont_care && geom::iou_2d(&dets[i].bbox2d, &g.bbox2d) > DONT_CARE_IOU
            }) {
                flags[i] = DetFlag::Ignored;
            }
        }
        flags
    }

    #[test]
    fn mixed_scene_matches_assignment_oracle() {
        // 6 detections vs 4 ground truths of mixed difficulty
        let dets = vec![
            mk_det(0.0, 10.0, 0.95),
            mk_det(0.3, 10.0, 0.90), // duplicate on gt 0
            mk_det(8.0, 20.0, 0.85),
            mk_det(16.0, 30.0, 0.80),
            mk_det(40.0, 55.0, 0.75), // matches nothing
            mk_det(24.0, 40.0, 0.70), // matches a hard gt
        ];
        let gts = vec![
            mk_gt(0.0, 10.0, Difficulty::Easy),
            mk_gt(8.0, 20.0, Difficulty::Moderate),
            mk_gt(16.0, 30.0, Difficulty::Easy),
            mk_gt(24.0, 40.0, Difficulty::Hard),
        ];
        let cfg = EvalConfig {
            difficulty: Difficulty::Moderate,
            ..Default::default()
        };
        let out = match_detections(&dets, &gts, &cfg);
        assert_eq!(out.det_flags, oracle_flags(&dets, &gts, &cfg));
        assert_eq!(out.eligible_gts, 3);
    }

    #[test]
    fn perfect_detections_score_100() {
        let images: Vec<_> = (0..5)
            .map(|i| {
                let x = i as f64 * 5.0;
                (
                    vec![mk_det(x, 15.0, 0.9)],
                    vec![mk_gt(x, 15.0, Difficulty::Easy)],
                )
            })
            .collect();
        let res = ap_r40(&images, &EvalConfig::default());
        assert_eq!(res.ap(), 100.0);
        assert!(!res.no_ground_truth);
    }

    #[test]
    fn no_detections_and_no_gts() {
        let images = vec![(Vec::new(), vec![mk_gt(0.0, 10.0, Difficulty::Easy)])];
        let res = ap_r40(&images, &EvalConfig::default());
        assert_eq!(res.ap(), 0.0);
        let empty = vec![(Vec::new(), Vec::new())];
        let res = ap_r40(&empty, &EvalConfig::default());
        assert_eq!(res.ap(), 0.0);
        assert!(res.no_ground_truth);
    }

    #[test]
    fn lowest_score_zero_overlap_fp_never_raises_ap() {
        let mut images: Vec<_> = (0..4)
            .map(|i| {
                let x = i as f64 * 6.0;
                (
                    vec![mk_det(x, 15.0, 0.5 + i as f64 * 0.1)],
                    vec![mk_gt(x, 15.0, Difficulty::Easy)],
                )
            })
            .collect();
        // miss one gt so the curve is non-trivial
        images[3].0.clear();
        let base = ap_r40(&images, &EvalConfig::default()).ap();
        images[0].0.push(mk_det(100.0, 70.0, 0.01));
        let with_fp = ap_r40(&images, &EvalConfig::default()).ap();
        assert!(with_fp <= base + 1e-12);
    }

    #[test]
    fn ap_invariant_under_monotone_rescoring() {
        let mut images: Vec<_> = (0..6)
            .map(|i| {
                let x = i as f64 * 6.0;
                let score = 0.3 + 0.1 * i as f64;
                let mut dets = vec![mk_det(x, 15.0, score)];
                if i % 2 == 0 {
                    dets.push(mk_det(x + 50.0, 60.0, score - 0.05)); // fp
                }
                (dets, vec![mk_gt(x, 15.0, Difficulty::Easy)])
            })
            .collect();
        let base = ap_r40(&images, &EvalConfig::default()).ap();
        for (dets, _) in images.iter_mut() {
            for d in dets.iter_mut() {
                d.box3d.score = (d.box3d.score * 0.5 + 0.1).clamp(0.0, 1.0); // strictly monotone
            }
        }
        let rescored = ap_r40(&images, &EvalConfig::default()).ap();
        assert!((base - rescored).abs() < 1e-12);
    }

    #[test]
    fn ap_monotone_in_threshold() {
        let images: Vec<_> = (0..6)
            .map(|i| {
                let x = i as f64 * 6.0;
                (
                    vec![mk_det(x + 0.2 * i as f64, 15.0, 0.9 - 0.05 * i as f64)],
                    vec![mk_gt(x, 15.0, Difficulty::Easy)],
                )
            })
            .collect();
        let mut prev = f64::INFINITY;
        for thr in [0.3, 0.5, 0.7, 0.9] {
            let cfg = EvalConfig {
                iou_threshold: thr,
                ..Default::default()
            };
            let ap = ap_r40(&images, &cfg).ap();
            assert!(ap <= prev + 1e-12, "thr {thr}: {ap} > {prev}");
            prev = ap;
        }
    }
}
