//! Set-prediction training over synthetic or file-backed scenes.
//!
//! Each step: expand anchors into grid proposals, featurize, run the
//! network, match proposals to ground truths with the bipartite assigner
//! (using the current class probabilities), and descend the composite
//! loss. Scenes in a batch evaluate in parallel; gradients are reduced in
//! scene order, so a run is deterministic for a fixed (config, seed) and
//! thread-count independent.

use super::infer::{prepare_proposals, ProposalBatch};
use super::loss::{total_loss, LossConfig, LossParts, LossTargets};
use super::model::{forward, softmax_rows, ModelConfig, ModelParams, ParamVars};
use super::optim::{optimizer_step, OptimizerConfig, OptimizerState};
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::geom::Box3D;
use crate::kitti;
use crate::matching::{self, MatchConfig, MatchGt, MatchPred};
use crate::sampler::{GridSpec, NormConstants};
use crate::synth::{generate_scene, SceneConfig, SceneData};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::PathBuf;

/// Anything that can hand out scenes by index.
pub trait SceneSource: Sync {
    fn len(&self) -> usize;
    fn scene(&self, idx: usize) -> Result<SceneData>;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Scenes generated on the fly; scene `i` uses stream `offset + i`.
pub struct SynthSource {
    pub cfg: SceneConfig,
    pub count: usize,
    pub offset: u64,
}

impl SceneSource for SynthSource {
    fn len(&self) -> usize {
        self.count
    }

    fn scene(&self, idx: usize) -> Result<SceneData> {
        generate_scene(&self.cfg, self.offset + idx as u64)
    }
}

/// Scenes read from KITTI-format directories plus TNSR feature maps.
/// `labels` may be absent for inference-only use.
pub struct DirSource {
    pub frames: Vec<String>,
    pub labels: Option<PathBuf>,
    pub preds: PathBuf,
    pub calib: PathBuf,
    pub features: PathBuf,
}

impl DirSource {
    /// Discover frame ids from the prediction directory (`*.txt`, sorted).
    pub fn discover(
        labels: Option<PathBuf>,
        preds: PathBuf,
        calib: PathBuf,
        features: PathBuf,
    ) -> Result<Self> {
        let mut frames = Vec::new();
        for entry in std::fs::read_dir(&preds)? {
            let entry = entry?;
            let path = entry.path();
            if path.extension().and_then(|e| e.to_str()) == Some("txt") {
                if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                    frames.push(stem.to_string());
                }
            }
        }
        frames.sort();
        Ok(Self {
            frames,
            labels,
            preds,
            calib,
            features,
        })
    }
}

impl SceneSource for DirSource {
    fn len(&self) -> usize {
        self.frames.len()
    }

    fn scene(&self, idx: usize) -> Result<SceneData> {
        let frame = &self.frames[idx];
        let cam = kitti::parse_calib_file(&std::fs::read_to_string(
            self.calib.join(format!("{frame}.txt")),
        )?)?;
        let anchors = kitti::parse_label_file(&std::fs::read_to_string(
            self.preds.join(format!("{frame}.txt")),
        )?)?
        .iter()
        .filter(|r| !r.is_dont_care())
        .map(|r| r.to_box3d())
        .collect::<Result<Vec<_>>>()?;
        let (gts, gt_bbox2d) = match &self.labels {
            Some(dir) => {
                let recs =
                    kitti::parse_label_file(&std::fs::read_to_string(dir.join(format!("{frame}.txt")))?)?;
                let mut gts = Vec::new();
                let mut boxes = Vec::new();
                for r in recs.iter().filter(|r| !r.is_dont_care()) {
                    gts.push(r.to_box3d()?);
                    boxes.push(r.bbox2d);
                }
                (gts, boxes)
            }
            None => (Vec::new(), Vec::new()),
        };
        let features = crate::tnsr::read_feature_map(&self.features.join(format!("{frame}.tnsr")))?;
        Ok(SceneData {
            gts,
            gt_bbox2d,
            anchors,
            cam,
            features,
        })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub grid: GridSpec,
    pub model: ModelConfig,
    pub optimizer: OptimizerConfig,
    pub loss: LossConfig,
    pub matching: MatchConfig,
    pub norm: NormConstants,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 24,
            batch_size: 16,
            seed: 0,
            grid: GridSpec::default(),
            model: ModelConfig::default(),
            optimizer: OptimizerConfig::default(),
            loss: LossConfig::default(),
            matching: MatchConfig::default(),
            norm: NormConstants::default(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub loss: LossParts,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
}

/// A scene after proposal expansion and featurization, ready for the
/// forward pass and the matcher.
pub struct PreparedScene {
    pub batch: ProposalBatch,
    pub match_gts: Vec<MatchGt>,
    pub gt_boxes: Vec<Box3D>,
    pub image_size: (f64, f64),
}

pub fn prepare_scene(
    scene: &SceneData,
    grid: &GridSpec,
    norm: &NormConstants,
) -> Result<PreparedScene> {
    let batch = prepare_proposals(&scene.anchors, grid, &scene.cam, &scene.features, norm)?;
    let match_gts: Vec<MatchGt> = scene
        .gts
        .iter()
        .zip(&scene.gt_bbox2d)
        .map(|(g, bbox)| MatchGt {
            label: g.label,
            bbox2d: *bbox,
            box3d: *g,
        })
        .collect();
    Ok(PreparedScene {
        batch,
        match_gts,
        gt_boxes: scene.gts.clone(),
        image_size: scene.cam.image_size,
    })
}

/// Derive loss targets from an assignment: matched proposals take their
/// ground truth's class and residuals, everything else is background.
pub fn build_targets(
    assignment: &matching::Assignment,
    prepared: &PreparedScene,
    num_classes: usize,
    norm: &NormConstants,
) -> Result<LossTargets> {
    let n = prepared.batch.boxes.len();
    let mut onehot = Tensor::zeros(&[n, num_classes]);
    let mut matched = Vec::with_capacity(assignment.real_slots);
    let mut dp = Vec::with_capacity(assignment.real_slots * 3);
    let mut dd = Vec::with_capacity(assignment.real_slots * 3);
    for (slot, pred) in assignment.matched_pairs() {
        let gt = &prepared.gt_boxes[slot];
        let class = gt.label as usize;
        if class >= num_classes {
            return Err(Error::contract(format!(
                "ground-truth class {class} outside the {num_classes}-way head"
            )));
        }
        onehot.data[pred * num_classes + class] = 1.0;
        matched.push(pred);
        let prop = &prepared.batch.boxes[pred];
        let g_n = norm.normalize(gt.center);
        let p_n = norm.normalize(prop.center);
        dp.extend_from_slice(&[g_n.x - p_n.x, g_n.y - p_n.y, g_n.z - p_n.z]);
        dd.extend_from_slice(&[
            gt.dims.0 - prop.dims.0,
            gt.dims.1 - prop.dims.1,
            gt.dims.2 - prop.dims.2,
        ]);
    }
    let m = matched.len();
    Ok(LossTargets {
        cls_onehot: onehot,
        matched,
        dp_star: Tensor::from_vec(&[m, 3], dp),
        dd_star: Tensor::from_vec(&[m, 3], dd),
    })
}

/// Forward + matching + loss for one scene on an existing tape. Passing
/// `fixed_targets` skips matching (used by gradient checks so the
/// assignment stays constant across perturbations).
pub fn scene_loss(
    tape: &mut Tape,
    pv: &ParamVars,
    cfg: &TrainConfig,
    prepared: &PreparedScene,
    fixed_targets: Option<&LossTargets>,
) -> Result<(Var, LossParts, LossTargets)> {
    let out = forward(tape, pv, &cfg.model, &prepared.batch.inputs)?;
    let targets = match fixed_targets {
        Some(t) => t.clone(),
        None => {
            let probs = softmax_rows(tape.value(out.logits));
            let preds: Vec<MatchPred> = prepared
                .batch
                .boxes
                .iter()
                .enumerate()
                .map(|(i, b)| MatchPred {
                    probs: probs[i].clone(),
                    bbox2d: prepared.batch.bbox2d[i],
                    box3d: *b,
                })
                .collect();
            let assignment = matching::assign(
                &prepared.match_gts,
                &preds,
                prepared.image_size,
                &cfg.matching,
            )?;
            build_targets(&assignment, prepared, cfg.model.num_classes, &cfg.norm)?
        }
    };
    let (loss, parts) = total_loss(tape, &out, &targets, &cfg.loss)?;
    Ok((loss, parts, targets))
}

/// Gradients of the scene loss with respect to every parameter, in
/// `fields()` order.
pub fn scene_gradients(
    params: &ModelParams,
    cfg: &TrainConfig,
    prepared: &PreparedScene,
) -> Result<(Vec<Tensor>, LossParts)> {
    let mut tape = Tape::new();
    let pv = params.tape(&mut tape);
    let (loss, parts, _) = scene_loss(&mut tape, &pv, cfg, prepared, None)?;
    let grads = tape.backward(loss);
    let out = pv
        .fields()
        .iter()
        .zip(params.fields().iter())
        .map(|((_, var, _), (_, t, _))| grads.get_or_zeros(**var, &t.shape))
        .collect();
    Ok((out, parts))
}

/// Run the training loop. `on_epoch` fires after each epoch with the
/// current parameters (checkpointing hook).
pub fn train<S: SceneSource>(
    cfg: &TrainConfig,
    source: &S,
    mut on_epoch: impl FnMut(usize, &ModelParams, &EpochStats) -> Result<()>,
) -> Result<(ModelParams, TrainReport)> {
    cfg.model.validate()?;
    if source.is_empty() {
        return Err(Error::Config("training needs at least one scene".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let mut params = ModelParams::init(&cfg.model, cfg.seed)?;
    let mut state = OptimizerState::new(&params);
    let mut report = TrainReport::default();

    let n = source.len();
    for epoch in 0..cfg.epochs {
        // deterministic shuffle per epoch
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5ce3_ea11u64 ^ (epoch as u64) << 20);
        for i in (1..n).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        let lr = cfg.optimizer.lr_at_epoch(epoch);
        let mut epoch_parts = LossParts::default();
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let results: Vec<Result<(Vec<Tensor>, LossParts)>> = chunk
                .par_iter()
                .map(|&idx| {
                    let scene = source.scene(idx)?;
                    let prepared = prepare_scene(&scene, &cfg.grid, &cfg.norm)?;
                    scene_gradients(&params, cfg, &prepared)
                })
                .collect();
            let mut grad_sum: Option<Vec<Tensor>> = None;
            let mut batch_parts = LossParts::default();
            let mut count = 0usize;
            for r in results {
                let (grads, parts) = r?;
                batch_parts.total += parts.total;
                batch_parts.cls += parts.cls;
                batch_parts.size += parts.size;
                batch_parts.loc += parts.loc;
                count += 1;
                match &mut grad_sum {
                    None => grad_sum = Some(grads),
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(grads) {
                            for (x, y) in a.data.iter_mut().zip(g.data) {
                                *x += y;
                            }
                        }
                    }
                }
            }
            let mut grads = grad_sum.expect("non-empty batch");
            let inv = 1.0 / count as f64;
            for g in grads.iter_mut() {
                for x in g.data.iter_mut() {
                    *x *= inv;
                }
            }
            optimizer_step(&mut params, &grads, &mut state, &cfg.optimizer, lr)?;
            epoch_parts.total += batch_parts.total * inv;
            epoch_parts.cls += batch_parts.cls * inv;
            epoch_parts.size += batch_parts.size * inv;
            epoch_parts.loc += batch_parts.loc * inv;
            batches += 1;
        }
        let inv_b = 1.0 / batches.max(1) as f64;
        let stats = EpochStats {
            epoch,
            lr,
            loss: LossParts {
                total: epoch_parts.total * inv_b,
                cls: epoch_parts.cls * inv_b,
                size: epoch_parts.size * inv_b,
                loc: epoch_parts.loc * inv_b,
            },
        };
        on_epoch(epoch, &params, &stats)?;
        report.epochs.push(stats);
    }
    Ok((params, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::CameraSpec;

    fn tiny_train_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            batch_size: 2,
            seed: 5,
            grid: GridSpec::new(1.5, 1.5), // 9 proposals per anchor
            model: ModelConfig {
                hidden_dim: 16,
                geo_groups: 2,
                heads: 4,
                channels: 4,
                num_classes: 3,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    fn tiny_source(count: usize) -> SynthSource {
        SynthSource {
            cfg: SceneConfig {
                seed: 77,
                n_objects: (1, 2),
                channels: 4,
                feature_stride: 16.0,
                camera: CameraSpec {
                    focal: 150.0,
                    cx: 120.0,
                    cy: 40.0,
                    width: 240.0,
                    height: 80.0,
                },
                depth_range: (8.0, 25.0),
                ..Default::default()
            },
            count,
            offset: 0,
        }
    }

    #[test]
    fn training_is_deterministic_and_loss_moves() {
        let cfg = tiny_train_cfg();
        let source = tiny_source(4);
        let (p1, r1) = train(&cfg, &source, |_, _, _| Ok(())).unwrap();
        let (p2, r2) = train(&cfg, &source, |_, _, _| Ok(())).unwrap();
        for ((_, a, _), (_, b, _)) in p1.fields().iter().zip(p2.fields().iter()) {
            let ab: Vec<u64> = a.data.iter().map(|f| f.to_bits()).collect();
            let bb: Vec<u64> = b.data.iter().map(|f| f.to_bits()).collect();
            assert_eq!(ab, bb);
        }
        assert_eq!(r1.epochs.len(), 2);
        assert!((r1.epochs[0].loss.total - r2.epochs[0].loss.total).abs() == 0.0);
        // parameters moved away from the initialization
        let init = ModelParams::init(&cfg.model, cfg.seed).unwrap();
        let moved = p1
            .fields()
            .iter()
            .zip(init.fields().iter())
            .any(|((_, a, _), (_, b, _))| a.data != b.data);
        assert!(moved);
    }

    #[test]
    fn matched_count_equals_gt_count() {
        let cfg = tiny_train_cfg();
        let source = tiny_source(1);
        let scene = source.scene(0).unwrap();
        let prepared = prepare_scene(&scene, &cfg.grid, &cfg.norm).unwrap();
        let params = ModelParams::init(&cfg.model, 1).unwrap();
        let mut tape = Tape::new();
        let pv = params.tape(&mut tape);
        let (_, _, targets) = scene_loss(&mut tape, &pv, &cfg, &prepared, None).unwrap();
        assert_eq!(targets.matched.len(), scene.gts.len());
        let hot: f64 = targets.cls_onehot.data.iter().sum();
        assert_eq!(hot as usize, scene.gts.len());
    }

    #[test]
    fn dir_source_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let (labels, preds, calib, feats) = (
            dir.path().join("label_2"),
            dir.path().join("preds"),
            dir.path().join("calib"),
            dir.path().join("features"),
        );
        for d in [&labels, &preds, &calib, &feats] {
            std::fs::create_dir_all(d).unwrap();
        }
        let source = tiny_source(2);
        for idx in 0..2 {
            let scene = source.scene(idx).unwrap();
            let frame = format!("{idx:06}");
            let gt_recs: Vec<kitti::LabelRecord> = scene
                .gts
                .iter()
                .map(|g| kitti::LabelRecord::from_box3d(g, &scene.cam).unwrap())
                .collect();
            std::fs::write(labels.join(format!("{frame}.txt")), kitti::write_labels(&gt_recs))
                .unwrap();
            let anchor_recs: Vec<kitti::LabelRecord> = scene
                .anchors
                .iter()
                .map(|a| kitti::LabelRecord::from_box3d(a, &scene.cam).unwrap())
                .collect();
            std::fs::write(
                preds.join(format!("{frame}.txt")),
                kitti::write_predictions(&anchor_recs).unwrap(),
            )
            .unwrap();
            std::fs::write(calib.join(format!("{frame}.txt")), kitti::write_calib(&scene.cam))
                .unwrap();
            crate::tnsr::write_feature_map(&feats.join(format!("{frame}.tnsr")), &scene.features)
                .unwrap();
        }
        let ds = DirSource::discover(Some(labels), preds, calib, feats).unwrap();
        assert_eq!(ds.len(), 2);
        let back = ds.scene(0).unwrap();
        let orig = source.scene(0).unwrap();
        assert_eq!(back.gts.len(), orig.gts.len());
        assert_eq!(back.anchors.len(), orig.anchors.len());
        assert!((back.anchors[0].center.x - orig.anchors[0].center.x).abs() < 1e-5);
        assert_eq!(back.features.channels, orig.features.channels);
    }
}
