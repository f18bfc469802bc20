//! Subcommand implementations. Every report is JSON with the config hash
//! embedded; per-frame work runs on the shared worker pool and results
//! are aggregated in sorted frame order so identical inputs produce
//! identical bytes.

use crate::config::{Report, RunConfig};
use boxdenoise3d_core::analysis::{self, UpperBoundScene};
use boxdenoise3d_core::error::{Error, Result};
use boxdenoise3d_core::eval::{ap_r40, Detection, EvalConfig, GroundTruthBox, Metric};
use boxdenoise3d_core::kitti::{self, Difficulty, LabelRecord};
use boxdenoise3d_core::net::infer::{infer_scene, InferConfig};
use boxdenoise3d_core::net::model::ModelParams;
use boxdenoise3d_core::net::train::{self, DirSource, SceneSource, SynthSource};
use boxdenoise3d_core::sampler::{sample_proposals, GridSpec};
use boxdenoise3d_core::synth::{generate_scene, truncation_fraction};
use boxdenoise3d_core::tnsr;
use boxdenoise3d_core::{Box3D, CameraModel, Vec3};
use rayon::prelude::*;
use serde::Serialize;
use std::path::Path;

/// Bounded worker pool: BOXDENOISE3D_THREADS beats the config value.
pub fn init_thread_pool(cfg: &RunConfig) {
    let env = std::env::var("BOXDENOISE3D_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok());
    if let Some(n) = env.or(cfg.threads) {
        // a second initialization (e.g. in tests) keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global();
    }
}

fn grid_from(cfg: &RunConfig, range: Option<f64>, stride: Option<f64>) -> Result<GridSpec> {
    let g = GridSpec {
        range_m: range.unwrap_or(cfg.grid.range_m),
        stride_m: stride.unwrap_or(cfg.grid.stride_m),
    };
    if g.range_m <= 0.0 || g.stride_m <= 0.0 {
        return Err(Error::Config("range and stride must be positive".into()));
    }
    Ok(g)
}

fn list_frames(dir: &Path) -> Result<Vec<String>> {
    let mut frames = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().and_then(|e| e.to_str()) == Some("txt") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                frames.push(stem.to_string());
            }
        }
    }
    frames.sort();
    if frames.is_empty() {
        return Err(Error::Config(format!(
            "no .txt frames found in {}",
            dir.display()
        )));
    }
    Ok(frames)
}

fn read_records(path: &Path) -> Result<Vec<LabelRecord>> {
    kitti::parse_label_file(&std::fs::read_to_string(path)?)
}

fn read_calib(path: &Path) -> Result<CameraModel> {
    kitti::parse_calib_file(&std::fs::read_to_string(path)?)
}

fn emit<T: Serialize>(cfg: &RunConfig, body: T, out: Option<&Path>) -> Result<()> {
    let report = Report::new(cfg, body);
    match out {
        Some(path) => report.write(path)?,
        None => println!(
            "{}",
            serde_json::to_string_pretty(&report).expect("report serialization")
        ),
    }
    Ok(())
}

// ── sample ──

fn sample_one(
    records: &[LabelRecord],
    cam: Option<&CameraModel>,
    grid: &GridSpec,
) -> Result<Vec<LabelRecord>> {
    let mut out = Vec::new();
    for rec in records.iter().filter(|r| !r.is_dont_care()) {
        let anchor = rec.to_box3d()?;
        for p in sample_proposals(&anchor, grid) {
            let mut new_rec = rec.clone();
            new_rec.location = Vec3::new(p.center.x, p.center.y + p.dims.0 / 2.0, p.center.z);
            new_rec.score = Some(anchor.score);
            if let Some(cam) = cam {
                if let Ok(bbox) = cam.project_box2d(&p) {
                    new_rec.bbox2d = bbox;
                    new_rec.truncation = truncation_fraction(&p, cam);
                } else {
                    continue; // fully behind the camera
                }
            }
            out.push(new_rec);
        }
    }
    Ok(out)
}

pub fn sample(
    cfg: &RunConfig,
    preds: &Path,
    out: &Path,
    calib: Option<&Path>,
    range: Option<f64>,
    stride: Option<f64>,
) -> Result<()> {
    let grid = grid_from(cfg, range, stride)?;
    if preds.is_file() {
        let cam = calib.map(read_calib).transpose()?;
        let proposals = sample_one(&read_records(preds)?, cam.as_ref(), &grid)?;
        if let Some(parent) = out.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        std::fs::write(out, kitti::write_predictions(&proposals)?)?;
        return Ok(());
    }
    std::fs::create_dir_all(out)?;
    for frame in list_frames(preds)? {
        let cam = match calib {
            Some(dir) => Some(read_calib(&dir.join(format!("{frame}.txt")))?),
            None => None,
        };
        let recs = read_records(&preds.join(format!("{frame}.txt")))?;
        let proposals = sample_one(&recs, cam.as_ref(), &grid)?;
        std::fs::write(
            out.join(format!("{frame}.txt")),
            kitti::write_predictions(&proposals)?,
        )?;
    }
    Ok(())
}

// ── stats ──

#[derive(Serialize)]
struct StatsBody {
    range_m: f64,
    stride_m: f64,
    k: usize,
    frames: usize,
    anchors: usize,
    proposals: usize,
    mean_iou_avg_k: f64,
}

pub fn stats(
    cfg: &RunConfig,
    preds: &Path,
    calib: &Path,
    range: Option<f64>,
    stride: Option<f64>,
    k: Option<usize>,
    out: Option<&Path>,
) -> Result<()> {
    let grid = grid_from(cfg, range, stride)?;
    let k = k.unwrap_or(5);
    let frames = list_frames(preds)?;
    let per_frame: Vec<Result<(f64, usize, usize)>> = frames
        .par_iter()
        .map(|frame| -> Result<(f64, usize, usize)> {
            let cam = read_calib(&calib.join(format!("{frame}.txt")))?;
            let anchors: Vec<Box3D> = read_records(&preds.join(format!("{frame}.txt")))?
                .iter()
                .filter(|r| !r.is_dont_care())
                .map(|r| r.to_box3d())
                .collect::<Result<_>>()?;
            if anchors.is_empty() {
                return Ok((0.0, 0, 0));
            }
            let groups: Vec<Vec<Box3D>> = anchors
                .iter()
                .map(|a| sample_proposals(a, &grid))
                .collect();
            let stat = analysis::iou_avg_topk(&groups, &cam, k)?;
            let n: usize = groups.iter().map(|g| g.len()).sum();
            Ok((stat * n as f64, n, anchors.len()))
        })
        .collect();
    let mut weighted = 0.0;
    let mut proposals = 0usize;
    let mut anchors = 0usize;
    for r in per_frame {
        let (w, n, a) = r?;
        weighted += w;
        proposals += n;
        anchors += a;
    }
    let body = StatsBody {
        range_m: grid.range_m,
        stride_m: grid.stride_m,
        k,
        frames: frames.len(),
        anchors,
        proposals,
        mean_iou_avg_k: if proposals == 0 {
            0.0
        } else {
            weighted / proposals as f64
        },
    };
    emit(cfg, body, out)
}

// ── upperbound ──

fn ground_truths_from_records(recs: &[LabelRecord]) -> Result<Vec<GroundTruthBox>> {
    recs.iter()
        .map(|r| {
            if r.is_dont_care() {
                Ok(GroundTruthBox {
                    box3d: Box3D::new(kitti::DONT_CARE, Vec3::new(0.0, 0.0, 1.0), (0.1, 0.1, 0.1), 0.0, 1.0),
                    bbox2d: r.bbox2d,
                    difficulty: Difficulty::Ignored,
                    dont_care: true,
                })
            } else {
                Ok(GroundTruthBox {
                    box3d: r.to_box3d()?,
                    bbox2d: r.bbox2d,
                    difficulty: kitti::assign_difficulty(r),
                    dont_care: false,
                })
            }
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
pub fn upperbound(
    cfg: &RunConfig,
    labels: &Path,
    preds: &Path,
    calib: &Path,
    range: Option<f64>,
    stride: Option<f64>,
    k: Option<usize>,
    out: Option<&Path>,
    csv: Option<&Path>,
) -> Result<()> {
    let grid = grid_from(cfg, range, stride)?;
    let k = k.unwrap_or(5);
    let category = kitti::category_id(&cfg.eval.category);
    let frames = list_frames(preds)?;
    let scenes: Vec<UpperBoundScene> = frames
        .par_iter()
        .map(|frame| -> Result<UpperBoundScene> {
            let cam = read_calib(&calib.join(format!("{frame}.txt")))?;
            let gts = ground_truths_from_records(&read_records(
                &labels.join(format!("{frame}.txt")),
            )?)?;
            let anchors: Vec<Box3D> = read_records(&preds.join(format!("{frame}.txt")))?
                .iter()
                .filter(|r| !r.is_dont_care() && r.category == cfg.eval.category)
                .map(|r| r.to_box3d())
                .collect::<Result<_>>()?;
            Ok(UpperBoundScene { gts, anchors, cam })
        })
        .collect::<Result<_>>()?;
    let report =
        analysis::upper_bound_report(&scenes, &grid, k, cfg.eval.iou_threshold, category)?;
    if let Some(csv_path) = csv {
        let line = format!(
            "range,stride,proposals_per_anchor,oracle_easy,oracle_moderate,oracle_hard,anchor_easy,anchor_moderate,anchor_hard,mean_iou_avg_k\n{},{},{},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4},{:.6}\n",
            report.range_m,
            report.stride_m,
            report.proposals_per_anchor,
            report.oracle_ap.easy,
            report.oracle_ap.moderate,
            report.oracle_ap.hard,
            report.anchor_ap.easy,
            report.anchor_ap.moderate,
            report.anchor_ap.hard,
            report.mean_iou_avg_k,
        );
        std::fs::write(csv_path, line)?;
    }
    emit(cfg, report, out)
}

// ── eval ──

#[derive(Serialize)]
struct EvalBody {
    category: String,
    iou_threshold: f64,
    frames: usize,
    ap_3d_r40: ApRow,
    ap_bev_r40: ApRow,
}

#[derive(Serialize, Default)]
struct ApRow {
    easy: Option<f64>,
    moderate: Option<f64>,
    hard: Option<f64>,
}

#[allow(clippy::too_many_arguments)]
pub fn eval(
    cfg: &RunConfig,
    labels: &Path,
    preds: &Path,
    category: Option<String>,
    metric: Option<String>,
    difficulty: Option<String>,
    iou: Option<f64>,
    out: Option<&Path>,
) -> Result<()> {
    let category = category.unwrap_or_else(|| cfg.eval.category.clone());
    let threshold = iou.unwrap_or(cfg.eval.iou_threshold);
    let metric_filter = match metric.as_deref() {
        None => None,
        Some("iou3d") => Some(Metric::IoU3D),
        Some("ioubev") => Some(Metric::IoUBEV),
        Some(other) => {
            return Err(Error::Config(format!(
                "unknown metric '{other}' (expected iou3d or ioubev)"
            )))
        }
    };
    let difficulty_filter = match difficulty.as_deref() {
        None => None,
        Some("easy") => Some(Difficulty::Easy),
        Some("moderate") => Some(Difficulty::Moderate),
        Some("hard") => Some(Difficulty::Hard),
        Some(other) => {
            return Err(Error::Config(format!(
                "unknown difficulty '{other}' (expected easy, moderate, or hard)"
            )))
        }
    };

    let frames = list_frames(labels)?;
    let images: Vec<(Vec<Detection>, Vec<GroundTruthBox>)> = frames
        .par_iter()
        .map(|frame| -> Result<(Vec<Detection>, Vec<GroundTruthBox>)> {
            let gts = ground_truths_from_records(&read_records(
                &labels.join(format!("{frame}.txt")),
            )?)?;
            let pred_path = preds.join(format!("{frame}.txt"));
            let dets = if pred_path.exists() {
                read_records(&pred_path)?
                    .iter()
                    .filter(|r| !r.is_dont_care())
                    .map(|r| {
                        Ok(Detection {
                            box3d: r.to_box3d()?,
                            bbox2d: r.bbox2d,
                        })
                    })
                    .collect::<Result<_>>()?
            } else {
                Vec::new()
            };
            Ok((dets, gts))
        })
        .collect::<Result<_>>()?;

    let cat_id = kitti::category_id(&category);
    let run = |metric: Metric, difficulty: Difficulty| -> f64 {
        ap_r40(
            &images,
            &EvalConfig {
                iou_threshold: threshold,
                metric,
                difficulty,
                category: cat_id,
            },
        )
        .ap()
    };
    let row = |metric: Metric| -> ApRow {
        let mut r = ApRow::default();
        for d in Difficulty::ALL {
            if difficulty_filter.is_some_and(|f| f != d) {
                continue;
            }
            let ap = Some(run(metric, d));
            match d {
                Difficulty::Easy => r.easy = ap,
                Difficulty::Moderate => r.moderate = ap,
                Difficulty::Hard => r.hard = ap,
                Difficulty::Ignored => {}
            }
        }
        r
    };
    let body = EvalBody {
        category,
        iou_threshold: threshold,
        frames: frames.len(),
        ap_3d_r40: match metric_filter {
            Some(Metric::IoUBEV) => ApRow::default(),
            _ => row(Metric::IoU3D),
        },
        ap_bev_r40: match metric_filter {
            Some(Metric::IoU3D) => ApRow::default(),
            _ => row(Metric::IoUBEV),
        },
    };
    emit(cfg, body, out)
}

// ── gen-synth ──

#[derive(Serialize)]
struct GenSynthBody {
    scenes: usize,
    objects: usize,
    out_dir: String,
}

pub fn gen_synth(cfg: &RunConfig, count: usize, out_dir: &Path) -> Result<()> {
    let scene_cfg = cfg.scene_config();
    let dirs = [
        out_dir.join("label_2"),
        out_dir.join("preds"),
        out_dir.join("calib"),
        out_dir.join("features"),
    ];
    for d in &dirs {
        std::fs::create_dir_all(d)?;
    }
    let objects: usize = (0..count)
        .into_par_iter()
        .map(|idx| -> Result<usize> {
            let scene = generate_scene(&scene_cfg, idx as u64)?;
            let frame = format!("{idx:06}");
            let gt_recs: Vec<LabelRecord> = scene
                .gts
                .iter()
                .zip(&scene.gt_bbox2d)
                .map(|(g, bbox)| {
                    let mut rec = LabelRecord::from_box3d(g, &scene.cam)?;
                    rec.bbox2d = *bbox;
                    rec.truncation = truncation_fraction(g, &scene.cam);
                    rec.score = None;
                    Ok(rec)
                })
                .collect::<Result<_>>()?;
            std::fs::write(
                dirs[0].join(format!("{frame}.txt")),
                kitti::write_labels(&gt_recs),
            )?;
            let anchor_recs: Vec<LabelRecord> = scene
                .anchors
                .iter()
                .map(|a| LabelRecord::from_box3d(a, &scene.cam))
                .collect::<Result<_>>()?;
            std::fs::write(
                dirs[1].join(format!("{frame}.txt")),
                kitti::write_predictions(&anchor_recs)?,
            )?;
            std::fs::write(dirs[2].join(format!("{frame}.txt")), kitti::write_calib(&scene.cam))?;
            tnsr::write_feature_map(&dirs[3].join(format!("{frame}.tnsr")), &scene.features)?;
            Ok(scene.gts.len())
        })
        .collect::<Result<Vec<usize>>>()?
        .iter()
        .sum();
    emit(
        cfg,
        GenSynthBody {
            scenes: count,
            objects,
            out_dir: out_dir.display().to_string(),
        },
        Some(&out_dir.join("manifest.json")),
    )
}

// ── train ──

#[derive(Serialize)]
struct TrainBody {
    epochs: usize,
    scenes: usize,
    final_loss: f64,
    report: train::TrainReport,
}

pub fn train(cfg: &RunConfig, data: Option<&Path>, out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    let train_cfg = cfg.train_config();
    let run = |source: &dyn SceneSource| -> Result<(ModelParams, train::TrainReport, usize)> {
        let (params, report) = train::train(&train_cfg, &SourceRef(source), |epoch, params, stats| {
            let path = out_dir.join(format!("epoch_{epoch:02}.ckpt"));
            tnsr::write_checkpoint(&path, &params.to_entries())?;
            eprintln!(
                "epoch {epoch}: loss {:.6} (cls {:.6} size {:.6} loc {:.6}) lr {:.3e}",
                stats.loss.total, stats.loss.cls, stats.loss.size, stats.loss.loc, stats.lr
            );
            Ok(())
        })?;
        Ok((params, report, source.len()))
    };
    let (params, report, scenes) = match data {
        Some(root) => {
            let source = DirSource::discover(
                Some(root.join("label_2")),
                root.join("preds"),
                root.join("calib"),
                root.join("features"),
            )?;
            run(&source)?
        }
        None => {
            let source = SynthSource {
                cfg: cfg.scene_config(),
                count: cfg.train.n_scenes,
                offset: 0,
            };
            run(&source)?
        }
    };
    tnsr::write_checkpoint(&out_dir.join("final.ckpt"), &params.to_entries())?;
    let final_loss = report.epochs.last().map(|e| e.loss.total).unwrap_or(0.0);
    emit(
        cfg,
        TrainBody {
            epochs: report.epochs.len(),
            scenes,
            final_loss,
            report,
        },
        Some(&out_dir.join("train_report.json")),
    )
}

/// Object-safe adapter so `train` can take either source type.
struct SourceRef<'a>(&'a dyn SceneSource);

impl SceneSource for SourceRef<'_> {
    fn len(&self) -> usize {
        self.0.len()
    }

    fn scene(&self, idx: usize) -> Result<boxdenoise3d_core::synth::SceneData> {
        self.0.scene(idx)
    }
}

// ── infer ──

#[derive(Serialize)]
struct InferBody {
    frames: usize,
    detections: usize,
}

pub fn infer(
    cfg: &RunConfig,
    checkpoint: &Path,
    preds: &Path,
    calib: &Path,
    features: &Path,
    out_dir: &Path,
) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    let entries = tnsr::read_checkpoint(checkpoint)?;
    let params = ModelParams::from_entries(&cfg.model, &entries)?;
    let infer_cfg: InferConfig = cfg.infer;
    let source = DirSource::discover(
        None,
        preds.to_path_buf(),
        calib.to_path_buf(),
        features.to_path_buf(),
    )?;
    let frames = source.frames.clone();
    let counts: Vec<usize> = frames
        .par_iter()
        .enumerate()
        .map(|(idx, frame)| -> Result<usize> {
            let scene = source.scene(idx)?;
            let output = infer_scene(
                &params,
                &cfg.model,
                &infer_cfg,
                &cfg.grid,
                &cfg.norm,
                &scene.anchors,
                &scene.cam,
                &scene.features,
            )?;
            let recs: Vec<LabelRecord> = output
                .detections
                .iter()
                .map(|d| {
                    let mut rec = LabelRecord::from_box3d(&d.box3d, &scene.cam)?;
                    rec.bbox2d = d.bbox2d;
                    rec.truncation = truncation_fraction(&d.box3d, &scene.cam);
                    Ok(rec)
                })
                .collect::<Result<_>>()?;
            std::fs::write(
                out_dir.join(format!("{frame}.txt")),
                kitti::write_predictions(&recs)?,
            )?;
            Ok(recs.len())
        })
        .collect::<Result<_>>()?;
    emit(
        cfg,
        InferBody {
            frames: frames.len(),
            detections: counts.iter().sum(),
        },
        Some(&out_dir.join("infer_report.json")),
    )
}
