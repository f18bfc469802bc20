//! Deterministic synthetic scenes: ground-truth boxes, noisy anchors, and
//! procedurally generated feature maps that stand in for an image
//! backbone.
//!
//! Randomness comes from ChaCha8 with the config seed and one stream per
//! scene index, so any scene regenerates bit-identically in isolation.
//! Gaussians are drawn with the Box-Muller transform to stay independent
//! of sampler-library internals.

use crate::error::{Error, Result};
use crate::eval::GroundTruthBox;
use crate::featurize::FeatureMap;
use crate::geom::{self, Box2D, Box3D, CameraModel, Vec3};
use crate::kitti::{assign_difficulty, LabelRecord};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Pinhole camera description for synthetic scenes.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CameraSpec {
    pub focal: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: f64,
    pub height: f64,
}

impl Default for CameraSpec {
    fn default() -> Self {
        Self {
            focal: 721.5377,
            cx: 621.0,
            cy: 187.5,
            width: 1242.0,
            height: 375.0,
        }
    }
}

impl CameraSpec {
    pub fn camera(&self) -> CameraModel {
        CameraModel::pinhole(self.focal, self.cx, self.cy, (self.width, self.height))
    }
}

/// Per-class box dimension prior (h, w, l), meters.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ClassPrior {
    pub label: u32,
    pub weight: f64,
    pub mean_dims: (f64, f64, f64),
    pub std_dims: (f64, f64, f64),
}

/// What the feature oracle encodes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureOracle {
    /// Channels carry the image-space offset to the nearest ground-truth
    /// center plus that box's position, depth, and dimensions, so the
    /// refinement target is decodable from appearance + geometry.
    Informative,
    /// Noise-only channels; the geometry-only lower bound.
    Blank,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub seed: u64,
    /// Inclusive object-count range.
    pub n_objects: (usize, usize),
    /// Depth range for box centers, meters.
    pub depth_range: (f64, f64),
    /// Anchor center noise, meters.
    pub anchor_sigma_xz: f64,
    pub anchor_sigma_y: f64,
    /// Anchor dimension noise, meters.
    pub anchor_sigma_dims: f64,
    pub class_priors: Vec<ClassPrior>,
    pub camera: CameraSpec,
    pub channels: usize,
    pub feature_stride: f64,
    pub feature_oracle: FeatureOracle,
    /// Per-channel additive Gaussian noise.
    pub feature_noise: f64,
    /// Maximum BEV IoU allowed between ground truths.
    pub max_gt_overlap: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_objects: (1, 4),
            depth_range: (8.0, 40.0),
            anchor_sigma_xz: 0.5,
            anchor_sigma_y: 0.1,
            anchor_sigma_dims: 0.05,
            class_priors: vec![ClassPrior {
                label: 0,
                weight: 1.0,
                mean_dims: (1.52, 1.63, 3.88),
                std_dims: (0.10, 0.10, 0.30),
            }],
            camera: CameraSpec::default(),
            channels: 16,
            feature_stride: 4.0,
            feature_oracle: FeatureOracle::Informative,
            feature_noise: 0.05,
            max_gt_overlap: 0.1,
        }
    }
}

/// One synthetic scene: aligned ground truths and anchors (anchor `i` is a
/// noisy copy of ground truth `i`), the camera, and the feature map.
#[derive(Clone, Debug)]
pub struct SceneData {
    pub gts: Vec<Box3D>,
    pub gt_bbox2d: Vec<Box2D>,
    pub anchors: Vec<Box3D>,
    pub cam: CameraModel,
    pub features: FeatureMap,
}

impl SceneData {
    /// Ground truths as evaluation records with difficulty tags.
    pub fn ground_truth_boxes(&self) -> Vec<GroundTruthBox> {
        self.gts
            .iter()
            .zip(&self.gt_bbox2d)
            .map(|(b, bbox)| {
                let rec = LabelRecord {
                    category: crate::kitti::category_name(b.label).to_string(),
                    truncation: truncation_fraction(b, &self.cam),
                    occlusion: 0,
                    alpha: b.alpha,
                    bbox2d: *bbox,
                    dims: b.dims,
                    location: Vec3::new(b.center.x, b.center.y + b.dims.0 / 2.0, b.center.z),
                    yaw: b.yaw,
                    score: None,
                };
                GroundTruthBox {
                    box3d: *b,
                    bbox2d: *bbox,
                    difficulty: assign_difficulty(&rec),
                    dont_care: false,
                }
            })
            .collect()
    }
}

/// Image-boundary truncation estimate: the clipped fraction of the
/// projected hull area.
pub fn truncation_fraction(b: &Box3D, cam: &CameraModel) -> f64 {
    let corners = b.corners();
    let mut any = false;
    let (mut x0, mut y0, mut x1, mut y1) = (
        f64::INFINITY,
        f64::INFINITY,
        f64::NEG_INFINITY,
        f64::NEG_INFINITY,
    );
    for &c in corners.iter() {
        let (u, v, behind) = cam.project(c);
        if behind {
            continue;
        }
        any = true;
        x0 = x0.min(u);
        y0 = y0.min(v);
        x1 = x1.max(u);
        y1 = y1.max(v);
    }
    if !any {
        return 1.0;
    }
    let raw = ((x1 - x0) * (y1 - y0)).max(1e-12);
    let (w, h) = cam.image_size;
    let cw = (x1.min(w) - x0.max(0.0)).max(0.0);
    let ch = (y1.min(h) - y0.max(0.0)).max(0.0);
    (1.0 - cw * ch / raw).clamp(0.0, 1.0)
}

/// Standard normal via Box-Muller.
fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// RNG for one scene: fixed seed, stream = scene index.
pub fn scene_rng(seed: u64, scene_idx: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(scene_idx);
    rng
}

/// Generate scene `scene_idx` of the set described by `cfg`.
pub fn generate_scene(cfg: &SceneConfig, scene_idx: u64) -> Result<SceneData> {
    if cfg.class_priors.is_empty() {
        return Err(Error::Config("at least one class prior is required".into()));
    }
    if cfg.depth_range.0 <= 0.0 || cfg.depth_range.1 < cfg.depth_range.0 {
        return Err(Error::Config("depth range must be positive and ordered".into()));
    }
    let mut rng = scene_rng(cfg.seed, scene_idx);
    let cam = cfg.camera.camera();
    let n = rng.gen_range(cfg.n_objects.0..=cfg.n_objects.1.max(cfg.n_objects.0));

    let total_weight: f64 = cfg.class_priors.iter().map(|p| p.weight).sum();
    let mut gts: Vec<Box3D> = Vec::with_capacity(n);
    for _ in 0..n {
        // rejection-resample overlapping boxes, bounded retries
        for _attempt in 0..50 {
            let mut pick = rng.gen_range(0.0..total_weight);
            let mut prior = &cfg.class_priors[0];
            for p in &cfg.class_priors {
                if pick < p.weight {
                    prior = p;
                    break;
                }
                pick -= p.weight;
            }
            let dims = (
                (prior.mean_dims.0 + prior.std_dims.0 * normal(&mut rng)).max(0.3),
                (prior.mean_dims.1 + prior.std_dims.1 * normal(&mut rng)).max(0.3),
                (prior.mean_dims.2 + prior.std_dims.2 * normal(&mut rng)).max(0.3),
            );
            let z = rng.gen_range(cfg.depth_range.0..cfg.depth_range.1);
            let u = rng.gen_range(0.15 * cfg.camera.width..0.85 * cfg.camera.width);
            let x = (u - cfg.camera.cx) / cfg.camera.focal * z;
            // ground contact ~1.65 m below the camera
            let bottom = 1.65 + 0.05 * normal(&mut rng);
            let y = bottom - dims.0 / 2.0;
            let yaw = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
            let candidate = Box3D::new(prior.label, Vec3::new(x, y, z), dims, yaw, 1.0);
            let overlaps = gts
                .iter()
                .any(|g| geom::iou_bev(g, &candidate) > cfg.max_gt_overlap);
            if !overlaps {
                gts.push(candidate);
                break;
            }
        }
    }

    let anchors: Vec<Box3D> = gts
        .iter()
        .map(|g| {
            let center = Vec3::new(
                g.center.x + cfg.anchor_sigma_xz * normal(&mut rng),
                g.center.y + cfg.anchor_sigma_y * normal(&mut rng),
                g.center.z + cfg.anchor_sigma_xz * normal(&mut rng),
            );
            let dims = (
                (g.dims.0 + cfg.anchor_sigma_dims * normal(&mut rng)).max(0.3),
                (g.dims.1 + cfg.anchor_sigma_dims * normal(&mut rng)).max(0.3),
                (g.dims.2 + cfg.anchor_sigma_dims * normal(&mut rng)).max(0.3),
            );
            let score = rng.gen_range(0.3..1.0);
            Box3D::new(g.label, center, dims, g.yaw, score)
        })
        .collect();

    let gt_bbox2d = gts
        .iter()
        .map(|g| cam.project_box2d(g))
        .collect::<Result<Vec<_>>>()?;

    let features = render_features(cfg, &cam, &gts, &mut rng);
    Ok(SceneData {
        gts,
        gt_bbox2d,
        anchors,
        cam,
        features,
    })
}

/// Fill the feature map from the oracle recipe.
fn render_features(
    cfg: &SceneConfig,
    cam: &CameraModel,
    gts: &[Box3D],
    rng: &mut ChaCha8Rng,
) -> FeatureMap {
    let image = (cfg.camera.width, cfg.camera.height);
    let (wc, hc) = FeatureMap::cells_for(image, cfg.feature_stride);
    let mut fm = FeatureMap::zeros(wc, hc, cfg.channels, cfg.feature_stride, image);
    let centers: Vec<(f64, f64)> = gts
        .iter()
        .map(|g| {
            let (u, v, _) = cam.project(g.center);
            (u, v)
        })
        .collect();
    let informative = cfg.feature_oracle == FeatureOracle::Informative && !gts.is_empty();
    for iy in 0..hc {
        for ix in 0..wc {
            let u = (ix as f64 + 0.5) * cfg.feature_stride;
            let v = (iy as f64 + 0.5) * cfg.feature_stride;
            let cell_index = iy * wc + ix;
            let base = cell_index * cfg.channels;
            if informative {
                // nearest ground truth by projected center distance
                let mut best = 0usize;
                let mut best_d = f64::INFINITY;
                for (i, &(cu, cv)) in centers.iter().enumerate() {
                    let d = (cu - u) * (cu - u) + (cv - v) * (cv - v);
                    if d < best_d {
                        best_d = d;
                        best = i;
                    }
                }
                let g = &gts[best];
                let (cu, cv) = centers[best];
                let du = cu - u;
                let dv = cv - v;
                for c in 0..cfg.channels {
                    fm.data[base + c] = oracle_channel(c, du, dv, g, u, image.0);
                }
            }
            for c in 0..cfg.channels {
                fm.data[base + c] += cfg.feature_noise * normal(rng);
            }
        }
    }
    fm
}

/// One channel of the informative oracle, most informative first so small
/// channel counts keep the essentials (offset, absolute center,
/// dimensions). Offsets appear both linearly and as multi-scale sinusoids;
/// the cosines are even in the offset, so proximity to the center is
/// readable without learning an absolute value. The scale factor grows
/// with the channel block so wider maps add redundant encodings at new
/// frequencies.
fn oracle_channel(c: usize, du: f64, dv: f64, g: &Box3D, u: f64, image_w: f64) -> f64 {
    let block = (c / 16) as f64 + 1.0;
    match c % 16 {
        0 => (du / (200.0 * block)).clamp(-3.0, 3.0),
        1 => (dv / (200.0 * block)).clamp(-3.0, 3.0),
        2 => g.center.x / 50.0,
        3 => g.center.y / 2.0,
        4 => g.center.z / 80.0,
        5 => g.dims.0 / 2.0,
        6 => g.dims.1 / 2.0,
        7 => g.dims.2 / 5.0,
        8 => (du / (8.0 * block)).cos(),
        9 => (du / (20.0 * block)).cos(),
        10 => (du / (45.0 * block)).cos(),
        11 => (dv / (8.0 * block)).cos(),
        12 => (dv / (20.0 * block)).cos(),
        13 => (du / (8.0 * block)).sin(),
        14 => (g.center.z / (4.0 * block)).sin(),
        _ => (g.center.z / (4.0 * block)).cos(),
    }
}
