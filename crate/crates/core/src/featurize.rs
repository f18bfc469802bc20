//! Raw proposal representations: the 29-dim geometric vector, per-point
//! appearance samples, and RoI-pooled appearance features.
//!
//! A [`FeatureMap`] stands in for the last layer of an image backbone.
//! Cell `(ix, iy)` holds the feature at image point
//! `((ix + 0.5) * stride, (iy + 0.5) * stride)`; samples interpolate
//! bilinearly between cell centers with border replication, and points
//! outside the image produce exactly-zero vectors so the absence of
//! appearance is itself a signal.

use crate::error::Result;
use crate::geom::{Box2D, Box3D, CameraModel};
use crate::sampler::NormConstants;

/// Dense H' x W' x C feature grid covering the image at a fixed stride.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    /// Row-major [y][x][c].
    pub data: Vec<f64>,
    pub height_cells: usize,
    pub width_cells: usize,
    pub channels: usize,
    /// Pixels per cell.
    pub stride: f64,
    pub image_size: (f64, f64),
}

impl FeatureMap {
    pub fn zeros(
        width_cells: usize,
        height_cells: usize,
        channels: usize,
        stride: f64,
        image_size: (f64, f64),
    ) -> Self {
        assert!(height_cells as f64 * stride >= image_size.1);
        assert!(width_cells as f64 * stride >= image_size.0);
        Self {
            data: vec![0.0; width_cells * height_cells * channels],
            height_cells,
            width_cells,
            channels,
            stride,
            image_size,
        }
    }

    /// Number of cells covering an image of `image_size` at `stride`.
    pub fn cells_for(image_size: (f64, f64), stride: f64) -> (usize, usize) {
        (
            (image_size.0 / stride).ceil() as usize,
            (image_size.1 / stride).ceil() as usize,
        )
    }

    #[inline]
    pub fn cell(&self, ix: usize, iy: usize) -> &[f64] {
        let base = (iy * self.width_cells + ix) * self.channels;
        &self.data[base..base + self.channels]
    }

    #[inline]
    pub fn cell_mut(&mut self, ix: usize, iy: usize) -> &mut [f64] {
        let base = (iy * self.width_cells + ix) * self.channels;
        &mut self.data[base..base + self.channels]
    }

    fn inside_image(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && u <= self.image_size.0 && v >= 0.0 && v <= self.image_size.1
    }
}

/// Bilinear sample at image point (u, v); all-zero outside the image.
pub fn point_sample(fm: &FeatureMap, u: f64, v: f64) -> Vec<f64> {
    let mut out = vec![0.0; fm.channels];
    point_sample_into(fm, u, v, &mut out);
    out
}

/// [`point_sample`] writing into a caller-provided buffer.
pub fn point_sample_into(fm: &FeatureMap, u: f64, v: f64, out: &mut [f64]) {
    debug_assert_eq!(out.len(), fm.channels);
    if !fm.inside_image(u, v) {
        out.fill(0.0);
        return;
    }
    // fractional cell index; cell centers sit at (i + 0.5) * stride
    let fx = (u / fm.stride - 0.5).clamp(0.0, (fm.width_cells - 1) as f64);
    let fy = (v / fm.stride - 0.5).clamp(0.0, (fm.height_cells - 1) as f64);
    let x0 = fx.floor() as usize;
    let y0 = fy.floor() as usize;
    let x1 = (x0 + 1).min(fm.width_cells - 1);
    let y1 = (y0 + 1).min(fm.height_cells - 1);
    let tx = fx - x0 as f64;
    let ty = fy - y0 as f64;
    let (c00, c10) = (fm.cell(x0, y0), fm.cell(x1, y0));
    let (c01, c11) = (fm.cell(x0, y1), fm.cell(x1, y1));
    for c in 0..fm.channels {
        let top = c00[c] * (1.0 - tx) + c10[c] * tx;
        let bot = c01[c] * (1.0 - tx) + c11[c] * tx;
        out[c] = top * (1.0 - ty) + bot * ty;
    }
}

/// RoI grid resolution (cells per side).
pub const ROI_GRID: usize = 14;

/// Pool a 2D box into a ROI_GRID x ROI_GRID x C block, one bilinear sample
/// at each output cell center, continuous coordinates throughout. A
/// zero-area box samples the same point in every cell.
pub fn roi_align(fm: &FeatureMap, bbox: &Box2D) -> Vec<f64> {
    let mut out = vec![0.0; ROI_GRID * ROI_GRID * fm.channels];
    let cell_w = bbox.width() / ROI_GRID as f64;
    let cell_h = bbox.height() / ROI_GRID as f64;
    for iy in 0..ROI_GRID {
        let v = bbox.y_min + (iy as f64 + 0.5) * cell_h;
        for ix in 0..ROI_GRID {
            let u = bbox.x_min + (ix as f64 + 0.5) * cell_w;
            let base = (iy * ROI_GRID + ix) * fm.channels;
            point_sample_into(fm, u, v, &mut out[base..base + fm.channels]);
        }
    }
    out
}

/// Length of the geometric feature vector: normalized position (3), raw
/// dimensions (3), observation angle (1), nine projected points (18), and
/// the clamped 2D box corners (4).
pub const GEO_DIM: usize = 29;

/// Geometric descriptor of one proposal. Projected points are normalized
/// by the image size; points behind the camera contribute (0, 0). The last
/// four entries are the truncated 2D box, so edge-clipped proposals expose
/// their truncation.
pub fn geo_vector(b: &Box3D, cam: &CameraModel, norm: &NormConstants) -> Result<[f64; GEO_DIM]> {
    let bbox = cam.project_box2d(b)?; // fails when all corners are behind
    let mut out = [0.0; GEO_DIM];
    let p = norm.normalize(b.center);
    out[0] = p.x;
    out[1] = p.y;
    out[2] = p.z;
    out[3] = b.dims.0;
    out[4] = b.dims.1;
    out[5] = b.dims.2;
    out[6] = b.alpha;
    let (w, h) = cam.image_size;
    for (i, pt) in nine_points(b).into_iter().enumerate() {
        let (u, v, behind) = cam.project(pt);
        if !behind {
            out[7 + 2 * i] = u / w;
            out[8 + 2 * i] = v / h;
        }
    }
    out[25] = bbox.x_min / w;
    out[26] = bbox.y_min / h;
    out[27] = bbox.x_max / w;
    out[28] = bbox.y_max / h;
    Ok(out)
}

/// The 8 corners followed by the center.
pub fn nine_points(b: &Box3D) -> [crate::geom::Vec3; 9] {
    let c = b.corners();
    [c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7], b.center]
}

/// The three raw representations of one proposal.
#[derive(Clone, Debug)]
pub struct ProposalFeatures {
    pub geo: [f64; GEO_DIM],
    /// 9 x C, row per projected point; zero rows for off-image points.
    pub pt: Vec<f64>,
    /// ROI_GRID^2 x C flattened.
    pub roi: Vec<f64>,
}

/// Compose the geometric vector, point samples, and RoI pooling for one
/// proposal.
pub fn build_features(
    b: &Box3D,
    cam: &CameraModel,
    fm: &FeatureMap,
    norm: &NormConstants,
) -> Result<ProposalFeatures> {
    let geo = geo_vector(b, cam, norm)?;
    let bbox = cam.project_box2d(b)?;
    let mut pt = vec![0.0; 9 * fm.channels];
    for (i, p) in nine_points(b).into_iter().enumerate() {
        let (u, v, behind) = cam.project(p);
        if !behind {
            point_sample_into(fm, u, v, &mut pt[i * fm.channels..(i + 1) * fm.channels]);
        }
    }
    let roi = roi_align(fm, &bbox);
    Ok(ProposalFeatures { geo, pt, roi })
}
