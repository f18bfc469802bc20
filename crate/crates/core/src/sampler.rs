//! Local-grid proposal generation around bottom-up anchors, and position
//! normalization.
//!
//! Sampling happens only in the BEV plane: proposals copy the anchor and
//! shift the center along x and z; y, dimensions, angles, label, and score
//! are untouched.

use crate::geom::Box3D;
use serde::{Deserialize, Serialize};

/// Symmetric inclusive grid: offsets `k * stride_m` for
/// `k in [-floor(R/s), +floor(R/s)]` on both axes, so a spec of
/// (range 1.5, stride 0.75) yields 5x5 = 25 offsets including (0, 0).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    /// Half-width of the grid in meters.
    pub range_m: f64,
    /// Grid stride in meters.
    pub stride_m: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            range_m: 1.5,
            stride_m: 0.75,
        }
    }
}

impl GridSpec {
    pub fn new(range_m: f64, stride_m: f64) -> Self {
        Self { range_m, stride_m }
    }

    /// Steps per side: floor(range / stride).
    pub fn half_steps(&self) -> i64 {
        (self.range_m / self.stride_m).floor() as i64
    }

    /// Proposals per anchor: (2 * half_steps + 1)^2.
    pub fn proposal_count(&self) -> usize {
        let side = (2 * self.half_steps() + 1) as usize;
        side * side
    }
}

/// BEV offsets in row-major order from the most-negative corner: the x
/// offset varies fastest, so index 0 is (-k*s, -k*s) and the anchor sits
/// at the middle index.
pub fn grid_offsets(spec: &GridSpec) -> Vec<(f64, f64)> {
    let k = spec.half_steps();
    let mut out = Vec::with_capacity(spec.proposal_count());
    for iz in -k..=k {
        for ix in -k..=k {
            out.push((ix as f64 * spec.stride_m, iz as f64 * spec.stride_m));
        }
    }
    out
}

/// Replicate `anchor` at every grid offset. Only the center moves; the
/// offset-(0,0) proposal is bit-identical to the anchor.
pub fn sample_proposals(anchor: &Box3D, spec: &GridSpec) -> Vec<Box3D> {
    grid_offsets(spec)
        .into_iter()
        .map(|(dx, dz)| {
            let mut b = *anchor;
            b.center.x += dx;
            b.center.z += dz;
            b
        })
        .collect()
}

/// Position normalizers for the typical detection range, meters per unit.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NormConstants {
    pub nx: f64,
    pub ny: f64,
    pub nz: f64,
}

impl Default for NormConstants {
    fn default() -> Self {
        Self {
            nx: 50.0,
            ny: 2.0,
            nz: 80.0,
        }
    }
}

impl NormConstants {
    pub fn normalize(&self, p: crate::geom::Vec3) -> crate::geom::Vec3 {
        crate::geom::Vec3::new(p.x / self.nx, p.y / self.ny, p.z / self.nz)
    }

    pub fn unnormalize(&self, p: crate::geom::Vec3) -> crate::geom::Vec3 {
        crate::geom::Vec3::new(p.x * self.nx, p.y * self.ny, p.z * self.nz)
    }
}
