//! 3D/2D bounding-box geometry in the camera frame.
//!
//! Camera coordinates follow the KITTI convention: x right, y down,
//! z forward. Boxes rotate about the y axis (yaw); the bird's-eye view
//! (BEV) is the x-z plane. All functions here are pure and operate on
//! immutable values.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Angle comparisons use this tolerance (radians).
pub const ANGLE_EPS: f64 = 1e-9;

/// Wrap an angle into [-pi, pi].
pub fn wrap_angle(a: f64) -> f64 {
    let (s, c) = a.sin_cos();
    s.atan2(c)
}

/// Point in camera coordinates, meters.
#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }
}

/// Oriented 3D bounding box.
///
/// `center` is the geometric center of the cuboid (file formats that store
/// a bottom-face anchor convert at the I/O boundary). `dims` is (h, w, l)
/// in meters: height along y, width along the local z axis, length along
/// the local x axis. `yaw` rotates the local frame about y; `alpha` is the
/// observation angle. For boxes built from consistent detector output,
/// `alpha == wrap(yaw - atan2(x, z))`; grid-translated proposals keep the
/// anchor's angles by design and may not satisfy the relation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Box3D {
    pub label: u32,
    pub center: Vec3,
    /// (h, w, l), all strictly positive.
    pub dims: (f64, f64, f64),
    pub yaw: f64,
    pub alpha: f64,
    pub score: f64,
}

impl Box3D {
    pub fn new(label: u32, center: Vec3, dims: (f64, f64, f64), yaw: f64, score: f64) -> Self {
        let yaw = wrap_angle(yaw);
        Self {
            label,
            center,
            dims,
            yaw,
            alpha: alpha_from_yaw(yaw, center),
            score: score.clamp(0.0, 1.0),
        }
    }

    pub fn volume(&self) -> f64 {
        self.dims.0 * self.dims.1 * self.dims.2
    }

    pub fn is_valid(&self) -> bool {
        self.center.is_finite()
            && self.dims.0 > 0.0
            && self.dims.1 > 0.0
            && self.dims.2 > 0.0
            && self.yaw.is_finite()
            && self.alpha.is_finite()
            && (0.0..=1.0).contains(&self.score)
    }

    /// Footprint rectangle in the BEV plane, counter-clockwise.
    pub fn bev_polygon(&self) -> ConvexPolygon2D {
        let c = self.corners();
        ConvexPolygon2D::from_points(&[
            (c[0].x, c[0].z),
            (c[1].x, c[1].z),
            (c[2].x, c[2].z),
            (c[3].x, c[3].z),
        ])
    }

    /// The 8 corners in a fixed canonical order.
    ///
    /// In the local frame (x' along length, y' along height pointing down,
    /// z' along width), indices 0..4 are the bottom face (y' = +h/2) and
    /// 4..8 the top face (y' = -h/2):
    ///
    /// ```text
    /// 0:(+l/2,+w/2) 1:(+l/2,-w/2) 2:(-l/2,-w/2) 3:(-l/2,+w/2)   (x', z')
    /// ```
    ///
    /// The centroid of the 8 corners equals `center`.
    pub fn corners(&self) -> [Vec3; 8] {
        let (h, w, l) = self.dims;
        let (dx, dy, dz) = (l / 2.0, h / 2.0, w / 2.0);
        let (s, c) = self.yaw.sin_cos();
        let local = [
            (dx, dy, dz),
            (dx, dy, -dz),
            (-dx, dy, -dz),
            (-dx, dy, dz),
            (dx, -dy, dz),
            (dx, -dy, -dz),
            (-dx, -dy, -dz),
            (-dx, -dy, dz),
        ];
        local.map(|(lx, ly, lz)| Vec3 {
            x: self.center.x + lx * c + lz * s,
            y: self.center.y + ly,
            z: self.center.z - lx * s + lz * c,
        })
    }

    /// Vertical extent [y_min, y_max] (y points down, so y_max is the bottom).
    pub fn y_interval(&self) -> (f64, f64) {
        let half = self.dims.0 / 2.0;
        (self.center.y - half, self.center.y + half)
    }
}

/// Observation angle from yaw and box center: `wrap(yaw - atan2(x, z))`.
pub fn alpha_from_yaw(yaw: f64, center: Vec3) -> f64 {
    wrap_angle(yaw - center.x.atan2(center.z))
}

/// Inverse of [`alpha_from_yaw`].
pub fn yaw_from_alpha(alpha: f64, center: Vec3) -> f64 {
    wrap_angle(alpha + center.x.atan2(center.z))
}

/// Axis-aligned 2D box in pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct Box2D {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
    /// Set when the box was clamped against the image boundary.
    pub truncated: bool,
}

impl Box2D {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Self {
        Self {
            x_min,
            y_min,
            x_max,
            y_max,
            truncated: false,
        }
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }
}

/// Axis-aligned IoU of two 2D boxes. Zero-area boxes yield 0.
pub fn iou_2d(a: &Box2D, b: &Box2D) -> f64 {
    let ix = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let iy = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 || inter <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Pinhole camera: 3x4 projection matrix in pixel units plus image size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    /// Row-major 3x4 matrix.
    pub p: [[f64; 4]; 3],
    /// (width, height) in pixels.
    pub image_size: (f64, f64),
}

impl CameraModel {
    pub fn new(p: [[f64; 4]; 3], image_size: (f64, f64)) -> Self {
        Self { p, image_size }
    }

    /// Simple pinhole with focal length `f` and principal point `(cx, cy)`.
    pub fn pinhole(f: f64, cx: f64, cy: f64, image_size: (f64, f64)) -> Self {
        Self {
            p: [
                [f, 0.0, cx, 0.0],
                [0.0, f, cy, 0.0],
                [0.0, 0.0, 1.0, 0.0],
            ],
            image_size,
        }
    }

    /// Homogeneous projection of one point. Returns (u, v, behind) where
    /// `behind` is set when the projective depth is <= 0; in that case the
    /// pixel coordinates are reported as (0, 0) to stay finite.
    pub fn project(&self, pt: Vec3) -> (f64, f64, bool) {
        let hom = [pt.x, pt.y, pt.z, 1.0];
        let row = |r: usize| -> f64 {
            self.p[r][0] * hom[0] + self.p[r][1] * hom[1] + self.p[r][2] * hom[2] + self.p[r][3]
        };
        let depth = row(2);
        if depth <= 0.0 {
            (0.0, 0.0, true)
        } else {
            (row(0) / depth, row(1) / depth, false)
        }
    }

    /// Project a list of points; see [`CameraModel::project`].
    pub fn project_points(&self, pts: &[Vec3]) -> Vec<(f64, f64, bool)> {
        pts.iter().map(|&p| self.project(p)).collect()
    }

    /// Axis-aligned hull of the projected in-front corners, clamped to the
    /// image. The `truncated` flag is set iff clamping changed a coordinate.
    pub fn project_box2d(&self, b: &Box3D) -> Result<Box2D> {
        let corners = b.corners();
        let mut any = false;
        let (mut x0, mut y0) = (f64::INFINITY, f64::INFINITY);
        let (mut x1, mut y1) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
        for &c in corners.iter() {
            let (u, v, behind) = self.project(c);
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
            return Err(Error::AllBehindCamera);
        }
        let (w, h) = self.image_size;
        let cx0 = x0.clamp(0.0, w);
        let cy0 = y0.clamp(0.0, h);
        let cx1 = x1.clamp(0.0, w);
        let cy1 = y1.clamp(0.0, h);
        Ok(Box2D {
            x_min: cx0,
            y_min: cy0,
            x_max: cx1,
            y_max: cy1,
            truncated: cx0 != x0 || cy0 != y0 || cx1 != x1 || cy1 != y1,
        })
    }
}

/// Convex polygon in the BEV plane, vertices counter-clockwise in (x, z).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvexPolygon2D {
    pub vertices: Vec<(f64, f64)>,
}

impl ConvexPolygon2D {
    /// Build from points, normalizing winding to counter-clockwise.
    pub fn from_points(pts: &[(f64, f64)]) -> Self {
        let mut vertices = pts.to_vec();
        if signed_area(&vertices) < 0.0 {
            vertices.reverse();
        }
        Self { vertices }
    }

    pub fn area(&self) -> f64 {
        signed_area(&self.vertices).abs()
    }
}

fn signed_area(v: &[(f64, f64)]) -> f64 {
    if v.len() < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..v.len() {
        let (x0, z0) = v[i];
        let (x1, z1) = v[(i + 1) % v.len()];
        acc += x0 * z1 - x1 * z0;
    }
    acc / 2.0
}

/// Area of the intersection of two convex polygons via successive
/// half-plane clipping. Boundary contact counts as zero area: a degenerate
/// (collinear) result has zero shoelace area by construction.
pub fn convex_intersection_area(p: &ConvexPolygon2D, q: &ConvexPolygon2D) -> f64 {
    if p.vertices.len() < 3 || q.vertices.len() < 3 {
        return 0.0;
    }
    let mut subject = p.vertices.clone();
    let clip = &q.vertices;
    let n = clip.len();
    for i in 0..n {
        if subject.is_empty() {
            return 0.0;
        }
        let a = clip[i];
        let b = clip[(i + 1) % n];
        subject = clip_half_plane(&subject, a, b);
    }
    signed_area(&subject).abs()
}

/// Keep the part of `poly` on the left of the directed edge a->b
/// (inside for a counter-clockwise clip polygon).
fn clip_half_plane(poly: &[(f64, f64)], a: (f64, f64), b: (f64, f64)) -> Vec<(f64, f64)> {
    let side = |p: (f64, f64)| -> f64 { (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0) };
    let mut out = Vec::with_capacity(poly.len() + 2);
    let n = poly.len();
    for i in 0..n {
        let cur = poly[i];
        let nxt = poly[(i + 1) % n];
        let sc = side(cur);
        let sn = side(nxt);
        if sc >= 0.0 {
            out.push(cur);
        }
        if (sc > 0.0 && sn < 0.0) || (sc < 0.0 && sn > 0.0) {
            let t = sc / (sc - sn);
            out.push((cur.0 + t * (nxt.0 - cur.0), cur.1 + t * (nxt.1 - cur.1)));
        }
    }
    out
}

/// Rotated-rectangle IoU of the BEV footprints.
pub fn iou_bev(a: &Box3D, b: &Box3D) -> f64 {
    let pa = a.bev_polygon();
    let pb = b.bev_polygon();
    let inter = convex_intersection_area(&pa, &pb);
    let union = pa.area() + pb.area() - inter;
    if union <= 0.0 || inter <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Volumetric IoU of two y-aligned oriented cuboids. Footprint overlap is
/// exact polygon clipping; the vertical factor is interval overlap clamped
/// at zero, so vertically disjoint boxes score 0 even with overlapping
/// footprints.
pub fn iou_3d(a: &Box3D, b: &Box3D) -> f64 {
    let (a_lo, a_hi) = a.y_interval();
    let (b_lo, b_hi) = b.y_interval();
    let v_overlap = (a_hi.min(b_hi) - a_lo.max(b_lo)).max(0.0);
    if v_overlap <= 0.0 {
        return 0.0;
    }
    let footprint = convex_intersection_area(&a.bev_polygon(), &b.bev_polygon());
    let inter = footprint * v_overlap;
    let union = a.volume() + b.volume() - inter;
    if union <= 0.0 || inter <= 0.0 {
        0.0
    } else {
        inter / union
    }
}
