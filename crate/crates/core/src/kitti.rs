//! KITTI label / calibration / prediction file I/O and difficulty
//! assignment.
//!
//! Label lines carry 15 whitespace-delimited fields, predictions 16 (with
//! a trailing score), in devkit order:
//!
//! ```text
//! type trunc occ alpha x1 y1 x2 y2 h w l x y z ry [score]
//! ```
//!
//! The file `location` is the bottom-face center; conversion to the
//! geometric box center happens in [`LabelRecord::to_box3d`] so the rest
//! of the crate never sees the bottom-center convention.

use crate::error::{Error, Result};
use crate::geom::{Box2D, Box3D, CameraModel, Vec3};
use serde::{Deserialize, Serialize};

/// Category names with fixed ids. Unknown categories are accepted and
/// interned past the end of this table.
pub const KNOWN_CATEGORIES: [&str; 8] = [
    "Car",
    "Pedestrian",
    "Cyclist",
    "Van",
    "Truck",
    "Person_sitting",
    "Tram",
    "Misc",
];

/// Map a category name to a stable id. `DontCare` maps to [`DONT_CARE`].
pub fn category_id(name: &str) -> u32 {
    if name == "DontCare" {
        return DONT_CARE;
    }
    KNOWN_CATEGORIES
        .iter()
        .position(|&k| k == name)
        .map(|i| i as u32)
        .unwrap_or_else(|| {
            // deterministic fallback for unknown names
            let mut h: u32 = 0x811c9dc5;
            for b in name.bytes() {
                h ^= b as u32;
                h = h.wrapping_mul(0x0100_0193);
            }
            KNOWN_CATEGORIES.len() as u32 + (h % 1000)
        })
}

pub fn category_name(id: u32) -> &'static str {
    if id == DONT_CARE {
        "DontCare"
    } else {
        KNOWN_CATEGORIES.get(id as usize).copied().unwrap_or("Misc")
    }
}

/// Sentinel label id for DontCare regions.
pub const DONT_CARE: u32 = u32::MAX;

/// One parsed KITTI label or prediction line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelRecord {
    pub category: String,
    pub truncation: f64,
    pub occlusion: i32,
    pub alpha: f64,
    pub bbox2d: Box2D,
    /// (h, w, l) meters.
    pub dims: (f64, f64, f64),
    /// KITTI bottom-center location in camera coordinates.
    pub location: Vec3,
    pub yaw: f64,
    pub score: Option<f64>,
}

impl LabelRecord {
    pub fn is_dont_care(&self) -> bool {
        self.category == "DontCare"
    }

    /// Convert to a geometric-center 3D box. DontCare records have no
    /// valid extent and cannot be converted.
    pub fn to_box3d(&self) -> Result<Box3D> {
        if self.is_dont_care() {
            return Err(Error::contract("DontCare records have no 3D box"));
        }
        let center = Vec3::new(
            self.location.x,
            self.location.y - self.dims.0 / 2.0,
            self.location.z,
        );
        let mut b = Box3D::new(
            category_id(&self.category),
            center,
            self.dims,
            self.yaw,
            self.score.unwrap_or(1.0),
        );
        b.alpha = crate::geom::wrap_angle(self.alpha);
        Ok(b)
    }

    /// Build a record from a box, projecting the 2D bounding box with the
    /// supplied camera.
    pub fn from_box3d(b: &Box3D, cam: &CameraModel) -> Result<Self> {
        let bbox2d = cam.project_box2d(b)?;
        Ok(LabelRecord {
            category: category_name(b.label).to_string(),
            truncation: 0.0,
            occlusion: 0,
            alpha: b.alpha,
            bbox2d,
            dims: b.dims,
            location: Vec3::new(b.center.x, b.center.y + b.dims.0 / 2.0, b.center.z),
            yaw: b.yaw,
            score: Some(b.score),
        })
    }
}

/// KITTI difficulty bands plus the catch-all `Ignored`.
///
/// Thresholds are the benchmark constants: 2D box height in pixels,
/// occlusion level, and truncation fraction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Difficulty {
    Easy,
    Moderate,
    Hard,
    Ignored,
}

impl Difficulty {
    pub const ALL: [Difficulty; 3] = [Difficulty::Easy, Difficulty::Moderate, Difficulty::Hard];
}

impl std::fmt::Display for Difficulty {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Difficulty::Easy => "easy",
            Difficulty::Moderate => "moderate",
            Difficulty::Hard => "hard",
            Difficulty::Ignored => "ignored",
        };
        f.write_str(s)
    }
}

/// Benchmark difficulty thresholds: (min bbox height px, max occlusion,
/// max truncation) per band. Exposed so callers can override.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct DifficultyThresholds {
    pub min_height: [f64; 3],
    pub max_occlusion: [i32; 3],
    pub max_truncation: [f64; 3],
}

impl Default for DifficultyThresholds {
    fn default() -> Self {
        Self {
            min_height: [40.0, 25.0, 25.0],
            max_occlusion: [0, 1, 2],
            max_truncation: [0.15, 0.30, 0.50],
        }
    }
}

/// Assign the easiest band whose height/occlusion/truncation gates all
/// pass; records failing every band are `Ignored`.
pub fn assign_difficulty(rec: &LabelRecord) -> Difficulty {
    assign_difficulty_with(rec, &DifficultyThresholds::default())
}

pub fn assign_difficulty_with(rec: &LabelRecord, t: &DifficultyThresholds) -> Difficulty {
    let height = rec.bbox2d.height();
    for (i, d) in Difficulty::ALL.iter().enumerate() {
        if height >= t.min_height[i]
            && rec.occlusion <= t.max_occlusion[i]
            && rec.truncation <= t.max_truncation[i]
        {
            return *d;
        }
    }
    Difficulty::Ignored
}

fn parse_field<T: std::str::FromStr>(s: &str, line: usize, what: &str) -> Result<T> {
    s.parse().map_err(|_| Error::MalformedLine {
        line,
        reason: format!("non-numeric {what}: '{s}'"),
    })
}

/// Parse a label or prediction file: one record per non-empty line.
pub fn parse_label_file(text: &str) -> Result<Vec<LabelRecord>> {
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = raw.split_whitespace().collect();
        if fields.len() != 15 && fields.len() != 16 {
            return Err(Error::MalformedLine {
                line: line_no,
                reason: format!("expected 15 or 16 fields, found {}", fields.len()),
            });
        }
        let f = |i: usize, what: &str| parse_field::<f64>(fields[i], line_no, what);
        let rec = LabelRecord {
            category: fields[0].to_string(),
            truncation: f(1, "truncation")?,
            occlusion: parse_field::<f64>(fields[2], line_no, "occlusion")? as i32,
            alpha: f(3, "alpha")?,
            bbox2d: Box2D::new(f(4, "x1")?, f(5, "y1")?, f(6, "x2")?, f(7, "y2")?),
            dims: (f(8, "h")?, f(9, "w")?, f(10, "l")?),
            location: Vec3::new(f(11, "x")?, f(12, "y")?, f(13, "z")?),
            yaw: f(14, "ry")?,
            score: if fields.len() == 16 {
                Some(f(15, "score")?)
            } else {
                None
            },
        };
        out.push(rec);
    }
    Ok(out)
}

/// Serialize prediction records as 16-field lines with 6 decimal places.
/// Every record must carry a score.
pub fn write_predictions(records: &[LabelRecord]) -> Result<String> {
    let mut out = String::new();
    for (i, r) in records.iter().enumerate() {
        let score = r.score.ok_or(Error::MissingScore(i))?;
        out.push_str(&format!(
            "{} {:.6} {} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6}\n",
            r.category,
            r.truncation,
            r.occlusion,
            r.alpha,
            r.bbox2d.x_min,
            r.bbox2d.y_min,
            r.bbox2d.x_max,
            r.bbox2d.y_max,
            r.dims.0,
            r.dims.1,
            r.dims.2,
            r.location.x,
            r.location.y,
            r.location.z,
            r.yaw,
            score,
        ));
    }
    Ok(out)
}

/// Serialize ground-truth records as 15-field lines (no score).
pub fn write_labels(records: &[LabelRecord]) -> String {
    let mut out = String::new();
    for r in records.iter() {
        out.push_str(&format!(
            "{} {:.6} {} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6}\n",
            r.category,
            r.truncation,
            r.occlusion,
            r.alpha,
            r.bbox2d.x_min,
            r.bbox2d.y_min,
            r.bbox2d.x_max,
            r.bbox2d.y_max,
            r.dims.0,
            r.dims.1,
            r.dims.2,
            r.location.x,
            r.location.y,
            r.location.z,
            r.yaw,
        ));
    }
    out
}

/// Parse a calibration file. The projection matrix comes from the `P2:`
/// line (12 numbers, row-major). Object-benchmark calib files do not store
/// the image size, so an optional `S2:` line (`width height`) is honored
/// and the standard 1242x375 size is assumed otherwise.
pub fn parse_calib_file(text: &str) -> Result<CameraModel> {
    let mut p: Option<[[f64; 4]; 3]> = None;
    let mut size = (1242.0, 375.0);
    for line in text.lines() {
        let Some((key, rest)) = line.split_once(':') else {
            continue;
        };
        match key.trim() {
            "P2" => {
                let vals: Vec<f64> = rest
                    .split_whitespace()
                    .map(|v| v.parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| Error::MalformedMatrix("P2".into()))?;
                if vals.len() != 12 {
                    return Err(Error::MalformedMatrix("P2".into()));
                }
                let mut m = [[0.0; 4]; 3];
                for r in 0..3 {
                    for c in 0..4 {
                        m[r][c] = vals[r * 4 + c];
                    }
                }
                p = Some(m);
            }
            "S2" => {
                let vals: Vec<f64> = rest
                    .split_whitespace()
                    .map(|v| v.parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| Error::MalformedMatrix("S2".into()))?;
                if vals.len() != 2 {
                    return Err(Error::MalformedMatrix("S2".into()));
                }
                size = (vals[0], vals[1]);
            }
            _ => {}
        }
    }
    let p = p.ok_or_else(|| Error::MissingKey("P2".into()))?;
    Ok(CameraModel::new(p, size))
}

/// Serialize a camera back to calib format (P2 + S2 lines).
pub fn write_calib(cam: &CameraModel) -> String {
    let flat: Vec<String> = cam
        .p
        .iter()
        .flat_map(|row| row.iter().map(|v| format!("{v:.12e}")))
        .collect();
    format!(
        "P2: {}\nS2: {} {}\n",
        flat.join(" "),
        cam.image_size.0,
        cam.image_size.1
    )
}
