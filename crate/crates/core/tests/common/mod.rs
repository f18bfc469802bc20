//! Independent oracles for the acceptance suite. Nothing here may call
//! the implementation paths it checks: the volumetric IoU oracle counts
//! grid cells against half-plane constraints (no polygon clipping), and
//! the AP reference recomputes the interpolated curve with plain loops.

use boxdenoise3d_core::{Box3D, Vec3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Half-plane form A*x + B*z >= C of a counter-clockwise footprint edge.
struct HalfPlane {
    a: f64,
    b: f64,
    c: f64,
}

fn footprint_half_planes(bx: &Box3D) -> [HalfPlane; 4] {
    // footprint corners computed from first principles (independent
    // rotation evaluation)
    let (s, c) = bx.yaw.sin_cos();
    let (dx, dz) = (bx.dims.2 / 2.0, bx.dims.1 / 2.0);
    let local = [(dx, dz), (dx, -dz), (-dx, -dz), (-dx, dz)];
    let mut pts: Vec<(f64, f64)> = local
        .iter()
        .map(|(lx, lz)| (bx.center.x + lx * c + lz * s, bx.center.z - lx * s + lz * c))
        .collect();
    // make counter-clockwise via the shoelace sign
    let mut area2 = 0.0;
    for i in 0..4 {
        let (x0, z0) = pts[i];
        let (x1, z1) = pts[(i + 1) % 4];
        area2 += x0 * z1 - x1 * z0;
    }
    if area2 < 0.0 {
        pts.reverse();
    }
    std::array::from_fn(|i| {
        let (x0, z0) = pts[i];
        let (x1, z1) = pts[(i + 1) % 4];
        let a = -(z1 - z0);
        let b = x1 - x0;
        HalfPlane {
            a,
            b,
            c: a * x0 + b * z0,
        }
    })
}

/// BEV footprint intersection area by cell counting at resolution `h`:
/// a cell counts when its center satisfies all eight half-plane
/// constraints. Evaluated scanline-by-scanline so the cell count is exact
/// for the given grid.
pub fn raster_bev_intersection(a: &Box3D, b: &Box3D, h: f64) -> f64 {
    let planes_a = footprint_half_planes(a);
    let planes_b = footprint_half_planes(b);
    let radius = |bx: &Box3D| (bx.dims.1.hypot(bx.dims.2)) / 2.0;
    let x_lo = (a.center.x - radius(a)).max(b.center.x - radius(b));
    let x_hi = (a.center.x + radius(a)).min(b.center.x + radius(b));
    let z_lo = (a.center.z - radius(a)).max(b.center.z - radius(b));
    let z_hi = (a.center.z + radius(a)).min(b.center.z + radius(b));
    if x_lo >= x_hi || z_lo >= z_hi {
        return 0.0;
    }
    let rows = ((z_hi - z_lo) / h).ceil() as usize;
    let cols_max = ((x_hi - x_lo) / h).ceil() as usize;
    let mut cells = 0u64;
    for j in 0..rows {
        let z = z_lo + (j as f64 + 0.5) * h;
        // intersect the x-intervals admitted by all eight constraints
        let mut lo = x_lo;
        let mut hi = x_hi;
        let mut row_dead = false;
        for p in planes_a.iter().chain(planes_b.iter()) {
            let rhs = p.c - p.b * z;
            if p.a.abs() < 1e-18 {
                if rhs > 0.0 {
                    row_dead = true;
                    break;
                }
            } else if p.a > 0.0 {
                lo = lo.max(rhs / p.a);
            } else {
                hi = hi.min(rhs / p.a);
            }
        }
        if row_dead || lo >= hi {
            continue;
        }
        // cell centers x_lo + (i + 0.5) h inside [lo, hi]
        let i_min = ((lo - x_lo) / h - 0.5).ceil().max(0.0) as usize;
        let i_max_f = ((hi - x_lo) / h - 0.5).floor();
        if i_max_f < 0.0 {
            continue;
        }
        let i_max = (i_max_f as usize).min(cols_max.saturating_sub(1));
        if i_max >= i_min {
            cells += (i_max - i_min + 1) as u64;
        }
    }
    cells as f64 * h * h
}

/// Volumetric IoU with the rasterized footprint and analytic vertical
/// overlap.
pub fn raster_iou_3d(a: &Box3D, b: &Box3D, h: f64) -> f64 {
    let (a_lo, a_hi) = (a.center.y - a.dims.0 / 2.0, a.center.y + a.dims.0 / 2.0);
    let (b_lo, b_hi) = (b.center.y - b.dims.0 / 2.0, b.center.y + b.dims.0 / 2.0);
    let v = (a_hi.min(b_hi) - a_lo.max(b_lo)).max(0.0);
    if v <= 0.0 {
        return 0.0;
    }
    let inter = raster_bev_intersection(a, b, h) * v;
    let union = a.dims.0 * a.dims.1 * a.dims.2 + b.dims.0 * b.dims.1 * b.dims.2 - inter;
    if union <= 0.0 || inter <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Seeded random box pairs with realistic overlap.
pub fn random_box_pairs(n: usize, seed: u64) -> Vec<(Box3D, Box3D)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let cx = rng.gen_range(-15.0..15.0);
            let cz = rng.gen_range(5.0..60.0);
            let a = Box3D::new(
                0,
                Vec3::new(cx, rng.gen_range(0.5..1.1), cz),
                (
                    rng.gen_range(1.2..1.9),
                    rng.gen_range(1.4..1.9),
                    rng.gen_range(3.2..4.6),
                ),
                rng.gen_range(-3.14..3.14),
                0.9,
            );
            let b = Box3D::new(
                0,
                Vec3::new(
                    cx + rng.gen_range(-2.5..2.5),
                    a.center.y + rng.gen_range(-0.4..0.4),
                    cz + rng.gen_range(-2.5..2.5),
                ),
                (
                    rng.gen_range(1.2..1.9),
                    rng.gen_range(1.4..1.9),
                    rng.gen_range(3.2..4.6),
                ),
                rng.gen_range(-3.14..3.14),
                0.9,
            );
            (a, b)
        })
        .collect()
}

/// Reference 40-point interpolated AP from a flat list of scored
/// detections with known correctness, written as directly as possible.
pub fn reference_ap_r40(scored: &[(f64, bool)], total_gts: usize) -> f64 {
    if total_gts == 0 {
        return 0.0;
    }
    let mut sorted = scored.to_vec();
    sorted.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    let mut curve: Vec<(f64, f64)> = Vec::new();
    let mut tp = 0usize;
    for (rank, &(_, is_tp)) in sorted.iter().enumerate() {
        if is_tp {
            tp += 1;
        }
        let recall = tp as f64 / total_gts as f64;
        let precision = tp as f64 / (rank as f64 + 1.0);
        curve.push((recall, precision));
    }
    let mut ap = 0.0;
    for i in 1..=40 {
        let r = i as f64 / 40.0;
        let mut best = 0.0f64;
        for &(rec, prec) in &curve {
            if rec >= r - 1e-12 && prec > best {
                best = prec;
            }
        }
        ap += best;
    }
    ap / 40.0 * 100.0
}

/// PASS/FAIL line for one acceptance criterion; panics on failure so the
/// harness records it.
pub fn report(criterion: &str, pass: bool, details: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    println!("ACCEPTANCE {criterion}: {verdict} ({details})");
    assert!(pass, "ACCEPTANCE {criterion}: FAIL ({details})");
}
