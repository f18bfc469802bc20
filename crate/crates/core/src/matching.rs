//! Ground-truth assignment for set-prediction training: a four-term pair
//! cost and optimal one-to-one bipartite matching.
//!
//! The ground-truth set is padded with dummy slots up to the prediction
//! count; dummy slots cost zero against every prediction, so the optimal
//! assignment is determined entirely by the real pairs.

use crate::error::{Error, Result};
use crate::geom::{self, Box2D, Box3D};
use serde::{Deserialize, Serialize};

/// Trade-off weights for the matching cost terms: classification,
/// normalized L1 2D box, 2D IoU, 3D IoU.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatchConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda4: f64,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self {
            lambda1: 2.0,
            lambda2: 5.0,
            lambda3: 2.0,
            lambda4: 2.0,
        }
    }
}

/// A prediction as seen by the matcher: class probabilities (softmax over
/// the label set), projected 2D box, and the 3D box.
#[derive(Clone, Debug)]
pub struct MatchPred {
    pub probs: Vec<f64>,
    pub bbox2d: Box2D,
    pub box3d: Box3D,
}

/// A ground truth as seen by the matcher.
#[derive(Clone, Debug)]
pub struct MatchGt {
    pub label: u32,
    pub bbox2d: Box2D,
    pub box3d: Box3D,
}

/// Cost of assigning `pred` to `gt`; `None` is a dummy slot costing zero.
///
/// For a real ground truth the cost is
/// `-l1 * p(class) + l2 * L1_2d + l3 * (1 - iou2d) + l4 * (1 - iou3d)`
/// where the L1 term compares corner coordinates normalized by the image
/// size.
pub fn pair_cost(
    gt: Option<&MatchGt>,
    pred: &MatchPred,
    image_size: (f64, f64),
    cfg: &MatchConfig,
) -> Result<f64> {
    let Some(gt) = gt else {
        return Ok(0.0);
    };
    if pred.probs.is_empty() {
        return Err(Error::contract("prediction carries no class probabilities"));
    }
    let class = gt.label as usize;
    if class >= pred.probs.len() {
        return Err(Error::contract(format!(
            "ground-truth class {} outside probability vector of length {}",
            class,
            pred.probs.len()
        )));
    }
    let (w, h) = image_size;
    let l1_2d = ((pred.bbox2d.x_min - gt.bbox2d.x_min) / w).abs()
        + ((pred.bbox2d.y_min - gt.bbox2d.y_min) / h).abs()
        + ((pred.bbox2d.x_max - gt.bbox2d.x_max) / w).abs()
        + ((pred.bbox2d.y_max - gt.bbox2d.y_max) / h).abs();
    let iou2 = geom::iou_2d(&pred.bbox2d, &gt.bbox2d);
    let iou3 = geom::iou_3d(&pred.box3d, &gt.box3d);
    Ok(-cfg.lambda1 * pred.probs[class]
        + cfg.lambda2 * l1_2d
        + cfg.lambda3 * (1.0 - iou2)
        + cfg.lambda4 * (1.0 - iou3))
}

/// Result of a square assignment: `sigma[slot] = prediction index`.
#[derive(Clone, Debug)]
pub struct Assignment {
    pub sigma: Vec<usize>,
    pub pair_costs: Vec<f64>,
    pub total_cost: f64,
    /// Count of real (non-dummy) slots.
    pub real_slots: usize,
}

impl Assignment {
    /// Matched (gt index, prediction index) pairs over the real slots.
    pub fn matched_pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.real_slots).map(|g| (g, self.sigma[g]))
    }
}

/// Optimal assignment for a square cost matrix (rows are slots, columns
/// predictions), minimizing total cost with the shortest-augmenting-path
/// algorithm.
pub fn hungarian(cost: &[Vec<f64>]) -> Result<Vec<usize>> {
    let n = cost.len();
    for row in cost {
        if row.len() != n {
            return Err(Error::contract(format!(
                "cost matrix is not square: {n} rows, row of length {}",
                row.len()
            )));
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::contract("cost matrix contains non-finite entries"));
        }
    }
    if n == 0 {
        return Ok(Vec::new());
    }

    // Jonker-Volgenant style duals with one augmenting path per row.
    // Columns are 1-based internally; column 0 is the virtual start.
    let inf = f64::INFINITY;
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut way = vec![0usize; n + 1];
    let mut match_col = vec![0usize; n + 1]; // column -> row (1-based, 0 = free)

    for i in 1..=n {
        let mut min_v = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        let mut j0 = 0usize;
        match_col[0] = i;
        loop {
            used[j0] = true;
            let i0 = match_col[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < min_v[j] {
                    min_v[j] = cur;
                    way[j] = j0;
                }
                if min_v[j] < delta {
                    delta = min_v[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[match_col[j]] += delta;
                    v[j] -= delta;
                } else {
                    min_v[j] -= delta;
                }
            }
            j0 = j1;
            if match_col[j0] == 0 {
                break;
            }
        }
        // augment along the alternating path
        while j0 != 0 {
            let j1 = way[j0];
            match_col[j0] = match_col[j1];
            j0 = j1;
        }
    }

    let mut sigma = vec![0usize; n];
    for j in 1..=n {
        if match_col[j] > 0 {
            sigma[match_col[j] - 1] = j - 1;
        }
    }
    Ok(sigma)
}

/// Build the padded cost matrix and solve it. `gts.len()` must not exceed
/// `preds.len()`; slots `gts.len()..preds.len()` are dummies.
pub fn assign(
    gts: &[MatchGt],
    preds: &[MatchPred],
    image_size: (f64, f64),
    cfg: &MatchConfig,
) -> Result<Assignment> {
    let m = gts.len();
    let n = preds.len();
    if m > n {
        return Err(Error::TooManyGroundTruths(m, n));
    }
    if cfg.lambda1 <= 0.0 && cfg.lambda2 <= 0.0 && cfg.lambda3 <= 0.0 && cfg.lambda4 <= 0.0 {
        return Err(Error::contract("at least one matching weight must be positive"));
    }
    let mut cost = vec![vec![0.0f64; n]; n];
    for (slot, row) in cost.iter_mut().enumerate() {
        let gt = gts.get(slot);
        for (p, cell) in row.iter_mut().enumerate() {
            *cell = pair_cost(gt, &preds[p], image_size, cfg)?;
        }
    }
    let sigma = hungarian(&cost)?;
    let pair_costs: Vec<f64> = sigma
        .iter()
        .enumerate()
        .map(|(slot, &p)| cost[slot][p])
        .collect();
    let total_cost = pair_costs.iter().sum();
    Ok(Assignment {
        sigma,
        pair_costs,
        total_cost,
        real_slots: m,
    })
}
