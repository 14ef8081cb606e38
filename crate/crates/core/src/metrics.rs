//! Lane matching and the F1 / near-far error report.
//!
//! Lanes are compared on a fixed set of longitudinal samples. A prediction
//! and a ground-truth lane are compatible when enough of their co-visible
//! samples lie within `match_dist`; the one-to-one assignment takes as many
//! compatible pairs as possible, then the lowest total mean distance.

use alloc::vec;
use alloc::vec::Vec;

use crate::geometry::Point3;
use crate::math;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricsError {
    #[error("lane has fewer than two points")]
    DegenerateLane,
    #[error("invalid evaluation protocol: {0}")]
    InvalidProtocol(&'static str),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalProtocol {
    /// Strictly increasing longitudinal sample positions, meters.
    pub y_samples: Vec<f64>,
    /// Half-open `[start, end)`.
    pub near_range: (f64, f64),
    /// Closed `[start, end]`.
    pub far_range: (f64, f64),
    pub match_dist: f64,
    pub match_frac: f64,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        Self {
            y_samples: (3..=33).map(|i| 2.0 * i as f64).collect(),
            near_range: (0.0, 30.0),
            far_range: (30.0, 68.0),
            match_dist: 1.5,
            match_frac: 0.75,
        }
    }
}

impl EvalProtocol {
    pub fn validate(&self) -> Result<(), MetricsError> {
        if self.y_samples.is_empty() || self.y_samples.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(MetricsError::InvalidProtocol("y samples must be strictly increasing"));
        }
        let (n0, n1) = self.near_range;
        let (f0, f1) = self.far_range;
        if !(n0 < n1 && n1 <= f0 && f0 < f1) {
            return Err(MetricsError::InvalidProtocol(
                "near/far ranges must be ordered and disjoint",
            ));
        }
        if !(self.match_dist > 0.0) || !(self.match_frac > 0.0 && self.match_frac <= 1.0) {
            return Err(MetricsError::InvalidProtocol("match thresholds out of range"));
        }
        Ok(())
    }

    fn is_near(&self, y: f64) -> bool {
        y >= self.near_range.0 && y < self.near_range.1
    }

    fn is_far(&self, y: f64) -> bool {
        y >= self.far_range.0 && y <= self.far_range.1
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LaneSample {
    pub x: f64,
    pub z: f64,
    pub visible: bool,
}

/// Linear interpolation of `lane` at every `y`; samples outside the lane's
/// `y` span are invisible.
pub fn resample(lane: &[Point3], y_samples: &[f64]) -> Result<Vec<LaneSample>, MetricsError> {
    if lane.len() < 2 {
        return Err(MetricsError::DegenerateLane);
    }
    let mut pts = lane.to_vec();
    pts.sort_by(|a, b| a.y.total_cmp(&b.y));
    let (lo, hi) = (pts[0].y, pts[pts.len() - 1].y);
    if !(lo < hi) {
        return Err(MetricsError::DegenerateLane);
    }
    Ok(y_samples
        .iter()
        .map(|&y| {
            if !(y >= lo && y <= hi) {
                return LaneSample {
                    x: 0.0,
                    z: 0.0,
                    visible: false,
                };
            }
            let seg = pts.partition_point(|p| p.y < y).saturating_sub(1).min(pts.len() - 2);
            let (a, b) = (pts[seg], pts[seg + 1]);
            let t = if b.y > a.y { (y - a.y) / (b.y - a.y) } else { 0.0 };
            LaneSample {
                x: a.x + t * (b.x - a.x),
                z: a.z + t * (b.z - a.z),
                visible: true,
            }
        })
        .collect())
}

/// Compatibility and mean distance of one prediction/ground-truth pair.
fn pair_cost(pred: &[LaneSample], gt: &[LaneSample], protocol: &EvalProtocol) -> Option<f64> {
    let mut co = 0usize;
    let mut close = 0usize;
    let mut total = 0.0;
    for (p, g) in pred.iter().zip(gt) {
        if !(p.visible && g.visible) {
            continue;
        }
        co += 1;
        let d = math::sqrt((p.x - g.x) * (p.x - g.x) + (p.z - g.z) * (p.z - g.z));
        total += d;
        if d < protocol.match_dist {
            close += 1;
        }
    }
    (co > 0 && close as f64 >= protocol.match_frac * co as f64).then(|| total / co as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// `(pred index, gt index)` pairs.
    pub pairs: Vec<(usize, usize)>,
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
}

/// Sides larger than this fall back to greedy matching.
const EXACT_MATCH_LIMIT: usize = 16;

/// Maximum-cardinality, minimum-cost one-to-one assignment over `cost`
/// (`None` = incompatible), by dynamic programming over subsets of the
/// smaller side.
pub fn assign(cost: &[Vec<Option<f64>>], n_cols: usize) -> Vec<(usize, usize)> {
    let n_rows = cost.len();
    if n_rows == 0 || n_cols == 0 {
        return Vec::new();
    }
    if n_cols > n_rows {
        let t: Vec<Vec<Option<f64>>> = (0..n_cols).map(|c| (0..n_rows).map(|r| cost[r][c]).collect()).collect();
        let mut pairs: Vec<(usize, usize)> = assign(&t, n_rows).into_iter().map(|(a, b)| (b, a)).collect();
        pairs.sort_unstable();
        return pairs;
    }
    if n_cols > EXACT_MATCH_LIMIT {
        return greedy_assign(cost, n_cols);
    }
    // best[i][mask]: (pairs, cost) using rows >= i, with `mask` columns taken
    let full = 1usize << n_cols;
    let better = |a: (usize, f64), b: (usize, f64)| a.0 > b.0 || (a.0 == b.0 && a.1 < b.1);
    let mut best = vec![vec![(0usize, 0.0f64); full]; n_rows + 1];
    for i in (0..n_rows).rev() {
        for mask in 0..full {
            let mut b = best[i + 1][mask];
            for (c, entry) in cost[i].iter().enumerate() {
                if let Some(cv) = entry {
                    if mask & (1 << c) == 0 {
                        let next = best[i + 1][mask | (1 << c)];
                        let cand = (next.0 + 1, next.1 + cv);
                        if better(cand, b) {
                            b = cand;
                        }
                    }
                }
            }
            best[i][mask] = b;
        }
    }
    let mut pairs = Vec::new();
    let mut mask = 0usize;
    for i in 0..n_rows {
        let here = best[i][mask];
        if here == best[i + 1][mask] {
            continue;
        }
        for (c, entry) in cost[i].iter().enumerate() {
            if let Some(cv) = entry {
                if mask & (1 << c) == 0 {
                    let next = best[i + 1][mask | (1 << c)];
                    if (next.0 + 1, next.1 + cv) == here {
                        pairs.push((i, c));
                        mask |= 1 << c;
                        break;
                    }
                }
            }
        }
    }
    pairs
}

fn greedy_assign(cost: &[Vec<Option<f64>>], n_cols: usize) -> Vec<(usize, usize)> {
    let mut all: Vec<(f64, usize, usize)> = Vec::new();
    for (r, row) in cost.iter().enumerate() {
        for (c, v) in row.iter().enumerate() {
            if let Some(v) = v {
                all.push((*v, r, c));
            }
        }
    }
    all.sort_by(|a, b| a.0.total_cmp(&b.0).then((a.1, a.2).cmp(&(b.1, b.2))));
    let mut used_r = vec![false; cost.len()];
    let mut used_c = vec![false; n_cols];
    let mut pairs = Vec::new();
    for (_, r, c) in all {
        if !used_r[r] && !used_c[c] {
            used_r[r] = true;
            used_c[c] = true;
            pairs.push((r, c));
        }
    }
    pairs.sort_unstable();
    pairs
}

fn resample_all(lanes: &[Vec<Point3>], protocol: &EvalProtocol) -> Vec<Option<Vec<LaneSample>>> {
    lanes.iter().map(|l| resample(l, &protocol.y_samples).ok()).collect()
}

fn cost_matrix(
    preds: &[Option<Vec<LaneSample>>],
    gts: &[Option<Vec<LaneSample>>],
    protocol: &EvalProtocol,
) -> Vec<Vec<Option<f64>>> {
    preds
        .iter()
        .map(|p| {
            gts.iter()
                .map(|g| match (p, g) {
                    (Some(p), Some(g)) => pair_cost(p, g, protocol),
                    _ => None,
                })
                .collect()
        })
        .collect()
}

/// One-to-one matching of predicted to ground-truth lanes. Lanes with fewer
/// than two points never match.
pub fn match_lanes(preds: &[Vec<Point3>], gts: &[Vec<Point3>], protocol: &EvalProtocol) -> MatchResult {
    let rp = resample_all(preds, protocol);
    let rg = resample_all(gts, protocol);
    let pairs = assign(&cost_matrix(&rp, &rg, protocol), gts.len());
    MatchResult {
        true_positives: pairs.len(),
        false_positives: preds.len() - pairs.len(),
        false_negatives: gts.len() - pairs.len(),
        pairs,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MetricsReport {
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    /// Fraction of ground-truth lanes matched.
    pub accuracy: f64,
    pub x_err_near: f64,
    pub x_err_far: f64,
    pub z_err_near: f64,
    pub z_err_far: f64,
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
}

/// Accumulates matches over a dataset. Precision is 1 with no predictions
/// and recall is 1 with no ground truth; errors are 0 when no matched sample
/// falls in the range.
#[derive(Debug, Clone, Default)]
pub struct MetricsAccumulator {
    tp: usize,
    fp: usize,
    fn_: usize,
    // [x near, x far, z near, z far] sums and near/far counts
    err_sum: [f64; 4],
    near: usize,
    far: usize,
}

impl MetricsAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, preds: &[Vec<Point3>], gts: &[Vec<Point3>], protocol: &EvalProtocol) {
        let rp = resample_all(preds, protocol);
        let rg = resample_all(gts, protocol);
        let pairs = assign(&cost_matrix(&rp, &rg, protocol), gts.len());
        self.tp += pairs.len();
        self.fp += preds.len() - pairs.len();
        self.fn_ += gts.len() - pairs.len();
        for (pi, gi) in pairs {
            let (p, g) = (rp[pi].as_ref().unwrap(), rg[gi].as_ref().unwrap());
            for ((ps, gs), &y) in p.iter().zip(g).zip(&protocol.y_samples) {
                if !(ps.visible && gs.visible) {
                    continue;
                }
                let (dx, dz) = ((ps.x - gs.x).abs(), (ps.z - gs.z).abs());
                if protocol.is_near(y) {
                    self.err_sum[0] += dx;
                    self.err_sum[2] += dz;
                    self.near += 1;
                } else if protocol.is_far(y) {
                    self.err_sum[1] += dx;
                    self.err_sum[3] += dz;
                    self.far += 1;
                }
            }
        }
    }

    pub fn report(&self) -> MetricsReport {
        let ratio = |a: usize, b: usize| if b == 0 { 1.0 } else { a as f64 / b as f64 };
        let precision = ratio(self.tp, self.tp + self.fp);
        let recall = ratio(self.tp, self.tp + self.fn_);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        let mean = |s: f64, n: usize| if n == 0 { 0.0 } else { s / n as f64 };
        MetricsReport {
            f1,
            precision,
            recall,
            accuracy: recall,
            x_err_near: mean(self.err_sum[0], self.near),
            x_err_far: mean(self.err_sum[1], self.far),
            z_err_near: mean(self.err_sum[2], self.near),
            z_err_far: mean(self.err_sum[3], self.far),
            true_positives: self.tp,
            false_positives: self.fp,
            false_negatives: self.fn_,
        }
    }
}

/// Report for a single sample.
pub fn evaluate(preds: &[Vec<Point3>], gts: &[Vec<Point3>], protocol: &EvalProtocol) -> MetricsReport {
    let mut acc = MetricsAccumulator::new();
    acc.add(preds, gts, protocol);
    acc.report()
}
