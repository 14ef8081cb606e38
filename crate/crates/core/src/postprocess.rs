//! From per-cell predictions to lane polylines: threshold, greedy embedding
//! clustering, one point per grid row.

use alloc::vec;
use alloc::vec::Vec;

use crate::geometry::{BevGridSpec, Point3};
use crate::losses::LaneTarget;
use crate::network::LanePrediction;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClusterParams {
    /// Confidence threshold.
    pub sigma: f64,
    /// Embedding-space merge radius. The push term only grows the summed
    /// distance between lane means, so neighbouring lanes often settle 1-2
    /// units apart; the default sits below that and above the pull spread.
    pub bandwidth: f64,
    pub min_cells: usize,
}

impl Default for ClusterParams {
    fn default() -> Self {
        Self {
            sigma: 0.5,
            bandwidth: 1.0,
            min_cells: 3,
        }
    }
}

impl ClusterParams {
    pub fn is_valid(&self) -> bool {
        self.sigma > 0.0 && self.sigma < 1.0 && self.bandwidth > 0.0 && self.min_cells >= 2
    }
}

/// Cluster label per cell; `None` for background or discarded cells.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Assignment {
    pub labels: Vec<Option<usize>>,
    pub clusters: usize,
    pub min_cells: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LaneInstance {
    /// Ascending `y`, one point per grid row.
    pub points: Vec<Point3>,
    /// Mean confidence of the member cells.
    pub score: f64,
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Scans cells above `sigma` in descending confidence (ties by row, then
/// column). A cell joins the cluster whose running-mean embedding is nearest
/// and within `bandwidth`, otherwise seeds a new one. Clusters smaller than
/// `min_cells` are dropped and the rest relabeled in creation order.
pub fn cluster(pred: &LanePrediction, params: &ClusterParams) -> Assignment {
    let n = pred.cell_count();
    let e = pred.embed_dim;
    let mut order: Vec<usize> = (0..n).filter(|&i| pred.confidence[i] > params.sigma).collect();
    order.sort_by(|&a, &b| pred.confidence[b].total_cmp(&pred.confidence[a]).then(a.cmp(&b)));

    let mut means: Vec<Vec<f64>> = Vec::new();
    let mut sizes: Vec<usize> = Vec::new();
    let mut raw = vec![None; n];
    let bw2 = params.bandwidth * params.bandwidth;
    for i in order {
        let emb = pred.embedding_of(i);
        let mut best: Option<(usize, f64)> = None;
        for (k, mu) in means.iter().enumerate() {
            let d = dist2(emb, mu);
            if d <= bw2 && best.map_or(true, |(_, bd)| d < bd) {
                best = Some((k, d));
            }
        }
        let k = match best {
            Some((k, _)) => {
                sizes[k] += 1;
                let s = sizes[k] as f64;
                for j in 0..e {
                    means[k][j] += (emb[j] - means[k][j]) / s;
                }
                k
            }
            None => {
                means.push(emb.to_vec());
                sizes.push(1);
                means.len() - 1
            }
        };
        raw[i] = Some(k);
    }

    let mut relabel = vec![None; means.len()];
    let mut clusters = 0;
    for (k, &s) in sizes.iter().enumerate() {
        if s >= params.min_cells {
            relabel[k] = Some(clusters);
            clusters += 1;
        }
    }
    Assignment {
        labels: raw.into_iter().map(|l| l.and_then(|k| relabel[k])).collect(),
        clusters,
        min_cells: params.min_cells,
    }
}

/// Turns clusters into polylines. Per member cell `x = x_min + (col +
/// x_offset) * cell_width`, `y` is the row center and `z = z_offset`; within
/// a row the most confident cell wins (ties by lower column). Instances left
/// with fewer than `min_cells` points are dropped.
pub fn reconstruct(assignment: &Assignment, pred: &LanePrediction, grid: &BevGridSpec) -> Vec<LaneInstance> {
    let cw = grid.cell_width();
    let mut out = Vec::with_capacity(assignment.clusters);
    for k in 0..assignment.clusters {
        let mut best_in_row: Vec<Option<usize>> = vec![None; pred.rows];
        let mut conf_sum = 0.0;
        let mut members = 0;
        for (i, l) in assignment.labels.iter().enumerate() {
            if *l != Some(k) {
                continue;
            }
            conf_sum += pred.confidence[i];
            members += 1;
            let row = i / pred.cols;
            let slot = &mut best_in_row[row];
            if slot.map_or(true, |j| pred.confidence[i] > pred.confidence[j]) {
                *slot = Some(i);
            }
        }
        let points: Vec<Point3> = best_in_row
            .iter()
            .enumerate()
            .filter_map(|(row, cell)| {
                cell.map(|i| {
                    let col = i % pred.cols;
                    Point3::new(
                        grid.x_min + (col as f64 + pred.x_offset[i]) * cw,
                        grid.row_center(row),
                        pred.z_offset[i],
                    )
                })
            })
            .collect();
        if points.len() >= assignment.min_cells.max(2) {
            out.push(LaneInstance {
                points,
                score: conf_sum / members as f64,
            });
        }
    }
    out
}

/// [`cluster`] followed by [`reconstruct`].
pub fn extract_lanes(pred: &LanePrediction, params: &ClusterParams, grid: &BevGridSpec) -> Vec<LaneInstance> {
    reconstruct(&cluster(pred, params), pred, grid)
}

/// Embedding magnitude used by [`oracle_prediction`]; distinct lanes end up
/// `5 * sqrt(2)` apart.
pub const ORACLE_EMBED_SCALE: f64 = 5.0;

/// A prediction that reproduces `target` exactly: confidence equals the
/// ground truth, embeddings are scaled one-hot instance ids and offsets are
/// copied. The embedding width is `max(lane_count, 1)`.
pub fn oracle_prediction(target: &LaneTarget) -> LanePrediction {
    let e = (target.lane_count as usize).max(1);
    let mut pred = LanePrediction::zeros(target.rows, target.cols, e);
    pred.confidence.copy_from_slice(&target.confidence);
    pred.x_offset.copy_from_slice(&target.x_offset);
    pred.z_offset.copy_from_slice(&target.z_offset);
    for (i, &id) in target.instance.iter().enumerate() {
        if id > 0 {
            pred.embedding_of_mut(i)[id as usize - 1] = ORACLE_EMBED_SCALE;
        }
    }
    pred
}
