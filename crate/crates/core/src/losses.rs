//! Training objectives and their gradients with respect to network outputs.
//!
//! Each term has a value-only function and a `*_grad` companion. All sums are
//! normalized by their support counts.

use alloc::vec;
use alloc::vec::Vec;

use crate::geometry::{BevGridSpec, Point3};
use crate::math;
use crate::network::{DepthDistribution, Tensor};
use crate::scene::DepthTruth;

/// Clamp applied to confidences before taking logs.
pub const BCE_EPS: f64 = 1e-7;
/// Pull margin of the instance loss.
pub const PULL_MARGIN: f64 = 0.1;
/// Regularizer of the inverse push term.
pub const PUSH_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LossError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(&'static str),
    #[error("no foreground lane cells")]
    NoForeground,
    #[error("non-finite {0} loss")]
    NonFiniteLoss(&'static str),
    #[error("loss weights must be finite and non-negative")]
    InvalidWeights,
    #[error("threshold must lie in (0, 1)")]
    InvalidThreshold,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub depth: f64,
    pub confidence: f64,
    pub instance: f64,
    pub offset_x: f64,
    pub offset_z: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            depth: 1.0,
            confidence: 5.0,
            instance: 1.0,
            offset_x: 2.0,
            offset_z: 2.0,
        }
    }
}

impl LossWeights {
    pub const ZERO: Self = Self {
        depth: 0.0,
        confidence: 0.0,
        instance: 0.0,
        offset_x: 0.0,
        offset_z: 0.0,
    };

    pub fn as_array(&self) -> [f64; 5] {
        [self.depth, self.confidence, self.instance, self.offset_x, self.offset_z]
    }

    pub fn validate(&self) -> Result<(), LossError> {
        if self.as_array().iter().all(|w| w.is_finite() && *w >= 0.0) {
            Ok(())
        } else {
            Err(LossError::InvalidWeights)
        }
    }
}

/// Penalty used by the offset terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OffsetLoss {
    #[default]
    L1,
    L2,
}

/// Per-cell supervision on the BEV grid, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LaneTarget {
    pub rows: usize,
    pub cols: usize,
    /// 1.0 on lane cells, else 0.0.
    pub confidence: Vec<f64>,
    /// 0 for background, lanes numbered from 1.
    pub instance: Vec<u32>,
    pub x_offset: Vec<f64>,
    pub z_offset: Vec<f64>,
    pub lane_count: u32,
}

impl LaneTarget {
    /// Rasterizes 3D lanes onto the grid. Points outside the grid are
    /// skipped; lanes with no cell left get no id, so ids stay contiguous.
    /// Where two lanes share a cell the later one wins.
    pub fn from_lanes(lanes: &[Vec<Point3>], grid: &BevGridSpec) -> Self {
        let n = grid.cell_count();
        let mut t = Self {
            rows: grid.rows,
            cols: grid.cols,
            confidence: vec![0.0; n],
            instance: vec![0; n],
            x_offset: vec![0.0; n],
            z_offset: vec![0.0; n],
            lane_count: 0,
        };
        let cw = grid.cell_width();
        for lane in lanes {
            let cells: Vec<_> = lane.iter().filter_map(|p| grid.cell_of(*p).map(|c| (c, p))).collect();
            if cells.is_empty() {
                continue;
            }
            t.lane_count += 1;
            for (cell, p) in cells {
                let i = cell.row * grid.cols + cell.col;
                t.confidence[i] = 1.0;
                t.instance[i] = t.lane_count;
                t.x_offset[i] = (p.x - grid.col_left(cell.col)) / cw;
                t.z_offset[i] = p.z;
            }
        }
        // a lane fully overwritten by a later one would leave a gap in the ids
        let mut remap = vec![0u32; t.lane_count as usize + 1];
        let mut next = 0;
        for id in 1..=t.lane_count {
            if t.instance.contains(&id) {
                next += 1;
                remap[id as usize] = next;
            }
        }
        t.instance.iter_mut().for_each(|id| *id = remap[*id as usize]);
        t.lane_count = next;
        t
    }

    pub fn cell_count(&self) -> usize {
        self.rows * self.cols
    }

    pub fn foreground_count(&self) -> usize {
        self.instance.iter().filter(|&&i| i > 0).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DepthLoss {
    pub value: f64,
    /// Number of supervised pixels; 0 means every pixel was ignored and the
    /// value is 0 by convention.
    pub supervised: usize,
}

impl DepthLoss {
    pub fn all_ignored(&self) -> bool {
        self.supervised == 0
    }
}

fn check_depth(pred: &DepthDistribution, truth: &DepthTruth) -> Result<(), LossError> {
    let (_, h, w) = pred.0.shape();
    if (h, w) != (truth.height, truth.width) {
        return Err(LossError::ShapeMismatch("depth prediction vs truth"));
    }
    if truth.bins.iter().flatten().any(|&b| b as usize >= pred.bins()) {
        return Err(LossError::ShapeMismatch("truth bin exceeds bin count"));
    }
    Ok(())
}

/// `Σ |t − p| · t` over bins, which for one-hot truth is `1 − p_true`,
/// averaged over non-ignored pixels.
pub fn depth_loss(pred: &DepthDistribution, truth: &DepthTruth) -> Result<DepthLoss, LossError> {
    check_depth(pred, truth)?;
    let mut sum = 0.0;
    let mut n = 0;
    for (i, b) in truth.bins.iter().enumerate() {
        if let Some(b) = b {
            let (y, x) = (i / truth.width, i % truth.width);
            sum += 1.0 - pred.0.at(*b as usize, y, x);
            n += 1;
        }
    }
    Ok(DepthLoss {
        value: if n == 0 { 0.0 } else { sum / n as f64 },
        supervised: n,
    })
}

/// Gradient of [`depth_loss`] with respect to the probabilities.
pub fn depth_loss_grad(pred: &DepthDistribution, truth: &DepthTruth) -> Result<Tensor, LossError> {
    check_depth(pred, truth)?;
    let (d, h, w) = pred.0.shape();
    let mut g = Tensor::zeros(d, h, w);
    let n = truth.bins.iter().flatten().count();
    if n == 0 {
        return Ok(g);
    }
    for (i, b) in truth.bins.iter().enumerate() {
        if let Some(b) = b {
            *g.at_mut(*b as usize, i / w, i % w) = -1.0 / n as f64;
        }
    }
    Ok(g)
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(BCE_EPS, 1.0 - BCE_EPS)
}

/// Mean binary cross-entropy.
pub fn conf_loss(pred: &[f64], gt: &[f64]) -> Result<f64, LossError> {
    if pred.len() != gt.len() {
        return Err(LossError::ShapeMismatch("confidence vs target"));
    }
    if pred.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = pred
        .iter()
        .zip(gt)
        .map(|(&p, &y)| {
            let p = clamp_prob(p);
            -(y * math::ln(p) + (1.0 - y) * math::ln(1.0 - p))
        })
        .sum();
    Ok(sum / pred.len() as f64)
}

/// Gradient of [`conf_loss`]; zero where the clamp is active.
pub fn conf_loss_grad(pred: &[f64], gt: &[f64]) -> Result<Vec<f64>, LossError> {
    if pred.len() != gt.len() {
        return Err(LossError::ShapeMismatch("confidence vs target"));
    }
    let n = pred.len() as f64;
    Ok(pred
        .iter()
        .zip(gt)
        .map(|(&p, &y)| {
            if p < BCE_EPS || p > 1.0 - BCE_EPS {
                0.0
            } else {
                -(y / p - (1.0 - y) / (1.0 - p)) / n
            }
        })
        .collect())
}

struct Lanes {
    members: Vec<Vec<usize>>,
    means: Vec<Vec<f64>>,
}

fn group_lanes(embedding: &[f64], dim: usize, instance: &[u32]) -> Result<Lanes, LossError> {
    if dim == 0 || embedding.len() != instance.len() * dim {
        return Err(LossError::ShapeMismatch("embedding vs instance map"));
    }
    let k = instance.iter().copied().max().unwrap_or(0) as usize;
    let mut members = vec![Vec::new(); k];
    for (i, &id) in instance.iter().enumerate() {
        if id > 0 {
            members[id as usize - 1].push(i);
        }
    }
    members.retain(|m| !m.is_empty());
    if members.is_empty() {
        return Err(LossError::NoForeground);
    }
    let means = members
        .iter()
        .map(|m| {
            let mut mu = vec![0.0; dim];
            for &i in m {
                for (a, e) in mu.iter_mut().zip(&embedding[i * dim..(i + 1) * dim]) {
                    *a += e;
                }
            }
            mu.iter_mut().for_each(|a| *a /= m.len() as f64);
            mu
        })
        .collect();
    Ok(Lanes { members, means })
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    math::sqrt(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum())
}

/// Parts of the instance loss: hinged pull variance and summed pairwise
/// distance of lane means.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InstanceTerms {
    pub variance: f64,
    pub distance: f64,
    pub lanes: usize,
}

impl InstanceTerms {
    pub fn value(&self) -> f64 {
        if self.lanes >= 2 {
            self.variance + 1.0 / (self.distance + PUSH_EPS)
        } else {
            self.variance
        }
    }
}

pub fn instance_terms(embedding: &[f64], dim: usize, instance: &[u32]) -> Result<InstanceTerms, LossError> {
    let lanes = group_lanes(embedding, dim, instance)?;
    let k = lanes.members.len();
    let mut variance = 0.0;
    for (m, mu) in lanes.members.iter().zip(&lanes.means) {
        let s: f64 = m
            .iter()
            .map(|&i| {
                let h = (dist(&embedding[i * dim..(i + 1) * dim], mu) - PULL_MARGIN).max(0.0);
                h * h
            })
            .sum();
        variance += s / m.len() as f64;
    }
    variance /= k as f64;
    let mut distance = 0.0;
    for a in 0..k {
        for b in a + 1..k {
            distance += dist(&lanes.means[a], &lanes.means[b]);
        }
    }
    Ok(InstanceTerms {
        variance,
        distance,
        lanes: k,
    })
}

/// `L_var + 1 / (L_dist + ε)` with two or more lanes, `L_var` otherwise.
pub fn instance_loss(embedding: &[f64], dim: usize, instance: &[u32]) -> Result<f64, LossError> {
    instance_terms(embedding, dim, instance).map(|t| t.value())
}

/// Gradient of [`instance_loss`] with respect to the cell-major embedding.
pub fn instance_loss_grad(embedding: &[f64], dim: usize, instance: &[u32]) -> Result<Vec<f64>, LossError> {
    let terms = instance_terms(embedding, dim, instance)?;
    let lanes = group_lanes(embedding, dim, instance)?;
    let k = lanes.members.len();
    let mut grad = vec![0.0; embedding.len()];
    for (m, mu) in lanes.members.iter().zip(&lanes.means) {
        let scale = 1.0 / (k * m.len()) as f64;
        let mut sum_g = vec![0.0; dim];
        let mut gs = Vec::with_capacity(m.len());
        for &i in m {
            let e = &embedding[i * dim..(i + 1) * dim];
            let d = dist(e, mu);
            let h = d - PULL_MARGIN;
            let g: Vec<f64> = if h > 0.0 {
                e.iter().zip(mu).map(|(a, b)| 2.0 * h * (a - b) / d * scale).collect()
            } else {
                vec![0.0; dim]
            };
            sum_g.iter_mut().zip(&g).for_each(|(s, v)| *s += v);
            gs.push(g);
        }
        // the mean depends on every member
        for (&i, g) in m.iter().zip(gs) {
            for j in 0..dim {
                grad[i * dim + j] += g[j] - sum_g[j] / m.len() as f64;
            }
        }
    }
    if k >= 2 {
        let outer = -1.0 / ((terms.distance + PUSH_EPS) * (terms.distance + PUSH_EPS));
        for a in 0..k {
            let mut dmu = vec![0.0; dim];
            for b in 0..k {
                if a == b {
                    continue;
                }
                let d = dist(&lanes.means[a], &lanes.means[b]);
                if d > 0.0 {
                    for j in 0..dim {
                        dmu[j] += (lanes.means[a][j] - lanes.means[b][j]) / d;
                    }
                }
            }
            let m = &lanes.members[a];
            for &i in m {
                for j in 0..dim {
                    grad[i * dim + j] += outer * dmu[j] / m.len() as f64;
                }
            }
        }
    }
    Ok(grad)
}

fn offset_term(pred: &[f64], gt: &[f64], mask: &[bool], mode: OffsetLoss) -> (f64, Vec<f64>) {
    let n = mask.iter().filter(|m| **m).count();
    let mut grad = vec![0.0; pred.len()];
    if n == 0 {
        return (0.0, grad);
    }
    let mut sum = 0.0;
    for i in 0..pred.len() {
        if !mask[i] {
            continue;
        }
        let r = pred[i] - gt[i];
        match mode {
            OffsetLoss::L1 => {
                sum += r.abs();
                grad[i] = if r > 0.0 {
                    1.0
                } else if r < 0.0 {
                    -1.0
                } else {
                    0.0
                } / n as f64;
            }
            OffsetLoss::L2 => {
                sum += r * r;
                grad[i] = 2.0 * r / n as f64;
            }
        }
    }
    (sum / n as f64, grad)
}

/// Offset terms masked on ground-truth confidence above `sigma`.
#[derive(Debug, Clone, PartialEq)]
pub struct OffsetTerms {
    pub x: f64,
    pub z: f64,
    pub grad_x: Vec<f64>,
    pub grad_z: Vec<f64>,
}

pub fn offset_terms(
    pred_x: &[f64],
    pred_z: &[f64],
    target: &LaneTarget,
    sigma: f64,
    mode: OffsetLoss,
) -> Result<OffsetTerms, LossError> {
    let n = target.cell_count();
    if pred_x.len() != n || pred_z.len() != n {
        return Err(LossError::ShapeMismatch("offset prediction vs target"));
    }
    if !(sigma > 0.0 && sigma < 1.0) {
        return Err(LossError::InvalidThreshold);
    }
    let mask: Vec<bool> = target.confidence.iter().map(|&c| c > sigma).collect();
    let (x, grad_x) = offset_term(pred_x, &target.x_offset, &mask, mode);
    let (z, grad_z) = offset_term(pred_z, &target.z_offset, &mask, mode);
    Ok(OffsetTerms { x, z, grad_x, grad_z })
}

/// `(x, z)` offset losses.
pub fn offset_losses(
    pred_x: &[f64],
    pred_z: &[f64],
    target: &LaneTarget,
    sigma: f64,
    mode: OffsetLoss,
) -> Result<(f64, f64), LossError> {
    offset_terms(pred_x, pred_z, target, sigma, mode).map(|t| (t.x, t.z))
}

/// Unweighted loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossParts {
    pub depth: f64,
    pub confidence: f64,
    pub instance: f64,
    pub offset_x: f64,
    pub offset_z: f64,
}

impl LossParts {
    pub fn as_array(&self) -> [f64; 5] {
        [self.depth, self.confidence, self.instance, self.offset_x, self.offset_z]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub parts: LossParts,
    pub total: f64,
}

const TERM_NAMES: [&str; 5] = ["depth", "confidence", "instance", "x offset", "z offset"];

/// Weighted sum of the parts.
pub fn total_loss(parts: LossParts, weights: &LossWeights) -> Result<LossBreakdown, LossError> {
    weights.validate()?;
    let p = parts.as_array();
    if let Some(i) = p.iter().position(|v| !v.is_finite()) {
        return Err(LossError::NonFiniteLoss(TERM_NAMES[i]));
    }
    let total = p.iter().zip(weights.as_array()).map(|(v, w)| v * w).sum();
    Ok(LossBreakdown { parts, total })
}
