//! Training configuration: a flat, versioned TOML file. Unknown keys are
//! rejected. Relative paths resolve against the directory of the file.

use std::path::{Path, PathBuf};

use depthlane_core::metrics::EvalProtocol;
use depthlane_core::network::FusionMode;
use depthlane_core::objective::ObjectiveConfig;
use depthlane_core::optim::AdamConfig;
use depthlane_core::{ClusterParams, LossWeights, OffsetLoss};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DepthMode {
    /// Pretrain depth, then freeze the whole shared backbone and depth head.
    Method1,
    /// Pretrain depth, then freeze the depth branch and depth head.
    Method2,
    /// Train everything jointly from scratch.
    Method3,
}

impl DepthMode {
    pub fn name(self) -> &'static str {
        match self {
            Self::Method1 => "method1",
            Self::Method2 => "method2",
            Self::Method3 => "method3",
        }
    }

    pub fn needs_pretraining(self) -> bool {
        self != Self::Method3
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fusion {
    Prime,
    Naive,
}

impl From<Fusion> for FusionMode {
    fn from(f: Fusion) -> Self {
        match f {
            Fusion::Prime => FusionMode::Prime,
            Fusion::Naive => FusionMode::Naive,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OffsetNorm {
    L1,
    L2,
}

/// Learning rate over the steps of a phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    Constant,
    /// Half-cosine from `lr` down to zero at the last step.
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    #[serde(default = "missing_version")]
    pub version: u32,
    pub dataset: PathBuf,
    pub val_dataset: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub depth_mode: DepthMode,
    pub pretrain_checkpoint: Option<PathBuf>,

    pub channels: usize,
    pub embed_dim: usize,
    pub downsample: usize,
    /// Must match the dataset.
    pub depth_bins: usize,
    /// Must match the dataset.
    pub grid_rows: usize,
    /// Must match the dataset.
    pub grid_cols: usize,
    pub fusion: Fusion,
    pub depth_attention: bool,

    pub lambda_depth: f64,
    pub lambda_confidence: f64,
    pub lambda_instance: f64,
    pub lambda_x: f64,
    pub lambda_z: f64,
    pub sigma: f64,
    pub offset_loss: OffsetNorm,

    pub cluster_sigma: f64,
    pub cluster_bandwidth: f64,
    pub cluster_min_cells: usize,

    pub eval_y_start: f64,
    pub eval_y_end: f64,
    pub eval_y_step: f64,
    pub eval_near_far: f64,
    pub match_dist: f64,
    pub match_frac: f64,

    pub lr: f64,
    pub lr_schedule: LrSchedule,
    pub weight_decay: f64,
    pub steps: usize,
    pub pretrain_steps: usize,
    pub batch_size: usize,
    /// Validation metrics every this many steps; 0 evaluates only at the end.
    pub eval_every: usize,
    pub seed: u64,
}

fn missing_version() -> u32 {
    0
}

impl Default for TrainConfig {
    fn default() -> Self {
        let w = LossWeights::default();
        let c = ClusterParams::default();
        let p = EvalProtocol::default();
        Self {
            version: CONFIG_VERSION,
            dataset: PathBuf::from("data/train"),
            val_dataset: None,
            out_dir: PathBuf::from("run"),
            depth_mode: DepthMode::Method3,
            pretrain_checkpoint: None,
            channels: 32,
            embed_dim: 4,
            downsample: 4,
            depth_bins: 24,
            grid_rows: 32,
            grid_cols: 32,
            fusion: Fusion::Prime,
            depth_attention: true,
            lambda_depth: w.depth,
            lambda_confidence: w.confidence,
            lambda_instance: w.instance,
            lambda_x: w.offset_x,
            lambda_z: w.offset_z,
            sigma: 0.5,
            offset_loss: OffsetNorm::L1,
            cluster_sigma: c.sigma,
            cluster_bandwidth: c.bandwidth,
            cluster_min_cells: c.min_cells,
            eval_y_start: p.y_samples[0],
            eval_y_end: *p.y_samples.last().unwrap(),
            eval_y_step: p.y_samples[1] - p.y_samples[0],
            eval_near_far: p.near_range.1,
            match_dist: p.match_dist,
            match_frac: p.match_frac,
            lr: 1e-3,
            lr_schedule: LrSchedule::Constant,
            weight_decay: 0.0,
            steps: 2000,
            pretrain_steps: 500,
            batch_size: 1,
            eval_every: 500,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Parses and validates a config file, resolving relative paths.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        if let Some(dir) = path.parent() {
            cfg.resolve_paths(dir);
        }
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.dataset);
        fix(&mut self.out_dir);
        if let Some(p) = self.val_dataset.as_mut() {
            fix(p);
        }
        if let Some(p) = self.pretrain_checkpoint.as_mut() {
            fix(p);
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "unsupported config version {} (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        if self.channels == 0
            || self.embed_dim == 0
            || self.depth_bins == 0
            || self.grid_rows == 0
            || self.grid_cols == 0
        {
            return bad("model dimensions must be positive");
        }
        if !self.downsample.is_power_of_two() || self.downsample < 2 {
            return bad("downsample must be a power of two, at least 2");
        }
        self.loss_weights()
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        if !(self.sigma > 0.0 && self.sigma < 1.0) {
            return bad("sigma must lie in (0, 1)");
        }
        if !self.cluster_params().is_valid() {
            return bad("invalid cluster parameters");
        }
        if !(self.eval_y_step > 0.0) || !(self.eval_y_start <= self.eval_y_end) {
            return bad("eval y range must be non-empty with a positive step");
        }
        self.protocol().validate().map_err(|e| Error::Config(e.to_string()))?;
        if !(self.lr > 0.0) || !(self.weight_decay >= 0.0) {
            return bad("lr must be positive and weight_decay non-negative");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        Ok(())
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            depth: self.lambda_depth,
            confidence: self.lambda_confidence,
            instance: self.lambda_instance,
            offset_x: self.lambda_x,
            offset_z: self.lambda_z,
        }
    }

    pub fn objective(&self) -> ObjectiveConfig {
        ObjectiveConfig {
            weights: self.loss_weights(),
            sigma: self.sigma,
            offset_loss: match self.offset_loss {
                OffsetNorm::L1 => OffsetLoss::L1,
                OffsetNorm::L2 => OffsetLoss::L2,
            },
        }
    }

    pub fn cluster_params(&self) -> ClusterParams {
        ClusterParams {
            sigma: self.cluster_sigma,
            bandwidth: self.cluster_bandwidth,
            min_cells: self.cluster_min_cells,
        }
    }

    pub fn protocol(&self) -> EvalProtocol {
        let n = ((self.eval_y_end - self.eval_y_start) / self.eval_y_step + 1e-9).floor() as usize;
        let y_samples = (0..=n)
            .map(|i| self.eval_y_start + i as f64 * self.eval_y_step)
            .collect();
        let defaults = EvalProtocol::default();
        EvalProtocol {
            y_samples,
            near_range: (0.0, self.eval_near_far),
            far_range: (self.eval_near_far, defaults.far_range.1.max(self.eval_y_end)),
            match_dist: self.match_dist,
            match_frac: self.match_frac,
        }
    }

    /// Learning rate for `step` of a phase lasting `steps`.
    pub fn lr_at(&self, step: usize, steps: usize) -> f64 {
        match self.lr_schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::Cosine => {
                let t = step as f64 / steps.max(1) as f64;
                0.5 * self.lr * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = TrainConfig::default();
        assert_eq!(TrainConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn default_protocol_matches_core() {
        assert_eq!(TrainConfig::default().protocol(), EvalProtocol::default());
    }

    #[test]
    fn cosine_schedule_runs_from_lr_to_zero() {
        let cfg = TrainConfig::from_toml("version = 1\nlr = 0.01\nlr_schedule = \"cosine\"\n").unwrap();
        assert_eq!(cfg.lr_at(0, 100), 0.01);
        assert!((cfg.lr_at(50, 100) - 0.005).abs() < 1e-15);
        assert!(cfg.lr_at(100, 100).abs() < 1e-15);
        assert_eq!(TrainConfig::default().lr_at(70, 100), TrainConfig::default().lr);
    }

    #[test]
    fn unknown_key_is_an_error() {
        let err = TrainConfig::from_toml("version = 1\nlearning_rate = 0.1\n").unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert_eq!(err.exit_code(), 1);
    }

    #[test]
    fn wrong_or_missing_version_is_an_error() {
        assert!(matches!(TrainConfig::from_toml("version = 7\n"), Err(Error::Config(_))));
        assert!(matches!(TrainConfig::from_toml("steps = 7\n"), Err(Error::Config(_))));
    }

    #[test]
    fn partial_file_takes_defaults() {
        let cfg = TrainConfig::from_toml("version = 1\nsteps = 10\ndepth_mode = \"method2\"\n").unwrap();
        assert_eq!(cfg.steps, 10);
        assert_eq!(cfg.depth_mode, DepthMode::Method2);
        assert_eq!(cfg.channels, TrainConfig::default().channels);
    }

    #[test]
    fn rejects_bad_values() {
        assert!(TrainConfig::from_toml("version = 1\ndownsample = 3\n").is_err());
        assert!(TrainConfig::from_toml("version = 1\nlambda_depth = -1.0\n").is_err());
        assert!(TrainConfig::from_toml("version = 1\nsigma = 1.5\n").is_err());
        assert!(TrainConfig::from_toml("version = 1\ndepth_mode = \"method4\"\n").is_err());
    }

    #[test]
    fn relative_paths_resolve_against_the_file() {
        let mut cfg = TrainConfig::default();
        cfg.resolve_paths(Path::new("/base"));
        assert_eq!(cfg.dataset, PathBuf::from("/base/data/train"));
        assert_eq!(cfg.out_dir, PathBuf::from("/base/run"));
    }
}
