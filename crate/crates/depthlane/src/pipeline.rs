//! Training, evaluation and ablation runs.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use depthlane_core::losses::LossError;
use depthlane_core::metrics::MetricsAccumulator;
use depthlane_core::network::ParamGroup;
use depthlane_core::objective::{self, ObjectiveConfig, ObjectiveError, TrainingExample};
use depthlane_core::optim::Adam;
use depthlane_core::postprocess::extract_lanes;
use depthlane_core::{MetricsReport, Model, ModelConfig};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::config::{DepthMode, TrainConfig};
use crate::dataset::{read_dataset, Dataset};
use crate::error::{Error, Result};
use crate::report::Report;

pub const PRETRAIN_CHECKPOINT: &str = "pretrain.ckpt";
pub const MODEL_CHECKPOINT: &str = "model.ckpt";
pub const RUN_RECORD: &str = "run.json";

/// Model configuration for `cfg` on a dataset. The dataset fixes image size,
/// camera, depth bins and grid; the config must agree with it on `D` and the
/// grid size.
pub fn model_config(cfg: &TrainConfig, data: &Dataset) -> Result<ModelConfig> {
    let s = &data.spec;
    let check = |what: &str, cfg_value: usize, data_value: usize| {
        if cfg_value == data_value {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "{what} is {cfg_value} in the config but {data_value} in the dataset"
            )))
        }
    };
    check("depth_bins", cfg.depth_bins, s.bins.count)?;
    check("grid_rows", cfg.grid_rows, s.grid.rows)?;
    check("grid_cols", cfg.grid_cols, s.grid.cols)?;
    let mc = ModelConfig {
        image_height: s.height,
        image_width: s.width,
        channels: cfg.channels,
        embed_dim: cfg.embed_dim,
        downsample: cfg.downsample,
        bins: s.bins,
        grid: s.grid,
        camera: s.camera,
        fusion: cfg.fusion.into(),
        depth_attention: cfg.depth_attention,
        seed: cfg.seed,
    };
    mc.validate().map_err(|e| Error::Config(e.to_string()))?;
    Ok(mc)
}

pub fn examples(data: &Dataset, mc: &ModelConfig) -> Result<Vec<TrainingExample>> {
    data.samples
        .iter()
        .map(|s| TrainingExample::new(s, mc).map_err(|e| Error::Config(e.to_string())))
        .collect()
}

/// Parameter groups held fixed in the main phase of each regime.
pub fn frozen_groups(mode: DepthMode) -> &'static [ParamGroup] {
    match mode {
        DepthMode::Method1 => &[
            ParamGroup::Trunk,
            ParamGroup::DepthBranch,
            ParamGroup::DepthHead,
            ParamGroup::FvBranch,
        ],
        DepthMode::Method2 => &[ParamGroup::DepthBranch, ParamGroup::DepthHead],
        DepthMode::Method3 => &[],
    }
}

/// Parameter groups trained by depth pretraining.
pub const PRETRAINED_GROUPS: &[ParamGroup] = &[ParamGroup::Trunk, ParamGroup::DepthBranch, ParamGroup::DepthHead];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Phase {
    Pretrain,
    Train,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub phase: Phase,
    pub depth: f64,
    pub confidence: f64,
    pub instance: f64,
    pub offset_x: f64,
    pub offset_z: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    /// Number of completed steps.
    pub step: usize,
    pub split: String,
    pub report: Report,
}

/// Log of one run. Entries are only ever appended.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    config: TrainConfig,
    pub param_count: usize,
    pub frozen: Vec<String>,
    steps: Vec<StepRecord>,
    evals: Vec<EvalRecord>,
    pub checkpoint: Option<PathBuf>,
    pub wall_clock_secs: f64,
}

impl RunRecord {
    fn new(config: TrainConfig, param_count: usize) -> Self {
        Self {
            config,
            param_count,
            frozen: Vec::new(),
            steps: Vec::new(),
            evals: Vec::new(),
            checkpoint: None,
            wall_clock_secs: 0.0,
        }
    }

    /// The configuration as it was when the run started.
    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn steps(&self) -> &[StepRecord] {
        &self.steps
    }

    pub fn evals(&self) -> &[EvalRecord] {
        &self.evals
    }

    pub fn push_step(&mut self, r: StepRecord) {
        self.steps.push(r);
    }

    pub fn push_eval(&mut self, r: EvalRecord) {
        self.evals.push(r);
    }

    /// Total loss per logged step of `phase`.
    pub fn losses(&self, phase: Phase) -> Vec<f64> {
        self.steps
            .iter()
            .filter(|s| s.phase == phase)
            .map(|s| s.total)
            .collect()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("record serializes");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }
}

/// Lane predictions for every sample, post-processed and scored.
pub fn evaluate(model: &Model, data: &Dataset, cfg: &TrainConfig) -> Result<MetricsReport> {
    let mc = model.config();
    let protocol = cfg.protocol();
    let cluster = cfg.cluster_params();
    let mut acc = MetricsAccumulator::new();
    for ex_sample in &data.samples {
        let ex = TrainingExample::new(ex_sample, mc).map_err(|e| Error::Config(e.to_string()))?;
        let (pred, _) = model.predict(&ex.input)?;
        let lanes: Vec<_> = extract_lanes(&pred, &cluster, &mc.grid)
            .into_iter()
            .map(|l| l.points)
            .collect();
        acc.add(&lanes, &ex_sample.lanes, &protocol);
    }
    Ok(acc.report())
}

/// Scores a saved checkpoint on the dataset at `dataset`. The checkpoint must
/// match the dimensions `cfg` implies for that dataset.
pub fn evaluate_run(checkpoint_path: &Path, dataset: &Path, cfg: &TrainConfig) -> Result<MetricsReport> {
    let data = read_dataset(dataset)?;
    let mc = model_config(cfg, &data)?;
    let model = checkpoint::load(checkpoint_path, &mc)?;
    evaluate(&model, &data, cfg)
}

fn step_error(step: usize, e: ObjectiveError) -> Error {
    match e {
        ObjectiveError::Loss(LossError::NonFiniteLoss(term)) => Error::NonFiniteLoss {
            step,
            detail: format!("{term} term"),
        },
        other => Error::Objective(other),
    }
}

/// Cycles through the examples in a fresh seeded permutation per epoch.
struct Sampler {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    pos: usize,
}

impl Sampler {
    fn new(n: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        Self { rng, order, pos: 0 }
    }

    /// Next index and whether it starts a new epoch.
    fn next(&mut self) -> (usize, bool) {
        let mut wrapped = false;
        if self.pos == self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
            wrapped = true;
        }
        self.pos += 1;
        (self.order[self.pos - 1], wrapped)
    }
}

/// Bit patterns of the frozen tensors.
struct FrozenSnapshot(Vec<(String, Vec<u64>)>);

impl FrozenSnapshot {
    fn take(model: &Model, opt: &Adam) -> Self {
        Self(
            model
                .params()
                .iter()
                .filter(|(id, _)| opt.is_frozen(id.index()))
                .map(|(_, t)| (t.name.clone(), t.data.iter().map(|v| v.to_bits()).collect()))
                .collect(),
        )
    }

    fn verify(&self, model: &Model) -> Result<()> {
        for (name, bits) in &self.0 {
            let id = model.params().find(name).expect("snapshot names come from the model");
            if model
                .params()
                .get(id)
                .iter()
                .map(|v| v.to_bits())
                .ne(bits.iter().copied())
            {
                return Err(Error::FrozenParameterChanged(name.clone()));
            }
        }
        Ok(())
    }
}

struct Loop<'a> {
    cfg: &'a TrainConfig,
    phase: Phase,
    objective: ObjectiveConfig,
    steps: usize,
    val: Option<&'a Dataset>,
}

/// Runs `l.steps` optimizer steps, appending to `record`. Frozen tensors are
/// checked bitwise at each epoch boundary and at the end.
fn run_loop(
    model: &mut Model,
    opt: &mut Adam,
    exs: &[TrainingExample],
    l: Loop<'_>,
    record: &mut RunRecord,
) -> Result<()> {
    if exs.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    let snapshot = FrozenSnapshot::take(model, opt);
    let mut sampler = Sampler::new(exs.len(), l.cfg.seed ^ (l.phase as u64 + 1));
    let mut grads = model.params().zero_grads();
    let batch = l.cfg.batch_size;
    for step in 0..l.steps {
        grads.fill_zero();
        let mut parts = [0.0; 5];
        let mut total = 0.0;
        for _ in 0..batch {
            let (i, new_epoch) = sampler.next();
            if new_epoch {
                snapshot.verify(model)?;
            }
            let b =
                objective::loss_and_grad(model, &exs[i], &l.objective, &mut grads).map_err(|e| step_error(step, e))?;
            for (acc, v) in parts.iter_mut().zip(b.parts.as_array()) {
                *acc += v / batch as f64;
            }
            total += b.total / batch as f64;
        }
        if batch > 1 {
            grads.scale(1.0 / batch as f64);
        }
        if !total.is_finite() || !grads.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                detail: "gradient".into(),
            });
        }
        opt.config.lr = l.cfg.lr_at(step, l.steps);
        opt.step(model.params_mut(), &grads);
        let [depth, confidence, instance, offset_x, offset_z] = parts;
        record.push_step(StepRecord {
            step,
            phase: l.phase,
            depth,
            confidence,
            instance,
            offset_x,
            offset_z,
            total,
        });
        let done = step + 1;
        if let Some(val) = l.val {
            let every = l.cfg.eval_every;
            if done == l.steps || (every > 0 && done % every == 0) {
                let report = evaluate(model, val, l.cfg)?;
                record.push_eval(EvalRecord {
                    step: done,
                    split: "val".into(),
                    report: Report::from(&report),
                });
            }
        }
    }
    snapshot.verify(model)
}

fn pretrain_model(cfg: &TrainConfig, data: &Dataset) -> Result<(Model, RunRecord)> {
    if !cfg.depth_mode.needs_pretraining() {
        return Err(Error::PretrainNotApplicable(cfg.depth_mode.name()));
    }
    let start = Instant::now();
    let mc = model_config(cfg, data)?;
    let exs = examples(data, &mc)?;
    let mut model = Model::new(mc)?;
    let mut record = RunRecord::new(cfg.clone(), model.param_count());
    let mut opt = Adam::new(cfg.adam(), model.params());
    opt.freeze_where(model.params(), |name| {
        !PRETRAINED_GROUPS.contains(&ParamGroup::of(name))
    });
    let l = Loop {
        cfg,
        phase: Phase::Pretrain,
        objective: ObjectiveConfig::depth_only(),
        steps: cfg.pretrain_steps,
        val: None,
    };
    run_loop(&mut model, &mut opt, &exs, l, &mut record)?;
    record.wall_clock_secs = start.elapsed().as_secs_f64();
    Ok((model, record))
}

/// Trains the shared backbone and the depth head on the depth term alone and
/// writes `out_dir/pretrain.ckpt`.
pub fn pretrain_depth(cfg: &TrainConfig) -> Result<(PathBuf, RunRecord)> {
    if !cfg.depth_mode.needs_pretraining() {
        return Err(Error::PretrainNotApplicable(cfg.depth_mode.name()));
    }
    let data = read_dataset(&cfg.dataset)?;
    let (model, mut record) = pretrain_model(cfg, &data)?;
    let path = cfg.out_dir.join(PRETRAIN_CHECKPOINT);
    checkpoint::save(&model, &path)?;
    record.checkpoint = Some(path.clone());
    Ok((path, record))
}

/// Main training phase on already loaded data. For methods 1 and 2 `init`
/// must hold the pretrained model.
pub fn train_model(
    cfg: &TrainConfig,
    data: &Dataset,
    val: Option<&Dataset>,
    init: Option<&Model>,
) -> Result<(Model, RunRecord)> {
    let start = Instant::now();
    let mc = model_config(cfg, data)?;
    let exs = examples(data, &mc)?;
    let mut model = Model::new(mc)?;
    if cfg.depth_mode.needs_pretraining() {
        let pre = init.ok_or(Error::MissingCheckpoint(cfg.depth_mode.name()))?;
        let wanted: Vec<_> = model
            .params()
            .iter()
            .filter(|(_, t)| PRETRAINED_GROUPS.contains(&ParamGroup::of(&t.name)))
            .map(|(id, _)| id)
            .collect();
        for id in wanted {
            let name = model.params().tensor(id).name.clone();
            let src = pre.params().find(&name).map(|s| pre.params().tensor(s));
            match src {
                Some(t) if t.shape == model.params().tensor(id).shape => {
                    model.params_mut().get_mut(id).copy_from_slice(&t.data)
                }
                _ => {
                    return Err(Error::DimensionMismatch {
                        what: format!("pretrained tensor {name}"),
                        expected: format!("{:?}", model.params().tensor(id).shape),
                        found: src.map_or("nothing".into(), |t| format!("{:?}", t.shape)),
                    })
                }
            }
        }
    }
    let mut record = RunRecord::new(cfg.clone(), model.param_count());
    let mut opt = Adam::new(cfg.adam(), model.params());
    let groups = frozen_groups(cfg.depth_mode);
    opt.freeze_where(model.params(), |name| groups.contains(&ParamGroup::of(name)));
    record.frozen = model
        .params()
        .iter()
        .filter(|(id, _)| opt.is_frozen(id.index()))
        .map(|(_, t)| t.name.clone())
        .collect();
    let l = Loop {
        cfg,
        phase: Phase::Train,
        objective: cfg.objective(),
        steps: cfg.steps,
        val,
    };
    run_loop(&mut model, &mut opt, &exs, l, &mut record)?;
    record.wall_clock_secs = start.elapsed().as_secs_f64();
    Ok((model, record))
}

/// Full training run from the config: loads the splits (and, for methods 1
/// and 2, the pretrained checkpoint), trains, and writes `model.ckpt` and
/// `run.json` under `out_dir`.
pub fn train(cfg: &TrainConfig) -> Result<RunRecord> {
    let data = read_dataset(&cfg.dataset)?;
    let val = cfg.val_dataset.as_deref().map(read_dataset).transpose()?;
    let pre = if cfg.depth_mode.needs_pretraining() {
        let path = cfg
            .pretrain_checkpoint
            .clone()
            .ok_or(Error::MissingCheckpoint(cfg.depth_mode.name()))?;
        if !path.exists() {
            return Err(Error::MissingCheckpoint(cfg.depth_mode.name()));
        }
        Some(checkpoint::load_as_saved(&path)?)
    } else {
        None
    };
    let (model, mut record) = train_model(cfg, &data, val.as_ref(), pre.as_ref())?;
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    let path = cfg.out_dir.join(MODEL_CHECKPOINT);
    checkpoint::save(&model, &path)?;
    record.checkpoint = Some(path);
    record.write(&cfg.out_dir.join(RUN_RECORD))?;
    Ok(record)
}

/// Named ablation variants, each a change to the base config.
pub const VARIANTS: &[&str] = &[
    "no-depth",
    "no-dat",
    "full",
    "method1",
    "method2",
    "method3",
    "naive-fusion",
];

pub fn variant_config(base: &TrainConfig, name: &str) -> Result<TrainConfig> {
    let mut c = base.clone();
    match name {
        "no-depth" => {
            c.lambda_depth = 0.0;
            c.depth_attention = false;
            c.depth_mode = DepthMode::Method3;
        }
        "no-dat" => {
            c.depth_attention = false;
            c.depth_mode = DepthMode::Method3;
        }
        "full" | "method3" => c.depth_mode = DepthMode::Method3,
        "method1" => c.depth_mode = DepthMode::Method1,
        "method2" => c.depth_mode = DepthMode::Method2,
        "naive-fusion" => {
            c.fusion = crate::config::Fusion::Naive;
            c.depth_mode = DepthMode::Method3;
        }
        other => {
            return Err(Error::Config(format!(
                "unknown variant `{other}` (known: {})",
                VARIANTS.join(", ")
            )))
        }
    }
    c.validate()?;
    Ok(c)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub name: String,
    pub param_count: usize,
    /// Split the row was scored on.
    pub split: &'static str,
    pub report: Report,
    pub final_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, name: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    pub fn render(&self) -> String {
        let mut s = format!(
            "{:<14} {:>8} {:>6} {:>6} {:>6} {:>8} {:>8} {:>8} {:>8} {:>6}\n",
            "variant", "params", "F1", "P", "R", "x_near", "x_far", "z_near", "z_far", "split"
        );
        for r in &self.rows {
            let m = &r.report;
            s.push_str(&format!(
                "{:<14} {:>8} {:>6.3} {:>6.3} {:>6.3} {:>8.3} {:>8.3} {:>8.3} {:>8.3} {:>6}\n",
                r.name,
                r.param_count,
                m.f1,
                m.precision,
                m.recall,
                m.x_err_near,
                m.x_err_far,
                m.z_err_near,
                m.z_err_far,
                r.split
            ));
        }
        s
    }
}

/// Trains every variant in `names` on the base config's training split and
/// scores it on the validation split, or on the training split when there is
/// none. Variants whose effective configs coincide are trained once; methods
/// 1 and 2 share one pretraining run.
pub fn ablate(base: &TrainConfig, names: &[String]) -> Result<AblationTable> {
    let mut seen = std::collections::HashSet::new();
    for n in names {
        if !seen.insert(n.as_str()) {
            return Err(Error::Config(format!("duplicate variant `{n}`")));
        }
    }
    let configs = names
        .iter()
        .map(|n| variant_config(base, n))
        .collect::<Result<Vec<_>>>()?;
    let data = read_dataset(&base.dataset)?;
    let val = base.val_dataset.as_deref().map(read_dataset).transpose()?;
    let (eval_data, split) = match &val {
        Some(v) => (v, "val"),
        None => (&data, "train"),
    };
    let mut pretrained: Option<Model> = None;
    let mut done: HashMap<String, AblationRow> = HashMap::new();
    let mut rows = Vec::with_capacity(names.len());
    for (name, cfg) in names.iter().zip(&configs) {
        let key = cfg.to_toml();
        if let Some(prev) = done.get(&key) {
            rows.push(AblationRow {
                name: name.clone(),
                ..prev.clone()
            });
            continue;
        }
        if cfg.depth_mode.needs_pretraining() && pretrained.is_none() {
            pretrained = Some(pretrain_model(cfg, &data)?.0);
        }
        let init = if cfg.depth_mode.needs_pretraining() {
            pretrained.as_ref()
        } else {
            None
        };
        let (model, record) = train_model(cfg, &data, None, init)?;
        let report = evaluate(&model, eval_data, cfg)?;
        let row = AblationRow {
            name: name.clone(),
            param_count: model.param_count(),
            split,
            report: Report::from(&report),
            final_loss: record.steps().last().map_or(f64::NAN, |s| s.total),
        };
        done.insert(key, row.clone());
        rows.push(row);
    }
    Ok(AblationTable { rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sampler_visits_each_example_once_per_epoch() {
        let mut s = Sampler::new(5, 3);
        for _ in 0..3 {
            let mut seen: Vec<usize> = (0..5).map(|_| s.next().0).collect();
            seen.sort();
            assert_eq!(seen, vec![0, 1, 2, 3, 4]);
        }
    }

    #[test]
    fn frozen_sets_nest() {
        for g in frozen_groups(DepthMode::Method2) {
            assert!(frozen_groups(DepthMode::Method1).contains(g));
        }
        assert!(frozen_groups(DepthMode::Method3).is_empty());
    }

    #[test]
    fn unknown_variant_is_a_config_error() {
        assert!(matches!(
            variant_config(&TrainConfig::default(), "bogus"),
            Err(Error::Config(_))
        ));
    }
}
