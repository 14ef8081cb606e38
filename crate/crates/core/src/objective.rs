//! Glue between samples, the model and the losses: builds training examples
//! and evaluates the weighted objective with its parameter gradient.

use crate::losses::{self, LaneTarget, LossBreakdown, LossError, LossParts, LossWeights, OffsetLoss};
use crate::network::{Forward, Grads, LanePrediction, Model, ModelConfig, NetInput, NetworkError, OutputGrads};
use crate::scene::{DepthTruth, Sample};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ObjectiveError {
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error("sample does not fit the model: {0}")]
    Incompatible(&'static str),
}

/// Everything one training step needs from a sample.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub input: NetInput,
    /// Depth bins pooled to feature resolution.
    pub depth: DepthTruth,
    pub target: LaneTarget,
}

impl TrainingExample {
    pub fn new(sample: &Sample, config: &ModelConfig) -> Result<Self, ObjectiveError> {
        if sample.image.height != config.image_height || sample.image.width != config.image_width {
            return Err(ObjectiveError::Incompatible("image size"));
        }
        Ok(Self {
            input: NetInput::from_sample(sample),
            depth: sample.depth.pooled(config.downsample, config.depth_bins()),
            target: LaneTarget::from_lanes(&sample.lanes, &config.grid),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveConfig {
    pub weights: LossWeights,
    /// Ground-truth confidence threshold for the offset mask.
    pub sigma: f64,
    pub offset_loss: OffsetLoss,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            sigma: 0.5,
            offset_loss: OffsetLoss::L1,
        }
    }
}

impl ObjectiveConfig {
    /// Depth term alone, used for depth pretraining.
    pub fn depth_only() -> Self {
        Self {
            weights: LossWeights {
                depth: 1.0,
                ..LossWeights::ZERO
            },
            ..Self::default()
        }
    }
}

/// Instance term; zero for a sample without lane cells.
fn instance_term(
    pred: &LanePrediction,
    target: &LaneTarget,
    grad: bool,
) -> Result<(f64, Option<alloc::vec::Vec<f64>>), LossError> {
    if target.foreground_count() == 0 {
        return Ok((0.0, grad.then(|| alloc::vec![0.0; pred.embedding.len()])));
    }
    let value = losses::instance_loss(&pred.embedding, pred.embed_dim, &target.instance)?;
    let g = if grad {
        Some(losses::instance_loss_grad(
            &pred.embedding,
            pred.embed_dim,
            &target.instance,
        )?)
    } else {
        None
    };
    Ok((value, g))
}

fn parts(fwd: &Forward, ex: &TrainingExample, cfg: &ObjectiveConfig) -> Result<LossParts, LossError> {
    let pred = &fwd.prediction;
    let offsets = losses::offset_losses(&pred.x_offset, &pred.z_offset, &ex.target, cfg.sigma, cfg.offset_loss)?;
    Ok(LossParts {
        depth: losses::depth_loss(&fwd.depth, &ex.depth)?.value,
        confidence: losses::conf_loss(&pred.confidence, &ex.target.confidence)?,
        instance: instance_term(pred, &ex.target, false)?.0,
        offset_x: offsets.0,
        offset_z: offsets.1,
    })
}

/// Forward pass and loss without gradients.
pub fn loss(model: &Model, ex: &TrainingExample, cfg: &ObjectiveConfig) -> Result<LossBreakdown, ObjectiveError> {
    let fwd = model.forward(&ex.input)?;
    Ok(losses::total_loss(parts(&fwd, ex, cfg)?, &cfg.weights)?)
}

/// Forward pass, loss, and accumulation of `d total / d params` into `grads`.
pub fn loss_and_grad(
    model: &Model,
    ex: &TrainingExample,
    cfg: &ObjectiveConfig,
    grads: &mut Grads,
) -> Result<LossBreakdown, ObjectiveError> {
    let fwd = model.forward(&ex.input)?;
    let breakdown = losses::total_loss(parts(&fwd, ex, cfg)?, &cfg.weights)?;
    let w = cfg.weights;
    let pred = &fwd.prediction;

    let mut out = OutputGrads::zeros(pred);
    if w.confidence > 0.0 {
        out.confidence = losses::conf_loss_grad(&pred.confidence, &ex.target.confidence)?;
        out.confidence.iter_mut().for_each(|g| *g *= w.confidence);
    }
    if w.instance > 0.0 {
        if let (_, Some(g)) = instance_term(pred, &ex.target, true)? {
            out.embedding = g.into_iter().map(|g| g * w.instance).collect();
        }
    }
    if w.offset_x > 0.0 || w.offset_z > 0.0 {
        let t = losses::offset_terms(&pred.x_offset, &pred.z_offset, &ex.target, cfg.sigma, cfg.offset_loss)?;
        out.x_offset = t.grad_x.into_iter().map(|g| g * w.offset_x).collect();
        out.z_offset = t.grad_z.into_iter().map(|g| g * w.offset_z).collect();
    }
    if w.depth > 0.0 {
        let mut g = losses::depth_loss_grad(&fwd.depth, &ex.depth)?;
        g.data.iter_mut().for_each(|v| *v *= w.depth);
        out.depth = Some(g);
    }
    model.backward(&fwd, &out, grads);
    Ok(breakdown)
}
