//! The learnable part of the detector.
//!
//! ```text
//! image + rays ─ trunk (strided convs + residual block) ─┬─ conv ─ SE(intrinsics) ─ [+ elevation code] ─ 1x1 ─ softmax ─ depth (D,H,W)
//!                                                        └─ conv ─ SE(intrinsics) ─ FV feature (C,H,W)
//! FV ── PFE ───────────────────────────── prime FV (C,1,W) ─┐
//! FV ── conv ─ sigmoid ─ gate ⊙ depth ─ max_h ─ prime depth (1,D,W) ─┴─ X ⊙ F ─ BEV (C,D,W)
//! BEV ─ resample onto grid ─ [+ coords] ─ 2x conv ─ {confidence, embedding, x offset, z offset}
//! ```
//!
//! Every block has an explicit backward pass; [`Model::forward`] keeps the
//! activations [`Model::backward`] needs.

mod fusion;
mod head;
pub mod ops;
mod params;
mod tensor;

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub use fusion::{
    column_max, dat, dat_gate, dat_gate_shape, fuse, naive_collapse_shape, pfe, pfe_conv_shape, BevFeature, PfeWeights,
    PrimeDepthFeature, PrimeFvFeature,
};
pub use head::{BevResampler, LanePrediction};
pub use ops::{ConvShape, SeWeights};
pub use params::{Grads, ParamId, ParamStore, ParamTensor};
pub use tensor::Tensor;

use crate::geometry::{BevGridSpec, BinMode, CameraModel, DepthBinSpec};
use crate::math;
use crate::scene::Sample;
use fusion::{PfeCache, PfeGrads};
use ops::{ConvCache, SeCache, SeGrads};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NetworkError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(&'static str),
    #[error("width mismatch: prime depth has width {depth}, prime feature has width {feature}")]
    WidthMismatch { depth: usize, feature: usize },
    #[error("image is {got_h}x{got_w}, model expects {want_h}x{want_w}")]
    ImageSize {
        got_h: usize,
        got_w: usize,
        want_h: usize,
        want_w: usize,
    },
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("parameter {0}: {1}")]
    Parameter(String, &'static str),
}

/// How depth and FV features are combined into the BEV feature.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionMode {
    /// Height-reduce both (PFE, depth attention), then broadcast product.
    Prime,
    /// Keep the full height: `Y(c, d, h, w) = p(d, h, w) * f(c, h, w)`,
    /// collapsed over `h` by a learned `(H, 1)` convolution.
    Naive,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub image_height: usize,
    pub image_width: usize,
    /// Feature channels `C`.
    pub channels: usize,
    /// Embedding width `E`.
    pub embed_dim: usize,
    /// Image-to-feature downsampling, a power of two.
    pub downsample: usize,
    /// Depth bins; `bins.count` is `D`.
    pub bins: DepthBinSpec,
    pub grid: BevGridSpec,
    /// Camera used to place BEV grid cells in the `(depth, column)` plane.
    pub camera: CameraModel,
    pub fusion: FusionMode,
    /// When false the depth-attention gate is fixed to 1.
    pub depth_attention: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let scene = crate::scene::SceneParams::default();
        Self {
            image_height: scene.height,
            image_width: scene.width,
            channels: 32,
            embed_dim: 4,
            downsample: 4,
            bins: scene.bins,
            grid: scene.grid,
            camera: scene.camera,
            fusion: FusionMode::Prime,
            depth_attention: true,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// 32x64 input, `C = 8`, `D = 6`, `E = 3`, 8x8 grid, downsample 8; small
    /// enough for finite-difference checks.
    pub fn tiny() -> Self {
        let base = Self::default();
        Self {
            image_height: 32,
            image_width: 64,
            channels: 8,
            embed_dim: 3,
            downsample: 8,
            bins: DepthBinSpec {
                d_min: 4.0,
                d_max: 104.0,
                count: 6,
                mode: BinMode::LogSpaced,
            },
            grid: BevGridSpec {
                rows: 8,
                cols: 8,
                ..base.grid
            },
            camera: base.camera.scaled(0.25),
            ..base
        }
    }

    /// Default scene parameters rendered to match this config's image size,
    /// camera, depth bins and grid.
    pub fn scene_params(&self) -> crate::scene::SceneParams {
        crate::scene::SceneParams {
            height: self.image_height,
            width: self.image_width,
            camera: self.camera,
            bins: self.bins,
            grid: self.grid,
            ..crate::scene::SceneParams::default()
        }
    }

    pub fn feature_height(&self) -> usize {
        self.image_height / self.downsample
    }

    pub fn feature_width(&self) -> usize {
        self.image_width / self.downsample
    }

    pub fn depth_bins(&self) -> usize {
        self.bins.count
    }

    fn stage_count(&self) -> usize {
        self.downsample.trailing_zeros() as usize
    }

    fn se_hidden(&self) -> usize {
        (self.channels / 4).max(4)
    }

    pub fn validate(&self) -> Result<(), NetworkError> {
        let bad = |m: &str| Err(NetworkError::InvalidConfig(String::from(m)));
        if self.channels < 2 || self.embed_dim == 0 {
            return bad("channels must be >= 2 and embed_dim >= 1");
        }
        if !self.downsample.is_power_of_two() || self.downsample < 2 {
            return bad("downsample must be a power of two >= 2");
        }
        if self.image_height % self.downsample != 0 || self.image_width % self.downsample != 0 {
            return bad("image size must be divisible by downsample");
        }
        if self.feature_height() == 0 || self.feature_width() == 0 {
            return bad("feature map would be empty");
        }
        self.bins
            .validate()
            .and(self.grid.validate())
            .and(self.camera.validate())
            .map_err(|e| NetworkError::InvalidConfig(format!("{e}")))
    }
}

/// Front-view features `(C, H, W)`; `at(h, w, c)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FvFeature(pub Tensor);

impl FvFeature {
    pub fn at(&self, h: usize, w: usize, c: usize) -> f64 {
        self.0.at(c, h, w)
    }
}

/// Depth logits `(D, H, W)`; `at(h, w, d)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthFeature(pub Tensor);

impl DepthFeature {
    pub fn at(&self, h: usize, w: usize, d: usize) -> f64 {
        self.0.at(d, h, w)
    }
}

/// Per-pixel depth-bin probabilities `(D, H, W)`; `at(h, w, d)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthDistribution(pub Tensor);

impl DepthDistribution {
    pub fn at(&self, h: usize, w: usize, d: usize) -> f64 {
        self.0.at(d, h, w)
    }

    pub fn bins(&self) -> usize {
        self.0.c
    }
}

/// Per-pixel normalized exponential over the depth axis.
pub fn depth_head(logits: &DepthFeature) -> DepthDistribution {
    DepthDistribution(ops::softmax_channels(&logits.0))
}

/// Intrinsics-conditioned channel gating of an arbitrary feature.
pub fn se_gate(feature: &Tensor, intrinsics: &[f64; 4], weights: &SeWeights<'_>) -> Result<Tensor, NetworkError> {
    let hidden = weights.fc1_b.len();
    if weights.fc1_w.len() != hidden * (feature.c + 4)
        || weights.fc2_b.len() != feature.c
        || weights.fc2_w.len() != feature.c * hidden
    {
        return Err(NetworkError::ShapeMismatch("SE weights vs feature channels"));
    }
    Ok(ops::se_gate(feature, intrinsics, weights).0)
}

/// Network input: the image as a `(3, H, W)` tensor centered on zero and the
/// normalized intrinsics.
#[derive(Debug, Clone, PartialEq)]
pub struct NetInput {
    pub image: Tensor,
    pub intrinsics: [f64; 4],
}

impl NetInput {
    pub fn from_sample(sample: &Sample) -> Self {
        let img = &sample.image;
        let (h, w) = (img.height, img.width);
        let mut t = Tensor::zeros(3, h, w);
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    *t.at_mut(c, y, x) = img.data[(y * w + x) * 3 + c] as f64 - 0.5;
                }
            }
        }
        Self {
            image: t,
            intrinsics: sample.camera.normalized_intrinsics(w, h),
        }
    }
}

/// Which part of the network a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Trunk,
    DepthBranch,
    DepthHead,
    FvBranch,
    Fusion,
    LaneHead,
}

impl ParamGroup {
    pub fn of(name: &str) -> Self {
        let prefix = name.split('.').next().unwrap_or("");
        match prefix {
            "trunk" => Self::Trunk,
            "depth_branch" => Self::DepthBranch,
            "depth_head" => Self::DepthHead,
            "fv_branch" => Self::FvBranch,
            "fusion" => Self::Fusion,
            _ => Self::LaneHead,
        }
    }
}

#[derive(Debug, Clone)]
struct ConvLayer {
    w: ParamId,
    b: ParamId,
    shape: ConvShape,
}

#[derive(Debug, Clone)]
struct SeLayer {
    fc1_w: ParamId,
    fc1_b: ParamId,
    fc2_w: ParamId,
    fc2_b: ParamId,
}

#[derive(Debug, Clone)]
struct Branch {
    conv: ConvLayer,
    se: SeLayer,
}

#[derive(Debug, Clone)]
enum FusionLayers {
    Prime {
        pfe_a: ConvLayer,
        pfe_b: ConvLayer,
        gate: Option<ConvLayer>,
    },
    Naive {
        collapse: ConvLayer,
    },
}

#[derive(Debug, Clone)]
struct Layers {
    stages: Vec<ConvLayer>,
    res_a: ConvLayer,
    res_b: ConvLayer,
    depth_branch: Branch,
    fv_branch: Branch,
    depth_head: ConvLayer,
    fusion: FusionLayers,
    hidden1: ConvLayer,
    hidden2: ConvLayer,
    confidence: ConvLayer,
    embedding: ConvLayer,
    x_offset: ConvLayer,
    z_offset: ConvLayer,
}

struct Builder {
    store: ParamStore,
    rng: ChaCha8Rng,
}

impl Builder {
    fn normal(&mut self, n: usize, std: f64) -> Vec<f64> {
        let dist = Normal::new(0.0, std).expect("finite std");
        (0..n).map(|_| dist.sample(&mut self.rng)).collect()
    }

    fn conv(&mut self, name: &str, shape: ConvShape, gain: f64, bias: f64) -> ConvLayer {
        let std = gain * math::sqrt(1.0 / shape.patch_len() as f64);
        let w = self.normal(shape.weight_len(), std);
        let w = self.store.add(
            format!("{name}.weight"),
            &[shape.out_c, shape.in_c, shape.kh, shape.kw],
            w,
        );
        let b = self
            .store
            .add(format!("{name}.bias"), &[shape.out_c], vec![bias; shape.out_c]);
        ConvLayer { w, b, shape }
    }

    fn linear(&mut self, name: &str, n_in: usize, n_out: usize, gain: f64, bias: f64) -> (ParamId, ParamId) {
        let w = self.normal(n_in * n_out, gain * math::sqrt(1.0 / n_in as f64));
        let w = self.store.add(format!("{name}.weight"), &[n_out, n_in], w);
        let b = self.store.add(format!("{name}.bias"), &[n_out], vec![bias; n_out]);
        (w, b)
    }

    fn se(&mut self, name: &str, channels: usize, hidden: usize) -> SeLayer {
        let (fc1_w, fc1_b) = self.linear(&format!("{name}.fc1"), channels + 4, hidden, 1.4, 0.0);
        let (fc2_w, fc2_b) = self.linear(&format!("{name}.fc2"), hidden, channels, 0.5, 1.0);
        SeLayer {
            fc1_w,
            fc1_b,
            fc2_w,
            fc2_b,
        }
    }
}

const RELU_GAIN: f64 = core::f64::consts::SQRT_2;

/// RGB plus the two ray-direction channels.
const INPUT_CHANNELS: usize = 5;

/// Appends `(u - cx) / fx` and `(v - cy) / fy` at pixel centers, computed
/// from the normalized intrinsics, at the resolution of `image`.
fn with_ray_channels(image: &Tensor, intrinsics: &[f64; 4]) -> Tensor {
    let (c, h, w) = image.shape();
    let mut x = Tensor::zeros(c + 2, h, w);
    x.data[..image.data.len()].copy_from_slice(&image.data);
    let [fx, fy, cx, cy] = *intrinsics;
    for v in 0..h {
        let ry = ((v as f64 + 0.5) / h as f64 - cy) / fy;
        for u in 0..w {
            *x.at_mut(c, v, u) = ((u as f64 + 0.5) / w as f64 - cx) / fx;
            *x.at_mut(c + 1, v, u) = ry;
        }
    }
    x
}

/// Knots of the elevation code fed to the depth head.
pub const ELEVATION_KNOTS: usize = 41;
const ELEVATION_SPAN: f64 = 0.5;
const ELEVATION_GAIN: f64 = 8.0;

/// Appends a hat-function code of the ray elevation `(v - cy) / fy` on
/// `ELEVATION_KNOTS` knots evenly spaced over `[-0.5, 0.5]`, clamped at the
/// ends and scaled by `ELEVATION_GAIN`. A shallow trunk cannot tell which row
/// it is looking at, and on a road the row fixes most of the depth; the code
/// lets the 1x1 depth head give each elevation band its own logits.
fn with_elevation_code(feature: &Tensor, intrinsics: &[f64; 4]) -> Tensor {
    let (c, h, w) = feature.shape();
    let mut x = Tensor::zeros(c + ELEVATION_KNOTS, h, w);
    x.data[..feature.data.len()].copy_from_slice(&feature.data);
    let [_, fy, _, cy] = *intrinsics;
    let step = 2.0 * ELEVATION_SPAN / (ELEVATION_KNOTS - 1) as f64;
    for v in 0..h {
        let e = ((v as f64 + 0.5) / h as f64 - cy) / fy;
        let t = ((e + ELEVATION_SPAN) / step).clamp(0.0, (ELEVATION_KNOTS - 1) as f64);
        let k = (t as usize).min(ELEVATION_KNOTS - 2);
        let frac = t - k as f64;
        for (knot, weight) in [(k, ELEVATION_GAIN * (1.0 - frac)), (k + 1, ELEVATION_GAIN * frac)] {
            x.data[((c + knot) * h + v) * w..][..w].fill(weight);
        }
    }
    x
}

#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
    layers: Layers,
    resampler: BevResampler,
}

struct BranchCache {
    conv: ConvCache,
    act: Tensor,
    se: SeCache,
    out: Tensor,
}

enum FusionCache {
    Prime {
        pfe: PfeCache,
        prime_fv: Tensor,
        gate: Option<(ConvCache, Tensor)>,
        prime_depth: Tensor,
        argmax: Vec<usize>,
    },
    Naive {
        collapse: Vec<ConvCache>,
    },
}

/// Activations of one forward pass, consumed by [`Model::backward`].
pub struct ForwardCache {
    stages: Vec<(ConvCache, Tensor)>,
    res_a: ConvCache,
    res_a_act: Tensor,
    res_b: ConvCache,
    trunk_out: Tensor,
    depth_branch: BranchCache,
    fv_branch: BranchCache,
    depth_head: ConvCache,
    fusion: FusionCache,
    hidden1: (ConvCache, Tensor),
    hidden2: (ConvCache, Tensor),
    heads: [ConvCache; 4],
}

pub struct Forward {
    pub prediction: LanePrediction,
    pub depth: DepthDistribution,
    pub bev: BevFeature,
    cache: ForwardCache,
}

/// Loss gradients with respect to the network outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputGrads {
    /// With respect to the squashed confidence.
    pub confidence: Vec<f64>,
    /// Cell-major like [`LanePrediction::embedding`].
    pub embedding: Vec<f64>,
    /// With respect to the squashed x offset.
    pub x_offset: Vec<f64>,
    pub z_offset: Vec<f64>,
    /// With respect to the depth probabilities, `(D, H, W)`.
    pub depth: Option<Tensor>,
}

impl OutputGrads {
    pub fn zeros(pred: &LanePrediction) -> Self {
        let n = pred.cell_count();
        Self {
            confidence: vec![0.0; n],
            embedding: vec![0.0; n * pred.embed_dim],
            x_offset: vec![0.0; n],
            z_offset: vec![0.0; n],
            depth: None,
        }
    }
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self, NetworkError> {
        config.validate()?;
        let mut b = Builder {
            store: ParamStore::new(),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
        };
        let c = config.channels;
        let n_stages = config.stage_count();
        let mut stages = Vec::with_capacity(n_stages);
        let mut in_c = INPUT_CHANNELS;
        for i in 0..n_stages {
            let out_c = (c >> (n_stages - 1 - i)).max(2);
            stages.push(b.conv(
                &format!("trunk.stage{i}"),
                ConvShape::square(in_c, out_c, 3, 2),
                RELU_GAIN,
                0.0,
            ));
            in_c = out_c;
        }
        let res_a = b.conv("trunk.res_a", ConvShape::square(c, c, 3, 1), RELU_GAIN, 0.0);
        let res_b = b.conv("trunk.res_b", ConvShape::square(c, c, 3, 1), 0.5, 0.0);
        let hidden = config.se_hidden();
        let branch = |b: &mut Builder, name: &str| Branch {
            conv: b.conv(&format!("{name}.conv"), ConvShape::square(c, c, 3, 1), RELU_GAIN, 0.0),
            se: b.se(&format!("{name}.se"), c, hidden),
        };
        let depth_branch = branch(&mut b, "depth_branch");
        let fv_branch = branch(&mut b, "fv_branch");
        let d = config.depth_bins();
        let depth_head = b.conv("depth_head", ConvShape::square(c + ELEVATION_KNOTS, d, 1, 1), 1.0, 0.0);
        let fusion = match config.fusion {
            FusionMode::Prime => FusionLayers::Prime {
                pfe_a: b.conv("fusion.pfe_a", pfe_conv_shape(c), RELU_GAIN, 0.0),
                pfe_b: b.conv("fusion.pfe_b", pfe_conv_shape(c), 0.3, 0.0),
                gate: config
                    .depth_attention
                    .then(|| b.conv("fusion.dat_gate", dat_gate_shape(c), 1.0, 0.0)),
            },
            FusionMode::Naive => FusionLayers::Naive {
                collapse: b.conv(
                    "fusion.collapse",
                    naive_collapse_shape(c, config.feature_height()),
                    1.0,
                    0.0,
                ),
            },
        };
        let hidden1 = b.conv("head.hidden1", ConvShape::square(c + 2, c, 3, 1), RELU_GAIN, 0.0);
        let hidden2 = b.conv("head.hidden2", ConvShape::square(c, c, 3, 1), RELU_GAIN, 0.0);
        let confidence = b.conv("head.confidence", ConvShape::square(c, 1, 3, 1), 0.5, -2.0);
        let embedding = b.conv("head.embedding", ConvShape::square(c, config.embed_dim, 3, 1), 1.0, 0.0);
        let x_offset = b.conv("head.x_offset", ConvShape::square(c, 1, 3, 1), 0.5, 0.0);
        let z_offset = b.conv("head.z_offset", ConvShape::square(c, 1, 3, 1), 0.5, 0.0);
        let layers = Layers {
            stages,
            res_a,
            res_b,
            depth_branch,
            fv_branch,
            depth_head,
            fusion,
            hidden1,
            hidden2,
            confidence,
            embedding,
            x_offset,
            z_offset,
        };
        let resampler = BevResampler::new(
            &config.camera,
            &config.bins,
            &config.grid,
            config.downsample,
            config.feature_width(),
        );
        Ok(Self {
            config,
            params: b.store,
            layers,
            resampler,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.scalar_count()
    }

    pub fn resampler(&self) -> &BevResampler {
        &self.resampler
    }

    /// Copies values from `other`, which must hold exactly this model's
    /// parameter names and shapes.
    pub fn load_params(&mut self, other: &ParamStore) -> Result<(), NetworkError> {
        if other.len() != self.params.len() {
            return Err(NetworkError::Parameter(
                format!("{} tensors given, {} expected", other.len(), self.params.len()),
                "tensor count mismatch",
            ));
        }
        for (_, src) in other.iter() {
            let id = self
                .params
                .find(&src.name)
                .ok_or_else(|| NetworkError::Parameter(src.name.clone(), "unknown parameter"))?;
            if self.params.tensor(id).shape != src.shape {
                return Err(NetworkError::Parameter(src.name.clone(), "shape mismatch"));
            }
            self.params.get_mut(id).copy_from_slice(&src.data);
        }
        Ok(())
    }

    fn check_input(&self, input: &NetInput) -> Result<(), NetworkError> {
        let (c, h, w) = input.image.shape();
        if c != 3 || h != self.config.image_height || w != self.config.image_width {
            return Err(NetworkError::ImageSize {
                got_h: h,
                got_w: w,
                want_h: self.config.image_height,
                want_w: self.config.image_width,
            });
        }
        if !input.intrinsics.iter().all(|v| v.is_finite()) {
            return Err(NetworkError::ShapeMismatch("intrinsics must be finite"));
        }
        Ok(())
    }

    fn conv(&self, layer: &ConvLayer, x: &Tensor) -> (Tensor, ConvCache) {
        ops::conv2d(x, self.params.get(layer.w), self.params.get(layer.b), &layer.shape)
    }

    fn conv_back(
        &self,
        layer: &ConvLayer,
        cache: &ConvCache,
        dout: &Tensor,
        g: &mut Grads,
        want_input: bool,
    ) -> Option<Tensor> {
        let [dw, db] = g
            .bufs
            .get_disjoint_mut([layer.w.0, layer.b.0])
            .expect("distinct params");
        ops::conv2d_backward(cache, self.params.get(layer.w), dout, &layer.shape, dw, db, want_input)
    }

    fn se_weights(&self, se: &SeLayer) -> SeWeights<'_> {
        SeWeights {
            fc1_w: self.params.get(se.fc1_w),
            fc1_b: self.params.get(se.fc1_b),
            fc2_w: self.params.get(se.fc2_w),
            fc2_b: self.params.get(se.fc2_b),
        }
    }

    fn pfe_weights(&self, a: &ConvLayer, b: &ConvLayer) -> PfeWeights<'_> {
        PfeWeights {
            a_w: self.params.get(a.w),
            a_b: self.params.get(a.b),
            b_w: self.params.get(b.w),
            b_b: self.params.get(b.b),
        }
    }

    fn branch(&self, br: &Branch, x: &Tensor, intr: &[f64; 4]) -> BranchCache {
        let (z, conv) = self.conv(&br.conv, x);
        let act = ops::relu(&z);
        let (out, se) = ops::se_gate(&act, intr, &self.se_weights(&br.se));
        BranchCache { conv, act, se, out }
    }

    fn trunk(&self, input: &NetInput) -> (Vec<(ConvCache, Tensor)>, ConvCache, Tensor, ConvCache, Tensor) {
        let mut stages = Vec::with_capacity(self.layers.stages.len());
        let mut x = with_ray_channels(&input.image, &input.intrinsics);
        for layer in &self.layers.stages {
            let (z, cache) = self.conv(layer, &x);
            x = ops::relu(&z);
            stages.push((cache, x.clone()));
        }
        let (za, res_a) = self.conv(&self.layers.res_a, &x);
        let res_a_act = ops::relu(&za);
        let (zb, res_b) = self.conv(&self.layers.res_b, &res_a_act);
        let mut s = x;
        s.add_assign(&zb);
        let trunk_out = ops::relu(&s);
        (stages, res_a, res_a_act, res_b, trunk_out)
    }

    /// Shared trunk and the two SE-gated branches.
    pub fn backbone(&self, input: &NetInput) -> Result<(FvFeature, DepthFeature), NetworkError> {
        self.check_input(input)?;
        let (_, _, _, _, t) = self.trunk(input);
        let fv = self.branch(&self.layers.fv_branch, &t, &input.intrinsics);
        let depth = self.branch(&self.layers.depth_branch, &t, &input.intrinsics);
        let (logits, _) = self.conv(
            &self.layers.depth_head,
            &with_elevation_code(&depth.out, &input.intrinsics),
        );
        Ok((FvFeature(fv.out), DepthFeature(logits)))
    }

    /// The model's own depth-attention gate for `fv`, or `None` when the gate
    /// is disabled or the model uses naive fusion.
    pub fn attention_gate(&self, fv: &FvFeature) -> Option<Tensor> {
        match &self.layers.fusion {
            FusionLayers::Prime { gate: Some(g), .. } => Some(dat_gate(fv, self.params.get(g.w), self.params.get(g.b))),
            _ => None,
        }
    }

    /// Lane head on a BEV feature: grid resampling, coordinate channels, two
    /// hidden convolutions and the four output convolutions.
    pub fn lane_head(&self, bev: &BevFeature) -> Result<LanePrediction, NetworkError> {
        let (c, d, w) = bev.0.shape();
        if c != self.config.channels || d != self.config.depth_bins() || w != self.config.feature_width() {
            return Err(NetworkError::ShapeMismatch("BEV feature vs model config"));
        }
        Ok(self.head_forward(&bev.0).0)
    }

    fn head_forward(&self, bev: &Tensor) -> (LanePrediction, (ConvCache, Tensor), (ConvCache, Tensor), [ConvCache; 4]) {
        let grid = &self.config.grid;
        let resampled = self.resampler.forward(bev);
        let (rows, cols) = (grid.rows, grid.cols);
        let mut input = Tensor::zeros(resampled.c + 2, rows, cols);
        input.data[..resampled.data.len()].copy_from_slice(&resampled.data);
        for r in 0..rows {
            for k in 0..cols {
                *input.at_mut(resampled.c, r, k) = 2.0 * (k as f64 + 0.5) / cols as f64 - 1.0;
                *input.at_mut(resampled.c + 1, r, k) = 2.0 * (r as f64 + 0.5) / rows as f64 - 1.0;
            }
        }
        let (z1, c1) = self.conv(&self.layers.hidden1, &input);
        let h1 = ops::relu(&z1);
        let (z2, c2) = self.conv(&self.layers.hidden2, &h1);
        let h2 = ops::relu(&z2);
        let (conf_z, cc) = self.conv(&self.layers.confidence, &h2);
        let (emb, ce) = self.conv(&self.layers.embedding, &h2);
        let (xz, cx) = self.conv(&self.layers.x_offset, &h2);
        let (zoff, cz) = self.conv(&self.layers.z_offset, &h2);
        let e = self.config.embed_dim;
        let n = rows * cols;
        let mut embedding = vec![0.0; n * e];
        for ch in 0..e {
            for i in 0..n {
                embedding[i * e + ch] = emb.data[ch * n + i];
            }
        }
        let pred = LanePrediction {
            rows,
            cols,
            embed_dim: e,
            confidence: ops::sigmoid(&conf_z).data,
            embedding,
            x_offset: ops::sigmoid(&xz).data,
            z_offset: zoff.data,
        };
        (pred, (c1, h1), (c2, h2), [cc, ce, cx, cz])
    }

    pub fn forward(&self, input: &NetInput) -> Result<Forward, NetworkError> {
        self.check_input(input)?;
        let (stages, res_a, res_a_act, res_b, trunk_out) = self.trunk(input);
        let depth_branch = self.branch(&self.layers.depth_branch, &trunk_out, &input.intrinsics);
        let fv_branch = self.branch(&self.layers.fv_branch, &trunk_out, &input.intrinsics);
        let depth_in = with_elevation_code(&depth_branch.out, &input.intrinsics);
        let (logits, depth_head) = self.conv(&self.layers.depth_head, &depth_in);
        let probs = ops::softmax_channels(&logits);
        let fv = &fv_branch.out;

        let (bev, fusion) = match &self.layers.fusion {
            FusionLayers::Prime { pfe_a, pfe_b, gate } => {
                let (prime_fv, pfe) = fusion::pfe_forward(fv, &self.pfe_weights(pfe_a, pfe_b));
                let gate = gate.as_ref().map(|g| {
                    let (z, cache) = self.conv(g, fv);
                    (cache, ops::sigmoid(&z))
                });
                let (prime_depth, argmax) = fusion::gated_column_max(&probs, gate.as_ref().map(|g| &g.1));
                let bev = fusion::fuse_tensors(&prime_depth, &prime_fv);
                (
                    bev,
                    FusionCache::Prime {
                        pfe,
                        prime_fv,
                        gate,
                        prime_depth,
                        argmax,
                    },
                )
            }
            FusionLayers::Naive { collapse } => {
                let (c, h, w) = fv.shape();
                let d_n = probs.c;
                let mut bev = Tensor::zeros(c, d_n, w);
                let mut caches = Vec::with_capacity(d_n);
                for d in 0..d_n {
                    let mut y = fv.clone();
                    for ch in 0..c {
                        for hh in 0..h {
                            for ww in 0..w {
                                *y.at_mut(ch, hh, ww) *= probs.at(d, hh, ww);
                            }
                        }
                    }
                    let (out, cache) = self.conv(collapse, &y);
                    for ch in 0..c {
                        for ww in 0..w {
                            *bev.at_mut(ch, d, ww) = out.at(ch, 0, ww);
                        }
                    }
                    caches.push(cache);
                }
                (bev, FusionCache::Naive { collapse: caches })
            }
        };

        let (prediction, hidden1, hidden2, heads) = self.head_forward(&bev);
        Ok(Forward {
            prediction,
            depth: DepthDistribution(probs),
            bev: BevFeature(bev),
            cache: ForwardCache {
                stages,
                res_a,
                res_a_act,
                res_b,
                trunk_out,
                depth_branch,
                fv_branch,
                depth_head,
                fusion,
                hidden1,
                hidden2,
                heads,
            },
        })
    }

    /// Lane prediction and depth distribution without keeping activations.
    pub fn predict(&self, input: &NetInput) -> Result<(LanePrediction, DepthDistribution), NetworkError> {
        let f = self.forward(input)?;
        Ok((f.prediction, f.depth))
    }

    fn branch_back(&self, br: &Branch, cache: &BranchCache, dout: &Tensor, g: &mut Grads) -> Tensor {
        let se = &br.se;
        let [fc1_w, fc1_b, fc2_w, fc2_b] = g
            .bufs
            .get_disjoint_mut([se.fc1_w.0, se.fc1_b.0, se.fc2_w.0, se.fc2_b.0])
            .expect("distinct params");
        let dact = ops::se_gate_backward(
            &cache.se,
            &self.se_weights(se),
            dout,
            SeGrads {
                fc1_w,
                fc1_b,
                fc2_w,
                fc2_b,
            },
        );
        let dz = ops::relu_backward(&cache.act, &dact);
        self.conv_back(&br.conv, &cache.conv, &dz, g, true).unwrap()
    }

    /// Accumulates parameter gradients of the outputs of `fwd` into `g`.
    pub fn backward(&self, fwd: &Forward, dout: &OutputGrads, g: &mut Grads) {
        let cache = &fwd.cache;
        let pred = &fwd.prediction;
        let (rows, cols, e) = (pred.rows, pred.cols, pred.embed_dim);
        let n = rows * cols;

        // lane head
        let dconf = Tensor::from_vec(
            1,
            rows,
            cols,
            dout.confidence
                .iter()
                .zip(&pred.confidence)
                .map(|(d, p)| d * p * (1.0 - p))
                .collect(),
        );
        let mut demb = Tensor::zeros(e, rows, cols);
        for ch in 0..e {
            for i in 0..n {
                demb.data[ch * n + i] = dout.embedding[i * e + ch];
            }
        }
        let dx = Tensor::from_vec(
            1,
            rows,
            cols,
            dout.x_offset
                .iter()
                .zip(&pred.x_offset)
                .map(|(d, p)| d * p * (1.0 - p))
                .collect(),
        );
        let dz = Tensor::from_vec(1, rows, cols, dout.z_offset.clone());
        let heads = [
            (&self.layers.confidence, dconf),
            (&self.layers.embedding, demb),
            (&self.layers.x_offset, dx),
            (&self.layers.z_offset, dz),
        ];
        let mut dh2 = Tensor::zeros(self.config.channels, rows, cols);
        for ((layer, d), c) in heads.iter().zip(&cache.heads) {
            dh2.add_assign(&self.conv_back(layer, c, d, g, true).unwrap());
        }
        let dz2 = ops::relu_backward(&cache.hidden2.1, &dh2);
        let dh1 = self
            .conv_back(&self.layers.hidden2, &cache.hidden2.0, &dz2, g, true)
            .unwrap();
        let dz1 = ops::relu_backward(&cache.hidden1.1, &dh1);
        let dinput = self
            .conv_back(&self.layers.hidden1, &cache.hidden1.0, &dz1, g, true)
            .unwrap();
        let c = self.config.channels;
        let dresampled = Tensor::from_vec(c, rows, cols, dinput.data[..c * n].to_vec());
        let dbev = self.resampler.backward(&dresampled);

        // fusion
        let fv = &cache.fv_branch.out;
        let probs = &fwd.depth.0;
        let mut dprobs = match &dout.depth {
            Some(d) => d.clone(),
            None => Tensor::zeros(probs.c, probs.h, probs.w),
        };
        let mut dfv = Tensor::zeros(fv.c, fv.h, fv.w);
        match (&self.layers.fusion, &cache.fusion) {
            (
                FusionLayers::Prime { pfe_a, pfe_b, gate },
                FusionCache::Prime {
                    pfe,
                    prime_fv,
                    gate: gate_cache,
                    prime_depth,
                    argmax,
                },
            ) => {
                let (dprime_depth, dprime_fv) = fusion::fuse_backward(prime_depth, prime_fv, &dbev);
                let [a_w, a_b, b_w, b_b] = g
                    .bufs
                    .get_disjoint_mut([pfe_a.w.0, pfe_a.b.0, pfe_b.w.0, pfe_b.b.0])
                    .expect("distinct params");
                let from_pfe = fusion::pfe_backward(
                    pfe,
                    &self.pfe_weights(pfe_a, pfe_b),
                    &dprime_fv,
                    PfeGrads { a_w, a_b, b_w, b_b },
                );
                dfv.add_assign(&from_pfe);
                let (d_n, w_n) = (probs.c, probs.w);
                let mut dgate = Tensor::zeros(1, probs.h, w_n);
                for d in 0..d_n {
                    for w in 0..w_n {
                        let h = argmax[d * w_n + w];
                        let gx = dprime_depth.at(0, d, w);
                        let gv = gate_cache.as_ref().map_or(1.0, |(_, gt)| gt.at(0, h, w));
                        *dprobs.at_mut(d, h, w) += gx * gv;
                        *dgate.at_mut(0, h, w) += gx * probs.at(d, h, w);
                    }
                }
                if let (Some(layer), Some((conv_cache, gt))) = (gate, gate_cache) {
                    let dgz = ops::sigmoid_backward(gt, &dgate);
                    dfv.add_assign(&self.conv_back(layer, conv_cache, &dgz, g, true).unwrap());
                }
            }
            (FusionLayers::Naive { collapse }, FusionCache::Naive { collapse: caches }) => {
                let (c_n, h_n, w_n) = fv.shape();
                for (d, conv_cache) in caches.iter().enumerate() {
                    let mut dslice = Tensor::zeros(c_n, 1, w_n);
                    for ch in 0..c_n {
                        for w in 0..w_n {
                            *dslice.at_mut(ch, 0, w) = dbev.at(ch, d, w);
                        }
                    }
                    let dy = self.conv_back(collapse, conv_cache, &dslice, g, true).unwrap();
                    for ch in 0..c_n {
                        for h in 0..h_n {
                            for w in 0..w_n {
                                let gy = dy.at(ch, h, w);
                                *dprobs.at_mut(d, h, w) += gy * fv.at(ch, h, w);
                                *dfv.at_mut(ch, h, w) += gy * probs.at(d, h, w);
                            }
                        }
                    }
                }
            }
            _ => unreachable!("fusion cache matches fusion layers"),
        }

        // depth head and branches
        let dlogits = ops::softmax_channels_backward(probs, &dprobs);
        let ddepth = self
            .conv_back(&self.layers.depth_head, &cache.depth_head, &dlogits, g, true)
            .unwrap();
        let c = self.config.channels;
        let n_px = ddepth.h * ddepth.w;
        let ddepth = Tensor::from_vec(c, ddepth.h, ddepth.w, ddepth.data[..c * n_px].to_vec());
        let mut dtrunk = self.branch_back(&self.layers.depth_branch, &cache.depth_branch, &ddepth, g);
        dtrunk.add_assign(&self.branch_back(&self.layers.fv_branch, &cache.fv_branch, &dfv, g));

        // trunk
        let ds = ops::relu_backward(&cache.trunk_out, &dtrunk);
        let dra = self.conv_back(&self.layers.res_b, &cache.res_b, &ds, g, true).unwrap();
        let dza = ops::relu_backward(&cache.res_a_act, &dra);
        let mut dx = self.conv_back(&self.layers.res_a, &cache.res_a, &dza, g, true).unwrap();
        dx.add_assign(&ds);
        for (i, (layer, (conv_cache, act))) in self.layers.stages.iter().zip(&cache.stages).enumerate().rev() {
            let dzs = ops::relu_backward(act, &dx);
            match self.conv_back(layer, conv_cache, &dzs, g, i > 0) {
                Some(next) => dx = next,
                None => break,
            }
        }
    }
}
