//! Depth-aware bird's-eye-view lane detection.
//!
//! The crate is `no_std` (it needs `alloc`) and contains everything that is
//! pure computation:
//!
//! - [`geometry`]: pinhole camera with height/pitch extrinsics, depth bins,
//!   BEV grid indexing.
//! - [`scene`]: deterministic synthetic road scenes with analytic depth and
//!   3D lane ground truth.
//! - [`network`]: the shared depth/feature backbone with intrinsics-conditioned
//!   SE gating, height reduction (PFE and depth attention), broadcast fusion
//!   and the BEV lane head, all with hand-written backward passes.
//! - [`losses`]: depth, confidence, instance-embedding and offset objectives.
//! - [`postprocess`]: embedding clustering and lane reconstruction.
//! - [`metrics`]: lane matching, F1 and near/far X/Z errors.
//! - [`optim`]: Adam with per-parameter freezing.
//!
//! File formats, checkpoints, the training loop and the CLI live in the
//! `depthlane` crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod geometry;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod objective;
pub mod optim;
pub mod postprocess;
pub mod scene;

mod math;

pub use geometry::{BevCell, BevGridSpec, BinMode, CameraModel, DepthBinSpec, GeometryError, Point3};
pub use losses::{LaneTarget, LossBreakdown, LossError, LossWeights, OffsetLoss};
pub use metrics::{EvalProtocol, MetricsReport};
pub use network::{LanePrediction, Model, ModelConfig, NetworkError};
pub use postprocess::{ClusterParams, LaneInstance};
pub use scene::{Sample, SceneError, SceneParams};
