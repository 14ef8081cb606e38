//! Dataset and checkpoint files, training and evaluation runs, ablations,
//! lane dumps and plots for the `depthlane-core` model. The `depthlane`
//! binary wraps these behind a CLI.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod dump;
pub mod error;
pub mod pipeline;
pub mod plot;
pub mod report;

pub use config::{DepthMode, TrainConfig};
pub use error::{Error, Result};
