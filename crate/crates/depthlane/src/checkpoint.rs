//! Model checkpoints.
//!
//! Little-endian binary: magic `DLCKPT\0\0`, u32 format version, a u32
//! length plus JSON text describing the model configuration, then a u32
//! tensor count and per tensor its u32-length-prefixed UTF-8 name, u32 rank,
//! u32 dims and f64 values.

use std::fs;
use std::path::Path;

use depthlane_core::network::{FusionMode, NetworkError, ParamStore};
use depthlane_core::{BevGridSpec, BinMode, CameraModel, DepthBinSpec, Model, ModelConfig};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"DLCKPT\0\0";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Serializable mirror of [`ModelConfig`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub image_height: usize,
    pub image_width: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub downsample: usize,
    pub bins_min: f64,
    pub bins_max: f64,
    pub bins_count: usize,
    pub bins_log: bool,
    pub grid: [f64; 4],
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub camera: [f64; 6],
    pub naive_fusion: bool,
    pub depth_attention: bool,
    pub seed: u64,
}

impl From<&ModelConfig> for ModelSpec {
    fn from(c: &ModelConfig) -> Self {
        let cam = &c.camera;
        Self {
            image_height: c.image_height,
            image_width: c.image_width,
            channels: c.channels,
            embed_dim: c.embed_dim,
            downsample: c.downsample,
            bins_min: c.bins.d_min,
            bins_max: c.bins.d_max,
            bins_count: c.bins.count,
            bins_log: c.bins.mode == BinMode::LogSpaced,
            grid: [c.grid.x_min, c.grid.x_max, c.grid.y_min, c.grid.y_max],
            grid_rows: c.grid.rows,
            grid_cols: c.grid.cols,
            camera: [cam.fx, cam.fy, cam.cx, cam.cy, cam.cam_height, cam.pitch],
            naive_fusion: c.fusion == FusionMode::Naive,
            depth_attention: c.depth_attention,
            seed: c.seed,
        }
    }
}

impl ModelSpec {
    pub fn to_config(&self) -> ModelConfig {
        let [fx, fy, cx, cy, cam_height, pitch] = self.camera;
        let [x_min, x_max, y_min, y_max] = self.grid;
        ModelConfig {
            image_height: self.image_height,
            image_width: self.image_width,
            channels: self.channels,
            embed_dim: self.embed_dim,
            downsample: self.downsample,
            bins: DepthBinSpec {
                d_min: self.bins_min,
                d_max: self.bins_max,
                count: self.bins_count,
                mode: if self.bins_log {
                    BinMode::LogSpaced
                } else {
                    BinMode::Uniform
                },
            },
            grid: BevGridSpec {
                x_min,
                x_max,
                y_min,
                y_max,
                cols: self.grid_cols,
                rows: self.grid_rows,
            },
            camera: CameraModel {
                fx,
                fy,
                cx,
                cy,
                cam_height,
                pitch,
            },
            fusion: if self.naive_fusion {
                FusionMode::Naive
            } else {
                FusionMode::Prime
            },
            depth_attention: self.depth_attention,
            seed: self.seed,
        }
    }
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let json = serde_json::to_vec(&ModelSpec::from(model.config())).expect("spec serializes");
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    let params = model.params();
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (_, t) in params.iter() {
        out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
        out.extend_from_slice(t.name.as_bytes());
        out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for &d in &t.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// A checkpoint as stored: its model configuration and named tensors.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub spec: ModelSpec,
    pub params: ParamStore,
}

pub fn read(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse(&bytes).map_err(|reason| Error::format(path, reason))
}

fn parse(bytes: &[u8]) -> Result<Checkpoint, String> {
    let mut buf = bytes;
    let mut take = |n: usize| -> Result<&[u8], String> {
        if buf.len() < n {
            return Err("truncated checkpoint".into());
        }
        let (head, rest) = buf.split_at(n);
        buf = rest;
        Ok(head)
    };
    if take(MAGIC.len())? != MAGIC {
        return Err("wrong magic".into());
    }
    let u32_of = |b: &[u8]| u32::from_le_bytes(b.try_into().unwrap()) as usize;
    let version = u32_of(take(4)?);
    if version != CHECKPOINT_VERSION as usize {
        return Err(format!("unsupported checkpoint version {version}"));
    }
    let json_len = u32_of(take(4)?);
    let spec: ModelSpec = serde_json::from_slice(take(json_len)?).map_err(|e| e.to_string())?;
    let count = u32_of(take(4)?);
    let mut params = ParamStore::new();
    for _ in 0..count {
        let name_len = u32_of(take(4)?);
        let name = std::str::from_utf8(take(name_len)?)
            .map_err(|e| e.to_string())?
            .to_string();
        let rank = u32_of(take(4)?);
        let shape = (0..rank).map(|_| take(4).map(u32_of)).collect::<Result<Vec<_>, _>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or("tensor too large")?;
        let raw = take(n.checked_mul(8).ok_or("tensor too large")?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        params.add(name, &shape, data);
    }
    if !buf.is_empty() {
        return Err("trailing bytes after checkpoint".into());
    }
    Ok(Checkpoint { spec, params })
}

fn mismatch(what: &str, expected: impl ToString, found: impl ToString) -> Error {
    Error::DimensionMismatch {
        what: what.into(),
        expected: expected.to_string(),
        found: found.to_string(),
    }
}

/// Builds a model for `expected` and fills it from the checkpoint at `path`.
/// Any disagreement in dimensions or tensor layout is a `DimensionMismatch`.
pub fn load(path: &Path, expected: &ModelConfig) -> Result<Model> {
    let ck = read(path)?;
    let found = ck.spec.to_config();
    let checks = [
        ("image height", expected.image_height, found.image_height),
        ("image width", expected.image_width, found.image_width),
        ("channels C", expected.channels, found.channels),
        ("embedding width E", expected.embed_dim, found.embed_dim),
        ("downsample", expected.downsample, found.downsample),
        ("depth bins D", expected.bins.count, found.bins.count),
        ("grid rows", expected.grid.rows, found.grid.rows),
        ("grid columns", expected.grid.cols, found.grid.cols),
    ];
    for (what, e, f) in checks {
        if e != f {
            return Err(mismatch(what, e, f));
        }
    }
    if expected.fusion != found.fusion {
        return Err(mismatch(
            "fusion",
            format!("{:?}", expected.fusion),
            format!("{:?}", found.fusion),
        ));
    }
    let mut model = Model::new(expected.clone())?;
    model.load_params(&ck.params).map_err(|e| match e {
        NetworkError::Parameter(name, why) => mismatch(&format!("tensor {name}"), "the model layout", why),
        other => Error::Network(other),
    })?;
    Ok(model)
}

/// Rebuilds the model exactly as it was saved.
pub fn load_as_saved(path: &Path) -> Result<Model> {
    let ck = read(path)?;
    let mut model = Model::new(ck.spec.to_config())?;
    model.load_params(&ck.params)?;
    Ok(model)
}
