//! On-disk datasets.
//!
//! A split is a directory holding `manifest.txt` and one `sample_NNNNN.bin`
//! per sample. The manifest is line-oriented text:
//!
//! ```text
//! depthlane-dataset 1
//! count 2
//! image 128 256
//! camera 160.0 160.0 128.0 64.0 1.5 0.04
//! bins 4.0 104.0 24 log
//! grid -12.8 12.8 4.0 68.0 32 32
//! seeds 0 1
//! sample_00000.bin
//! sample_00001.bin
//! ```
//!
//! `camera` is `fx fy cx cy cam_height pitch`, `bins` is `d_min d_max count
//! mode` and `grid` is `x_min x_max y_min y_max rows cols`. Floats are
//! written in shortest round-trip form. A sample record is little-endian:
//!
//! | field | type |
//! |---|---|
//! | magic `DLSAMPLE` | 8 bytes |
//! | version | u32 |
//! | height, width | u32, u32 |
//! | fx, fy, cx, cy, cam_height, pitch | 6 x f64 |
//! | image, row-major `height x width x 3` | f32 each |
//! | depth bin per pixel, `0xFFFF` = ignored | u16 each |
//! | lane count | u32 |
//! | per lane: point count, then `x, y, z` per point | u32, 3 x f64 each |

use std::fs;
use std::path::{Path, PathBuf};

use depthlane_core::scene::{self, DepthTruth, Image};
use depthlane_core::{BevGridSpec, BinMode, CameraModel, DepthBinSpec, Point3, Sample, SceneError, SceneParams};

use crate::error::{Error, Result};

pub const MANIFEST: &str = "manifest.txt";
const MANIFEST_HEADER: &str = "depthlane-dataset";
pub const FORMAT_VERSION: u32 = 1;
const SAMPLE_MAGIC: &[u8; 8] = b"DLSAMPLE";
const IGNORED_BIN: u16 = u16::MAX;

/// Split-wide geometry shared by every sample.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub height: usize,
    pub width: usize,
    pub camera: CameraModel,
    pub bins: DepthBinSpec,
    pub grid: BevGridSpec,
}

impl DatasetSpec {
    pub fn of(params: &SceneParams) -> Self {
        Self {
            height: params.height,
            width: params.width,
            camera: params.camera,
            bins: params.bins,
            grid: params.grid,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: DatasetSpec,
    /// Scene seed of each sample.
    pub seeds: Vec<u64>,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Generates `count` samples from `base` with per-sample variation, seeds
/// counting up from `first_seed`. Seeds whose scene has no visible lane are
/// skipped.
pub fn generate(base: &SceneParams, first_seed: u64, count: usize) -> Result<Dataset> {
    base.validate()?;
    let mut seeds = Vec::with_capacity(count);
    let mut samples = Vec::with_capacity(count);
    let mut seed = first_seed;
    while samples.len() < count {
        match scene::generate(&base.varied(seed)) {
            Ok(s) => {
                seeds.push(seed);
                samples.push(s);
            }
            Err(SceneError::DegenerateScene) => {}
            Err(e) => return Err(e.into()),
        }
        seed += 1;
        if seed - first_seed > 100 * count as u64 + 100 {
            return Err(Error::Config("scene parameters produce no visible lanes".into()));
        }
    }
    Ok(Dataset {
        spec: DatasetSpec::of(base),
        seeds,
        samples,
    })
}

fn sample_file(i: usize) -> String {
    format!("sample_{i:05}.bin")
}

pub fn write_dataset(data: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let s = &data.spec;
    let mut m = String::new();
    m.push_str(&format!("{MANIFEST_HEADER} {FORMAT_VERSION}\n"));
    m.push_str(&format!("count {}\n", data.samples.len()));
    m.push_str(&format!("image {} {}\n", s.height, s.width));
    let c = &s.camera;
    m.push_str(&format!(
        "camera {:?} {:?} {:?} {:?} {:?} {:?}\n",
        c.fx, c.fy, c.cx, c.cy, c.cam_height, c.pitch
    ));
    let mode = match s.bins.mode {
        BinMode::Uniform => "uniform",
        BinMode::LogSpaced => "log",
    };
    m.push_str(&format!(
        "bins {:?} {:?} {} {mode}\n",
        s.bins.d_min, s.bins.d_max, s.bins.count
    ));
    let g = &s.grid;
    m.push_str(&format!(
        "grid {:?} {:?} {:?} {:?} {} {}\n",
        g.x_min, g.x_max, g.y_min, g.y_max, g.rows, g.cols
    ));
    m.push_str("seeds");
    for seed in &data.seeds {
        m.push_str(&format!(" {seed}"));
    }
    m.push('\n');
    for (i, sample) in data.samples.iter().enumerate() {
        let name = sample_file(i);
        let path = dir.join(&name);
        fs::write(&path, encode_sample(sample)).map_err(|e| Error::io(&path, e))?;
        m.push_str(&name);
        m.push('\n');
    }
    let path = dir.join(MANIFEST);
    fs::write(&path, m).map_err(|e| Error::io(&path, e))
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let bad = |reason: &str| Error::format(&path, reason);
    let mut lines = text.lines();

    let header: Vec<&str> = lines.next().unwrap_or("").split_whitespace().collect();
    if header.first() != Some(&MANIFEST_HEADER) {
        return Err(bad("not a dataset manifest"));
    }
    let version: u32 = header
        .get(1)
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| bad("missing version"))?;
    if version != FORMAT_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let mut field = |key: &str| -> Result<Vec<String>> {
        let line = lines.next().ok_or_else(|| bad(&format!("missing `{key}` line")))?;
        let mut parts = line.split_whitespace();
        if parts.next() != Some(key) {
            return Err(bad(&format!("expected `{key}` line, got `{line}`")));
        }
        Ok(parts.map(str::to_string).collect())
    };
    let count: usize = one(&field("count")?).ok_or_else(|| bad("bad count"))?;
    let image = parse_all::<usize>(&field("image")?, 2).ok_or_else(|| bad("bad image size"))?;
    let cam = parse_all::<f64>(&field("camera")?, 6).ok_or_else(|| bad("bad camera line"))?;
    let camera = CameraModel::new(cam[0], cam[1], cam[2], cam[3], cam[4], cam[5]).map_err(|e| bad(&e.to_string()))?;
    let b = field("bins")?;
    let bins = match b.as_slice() {
        [lo, hi, n, mode] => {
            let mode = match mode.as_str() {
                "uniform" => BinMode::Uniform,
                "log" => BinMode::LogSpaced,
                _ => return Err(bad("unknown bin mode")),
            };
            let (lo, hi, n) = (lo.parse().ok(), hi.parse().ok(), n.parse().ok());
            match (lo, hi, n) {
                (Some(lo), Some(hi), Some(n)) => DepthBinSpec::new(lo, hi, n, mode).map_err(|e| bad(&e.to_string()))?,
                _ => return Err(bad("bad bins line")),
            }
        }
        _ => return Err(bad("bad bins line")),
    };
    let g = field("grid")?;
    let ext = parse_all::<f64>(&g[..g.len().min(4)], 4).ok_or_else(|| bad("bad grid line"))?;
    let dims = parse_all::<usize>(g.get(4..).unwrap_or(&[]), 2).ok_or_else(|| bad("bad grid line"))?;
    let grid = BevGridSpec::new(ext[0], ext[1], ext[2], ext[3], dims[1], dims[0]).map_err(|e| bad(&e.to_string()))?;
    let seeds = parse_all::<u64>(&field("seeds")?, count).ok_or_else(|| bad("bad seeds line"))?;

    let spec = DatasetSpec {
        height: image[0],
        width: image[1],
        camera,
        bins,
        grid,
    };
    let mut samples = Vec::with_capacity(count);
    for _ in 0..count {
        let name = lines.next().ok_or_else(|| bad("fewer sample files than count"))?.trim();
        if name.is_empty() || name.contains('/') || name.contains('\\') {
            return Err(bad("bad sample file name"));
        }
        let p = dir.join(name);
        let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
        let sample = decode_sample(&bytes).map_err(|reason| Error::format(&p, reason))?;
        if sample.image.height != spec.height || sample.image.width != spec.width {
            return Err(Error::format(&p, "image size differs from the manifest"));
        }
        samples.push(sample);
    }
    if lines.any(|l| !l.trim().is_empty()) {
        return Err(bad("trailing lines after the sample list"));
    }
    Ok(Dataset { spec, seeds, samples })
}

fn one<T: std::str::FromStr>(v: &[String]) -> Option<T> {
    match v {
        [x] => x.parse().ok(),
        _ => None,
    }
}

fn parse_all<T: std::str::FromStr>(v: &[String], n: usize) -> Option<Vec<T>> {
    if v.len() != n {
        return None;
    }
    v.iter().map(|x| x.parse().ok()).collect()
}

pub fn encode_sample(s: &Sample) -> Vec<u8> {
    let (h, w) = (s.image.height, s.image.width);
    let mut out = Vec::with_capacity(64 + h * w * 14);
    out.extend_from_slice(SAMPLE_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(h as u32).to_le_bytes());
    out.extend_from_slice(&(w as u32).to_le_bytes());
    let c = &s.camera;
    for v in [c.fx, c.fy, c.cx, c.cy, c.cam_height, c.pitch] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for v in &s.image.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for b in &s.depth.bins {
        out.extend_from_slice(&b.unwrap_or(IGNORED_BIN).to_le_bytes());
    }
    out.extend_from_slice(&(s.lanes.len() as u32).to_le_bytes());
    for lane in &s.lanes {
        out.extend_from_slice(&(lane.len() as u32).to_le_bytes());
        for p in lane {
            for v in [p.x, p.y, p.z] {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], String> {
        if self.buf.len() < n {
            return Err("truncated record".into());
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
    }

    fn u16(&mut self) -> Result<u16, String> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32, String> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, String> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode_sample(bytes: &[u8]) -> Result<Sample, String> {
    let mut r = Reader { buf: bytes };
    if r.take(SAMPLE_MAGIC.len()).ok() != Some(SAMPLE_MAGIC.as_slice()) {
        return Err("wrong magic".into());
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(format!("unsupported record version {version}"));
    }
    let h = r.u32()? as usize;
    let w = r.u32()? as usize;
    let px = h
        .checked_mul(w)
        .filter(|&n| n.saturating_mul(14) <= bytes.len())
        .ok_or("image size too large")?;
    let camera = CameraModel {
        fx: r.f64()?,
        fy: r.f64()?,
        cx: r.f64()?,
        cy: r.f64()?,
        cam_height: r.f64()?,
        pitch: r.f64()?,
    };
    let data = (0..px * 3).map(|_| r.f32()).collect::<Result<Vec<_>, _>>()?;
    let bins = (0..px)
        .map(|_| r.u16().map(|b| (b != IGNORED_BIN).then_some(b)))
        .collect::<Result<Vec<_>, _>>()?;
    let n_lanes = r.u32()? as usize;
    let mut lanes = Vec::with_capacity(n_lanes.min(64));
    for _ in 0..n_lanes {
        let n = r.u32()? as usize;
        if n.saturating_mul(24) > r.buf.len() {
            return Err("truncated record".into());
        }
        let mut lane = Vec::with_capacity(n);
        for _ in 0..n {
            lane.push(Point3::new(r.f64()?, r.f64()?, r.f64()?));
        }
        lanes.push(lane);
    }
    if !r.buf.is_empty() {
        return Err("trailing bytes after record".into());
    }
    if lanes.iter().any(|l| l.len() < 2) {
        return Err("lane with fewer than two points".into());
    }
    Ok(Sample {
        image: Image {
            height: h,
            width: w,
            data,
        },
        depth: DepthTruth {
            height: h,
            width: w,
            bins,
        },
        lanes,
        camera,
    })
}

/// `dir/train` and `dir/val`.
pub fn split_dirs(dir: &Path) -> (PathBuf, PathBuf) {
    (dir.join("train"), dir.join("val"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn record_round_trip_is_exact() {
        let s = scene::generate(&SceneParams::default().downscaled(4).varied(3)).unwrap();
        assert_eq!(decode_sample(&encode_sample(&s)).unwrap(), s);
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let s = scene::generate(&SceneParams::default().downscaled(4)).unwrap();
        let mut bytes = encode_sample(&s);
        bytes[0] = b'X';
        assert_eq!(decode_sample(&bytes).unwrap_err(), "wrong magic");
    }

    #[test]
    fn truncation_is_rejected() {
        let s = scene::generate(&SceneParams::default().downscaled(4)).unwrap();
        let bytes = encode_sample(&s);
        assert!(decode_sample(&bytes[..bytes.len() - 1]).is_err());
        let mut long = bytes.clone();
        long.push(0);
        assert!(decode_sample(&long).is_err());
    }
}
