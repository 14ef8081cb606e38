//! Procedural road scenes with analytic ground truth.
//!
//! The road is the surface `z = slope * y`. Lane markings are quadratic arcs
//! `x(y) = offset + curvature * y^2 / 2` lying on that surface. Depth ground
//! truth is the exact ray/surface intersection depth of each pixel center,
//! binned; rays that never meet the surface are sky and flagged as ignored.
//! Lane ground truth is sampled at the BEV grid's row centers, so every lane
//! point sits in a distinct grid row.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::geometry::{BevGridSpec, CameraModel, DepthBinSpec, GeometryError, Point3};
use crate::math;

/// Lanes with fewer visible points than this are not part of the ground
/// truth; it matches the default minimum cluster size of post-processing.
pub const MIN_LANE_POINTS: usize = 3;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SceneError {
    #[error("invalid scene parameters: {0}")]
    InvalidParams(&'static str),
    #[error("no lane is visible in the image")]
    DegenerateScene,
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// RGB image, row-major `height x width x 3`, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for _ in 0..height * width {
            data.extend_from_slice(&rgb);
        }
        Self { height, width, data }
    }

    pub fn pixel(&self, row: usize, col: usize) -> [f32; 3] {
        let i = (row * self.width + col) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    fn set(&mut self, row: usize, col: usize, rgb: [f32; 3]) {
        let i = (row * self.width + col) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }
}

/// Per-pixel depth-bin index; `None` marks pixels without scene geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthTruth {
    pub height: usize,
    pub width: usize,
    pub bins: Vec<Option<u16>>,
}

impl DepthTruth {
    pub fn get(&self, row: usize, col: usize) -> Option<u16> {
        self.bins[row * self.width + col]
    }

    /// Reduces to a `factor`-times coarser grid: each block takes its most
    /// frequent bin (smallest bin on ties) and is ignored when fewer than half
    /// of its pixels carry depth.
    pub fn pooled(&self, factor: usize, bin_count: usize) -> DepthTruth {
        let h = self.height / factor;
        let w = self.width / factor;
        let mut bins = Vec::with_capacity(h * w);
        let mut hist = vec![0usize; bin_count];
        for by in 0..h {
            for bx in 0..w {
                hist.iter_mut().for_each(|c| *c = 0);
                let mut valid = 0;
                for y in by * factor..(by + 1) * factor {
                    for x in bx * factor..(bx + 1) * factor {
                        if let Some(b) = self.get(y, x) {
                            hist[(b as usize).min(bin_count - 1)] += 1;
                            valid += 1;
                        }
                    }
                }
                if 2 * valid < factor * factor {
                    bins.push(None);
                    continue;
                }
                let mut best = 0;
                for (i, &c) in hist.iter().enumerate() {
                    if c > hist[best] {
                        best = i;
                    }
                }
                bins.push(Some(best as u16));
            }
        }
        DepthTruth {
            height: h,
            width: w,
            bins,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Image,
    pub depth: DepthTruth,
    /// One polyline per lane, ordered by increasing `y`.
    pub lanes: Vec<Vec<Point3>>,
    pub camera: CameraModel,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneParams {
    pub seed: u64,
    pub n_lanes: usize,
    /// Distance between neighbouring lane markings, meters.
    pub lane_spacing: f64,
    /// Lateral offset of the marking pattern's center, meters.
    pub lateral_shift: f64,
    /// Signed curvature, 1/m.
    pub curvature: f64,
    /// Road height gradient, `z = slope * y`.
    pub slope: f64,
    pub height: usize,
    pub width: usize,
    pub camera: CameraModel,
    pub bins: DepthBinSpec,
    /// Lane ground truth is sampled at this grid's row centers.
    pub grid: BevGridSpec,
    pub stripe_half_width: f64,
    /// Amplitude of the uniform per-pixel texture noise.
    pub noise: f64,
}

impl Default for SceneParams {
    fn default() -> Self {
        Self {
            seed: 0,
            n_lanes: 4,
            lane_spacing: 3.5,
            lateral_shift: 0.0,
            curvature: 0.0,
            slope: 0.0,
            height: 128,
            width: 256,
            camera: CameraModel {
                fx: 160.0,
                fy: 160.0,
                cx: 128.0,
                cy: 64.0,
                cam_height: 1.5,
                pitch: 0.04,
            },
            bins: DepthBinSpec {
                d_min: 4.0,
                d_max: 104.0,
                count: 24,
                mode: crate::geometry::BinMode::LogSpaced,
            },
            grid: BevGridSpec {
                x_min: -12.8,
                x_max: 12.8,
                y_min: 4.0,
                y_max: 68.0,
                cols: 32,
                rows: 32,
            },
            stripe_half_width: 0.12,
            noise: 0.03,
        }
    }
}

impl SceneParams {
    pub fn validate(&self) -> Result<(), SceneError> {
        self.camera.validate()?;
        self.bins.validate()?;
        self.grid.validate()?;
        if !(2..=6).contains(&self.n_lanes) {
            return Err(SceneError::InvalidParams("n_lanes must be in 2..=6"));
        }
        if !(self.lane_spacing > 0.0) {
            return Err(SceneError::InvalidParams("lane_spacing must be positive"));
        }
        if !(self.curvature.abs() <= 0.02) {
            return Err(SceneError::InvalidParams("|curvature| must be at most 0.02"));
        }
        if !(self.slope.abs() <= 0.15) {
            return Err(SceneError::InvalidParams("|slope| must be at most 0.15"));
        }
        if self.height == 0 || self.width == 0 {
            return Err(SceneError::InvalidParams("image must be non-empty"));
        }
        if !(self.stripe_half_width > 0.0) || !(self.noise >= 0.0) || !self.lateral_shift.is_finite() {
            return Err(SceneError::InvalidParams("bad stripe width, noise or shift"));
        }
        Ok(())
    }

    /// Draws lane count, spacing, shift, curvature and slope from `seed`,
    /// keeping image size, camera, bins and grid from `self`.
    pub fn varied(&self, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5CE4_E5EE_D000_0001);
        Self {
            seed,
            n_lanes: rng.gen_range(2..=5),
            lane_spacing: rng.gen_range(3.2..3.8),
            lateral_shift: rng.gen_range(-1.0..1.0),
            curvature: rng.gen_range(-0.0015..0.0015),
            slope: rng.gen_range(-0.04..0.04),
            ..self.clone()
        }
    }

    /// The same scene rendered at `1/factor` of the image size.
    pub fn downscaled(&self, factor: usize) -> Self {
        Self {
            height: self.height / factor,
            width: self.width / factor,
            camera: self.camera.scaled(1.0 / factor as f64),
            ..self.clone()
        }
    }

    fn lane_offset(&self, k: usize) -> f64 {
        self.lateral_shift + (k as f64 - (self.n_lanes as f64 - 1.0) / 2.0) * self.lane_spacing
    }

    /// Point of lane `k` at longitudinal position `y`.
    pub fn lane_point(&self, k: usize, y: f64) -> Point3 {
        Point3::new(
            self.lane_offset(k) + 0.5 * self.curvature * y * y,
            y,
            self.surface_height(y),
        )
    }

    pub fn surface_height(&self, y: f64) -> f64 {
        self.slope * y
    }

    /// Optical-axis depth at which the ray through `(u, v)` meets the road
    /// surface, if it does.
    pub fn surface_depth(&self, u: f64, v: f64) -> Option<f64> {
        let [_, dy, dz] = self.camera.ray_direction(u, v);
        let denom = self.slope * dy - dz;
        if denom <= 0.0 {
            return None;
        }
        let t = self.camera.cam_height / denom;
        (t > 0.0 && t.is_finite()).then_some(t)
    }

    fn in_image(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && v >= 0.0 && u < self.width as f64 && v < self.height as f64
    }
}

const SKY_TOP: [f32; 3] = [0.45, 0.62, 0.85];
const SKY_BOTTOM: [f32; 3] = [0.75, 0.84, 0.93];
const ROAD: [f32; 3] = [0.33, 0.33, 0.35];
const VERGE: [f32; 3] = [0.28, 0.42, 0.22];
const STRIPE: [f32; 3] = [0.96, 0.96, 0.92];

pub fn generate(params: &SceneParams) -> Result<Sample, SceneError> {
    params.validate()?;
    let lanes = lane_ground_truth(params);
    if lanes.is_empty() {
        return Err(SceneError::DegenerateScene);
    }

    let (h, w) = (params.height, params.width);
    let cam = &params.camera;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut image = Image::filled(h, w, ROAD);
    let mut bins = Vec::with_capacity(h * w);

    let road_left = params.lane_offset(0) - 1.5;
    let road_right = params.lane_offset(params.n_lanes - 1) + 1.5;
    for row in 0..h {
        for col in 0..w {
            let (u, v) = (col as f64 + 0.5, row as f64 + 0.5);
            let jitter = if params.noise > 0.0 {
                rng.gen_range(-params.noise..params.noise) as f32
            } else {
                0.0
            };
            match params.surface_depth(u, v) {
                Some(depth) => {
                    bins.push(Some(params.bins.depth_to_bin(depth) as u16));
                    let [dx, dy, _] = cam.ray_direction(u, v);
                    let (gx, gy) = (depth * dx, depth * dy);
                    let bend = 0.5 * params.curvature * gy * gy;
                    let base = if gx - bend >= road_left && gx - bend <= road_right {
                        ROAD
                    } else {
                        VERGE
                    };
                    image.set(row, col, shade(base, jitter));
                }
                None => {
                    bins.push(None);
                    let t = (row as f32 + 0.5) / h as f32;
                    let sky = [0, 1, 2].map(|i| SKY_TOP[i] + (SKY_BOTTOM[i] - SKY_TOP[i]) * t);
                    image.set(row, col, shade(sky, jitter * 0.5));
                }
            }
        }
    }

    paint_stripes(params, &lanes, &mut image);

    Ok(Sample {
        image,
        depth: DepthTruth {
            height: h,
            width: w,
            bins,
        },
        lanes,
        camera: *cam,
    })
}

fn shade(rgb: [f32; 3], jitter: f32) -> [f32; 3] {
    rgb.map(|c| (c + jitter).clamp(0.0, 1.0))
}

fn lane_ground_truth(params: &SceneParams) -> Vec<Vec<Point3>> {
    let grid = &params.grid;
    let mut lanes = Vec::new();
    for k in 0..params.n_lanes {
        let mut pts = Vec::new();
        for row in 0..grid.rows {
            let p = params.lane_point(k, grid.row_center(row));
            if grid.cell_of(p).is_none() {
                continue;
            }
            match params.camera.project(p) {
                Ok((u, v)) if params.in_image(u, v) => pts.push(p),
                _ => {}
            }
        }
        if pts.len() >= MIN_LANE_POINTS {
            lanes.push(pts);
        }
    }
    lanes
}

/// Far-to-near painter's rasterization of each marking: every centerline
/// sample paints the pixel span between the projections of its left and
/// right stripe edges.
fn paint_stripes(params: &SceneParams, lanes: &[Vec<Point3>], image: &mut Image) {
    const STEP: f64 = 0.02;
    let cam = &params.camera;
    let near = 0.5;
    let far = params.grid.y_max + 8.0;
    let n_steps = math::floor((far - near) / STEP) as usize;
    for k in 0..params.n_lanes {
        for i in 0..=n_steps {
            let y = far - i as f64 * STEP;
            let c = params.lane_point(k, y);
            let Ok((uc, vc)) = cam.project(c) else { continue };
            if !params.in_image(uc, vc) {
                continue;
            }
            let hw = params.stripe_half_width;
            let left = cam.project(Point3::new(c.x - hw, c.y, c.z)).map(|p| p.0).unwrap_or(uc);
            let right = cam.project(Point3::new(c.x + hw, c.y, c.z)).map(|p| p.0).unwrap_or(uc);
            let lo = math::floor(left.min(uc)).max(0.0) as usize;
            let hi = (math::floor(right.max(uc)).max(0.0) as usize).min(params.width - 1);
            let row = vc as usize;
            for col in lo..=hi {
                image.set(row, col, STRIPE);
            }
        }
    }
    // ground-truth points always sit on painted pixels
    for p in lanes.iter().flatten() {
        if let Ok((u, v)) = cam.project(*p) {
            image.set(v as usize, u as usize, STRIPE);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_straight_scene_has_zero_heights() {
        let params = SceneParams::default();
        let s = generate(&params).unwrap();
        assert!(!s.lanes.is_empty());
        for p in s.lanes.iter().flatten() {
            assert_eq!(p.z, 0.0);
        }
    }

    #[test]
    fn sloped_lane_height_follows_surface() {
        let params = SceneParams {
            slope: 0.1,
            ..SceneParams::default()
        };
        assert_eq!(params.lane_point(0, 20.0).z, 2.0);
        let s = generate(&params).unwrap();
        for p in s.lanes.iter().flatten() {
            assert!((p.z - 0.1 * p.y).abs() < 1e-12);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let params = SceneParams::default().varied(17);
        let a = generate(&params).unwrap();
        let b = generate(&params).unwrap();
        assert_eq!(a, b);
        let bits_a: Vec<u32> = a.image.data.iter().map(|v| v.to_bits()).collect();
        let bits_b: Vec<u32> = b.image.data.iter().map(|v| v.to_bits()).collect();
        assert_eq!(bits_a, bits_b);
    }

    #[test]
    fn lanes_are_ordered_and_inside_grid() {
        for seed in 0..10 {
            let params = SceneParams::default().varied(seed);
            let s = generate(&params).unwrap();
            for lane in &s.lanes {
                assert!(lane.len() >= MIN_LANE_POINTS);
                assert!(lane.windows(2).all(|w| w[0].y < w[1].y));
                assert!(lane.iter().all(|p| p.y >= params.grid.y_min));
            }
        }
    }

    #[test]
    fn sky_is_exactly_the_rays_missing_the_surface() {
        let params = SceneParams::default().varied(3);
        let s = generate(&params).unwrap();
        let mut sky = 0;
        for row in 0..s.depth.height {
            for col in 0..s.depth.width {
                let hit = params.surface_depth(col as f64 + 0.5, row as f64 + 0.5);
                assert_eq!(hit.is_some(), s.depth.get(row, col).is_some());
                sky += hit.is_none() as usize;
            }
        }
        assert!(sky > 0 && sky < s.depth.bins.len());
    }

    #[test]
    fn lane_points_land_on_stripes() {
        for seed in 0..5 {
            let params = SceneParams::default().varied(seed);
            let s = generate(&params).unwrap();
            for p in s.lanes.iter().flatten() {
                let (u, v) = params.camera.project(*p).unwrap();
                assert_eq!(s.image.pixel(v as usize, u as usize), STRIPE);
            }
        }
    }

    #[test]
    fn depth_at_lane_pixels_matches_point_depth() {
        // A pixel covers a range of depths; the point's bin must fall inside
        // the bin range the pixel spans vertically.
        for seed in 0..5 {
            let params = SceneParams::default().varied(seed);
            let s = generate(&params).unwrap();
            for p in s.lanes.iter().flatten() {
                let (u, v) = params.camera.project(*p).unwrap();
                let (row, col) = (v as usize, u as usize);
                let stored = s.depth.get(row, col).unwrap() as usize;
                let uc = col as f64 + 0.5;
                let center = params.surface_depth(uc, row as f64 + 0.5).unwrap();
                assert_eq!(stored, params.bins.depth_to_bin(center));
                let far = params.surface_depth(uc, row as f64).unwrap_or(f64::INFINITY);
                let near = params.surface_depth(uc, row as f64 + 1.0).unwrap();
                let lo = params.bins.depth_to_bin(near);
                let hi = params.bins.depth_to_bin(far);
                let own = params.bins.depth_to_bin(params.camera.optical_depth(*p));
                assert!(lo <= own && own <= hi, "bin {own} outside [{lo}, {hi}]");
                assert!(lo <= stored && stored <= hi);
            }
        }
    }

    #[test]
    fn invisible_lanes_are_degenerate() {
        let params = SceneParams {
            lateral_shift: 500.0,
            ..SceneParams::default()
        };
        assert_eq!(generate(&params), Err(SceneError::DegenerateScene));
    }

    #[test]
    fn invalid_params_are_rejected() {
        let bad = [
            SceneParams {
                n_lanes: 1,
                ..SceneParams::default()
            },
            SceneParams {
                curvature: 0.05,
                ..SceneParams::default()
            },
            SceneParams {
                slope: -0.2,
                ..SceneParams::default()
            },
            SceneParams {
                lane_spacing: 0.0,
                ..SceneParams::default()
            },
        ];
        for p in bad {
            assert!(matches!(generate(&p), Err(SceneError::InvalidParams(_))));
        }
    }

    #[test]
    fn pooled_depth_takes_majority() {
        let d = DepthTruth {
            height: 2,
            width: 4,
            bins: vec![Some(1), Some(2), None, None, Some(1), Some(3), None, Some(5)],
        };
        let p = d.pooled(2, 8);
        assert_eq!(p.bins, vec![Some(1), None]);
        let d = DepthTruth {
            height: 2,
            width: 2,
            bins: vec![Some(4), None, Some(2), None],
        };
        // half valid, tie 2 vs 4 resolves to the smaller bin
        assert_eq!(d.pooled(2, 8).bins, vec![Some(2)]);
    }

    #[test]
    fn downscaled_scene_still_has_lanes() {
        let params = SceneParams::default().downscaled(4);
        let s = generate(&params).unwrap();
        assert_eq!((s.image.height, s.image.width), (32, 64));
        assert!(!s.lanes.is_empty());
    }
}
