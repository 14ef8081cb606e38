//! Camera, depth-bin and BEV grid mathematics.
//!
//! World frame is right-front-up: `x` lateral (right positive), `y`
//! longitudinal (forward positive), `z` height (up positive). The camera sits
//! at `(0, 0, cam_height)` looking along `+y`, pitched down by `pitch`
//! radians. The camera frame is the usual pinhole one: `X` right, `Y` down,
//! `Z` along the optical axis.

use crate::math;

#[derive(Debug, Clone, Copy, PartialEq, thiserror::Error)]
pub enum GeometryError {
    #[error("point is not in front of the camera (optical-axis depth {0})")]
    NonPositiveDepth(f64),
    #[error("invalid camera: {0}")]
    InvalidCamera(&'static str),
    #[error("invalid depth bins: {0}")]
    InvalidBins(&'static str),
    #[error("invalid BEV grid: {0}")]
    InvalidGrid(&'static str),
}

/// A point in the world frame, meters.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Point3 {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }
}

/// Pinhole intrinsics plus the reduced extrinsics (height above the ground
/// plane at `y = 0` and downward pitch).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub cam_height: f64,
    pub pitch: f64,
}

impl CameraModel {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, cam_height: f64, pitch: f64) -> Result<Self, GeometryError> {
        let cam = Self {
            fx,
            fy,
            cx,
            cy,
            cam_height,
            pitch,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let all_finite = [self.fx, self.fy, self.cx, self.cy, self.cam_height, self.pitch]
            .iter()
            .all(|v| v.is_finite());
        if !all_finite {
            return Err(GeometryError::InvalidCamera("non-finite parameter"));
        }
        if self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(GeometryError::InvalidCamera("focal lengths must be positive"));
        }
        if self.cam_height <= 0.0 {
            return Err(GeometryError::InvalidCamera("camera height must be positive"));
        }
        if self.pitch.abs() >= core::f64::consts::FRAC_PI_2 {
            return Err(GeometryError::InvalidCamera("|pitch| must be below pi/2"));
        }
        Ok(())
    }

    /// World point to camera-frame coordinates `(X, Y, Z)`.
    pub fn to_camera_frame(&self, p: Point3) -> [f64; 3] {
        let (s, c) = math::sin_cos(self.pitch);
        let dy = p.y;
        let dz = p.z - self.cam_height;
        [p.x, -s * dy - c * dz, c * dy - s * dz]
    }

    /// Camera-frame coordinates back to the world frame.
    pub fn from_camera_frame(&self, cam: [f64; 3]) -> Point3 {
        let (s, c) = math::sin_cos(self.pitch);
        let [x, y, z] = cam;
        Point3::new(x, -s * y + c * z, self.cam_height - c * y - s * z)
    }

    /// Depth of `p` along the optical axis.
    pub fn optical_depth(&self, p: Point3) -> f64 {
        self.to_camera_frame(p)[2]
    }

    pub fn project(&self, p: Point3) -> Result<(f64, f64), GeometryError> {
        let [x, y, z] = self.to_camera_frame(p);
        if !(z > 0.0) {
            return Err(GeometryError::NonPositiveDepth(z));
        }
        Ok((self.fx * x / z + self.cx, self.fy * y / z + self.cy))
    }

    /// Back-projects pixel `(u, v)` to the world point at optical-axis depth
    /// `depth`. Inverse of [`CameraModel::project`].
    pub fn lift(&self, u: f64, v: f64, depth: f64) -> Result<Point3, GeometryError> {
        if !(depth > 0.0) || !depth.is_finite() {
            return Err(GeometryError::NonPositiveDepth(depth));
        }
        let x = (u - self.cx) * depth / self.fx;
        let y = (v - self.cy) * depth / self.fy;
        Ok(self.from_camera_frame([x, y, depth]))
    }

    /// World-frame direction of the ray through `(u, v)`, scaled so that its
    /// optical-axis component is 1: `camera + t * dir` has depth `t`.
    pub fn ray_direction(&self, u: f64, v: f64) -> [f64; 3] {
        let (s, c) = math::sin_cos(self.pitch);
        let a = (u - self.cx) / self.fx;
        let b = (v - self.cy) / self.fy;
        [a, -s * b + c, -c * b - s]
    }

    /// `(fx, fy, cx, cy)` divided by the image size, the intrinsics vector the
    /// SE gates consume.
    pub fn normalized_intrinsics(&self, width: usize, height: usize) -> [f64; 4] {
        let w = width as f64;
        let h = height as f64;
        [self.fx / w, self.fy / h, self.cx / w, self.cy / h]
    }

    /// The same camera viewing an image rescaled by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            fx: self.fx * factor,
            fy: self.fy * factor,
            cx: self.cx * factor,
            cy: self.cy * factor,
            ..*self
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinMode {
    Uniform,
    LogSpaced,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DepthBinSpec {
    pub d_min: f64,
    pub d_max: f64,
    pub count: usize,
    pub mode: BinMode,
}

impl DepthBinSpec {
    pub fn new(d_min: f64, d_max: f64, count: usize, mode: BinMode) -> Result<Self, GeometryError> {
        let spec = Self {
            d_min,
            d_max,
            count,
            mode,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn uniform(d_min: f64, d_max: f64, count: usize) -> Result<Self, GeometryError> {
        Self::new(d_min, d_max, count, BinMode::Uniform)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(self.d_min > 0.0 && self.d_min < self.d_max && self.d_max.is_finite()) {
            return Err(GeometryError::InvalidBins("need 0 < d_min < d_max"));
        }
        if self.count < 2 {
            return Err(GeometryError::InvalidBins("need at least two bins"));
        }
        Ok(())
    }

    /// Lower edge of bin `i`; `edge(count)` is `d_max`.
    pub fn edge(&self, i: usize) -> f64 {
        let t = i as f64 / self.count as f64;
        match self.mode {
            BinMode::Uniform => self.d_min + t * (self.d_max - self.d_min),
            BinMode::LogSpaced => self.d_min * math::exp(t * math::ln(self.d_max / self.d_min)),
        }
    }

    pub fn center(&self, i: usize) -> f64 {
        match self.mode {
            BinMode::Uniform => 0.5 * (self.edge(i) + self.edge(i + 1)),
            BinMode::LogSpaced => math::sqrt(self.edge(i) * self.edge(i + 1)),
        }
    }

    /// Position of `d` in units of bins, measured from the lower edge of bin 0
    /// (so bin `i` spans `[i, i + 1)`). Not clamped.
    pub fn fractional_index(&self, d: f64) -> f64 {
        let n = self.count as f64;
        match self.mode {
            BinMode::Uniform => (d - self.d_min) / (self.d_max - self.d_min) * n,
            BinMode::LogSpaced => {
                if d <= 0.0 {
                    return f64::NEG_INFINITY;
                }
                math::ln(d / self.d_min) / math::ln(self.d_max / self.d_min) * n
            }
        }
    }

    /// Bin containing `d`; depths outside `[d_min, d_max)` clamp to the end
    /// bins.
    pub fn depth_to_bin(&self, d: f64) -> usize {
        if !(d >= self.d_min) {
            return 0;
        }
        if d >= self.d_max {
            return self.count - 1;
        }
        let idx = math::floor(self.fractional_index(d));
        if idx < 0.0 {
            0
        } else {
            (idx as usize).min(self.count - 1)
        }
    }
}

/// Row/column of a BEV cell. Rows run along `y`, columns along `x`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct BevCell {
    pub row: usize,
    pub col: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BevGridSpec {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    /// Lateral cell count.
    pub cols: usize,
    /// Longitudinal cell count.
    pub rows: usize,
}

impl BevGridSpec {
    pub fn new(
        x_min: f64,
        x_max: f64,
        y_min: f64,
        y_max: f64,
        cols: usize,
        rows: usize,
    ) -> Result<Self, GeometryError> {
        let grid = Self {
            x_min,
            x_max,
            y_min,
            y_max,
            cols,
            rows,
        };
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(self.x_min < self.x_max) || !(self.y_min < self.y_max) {
            return Err(GeometryError::InvalidGrid("extents must be increasing"));
        }
        if self.cols == 0 || self.rows == 0 {
            return Err(GeometryError::InvalidGrid("cell counts must be positive"));
        }
        if !(self.cell_width() > 0.0 && self.cell_length() > 0.0) {
            return Err(GeometryError::InvalidGrid("degenerate cells"));
        }
        Ok(())
    }

    pub fn cell_width(&self) -> f64 {
        (self.x_max - self.x_min) / self.cols as f64
    }

    pub fn cell_length(&self) -> f64 {
        (self.y_max - self.y_min) / self.rows as f64
    }

    pub fn cell_count(&self) -> usize {
        self.rows * self.cols
    }

    /// Longitudinal center of `row`.
    pub fn row_center(&self, row: usize) -> f64 {
        self.y_min + (row as f64 + 0.5) * self.cell_length()
    }

    /// Lateral coordinate of the left boundary of `col`.
    pub fn col_left(&self, col: usize) -> f64 {
        self.x_min + col as f64 * self.cell_width()
    }

    pub fn col_center(&self, col: usize) -> f64 {
        self.x_min + (col as f64 + 0.5) * self.cell_width()
    }

    /// Cell containing the ground projection of `p`, or `None` outside the
    /// half-open extents `[x_min, x_max) x [y_min, y_max)`.
    pub fn cell_of(&self, p: Point3) -> Option<BevCell> {
        if !(p.x >= self.x_min && p.x < self.x_max && p.y >= self.y_min && p.y < self.y_max) {
            return None;
        }
        let col = math::floor((p.x - self.x_min) / self.cell_width()) as usize;
        let row = math::floor((p.y - self.y_min) / self.cell_length()) as usize;
        Some(BevCell {
            row: row.min(self.rows - 1),
            col: col.min(self.cols - 1),
        })
    }
}

/// Free-function form of [`CameraModel::project`].
pub fn project(p: Point3, cam: &CameraModel) -> Result<(f64, f64), GeometryError> {
    cam.project(p)
}

/// Free-function form of [`CameraModel::lift`].
pub fn lift(u: f64, v: f64, depth: f64, cam: &CameraModel) -> Result<Point3, GeometryError> {
    cam.lift(u, v, depth)
}

pub fn depth_to_bin(d: f64, spec: &DepthBinSpec) -> usize {
    spec.depth_to_bin(d)
}

pub fn bev_cell_of(p: Point3, grid: &BevGridSpec) -> Option<BevCell> {
    grid.cell_of(p)
}
