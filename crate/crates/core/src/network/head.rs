use alloc::vec::Vec;

use super::tensor::Tensor;
use crate::geometry::{BevGridSpec, CameraModel, DepthBinSpec, Point3};
use crate::math;

/// Per-cell outputs of the lane head on the BEV grid. All maps are row-major
/// over `(row, col)`; the embedding is cell-major (`E` values per cell).
#[derive(Debug, Clone, PartialEq)]
pub struct LanePrediction {
    pub rows: usize,
    pub cols: usize,
    pub embed_dim: usize,
    pub confidence: Vec<f64>,
    pub embedding: Vec<f64>,
    /// Lateral position inside the cell relative to its left boundary, `[0, 1]`.
    pub x_offset: Vec<f64>,
    /// Lane height, meters.
    pub z_offset: Vec<f64>,
}

impl LanePrediction {
    pub fn zeros(rows: usize, cols: usize, embed_dim: usize) -> Self {
        let n = rows * cols;
        Self {
            rows,
            cols,
            embed_dim,
            confidence: alloc::vec![0.0; n],
            embedding: alloc::vec![0.0; n * embed_dim],
            x_offset: alloc::vec![0.0; n],
            z_offset: alloc::vec![0.0; n],
        }
    }

    pub fn cell_count(&self) -> usize {
        self.rows * self.cols
    }

    #[inline]
    pub fn cell_index(&self, row: usize, col: usize) -> usize {
        row * self.cols + col
    }

    pub fn embedding_of(&self, cell: usize) -> &[f64] {
        &self.embedding[cell * self.embed_dim..(cell + 1) * self.embed_dim]
    }

    pub fn embedding_of_mut(&mut self, cell: usize) -> &mut [f64] {
        &mut self.embedding[cell * self.embed_dim..(cell + 1) * self.embed_dim]
    }

    pub fn is_finite(&self) -> bool {
        self.confidence
            .iter()
            .chain(&self.embedding)
            .chain(&self.x_offset)
            .chain(&self.z_offset)
            .all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Tap {
    src: usize,
    weight: f64,
}

/// Fixed bilinear resampling from the `(depth bin, image column)` plane of
/// the BEV feature onto the metric BEV grid.
///
/// Each grid cell center, taken on the flat ground plane, is projected into
/// the image; its image column and optical-axis depth pick the fractional
/// `(d, w)` position it samples. Cells that fall outside the image or the
/// depth range read zeros.
#[derive(Debug, Clone, PartialEq)]
pub struct BevResampler {
    pub rows: usize,
    pub cols: usize,
    pub src_depth: usize,
    pub src_width: usize,
    taps: Vec<Vec<Tap>>,
}

impl BevResampler {
    pub fn new(
        camera: &CameraModel,
        bins: &DepthBinSpec,
        grid: &BevGridSpec,
        downsample: usize,
        src_width: usize,
    ) -> Self {
        let src_depth = bins.count;
        let mut taps = Vec::with_capacity(grid.cell_count());
        for row in 0..grid.rows {
            for col in 0..grid.cols {
                let p = Point3::new(grid.col_center(col), grid.row_center(row), 0.0);
                let cell_taps = camera
                    .project(p)
                    .ok()
                    .and_then(|(u, _)| {
                        let fw = u / downsample as f64 - 0.5;
                        let fd = bins.fractional_index(camera.optical_depth(p)) - 0.5;
                        bilinear(fd, fw, src_depth, src_width)
                    })
                    .unwrap_or_default();
                taps.push(cell_taps);
            }
        }
        Self {
            rows: grid.rows,
            cols: grid.cols,
            src_depth,
            src_width,
            taps,
        }
    }

    /// Fraction of grid cells that read any feature.
    pub fn coverage(&self) -> f64 {
        self.taps.iter().filter(|t| !t.is_empty()).count() as f64 / self.taps.len() as f64
    }

    pub fn forward(&self, bev: &Tensor) -> Tensor {
        assert_eq!(
            (bev.h, bev.w),
            (self.src_depth, self.src_width),
            "resampler input shape"
        );
        let n_src = bev.h * bev.w;
        let n_dst = self.rows * self.cols;
        let mut out = Tensor::zeros(bev.c, self.rows, self.cols);
        for c in 0..bev.c {
            let src = &bev.data[c * n_src..(c + 1) * n_src];
            let dst = &mut out.data[c * n_dst..(c + 1) * n_dst];
            for (o, taps) in dst.iter_mut().zip(&self.taps) {
                *o = taps.iter().map(|t| t.weight * src[t.src]).sum();
            }
        }
        out
    }

    pub fn backward(&self, dout: &Tensor) -> Tensor {
        let n_src = self.src_depth * self.src_width;
        let n_dst = self.rows * self.cols;
        let mut dbev = Tensor::zeros(dout.c, self.src_depth, self.src_width);
        for c in 0..dout.c {
            let dst = &dout.data[c * n_dst..(c + 1) * n_dst];
            let src = &mut dbev.data[c * n_src..(c + 1) * n_src];
            for (g, taps) in dst.iter().zip(&self.taps) {
                for t in taps {
                    src[t.src] += t.weight * g;
                }
            }
        }
        dbev
    }
}

fn bilinear(fd: f64, fw: f64, depth: usize, width: usize) -> Option<Vec<Tap>> {
    let (dmax, wmax) = ((depth - 1) as f64, (width - 1) as f64);
    if !(fd >= -0.5 && fd <= dmax + 0.5 && fw >= -0.5 && fw <= wmax + 0.5) {
        return None;
    }
    let fd = fd.clamp(0.0, dmax);
    let fw = fw.clamp(0.0, wmax);
    let (d0, w0) = (math::floor(fd) as usize, math::floor(fw) as usize);
    let (d1, w1) = ((d0 + 1).min(depth - 1), (w0 + 1).min(width - 1));
    let (td, tw) = (fd - d0 as f64, fw - w0 as f64);
    let mut taps = Vec::with_capacity(4);
    for (d, wd) in [(d0, 1.0 - td), (d1, td)] {
        for (w, ww) in [(w0, 1.0 - tw), (w1, tw)] {
            let weight = wd * ww;
            if weight == 0.0 {
                continue;
            }
            let src = d * width + w;
            match taps.iter_mut().find(|t: &&mut Tap| t.src == src) {
                Some(t) => t.weight += weight,
                None => taps.push(Tap { src, weight }),
            }
        }
    }
    Some(taps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::SceneParams;

    #[test]
    fn bilinear_weights_sum_to_one() {
        for (fd, fw) in [(0.0, 0.0), (2.3, 4.7), (-0.4, 7.4), (5.0, 3.5)] {
            let taps = bilinear(fd, fw, 6, 8).unwrap();
            let total: f64 = taps.iter().map(|t| t.weight).sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
        assert!(bilinear(-0.6, 1.0, 6, 8).is_none());
        assert!(bilinear(1.0, 7.6, 6, 8).is_none());
    }

    #[test]
    fn backward_is_the_adjoint() {
        let p = SceneParams::default();
        let r = BevResampler::new(&p.camera, &p.bins, &p.grid, 8, 32);
        assert!(r.coverage() > 0.5);
        let x = Tensor::from_vec(
            2,
            24,
            32,
            (0..2 * 24 * 32).map(|i| ((i * 7919) % 97) as f64 / 97.0).collect(),
        );
        let y = Tensor::from_vec(
            2,
            32,
            32,
            (0..2 * 32 * 32).map(|i| ((i * 104729) % 89) as f64 / 89.0).collect(),
        );
        let lhs: f64 = r.forward(&x).data.iter().zip(&y.data).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data.iter().zip(&r.backward(&y).data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9 * lhs.abs().max(1.0));
    }
}
