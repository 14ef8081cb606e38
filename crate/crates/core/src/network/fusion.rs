//! Height reduction and BEV fusion.
//!
//! `pfe` collapses FV features `(C, H, W)` to a prime feature `(C, 1, W)`;
//! `dat` gates the depth distribution `(D, H, W)` with an FV-derived spatial
//! weight and collapses it to a prime depth `(1, D, W)`; `fuse` spreads the
//! prime feature over depth: `B(d, w, c) = X(d, w) * F(w, c)`.

use alloc::vec::Vec;

use super::ops::{self, ConvCache, ConvShape};
use super::tensor::Tensor;
use super::{DepthDistribution, FvFeature, NetworkError};

/// Height-collapsed FV feature, stored `(C, 1, W)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PrimeFvFeature(pub Tensor);

impl PrimeFvFeature {
    pub fn width(&self) -> usize {
        self.0.w
    }

    pub fn channels(&self) -> usize {
        self.0.c
    }

    /// Value at `(0, w, c)`.
    pub fn at(&self, w: usize, c: usize) -> f64 {
        self.0.at(c, 0, w)
    }
}

/// Height-collapsed depth feature, stored `(1, D, W)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PrimeDepthFeature(pub Tensor);

impl PrimeDepthFeature {
    pub fn depth(&self) -> usize {
        self.0.h
    }

    pub fn width(&self) -> usize {
        self.0.w
    }

    /// Value at `(d, w, 0)`.
    pub fn at(&self, d: usize, w: usize) -> f64 {
        self.0.at(0, d, w)
    }
}

/// BEV feature indexed `(d, w, c)`. Stored channel-major `(C, D, W)` so the
/// lane head can convolve it directly.
#[derive(Debug, Clone, PartialEq)]
pub struct BevFeature(pub Tensor);

impl BevFeature {
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.0.h, self.0.w, self.0.c)
    }

    pub fn at(&self, d: usize, w: usize, c: usize) -> f64 {
        self.0.at(c, d, w)
    }
}

/// Shape of the 1D refinement convolutions (kernel 3 along the width axis).
pub fn pfe_conv_shape(channels: usize) -> ConvShape {
    ConvShape {
        in_c: channels,
        out_c: channels,
        kh: 1,
        kw: 3,
        stride: 1,
        pad_h: 0,
        pad_w: 1,
    }
}

/// Residual refinement `m + conv_b(relu(conv_a(m)))` applied after the
/// column max.
#[derive(Debug, Clone, Copy)]
pub struct PfeWeights<'a> {
    pub a_w: &'a [f64],
    pub a_b: &'a [f64],
    pub b_w: &'a [f64],
    pub b_b: &'a [f64],
}

#[derive(Debug, Clone)]
pub struct PfeCache {
    pub(crate) in_h: usize,
    pub(crate) argmax: Vec<usize>,
    pub(crate) conv_a: ConvCache,
    pub(crate) hidden: Tensor,
    pub(crate) conv_b: ConvCache,
}

/// Column-wise max over the height axis, before refinement.
pub fn column_max(fv: &FvFeature) -> PrimeFvFeature {
    PrimeFvFeature(ops::max_over_h(&fv.0).0)
}

pub(crate) fn pfe_forward(fv: &Tensor, wts: &PfeWeights<'_>) -> (Tensor, PfeCache) {
    let s = pfe_conv_shape(fv.c);
    let (m, argmax) = ops::max_over_h(fv);
    let (za, conv_a) = ops::conv2d(&m, wts.a_w, wts.a_b, &s);
    let hidden = ops::relu(&za);
    let (zb, conv_b) = ops::conv2d(&hidden, wts.b_w, wts.b_b, &s);
    let mut out = m;
    out.add_assign(&zb);
    let cache = PfeCache {
        in_h: fv.h,
        argmax,
        conv_a,
        hidden,
        conv_b,
    };
    (out, cache)
}

pub struct PfeGrads<'a> {
    pub a_w: &'a mut [f64],
    pub a_b: &'a mut [f64],
    pub b_w: &'a mut [f64],
    pub b_b: &'a mut [f64],
}

pub(crate) fn pfe_backward(cache: &PfeCache, wts: &PfeWeights<'_>, dout: &Tensor, g: PfeGrads<'_>) -> Tensor {
    let s = pfe_conv_shape(dout.c);
    let dh = ops::conv2d_backward(&cache.conv_b, wts.b_w, dout, &s, g.b_w, g.b_b, true).unwrap();
    let dza = ops::relu_backward(&cache.hidden, &dh);
    let mut dm = ops::conv2d_backward(&cache.conv_a, wts.a_w, &dza, &s, g.a_w, g.a_b, true).unwrap();
    dm.add_assign(dout);
    ops::max_over_h_backward(&cache.argmax, &dm, cache.in_h)
}

/// Prime feature extraction: column max followed by the refinement stack.
pub fn pfe(fv: &FvFeature, wts: &PfeWeights<'_>) -> PrimeFvFeature {
    PrimeFvFeature(pfe_forward(&fv.0, wts).0)
}

/// Gate convolution of the depth attention: 3x3, `C -> 1`.
pub fn dat_gate_shape(channels: usize) -> ConvShape {
    ConvShape::square(channels, 1, 3, 1)
}

/// Spatial gate `sigmoid(conv(fv))`, shape `(1, H, W)`.
pub fn dat_gate(fv: &FvFeature, weight: &[f64], bias: &[f64]) -> Tensor {
    let (z, _) = ops::conv2d(&fv.0, weight, bias, &dat_gate_shape(fv.0.c));
    ops::sigmoid(&z)
}

/// `X(d, w) = max_h gate(h, w) * probs(d, h, w)`. Returns the argmax row per
/// `(d, w)`.
pub(crate) fn gated_column_max(probs: &Tensor, gate: Option<&Tensor>) -> (Tensor, Vec<usize>) {
    let (d_n, h_n, w_n) = probs.shape();
    let mut x = Tensor::zeros(1, d_n, w_n);
    let mut arg = alloc::vec![0usize; d_n * w_n];
    for d in 0..d_n {
        for w in 0..w_n {
            let mut best = f64::NEG_INFINITY;
            let mut at = 0;
            for h in 0..h_n {
                let g = gate.map_or(1.0, |g| g.at(0, h, w));
                let v = g * probs.at(d, h, w);
                if v > best {
                    best = v;
                    at = h;
                }
            }
            *x.at_mut(0, d, w) = best;
            arg[d * w_n + w] = at;
        }
    }
    (x, arg)
}

/// Depth attention with a precomputed gate; `None` means a gate of 1.
pub fn dat(probs: &DepthDistribution, gate: Option<&Tensor>) -> Result<PrimeDepthFeature, NetworkError> {
    if let Some(g) = gate {
        if g.c != 1 || g.h != probs.0.h || g.w != probs.0.w {
            return Err(NetworkError::ShapeMismatch(
                "depth attention gate vs depth distribution",
            ));
        }
    }
    Ok(PrimeDepthFeature(gated_column_max(&probs.0, gate).0))
}

/// Broadcast Hadamard product `B(d, w, c) = X(d, w, 0) * F(0, w, c)`.
pub fn fuse(x: &PrimeDepthFeature, f: &PrimeFvFeature) -> Result<BevFeature, NetworkError> {
    if x.width() != f.width() {
        return Err(NetworkError::WidthMismatch {
            depth: x.width(),
            feature: f.width(),
        });
    }
    Ok(BevFeature(fuse_tensors(&x.0, &f.0)))
}

pub(crate) fn fuse_tensors(x: &Tensor, f: &Tensor) -> Tensor {
    let (d_n, w_n, c_n) = (x.h, x.w, f.c);
    let mut b = Tensor::zeros(c_n, d_n, w_n);
    for c in 0..c_n {
        for d in 0..d_n {
            for w in 0..w_n {
                *b.at_mut(c, d, w) = x.at(0, d, w) * f.at(c, 0, w);
            }
        }
    }
    b
}

/// Returns `(dX, dF)`.
pub(crate) fn fuse_backward(x: &Tensor, f: &Tensor, db: &Tensor) -> (Tensor, Tensor) {
    let (d_n, w_n, c_n) = (x.h, x.w, f.c);
    let mut dx = Tensor::zeros(1, d_n, w_n);
    let mut df = Tensor::zeros(c_n, 1, w_n);
    for c in 0..c_n {
        for d in 0..d_n {
            for w in 0..w_n {
                let g = db.at(c, d, w);
                *dx.at_mut(0, d, w) += g * f.at(c, 0, w);
                *df.at_mut(c, 0, w) += g * x.at(0, d, w);
            }
        }
    }
    (dx, df)
}

/// Collapse convolution of the naive fusion baseline: kernel `(H, 1)` over
/// the height axis, `C -> C`.
pub fn naive_collapse_shape(channels: usize, height: usize) -> ConvShape {
    ConvShape {
        in_c: channels,
        out_c: channels,
        kh: height,
        kw: 1,
        stride: 1,
        pad_h: 0,
        pad_w: 0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Tensor {
        Tensor::from_vec(c, h, w, (0..c * h * w).map(|_| rng.gen_range(-2.0..2.0)).collect())
    }

    #[test]
    fn column_max_finds_single_maxima() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (c, h, w) = (3, 5, 4);
        let mut t = random_tensor(&mut rng, c, h, w);
        t.data.iter_mut().for_each(|v| *v = v.abs().min(1.0));
        // plant a unique maximum per column
        let mut planted = vec![];
        for ci in 0..c {
            for wi in 0..w {
                let hi = rng.gen_range(0..h);
                *t.at_mut(ci, hi, wi) = 5.0 + ci as f64 + wi as f64;
                planted.push(5.0 + ci as f64 + wi as f64);
            }
        }
        let m = column_max(&FvFeature(t.clone()));
        for ci in 0..c {
            for wi in 0..w {
                let brute = (0..h).map(|hi| t.at(ci, hi, wi)).fold(f64::NEG_INFINITY, f64::max);
                assert_eq!(m.at(wi, ci), brute);
                assert_eq!(m.at(wi, ci), planted[ci * w + wi]);
            }
        }
    }

    #[test]
    fn pfe_identity_refinement_keeps_constants() {
        let c = 4;
        let fv = FvFeature(Tensor::filled(c, 6, 5, -1.25));
        let n = pfe_conv_shape(c).weight_len();
        let a_w: Vec<f64> = (0..n).map(|i| (i as f64).sin()).collect();
        let zeros_w = vec![0.0; n];
        let zeros_b = vec![0.0; c];
        let wts = PfeWeights {
            a_w: &a_w,
            a_b: &zeros_b,
            b_w: &zeros_w,
            b_b: &zeros_b,
        };
        let out = pfe(&fv, &wts);
        assert_eq!((out.width(), out.channels()), (5, c));
        assert!(out.0.data.iter().all(|v| *v == -1.25));
    }

    #[test]
    fn pfe_collapse_ignores_row_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let t = random_tensor(&mut rng, 3, 6, 4);
        let mut shuffled = t.clone();
        // reverse the rows of column 2
        for c in 0..3 {
            for h in 0..6 {
                *shuffled.at_mut(c, h, 2) = t.at(c, 5 - h, 2);
            }
        }
        assert_eq!(column_max(&FvFeature(t)), column_max(&FvFeature(shuffled)));
    }

    #[test]
    fn dat_gate_limits() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut p = random_tensor(&mut rng, 3, 4, 5);
        p.data.iter_mut().for_each(|v| *v = v.abs());
        let probs = DepthDistribution(p.clone());
        let ones = Tensor::filled(1, 4, 5, 1.0);
        let x = dat(&probs, Some(&ones)).unwrap();
        let y = dat(&probs, None).unwrap();
        assert_eq!(x, y);
        for d in 0..3 {
            for w in 0..5 {
                let m = (0..4).map(|h| p.at(d, h, w)).fold(f64::NEG_INFINITY, f64::max);
                assert_eq!(x.at(d, w), m);
            }
        }
        let zero = Tensor::zeros(1, 4, 5);
        assert!(dat(&probs, Some(&zero)).unwrap().0.data.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn dat_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let (d_n, h_n, w_n) = (6, 4, 7);
        let p = Tensor::from_vec(
            d_n,
            h_n,
            w_n,
            (0..d_n * h_n * w_n).map(|_| rng.gen_range(0.0..1.0)).collect(),
        );
        let g = Tensor::from_vec(1, h_n, w_n, (0..h_n * w_n).map(|_| rng.gen_range(0.0..1.0)).collect());
        let x = dat(&DepthDistribution(p.clone()), Some(&g)).unwrap();
        for d in 0..d_n {
            for w in 0..w_n {
                let mut best = f64::NEG_INFINITY;
                for h in 0..h_n {
                    best = best.max(g.at(0, h, w) * p.at(d, h, w));
                }
                assert!((x.at(d, w) - best).abs() < 1e-6);
            }
        }
        let bad = Tensor::zeros(1, h_n + 1, w_n);
        assert!(dat(&DepthDistribution(p), Some(&bad)).is_err());
    }

    #[test]
    fn fuse_limits_and_width_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let f = PrimeFvFeature(random_tensor(&mut rng, 3, 1, 5));
        let ones = PrimeDepthFeature(Tensor::filled(1, 4, 5, 1.0));
        let b = fuse(&ones, &f).unwrap();
        for d in 0..4 {
            for w in 0..5 {
                for c in 0..3 {
                    assert_eq!(b.at(d, w, c), f.at(w, c));
                }
            }
        }
        let mut onehot = Tensor::zeros(1, 4, 5);
        *onehot.at_mut(0, 2, 1) = 1.0;
        let b = fuse(&PrimeDepthFeature(onehot), &f).unwrap();
        for d in 0..4 {
            for c in 0..3 {
                let expected = if d == 2 { f.at(1, c) } else { 0.0 };
                assert_eq!(b.at(d, 1, c), expected);
            }
        }
        let narrow = PrimeDepthFeature(Tensor::zeros(1, 4, 4));
        assert!(matches!(fuse(&narrow, &f), Err(NetworkError::WidthMismatch { .. })));
    }
}
