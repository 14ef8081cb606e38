//! Differentiable kernels. Each forward returns whatever its backward needs;
//! backward functions accumulate parameter gradients into caller buffers.

use alloc::vec;
use alloc::vec::Vec;

use super::tensor::Tensor;
use crate::math;

/// `c = alpha * a * b + beta * c` for row/column-strided `a (m x k)`,
/// `b (k x n)` and a row-major `c (m x n)`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (isize, isize),
    b: &[f64],
    b_strides: (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the asserts above bound every access; strides describe dense
    // m x k, k x n and m x n matrices within those slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvShape {
    pub in_c: usize,
    pub out_c: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad_h: usize,
    pub pad_w: usize,
}

impl ConvShape {
    /// Square kernel with "same" padding.
    pub fn square(in_c: usize, out_c: usize, k: usize, stride: usize) -> Self {
        Self {
            in_c,
            out_c,
            kh: k,
            kw: k,
            stride,
            pad_h: k / 2,
            pad_w: k / 2,
        }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let oh = (h + 2 * self.pad_h - self.kh) / self.stride + 1;
        let ow = (w + 2 * self.pad_w - self.kw) / self.stride + 1;
        (oh, ow)
    }

    /// Length of one unrolled receptive field.
    pub fn patch_len(&self) -> usize {
        self.in_c * self.kh * self.kw
    }

    pub fn weight_len(&self) -> usize {
        self.out_c * self.patch_len()
    }
}

fn im2col(x: &Tensor, s: &ConvShape) -> (Vec<f64>, usize, usize) {
    let (oh, ow) = s.out_hw(x.h, x.w);
    let p = oh * ow;
    let mut cols = vec![0.0; s.patch_len() * p];
    for ic in 0..s.in_c {
        let plane = x.plane(ic);
        for ky in 0..s.kh {
            for kx in 0..s.kw {
                let r = (ic * s.kh + ky) * s.kw + kx;
                let dst = &mut cols[r * p..(r + 1) * p];
                for oy in 0..oh {
                    let iy = (oy * s.stride + ky) as isize - s.pad_h as isize;
                    if iy < 0 || iy >= x.h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * x.w..(iy as usize + 1) * x.w];
                    let row = &mut dst[oy * ow..(oy + 1) * ow];
                    for (ox, out) in row.iter_mut().enumerate() {
                        let ix = (ox * s.stride + kx) as isize - s.pad_w as isize;
                        if ix >= 0 && ix < x.w as isize {
                            *out = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    (cols, oh, ow)
}

fn col2im(cols: &[f64], s: &ConvShape, h: usize, w: usize, oh: usize, ow: usize) -> Tensor {
    let p = oh * ow;
    let mut dx = Tensor::zeros(s.in_c, h, w);
    for ic in 0..s.in_c {
        for ky in 0..s.kh {
            for kx in 0..s.kw {
                let r = (ic * s.kh + ky) * s.kw + kx;
                let src = &cols[r * p..(r + 1) * p];
                for oy in 0..oh {
                    let iy = (oy * s.stride + ky) as isize - s.pad_h as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = (ic * h + iy as usize) * w;
                    for ox in 0..ow {
                        let ix = (ox * s.stride + kx) as isize - s.pad_w as isize;
                        if ix >= 0 && ix < w as isize {
                            dx.data[base + ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Saved state of one convolution.
#[derive(Debug, Clone)]
pub struct ConvCache {
    cols: Vec<f64>,
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
}

/// Cross-correlation with weight layout `[out_c][in_c][kh][kw]`.
pub fn conv2d(x: &Tensor, weight: &[f64], bias: &[f64], s: &ConvShape) -> (Tensor, ConvCache) {
    assert_eq!(x.c, s.in_c, "conv input channels");
    assert_eq!(weight.len(), s.weight_len());
    assert_eq!(bias.len(), s.out_c);
    let (cols, oh, ow) = im2col(x, s);
    let p = oh * ow;
    let k = s.patch_len();
    let mut out = Tensor::zeros(s.out_c, oh, ow);
    for (oc, b) in bias.iter().enumerate() {
        out.data[oc * p..(oc + 1) * p].iter_mut().for_each(|v| *v = *b);
    }
    gemm(
        s.out_c,
        k,
        p,
        weight,
        (k as isize, 1),
        &cols,
        (p as isize, 1),
        1.0,
        &mut out.data,
    );
    let cache = ConvCache {
        cols,
        in_h: x.h,
        in_w: x.w,
        out_h: oh,
        out_w: ow,
    };
    (out, cache)
}

/// Accumulates weight/bias gradients and returns the input gradient when
/// `want_input` is set.
pub fn conv2d_backward(
    cache: &ConvCache,
    weight: &[f64],
    dout: &Tensor,
    s: &ConvShape,
    dweight: &mut [f64],
    dbias: &mut [f64],
    want_input: bool,
) -> Option<Tensor> {
    let p = cache.out_h * cache.out_w;
    let k = s.patch_len();
    assert_eq!(dout.data.len(), s.out_c * p);
    for (oc, db) in dbias.iter_mut().enumerate() {
        *db += dout.data[oc * p..(oc + 1) * p].iter().sum::<f64>();
    }
    // dW += dout (out_c x P) * cols^T (P x K)
    gemm(
        s.out_c,
        p,
        k,
        &dout.data,
        (p as isize, 1),
        &cache.cols,
        (1, p as isize),
        1.0,
        dweight,
    );
    if !want_input {
        return None;
    }
    // dcols = W^T (K x out_c) * dout (out_c x P)
    let mut dcols = vec![0.0; k * p];
    gemm(
        k,
        s.out_c,
        p,
        weight,
        (1, k as isize),
        &dout.data,
        (p as isize, 1),
        0.0,
        &mut dcols,
    );
    Some(col2im(&dcols, s, cache.in_h, cache.in_w, cache.out_h, cache.out_w))
}

pub fn relu(x: &Tensor) -> Tensor {
    let mut y = x.clone();
    y.data.iter_mut().for_each(|v| *v = v.max(0.0));
    y
}

/// Gradient through a ReLU given its output.
pub fn relu_backward(y: &Tensor, dy: &Tensor) -> Tensor {
    let mut dx = dy.clone();
    for (g, o) in dx.data.iter_mut().zip(&y.data) {
        if *o <= 0.0 {
            *g = 0.0;
        }
    }
    dx
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    let mut y = x.clone();
    y.data.iter_mut().for_each(|v| *v = math::sigmoid(*v));
    y
}

/// Gradient through a sigmoid given its output.
pub fn sigmoid_backward(y: &Tensor, dy: &Tensor) -> Tensor {
    let mut dx = dy.clone();
    for (g, o) in dx.data.iter_mut().zip(&y.data) {
        *g *= o * (1.0 - o);
    }
    dx
}

/// Normalized exponential over the channel axis at every `(h, w)`.
pub fn softmax_channels(x: &Tensor) -> Tensor {
    let n = x.h * x.w;
    let mut y = Tensor::zeros(x.c, x.h, x.w);
    for i in 0..n {
        let mut m = f64::NEG_INFINITY;
        for c in 0..x.c {
            m = m.max(x.data[c * n + i]);
        }
        let mut sum = 0.0;
        for c in 0..x.c {
            let e = math::exp(x.data[c * n + i] - m);
            y.data[c * n + i] = e;
            sum += e;
        }
        for c in 0..x.c {
            y.data[c * n + i] /= sum;
        }
    }
    y
}

pub fn softmax_channels_backward(y: &Tensor, dy: &Tensor) -> Tensor {
    let n = y.h * y.w;
    let mut dx = Tensor::zeros(y.c, y.h, y.w);
    for i in 0..n {
        let mut dot = 0.0;
        for c in 0..y.c {
            dot += y.data[c * n + i] * dy.data[c * n + i];
        }
        for c in 0..y.c {
            dx.data[c * n + i] = y.data[c * n + i] * (dy.data[c * n + i] - dot);
        }
    }
    dx
}

/// Maximum over the `h` axis: `(c, h, w) -> (c, 1, w)` plus the winning row
/// of every output (first maximum on ties).
pub fn max_over_h(x: &Tensor) -> (Tensor, Vec<usize>) {
    let mut y = Tensor::zeros(x.c, 1, x.w);
    let mut arg = vec![0usize; x.c * x.w];
    for c in 0..x.c {
        for w in 0..x.w {
            let mut best = x.at(c, 0, w);
            let mut at = 0;
            for h in 1..x.h {
                let v = x.at(c, h, w);
                if v > best {
                    best = v;
                    at = h;
                }
            }
            y.data[c * x.w + w] = best;
            arg[c * x.w + w] = at;
        }
    }
    (y, arg)
}

pub fn max_over_h_backward(arg: &[usize], dy: &Tensor, h: usize) -> Tensor {
    let mut dx = Tensor::zeros(dy.c, h, dy.w);
    for c in 0..dy.c {
        for w in 0..dy.w {
            let i = c * dy.w + w;
            *dx.at_mut(c, arg[i], w) += dy.data[i];
        }
    }
    dx
}

/// `y = W x + b` with `W` row-major `[out][in]`.
pub fn linear(x: &[f64], weight: &[f64], bias: &[f64]) -> Vec<f64> {
    let n_in = x.len();
    bias.iter()
        .enumerate()
        .map(|(o, b)| {
            b + weight[o * n_in..(o + 1) * n_in]
                .iter()
                .zip(x)
                .map(|(w, v)| w * v)
                .sum::<f64>()
        })
        .collect()
}

/// Accumulates parameter gradients of [`linear`] and returns `dx`.
pub fn linear_backward(x: &[f64], weight: &[f64], dy: &[f64], dweight: &mut [f64], dbias: &mut [f64]) -> Vec<f64> {
    let n_in = x.len();
    let mut dx = vec![0.0; n_in];
    for (o, g) in dy.iter().enumerate() {
        dbias[o] += g;
        let row = &weight[o * n_in..(o + 1) * n_in];
        let drow = &mut dweight[o * n_in..(o + 1) * n_in];
        for i in 0..n_in {
            drow[i] += g * x[i];
            dx[i] += g * row[i];
        }
    }
    dx
}

/// Weights of an intrinsics-conditioned squeeze-and-excitation gate:
/// `fc1: (C + 4) -> hidden`, `fc2: hidden -> C`.
#[derive(Debug, Clone, Copy)]
pub struct SeWeights<'a> {
    pub fc1_w: &'a [f64],
    pub fc1_b: &'a [f64],
    pub fc2_w: &'a [f64],
    pub fc2_b: &'a [f64],
}

#[derive(Debug, Clone)]
pub struct SeCache {
    input: Tensor,
    mlp_in: Vec<f64>,
    hidden: Vec<f64>,
    gates: Vec<f64>,
}

impl SeCache {
    pub fn gates(&self) -> &[f64] {
        &self.gates
    }
}

/// Channel gating: `y_c = x_c * sigmoid(MLP([avgpool(x); intrinsics]))_c`.
pub fn se_gate(x: &Tensor, intrinsics: &[f64; 4], wts: &SeWeights<'_>) -> (Tensor, SeCache) {
    let n = (x.h * x.w) as f64;
    let mut mlp_in: Vec<f64> = (0..x.c).map(|c| x.plane(c).iter().sum::<f64>() / n).collect();
    mlp_in.extend_from_slice(intrinsics);
    let mut hidden = linear(&mlp_in, wts.fc1_w, wts.fc1_b);
    hidden.iter_mut().for_each(|v| *v = v.max(0.0));
    let gates: Vec<f64> = linear(&hidden, wts.fc2_w, wts.fc2_b)
        .into_iter()
        .map(math::sigmoid)
        .collect();
    let mut y = x.clone();
    let plane = x.h * x.w;
    for (c, g) in gates.iter().enumerate() {
        y.data[c * plane..(c + 1) * plane].iter_mut().for_each(|v| *v *= g);
    }
    let cache = SeCache {
        input: x.clone(),
        mlp_in,
        hidden,
        gates,
    };
    (y, cache)
}

/// Mutable gradient buffers matching [`SeWeights`].
pub struct SeGrads<'a> {
    pub fc1_w: &'a mut [f64],
    pub fc1_b: &'a mut [f64],
    pub fc2_w: &'a mut [f64],
    pub fc2_b: &'a mut [f64],
}

pub fn se_gate_backward(cache: &SeCache, wts: &SeWeights<'_>, dy: &Tensor, grads: SeGrads<'_>) -> Tensor {
    let x = &cache.input;
    let plane = x.h * x.w;
    let mut dx = dy.clone();
    let mut dz2 = vec![0.0; x.c];
    for c in 0..x.c {
        let g = cache.gates[c];
        let dyc = &dy.data[c * plane..(c + 1) * plane];
        let xc = x.plane(c);
        let dgate: f64 = dyc.iter().zip(xc).map(|(a, b)| a * b).sum();
        dz2[c] = dgate * g * (1.0 - g);
        dx.data[c * plane..(c + 1) * plane].iter_mut().for_each(|v| *v *= g);
    }
    let mut dhidden = linear_backward(&cache.hidden, wts.fc2_w, &dz2, grads.fc2_w, grads.fc2_b);
    for (d, h) in dhidden.iter_mut().zip(&cache.hidden) {
        if *h <= 0.0 {
            *d = 0.0;
        }
    }
    let din = linear_backward(&cache.mlp_in, wts.fc1_w, &dhidden, grads.fc1_w, grads.fc1_b);
    for c in 0..x.c {
        let share = din[c] / plane as f64;
        dx.data[c * plane..(c + 1) * plane].iter_mut().for_each(|v| *v += share);
    }
    dx
}
