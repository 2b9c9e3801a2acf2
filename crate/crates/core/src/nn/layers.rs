//! Layer kernels: forward and backward passes over a whole batch stored as a
//! flat row-major buffer.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Per-sample feature shape `(channels, height, width)`; dense features use
/// `(n, 1, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(c: usize, h: usize, w: usize) -> Self {
        Self { c, h, w }
    }

    pub const fn flat(n: usize) -> Self {
        Self { c: n, h: 1, w: 1 }
    }

    pub fn len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.c, self.h, self.w)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Elu,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Elu => {
                if x > 0.0 {
                    x
                } else {
                    x.exp_m1()
                }
            }
        }
    }

    /// Derivative at input `x`.
    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Elu => {
                if x > 0.0 {
                    1.0
                } else {
                    x.exp()
                }
            }
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "relu" => Ok(Activation::Relu),
            "elu" => Ok(Activation::Elu),
            _ => Err(format!("unknown activation `{s}`")),
        }
    }
}

/// Row-major `C = alpha * op(A) * op(B) + beta * C` with `op(A)` of shape
/// `m x k` and `op(B)` of shape `k x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above guarantee every index the kernel touches is
    // inside the slices; strides describe row-major (or transposed) layouts.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Unfold 3x3 valid patches of `input` (`s`) into a `(c*9) x (ho*wo)` matrix.
pub(crate) fn im2col(input: &[f64], s: Shape, cols: &mut [f64]) {
    let (ho, wo) = (s.h - 2, s.w - 2);
    let plane = ho * wo;
    for c in 0..s.c {
        let chan = &input[c * s.h * s.w..(c + 1) * s.h * s.w];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[(c * 9 + ky * 3 + kx) * plane..][..plane];
                for oy in 0..ho {
                    let src = &chan[(oy + ky) * s.w + kx..][..wo];
                    row[oy * wo..(oy + 1) * wo].copy_from_slice(src);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back into an input gradient.
pub(crate) fn col2im(cols: &[f64], s: Shape, grad: &mut [f64]) {
    let (ho, wo) = (s.h - 2, s.w - 2);
    let plane = ho * wo;
    for c in 0..s.c {
        let chan = &mut grad[c * s.h * s.w..(c + 1) * s.h * s.w];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[(c * 9 + ky * 3 + kx) * plane..][..plane];
                for oy in 0..ho {
                    let dst = &mut chan[(oy + ky) * s.w + kx..][..wo];
                    for (d, v) in dst.iter_mut().zip(&row[oy * wo..(oy + 1) * wo]) {
                        *d += v;
                    }
                }
            }
        }
    }
}

pub(crate) fn conv_forward(
    input: &[f64],
    batch: usize,
    s: Shape,
    filters: usize,
    weight: &[f64],
    bias: &[f64],
    out: &mut [f64],
) {
    let (ho, wo) = (s.h - 2, s.w - 2);
    let plane = ho * wo;
    let k = s.c * 9;
    let mut cols = vec![0.0; k * plane];
    for b in 0..batch {
        im2col(&input[b * s.len()..(b + 1) * s.len()], s, &mut cols);
        let o = &mut out[b * filters * plane..(b + 1) * filters * plane];
        for (f, chunk) in o.chunks_mut(plane).enumerate() {
            chunk.fill(bias[f]);
        }
        gemm(filters, k, plane, weight, false, &cols, false, 1.0, o);
    }
}

/// Accumulates into `gw`, `gb`; overwrites `gin` when given.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_backward(
    input: &[f64],
    batch: usize,
    s: Shape,
    filters: usize,
    weight: &[f64],
    gout: &[f64],
    gw: &mut [f64],
    gb: &mut [f64],
    mut gin: Option<&mut [f64]>,
) {
    let (ho, wo) = (s.h - 2, s.w - 2);
    let plane = ho * wo;
    let k = s.c * 9;
    let mut cols = vec![0.0; k * plane];
    if let Some(gin) = gin.as_deref_mut() {
        gin.fill(0.0);
    }
    for b in 0..batch {
        im2col(&input[b * s.len()..(b + 1) * s.len()], s, &mut cols);
        let go = &gout[b * filters * plane..(b + 1) * filters * plane];
        gemm(filters, plane, k, go, false, &cols, true, 1.0, gw);
        for (f, chunk) in go.chunks(plane).enumerate() {
            gb[f] += chunk.iter().sum::<f64>();
        }
        if let Some(gin) = gin.as_deref_mut() {
            gemm(k, filters, plane, weight, true, go, false, 0.0, &mut cols);
            col2im(&cols, s, &mut gin[b * s.len()..(b + 1) * s.len()]);
        }
    }
}

/// Reference 3x3 valid convolution by direct summation.
pub fn conv_direct(
    input: &[f64],
    batch: usize,
    s: Shape,
    filters: usize,
    weight: &[f64],
    bias: &[f64],
) -> Vec<f64> {
    let (ho, wo) = (s.h - 2, s.w - 2);
    let mut out = vec![0.0; batch * filters * ho * wo];
    for b in 0..batch {
        for f in 0..filters {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = bias[f];
                    for c in 0..s.c {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                acc += weight[f * s.c * 9 + c * 9 + ky * 3 + kx]
                                    * input[b * s.len() + c * s.h * s.w + (oy + ky) * s.w + ox + kx];
                            }
                        }
                    }
                    out[((b * filters + f) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    out
}

/// 2x2 stride-2 max pooling (floor); returns the arg-max flat index of each
/// output within its sample.
pub(crate) fn pool_forward(input: &[f64], batch: usize, s: Shape, out: &mut [f64]) -> Vec<u32> {
    let (ho, wo) = (s.h / 2, s.w / 2);
    let olen = s.c * ho * wo;
    let mut arg = vec![0u32; batch * olen];
    for b in 0..batch {
        let x = &input[b * s.len()..(b + 1) * s.len()];
        for c in 0..s.c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = f64::NEG_INFINITY;
                    let mut bi = 0usize;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let i = c * s.h * s.w + (2 * oy + dy) * s.w + 2 * ox + dx;
                            if x[i] > best {
                                best = x[i];
                                bi = i;
                            }
                        }
                    }
                    let o = b * olen + (c * ho + oy) * wo + ox;
                    out[o] = best;
                    arg[o] = bi as u32;
                }
            }
        }
    }
    arg
}

pub(crate) fn pool_backward(gout: &[f64], batch: usize, s: Shape, arg: &[u32], gin: &mut [f64]) {
    let olen = s.c * (s.h / 2) * (s.w / 2);
    gin.fill(0.0);
    for b in 0..batch {
        for o in 0..olen {
            gin[b * s.len() + arg[b * olen + o] as usize] += gout[b * olen + o];
        }
    }
}

pub(crate) fn dense_forward(
    input: &[f64],
    batch: usize,
    n_in: usize,
    n_out: usize,
    weight: &[f64],
    bias: &[f64],
    out: &mut [f64],
) {
    for row in out.chunks_mut(n_out) {
        row.copy_from_slice(bias);
    }
    gemm(batch, n_in, n_out, input, false, weight, true, 1.0, out);
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn dense_backward(
    input: &[f64],
    batch: usize,
    n_in: usize,
    n_out: usize,
    weight: &[f64],
    gout: &[f64],
    gw: &mut [f64],
    gb: &mut [f64],
    gin: Option<&mut [f64]>,
) {
    gemm(n_out, batch, n_in, gout, true, input, false, 1.0, gw);
    for row in gout.chunks(n_out) {
        for (g, v) in gb.iter_mut().zip(row) {
            *g += v;
        }
    }
    if let Some(gin) = gin {
        gemm(batch, n_out, n_in, gout, false, weight, false, 0.0, gin);
    }
}

/// Cached quantities of a training-mode batch-norm pass.
#[derive(Debug, Clone)]
pub(crate) struct BatchNormCache {
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
}

pub(crate) const BN_EPS: f64 = 1e-8;

/// Per-channel normalisation over batch and spatial axes.
#[allow(clippy::too_many_arguments)]
pub(crate) fn batchnorm_train(
    input: &[f64],
    batch: usize,
    s: Shape,
    gamma: &[f64],
    beta: &[f64],
    running_mean: &mut [f64],
    running_var: &mut [f64],
    momentum: f64,
    out: &mut [f64],
) -> BatchNormCache {
    let plane = s.h * s.w;
    let count = (batch * plane) as f64;
    let mut xhat = vec![0.0; input.len()];
    let mut inv_std = vec![0.0; s.c];
    for c in 0..s.c {
        let mut mean = 0.0;
        for b in 0..batch {
            mean += input[(b * s.c + c) * plane..][..plane].iter().sum::<f64>();
        }
        mean /= count;
        let mut var = 0.0;
        for b in 0..batch {
            var += input[(b * s.c + c) * plane..][..plane]
                .iter()
                .map(|x| (x - mean) * (x - mean))
                .sum::<f64>();
        }
        var /= count;
        let is = 1.0 / (var + BN_EPS).sqrt();
        inv_std[c] = is;
        for b in 0..batch {
            let off = (b * s.c + c) * plane;
            for i in off..off + plane {
                let xh = (input[i] - mean) * is;
                xhat[i] = xh;
                out[i] = gamma[c] * xh + beta[c];
            }
        }
        running_mean[c] = momentum * running_mean[c] + (1.0 - momentum) * mean;
        running_var[c] = momentum * running_var[c] + (1.0 - momentum) * var;
    }
    BatchNormCache { xhat, inv_std }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn batchnorm_infer(
    input: &[f64],
    batch: usize,
    s: Shape,
    gamma: &[f64],
    beta: &[f64],
    running_mean: &[f64],
    running_var: &[f64],
    out: &mut [f64],
) {
    let plane = s.h * s.w;
    for b in 0..batch {
        for c in 0..s.c {
            let is = 1.0 / (running_var[c] + BN_EPS).sqrt();
            let off = (b * s.c + c) * plane;
            for i in off..off + plane {
                out[i] = gamma[c] * (input[i] - running_mean[c]) * is + beta[c];
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn batchnorm_backward(
    cache: &BatchNormCache,
    batch: usize,
    s: Shape,
    gamma: &[f64],
    gout: &[f64],
    ggamma: &mut [f64],
    gbeta: &mut [f64],
    gin: &mut [f64],
) {
    let plane = s.h * s.w;
    let count = (batch * plane) as f64;
    for c in 0..s.c {
        let (mut sum_g, mut sum_gx) = (0.0, 0.0);
        for b in 0..batch {
            let off = (b * s.c + c) * plane;
            for i in off..off + plane {
                sum_g += gout[i];
                sum_gx += gout[i] * cache.xhat[i];
            }
        }
        ggamma[c] += sum_gx;
        gbeta[c] += sum_g;
        let k = gamma[c] * cache.inv_std[c] / count;
        for b in 0..batch {
            let off = (b * s.c + c) * plane;
            for i in off..off + plane {
                gin[i] = k * (count * gout[i] - sum_g - cache.xhat[i] * sum_gx);
            }
        }
    }
}

/// Inverted dropout: survivors are scaled by `1 / (1 - rate)`. Returns the
/// per-element multipliers.
pub(crate) fn dropout_mask(len: usize, rate: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let keep = 1.0 - rate;
    let scale = if keep > 0.0 { 1.0 / keep } else { 0.0 };
    (0..len)
        .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { scale })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn random(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn im2col_conv_matches_direct() {
        let s = Shape::new(3, 9, 7);
        let (batch, filters) = (2, 4);
        let x = random(batch * s.len(), 1);
        let w = random(filters * s.c * 9, 2);
        let bias = random(filters, 3);
        let mut out = vec![0.0; batch * filters * 7 * 5];
        conv_forward(&x, batch, s, filters, &w, &bias, &mut out);
        let reference = conv_direct(&x, batch, s, filters, &w, &bias);
        for (a, b) in out.iter().zip(&reference) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn pool_floors_odd_sizes() {
        let s = Shape::new(1, 5, 5);
        let x: Vec<f64> = (0..25).map(|v| v as f64).collect();
        let mut out = vec![0.0; 4];
        let arg = pool_forward(&x, 1, s, &mut out);
        assert_eq!(out, vec![6.0, 8.0, 16.0, 18.0]);
        assert_eq!(arg, vec![6, 8, 16, 18]);
    }

    #[test]
    fn dense_hand_case() {
        // W = [[1, 2], [3, 4], [5, 6]], b = [0.5, -1, 2], x = [1, -1]
        let w = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [0.5, -1.0, 2.0];
        let mut out = vec![0.0; 3];
        dense_forward(&[1.0, -1.0], 1, 2, 3, &w, &b, &mut out);
        assert_eq!(out, vec![-0.5, -2.0, 1.0]);
    }

    #[test]
    fn elu_is_smooth_at_zero() {
        assert_eq!(Activation::Elu.apply(0.0), 0.0);
        assert_eq!(Activation::Elu.derivative(-1e-12), (-1e-12f64).exp());
        assert!((Activation::Elu.apply(-1.0) - (-0.632_120_558_828_557_7)).abs() < 1e-15);
    }
}
