//! Forward kernels.
//!
//! Every reduction runs in a fixed order (ascending over the reduced index)
//! so results are bit-reproducible. Vectorization only ever happens across
//! independent output elements, never across a reduction.

use std::f32::consts::LOG2_E;

use crate::error::{Error, Result};
use crate::nn::simd::{Lanes, WIDTH};
use crate::nn::Tensor;

pub const NORM_EPS: f32 = 1e-5;

/// `c[m×n] = a[m×k] · b[k×n]` on raw row-major buffers. Each `c[i,j]` is
/// `((0 + a[i,0]b[0,j]) + a[i,1]b[1,j]) + …`, identical to the naive
/// triple loop.
pub fn gemm(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let mut i = 0;
    let mut packed = vec![0.0f32; k * 4];
    while i + 4 <= m {
        // Interleave four rows of `a` so the micro-kernel reads them with
        // one contiguous load per `l`.
        for l in 0..k {
            for r in 0..4 {
                packed[l * 4 + r] = a[(i + r) * k + l];
            }
        }
        gemm_rows_dispatch::<4>(&packed, b, &mut c[i * n..(i + 4) * n], k, n);
        i += 4;
    }
    while i < m {
        gemm_rows_dispatch::<1>(&a[i * k..(i + 1) * k], b, &mut c[i * n..(i + 1) * n], k, n);
        i += 1;
    }
}

/// Runs the micro-kernel with wider vector registers when the CPU has them.
/// The instruction stream performs the same separate multiplies and adds in
/// the same order either way (no fused multiply-add), so results match
/// bit-for-bit.
fn gemm_rows_dispatch<const R: usize>(a: &[f32], b: &[f32], c: &mut [f32], k: usize, n: usize) {
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("avx2") {
            // SAFETY: the required CPU feature was detected at runtime.
            unsafe { gemm_rows_avx2::<R>(a, b, c, k, n) };
            return;
        }
    }
    gemm_rows::<R>(a, b, c, k, n);
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn gemm_rows_avx2<const R: usize>(a: &[f32], b: &[f32], c: &mut [f32], k: usize, n: usize) {
    gemm_rows::<R>(a, b, c, k, n);
}

/// `R` output rows from row-interleaved `a` (`a[l·R + r]`). Register tiles
/// of `R×8` outputs each accumulate the full `k` range in ascending order.
#[inline(always)]
fn gemm_rows<const R: usize>(a: &[f32], b: &[f32], c: &mut [f32], k: usize, n: usize) {
    const W: usize = 8;
    let mut j = 0;
    while j + W <= n {
        let mut acc = [[0.0f32; W]; R];
        for (ap, b_row) in a.chunks_exact(R).zip(b.chunks_exact(n)).take(k) {
            let bt: &[f32; W] = b_row[j..j + W].try_into().unwrap();
            for r in 0..R {
                let av = ap[r];
                for x in 0..W {
                    acc[r][x] += av * bt[x];
                }
            }
        }
        for (r, row) in acc.iter().enumerate() {
            c[r * n + j..r * n + j + W].copy_from_slice(row);
        }
        j += W;
    }
    if j < n {
        for r in 0..R {
            for jj in j..n {
                let mut s = 0.0f32;
                for l in 0..k {
                    s += a[l * R + r] * b[l * n + jj];
                }
                c[r * n + jj] = s;
            }
        }
    }
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0) {
        return Err(Error::Shape(format!("matmul {:?} x {:?}", a.shape(), b.shape())));
    }
    let (m, k, n) = (a.dim(0), a.dim(1), b.dim(1));
    let mut out = vec![0.0; m * n];
    gemm(a.data(), b.data(), &mut out, m, k, n);
    Tensor::new(&[m, n], out)
}

/// Feature-major linear map: `y[out×n] = w[out×in] · x[in×n] (+ bias[out])`.
/// Columns of `x` are tokens or pixels.
pub fn linear(w: &Tensor, x: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let mut y = matmul(w, x)?;
    if let Some(b) = bias {
        b.expect_shape(&[w.dim(0)], "linear bias")?;
        let n = x.dim(1);
        for (row, &bv) in y.data_mut().chunks_mut(n).zip(b.data()) {
            row.iter_mut().for_each(|v| *v += bv);
        }
    }
    Ok(y)
}

/// `exp` from basic IEEE operations only (Cephes `expf` polynomial, about
/// 1 ulp), so results do not depend on the platform's libm. Branch-free so
/// it vectorizes.
#[inline]
pub fn exp(x: f32) -> f32 {
    let x = if x < EXP_LO { EXP_LO } else { x };
    let x = if x > EXP_HI { EXP_HI } else { x };
    let z = x * LOG2_E + EXP_ROUND;
    let n = z - EXP_ROUND;
    let r = x - n * LN2_HI - n * LN2_LO;
    let mut p = EXP_POLY[0];
    for &k in &EXP_POLY[1..] {
        p = p * r + k;
    }
    let y = p * (r * r) + r + 1.0;
    y * f32::from_bits(((z.to_bits() as i32).wrapping_sub(EXP_BIAS) as u32) << 23)
}

const EXP_LO: f32 = -87.336_54;
const EXP_HI: f32 = 88.722_83;
// 1.5·2^23: adding it rounds to an integer held in the low mantissa bits.
const EXP_ROUND: f32 = 12_582_912.0;
const LN2_HI: f32 = 0.693_359_4;
const LN2_LO: f32 = -2.121_944_4e-4;
const EXP_POLY: [f32; 6] = [1.987_569_1e-4, 1.398_199_9e-3, 8.333_452e-3, 4.166_579_6e-2, 1.666_666_5e-1, 0.5];
const EXP_BIAS: i32 = 0x4B40_0000 - 127;

/// [`exp`] on eight lanes at once, with the same operations per lane.
#[inline(always)]
pub(crate) fn exp_lanes<L: Lanes>(x: L) -> L {
    let c = L::splat;
    let round = c(EXP_ROUND);
    let x = x.floor_at(c(EXP_LO)).cap_at(c(EXP_HI));
    let z = x.mul(c(LOG2_E)).add(round);
    let n = z.sub(round);
    let r = x.sub(n.mul(c(LN2_HI))).sub(n.mul(c(LN2_LO)));
    let mut p = c(EXP_POLY[0]);
    for &k in &EXP_POLY[1..] {
        p = p.mul(r).add(c(k));
    }
    let y = p.mul(r.mul(r)).add(r).add(c(1.0));
    y.mul(z.shifted_exponent(EXP_BIAS))
}

#[inline]
pub fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + exp(-x))
}

#[inline]
pub fn silu_scalar(x: f32) -> f32 {
    x * sigmoid(x)
}

lanes_kernel! {
pub fn silu = silu_lanes(x: &Tensor) -> Tensor
}

#[inline(always)]
fn silu_lanes<L: Lanes>(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    let data = out.data_mut();
    let full = data.len() / WIDTH * WIDTH;
    for j in (0..full).step_by(WIDTH) {
        let v = L::load(&data[j..]);
        let sig = L::splat(1.0).div(L::splat(1.0).add(exp_lanes(L::zero().sub(v))));
        v.mul(sig).store(&mut data[j..]);
    }
    for v in &mut data[full..] {
        *v = silu_scalar(*v);
    }
    out
}

/// Softmax over the last dimension: subtract the row max, exponentiate,
/// multiply by the reciprocal of the ascending row sum.
pub fn softmax_lastdim(x: &Tensor) -> Tensor {
    let cols = *x.shape().last().unwrap();
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(cols) {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f32;
        for v in row.iter_mut() {
            *v = exp(*v - max);
            sum += *v;
        }
        let inv = 1.0 / sum;
        row.iter_mut().for_each(|v| *v *= inv);
    }
    out
}

lanes_kernel! {
/// Softmax down each column of a row-major `[rows×cols]` buffer. Performs
/// exactly the per-element operations of [`softmax_lastdim`] on the
/// transpose, so the two agree bit-for-bit.
pub fn softmax_columns = softmax_columns_lanes(s: &mut [f32], rows: usize, cols: usize)
}

#[inline(always)]
fn softmax_columns_lanes<L: Lanes>(s: &mut [f32], rows: usize, cols: usize) {
    debug_assert_eq!(s.len(), rows * cols);
    let mut max = vec![f32::NEG_INFINITY; cols];
    for r in 0..rows {
        for (m, &v) in max.iter_mut().zip(&s[r * cols..(r + 1) * cols]) {
            *m = m.max(v);
        }
    }
    let full = cols / WIDTH * WIDTH;
    let mut sum = vec![0.0f32; cols];
    for r in 0..rows {
        let row = &mut s[r * cols..(r + 1) * cols];
        for j in (0..full).step_by(WIDTH) {
            let v = exp_lanes(L::load(&row[j..]).sub(L::load(&max[j..])));
            v.store(&mut row[j..]);
            L::load(&sum[j..]).add(v).store(&mut sum[j..]);
        }
        for j in full..cols {
            row[j] = exp(row[j] - max[j]);
            sum[j] += row[j];
        }
    }
    let inv: Vec<f32> = sum.iter().map(|&acc| 1.0 / acc).collect();
    for r in 0..rows {
        for (v, &k) in s[r * cols..(r + 1) * cols].iter_mut().zip(&inv) {
            *v *= k;
        }
    }
}

/// Output spatial size for a padding-1, 3×3 convolution.
pub fn conv_out_size(size: usize, stride: usize) -> usize {
    size.div_ceil(stride)
}

wide_kernel! {
/// Unfolds `x[C×H×W]` into `[C·9 × Ho·Wo]` columns (padding 1).
pub fn im2col(x: &[f32], c: usize, h: usize, w: usize, stride: usize) -> Vec<f32> {
    let (ho, wo) = (conv_out_size(h, stride), conv_out_size(w, stride));
    let mut cols = vec![0.0f32; c * 9 * ho * wo];
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (ci * 9 + ky * 3 + kx) * ho * wo;
                let dst = &mut cols[row..row + ho * wo];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let out = &mut dst[oy * wo..(oy + 1) * wo];
                    if stride == 1 {
                        // ix = ox + kx - 1
                        let lo = if kx == 0 { 1 } else { 0 };
                        let hi = if kx == 2 { wo - 1 } else { wo };
                        out[lo..hi].copy_from_slice(&src[lo + kx - 1..hi + kx - 1]);
                    } else {
                        for (ox, o) in out.iter_mut().enumerate() {
                            let ix = (ox * stride + kx) as isize - 1;
                            if ix >= 0 && ix < w as isize {
                                *o = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}
}

/// 3×3 cross-correlation with padding 1. Each output sums
/// `w[co,ci,ky,kx]·x[ci,·,·]` in ascending `(ci, ky, kx)` order, then adds
/// the bias.
pub fn conv2d(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize) -> Result<Tensor> {
    let cols = conv2d_cols(x, w, stride)?;
    conv2d_from_cols(&cols, x, w, b, stride)
}

pub(crate) fn conv2d_cols(x: &Tensor, w: &Tensor, stride: usize) -> Result<Vec<f32>> {
    if stride != 1 && stride != 2 {
        return Err(Error::InvalidArgument(format!("conv stride {stride}")));
    }
    if x.ndim() != 3 || w.ndim() != 4 || w.dim(1) != x.dim(0) || w.dim(2) != 3 || w.dim(3) != 3 {
        return Err(Error::Shape(format!("conv2d x{:?} w{:?}", x.shape(), w.shape())));
    }
    Ok(im2col(x.data(), x.dim(0), x.dim(1), x.dim(2), stride))
}

pub(crate) fn conv2d_from_cols(
    cols: &[f32],
    x: &Tensor,
    w: &Tensor,
    b: &Tensor,
    stride: usize,
) -> Result<Tensor> {
    let (cin, h, wd) = (x.dim(0), x.dim(1), x.dim(2));
    let cout = w.dim(0);
    b.expect_shape(&[cout], "conv2d bias")?;
    let (ho, wo) = (conv_out_size(h, stride), conv_out_size(wd, stride));
    let n = ho * wo;
    let mut out = vec![0.0f32; cout * n];
    gemm(w.data(), cols, &mut out, cout, cin * 9, n);
    for (row, &bv) in out.chunks_mut(n).zip(b.data()) {
        row.iter_mut().for_each(|v| *v += bv);
    }
    Tensor::new(&[cout, ho, wo], out)
}

/// Per-group statistics of a `[C × …]` tensor: `(mean, 1/sqrt(var + eps))`.
pub(crate) fn group_stats(x: &[f32], groups: usize) -> Vec<(f32, f32)> {
    let per_group = x.len() / groups;
    x.chunks(per_group)
        .map(|g| {
            let n = g.len() as f32;
            let mut sum = 0.0f32;
            for &v in g {
                sum += v;
            }
            let mean = sum / n;
            let mut sq = 0.0f32;
            for &v in g {
                let d = v - mean;
                sq += d * d;
            }
            let var = sq / n;
            (mean, 1.0 / (var + NORM_EPS).sqrt())
        })
        .collect()
}

/// Group normalization over a `[C × …]` tensor (channels first).
pub fn group_norm(x: &Tensor, groups: usize, gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
    let c = x.dim(0);
    if groups == 0 || c % groups != 0 {
        return Err(Error::Shape(format!("{c} channels into {groups} groups")));
    }
    gamma.expect_shape(&[c], "group_norm gamma")?;
    beta.expect_shape(&[c], "group_norm beta")?;
    let spatial = x.numel() / c;
    let stats = group_stats(x.data(), groups);
    let cpg = c / groups;
    let mut out = x.clone();
    for (ch, plane) in out.data_mut().chunks_mut(spatial).enumerate() {
        let (mean, inv) = stats[ch / cpg];
        let (g, b) = (gamma.data()[ch], beta.data()[ch]);
        for v in plane.iter_mut() {
            *v = (*v - mean) * inv * g + b;
        }
    }
    Ok(out)
}

/// Layer normalization over the last dimension of `x[n×d]`.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
    let d = *x.shape().last().unwrap();
    gamma.expect_shape(&[d], "layer_norm gamma")?;
    beta.expect_shape(&[d], "layer_norm beta")?;
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(d) {
        let mut sum = 0.0f32;
        for &v in row.iter() {
            sum += v;
        }
        let mean = sum / d as f32;
        let mut sq = 0.0f32;
        for &v in row.iter() {
            let dv = v - mean;
            sq += dv * dv;
        }
        let inv = 1.0 / (sq / d as f32 + NORM_EPS).sqrt();
        for (v, (&g, &b)) in row.iter_mut().zip(gamma.data().iter().zip(beta.data())) {
            *v = (*v - mean) * inv * g + b;
        }
    }
    Ok(out)
}

/// Per-token statistics of a feature-major `[d×n]` buffer, reducing over
/// `d` in ascending order: `(mean[n], inv_std[n])`.
pub(crate) fn column_stats(x: &[f32], d: usize, n: usize) -> (Vec<f32>, Vec<f32>) {
    let mut mean = vec![0.0f32; n];
    for r in 0..d {
        for (m, &v) in mean.iter_mut().zip(&x[r * n..(r + 1) * n]) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= d as f32);
    let mut sq = vec![0.0f32; n];
    for r in 0..d {
        for ((s, &v), &m) in sq.iter_mut().zip(&x[r * n..(r + 1) * n]).zip(&mean) {
            let dv = v - m;
            *s += dv * dv;
        }
    }
    let inv = sq.iter().map(|&s| 1.0 / (s / d as f32 + NORM_EPS).sqrt()).collect();
    (mean, inv)
}

/// [`layer_norm`] applied to each column of a feature-major `x[d×n]`.
/// Bit-identical to transposing, normalizing, and transposing back.
pub fn layer_norm_columns(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
    let (d, n) = (x.dim(0), x.dim(1));
    gamma.expect_shape(&[d], "layer_norm gamma")?;
    beta.expect_shape(&[d], "layer_norm beta")?;
    let (mean, inv) = column_stats(x.data(), d, n);
    let mut out = x.clone();
    for (r, row) in out.data_mut().chunks_mut(n).enumerate() {
        let (g, b) = (gamma.data()[r], beta.data()[r]);
        for ((v, &m), &s) in row.iter_mut().zip(&mean).zip(&inv) {
            *v = (*v - m) * s * g + b;
        }
    }
    Ok(out)
}

/// Nearest-neighbour ×2 upsampling of `x[C×H×W]`.
pub fn upsample_nearest2x(x: &Tensor) -> Result<Tensor> {
    if x.ndim() != 3 {
        return Err(Error::Shape(format!("upsample of {:?}", x.shape())));
    }
    let (c, h, w) = (x.dim(0), x.dim(1), x.dim(2));
    let mut out = vec![0.0f32; c * 4 * h * w];
    for ch in 0..c {
        for y in 0..2 * h {
            for xx in 0..2 * w {
                out[(ch * 2 * h + y) * 2 * w + xx] = x.data()[(ch * h + y / 2) * w + xx / 2];
            }
        }
    }
    Tensor::new(&[c, 2 * h, 2 * w], out)
}
