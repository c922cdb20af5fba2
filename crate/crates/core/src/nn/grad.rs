//! Backward kernels for the training path.
//!
//! Forward kernels reduce in strict ascending order. The reductions here
//! (weight gradients, norm statistics) use a fixed 8-lane blocked order
//! instead: still deterministic, but vectorizable.

use crate::nn::ops::{self, conv_out_size};
use crate::nn::simd::Lanes;
use crate::nn::Tensor;

const LANES: usize = crate::nn::simd::WIDTH;

/// Dot product with 8 interleaved partial sums, folded in lane order and
/// followed by the tail.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f32; LANES];
    let chunks = a.len() / LANES;
    for c in 0..chunks {
        let (xa, xb) = (&a[c * LANES..(c + 1) * LANES], &b[c * LANES..(c + 1) * LANES]);
        for l in 0..LANES {
            acc[l] += xa[l] * xb[l];
        }
    }
    let mut s = 0.0f32;
    for v in acc {
        s += v;
    }
    for i in chunks * LANES..a.len() {
        s += a[i] * b[i];
    }
    s
}

#[inline]
pub fn sum(a: &[f32]) -> f32 {
    let mut acc = [0.0f32; LANES];
    let chunks = a.len() / LANES;
    for c in 0..chunks {
        for l in 0..LANES {
            acc[l] += a[c * LANES + l];
        }
    }
    let mut s = 0.0f32;
    for v in acc {
        s += v;
    }
    for &v in &a[chunks * LANES..] {
        s += v;
    }
    s
}

lanes_kernel! {
/// `c[m×n] += a[m×k] · b[n×k]ᵀ`, each entry reduced as in [`dot`].
pub fn gemm_nt_acc = gemm_nt_acc_lanes(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize)
}

#[inline(always)]
fn gemm_nt_acc_lanes<L: Lanes>(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    let mut i = 0;
    while i + 2 <= m {
        let (c0, c1) = c[i * n..(i + 2) * n].split_at_mut(n);
        dot_block::<L, 2>([&a[i * k..(i + 1) * k], &a[(i + 1) * k..(i + 2) * k]], b, [c0, c1], k, n);
        i += 2;
    }
    if i < m {
        dot_block::<L, 1>([&a[i * k..(i + 1) * k]], b, [&mut c[i * n..(i + 1) * n]], k, n);
    }
}

/// `R` rows of `a` against every row of `b`, four `b` rows at a time.
#[inline(always)]
fn dot_block<L: Lanes, const R: usize>(a: [&[f32]; R], b: &[f32], c: [&mut [f32]; R], k: usize, n: usize) {
    const J: usize = 4;
    let full = k / LANES * LANES;
    let mut j = 0;
    while j + J <= n {
        let rows: [&[f32]; J] = std::array::from_fn(|t| &b[(j + t) * k..(j + t + 1) * k]);
        let mut acc = [[L::zero(); J]; R];
        let mut x = 0;
        while x < full {
            let xb: [L; J] = std::array::from_fn(|t| L::load(&rows[t][x..]));
            for r in 0..R {
                let xa = L::load(&a[r][x..]);
                for t in 0..J {
                    acc[r][t] = acc[r][t].mul_add(xa, xb[t]);
                }
            }
            x += LANES;
        }
        for r in 0..R {
            for t in 0..J {
                let mut s = acc[r][t].fold();
                for x in full..k {
                    s += a[r][x] * rows[t][x];
                }
                c[r][j + t] += s;
            }
        }
        j += J;
    }
    for jj in j..n {
        for r in 0..R {
            c[r][jj] += dot(a[r], &b[jj * k..(jj + 1) * k]);
        }
    }
}

/// `c[m×n] = a[k×m]ᵀ · b[k×n]`, accumulated over `k` in ascending order.
pub fn gemm_tn(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    let mut at = vec![0.0f32; m * k];
    for l in 0..k {
        for i in 0..m {
            at[i * k + l] = a[l * m + i];
        }
    }
    let mut c = vec![0.0f32; m * n];
    ops::gemm(&at, b, &mut c, m, k, n);
    c
}

/// Backward of [`ops::linear`]. Accumulates into `dw`/`db` and returns `dx`.
pub fn linear_backward(
    w: &Tensor,
    x: &Tensor,
    dy: &Tensor,
    dw: &mut Tensor,
    db: Option<&mut Tensor>,
) -> Tensor {
    let (out, inp, n) = (w.dim(0), w.dim(1), x.dim(1));
    gemm_nt_acc(dy.data(), x.data(), dw.data_mut(), out, n, inp);
    if let Some(db) = db {
        for (g, row) in db.data_mut().iter_mut().zip(dy.data().chunks(n)) {
            *g += sum(row);
        }
    }
    let dx = gemm_tn(w.data(), dy.data(), inp, out, n);
    Tensor::new(&[inp, n], dx).expect("linear_backward shape")
}

wide_kernel! {
/// Folds column gradients back onto the input image (adjoint of
/// [`ops::im2col`]).
pub fn col2im(dcols: &[f32], c: usize, h: usize, w: usize, stride: usize) -> Vec<f32> {
    let (ho, wo) = (conv_out_size(h, stride), conv_out_size(w, stride));
    let mut dx = vec![0.0f32; c * h * w];
    for ci in 0..c {
        let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (ci * 9 + ky * 3 + kx) * ho * wo;
                let src = &dcols[row..row + ho * wo];
                // valid ox satisfy 0 <= ox·stride + kx - 1 < w
                let lo = if kx == 0 { 1 } else { 0 };
                let hi = wo.min((w + 1 - kx).div_ceil(stride));
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let s = &src[oy * wo + lo..oy * wo + hi];
                    if stride == 1 {
                        for (d, v) in dst[lo + kx - 1..hi + kx - 1].iter_mut().zip(s) {
                            *d += v;
                        }
                    } else {
                        for (ox, v) in (lo..hi).zip(s) {
                            dst[ox * stride + kx - 1] += v;
                        }
                    }
                }
            }
        }
    }
    dx
}
}

/// Backward of [`ops::conv2d`] given the forward `im2col` columns.
pub fn conv2d_backward(
    cols: &[f32],
    x_shape: &[usize],
    w: &Tensor,
    dy: &Tensor,
    stride: usize,
    dw: &mut Tensor,
    db: &mut Tensor,
) -> Tensor {
    let (cin, h, wd) = (x_shape[0], x_shape[1], x_shape[2]);
    let cout = w.dim(0);
    let n = dy.numel() / cout;
    let k = cin * 9;
    gemm_nt_acc(dy.data(), cols, dw.data_mut(), cout, n, k);
    for (g, row) in db.data_mut().iter_mut().zip(dy.data().chunks(n)) {
        *g += sum(row);
    }
    let dcols = gemm_tn(w.data(), dy.data(), k, cout, n);
    Tensor::new(x_shape, col2im(&dcols, cin, h, wd, stride)).expect("conv2d_backward shape")
}

/// Backward of [`ops::group_norm`].
pub fn group_norm_backward(
    x: &Tensor,
    groups: usize,
    gamma: &Tensor,
    dy: &Tensor,
    dgamma: &mut Tensor,
    dbeta: &mut Tensor,
) -> Tensor {
    let c = x.dim(0);
    let spatial = x.numel() / c;
    let cpg = c / groups;
    let stats = ops::group_stats(x.data(), groups);
    let mut dx = vec![0.0f32; x.numel()];
    let per_group = cpg * spatial;
    let mut xhat = vec![0.0f32; per_group];
    let mut dxhat = vec![0.0f32; per_group];
    for g in 0..groups {
        let (mean, inv) = stats[g];
        let base = g * per_group;
        for local_c in 0..cpg {
            let ch = g * cpg + local_c;
            let gm = gamma.data()[ch];
            let xs = &x.data()[ch * spatial..(ch + 1) * spatial];
            let ds = &dy.data()[ch * spatial..(ch + 1) * spatial];
            let xh = &mut xhat[local_c * spatial..(local_c + 1) * spatial];
            let dxh = &mut dxhat[local_c * spatial..(local_c + 1) * spatial];
            for i in 0..spatial {
                xh[i] = (xs[i] - mean) * inv;
                dxh[i] = ds[i] * gm;
            }
            dgamma.data_mut()[ch] += dot(ds, xh);
            dbeta.data_mut()[ch] += sum(ds);
        }
        let n = per_group as f32;
        let mean_dxhat = sum(&dxhat) / n;
        let mean_dxhat_xhat = dot(&dxhat, &xhat) / n;
        for i in 0..per_group {
            dx[base + i] = inv * (dxhat[i] - mean_dxhat - xhat[i] * mean_dxhat_xhat);
        }
    }
    Tensor::new(x.shape(), dx).expect("group_norm_backward shape")
}

/// Backward of [`ops::layer_norm_columns`] on a feature-major `[d×n]` input.
pub fn layer_norm_columns_backward(
    x: &Tensor,
    gamma: &Tensor,
    dy: &Tensor,
    dgamma: &mut Tensor,
    dbeta: &mut Tensor,
) -> Tensor {
    let (d, n) = (x.dim(0), x.dim(1));
    let (mean, inv) = ops::column_stats(x.data(), d, n);
    let mut xhat = vec![0.0f32; d * n];
    let mut dxhat = vec![0.0f32; d * n];
    for r in 0..d {
        let g = gamma.data()[r];
        let xs = &x.data()[r * n..(r + 1) * n];
        let ds = &dy.data()[r * n..(r + 1) * n];
        for j in 0..n {
            xhat[r * n + j] = (xs[j] - mean[j]) * inv[j];
            dxhat[r * n + j] = ds[j] * g;
        }
        dgamma.data_mut()[r] += dot(ds, &xhat[r * n..(r + 1) * n]);
        dbeta.data_mut()[r] += sum(ds);
    }
    let mut m1 = vec![0.0f32; n];
    let mut m2 = vec![0.0f32; n];
    for r in 0..d {
        for j in 0..n {
            m1[j] += dxhat[r * n + j];
            m2[j] += dxhat[r * n + j] * xhat[r * n + j];
        }
    }
    let df = d as f32;
    let mut dx = vec![0.0f32; d * n];
    for r in 0..d {
        for j in 0..n {
            let i = r * n + j;
            dx[i] = inv[j] * (dxhat[i] - m1[j] / df - xhat[i] * m2[j] / df);
        }
    }
    Tensor::new(&[d, n], dx).expect("layer_norm_backward shape")
}

#[inline]
pub fn silu_grad(x: f32) -> f32 {
    let s = ops::sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

pub fn silu_backward(x: &Tensor, dy: &Tensor) -> Tensor {
    x.zip_map(dy, |xv, g| g * silu_grad(xv)).expect("silu_backward shape")
}

wide_kernel! {
/// Backward of [`ops::upsample_nearest2x`]: sums each 2×2 block.
pub fn upsample_nearest2x_backward(dy: &Tensor) -> Tensor {
    let (c, h2, w2) = (dy.dim(0), dy.dim(1), dy.dim(2));
    let (h, w) = (h2 / 2, w2 / 2);
    let mut dx = vec![0.0f32; c * h * w];
    for ch in 0..c {
        for y in 0..h2 {
            for x in 0..w2 {
                dx[(ch * h + y / 2) * w + x / 2] += dy.data()[(ch * h2 + y) * w2 + x];
            }
        }
    }
    Tensor::new(&[c, h, w], dx).expect("upsample backward shape")
}
}

wide_kernel! {
/// Backward of a column softmax given its output `p` and upstream `dp`
/// (both `[rows×cols]`, softmax taken down each column). Returns the
/// gradient with respect to the logits.
pub fn softmax_columns_backward(p: &[f32], dp: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    let mut inner = vec![0.0f32; cols];
    for r in 0..rows {
        let (pr, dr) = (&p[r * cols..(r + 1) * cols], &dp[r * cols..(r + 1) * cols]);
        for j in 0..cols {
            inner[j] += pr[j] * dr[j];
        }
    }
    let mut ds = vec![0.0f32; rows * cols];
    for r in 0..rows {
        for j in 0..cols {
            let i = r * cols + j;
            ds[i] = p[i] * (dp[i] - inner[j]);
        }
    }
    ds
}
}
