//! Shared helpers for integration tests: seeded tensors, f64 reference
//! kernels and central finite differences.
#![allow(dead_code)]

use attnmod::nn::{Rng, Tensor};

pub mod kernels;

pub fn randn(shape: &[usize], rng: &mut Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.normal())
}

/// `Σ w·y` accumulated in f64.
pub fn weighted_sum(w: &Tensor, y: &Tensor) -> f64 {
    assert_eq!(w.shape(), y.shape());
    w.data().iter().zip(y.data()).map(|(&a, &b)| a as f64 * b as f64).sum()
}

/// Relative error `‖a − b‖ / max(‖a‖, ‖b‖, tiny)`.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-12)
}

pub const FD_STEP: f64 = 1e-3;
pub const FD_TOLERANCE: f64 = 1e-2;

/// Central differences of `f` with respect to `indices` of a parameter that
/// `perturb` shifts in place. The objective is evaluated in f64.
pub fn finite_diff<M: Clone>(
    base: &M,
    indices: &[usize],
    perturb: impl Fn(&mut M, usize, f32),
    f: impl Fn(&M) -> f64,
) -> Vec<f64> {
    finite_diff_step(base, indices, FD_STEP as f32, perturb, f)
}

pub fn finite_diff_step<M: Clone>(
    base: &M,
    indices: &[usize],
    h: f32,
    perturb: impl Fn(&mut M, usize, f32),
    f: impl Fn(&M) -> f64,
) -> Vec<f64> {
    indices
        .iter()
        .map(|&i| {
            let mut plus = base.clone();
            perturb(&mut plus, i, h);
            let mut minus = base.clone();
            perturb(&mut minus, i, -h);
            (f(&plus) - f(&minus)) / (2.0 * h as f64)
        })
        .collect()
}

/// Up to `count` distinct indices below `len`, always including the ends.
pub fn sample_indices(len: usize, count: usize, rng: &mut Rng) -> Vec<usize> {
    if len <= count {
        return (0..len).collect();
    }
    let mut out = vec![0, len - 1];
    while out.len() < count {
        let i = rng.below(len as u32) as usize;
        if !out.contains(&i) {
            out.push(i);
        }
    }
    out
}

/// Checks `analytic` against finite differences at sampled indices.
pub fn assert_grad<M: Clone>(
    label: &str,
    base: &M,
    analytic: &Tensor,
    perturb: impl Fn(&mut M, usize, f32),
    f: impl Fn(&M) -> f64,
    rng: &mut Rng,
) {
    assert_grad_step(label, FD_STEP as f32, base, analytic, perturb, f, rng)
}

pub fn assert_grad_step<M: Clone>(
    label: &str,
    h: f32,
    base: &M,
    analytic: &Tensor,
    perturb: impl Fn(&mut M, usize, f32),
    f: impl Fn(&M) -> f64,
    rng: &mut Rng,
) {
    let idx = sample_indices(analytic.numel(), 24, rng);
    let numeric = finite_diff_step(base, &idx, h, perturb, f);
    let exact: Vec<f64> = idx.iter().map(|&i| analytic.data()[i] as f64).collect();
    let err = rel_err(&exact, &numeric);
    assert!(err < FD_TOLERANCE, "{label}: relative error {err:.3e}\nanalytic {exact:?}\nnumeric {numeric:?}");
}

/// Direct f64 3×3 convolution with zero padding 1.
pub fn conv2d_ref(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize) -> Vec<f64> {
    let (cin, h, wd) = (x.dim(0), x.dim(1), x.dim(2));
    let cout = w.dim(0);
    let (ho, wo) = ((h - 1) / stride + 1, (wd - 1) / stride + 1);
    let mut out = vec![0.0f64; cout * ho * wo];
    for o in 0..cout {
        for y in 0..ho {
            for xx in 0..wo {
                let mut acc = b.data()[o] as f64;
                for c in 0..cin {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let iy = (y * stride + ky) as isize - 1;
                            let ix = (xx * stride + kx) as isize - 1;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                continue;
                            }
                            let xv = x.data()[(c * h + iy as usize) * wd + ix as usize] as f64;
                            let wv = w.data()[((o * cin + c) * 3 + ky) * 3 + kx] as f64;
                            acc += xv * wv;
                        }
                    }
                }
                out[(o * ho + y) * wo + xx] = acc;
            }
        }
    }
    out
}

/// f64 group normalization with eps 1e-5.
pub fn group_norm_ref(x: &Tensor, groups: usize, gamma: &Tensor, beta: &Tensor) -> Vec<f64> {
    let c = x.dim(0);
    let spatial = x.numel() / c;
    let cpg = c / groups;
    let mut out = vec![0.0f64; x.numel()];
    for g in 0..groups {
        let range = g * cpg * spatial..(g + 1) * cpg * spatial;
        let vals: Vec<f64> = x.data()[range.clone()].iter().map(|&v| v as f64).collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        let inv = 1.0 / (var + 1e-5).sqrt();
        for (k, i) in range.enumerate() {
            let ch = i / spatial;
            out[i] = (vals[k] - mean) * inv * gamma.data()[ch] as f64 + beta.data()[ch] as f64;
        }
    }
    out
}

/// f64 multi-head attention on feature-major `[C×N]` inputs.
pub fn attention_ref(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> Vec<f64> {
    let (c, nq, nk) = (q.dim(0), q.dim(1), k.dim(1));
    let d = c / heads;
    let mut out = vec![0.0f64; c * nq];
    for h in 0..heads {
        for i in 0..nq {
            let mut scores: Vec<f64> = (0..nk)
                .map(|j| {
                    (0..d).map(|r| q.data()[(h * d + r) * nq + i] as f64 * k.data()[(h * d + r) * nk + j] as f64).sum::<f64>()
                        / (d as f64).sqrt()
                })
                .collect();
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            scores.iter_mut().for_each(|s| *s = (*s - max).exp());
            let z: f64 = scores.iter().sum();
            for r in 0..d {
                out[(h * d + r) * nq + i] =
                    (0..nk).map(|j| scores[j] / z * v.data()[(h * d + r) * nk + j] as f64).sum();
            }
        }
    }
    out
}

pub fn max_abs_diff(a: &[f32], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| (x as f64 - y).abs()).fold(0.0, f64::max)
}

/// `Σ w·y` for an f64 reference output.
pub fn weighted_sum_ref(w: &Tensor, y: &[f64]) -> f64 {
    assert_eq!(w.numel(), y.len());
    w.data().iter().zip(y).map(|(&a, &b)| a as f64 * b).sum()
}

/// f64 `W·x + b` on `[in × N]` columns.
pub fn linear_ref(w: &Tensor, b: Option<&Tensor>, x: &Tensor) -> Vec<f64> {
    let (out, inp, n) = (w.dim(0), w.dim(1), x.dim(1));
    let mut y = vec![0.0f64; out * n];
    for o in 0..out {
        for j in 0..n {
            let bias = b.map_or(0.0, |b| b.data()[o] as f64);
            y[o * n + j] = bias + (0..inp).map(|i| w.data()[o * inp + i] as f64 * x.data()[i * n + j] as f64).sum::<f64>();
        }
    }
    y
}

/// f64 layer normalization of each column of `[D × N]`, eps 1e-5.
pub fn layer_norm_columns_ref(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Vec<f64> {
    let (d, n) = (x.dim(0), x.dim(1));
    let mut y = vec![0.0f64; d * n];
    for j in 0..n {
        let col: Vec<f64> = (0..d).map(|i| x.data()[i * n + j] as f64).collect();
        let mean = col.iter().sum::<f64>() / d as f64;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + 1e-5).sqrt();
        for i in 0..d {
            y[i * n + j] = (col[i] - mean) * inv * gamma.data()[i] as f64 + beta.data()[i] as f64;
        }
    }
    y
}

pub fn silu_ref(x: &Tensor) -> Vec<f64> {
    x.data().iter().map(|&v| v as f64 / (1.0 + (-(v as f64)).exp())).collect()
}

/// Nearest-neighbour 2× upsampling of `[C × H × W]`.
pub fn upsample_ref(x: &Tensor) -> Vec<f64> {
    let (c, h, w) = (x.dim(0), x.dim(1), x.dim(2));
    let mut y = Vec::with_capacity(c * 4 * h * w);
    for ch in 0..c {
        for yy in 0..2 * h {
            for xx in 0..2 * w {
                y.push(x.data()[(ch * h + yy / 2) * w + xx / 2] as f64);
            }
        }
    }
    y
}

/// Softmax down each column of a row-major `[rows × cols]` matrix.
pub fn softmax_columns_ref(s: &Tensor) -> Vec<f64> {
    let (rows, cols) = (s.dim(0), s.dim(1));
    let mut p = vec![0.0f64; rows * cols];
    for j in 0..cols {
        let max = (0..rows).map(|r| s.data()[r * cols + j] as f64).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = (0..rows).map(|r| (s.data()[r * cols + j] as f64 - max).exp()).sum();
        for r in 0..rows {
            p[r * cols + j] = (s.data()[r * cols + j] as f64 - max).exp() / z;
        }
    }
    p
}
