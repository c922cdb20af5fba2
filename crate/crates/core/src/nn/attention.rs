//! Multi-head scaled dot-product attention on feature-major tensors.
//!
//! Inputs are `[C×N]` with tokens along columns; head `h` owns channel rows
//! `h·d..(h+1)·d`. Scores are held transposed (`[Nk×Nq]`) so every inner
//! loop runs along the query axis. Per element this computes exactly
//! `softmax(q·k / √d) v` with ascending reductions.

use crate::error::{Error, Result};
use crate::nn::grad::{gemm_nt_acc, gemm_tn, softmax_columns_backward};
use crate::nn::ops::{gemm, softmax_columns};
use crate::nn::Tensor;

/// Softmax probabilities per head, each `[Nk×Nq]`.
#[derive(Debug, Clone)]
pub struct AttentionProbs {
    pub heads: Vec<Vec<f32>>,
}

fn head_dims(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> Result<(usize, usize, usize)> {
    let c = q.dim(0);
    if q.ndim() != 2 || k.ndim() != 2 || v.ndim() != 2 {
        return Err(Error::Shape("attention inputs must be 2-D".into()));
    }
    if k.dim(0) != c || v.dim(0) != c || k.dim(1) != v.dim(1) {
        return Err(Error::Shape(format!(
            "attention q{:?} k{:?} v{:?}",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    if heads == 0 || c % heads != 0 {
        return Err(Error::Shape(format!("{c} channels into {heads} heads")));
    }
    Ok((c / heads, q.dim(1), k.dim(1)))
}

fn transpose(src: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = src[r * cols + c];
        }
    }
    out
}

pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> Result<(Tensor, AttentionProbs)> {
    let (d, nq, nk) = head_dims(q, k, v, heads)?;
    let scale = 1.0 / (d as f32).sqrt();
    let mut out = vec![0.0f32; heads * d * nq];
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = &q.data()[h * d * nq..(h + 1) * d * nq];
        let kh = &k.data()[h * d * nk..(h + 1) * d * nk];
        let vh = &v.data()[h * d * nk..(h + 1) * d * nk];
        let kt = transpose(kh, d, nk);
        let mut scores = vec![0.0f32; nk * nq];
        gemm(&kt, qh, &mut scores, nk, d, nq);
        scores.iter_mut().for_each(|s| *s *= scale);
        softmax_columns(&mut scores, nk, nq);
        gemm(vh, &scores, &mut out[h * d * nq..(h + 1) * d * nq], d, nk, nq);
        probs.push(scores);
    }
    Ok((Tensor::new(&[heads * d, nq], out)?, AttentionProbs { heads: probs }))
}

/// Gradients `(dq, dk, dv)` of [`attention`].
pub fn attention_backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    heads: usize,
    probs: &AttentionProbs,
    dout: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (d, nq, nk) = head_dims(q, k, v, heads)?;
    let scale = 1.0 / (d as f32).sqrt();
    let mut dq = vec![0.0f32; heads * d * nq];
    let mut dk = vec![0.0f32; heads * d * nk];
    let mut dv = vec![0.0f32; heads * d * nk];
    for h in 0..heads {
        let p = &probs.heads[h];
        let qh = &q.data()[h * d * nq..(h + 1) * d * nq];
        let kh = &k.data()[h * d * nk..(h + 1) * d * nk];
        let vh = &v.data()[h * d * nk..(h + 1) * d * nk];
        let doh = &dout.data()[h * d * nq..(h + 1) * d * nq];
        gemm_nt_acc(doh, p, &mut dv[h * d * nk..(h + 1) * d * nk], d, nq, nk);
        let dp = gemm_tn(vh, doh, nk, d, nq);
        let mut ds = softmax_columns_backward(p, &dp, nk, nq);
        ds.iter_mut().for_each(|s| *s *= scale);
        gemm(kh, &ds, &mut dq[h * d * nq..(h + 1) * d * nq], d, nk, nq);
        gemm_nt_acc(qh, &ds, &mut dk[h * d * nk..(h + 1) * d * nk], d, nq, nk);
    }
    Ok((
        Tensor::new(q.shape(), dq)?,
        Tensor::new(k.shape(), dk)?,
        Tensor::new(v.shape(), dv)?,
    ))
}
