//! Finite-difference checks for every backward kernel, one random instance
//! per seed. Each check panics on failure.
//!
//! Primitive kernels difference an f64 reference forward at `FD_STEP`, after
//! checking the f32 forward against that reference. Composite layers have no
//! reference and difference their own f32 forward at `COMPOSITE_STEP`.

use attnmod::nn::attention::{attention, attention_backward};
use attnmod::nn::{grad, ops, Rng, Tensor};
use attnmod::unet::layers::{Attention, Conv2d, GroupNorm, LayerNorm, Linear, Module, ResBlock, SpatialTransformer, TimeEmbedding};
use attnmod::unet::{list_attention_blocks, AttentionHook, Probe, UNetConfig};

use super::*;

pub const INSTANCES: u64 = 20;

/// f32 rounding through a layer stack is ~1e-7 relative; at this step it
/// stays well under tolerance while truncation error remains ~1e-4.
pub const COMPOSITE_STEP: f32 = 1e-2;

pub fn bump(t: &mut Tensor, i: usize, d: f32) {
    t.data_mut()[i] += d;
}

fn bump_named<M: Module>(m: &mut M, name: &str, i: usize, d: f32) {
    let mut hit = false;
    m.visit_mut("", &mut |n, t| {
        if n == name {
            bump(t, i, d);
            hit = true;
        }
    });
    assert!(hit, "no parameter {name}");
}

fn zeroed<M: Module + Clone>(m: &M) -> M {
    let mut z = m.clone();
    z.visit_mut("", &mut |_, t| t.fill(0.0));
    z
}

fn named_grads<M: Module>(m: &M) -> Vec<(String, Tensor)> {
    let mut out = Vec::new();
    m.visit("", &mut |n, t| out.push((n, t.clone())));
    out
}

/// Every parameter of a layer against finite differences of `f`.
fn check_params<M: Module + Clone>(label: &str, layer: &M, grads: &M, f: impl Fn(&M) -> f64, rng: &mut Rng) {
    check_params_step(label, FD_STEP as f32, layer, grads, f, rng);
}

fn check_params_step<M: Module + Clone>(label: &str, h: f32, layer: &M, grads: &M, f: impl Fn(&M) -> f64, rng: &mut Rng) {
    for (name, g) in named_grads(grads) {
        assert_grad_step(&format!("{label}.{name}"), h, layer, &g, |m, i, d| bump_named(m, &name, i, d), &f, rng);
    }
}

fn dim(rng: &mut Rng, lo: usize, hi: usize) -> usize {
    lo + rng.below((hi - lo + 1) as u32) as usize
}

fn randomize<M: Module>(layer: &mut M, rng: &mut Rng, pick: impl Fn(&str) -> bool) {
    layer.visit_mut("", &mut |n, t| {
        if pick(&n) {
            *t = randn(t.shape(), rng).scale(0.5);
        }
    });
}

pub fn linear(seed: u64) {
    let mut rng = Rng::derive(seed, 101);
    let (out, inp, n) = (dim(&mut rng, 2, 7), dim(&mut rng, 2, 7), dim(&mut rng, 1, 4));
    let layer = Linear::init(out, inp, seed % 2 == 0, &mut rng);
    let x = randn(&[inp, n], &mut rng);
    let w = randn(&[out, n], &mut rng);
    assert!(max_abs_diff(layer.forward(&x).unwrap().data(), &linear_ref(&layer.weight, layer.bias.as_ref(), &x)) < 1e-5);
    let mut g = zeroed(&layer);
    let dx = layer.backward(&x, &w, &mut g);
    let f = |l: &Linear, x: &Tensor| weighted_sum_ref(&w, &linear_ref(&l.weight, l.bias.as_ref(), x));
    check_params("linear", &layer, &g, |l| f(l, &x), &mut rng);
    assert_grad("linear.x", &x, &dx, bump, |x| f(&layer, x), &mut rng);
}

pub fn conv2d(seed: u64) {
    let mut rng = Rng::derive(seed, 102);
    let stride = 1 + (seed % 2) as usize;
    let (cout, cin) = (dim(&mut rng, 2, 5), dim(&mut rng, 1, 4));
    let (h, wd) = (dim(&mut rng, 3, 6), dim(&mut rng, 3, 6));
    let mut layer = Conv2d::init(cout, cin, stride, 1.0, &mut rng);
    layer.bias = randn(layer.bias.shape(), &mut rng);
    let x = randn(&[cin, h, wd], &mut rng);
    let (y, cache) = layer.forward(&x).unwrap();
    assert!(max_abs_diff(y.data(), &conv2d_ref(&x, &layer.weight, &layer.bias, stride)) < 1e-4);
    let w = randn(y.shape(), &mut rng);
    let mut g = zeroed(&layer);
    let dx = layer.backward(&cache, &w, &mut g);
    let f = |l: &Conv2d, x: &Tensor| weighted_sum_ref(&w, &conv2d_ref(x, &l.weight, &l.bias, stride));
    check_params(&format!("conv{stride}"), &layer, &g, |l| f(l, &x), &mut rng);
    assert_grad("conv.x", &x, &dx, bump, |x| f(&layer, x), &mut rng);
}

pub fn group_norm(seed: u64) {
    let mut rng = Rng::derive(seed, 103);
    let groups = dim(&mut rng, 1, 3);
    let c = groups * dim(&mut rng, 1, 3);
    let mut layer = GroupNorm::init(c, groups);
    layer.weight = randn(&[c], &mut rng);
    layer.bias = randn(&[c], &mut rng);
    let x = randn(&[c, dim(&mut rng, 2, 4), 3], &mut rng).scale(2.0);
    let y = layer.forward(&x).unwrap();
    assert!(max_abs_diff(y.data(), &group_norm_ref(&x, groups, &layer.weight, &layer.bias)) < 1e-4);
    let w = randn(y.shape(), &mut rng);
    let mut g = zeroed(&layer);
    let dx = layer.backward(&x, &w, &mut g);
    let f = |l: &GroupNorm, x: &Tensor| weighted_sum_ref(&w, &group_norm_ref(x, groups, &l.weight, &l.bias));
    check_params("group_norm", &layer, &g, |l| f(l, &x), &mut rng);
    assert_grad("group_norm.x", &x, &dx, bump, |x| f(&layer, x), &mut rng);
}

pub fn layer_norm(seed: u64) {
    let mut rng = Rng::derive(seed, 104);
    let (c, n) = (dim(&mut rng, 4, 9), dim(&mut rng, 1, 5));
    let mut layer = LayerNorm::init(c);
    layer.weight = randn(&[c], &mut rng);
    layer.bias = randn(&[c], &mut rng);
    let x = randn(&[c, n], &mut rng);
    let w = randn(&[c, n], &mut rng);
    let f = |l: &LayerNorm, x: &Tensor| weighted_sum_ref(&w, &layer_norm_columns_ref(x, &l.weight, &l.bias));
    assert!(max_abs_diff(layer.forward(&x).unwrap().data(), &layer_norm_columns_ref(&x, &layer.weight, &layer.bias)) < 1e-4);
    let mut g = zeroed(&layer);
    let dx = layer.backward(&x, &w, &mut g);
    check_params("layer_norm", &layer, &g, |l| f(l, &x), &mut rng);
    assert_grad("layer_norm.x", &x, &dx, bump, |x| f(&layer, x), &mut rng);
}

pub fn silu(seed: u64) {
    let mut rng = Rng::derive(seed, 105);
    let x = randn(&[3, dim(&mut rng, 2, 5), 4], &mut rng).scale(3.0);
    let w = randn(x.shape(), &mut rng);
    let dx = grad::silu_backward(&x, &w);
    assert!(max_abs_diff(ops::silu(&x).data(), &silu_ref(&x)) < 1e-5);
    assert_grad("silu", &x, &dx, bump, |x| weighted_sum_ref(&w, &silu_ref(x)), &mut rng);
}

pub fn upsample(seed: u64) {
    let mut rng = Rng::derive(seed, 106);
    let (c, h, wd) = (dim(&mut rng, 1, 3), dim(&mut rng, 1, 4), dim(&mut rng, 1, 4));
    let x = randn(&[c, h, wd], &mut rng);
    let w = randn(&[c, 2 * h, 2 * wd], &mut rng);
    let dx = grad::upsample_nearest2x_backward(&w);
    assert!(max_abs_diff(ops::upsample_nearest2x(&x).unwrap().data(), &upsample_ref(&x)) == 0.0);
    assert_grad("upsample", &x, &dx, bump, |x| weighted_sum_ref(&w, &upsample_ref(x)), &mut rng);
}

pub fn softmax(seed: u64) {
    let mut rng = Rng::derive(seed, 107);
    let (rows, cols) = (dim(&mut rng, 2, 6), dim(&mut rng, 1, 4));
    let s = randn(&[rows, cols], &mut rng).scale(2.0);
    let w = randn(&[rows, cols], &mut rng);
    let softmax = |s: &Tensor| {
        let mut p = s.data().to_vec();
        ops::softmax_columns(&mut p, rows, cols);
        Tensor::new(&[rows, cols], p).unwrap()
    };
    let ds = Tensor::new(&[rows, cols], grad::softmax_columns_backward(softmax(&s).data(), w.data(), rows, cols)).unwrap();
    assert!(max_abs_diff(softmax(&s).data(), &softmax_columns_ref(&s)) < 1e-6);
    assert_grad("softmax", &s, &ds, bump, |s| weighted_sum_ref(&w, &softmax_columns_ref(s)), &mut rng);
}

pub fn attention_kernel(seed: u64) {
    let mut rng = Rng::derive(seed, 108);
    let heads = dim(&mut rng, 1, 2);
    let c = heads * dim(&mut rng, 2, 4);
    let (nq, nk) = (dim(&mut rng, 1, 6), dim(&mut rng, 1, 5));
    let q = randn(&[c, nq], &mut rng);
    let k = randn(&[c, nk], &mut rng);
    let v = randn(&[c, nk], &mut rng);
    let (out, probs) = attention(&q, &k, &v, heads).unwrap();
    assert!(max_abs_diff(out.data(), &attention_ref(&q, &k, &v, heads)) < 1e-5);
    let w = randn(out.shape(), &mut rng);
    let (dq, dk, dv) = attention_backward(&q, &k, &v, heads, &probs, &w).unwrap();
    let f = |qkv: &(Tensor, Tensor, Tensor)| weighted_sum_ref(&w, &attention_ref(&qkv.0, &qkv.1, &qkv.2, heads));
    let base = (q, k, v);
    assert_grad("attn.q", &base, &dq, |m, i, d| bump(&mut m.0, i, d), f, &mut rng);
    assert_grad("attn.k", &base, &dk, |m, i, d| bump(&mut m.1, i, d), f, &mut rng);
    assert_grad("attn.v", &base, &dv, |m, i, d| bump(&mut m.2, i, d), f, &mut rng);
}

/// Includes the multiplier: none, negative, zero and a large positive value.
pub fn attention_layer(seed: u64) {
    let config = UNetConfig::default();
    let address = list_attention_blocks(&config)[0];
    let m = [None, Some(-2.5f32), Some(0.0), Some(7.0)][(seed % 4) as usize];
    let mut rng = Rng::derive(seed, 109);
    let mut layer = Attention::init(8, 6, 2, address, &mut rng);
    layer.to_out.bias = Some(randn(&[8], &mut rng));
    let x = randn(&[8, dim(&mut rng, 1, 6)], &mut rng);
    let src = randn(&[6, dim(&mut rng, 1, 4)], &mut rng);
    let (y, cache) = layer.forward(&x, &src, m).unwrap();
    let w = randn(y.shape(), &mut rng);
    let mut g = zeroed(&layer);
    let (dx, dsrc) = layer.backward(&x, &cache, &w, &mut g);
    let f = |l: &Attention| weighted_sum(&w, &l.forward(&x, &src, m).unwrap().0);
    check_params_step("attention", COMPOSITE_STEP, &layer, &g, f, &mut rng);
    let base = (x.clone(), src.clone());
    let f = |xs: &(Tensor, Tensor)| weighted_sum(&w, &layer.forward(&xs.0, &xs.1, m).unwrap().0);
    assert_grad_step("attention.x", COMPOSITE_STEP, &base, &dx, |b, i, d| bump(&mut b.0, i, d), f, &mut rng);
    assert_grad_step("attention.source", COMPOSITE_STEP, &base, &dsrc, |b, i, d| bump(&mut b.1, i, d), f, &mut rng);
}

/// Alternates between a 1×1 shortcut and the identity skip.
pub fn resblock(seed: u64) {
    let (inp, out) = if seed % 2 == 0 { (4, 8) } else { (8, 8) };
    let mut rng = Rng::derive(seed, 110);
    let mut layer = ResBlock::init(inp, out, 6, 2, &mut rng);
    randomize(&mut layer, &mut rng, |n| n.ends_with("bias") || n.starts_with("norm"));
    let x = randn(&[inp, dim(&mut rng, 2, 4), 4], &mut rng);
    let temb = randn(&[6, 1], &mut rng);
    let (y, cache) = layer.forward(&x, &temb).unwrap();
    let w = randn(y.shape(), &mut rng);
    let mut g = zeroed(&layer);
    let mut dtemb = Tensor::zeros(&[6, 1]);
    let dx = layer.backward(&cache, &w, &temb, &mut dtemb, &mut g);
    let f = |l: &ResBlock| weighted_sum(&w, &l.forward(&x, &temb).unwrap().0);
    check_params_step("resblock", COMPOSITE_STEP, &layer, &g, f, &mut rng);
    let base = (x.clone(), temb.clone());
    let f = |b: &(Tensor, Tensor)| weighted_sum(&w, &layer.forward(&b.0, &b.1).unwrap().0);
    assert_grad_step("resblock.x", COMPOSITE_STEP, &base, &dx, |b, i, d| bump(&mut b.0, i, d), f, &mut rng);
    assert_grad_step("resblock.temb", COMPOSITE_STEP, &base, &dtemb, |b, i, d| bump(&mut b.1, i, d), f, &mut rng);
}

pub fn spatial_transformer(seed: u64) {
    let config = UNetConfig::default();
    let blocks = list_attention_blocks(&config);
    let mut rng = Rng::derive(seed, 111);
    let mut layer = SpatialTransformer::init(8, 6, 2, 2, 2, blocks[0], blocks[1], &mut rng);
    randomize(&mut layer, &mut rng, |n| n.ends_with("bias") || n.contains("norm"));
    let hook = AttentionHook::new().with(blocks[0], 1.7).with(blocks[1], -0.6);
    let x = randn(&[8, dim(&mut rng, 2, 3), 3], &mut rng);
    let ctx = randn(&[6, 4], &mut rng);
    let run = |l: &SpatialTransformer, x: &Tensor, c: &Tensor| l.forward(x, c, &hook, &mut Probe::default()).unwrap();
    let (y, cache) = run(&layer, &x, &ctx);
    let w = randn(y.shape(), &mut rng);
    let mut g = zeroed(&layer);
    let mut dctx = Tensor::zeros(ctx.shape());
    let dx = layer.backward(&cache, &w, &mut dctx, &mut g);
    check_params_step("transformer", COMPOSITE_STEP, &layer, &g, |l| weighted_sum(&w, &run(l, &x, &ctx).0), &mut rng);
    let base = (x.clone(), ctx.clone());
    let f = |b: &(Tensor, Tensor)| weighted_sum(&w, &run(&layer, &b.0, &b.1).0);
    assert_grad_step("transformer.x", COMPOSITE_STEP, &base, &dx, |b, i, d| bump(&mut b.0, i, d), f, &mut rng);
    assert_grad_step("transformer.context", COMPOSITE_STEP, &base, &dctx, |b, i, d| bump(&mut b.1, i, d), f, &mut rng);
}

pub fn time_embedding(seed: u64) {
    let mut rng = Rng::derive(seed, 112);
    let layer = TimeEmbedding::init(8, 6, &mut rng);
    let t = rng.below(1000) as usize;
    let (y, cache) = layer.forward(t).unwrap();
    let w = randn(y.shape(), &mut rng);
    let mut g = zeroed(&layer);
    layer.backward(&cache, &w, &mut g);
    check_params_step("time", COMPOSITE_STEP, &layer, &g, |l| weighted_sum(&w, &l.forward(t).unwrap().0), &mut rng);
}

pub const KERNELS: [(&str, fn(u64)); 12] = [
    ("linear", linear),
    ("conv2d", conv2d),
    ("group_norm", group_norm),
    ("layer_norm", layer_norm),
    ("silu", silu),
    ("upsample", upsample),
    ("softmax", softmax),
    ("attention_kernel", attention_kernel),
    ("attention_layer", attention_layer),
    ("resblock", resblock),
    ("spatial_transformer", spatial_transformer),
    ("time_embedding", time_embedding),
];
