//! Parameterized layers with forward caches and hand-written backward passes.
//!
//! Feature maps are `[C×H×W]`; token sequences are feature-major `[C×N]`.
//! Every `backward` accumulates parameter gradients into a same-shaped
//! gradient twin of the layer and returns the input gradient.

use crate::error::Result;
use crate::nn::attention::{attention, attention_backward, AttentionProbs};
use crate::nn::grad::{self, conv2d_backward, group_norm_backward, layer_norm_columns_backward, linear_backward};
use crate::nn::ops;
use crate::nn::{Rng, Tensor};
use crate::unet::address::BlockAddress;
use crate::unet::hook::{AttentionHook, Probe};

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Named parameter traversal in canonical order.
pub trait Module {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor));
}

fn randn_scaled(shape: &[usize], std: f32, rng: &mut Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.normal() * std)
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    pub fn init(out: usize, inp: usize, bias: bool, rng: &mut Rng) -> Self {
        Linear {
            weight: randn_scaled(&[out, inp], 1.0 / (inp as f32).sqrt(), rng),
            bias: bias.then(|| Tensor::zeros(&[out])),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        ops::linear(&self.weight, x, self.bias.as_ref())
    }

    pub fn backward(&self, x: &Tensor, dy: &Tensor, grad: &mut Linear) -> Tensor {
        linear_backward(&self.weight, x, dy, &mut grad.weight, grad.bias.as_mut())
    }
}

impl Module for Linear {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        f(join(prefix, "weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(join(prefix, "bias"), b);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(join(prefix, "bias"), b);
        }
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
}

#[derive(Debug, Clone)]
pub struct ConvCache {
    x_shape: Vec<usize>,
    cols: Vec<f32>,
}

impl Conv2d {
    pub fn init(out: usize, inp: usize, stride: usize, gain: f32, rng: &mut Rng) -> Self {
        Conv2d {
            weight: randn_scaled(&[out, inp, 3, 3], gain / ((inp * 9) as f32).sqrt(), rng),
            bias: Tensor::zeros(&[out]),
            stride,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, ConvCache)> {
        let cols = ops::conv2d_cols(x, &self.weight, self.stride)?;
        let y = ops::conv2d_from_cols(&cols, x, &self.weight, &self.bias, self.stride)?;
        Ok((y, ConvCache { x_shape: x.shape().to_vec(), cols }))
    }

    pub fn backward(&self, cache: &ConvCache, dy: &Tensor, grad: &mut Conv2d) -> Tensor {
        conv2d_backward(&cache.cols, &cache.x_shape, &self.weight, dy, self.stride, &mut grad.weight, &mut grad.bias)
    }
}

impl Module for Conv2d {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        f(join(prefix, "weight"), &self.weight);
        f(join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(join(prefix, "weight"), &mut self.weight);
        f(join(prefix, "bias"), &mut self.bias);
    }
}

#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub weight: Tensor,
    pub bias: Tensor,
    pub groups: usize,
}

impl GroupNorm {
    pub fn init(channels: usize, groups: usize) -> Self {
        GroupNorm { weight: Tensor::full(&[channels], 1.0), bias: Tensor::zeros(&[channels]), groups }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        ops::group_norm(x, self.groups, &self.weight, &self.bias)
    }

    pub fn backward(&self, x: &Tensor, dy: &Tensor, grad: &mut GroupNorm) -> Tensor {
        group_norm_backward(x, self.groups, &self.weight, dy, &mut grad.weight, &mut grad.bias)
    }
}

impl Module for GroupNorm {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        f(join(prefix, "weight"), &self.weight);
        f(join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(join(prefix, "weight"), &mut self.weight);
        f(join(prefix, "bias"), &mut self.bias);
    }
}

/// Layer norm over the feature axis of a `[C×N]` token matrix.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl LayerNorm {
    pub fn init(channels: usize) -> Self {
        LayerNorm { weight: Tensor::full(&[channels], 1.0), bias: Tensor::zeros(&[channels]) }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        ops::layer_norm_columns(x, &self.weight, &self.bias)
    }

    pub fn backward(&self, x: &Tensor, dy: &Tensor, grad: &mut LayerNorm) -> Tensor {
        layer_norm_columns_backward(x, &self.weight, dy, &mut grad.weight, &mut grad.bias)
    }
}

impl Module for LayerNorm {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        f(join(prefix, "weight"), &self.weight);
        f(join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(join(prefix, "weight"), &mut self.weight);
        f(join(prefix, "bias"), &mut self.bias);
    }
}

/// Flattens the spatial axes: `[C×H×W]` → `[C×HW]`.
fn tokens(x: &Tensor) -> Tensor {
    let c = x.dim(0);
    x.clone().reshape(&[c, x.numel() / c]).expect("token reshape")
}

fn add_channel_bias(h: &mut Tensor, bias: &[f32]) {
    let spatial = h.numel() / h.dim(0);
    for (plane, &b) in h.data_mut().chunks_mut(spatial).zip(bias) {
        plane.iter_mut().for_each(|v| *v += b);
    }
}

/// GroupNorm → SiLU → conv → (+ time projection) → GroupNorm → SiLU → conv,
/// plus a (projected) skip connection.
#[derive(Debug, Clone)]
pub struct ResBlock {
    pub norm1: GroupNorm,
    pub conv1: Conv2d,
    pub time_emb_proj: Linear,
    pub norm2: GroupNorm,
    pub conv2: Conv2d,
    pub conv_shortcut: Option<Linear>,
}

#[derive(Debug, Clone)]
pub struct ResCache {
    x: Tensor,
    a1: Tensor,
    conv1: ConvCache,
    h: Tensor,
    a2: Tensor,
    conv2: ConvCache,
}

impl ResBlock {
    pub fn init(inp: usize, out: usize, temb: usize, groups: usize, rng: &mut Rng) -> Self {
        ResBlock {
            norm1: GroupNorm::init(inp, groups),
            conv1: Conv2d::init(out, inp, 1, 1.0, rng),
            time_emb_proj: Linear::init(out, temb, true, rng),
            norm2: GroupNorm::init(out, groups),
            conv2: Conv2d::init(out, out, 1, 1.0, rng),
            conv_shortcut: (inp != out).then(|| Linear::init(out, inp, true, rng)),
        }
    }

    /// `temb_act` is `silu(time embedding)` as a `[T×1]` column.
    pub fn forward(&self, x: &Tensor, temb_act: &Tensor) -> Result<(Tensor, ResCache)> {
        let a1 = self.norm1.forward(x)?;
        let (mut h, conv1) = self.conv1.forward(&ops::silu(&a1))?;
        let t = self.time_emb_proj.forward(temb_act)?;
        add_channel_bias(&mut h, t.data());
        let a2 = self.norm2.forward(&h)?;
        let (h2, conv2) = self.conv2.forward(&ops::silu(&a2))?;
        let mut out = match &self.conv_shortcut {
            Some(proj) => proj.forward(&tokens(x))?.reshape(h2.shape())?,
            None => x.clone(),
        };
        out.add_assign(&h2)?;
        Ok((out, ResCache { x: x.clone(), a1, conv1, h, a2, conv2 }))
    }

    /// Returns `dx`; adds this block's contribution to `dtemb_act`.
    pub fn backward(
        &self,
        cache: &ResCache,
        dout: &Tensor,
        temb_act: &Tensor,
        dtemb_act: &mut Tensor,
        grad: &mut ResBlock,
    ) -> Tensor {
        let ds2 = self.conv2.backward(&cache.conv2, dout, &mut grad.conv2);
        let da2 = grad::silu_backward(&cache.a2, &ds2);
        let dh = self.norm2.backward(&cache.h, &da2, &mut grad.norm2);
        let spatial = dh.numel() / dh.dim(0);
        let dt: Vec<f32> = dh.data().chunks(spatial).map(grad::sum).collect();
        let dt = Tensor::new(&[dt.len(), 1], dt).expect("dt shape");
        let dtemb = self.time_emb_proj.backward(temb_act, &dt, &mut grad.time_emb_proj);
        dtemb_act.add_assign(&dtemb).expect("dtemb shape");
        let ds1 = self.conv1.backward(&cache.conv1, &dh, &mut grad.conv1);
        let da1 = grad::silu_backward(&cache.a1, &ds1);
        let mut dx = self.norm1.backward(&cache.x, &da1, &mut grad.norm1);
        match (&self.conv_shortcut, &mut grad.conv_shortcut) {
            (Some(proj), Some(gproj)) => {
                let dflat = tokens(dout);
                let dskip = proj.backward(&tokens(&cache.x), &dflat, gproj);
                dx.add_assign(&dskip.reshape(cache.x.shape()).expect("skip shape")).expect("dx");
            }
            _ => dx.add_assign(dout).expect("dx"),
        }
        dx
    }
}

impl Module for ResBlock {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.norm1.visit(&join(prefix, "norm1"), f);
        self.conv1.visit(&join(prefix, "conv1"), f);
        self.time_emb_proj.visit(&join(prefix, "time_emb_proj"), f);
        self.norm2.visit(&join(prefix, "norm2"), f);
        self.conv2.visit(&join(prefix, "conv2"), f);
        if let Some(s) = &self.conv_shortcut {
            s.visit(&join(prefix, "conv_shortcut"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.norm1.visit_mut(&join(prefix, "norm1"), f);
        self.conv1.visit_mut(&join(prefix, "conv1"), f);
        self.time_emb_proj.visit_mut(&join(prefix, "time_emb_proj"), f);
        self.norm2.visit_mut(&join(prefix, "norm2"), f);
        self.conv2.visit_mut(&join(prefix, "conv2"), f);
        if let Some(s) = &mut self.conv_shortcut {
            s.visit_mut(&join(prefix, "conv_shortcut"), f);
        }
    }
}

/// One addressable attention sub-block. The multiplier scales the attention
/// output before the output projection: `to_out(m · softmax(qkᵀ/√d) v)`.
#[derive(Debug, Clone)]
pub struct Attention {
    pub to_q: Linear,
    pub to_k: Linear,
    pub to_v: Linear,
    pub to_out: Linear,
    pub heads: usize,
    pub address: BlockAddress,
}

#[derive(Debug, Clone)]
pub struct AttnCache {
    source: Tensor,
    q: Tensor,
    k: Tensor,
    v: Tensor,
    probs: AttentionProbs,
    scaled: Tensor,
    multiplier: Option<f32>,
}

impl Attention {
    pub fn init(channels: usize, source_dim: usize, heads: usize, address: BlockAddress, rng: &mut Rng) -> Self {
        Attention {
            to_q: Linear::init(channels, channels, false, rng),
            to_k: Linear::init(channels, source_dim, false, rng),
            to_v: Linear::init(channels, source_dim, false, rng),
            to_out: Linear::init(channels, channels, true, rng),
            heads,
            address,
        }
    }

    /// `x` is `[C×N]`; `source` is `x` itself for self attention or the
    /// `[D×L]` context for cross attention.
    pub fn forward(&self, x: &Tensor, source: &Tensor, multiplier: Option<f32>) -> Result<(Tensor, AttnCache)> {
        let q = self.to_q.forward(x)?;
        let k = self.to_k.forward(source)?;
        let v = self.to_v.forward(source)?;
        let (h, probs) = attention(&q, &k, &v, self.heads)?;
        let scaled = match multiplier {
            Some(m) => h.scale(m),
            None => h,
        };
        let out = self.to_out.forward(&scaled)?;
        Ok((out, AttnCache { source: source.clone(), q, k, v, probs, scaled, multiplier }))
    }

    /// The tensor the multiplier produced on the last forward (`m · h`).
    pub fn scaled_output(cache: &AttnCache) -> &Tensor {
        &cache.scaled
    }

    /// Returns `(dx, dsource)`.
    pub fn backward(&self, x: &Tensor, cache: &AttnCache, dout: &Tensor, grad: &mut Attention) -> (Tensor, Tensor) {
        let mut dh = self.to_out.backward(&cache.scaled, dout, &mut grad.to_out);
        if let Some(m) = cache.multiplier {
            dh = dh.scale(m);
        }
        let (dq, dk, dv) =
            attention_backward(&cache.q, &cache.k, &cache.v, self.heads, &cache.probs, &dh).expect("attention backward");
        let dx = self.to_q.backward(x, &dq, &mut grad.to_q);
        let mut dsource = self.to_k.backward(&cache.source, &dk, &mut grad.to_k);
        dsource.add_assign(&self.to_v.backward(&cache.source, &dv, &mut grad.to_v)).expect("dsource");
        (dx, dsource)
    }
}

impl Module for Attention {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.to_q.visit(&join(prefix, "to_q"), f);
        self.to_k.visit(&join(prefix, "to_k"), f);
        self.to_v.visit(&join(prefix, "to_v"), f);
        self.to_out.visit(&join(prefix, "to_out"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.to_q.visit_mut(&join(prefix, "to_q"), f);
        self.to_k.visit_mut(&join(prefix, "to_k"), f);
        self.to_v.visit_mut(&join(prefix, "to_v"), f);
        self.to_out.visit_mut(&join(prefix, "to_out"), f);
    }
}

/// GroupNorm → proj_in → [self attn, cross attn, feed-forward] with
/// pre-layer-norm residuals → proj_out, plus the outer residual.
#[derive(Debug, Clone)]
pub struct SpatialTransformer {
    pub norm: GroupNorm,
    pub proj_in: Linear,
    pub norm1: LayerNorm,
    pub attn1: Attention,
    pub norm2: LayerNorm,
    pub attn2: Attention,
    pub norm3: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
    pub proj_out: Linear,
}

#[derive(Debug, Clone)]
pub struct TransformerCache {
    x: Tensor,
    g: Tensor,
    t0: Tensor,
    l1: Tensor,
    attn1: AttnCache,
    t1: Tensor,
    l2: Tensor,
    attn2: AttnCache,
    t2: Tensor,
    l3: Tensor,
    f1: Tensor,
    s: Tensor,
    t3: Tensor,
}

impl SpatialTransformer {
    pub fn init(
        channels: usize,
        context_dim: usize,
        heads: usize,
        groups: usize,
        ff_mult: usize,
        attn1: BlockAddress,
        attn2: BlockAddress,
        rng: &mut Rng,
    ) -> Self {
        SpatialTransformer {
            norm: GroupNorm::init(channels, groups),
            proj_in: Linear::init(channels, channels, true, rng),
            norm1: LayerNorm::init(channels),
            attn1: Attention::init(channels, channels, heads, attn1, rng),
            norm2: LayerNorm::init(channels),
            attn2: Attention::init(channels, context_dim, heads, attn2, rng),
            norm3: LayerNorm::init(channels),
            ff1: Linear::init(channels * ff_mult, channels, true, rng),
            ff2: Linear::init(channels, channels * ff_mult, true, rng),
            proj_out: Linear::init(channels, channels, true, rng),
        }
    }

    /// `context` is feature-major `[D×L]`.
    pub fn forward(
        &self,
        x: &Tensor,
        context: &Tensor,
        hook: &AttentionHook,
        probe: &mut Probe,
    ) -> Result<(Tensor, TransformerCache)> {
        let g = self.norm.forward(x)?;
        let t0 = self.proj_in.forward(&tokens(&g))?;

        let l1 = self.norm1.forward(&t0)?;
        let (a1, attn1) = self.attn1.forward(&l1, &l1, hook.get(&self.attn1.address))?;
        probe.observe(&self.attn1.address, Attention::scaled_output(&attn1));
        let t1 = t0.add(&a1)?;

        let l2 = self.norm2.forward(&t1)?;
        let zeroed;
        let source = if probe.zero_context == Some(self.attn2.address) {
            zeroed = Tensor::zeros(context.shape());
            &zeroed
        } else {
            context
        };
        let (a2, attn2) = self.attn2.forward(&l2, source, hook.get(&self.attn2.address))?;
        probe.observe(&self.attn2.address, Attention::scaled_output(&attn2));
        let t2 = t1.add(&a2)?;

        let l3 = self.norm3.forward(&t2)?;
        let f1 = self.ff1.forward(&l3)?;
        let s = ops::silu(&f1);
        let t3 = t2.add(&self.ff2.forward(&s)?)?;

        let mut out = self.proj_out.forward(&t3)?.reshape(x.shape())?;
        out.add_assign(x)?;
        Ok((out, TransformerCache { x: x.clone(), g, t0, l1, attn1, t1, l2, attn2, t2, l3, f1, s, t3 }))
    }

    /// Returns `dx`; adds the context gradient into `dcontext`.
    pub fn backward(
        &self,
        cache: &TransformerCache,
        dout: &Tensor,
        dcontext: &mut Tensor,
        grad: &mut SpatialTransformer,
    ) -> Tensor {
        let dflat = tokens(dout);
        let mut dt = self.proj_out.backward(&cache.t3, &dflat, &mut grad.proj_out);

        let ds = self.ff2.backward(&cache.s, &dt, &mut grad.ff2);
        let df1 = grad::silu_backward(&cache.f1, &ds);
        let dl3 = self.ff1.backward(&cache.l3, &df1, &mut grad.ff1);
        dt.add_assign(&self.norm3.backward(&cache.t2, &dl3, &mut grad.norm3)).expect("dt2");

        let (dl2, dctx) = self.attn2.backward(&cache.l2, &cache.attn2, &dt, &mut grad.attn2);
        dcontext.add_assign(&dctx).expect("dcontext");
        dt.add_assign(&self.norm2.backward(&cache.t1, &dl2, &mut grad.norm2)).expect("dt1");

        let (dl1_q, dl1_kv) = self.attn1.backward(&cache.l1, &cache.attn1, &dt, &mut grad.attn1);
        let mut dl1 = dl1_q;
        dl1.add_assign(&dl1_kv).expect("dl1");
        dt.add_assign(&self.norm1.backward(&cache.t0, &dl1, &mut grad.norm1)).expect("dt0");

        let dg = self.proj_in.backward(&tokens(&cache.g), &dt, &mut grad.proj_in);
        let mut dx = self.norm.backward(&cache.x, &dg.reshape(cache.x.shape()).expect("dg"), &mut grad.norm);
        dx.add_assign(dout).expect("dx");
        dx
    }
}

impl Module for SpatialTransformer {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        let tb = join(prefix, "transformer_blocks.0");
        self.norm.visit(&join(prefix, "norm"), f);
        self.proj_in.visit(&join(prefix, "proj_in"), f);
        self.norm1.visit(&join(&tb, "norm1"), f);
        self.attn1.visit(&join(&tb, "attn1"), f);
        self.norm2.visit(&join(&tb, "norm2"), f);
        self.attn2.visit(&join(&tb, "attn2"), f);
        self.norm3.visit(&join(&tb, "norm3"), f);
        self.ff1.visit(&join(&tb, "ff.linear_1"), f);
        self.ff2.visit(&join(&tb, "ff.linear_2"), f);
        self.proj_out.visit(&join(prefix, "proj_out"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        let tb = join(prefix, "transformer_blocks.0");
        self.norm.visit_mut(&join(prefix, "norm"), f);
        self.proj_in.visit_mut(&join(prefix, "proj_in"), f);
        self.norm1.visit_mut(&join(&tb, "norm1"), f);
        self.attn1.visit_mut(&join(&tb, "attn1"), f);
        self.norm2.visit_mut(&join(&tb, "norm2"), f);
        self.attn2.visit_mut(&join(&tb, "attn2"), f);
        self.norm3.visit_mut(&join(&tb, "norm3"), f);
        self.ff1.visit_mut(&join(&tb, "ff.linear_1"), f);
        self.ff2.visit_mut(&join(&tb, "ff.linear_2"), f);
        self.proj_out.visit_mut(&join(prefix, "proj_out"), f);
    }
}

/// Sinusoidal timestep features followed by a two-layer SiLU MLP.
#[derive(Debug, Clone)]
pub struct TimeEmbedding {
    pub linear_1: Linear,
    pub linear_2: Linear,
    pub freq_dim: usize,
}

#[derive(Debug, Clone)]
pub struct TimeCache {
    freqs: Tensor,
    h: Tensor,
    s: Tensor,
}

/// `[cos(t·f_0), …, cos(t·f_{k-1}), sin(t·f_0), …]` with
/// `f_i = 10000^(−i/k)`, `k = dim/2`.
pub fn timestep_features(t: usize, dim: usize) -> Tensor {
    let half = dim / 2;
    let mut out = vec![0.0f32; dim];
    for i in 0..half {
        let freq = libm::exp(-libm::log(10000.0) * i as f64 / half as f64);
        let arg = t as f64 * freq;
        out[i] = libm::cos(arg) as f32;
        out[half + i] = libm::sin(arg) as f32;
    }
    Tensor::new(&[dim, 1], out).expect("timestep features")
}

impl TimeEmbedding {
    pub fn init(freq_dim: usize, embed_dim: usize, rng: &mut Rng) -> Self {
        TimeEmbedding {
            linear_1: Linear::init(embed_dim, freq_dim, true, rng),
            linear_2: Linear::init(embed_dim, embed_dim, true, rng),
            freq_dim,
        }
    }

    pub fn forward(&self, t: usize) -> Result<(Tensor, TimeCache)> {
        let freqs = timestep_features(t, self.freq_dim);
        let h = self.linear_1.forward(&freqs)?;
        let s = ops::silu(&h);
        let temb = self.linear_2.forward(&s)?;
        Ok((temb, TimeCache { freqs, h, s }))
    }

    pub fn backward(&self, cache: &TimeCache, dtemb: &Tensor, grad: &mut TimeEmbedding) {
        let ds = self.linear_2.backward(&cache.s, dtemb, &mut grad.linear_2);
        let dh = grad::silu_backward(&cache.h, &ds);
        self.linear_1.backward(&cache.freqs, &dh, &mut grad.linear_1);
    }
}

impl Module for TimeEmbedding {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.linear_1.visit(&join(prefix, "linear_1"), f);
        self.linear_2.visit(&join(prefix, "linear_2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.linear_1.visit_mut(&join(prefix, "linear_1"), f);
        self.linear_2.visit_mut(&join(prefix, "linear_2"), f);
    }
}
