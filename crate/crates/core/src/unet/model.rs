use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::nn::{grad, ops, Rng, Tensor};
use crate::unet::address::{AttnSlot, BlockAddress, Section};
use crate::unet::config::UNetConfig;
use crate::unet::hook::{AttentionHook, Probe};
use crate::unet::layers::{
    join, Conv2d, ConvCache, GroupNorm, Module, ResBlock, ResCache, SpatialTransformer, TimeCache, TimeEmbedding,
    TransformerCache,
};

/// Resnets, optionally each followed by a transformer, then an optional
/// resampling convolution.
#[derive(Debug, Clone)]
pub struct Block {
    pub resnets: Vec<ResBlock>,
    pub attentions: Vec<SpatialTransformer>,
    pub sampler: Option<Conv2d>,
}

#[derive(Debug, Clone)]
struct BlockCache {
    resnets: Vec<ResCache>,
    attentions: Vec<TransformerCache>,
    sampler: Option<ConvCache>,
}

impl Block {
    fn forward(
        &self,
        mut h: Tensor,
        temb_act: &Tensor,
        context: &Tensor,
        hook: &AttentionHook,
        probe: &mut Probe,
        upsample: bool,
    ) -> Result<(Tensor, Tensor, BlockCache)> {
        let mut cache = BlockCache { resnets: Vec::new(), attentions: Vec::new(), sampler: None };
        for (i, res) in self.resnets.iter().enumerate() {
            let (out, rc) = res.forward(&h, temb_act)?;
            cache.resnets.push(rc);
            h = out;
            if let Some(attn) = self.attentions.get(i) {
                let (out, tc) = attn.forward(&h, context, hook, probe)?;
                cache.attentions.push(tc);
                h = out;
            }
        }
        let pre = h.clone();
        if let Some(conv) = &self.sampler {
            let input = if upsample { ops::upsample_nearest2x(&h)? } else { h };
            let (out, cc) = conv.forward(&input)?;
            cache.sampler = Some(cc);
            h = out;
        }
        Ok((h, pre, cache))
    }

    /// `dout` is the gradient at the block output and `dpre` an extra
    /// gradient at the pre-sampler activation (the skip connection).
    fn backward(
        &self,
        cache: &BlockCache,
        dout: &Tensor,
        dpre: Option<&Tensor>,
        upsample: bool,
        temb_act: &Tensor,
        dtemb_act: &mut Tensor,
        dcontext: &mut Tensor,
        grad: &mut Block,
    ) -> Tensor {
        let mut dh = match (&self.sampler, &cache.sampler) {
            (Some(conv), Some(cc)) => {
                let d = conv.backward(cc, dout, grad.sampler.as_mut().expect("grad sampler"));
                if upsample {
                    grad::upsample_nearest2x_backward(&d)
                } else {
                    d
                }
            }
            _ => dout.clone(),
        };
        if let Some(extra) = dpre {
            dh.add_assign(extra).expect("skip gradient");
        }
        for i in (0..self.resnets.len()).rev() {
            if let Some(attn) = self.attentions.get(i) {
                dh = attn.backward(&cache.attentions[i], &dh, dcontext, &mut grad.attentions[i]);
            }
            dh = self.resnets[i].backward(&cache.resnets[i], &dh, temb_act, dtemb_act, &mut grad.resnets[i]);
        }
        dh
    }

    fn visit<'a>(&'a self, prefix: &str, sampler: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        for (j, r) in self.resnets.iter().enumerate() {
            r.visit(&join(prefix, &format!("resnets.{j}")), f);
        }
        for (j, a) in self.attentions.iter().enumerate() {
            a.visit(&join(prefix, &format!("attentions.{j}")), f);
        }
        if let Some(s) = &self.sampler {
            s.visit(&join(prefix, &format!("{sampler}.0.conv")), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, sampler: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        for (j, r) in self.resnets.iter_mut().enumerate() {
            r.visit_mut(&join(prefix, &format!("resnets.{j}")), f);
        }
        for (j, a) in self.attentions.iter_mut().enumerate() {
            a.visit_mut(&join(prefix, &format!("attentions.{j}")), f);
        }
        if let Some(s) = &mut self.sampler {
            s.visit_mut(&join(prefix, &format!("{sampler}.0.conv")), f);
        }
    }
}

/// The conditional noise-prediction UNet, including the prompt embedding
/// tables.
#[derive(Debug, Clone)]
pub struct UNet {
    config: UNetConfig,
    pub time_embedding: TimeEmbedding,
    pub token_embedding: Tensor,
    pub position_embedding: Tensor,
    pub conv_in: Conv2d,
    pub down_blocks: Vec<Block>,
    pub mid_block: Block,
    pub up_blocks: Vec<Block>,
    pub conv_norm_out: GroupNorm,
    pub conv_out: Conv2d,
}

/// Activations kept by [`UNet::forward_train`] for [`UNet::backward`].
#[derive(Debug, Clone)]
pub struct UNetCache {
    time: TimeCache,
    temb: Tensor,
    temb_act: Tensor,
    tokens: Vec<usize>,
    context: Tensor,
    conv_in: ConvCache,
    down: Vec<BlockCache>,
    mid: BlockCache,
    up: Vec<BlockCache>,
    up_inputs: Vec<usize>,
    out_in: Tensor,
    out_norm: Tensor,
    conv_out: ConvCache,
}

fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (h, w) = (a.dim(1), a.dim(2));
    if b.dim(1) != h || b.dim(2) != w {
        return Err(Error::Shape(format!("skip concat {:?} + {:?}", a.shape(), b.shape())));
    }
    let mut data = a.data().to_vec();
    data.extend_from_slice(b.data());
    Tensor::new(&[a.dim(0) + b.dim(0), h, w], data)
}

fn split_channels(t: &Tensor, first: usize) -> (Tensor, Tensor) {
    let (h, w) = (t.dim(1), t.dim(2));
    let cut = first * h * w;
    let a = Tensor::new(&[first, h, w], t.data()[..cut].to_vec()).expect("split");
    let b = Tensor::new(&[t.dim(0) - first, h, w], t.data()[cut..].to_vec()).expect("split");
    (a, b)
}

impl UNet {
    /// Fresh weights: normal with std `1/√fan_in`, zero biases, unit norms.
    pub fn init(config: &UNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = config;
        let mut rng = Rng::seed_from(seed);
        let rng = &mut rng;
        let temb = c.time_embed_dim;
        let groups = c.norm_groups;
        let transformer = |ch: usize, section, block, attention, rng: &mut Rng| {
            SpatialTransformer::init(
                ch,
                c.context_dim,
                c.heads,
                groups,
                c.ff_mult,
                BlockAddress::new(section, block, attention, AttnSlot::Attn1),
                BlockAddress::new(section, block, attention, AttnSlot::Attn2),
                rng,
            )
        };

        let time_embedding = TimeEmbedding::init(c.time_freq_dim, temb, rng);
        let token_embedding = Tensor::from_fn(&[c.vocab_size, c.context_dim], |_| rng.normal());
        let position_embedding = Tensor::from_fn(&[c.context_length, c.context_dim], |_| rng.normal() * 0.1);
        let conv_in = Conv2d::init(c.channels(0), c.in_channels, 1, 1.0, rng);

        let mut down_blocks = Vec::new();
        let mut ch = c.channels(0);
        for level in 0..c.bottleneck() {
            let out = c.channels(level);
            let mut block = Block { resnets: Vec::new(), attentions: Vec::new(), sampler: None };
            for j in 0..c.down_layers(level) {
                block.resnets.push(ResBlock::init(ch, out, temb, groups, rng));
                ch = out;
                if c.level_has_attention(level) {
                    block.attentions.push(transformer(out, Section::Down, level, j, rng));
                }
            }
            block.sampler = Some(Conv2d::init(out, out, 2, 1.0, rng));
            down_blocks.push(block);
        }

        let bottom = c.channels(c.bottleneck());
        let mut mid_block = Block { resnets: Vec::new(), attentions: Vec::new(), sampler: None };
        mid_block.resnets.push(ResBlock::init(ch, bottom, temb, groups, rng));
        if c.level_has_attention(c.bottleneck()) {
            mid_block.attentions.push(transformer(bottom, Section::Mid, 0, 0, rng));
        }
        mid_block.resnets.push(ResBlock::init(bottom, bottom, temb, groups, rng));
        ch = bottom;

        let mut up_blocks = Vec::new();
        for index in 0..c.levels() {
            let level = c.up_level(index);
            let out = c.channels(level);
            let has_attention = index > 0 && c.level_has_attention(level);
            let mut block = Block { resnets: Vec::new(), attentions: Vec::new(), sampler: None };
            for j in 0..c.up_layers(level) {
                let inp = if j == 0 && index > 0 { ch + out } else { ch };
                block.resnets.push(ResBlock::init(inp, out, temb, groups, rng));
                ch = out;
                if has_attention {
                    block.attentions.push(transformer(out, Section::Up, index, j, rng));
                }
            }
            if level > 0 {
                let next = c.channels(level - 1);
                block.sampler = Some(Conv2d::init(next, out, 1, 1.0, rng));
                ch = next;
            }
            up_blocks.push(block);
        }

        let conv_norm_out = GroupNorm::init(ch, groups);
        let conv_out = Conv2d::init(c.in_channels, ch, 1, 0.1, rng);
        Ok(UNet {
            config: config.clone(),
            time_embedding,
            token_embedding,
            position_embedding,
            conv_in,
            down_blocks,
            mid_block,
            up_blocks,
            conv_norm_out,
            conv_out,
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.time_embedding.visit("time_embedding", f);
        f("token_embedding.weight".into(), &self.token_embedding);
        f("position_embedding.weight".into(), &self.position_embedding);
        self.conv_in.visit("conv_in", f);
        for (i, b) in self.down_blocks.iter().enumerate() {
            b.visit(&format!("down_blocks.{i}"), "downsamplers", f);
        }
        self.mid_block.visit("mid_block", "", f);
        for (i, b) in self.up_blocks.iter().enumerate() {
            b.visit(&format!("up_blocks.{i}"), "upsamplers", f);
        }
        self.conv_norm_out.visit("conv_norm_out", f);
        self.conv_out.visit("conv_out", f);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.time_embedding.visit_mut("time_embedding", f);
        f("token_embedding.weight".into(), &mut self.token_embedding);
        f("position_embedding.weight".into(), &mut self.position_embedding);
        self.conv_in.visit_mut("conv_in", f);
        for (i, b) in self.down_blocks.iter_mut().enumerate() {
            b.visit_mut(&format!("down_blocks.{i}"), "downsamplers", f);
        }
        self.mid_block.visit_mut("mid_block", "", f);
        for (i, b) in self.up_blocks.iter_mut().enumerate() {
            b.visit_mut(&format!("up_blocks.{i}"), "upsamplers", f);
        }
        self.conv_norm_out.visit_mut("conv_norm_out", f);
        self.conv_out.visit_mut("conv_out", f);
    }

    /// All parameters in canonical order.
    pub fn named_parameters(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.visit(&mut |name, t| out.push((name, t)));
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.named_parameters().iter().map(|(_, t)| t.numel()).sum()
    }

    /// A structurally identical network with every parameter zeroed, used as
    /// a gradient accumulator.
    pub fn zeros_like(&self) -> UNet {
        let mut z = self.clone();
        z.visit_mut(&mut |_, t| t.fill(0.0));
        z
    }

    /// Builds a network from named tensors. Every expected name must be
    /// present with the expected shape, and no extra names are allowed.
    pub fn from_tensors(config: &UNetConfig, mut tensors: IndexMap<String, Tensor>) -> Result<Self> {
        let mut net = UNet::init(config, 0)?;
        let mut failure = None;
        net.visit_mut(&mut |name, t| {
            if failure.is_some() {
                return;
            }
            match tensors.shift_remove(&name) {
                Some(src) if src.shape() == t.shape() => *t = src,
                Some(src) => {
                    failure = Some(Error::Checkpoint(format!(
                        "tensor {name} has shape {:?}, expected {:?}",
                        src.shape(),
                        t.shape()
                    )))
                }
                None => failure = Some(Error::MissingTensor(name)),
            }
        });
        if let Some(e) = failure {
            return Err(e);
        }
        if let Some(extra) = tensors.keys().next() {
            return Err(Error::Checkpoint(format!("unexpected tensor {extra}")));
        }
        Ok(net)
    }

    /// Prompt context `[context_length × context_dim]`: token plus position
    /// embeddings.
    pub fn embed_prompt(&self, tokens: &[usize]) -> Result<Tensor> {
        let (len, dim) = (self.config.context_length, self.config.context_dim);
        if tokens.len() != len {
            return Err(Error::InvalidArgument(format!("prompt needs {len} tokens, got {}", tokens.len())));
        }
        let mut out = vec![0.0f32; len * dim];
        for (l, &tok) in tokens.iter().enumerate() {
            if tok >= self.config.vocab_size {
                return Err(Error::UnknownToken(tok.to_string()));
            }
            let row = &self.token_embedding.data()[tok * dim..(tok + 1) * dim];
            let pos = &self.position_embedding.data()[l * dim..(l + 1) * dim];
            for d in 0..dim {
                out[l * dim + d] = row[d] + pos[d];
            }
        }
        Tensor::new(&[len, dim], out)
    }

    fn check_inputs(&self, x: &Tensor, t: usize) -> Result<()> {
        x.expect_shape(&self.config.image_shape(), "unet input")?;
        if t >= crate::diffusion::NUM_TIMESTEPS {
            return Err(Error::InvalidArgument(format!("timestep {t} out of range")));
        }
        Ok(())
    }

    /// Predicted noise for `x` at timestep `t`. `context` is
    /// `[context_length × context_dim]`.
    pub fn forward(&self, x: &Tensor, t: usize, context: &Tensor, hook: &AttentionHook) -> Result<Tensor> {
        self.forward_probe(x, t, context, hook, &mut Probe::default())
    }

    pub fn forward_probe(
        &self,
        x: &Tensor,
        t: usize,
        context: &Tensor,
        hook: &AttentionHook,
        probe: &mut Probe,
    ) -> Result<Tensor> {
        self.check_inputs(x, t)?;
        context.expect_shape(&[self.config.context_length, self.config.context_dim], "context")?;
        let (out, _) = self.run(x, t, context.transpose()?, Vec::new(), hook, probe)?;
        out.check_finite("unet output")?;
        Ok(out)
    }

    /// Unhooked forward that keeps every activation needed by
    /// [`UNet::backward`].
    pub fn forward_train(&self, x: &Tensor, t: usize, tokens: &[usize]) -> Result<(Tensor, UNetCache)> {
        self.check_inputs(x, t)?;
        let context = self.embed_prompt(tokens)?.transpose()?;
        self.run(x, t, context, tokens.to_vec(), &AttentionHook::new(), &mut Probe::default())
    }

    fn run(
        &self,
        x: &Tensor,
        t: usize,
        context: Tensor,
        tokens: Vec<usize>,
        hook: &AttentionHook,
        probe: &mut Probe,
    ) -> Result<(Tensor, UNetCache)> {
        let (temb, time) = self.time_embedding.forward(t)?;
        let temb_act = ops::silu(&temb);
        let (mut h, conv_in) = self.conv_in.forward(x)?;

        let mut skips = Vec::new();
        let mut down = Vec::new();
        for block in &self.down_blocks {
            let (out, pre, cache) = block.forward(h, &temb_act, &context, hook, probe, false)?;
            skips.push(pre);
            down.push(cache);
            h = out;
        }
        let (out, _, mid) = self.mid_block.forward(h, &temb_act, &context, hook, probe, false)?;
        h = out;

        let mut up = Vec::new();
        let mut up_inputs = Vec::new();
        for (index, block) in self.up_blocks.iter().enumerate() {
            up_inputs.push(h.dim(0));
            if index > 0 {
                let skip = skips.pop().expect("skip per level");
                h = concat_channels(&h, &skip)?;
            }
            let (out, _, cache) = block.forward(h, &temb_act, &context, hook, probe, true)?;
            up.push(cache);
            h = out;
        }

        let out_norm = self.conv_norm_out.forward(&h)?;
        let (eps, conv_out) = self.conv_out.forward(&ops::silu(&out_norm))?;
        let cache = UNetCache {
            time,
            temb,
            temb_act,
            tokens,
            context,
            conv_in,
            down,
            mid,
            up,
            up_inputs,
            out_in: h,
            out_norm,
            conv_out,
        };
        Ok((eps, cache))
    }

    /// Accumulates parameter gradients of `⟨deps, output⟩` into `grad`.
    pub fn backward(&self, cache: &UNetCache, deps: &Tensor, grad: &mut UNet) {
        let ds = self.conv_out.backward(&cache.conv_out, deps, &mut grad.conv_out);
        let dnorm = grad::silu_backward(&cache.out_norm, &ds);
        let mut dh = self.conv_norm_out.backward(&cache.out_in, &dnorm, &mut grad.conv_norm_out);

        let mut dtemb_act = Tensor::zeros(cache.temb_act.shape());
        let mut dcontext = Tensor::zeros(cache.context.shape());
        let ta = &cache.temb_act;

        let mut dskips: Vec<Tensor> = Vec::new();
        for index in (0..self.up_blocks.len()).rev() {
            let block = &self.up_blocks[index];
            let din = block.backward(
                &cache.up[index],
                &dh,
                None,
                true,
                ta,
                &mut dtemb_act,
                &mut dcontext,
                &mut grad.up_blocks[index],
            );
            if index > 0 {
                let (dprev, dskip) = split_channels(&din, cache.up_inputs[index]);
                dskips.push(dskip);
                dh = dprev;
            } else {
                dh = din;
            }
        }
        // Up blocks were walked from level 0 upward, so dskips[level] lines up.
        dh = self.mid_block.backward(&cache.mid, &dh, None, false, ta, &mut dtemb_act, &mut dcontext, &mut grad.mid_block);
        for level in (0..self.down_blocks.len()).rev() {
            let dskip = &dskips[level];
            dh = self.down_blocks[level].backward(
                &cache.down[level],
                &dh,
                Some(dskip),
                false,
                ta,
                &mut dtemb_act,
                &mut dcontext,
                &mut grad.down_blocks[level],
            );
        }
        let _ = self.conv_in.backward(&cache.conv_in, &dh, &mut grad.conv_in);

        let dtemb = grad::silu_backward(&cache.temb, &dtemb_act);
        self.time_embedding.backward(&cache.time, &dtemb, &mut grad.time_embedding);

        if !cache.tokens.is_empty() {
            let (dim, len) = (cache.context.dim(0), cache.context.dim(1));
            for (l, &tok) in cache.tokens.iter().enumerate() {
                for d in 0..dim {
                    let g = dcontext.data()[d * len + l];
                    grad.token_embedding.data_mut()[tok * dim + d] += g;
                    grad.position_embedding.data_mut()[l * dim + d] += g;
                }
            }
        }
    }
}
