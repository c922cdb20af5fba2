//! Greedy multi-block strategies: every block starts at zero attention and
//! each loop one block gains 1.0, picked by its influence on `x0_hat`.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffusion::{initial_latent, DenoiseRequest, Sampler};
use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::unet::{list_attention_blocks, AttentionHook, BlockAddress, UNet};

/// Largest attention a block can reach.
pub const CAP: f32 = 1.0;
/// Attention gained by the block picked in a loop.
pub const GAIN: f32 = 1.0;
pub const DEFAULT_LOOPS: usize = 40;

/// Root-mean-square difference over all elements.
pub fn image_diff(a: &Tensor, b: &Tensor) -> Result<f64> {
    a.same_shape(b, "image_diff")?;
    if a.numel() == 0 {
        return Ok(0.0);
    }
    let sq: f64 = a.data().iter().zip(b.data()).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum();
    Ok((sq / a.numel() as f64).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PickMode {
    #[serde(rename = "most")]
    MostInfluential,
    #[serde(rename = "least")]
    LeastInfluential,
}

impl PickMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            PickMode::MostInfluential => "most",
            PickMode::LeastInfluential => "least",
        }
    }

    /// Index of the extreme score; the earliest index wins ties.
    pub fn pick(&self, scores: &[f64]) -> Option<usize> {
        let mut best: Option<usize> = None;
        for (i, &s) in scores.iter().enumerate() {
            let better = match best {
                None => true,
                Some(b) => match self {
                    PickMode::MostInfluential => s > scores[b],
                    PickMode::LeastInfluential => s < scores[b],
                },
            };
            if better {
                best = Some(i);
            }
        }
        best
    }
}

impl fmt::Display for PickMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PickMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "most" | "most_influential" => Ok(PickMode::MostInfluential),
            "least" | "least_influential" => Ok(PickMode::LeastInfluential),
            _ => Err(Error::InvalidArgument(format!("unknown pick mode {s:?}"))),
        }
    }
}

/// Per-block attention in list order, plus the picks made so far.
#[derive(Debug, Clone, PartialEq)]
pub struct StrategyState {
    attention: Vec<(BlockAddress, f32)>,
    picks: Vec<(usize, BlockAddress)>,
}

impl StrategyState {
    /// All `blocks` at zero attention.
    pub fn new(blocks: &[BlockAddress]) -> Self {
        StrategyState { attention: blocks.iter().map(|&b| (b, 0.0)).collect(), picks: Vec::new() }
    }

    pub fn attention(&self) -> &[(BlockAddress, f32)] {
        &self.attention
    }

    pub fn picks(&self) -> &[(usize, BlockAddress)] {
        &self.picks
    }

    pub fn value(&self, block: &BlockAddress) -> Option<f32> {
        self.attention.iter().find(|(b, _)| b == block).map(|&(_, v)| v)
    }

    /// Blocks that can still gain, in list order.
    pub fn candidates(&self) -> Vec<BlockAddress> {
        self.attention.iter().filter(|(_, v)| v + GAIN <= CAP).map(|&(b, _)| b).collect()
    }

    pub fn hook(&self) -> AttentionHook {
        self.attention.iter().map(|&(b, v)| (b, v)).collect()
    }

    /// The current hook with `block` raised by the gain.
    pub fn hook_with_gain(&self, block: &BlockAddress) -> AttentionHook {
        self.attention.iter().map(|&(b, v)| (b, if b == *block { v + GAIN } else { v })).collect()
    }

    pub fn commit(&mut self, loop_index: usize, block: BlockAddress) -> Result<()> {
        let entry = self
            .attention
            .iter_mut()
            .find(|(b, _)| *b == block)
            .ok_or_else(|| Error::UnknownBlock(block.code()))?;
        if entry.1 + GAIN > CAP {
            return Err(Error::InvalidArgument(format!("{} is already at the cap", block.code())));
        }
        entry.1 += GAIN;
        self.picks.push((loop_index, block));
        Ok(())
    }
}

/// One line of the pick log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PickRecord {
    #[serde(rename = "loop")]
    pub loop_index: usize,
    pub picked: String,
    pub score: f64,
    pub mode: PickMode,
}

#[derive(Debug, Clone)]
pub struct StrategyOutcome {
    pub image: Tensor,
    pub state: StrategyState,
    pub log: Vec<PickRecord>,
    pub x0_trace: Vec<Tensor>,
}

/// Scores every candidate for loop `i` from latent `x` against `baseline`.
/// Returns the candidates' `(x_next, x0_hat)` alongside their scores.
pub fn score_candidates(
    sampler: &Sampler<'_>,
    state: &StrategyState,
    x: &Tensor,
    i: usize,
    baseline: &Tensor,
) -> Result<Vec<(BlockAddress, f64, Tensor, Tensor)>> {
    state
        .candidates()
        .par_iter()
        .map(|&c| {
            let (next, x0) = sampler.step(x, i, &state.hook_with_gain(&c))?;
            let score = image_diff(&x0, baseline)?;
            Ok((c, score, next, x0))
        })
        .collect()
}

/// Runs the greedy strategy over every attention block of the model.
pub fn greedy_denoise(model: &UNet, request: &DenoiseRequest, mode: PickMode) -> Result<StrategyOutcome> {
    greedy_denoise_blocks(model, request, mode, &list_attention_blocks(model.config()))
}

/// Greedy strategy restricted to `blocks`; blocks outside the list run
/// unscaled. `request.num_loops` sets the loop count and its `attnmod`
/// must be empty.
pub fn greedy_denoise_blocks(
    model: &UNet,
    request: &DenoiseRequest,
    mode: PickMode,
    blocks: &[BlockAddress],
) -> Result<StrategyOutcome> {
    if request.attnmod.is_some() {
        return Err(Error::InvalidArgument("strategy requests must not carry an attnmod setup".into()));
    }
    if blocks.is_empty() {
        return Err(Error::InvalidArgument("strategy needs at least one block".into()));
    }
    let sampler = Sampler::new(model, request)?;
    let mut state = StrategyState::new(blocks);
    let mut x = initial_latent(request.seed, &model.config().image_shape());
    let mut baseline = sampler.step(&x, 0, &state.hook())?.1;
    let mut log = Vec::new();
    let mut trace = Vec::with_capacity(sampler.loops());

    for i in 0..sampler.loops() {
        let scored = score_candidates(&sampler, &state, &x, i, &baseline)?;
        let (next, x0) = if scored.is_empty() {
            sampler.step(&x, i, &state.hook())?
        } else {
            let scores: Vec<f64> = scored.iter().map(|s| s.1).collect();
            let k = mode.pick(&scores).expect("non-empty candidates");
            let (block, score, next, x0) = scored.into_iter().nth(k).expect("picked index in range");
            state.commit(i, block)?;
            log.push(PickRecord { loop_index: i, picked: block.code(), score, mode });
            (next, x0)
        };
        trace.push(x0.clone());
        baseline = x0;
        x = next;
    }
    Ok(StrategyOutcome { image: x, state, log, x0_trace: trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::unet::UNetConfig;

    #[test]
    fn rms_diff() {
        let a = Tensor::from_fn(&[2, 3], |i| i as f32);
        assert_eq!(image_diff(&a, &a).unwrap(), 0.0);
        let b = a.map(|v| v - 2.0);
        assert_eq!(image_diff(&a, &b).unwrap(), 2.0);
        let c = Tensor::from_fn(&[2, 3], |i| (i * i) as f32 * 0.3);
        assert_eq!(image_diff(&a, &c).unwrap(), image_diff(&c, &a).unwrap());
        assert!(image_diff(&a, &Tensor::zeros(&[3, 2])).is_err());
    }

    #[test]
    fn pick_rule() {
        assert_eq!(PickMode::MostInfluential.pick(&[0.3, 0.7]), Some(1));
        assert_eq!(PickMode::LeastInfluential.pick(&[0.3, 0.7]), Some(0));
        assert_eq!(PickMode::MostInfluential.pick(&[0.5, 0.2, 0.5]), Some(0));
        assert_eq!(PickMode::LeastInfluential.pick(&[0.5, 0.2, 0.2]), Some(1));
        assert_eq!(PickMode::MostInfluential.pick(&[]), None);
        assert_eq!("least".parse::<PickMode>().unwrap(), PickMode::LeastInfluential);
        assert!("max".parse::<PickMode>().is_err());
    }

    #[test]
    fn state_cap() {
        let blocks = list_attention_blocks(&UNetConfig::default());
        let mut s = StrategyState::new(&blocks[..3]);
        assert_eq!(s.candidates(), blocks[..3].to_vec());
        s.commit(0, blocks[1]).unwrap();
        assert!(s.commit(1, blocks[1]).is_err());
        assert!(s.commit(1, blocks[5]).is_err());
        assert_eq!(s.candidates(), vec![blocks[0], blocks[2]]);
        assert_eq!(s.hook_with_gain(&blocks[0]).get(&blocks[0]), Some(1.0));
        assert_eq!(s.hook().get(&blocks[1]), Some(1.0));
        assert_eq!(s.hook().get(&blocks[2]), Some(0.0));
    }

    #[test]
    fn log_format() {
        let r = PickRecord { loop_index: 3, picked: "M0A0A2".into(), score: 0.0412, mode: PickMode::MostInfluential };
        assert_eq!(serde_json::to_string(&r).unwrap(), r#"{"loop":3,"picked":"M0A0A2","score":0.0412,"mode":"most"}"#);
    }

    #[test]
    fn single_block_picked_first_and_saturates() {
        let config = UNetConfig::default();
        let net = UNet::init(&config, 2).unwrap();
        let blocks = list_attention_blocks(&config);
        let mut req = DenoiseRequest::new(1, vec![0, 6, 10, 13]);
        req.num_loops = 3;
        for mode in [PickMode::MostInfluential, PickMode::LeastInfluential] {
            let out = greedy_denoise_blocks(&net, &req, mode, &blocks[..1]).unwrap();
            assert_eq!(out.state.picks(), &[(0, blocks[0])]);
            assert_eq!(out.log.len(), 1);
            assert_eq!(out.x0_trace.len(), 3);
        }
    }
}
