use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Architecture hyperparameters of the conditional UNet.
///
/// Level `l` runs at `image_size >> l` pixels with
/// `base_channels * channel_multipliers[l]` channels; the last level is the
/// bottleneck and is served by the mid block. Down and up blocks at a level
/// whose resolution is listed in `attention_resolutions` interleave a
/// transformer block after every resnet; the first up block (bottleneck
/// resolution) never carries attention, so attention at that resolution
/// lives in the mid block only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UNetConfig {
    pub image_size: usize,
    pub in_channels: usize,
    pub base_channels: usize,
    pub channel_multipliers: Vec<usize>,
    pub attention_resolutions: Vec<usize>,
    pub heads: usize,
    pub context_dim: usize,
    pub context_length: usize,
    pub vocab_size: usize,
    pub time_freq_dim: usize,
    pub time_embed_dim: usize,
    /// Resnets per down block at attention levels (up blocks get one more).
    pub layers_per_block: usize,
    /// Resnets per block at attention-free levels.
    pub plain_layers_per_block: usize,
    pub norm_groups: usize,
    pub ff_mult: usize,
}

impl Default for UNetConfig {
    /// The desk-scale network the shipped checkpoint is trained with.
    fn default() -> Self {
        UNetConfig {
            image_size: 32,
            in_channels: 3,
            base_channels: 8,
            channel_multipliers: vec![1, 2, 4],
            attention_resolutions: vec![16, 8],
            heads: 2,
            context_dim: 64,
            context_length: 4,
            vocab_size: 19,
            time_freq_dim: 32,
            time_embed_dim: 64,
            layers_per_block: 2,
            plain_layers_per_block: 1,
            norm_groups: 4,
            ff_mult: 2,
        }
    }
}

impl UNetConfig {
    /// Full-width variant (64 base channels, 4 heads). Same block layout as
    /// the default, far too slow to train on a single CPU core.
    pub fn wide() -> Self {
        UNetConfig {
            base_channels: 64,
            heads: 4,
            time_freq_dim: 128,
            time_embed_dim: 256,
            norm_groups: 8,
            ff_mult: 4,
            ..UNetConfig::default()
        }
    }

    pub fn levels(&self) -> usize {
        self.channel_multipliers.len()
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels * self.channel_multipliers[level]
    }

    pub fn resolution(&self, level: usize) -> usize {
        self.image_size >> level
    }

    pub fn bottleneck(&self) -> usize {
        self.levels() - 1
    }

    pub fn level_has_attention(&self, level: usize) -> bool {
        self.attention_resolutions.contains(&self.resolution(level))
    }

    /// Resnet count of `down_blocks.{level}`.
    pub fn down_layers(&self, level: usize) -> usize {
        if self.level_has_attention(level) {
            self.layers_per_block
        } else {
            self.plain_layers_per_block
        }
    }

    /// Resnet count of the up block serving `level`.
    pub fn up_layers(&self, level: usize) -> usize {
        if level != self.bottleneck() && self.level_has_attention(level) {
            self.layers_per_block + 1
        } else {
            self.plain_layers_per_block
        }
    }

    /// Level served by `up_blocks.{index}`.
    pub fn up_level(&self, index: usize) -> usize {
        self.bottleneck() - index
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.in_channels, self.image_size, self.image_size]
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(format!("unet: {msg}")));
        if self.levels() < 2 {
            return fail("need at least two levels".into());
        }
        if self.image_size % (1 << self.bottleneck()) != 0 {
            return fail(format!("image_size {} not divisible by 2^{}", self.image_size, self.bottleneck()));
        }
        if [self.in_channels, self.base_channels, self.heads, self.context_dim, self.context_length]
            .contains(&0)
        {
            return fail("zero-sized dimension".into());
        }
        if self.vocab_size == 0 || self.time_embed_dim == 0 || self.ff_mult == 0 {
            return fail("zero-sized dimension".into());
        }
        if self.vocab_size != crate::vocab::SIZE || self.context_length != crate::vocab::PROMPT_LEN {
            return fail(format!(
                "vocabulary is fixed at {} tokens and prompts at {}",
                crate::vocab::SIZE,
                crate::vocab::PROMPT_LEN
            ));
        }
        if self.time_freq_dim < 2 || self.time_freq_dim % 2 != 0 {
            return fail("time_freq_dim must be even".into());
        }
        if self.layers_per_block == 0 || self.plain_layers_per_block == 0 {
            return fail("blocks need at least one resnet".into());
        }
        for level in 0..self.levels() {
            let c = self.channels(level);
            if c == 0 || c % self.norm_groups != 0 {
                return fail(format!("{c} channels not divisible into {} groups", self.norm_groups));
            }
            if self.level_has_attention(level) && c % self.heads != 0 {
                return fail(format!("{c} channels not divisible into {} heads", self.heads));
            }
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&json);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}
