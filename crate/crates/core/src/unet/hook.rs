use std::collections::BTreeMap;

use crate::nn::Tensor;
use crate::unet::address::BlockAddress;

/// Per-block attention multipliers for one forward pass. Blocks absent from
/// the mapping run unscaled.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AttentionHook {
    multipliers: BTreeMap<BlockAddress, f32>,
}

impl AttentionHook {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, address: BlockAddress, multiplier: f32) {
        self.multipliers.insert(address, multiplier);
    }

    pub fn with(mut self, address: BlockAddress, multiplier: f32) -> Self {
        self.set(address, multiplier);
        self
    }

    pub fn get(&self, address: &BlockAddress) -> Option<f32> {
        self.multipliers.get(address).copied()
    }

    pub fn is_empty(&self) -> bool {
        self.multipliers.is_empty()
    }

    pub fn len(&self) -> usize {
        self.multipliers.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&BlockAddress, &f32)> {
        self.multipliers.iter()
    }
}

impl FromIterator<(BlockAddress, f32)> for AttentionHook {
    fn from_iter<I: IntoIterator<Item = (BlockAddress, f32)>>(iter: I) -> Self {
        AttentionHook { multipliers: iter.into_iter().collect() }
    }
}

/// Instrumentation for a forward pass.
#[derive(Debug, Clone, Default)]
pub struct Probe {
    /// Record the scaled attention output `m·h` of this sub-block.
    pub capture: Option<BlockAddress>,
    /// Filled after the forward pass when `capture` is set.
    pub captured: Option<Tensor>,
    /// Feed an all-zero context to this cross-attention sub-block.
    pub zero_context: Option<BlockAddress>,
}

impl Probe {
    pub fn capture(address: BlockAddress) -> Self {
        Probe { capture: Some(address), ..Probe::default() }
    }

    pub fn zero_context(address: BlockAddress) -> Self {
        Probe { zero_context: Some(address), ..Probe::default() }
    }

    pub(crate) fn observe(&mut self, address: &BlockAddress, scaled: &Tensor) {
        if self.capture.as_ref() == Some(address) {
            self.captured = Some(scaled.clone());
        }
    }
}
