//! Per-loop attention multiplier schedules.

use std::collections::BTreeMap;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::unet::{AttentionHook, BlockAddress};

/// How the multiplier changes from one denoising loop to the next.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum RateSpec {
    /// Fixed increment `r` per loop.
    Constant(f64),
    /// The increment itself grows: loop `j` adds `a·j`.
    Linear(f64),
}

impl RateSpec {
    pub fn value(&self) -> f64 {
        match *self {
            RateSpec::Constant(r) | RateSpec::Linear(r) => r,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MultiplierSchedule {
    pub start: f64,
    pub rate: RateSpec,
}

impl MultiplierSchedule {
    pub fn new(start: f64, rate: RateSpec) -> Self {
        MultiplierSchedule { start, rate }
    }

    pub fn constant(start: f64, rate: f64) -> Self {
        Self::new(start, RateSpec::Constant(rate))
    }

    pub fn linear(start: f64, accel: f64) -> Self {
        Self::new(start, RateSpec::Linear(accel))
    }

    /// The schedule that reproduces the unmodified network.
    pub fn identity() -> Self {
        Self::constant(1.0, 0.0)
    }

    /// Multiplier at loop `i`, evaluated in f64 and rounded once to f32.
    /// Constant: `m0 + r·i`. Linear: `m0 + a·i(i−1)/2`.
    pub fn multiplier_at(&self, i: usize) -> f32 {
        let i = i as f64;
        let value = match self.rate {
            RateSpec::Constant(r) => self.start + r * i,
            RateSpec::Linear(a) => self.start + a * (i * (i - 1.0) / 2.0),
        };
        value as f32
    }
}

/// Schedules for a set of attention sub-blocks. Unlisted blocks run
/// unscaled.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AttnModSetup {
    entries: BTreeMap<BlockAddress, MultiplierSchedule>,
}

impl AttnModSetup {
    pub fn new() -> Self {
        Self::default()
    }

    /// Applies one schedule to every listed block.
    pub fn synchronous(blocks: &[BlockAddress], schedule: MultiplierSchedule) -> Result<Self> {
        let mut setup = Self::new();
        for &b in blocks {
            setup.insert(b, schedule)?;
        }
        Ok(setup)
    }

    pub fn insert(&mut self, block: BlockAddress, schedule: MultiplierSchedule) -> Result<()> {
        if self.entries.insert(block, schedule).is_some() {
            return Err(Error::InvalidArgument(format!("block {block} listed twice")));
        }
        Ok(())
    }

    pub fn get(&self, block: &BlockAddress) -> Option<&MultiplierSchedule> {
        self.entries.get(block)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&BlockAddress, &MultiplierSchedule)> {
        self.entries.iter()
    }

    pub fn multipliers_at(&self, i: usize) -> AttentionHook {
        self.entries.iter().map(|(&b, s)| (b, s.multiplier_at(i))).collect()
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SetupEntry {
    block: BlockAddress,
    start: f64,
    rate: RateSpec,
}

impl Serialize for AttnModSetup {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let list: Vec<SetupEntry> =
            self.entries.iter().map(|(&block, m)| SetupEntry { block, start: m.start, rate: m.rate }).collect();
        list.serialize(s)
    }
}

impl<'de> Deserialize<'de> for AttnModSetup {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let list = Vec::<SetupEntry>::deserialize(d)?;
        let mut setup = AttnModSetup::new();
        for e in list {
            setup.insert(e.block, MultiplierSchedule::new(e.start, e.rate)).map_err(serde::de::Error::custom)?;
        }
        Ok(setup)
    }
}

/// Grid of setups: row `r`, column `c` applies `(starts[c], rates[r])` to
/// every listed block.
pub fn scan_setups(blocks: &[BlockAddress], starts: &[f64], rates: &[RateSpec]) -> Result<Vec<Vec<AttnModSetup>>> {
    if blocks.is_empty() || starts.is_empty() || rates.is_empty() {
        return Err(Error::InvalidArgument("scan axes and block list must be non-empty".into()));
    }
    rates
        .iter()
        .map(|&rate| starts.iter().map(|&start| AttnModSetup::synchronous(blocks, MultiplierSchedule::new(start, rate))).collect())
        .collect()
}
