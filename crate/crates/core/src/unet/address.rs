use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::unet::UNetConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Section {
    Down,
    Mid,
    Up,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum AttnSlot {
    /// Self attention over image features.
    Attn1,
    /// Cross attention over the prompt context.
    Attn2,
}

/// Names one attention sub-block, e.g. `U1A1A2` ⇔
/// `up_blocks.1.attentions.1.transformer_blocks.0.attn2`.
///
/// Ordering follows network order: down, mid, up; then block, attention,
/// and slot indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct BlockAddress {
    pub section: Section,
    pub block_index: usize,
    pub attention_index: usize,
    pub transformer_index: usize,
    pub slot: AttnSlot,
}

impl BlockAddress {
    pub fn new(section: Section, block_index: usize, attention_index: usize, slot: AttnSlot) -> Self {
        BlockAddress { section, block_index, attention_index, transformer_index: 0, slot }
    }

    /// Parameter-path prefix of the owning transformer stack, e.g.
    /// `up_blocks.1.attentions.1`.
    pub fn attention_path(&self) -> String {
        match self.section {
            Section::Down => format!("down_blocks.{}.attentions.{}", self.block_index, self.attention_index),
            Section::Mid => format!("mid_block.attentions.{}", self.attention_index),
            Section::Up => format!("up_blocks.{}.attentions.{}", self.block_index, self.attention_index),
        }
    }

    pub fn path(&self) -> String {
        let slot = match self.slot {
            AttnSlot::Attn1 => 1,
            AttnSlot::Attn2 => 2,
        };
        format!("{}.transformer_blocks.{}.attn{slot}", self.attention_path(), self.transformer_index)
    }

    pub fn code(&self) -> String {
        let section = match self.section {
            Section::Down => 'D',
            Section::Mid => 'M',
            Section::Up => 'U',
        };
        let slot = match self.slot {
            AttnSlot::Attn1 => 1,
            AttnSlot::Attn2 => 2,
        };
        format!("{section}{}A{}A{slot}", self.block_index, self.attention_index)
    }

    /// Spatial resolution and channel count the sub-block operates at.
    pub fn geometry(&self, config: &UNetConfig) -> (usize, usize) {
        let level = match self.section {
            Section::Down => self.block_index,
            Section::Mid => config.bottleneck(),
            Section::Up => config.up_level(self.block_index),
        };
        (config.resolution(level), config.channels(level))
    }

    pub fn parse(code: &str, config: &UNetConfig) -> Result<Self> {
        let address: BlockAddress = code.parse()?;
        if !list_attention_blocks(config).contains(&address) {
            return Err(Error::UnknownBlock(code.to_string()));
        }
        Ok(address)
    }
}

impl FromStr for BlockAddress {
    type Err = Error;

    /// Grammar only: `{D|M|U}{i}A{j}A{1|2}`. Use [`BlockAddress::parse`] to
    /// also check the address exists in a configuration.
    fn from_str(code: &str) -> Result<Self> {
        let malformed = || Error::MalformedBlockCode(code.to_string());
        let mut chars = code.chars();
        let section = match chars.next() {
            Some('D') => Section::Down,
            Some('M') => Section::Mid,
            Some('U') => Section::Up,
            _ => return Err(malformed()),
        };
        let rest = chars.as_str();
        let mut parts = rest.split('A');
        let number = |p: Option<&str>| -> Result<usize> {
            let p = p.ok_or_else(malformed)?;
            if p.is_empty() || !p.bytes().all(|b| b.is_ascii_digit()) || (p.len() > 1 && p.starts_with('0')) {
                return Err(malformed());
            }
            p.parse().map_err(|_| malformed())
        };
        let block_index = number(parts.next())?;
        let attention_index = number(parts.next())?;
        let slot = match number(parts.next())? {
            1 => AttnSlot::Attn1,
            2 => AttnSlot::Attn2,
            _ => return Err(malformed()),
        };
        if parts.next().is_some() || (section == Section::Mid && block_index != 0) {
            return Err(malformed());
        }
        Ok(BlockAddress::new(section, block_index, attention_index, slot))
    }
}

impl fmt::Display for BlockAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.code())
    }
}

impl Serialize for BlockAddress {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.code())
    }
}

impl<'de> Deserialize<'de> for BlockAddress {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let code = String::deserialize(d)?;
        code.parse().map_err(serde::de::Error::custom)
    }
}

/// Every modifiable attention sub-block in network order: down blocks
/// ascending, mid, up blocks ascending; attn1 before attn2.
pub fn list_attention_blocks(config: &UNetConfig) -> Vec<BlockAddress> {
    let mut out = Vec::new();
    let mut push_pair = |section, block, attention| {
        out.push(BlockAddress::new(section, block, attention, AttnSlot::Attn1));
        out.push(BlockAddress::new(section, block, attention, AttnSlot::Attn2));
    };
    for level in 0..config.bottleneck() {
        if config.level_has_attention(level) {
            for j in 0..config.down_layers(level) {
                push_pair(Section::Down, level, j);
            }
        }
    }
    if config.level_has_attention(config.bottleneck()) {
        push_pair(Section::Mid, 0, 0);
    }
    for index in 1..config.levels() {
        let level = config.up_level(index);
        if config.level_has_attention(level) {
            for j in 0..config.up_layers(level) {
                push_pair(Section::Up, index, j);
            }
        }
    }
    out
}
