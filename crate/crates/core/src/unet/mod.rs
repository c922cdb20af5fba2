//! The conditional UNet and its addressable attention sub-blocks.

mod address;
mod config;
mod hook;
pub mod layers;
mod model;

pub use address::{list_attention_blocks, AttnSlot, BlockAddress, Section};
pub use config::UNetConfig;
pub use hook::{AttentionHook, Probe};
pub use model::{Block, UNet, UNetCache};
