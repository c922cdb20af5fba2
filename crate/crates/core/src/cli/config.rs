//! The JSON experiment document shared by every command. Emitted manifests
//! use the same format with every default filled in.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attnmod::{AttnModSetup, MultiplierSchedule, RateSpec};
use crate::diffusion::DenoiseRequest;
use crate::error::{Error, Result};
use crate::scan::ScanAxes;
use crate::strategy::{PickMode, DEFAULT_LOOPS};
use crate::trainer::TrainConfig;
use crate::unet::{list_attention_blocks, AttnSlot, BlockAddress, UNetConfig};
use crate::vocab;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "config_version")]
    pub version: u32,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub request: RequestSection,
    #[serde(default)]
    pub attnmod: Vec<SetupEntry>,
    #[serde(default)]
    pub scan: ScanSection,
    #[serde(default)]
    pub strategy: StrategySection,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub output: OutputSection,
    /// Written into manifests; ignored when a manifest is read back.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest: Option<ManifestInfo>,
}

fn config_version() -> u32 {
    CONFIG_VERSION
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            version: CONFIG_VERSION,
            model: ModelSection::default(),
            request: RequestSection::default(),
            attnmod: Vec::new(),
            scan: ScanSection::default(),
            strategy: StrategySection::default(),
            train: TrainConfig::default(),
            output: OutputSection::default(),
            manifest: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RequestSection {
    pub seed: u64,
    /// Token names in slot order: color, shape, background, style.
    pub prompt: Vec<String>,
    pub guidance_scale: f32,
    pub num_loops: usize,
}

impl Default for RequestSection {
    fn default() -> Self {
        let d = DenoiseRequest::new(0, Vec::new());
        RequestSection {
            seed: 0,
            prompt: ["red", "circle", "light", "flat"].map(String::from).to_vec(),
            guidance_scale: d.guidance_scale,
            num_loops: d.num_loops,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SetupEntry {
    pub block: String,
    pub start: f64,
    pub rate: RateSpec,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScanKind {
    Attention,
    Seed,
    Style,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScanSection {
    pub kind: ScanKind,
    /// Blocks driven by attention scans and the ablation report; empty
    /// means every cross-attention block.
    pub blocks: Vec<String>,
    pub axes: ScanAxes,
    /// Rows of a seed scan.
    pub seeds: Vec<u64>,
    /// Rows of a style scan.
    pub styles: Vec<String>,
    /// Extra columns of seed and style scans.
    pub setups: Vec<Vec<SetupEntry>>,
}

impl Default for ScanSection {
    fn default() -> Self {
        ScanSection {
            kind: ScanKind::Attention,
            blocks: Vec::new(),
            axes: ScanAxes::default(),
            seeds: vec![0, 1, 2, 3],
            styles: vocab::STYLES.map(|t| vocab::TOKENS[t].to_string()).collect(),
            setups: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StrategySection {
    pub mode: PickMode,
    pub loops: usize,
    /// Empty means every attention block.
    pub blocks: Vec<String>,
}

impl Default for StrategySection {
    fn default() -> Self {
        StrategySection { mode: PickMode::MostInfluential, loops: DEFAULT_LOOPS, blocks: Vec::new() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImageFormat {
    Ppm,
    Png,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub directory: PathBuf,
    pub formats: Vec<ImageFormat>,
    pub cell_px: usize,
    pub border_px: usize,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            directory: PathBuf::from("out"),
            formats: vec![ImageFormat::Ppm],
            cell_px: crate::raster::DEFAULT_CELL_PX,
            border_px: crate::raster::DEFAULT_BORDER_PX,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Artifact {
    pub file: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FailedCell {
    pub row: usize,
    pub col: usize,
    pub error: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ManifestInfo {
    pub command: String,
    pub crate_version: String,
    pub checkpoint_sha256: Option<String>,
    pub checkpoint_config_hash: Option<String>,
    pub artifacts: Vec<Artifact>,
    pub marked_cell: Option<[usize; 2]>,
    pub row_labels: Vec<String>,
    pub col_labels: Vec<String>,
    pub failed_cells: Vec<FailedCell>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let config: ExperimentConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if config.version != CONFIG_VERSION {
            return Err(Error::Config(format!("unsupported config version {}", config.version)));
        }
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    /// The denoise request, with token names resolved and `attnmod` applied.
    pub fn denoise_request(&self, model: &UNetConfig) -> Result<DenoiseRequest> {
        let r = &self.request;
        let prompt = vocab::parse_prompt(&r.prompt)?;
        let mut req = DenoiseRequest { guidance_scale: r.guidance_scale, num_loops: r.num_loops, ..DenoiseRequest::new(r.seed, prompt) };
        let setup = build_setup(&self.attnmod, model)?;
        if !setup.is_empty() {
            req = req.with_attnmod(setup);
        }
        req.validate()?;
        Ok(req)
    }

    /// Every block code in the document checked against `model`; unknown
    /// or malformed codes fail before any compute.
    pub fn validate_blocks(&self, model: &UNetConfig) -> Result<()> {
        build_setup(&self.attnmod, model)?;
        parse_blocks(&self.scan.blocks, model)?;
        parse_blocks(&self.strategy.blocks, model)?;
        for s in &self.scan.setups {
            build_setup(s, model)?;
        }
        Ok(())
    }

    /// Replaces empty block lists with their explicit defaults.
    pub fn expand_defaults(&mut self, model: &UNetConfig) {
        if self.scan.blocks.is_empty() {
            self.scan.blocks = cross_attention_blocks(model).iter().map(|b| b.code()).collect();
        }
        if self.strategy.blocks.is_empty() {
            self.strategy.blocks = list_attention_blocks(model).iter().map(|b| b.code()).collect();
        }
    }
}

pub fn cross_attention_blocks(model: &UNetConfig) -> Vec<BlockAddress> {
    list_attention_blocks(model).into_iter().filter(|b| b.slot == AttnSlot::Attn2).collect()
}

pub fn parse_blocks(codes: &[String], model: &UNetConfig) -> Result<Vec<BlockAddress>> {
    codes.iter().map(|c| BlockAddress::parse(c, model)).collect()
}

pub fn build_setup(entries: &[SetupEntry], model: &UNetConfig) -> Result<AttnModSetup> {
    let mut setup = AttnModSetup::new();
    for e in entries {
        if !e.start.is_finite() || !e.rate.value().is_finite() {
            return Err(Error::Config(format!("non-finite schedule for {}", e.block)));
        }
        setup.insert(BlockAddress::parse(&e.block, model)?, MultiplierSchedule::new(e.start, e.rate))?;
    }
    Ok(setup)
}
