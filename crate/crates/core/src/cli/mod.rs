//! Command-line front end. Every command reads an [`ExperimentConfig`] and
//! writes its artifacts plus a `manifest.json` that reruns them exactly.

pub mod config;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};

use crate::diffusion::denoise;
use crate::error::Error;
use crate::raster::RgbImage;
use crate::scan::{self, GridImage};
use crate::strategy::greedy_denoise_blocks;
use crate::trainer::{self, load_model, Checkpoint};
use crate::unet::{list_attention_blocks, UNet};
use crate::vocab;

pub use config::{ExperimentConfig, ImageFormat, ManifestInfo, ScanKind};

pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_DIVERGENCE: u8 = 3;
pub const EXIT_IO: u8 = 4;
pub const EXIT_NUMERIC: u8 = 5;

pub const MANIFEST_FILE: &str = "manifest.json";

/// An error tagged with the process exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        CliError { code: EXIT_CONFIG, message: message.into() }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config(_)
            | Error::InvalidArgument(_)
            | Error::MalformedBlockCode(_)
            | Error::UnknownBlock(_)
            | Error::UnknownToken(_)
            | Error::Json(_) => EXIT_CONFIG,
            Error::Divergence { .. } => EXIT_DIVERGENCE,
            Error::Io { .. }
            | Error::BadMagic
            | Error::VersionMismatch(_)
            | Error::Truncated(_)
            | Error::DuplicateTensor(_)
            | Error::MissingTensor(_)
            | Error::Checkpoint(_) => EXIT_IO,
            Error::NonFinite(_) | Error::Shape(_) => EXIT_NUMERIC,
        };
        CliError { code, message: e.to_string() }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "attnmod", version, about = "Toy diffusion engine with per-loop attention multipliers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a checkpoint from the `train` section.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Loss log path; defaults to the checkpoint path with `.loss.jsonl`.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Denoise one image.
    Generate(RunArgs),
    /// Attention, seed or style scan, per `scan.kind`.
    Scan(RunArgs),
    /// Greedy capped-gain strategy.
    Strategy(RunArgs),
    /// Distance report over a constant-rate attention scan.
    Ablate(RunArgs),
    /// Print the addressable attention blocks of a checkpoint.
    InspectBlocks {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        json: bool,
    },
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides `output.directory`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides `request.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides `model.checkpoint`.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    /// Worker threads for independent cells and candidates (0 = all cores).
    #[arg(long, default_value_t = 0)]
    pub jobs: usize,
}

pub fn main_with(cli: Cli) -> ExitCode {
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}

pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Train { config, out, log } => cmd_train(&config, &out, log.as_deref()),
        Command::Generate(args) => cmd_generate(&args),
        Command::Scan(args) => cmd_scan(&args),
        Command::Strategy(args) => cmd_strategy(&args),
        Command::Ablate(args) => cmd_ablate(&args),
        Command::InspectBlocks { ckpt, json } => cmd_inspect_blocks(&ckpt, json),
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e).into())
}

pub fn default_log_path(ckpt: &Path) -> PathBuf {
    ckpt.with_extension("loss.jsonl")
}

pub fn cmd_train(config_path: &Path, out: &Path, log: Option<&Path>) -> CliResult<()> {
    let config = ExperimentConfig::load(config_path)?;
    config.train.validate()?;
    let log_path = log.map(Path::to_path_buf).unwrap_or_else(|| default_log_path(out));
    let mut log_file = std::fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut io_error = None;
    let ckpt = trainer::train(&config.train, &mut |r| {
        if io_error.is_none() {
            if let Err(e) = writeln!(log_file, "{}", trainer::log_line(&r)) {
                io_error = Some(e);
            }
        }
        eprintln!("step {:>6}  loss {:.5}", r.step, r.loss);
    })?;
    if let Some(e) = io_error {
        return Err(Error::io(&log_path, e).into());
    }
    ckpt.save(out)?;
    Ok(())
}

/// A loaded experiment: resolved config, network and checkpoint digest.
struct Session {
    config: ExperimentConfig,
    model: UNet,
    ckpt: Checkpoint,
    ckpt_sha: String,
    out_dir: PathBuf,
    jobs: usize,
}

impl Session {
    fn open(args: &RunArgs) -> CliResult<Self> {
        let mut config = ExperimentConfig::load(&args.config)?;
        if let Some(seed) = args.seed {
            config.request.seed = seed;
        }
        if let Some(out) = &args.out {
            config.output.directory = out.clone();
        }
        if let Some(ckpt) = &args.ckpt {
            config.model.checkpoint = Some(ckpt.clone());
        }
        config.manifest = None;
        if config.output.formats.is_empty() {
            return Err(CliError::config("output.formats must not be empty"));
        }
        let path = config.model.checkpoint.clone().ok_or_else(|| CliError::config("model.checkpoint is required"))?;
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let ckpt = Checkpoint::from_bytes(&bytes)?;
        config.validate_blocks(ckpt.config())?;
        config.expand_defaults(ckpt.config());
        let model = ckpt.to_model()?;
        let out_dir = config.output.directory.clone();
        std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
        Ok(Session { config, model, ckpt, ckpt_sha: sha256_hex(&bytes), out_dir, jobs: args.jobs })
    }

    fn manifest(&self, command: &str) -> ManifestInfo {
        ManifestInfo {
            command: command.to_string(),
            crate_version: env!("CARGO_PKG_VERSION").to_string(),
            checkpoint_sha256: Some(self.ckpt_sha.clone()),
            checkpoint_config_hash: Some(self.ckpt.metadata.config_hash.clone()),
            ..ManifestInfo::default()
        }
    }

    fn artifact(&self, info: &mut ManifestInfo, name: &str, bytes: &[u8]) -> CliResult<()> {
        write_file(&self.out_dir.join(name), bytes)?;
        info.artifacts.push(config::Artifact { file: name.to_string(), sha256: sha256_hex(bytes) });
        Ok(())
    }

    fn image(&self, info: &mut ManifestInfo, stem: &str, img: &RgbImage) -> CliResult<()> {
        for format in &self.config.output.formats {
            match format {
                ImageFormat::Ppm => self.artifact(info, &format!("{stem}.ppm"), &img.to_ppm())?,
                ImageFormat::Png => self.artifact(info, &format!("{stem}.png"), &img.to_png()?)?,
            }
        }
        Ok(())
    }

    fn finish(&self, info: ManifestInfo) -> CliResult<()> {
        let mut manifest = self.config.clone();
        manifest.manifest = Some(info);
        write_file(&self.out_dir.join(MANIFEST_FILE), manifest.to_json().as_bytes())
    }

    fn grid(&self, info: &mut ManifestInfo, grid: &GridImage) -> CliResult<()> {
        let o = &self.config.output;
        self.image(info, "grid", &scan::compose_grid(grid, o.cell_px, o.border_px)?)?;
        info.marked_cell = grid.marked_cell.map(|(r, c)| [r, c]);
        info.row_labels = grid.row_labels.clone();
        info.col_labels = grid.col_labels.clone();
        for (i, e) in grid.errors.iter().enumerate() {
            if let Some(error) = e {
                eprintln!("cell ({}, {}) failed: {error}", i / grid.cols, i % grid.cols);
                info.failed_cells.push(config::FailedCell { row: i / grid.cols, col: i % grid.cols, error: error.clone() });
            }
        }
        Ok(())
    }
}

pub fn cmd_generate(args: &RunArgs) -> CliResult<()> {
    let s = Session::open(args)?;
    let request = s.config.denoise_request(s.ckpt.config())?;
    let out = denoise(&s.model, &request)?;
    let mut info = s.manifest("generate");
    s.image(&mut info, "image", &RgbImage::from_tensor(&out.image)?)?;
    s.finish(info)
}

pub fn cmd_scan(args: &RunArgs) -> CliResult<()> {
    let s = Session::open(args)?;
    let model_config = s.ckpt.config();
    let mut base = s.config.denoise_request(model_config)?;
    if base.attnmod.take().is_some() {
        return Err(CliError::config("scans take their setups from the scan section; remove attnmod"));
    }
    let sc = &s.config.scan;
    let setups = sc.setups.iter().map(|e| config::build_setup(e, model_config)).collect::<Result<Vec<_>, _>>()?;
    let grid = match sc.kind {
        ScanKind::Attention => {
            let blocks = config::parse_blocks(&sc.blocks, model_config)?;
            scan::attention_scan(&s.model, &base, &blocks, &sc.axes, s.jobs)?
        }
        ScanKind::Seed => scan::seed_scan(&s.model, &base, &sc.seeds, &setups, s.jobs)?,
        ScanKind::Style => {
            let styles = sc.styles.iter().map(|t| vocab::token_id(t)).collect::<Result<Vec<_>, _>>()?;
            scan::style_scan(&s.model, &base, &styles, &setups, s.jobs)?
        }
    };
    let mut info = s.manifest("scan");
    s.grid(&mut info, &grid)?;
    s.finish(info)
}

pub fn cmd_strategy(args: &RunArgs) -> CliResult<()> {
    let s = Session::open(args)?;
    let model_config = s.ckpt.config();
    let mut request = s.config.denoise_request(model_config)?;
    if request.attnmod.is_some() {
        return Err(CliError::config("strategy runs start from zero attention; remove attnmod"));
    }
    request.num_loops = s.config.strategy.loops;
    let blocks = config::parse_blocks(&s.config.strategy.blocks, model_config)?;
    let mode = s.config.strategy.mode;
    let outcome = scan::run_indexed(1, s.jobs, |_| greedy_denoise_blocks(&s.model, &request, mode, &blocks))?
        .pop()
        .expect("one run")?;
    let mut info = s.manifest("strategy");
    s.image(&mut info, "image", &RgbImage::from_tensor(&outcome.image)?)?;
    let mut log = String::new();
    for r in &outcome.log {
        log.push_str(&serde_json::to_string(r).expect("pick record serializes"));
        log.push('\n');
    }
    s.artifact(&mut info, "picks.jsonl", log.as_bytes())?;
    s.finish(info)
}

pub fn cmd_ablate(args: &RunArgs) -> CliResult<()> {
    let s = Session::open(args)?;
    let model_config = s.ckpt.config();
    let mut base = s.config.denoise_request(model_config)?;
    if base.attnmod.take().is_some() {
        return Err(CliError::config("ablation takes its setups from the scan section; remove attnmod"));
    }
    let blocks = config::parse_blocks(&s.config.scan.blocks, model_config)?;
    let report = scan::ablation_report(&s.model, &base, &blocks, &s.config.scan.axes, s.jobs)?;
    let mut info = s.manifest("ablate");
    let mut json = serde_json::to_string_pretty(&report).expect("report serializes");
    json.push('\n');
    s.artifact(&mut info, "report.json", json.as_bytes())?;
    s.finish(info)
}

pub fn cmd_inspect_blocks(ckpt: &Path, json: bool) -> CliResult<()> {
    let (_, ckpt) = load_model(ckpt)?;
    let config = ckpt.config();
    let rows: Vec<_> = list_attention_blocks(config)
        .into_iter()
        .map(|b| {
            let (res, ch) = b.geometry(config);
            (b.code(), b.path(), res, ch)
        })
        .collect();
    let mut out = String::new();
    if json {
        let list: Vec<_> = rows
            .iter()
            .map(|(code, path, res, ch)| serde_json::json!({"code": code, "path": path, "resolution": res, "channels": ch}))
            .collect();
        out = serde_json::to_string_pretty(&list).expect("json");
        out.push('\n');
    } else {
        out.push_str(&format!("{:<8} {:<48} {:>10} {:>8}\n", "code", "path", "resolution", "channels"));
        for (code, path, res, ch) in rows {
            out.push_str(&format!("{code:<8} {path:<48} {:>10} {ch:>8}\n", format!("{res}x{res}")));
        }
    }
    print!("{out}");
    Ok(())
}
