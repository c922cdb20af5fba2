//! Attention, seed and style scans, grid composition and the ablation
//! report.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attnmod::{scan_setups, AttnModSetup, MultiplierSchedule, RateSpec};
use crate::diffusion::{denoise, DenoiseRequest};
use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::raster::{self, RgbImage};
use crate::strategy::image_diff;
use crate::unet::{BlockAddress, UNet};
use crate::vocab;

pub const DEFAULT_STARTS: [f64; 12] = [-20.0, -10.0, -5.0, -2.0, 0.0, 1.0, 2.0, 5.0, 10.0, 20.0, 35.0, 50.0];
pub const DEFAULT_RATES: [f64; 9] = [-1.0, -0.6, -0.3, -0.1, 0.0, 0.1, 0.3, 0.6, 1.0];
pub const DEFAULT_ACCELS: [f64; 7] = [-0.2, -0.1, -0.05, 0.0, 0.05, 0.1, 0.2];

/// Drift thresholds separating weak from strong schedules over 30 loops.
pub const WEAK_START_DRIFT: f64 = 2.0;
pub const WEAK_RATE: f64 = 0.2;
pub const ABLATION_LOOPS: usize = 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RateFamily {
    Constant,
    Linear,
}

impl RateFamily {
    pub fn spec(&self, value: f64) -> RateSpec {
        match self {
            RateFamily::Constant => RateSpec::Constant(value),
            RateFamily::Linear => RateSpec::Linear(value),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScanAxes {
    pub starts: Vec<f64>,
    pub rates: Vec<f64>,
    pub rate_family: RateFamily,
}

impl Default for ScanAxes {
    fn default() -> Self {
        ScanAxes { starts: DEFAULT_STARTS.to_vec(), rates: DEFAULT_RATES.to_vec(), rate_family: RateFamily::Constant }
    }
}

impl ScanAxes {
    pub fn linear() -> Self {
        ScanAxes { rates: DEFAULT_ACCELS.to_vec(), rate_family: RateFamily::Linear, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.starts.iter().chain(&self.rates).any(|v| !v.is_finite()) {
            return Err(Error::Config("scan axis values must be finite".into()));
        }
        if !self.starts.contains(&1.0) || !self.starts.contains(&0.0) {
            return Err(Error::Config("scan starts must include 0.0 and 1.0".into()));
        }
        if !self.rates.contains(&0.0) {
            return Err(Error::Config("scan rates must include 0.0".into()));
        }
        Ok(())
    }

    pub fn rate_specs(&self) -> Vec<RateSpec> {
        self.rates.iter().map(|&r| self.rate_family.spec(r)).collect()
    }

    /// `(row, col)` of the start 1.0, rate 0.0 cell.
    pub fn default_cell(&self) -> Option<(usize, usize)> {
        let row = self.rates.iter().position(|&r| r == 0.0)?;
        let col = self.starts.iter().position(|&s| s == 1.0)?;
        Some((row, col))
    }

    /// `(row, col)` of the start 0.0, rate 0.0 cell.
    pub fn zero_cell(&self) -> Option<(usize, usize)> {
        let row = self.rates.iter().position(|&r| r == 0.0)?;
        let col = self.starts.iter().position(|&s| s == 0.0)?;
        Some((row, col))
    }
}

/// Scan output; `cells` is row-major and `None` marks a failed cell.
#[derive(Debug, Clone)]
pub struct GridImage {
    pub rows: usize,
    pub cols: usize,
    pub cells: Vec<Option<Tensor>>,
    pub errors: Vec<Option<String>>,
    pub marked_cell: Option<(usize, usize)>,
    pub row_labels: Vec<String>,
    pub col_labels: Vec<String>,
}

impl GridImage {
    pub fn cell(&self, row: usize, col: usize) -> Option<&Tensor> {
        self.cells[row * self.cols + col].as_ref()
    }

    pub fn failures(&self) -> usize {
        self.cells.iter().filter(|c| c.is_none()).count()
    }
}

/// Runs `f` for every index on a pool of `jobs` threads (0 = rayon default)
/// and assembles results by index.
pub fn run_indexed<T: Send>(n: usize, jobs: usize, f: impl Fn(usize) -> T + Sync + Send) -> Result<Vec<T>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    Ok(pool.install(|| (0..n).into_par_iter().map(f).collect()))
}

fn run_grid(
    model: &UNet,
    requests: Vec<DenoiseRequest>,
    rows: usize,
    cols: usize,
    jobs: usize,
    row_labels: Vec<String>,
    col_labels: Vec<String>,
    marked_cell: Option<(usize, usize)>,
) -> Result<GridImage> {
    let results = run_indexed(requests.len(), jobs, |i| denoise(model, &requests[i]).map(|o| o.image))?;
    let mut cells = Vec::with_capacity(results.len());
    let mut errors = Vec::with_capacity(results.len());
    for r in results {
        match r {
            Ok(img) => {
                cells.push(Some(img));
                errors.push(None);
            }
            Err(e) => {
                cells.push(None);
                errors.push(Some(e.to_string()));
            }
        }
    }
    Ok(GridImage { rows, cols, cells, errors, marked_cell, row_labels, col_labels })
}

fn label(v: f64) -> String {
    format!("{v}")
}

/// Requests for every cell of an attention scan, row-major.
pub fn attention_scan_requests(base: &DenoiseRequest, blocks: &[BlockAddress], axes: &ScanAxes) -> Result<Vec<DenoiseRequest>> {
    if base.attnmod.is_some() {
        return Err(Error::InvalidArgument("scan base request must not carry an attnmod setup".into()));
    }
    axes.validate()?;
    let grid = scan_setups(blocks, &axes.starts, &axes.rate_specs())?;
    Ok(grid.into_iter().flatten().map(|s| base.clone().with_attnmod(s)).collect())
}

/// Rows are rates, columns are starts; every cell shares `base`'s
/// diffusion input.
pub fn attention_scan(model: &UNet, base: &DenoiseRequest, blocks: &[BlockAddress], axes: &ScanAxes, jobs: usize) -> Result<GridImage> {
    let requests = attention_scan_requests(base, blocks, axes)?;
    run_grid(
        model,
        requests,
        axes.rates.len(),
        axes.starts.len(),
        jobs,
        axes.rates.iter().map(|&r| label(r)).collect(),
        axes.starts.iter().map(|&s| label(s)).collect(),
        axes.default_cell(),
    )
}

fn setup_columns(setups: &[AttnModSetup]) -> Vec<Option<AttnModSetup>> {
    std::iter::once(None).chain(setups.iter().cloned().map(Some)).collect()
}

fn column_labels(setups: &[AttnModSetup]) -> Vec<String> {
    std::iter::once("default".to_string()).chain((1..=setups.len()).map(|i| format!("setup {i}"))).collect()
}

/// Rows are seeds; column 0 is the default output, then one column per
/// setup.
pub fn seed_scan(model: &UNet, base: &DenoiseRequest, seeds: &[u64], setups: &[AttnModSetup], jobs: usize) -> Result<GridImage> {
    if seeds.is_empty() {
        return Err(Error::InvalidArgument("seed scan needs at least one seed".into()));
    }
    let columns = setup_columns(setups);
    let requests = seeds
        .iter()
        .flat_map(|&seed| {
            columns.iter().map(move |s| DenoiseRequest { seed, attnmod: s.clone(), ..base.clone() })
        })
        .collect();
    run_grid(
        model,
        requests,
        seeds.len(),
        columns.len(),
        jobs,
        seeds.iter().map(|s| s.to_string()).collect(),
        column_labels(setups),
        None,
    )
}

/// Rows substitute each style token into the prompt's style slot.
pub fn style_scan(model: &UNet, base: &DenoiseRequest, styles: &[usize], setups: &[AttnModSetup], jobs: usize) -> Result<GridImage> {
    if styles.is_empty() {
        return Err(Error::InvalidArgument("style scan needs at least one style".into()));
    }
    if base.prompt.len() != vocab::PROMPT_LEN {
        return Err(Error::InvalidArgument("prompt has no style slot".into()));
    }
    for &s in styles {
        if !vocab::STYLES.contains(&s) && s != vocab::NULL {
            return Err(Error::UnknownToken(vocab::token_name(s).unwrap_or("?").to_string()));
        }
    }
    let columns = setup_columns(setups);
    let requests = styles
        .iter()
        .flat_map(|&style| {
            let mut prompt = base.prompt.clone();
            prompt[vocab::STYLE_SLOT] = style;
            columns.iter().map(move |s| DenoiseRequest { prompt: prompt.clone(), attnmod: s.clone(), ..base.clone() })
        })
        .collect();
    run_grid(
        model,
        requests,
        styles.len(),
        columns.len(),
        jobs,
        styles.iter().map(|&s| vocab::token_name(s).unwrap_or("?").to_string()).collect(),
        column_labels(setups),
        None,
    )
}

pub fn compose_grid(grid: &GridImage, cell_px: usize, border_px: usize) -> Result<RgbImage> {
    let cells = grid
        .cells
        .iter()
        .map(|c| c.as_ref().map(RgbImage::from_tensor).transpose())
        .collect::<Result<Vec<_>>>()?;
    raster::compose(grid.rows, grid.cols, &cells, grid.marked_cell, cell_px, border_px)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub start: f64,
    pub rate: f64,
    /// RMS distance to the default output; `None` for a failed cell.
    pub distance: Option<f64>,
    /// Weak when `|start − 1| ≤ 2` and `|rate| ≤ 0.2`.
    pub weak_offset: bool,
    /// Weak when `|start| ≤ 2` and `|rate| ≤ 0.2`.
    pub weak_absolute: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftSummary {
    pub strong_cells: usize,
    pub median_strong_distance: Option<f64>,
    pub exceeds_d0: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub seed: u64,
    pub prompt: Vec<String>,
    pub blocks: Vec<String>,
    pub axes: ScanAxes,
    /// Distance between the default output and the zero-attention cell.
    pub d0: f64,
    pub cells: Vec<AblationCell>,
    /// Strong means `|start − 1| > 2` or `|rate| > 0.2`.
    pub offset_reading: DriftSummary,
    /// Strong means `|start| > 2` or `|rate| > 0.2`.
    pub absolute_reading: DriftSummary,
}

pub fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 { values[n / 2] } else { 0.5 * (values[n / 2 - 1] + values[n / 2]) })
}

fn summarize(cells: &[AblationCell], d0: f64, weak: impl Fn(&AblationCell) -> bool) -> DriftSummary {
    let strong: Vec<&AblationCell> = cells.iter().filter(|c| !weak(c)).collect();
    let mut distances: Vec<f64> = strong.iter().filter_map(|c| c.distance).collect();
    let median_strong_distance = median(&mut distances);
    DriftSummary { strong_cells: strong.len(), median_strong_distance, exceeds_d0: median_strong_distance.map(|m| m > d0) }
}

/// Distances of every constant-rate scan cell from the default output,
/// classified under both drift readings.
pub fn ablation_report(model: &UNet, base: &DenoiseRequest, blocks: &[BlockAddress], axes: &ScanAxes, jobs: usize) -> Result<AblationReport> {
    if base.num_loops != ABLATION_LOOPS {
        return Err(Error::InvalidArgument(format!("ablation report needs {ABLATION_LOOPS} loops")));
    }
    if axes.rate_family != RateFamily::Constant {
        return Err(Error::InvalidArgument("ablation report needs constant-rate axes".into()));
    }
    let grid = attention_scan(model, base, blocks, axes, jobs)?;
    let (dr, dc) = axes.default_cell().expect("validated axes");
    let (zr, zc) = axes.zero_cell().expect("validated axes");
    let default = grid.cell(dr, dc).ok_or_else(|| Error::NonFinite("default cell".into()))?;
    let zero = denoise(model, &base.clone().with_attnmod(AttnModSetup::synchronous(blocks, MultiplierSchedule::constant(0.0, 0.0))?))?.image;
    debug_assert_eq!(grid.cell(zr, zc), Some(&zero));
    let d0 = image_diff(default, &zero)?;

    let mut cells = Vec::with_capacity(grid.cells.len());
    for (r, &rate) in axes.rates.iter().enumerate() {
        for (c, &start) in axes.starts.iter().enumerate() {
            let distance = grid.cell(r, c).map(|img| image_diff(img, default)).transpose()?;
            cells.push(AblationCell {
                start,
                rate,
                distance,
                weak_offset: (start - 1.0).abs() <= WEAK_START_DRIFT && rate.abs() <= WEAK_RATE,
                weak_absolute: start.abs() <= WEAK_START_DRIFT && rate.abs() <= WEAK_RATE,
            });
        }
    }
    Ok(AblationReport {
        seed: base.seed,
        prompt: vocab::prompt_names(&base.prompt)?.into_iter().map(String::from).collect(),
        blocks: blocks.iter().map(|b| b.code()).collect(),
        axes: axes.clone(),
        d0,
        offset_reading: summarize(&cells, d0, |c| c.weak_offset),
        absolute_reading: summarize(&cells, d0, |c| c.weak_absolute),
        cells,
    })
}

/// Median distance over cells whose start satisfies `|start − 1| > 2`, the
/// start-only drift criterion.
pub fn median_far_start_distance(report: &AblationReport) -> Option<f64> {
    let mut d: Vec<f64> = report
        .cells
        .iter()
        .filter(|c| (c.start - 1.0).abs() > WEAK_START_DRIFT)
        .filter_map(|c| c.distance)
        .collect();
    median(&mut d)
}
