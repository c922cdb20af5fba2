//! End-to-end acceptance checks, one PASS/FAIL line per criterion.
//!
//! Criteria 4, 5 and 7 need the fully trained desk checkpoint. It is cached
//! under `ATTNMOD_ACCEPTANCE_CACHE` (default: the target tmp dir) together
//! with its loss log and training wall time. Without a cache the first run
//! trains it, which takes roughly 27 minutes on one core.

mod common;

use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use attnmod::attnmod::{AttnModSetup, MultiplierSchedule, RateSpec};
use attnmod::diffusion::{denoise, initial_latent, DenoiseRequest, Sampler};
use attnmod::nn::{Rng, Tensor};
use attnmod::scan::{self, ScanAxes, DEFAULT_ACCELS, DEFAULT_RATES, DEFAULT_STARTS};
use attnmod::strategy::{greedy_denoise, PickMode, CAP};
use attnmod::trainer::{self, data, Checkpoint, LossRecord, TrainConfig};
use attnmod::unet::{list_attention_blocks, AttentionHook, AttnSlot, BlockAddress, Probe, UNet, UNetConfig};
use attnmod::vocab;
use serde_json::{json, Value};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn prompt(words: &[&str]) -> Vec<usize> {
    vocab::parse_prompt(words).unwrap()
}

fn default_request(seed: u64) -> DenoiseRequest {
    let mut r = DenoiseRequest::new(seed, prompt(&["red", "circle", "light", "flat"]));
    r.guidance_scale = 5.0;
    r.num_loops = 30;
    r
}

fn same_bits(a: &Tensor, b: &Tensor) -> bool {
    a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
}

fn within_one_ulp(a: f32, b: f32) -> bool {
    if a == b {
        return true;
    }
    let m = a.abs().max(b.abs());
    let ulp = f32::from_bits(m.to_bits() + 1) - m;
    (a - b).abs() <= ulp
}

fn code(block: &str, config: &UNetConfig) -> BlockAddress {
    BlockAddress::parse(block, config).unwrap()
}

fn cross_attention(config: &UNetConfig) -> Vec<BlockAddress> {
    list_attention_blocks(config).into_iter().filter(|b| b.slot == AttnSlot::Attn2).collect()
}

fn timed(limit: Duration, f: impl FnOnce() -> Outcome) -> Outcome {
    let start = Instant::now();
    let detail = f()?;
    let took = start.elapsed();
    ensure!(took < limit, "{detail}; took {took:.1?}, limit {limit:?}");
    Ok(format!("{detail}; {took:.1?}"))
}

// ---------------------------------------------------------------------------
// Trained checkpoint

struct Trained {
    model: UNet,
    log: Vec<LossRecord>,
    seconds: f64,
}

const TRAIN_LIMIT_SECS: f64 = 45.0 * 60.0;

fn cache_dir() -> PathBuf {
    std::env::var_os("ATTNMOD_ACCEPTANCE_CACHE")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance"))
}

fn read_log(path: &Path) -> Option<Vec<LossRecord>> {
    let text = std::fs::read_to_string(path).ok()?;
    text.lines().map(|l| serde_json::from_str(l).ok()).collect()
}

fn trained() -> Trained {
    let dir = cache_dir();
    std::fs::create_dir_all(&dir).unwrap();
    let (ckpt, log, time) = (dir.join("desk.atnm"), dir.join("desk.loss.jsonl"), dir.join("desk.seconds"));
    let config = TrainConfig::default();
    let cached = (|| {
        let c = Checkpoint::load(&ckpt).ok()?;
        let seconds: f64 = std::fs::read_to_string(&time).ok()?.trim().parse().ok()?;
        (c.metadata.step == config.steps as u64 && *c.config() == config.model).then_some(())?;
        Some(Trained { model: c.to_model().ok()?, log: read_log(&log)?, seconds })
    })();
    if let Some(t) = cached {
        eprintln!("using cached checkpoint {}", ckpt.display());
        return t;
    }
    eprintln!("training {} steps into {}", config.steps, ckpt.display());
    let start = Instant::now();
    let mut records = Vec::new();
    let c = trainer::train(&config, &mut |r| records.push(r)).unwrap();
    let seconds = start.elapsed().as_secs_f64();
    c.save(&ckpt).unwrap();
    let lines: String = records.iter().map(|r| trainer::log_line(r) + "\n").collect();
    std::fs::write(&log, lines).unwrap();
    std::fs::write(&time, format!("{seconds}\n")).unwrap();
    Trained { model: c.to_model().unwrap(), log: records, seconds }
}

// ---------------------------------------------------------------------------
// 1. Identity invariance

fn identity_invariance(model: &UNet) -> Outcome {
    let config = model.config();
    let all = list_attention_blocks(config);
    let subsets = [vec![code("U1A1A2", config)], cross_attention(config), all];
    let mut runs = 0;
    for seed in 0..5 {
        let plain = denoise(model, &default_request(seed)).map_err(|e| e.to_string())?.image;
        for blocks in &subsets {
            let setup = AttnModSetup::synchronous(blocks, MultiplierSchedule::constant(1.0, 0.0)).unwrap();
            let hooked = denoise(model, &default_request(seed).with_attnmod(setup)).map_err(|e| e.to_string())?.image;
            ensure!(same_bits(&plain, &hooked), "seed {seed}, {} blocks: hooked output differs", blocks.len());
            runs += 1;
        }
    }
    Ok(format!("{runs} hooked runs bit-identical to unhooked"))
}

// ---------------------------------------------------------------------------
// 2. Hook linearity

fn hook_linearity(model: &UNet) -> Outcome {
    let config = model.config();
    let mut rng = Rng::seed_from(77);
    let x = Tensor::from_fn(&config.image_shape(), |_| rng.normal());
    let context = model.embed_prompt(&prompt(&["blue", "square", "dark", "dotted"])).unwrap();
    let mut compared = 0usize;
    for block in list_attention_blocks(config) {
        let capture = |m: f32| {
            let mut probe = Probe::capture(block);
            model.forward_probe(&x, 417, &context, &AttentionHook::new().with(block, m), &mut probe).unwrap();
            probe.captured.expect("captured output")
        };
        let unit = capture(1.0);
        for m in [-20.0f32, 0.0, 0.5, 50.0] {
            let scaled = capture(m);
            for (i, (&s, &u)) in scaled.data().iter().zip(unit.data()).enumerate() {
                ensure!(within_one_ulp(s, m * u), "{} m={m} element {i}: {s} vs {}", block.code(), m * u);
            }
            compared += scaled.numel();
        }
    }
    Ok(format!("{compared} elements within one ulp over 12 blocks"))
}

// ---------------------------------------------------------------------------
// 3. Schedule math

fn accumulate(start: f64, rate: RateSpec, i: usize) -> f64 {
    let mut m = start;
    for j in 0..i {
        m += match rate {
            RateSpec::Constant(r) => r,
            RateSpec::Linear(a) => a * j as f64,
        };
    }
    m
}

fn schedule_math() -> Outcome {
    let mut rng = Rng::seed_from(3);
    let uniform = |rng: &mut Rng, lo: f64, hi: f64| lo + (hi - lo) * rng.next_f32() as f64;
    let mut worst = 0.0f64;
    for k in 0..1000 {
        let start = uniform(&mut rng, -20.0, 50.0);
        let i = rng.below(60) as usize;
        for rate in [RateSpec::Constant(uniform(&mut rng, -1.0, 1.0)), RateSpec::Linear(uniform(&mut rng, -0.2, 0.2))] {
            let want = accumulate(start, rate, i);
            let got = MultiplierSchedule::new(start, rate).multiplier_at(i) as f64;
            let err = (got - want).abs() / want.abs().max(1.0);
            worst = worst.max(err);
            ensure!(err <= 1e-6, "triple {k}: ({start}, {rate:?}, {i}) gave {got}, oracle {want}");
        }
    }
    let ends = |v: &[f64]| (v[0], v[v.len() - 1]);
    ensure!(ends(&DEFAULT_STARTS) == (-20.0, 50.0), "start axis {:?}", ends(&DEFAULT_STARTS));
    ensure!(ends(&DEFAULT_RATES) == (-1.0, 1.0), "rate axis {:?}", ends(&DEFAULT_RATES));
    ensure!(ends(&DEFAULT_ACCELS) == (-0.2, 0.2), "accel axis {:?}", ends(&DEFAULT_ACCELS));
    for &s in &DEFAULT_STARTS {
        for &r in &DEFAULT_RATES {
            let sched = MultiplierSchedule::constant(s, r);
            ensure!(sched.multiplier_at(0) == s as f32, "start {s} at loop 0");
            ensure!(sched.multiplier_at(1) == (s + r) as f32, "start {s} rate {r} at loop 1");
        }
        for &a in &DEFAULT_ACCELS {
            let sched = MultiplierSchedule::linear(s, a);
            ensure!(sched.multiplier_at(1) == s as f32, "linear start {s} at loop 1");
            ensure!(sched.multiplier_at(2) == (s + a) as f32, "linear {s} accel {a} at loop 2");
        }
    }
    Ok(format!("2000 schedules, worst relative error {worst:.1e}; axis endpoints exact"))
}

// ---------------------------------------------------------------------------
// 4. Greedy strategy optimality

fn rms(a: &Tensor, b: &Tensor) -> f64 {
    let sq: f64 = a.data().iter().zip(b.data()).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum();
    (sq / a.numel() as f64).sqrt()
}

fn first_extreme(scores: &[f64], most: bool) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if (most && s > scores[best]) || (!most && s < scores[best]) {
            best = i;
        }
    }
    best
}

/// Replays a recorded run loop by loop with its own bookkeeping and checks
/// every pick against a full recomputation of the candidate scores.
fn replay(model: &UNet, request: &DenoiseRequest, mode: PickMode) -> Result<usize, String> {
    let blocks = list_attention_blocks(model.config());
    let outcome = greedy_denoise(model, request, mode).map_err(|e| e.to_string())?;
    let sampler = Sampler::new(model, request).unwrap();
    let mut attention = vec![0.0f32; blocks.len()];
    let hook = |att: &[f32]| blocks.iter().zip(att).map(|(&b, &v)| (b, v)).collect::<AttentionHook>();
    let mut x = initial_latent(request.seed, &model.config().image_shape());
    let mut baseline = sampler.step(&x, 0, &hook(&attention)).unwrap().1;
    let mut records = outcome.log.iter();
    for i in 0..sampler.loops() {
        let open: Vec<usize> = (0..blocks.len()).filter(|&k| attention[k] + 1.0 <= CAP).collect();
        let committed = if open.is_empty() {
            hook(&attention)
        } else {
            let scores: Vec<f64> = open
                .iter()
                .map(|&k| {
                    let mut trial = attention.clone();
                    trial[k] += 1.0;
                    rms(&sampler.step(&x, i, &hook(&trial)).unwrap().1, &baseline)
                })
                .collect();
            let k = open[first_extreme(&scores, mode == PickMode::MostInfluential)];
            let rec = records.next().ok_or(format!("{mode}: no record for loop {i}"))?;
            ensure!(rec.loop_index == i, "{mode}: record for loop {} at loop {i}", rec.loop_index);
            ensure!(rec.picked == blocks[k].code(), "{mode} loop {i}: recorded {}, oracle {}", rec.picked, blocks[k].code());
            ensure!(rec.score == scores[first_extreme(&scores, mode == PickMode::MostInfluential)], "{mode} loop {i}: score");
            attention[k] += 1.0;
            hook(&attention)
        };
        ensure!(attention.iter().all(|&v| v <= CAP), "{mode} loop {i}: cap exceeded");
        let (next, x0) = sampler.step(&x, i, &committed).unwrap();
        ensure!(same_bits(&x0, &outcome.x0_trace[i]), "{mode} loop {i}: x0_hat differs");
        baseline = x0;
        x = next;
    }
    ensure!(records.next().is_none(), "{mode}: extra pick records");
    ensure!(same_bits(&x, &outcome.image), "{mode}: final image differs");
    ensure!(outcome.state.attention().iter().all(|&(_, v)| v <= CAP), "{mode}: final state over cap");
    Ok(outcome.log.len())
}

fn strategy_optimality(model: &UNet) -> Outcome {
    let mut request = default_request(0);
    request.num_loops = 40;
    let most = replay(model, &request, PickMode::MostInfluential)?;
    let least = replay(model, &request, PickMode::LeastInfluential)?;
    Ok(format!("40 loops replayed; {most} + {least} picks reproduced, cap held"))
}

// ---------------------------------------------------------------------------
// 5. Scan integrity

fn scan_integrity(model: &UNet) -> Outcome {
    let config = model.config();
    let blocks = [code("U1A1A2", config)];
    let axes = ScanAxes::default();
    let base = default_request(0);
    let serial = scan::attention_scan(model, &base, &blocks, &axes, 1).map_err(|e| e.to_string())?;
    let parallel = scan::attention_scan(model, &base, &blocks, &axes, 8).map_err(|e| e.to_string())?;
    ensure!((serial.rows, serial.cols) == (9, 12), "grid is {}x{}", serial.rows, serial.cols);
    ensure!(serial.errors.iter().all(Option::is_none), "failed cells: {:?}", serial.errors);
    let cell = |g: &scan::GridImage, i: usize| g.cells[i].clone().unwrap();
    for i in 0..serial.cells.len() {
        ensure!(same_bits(&cell(&serial, i), &cell(&parallel, i)), "cell {i} differs between --jobs 1 and 8");
    }
    let png = |g| scan::compose_grid(g, 64, 2).unwrap().to_png().unwrap();
    ensure!(png(&serial) == png(&parallel), "composed grids differ");

    let (r, c) = serial.marked_cell.ok_or("no marked cell")?;
    ensure!((axes.rates[r], axes.starts[c]) == (0.0, 1.0), "marked cell at rate {} start {}", axes.rates[r], axes.starts[c]);
    let default = denoise(model, &base).unwrap().image;
    ensure!(same_bits(&cell(&serial, r * serial.cols + c), &default), "marked cell differs from the default output");

    let mut rng = Rng::seed_from(5);
    let mut picked = Vec::new();
    while picked.len() < 5 {
        let i = rng.below(108) as usize;
        if !picked.contains(&i) {
            picked.push(i);
        }
    }
    for &i in &picked {
        let (start, rate) = (axes.starts[i % 12], axes.rates[i / 12]);
        let setup = AttnModSetup::synchronous(&blocks, MultiplierSchedule::constant(start, rate)).unwrap();
        let alone = denoise(model, &base.clone().with_attnmod(setup)).unwrap().image;
        ensure!(same_bits(&alone, &cell(&serial, i)), "cell {i} (start {start}, rate {rate}) differs standalone");
    }
    Ok(format!("9x12 grid; jobs 1 == jobs 8; marked cell == default; cells {picked:?} match standalone"))
}

// ---------------------------------------------------------------------------
// 6. Gradient correctness

fn gradient_correctness() -> Outcome {
    let mut failures = Vec::new();
    for (name, check) in common::kernels::KERNELS {
        for seed in 0..common::kernels::INSTANCES {
            if catch_unwind(|| check(seed)).is_err() {
                failures.push(format!("{name}#{seed}"));
            }
        }
    }
    ensure!(failures.is_empty(), "failed instances: {failures:?}");
    Ok(format!(
        "{} kernels x {} instances within {} at h={}",
        common::kernels::KERNELS.len(),
        common::kernels::INSTANCES,
        common::FD_TOLERANCE,
        common::FD_STEP
    ))
}

// ---------------------------------------------------------------------------
// 7. Training efficacy

fn training_efficacy(t: &Trained) -> Outcome {
    let config = TrainConfig::default();
    ensure!(t.log.first().map(|r| r.step) == Some(0), "loss log does not start at step 0");
    let initial = t.log.iter().find(|r| r.step == trainer::LOG_EVERY).ok_or("no first window")?.loss;
    let last = t.log.last().unwrap();
    ensure!(last.step == config.steps, "loss log ends at step {}", last.step);
    let ratio = last.loss / initial;
    let loss = format!("smoothed loss {:.4} -> {:.4} ({:.1}%) in {:.1} min", initial, last.loss, 100.0 * ratio, t.seconds / 60.0);
    ensure!(ratio < 0.5, "{loss}: not below 50%");
    ensure!(t.seconds <= TRAIN_LIMIT_SECS, "{loss}: over the 45 min budget");

    let mut hits = 0;
    for seed in 0..50u64 {
        let image = denoise(&t.model, &default_request(1000 + seed)).unwrap().image;
        if data::dominant_channel(&image) == Some(0) {
            hits += 1;
        }
    }
    // Stricter companion figure, reported but not gated: every color token
    // on a dark background, matched against the nearest palette color.
    let mut palette = 0;
    for seed in 0..50u64 {
        let color = vocab::COLORS.start + seed as usize % 6;
        let shape = vocab::SHAPES.start + (seed as usize / 6) % 4;
        let mut request = default_request(1000 + seed);
        request.prompt = vec![color, shape, vocab::token_id("dark").unwrap(), vocab::token_id("flat").unwrap()];
        let image = denoise(&t.model, &request).unwrap().image;
        if data::nearest_color(&image) == Some(color) {
            palette += 1;
        }
    }
    let cond = format!("red dominant {hits}/50 (all-color palette match {palette}/50, informational)");
    ensure!(hits >= 40, "{loss}; {cond}: below 80%");

    let blocks = cross_attention(t.model.config());
    let mut wins = Vec::new();
    for seed in 0..5 {
        let report = scan::ablation_report(&t.model, &default_request(seed), &blocks, &ScanAxes::default(), 0).unwrap();
        let far = scan::median_far_start_distance(&report).ok_or("no far-start cells")?;
        eprintln!("seed {seed}: d0 {:.4}, median far-start distance {far:.4}", report.d0);
        wins.push(far > report.d0);
    }
    let n = wins.iter().filter(|&&w| w).count();
    let ablation = format!("far-start median > d0 on {n}/5 seeds");
    ensure!(n >= 4, "{loss}; {cond}; {ablation}: below 4");
    Ok(format!("{loss}; {cond}; {ablation}"))
}

// ---------------------------------------------------------------------------
// 8 and 9. CLI pipeline determinism and manifest closure

fn attnmod(dir: &Path, args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_attnmod")).current_dir(dir).args(args).output().unwrap();
    ensure!(out.status.success(), "attnmod {args:?} in {}: {}", dir.display(), String::from_utf8_lossy(&out.stderr));
    Ok(())
}

fn pipeline_config() -> Value {
    json!({
        "model": {"checkpoint": "model.atnm"},
        "request": {"seed": 2, "prompt": ["green", "triangle", "dark", "outline"], "guidance_scale": 5.0, "num_loops": 30},
        "train": {"steps": 200, "seed": 11},
        "scan": {"kind": "attention", "blocks": ["U1A1A2"],
                 "axes": {"starts": [0.0, 1.0, 5.0], "rates": [-0.3, 0.0, 0.3], "rate_family": "constant"}},
        "strategy": {"mode": "most", "loops": 12},
        "output": {"directory": "out", "formats": ["ppm", "png"]},
    })
}

const STAGES: [&str; 4] = ["generate", "scan", "strategy", "ablate"];

/// train → generate → scan → strategy → ablate inside `dir`, one output
/// directory per command.
fn pipeline(dir: &Path) -> Result<(), String> {
    std::fs::create_dir_all(dir).unwrap();
    std::fs::write(dir.join("config.json"), serde_json::to_vec_pretty(&pipeline_config()).unwrap()).unwrap();
    attnmod(dir, &["train", "--config", "config.json", "--out", "model.atnm"])?;
    for stage in STAGES {
        attnmod(dir, &[stage, "--config", "config.json", "--out", stage])?;
    }
    Ok(())
}

fn files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push((path.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn end_to_end_determinism(root: &Path) -> Outcome {
    let (a, b) = (root.join("run-a"), root.join("run-b"));
    pipeline(&a)?;
    pipeline(&b)?;
    let (fa, fb) = (files(&a), files(&b));
    ensure!(fa.len() == fb.len(), "{} vs {} files", fa.len(), fb.len());
    for ((pa, ba), (pb, bb)) in fa.iter().zip(&fb) {
        ensure!(pa == pb, "file lists differ at {} / {}", pa.display(), pb.display());
        ensure!(ba == bb, "{} differs between runs", pa.display());
    }
    let bytes = std::fs::read(a.join("model.atnm")).unwrap();
    let ckpt = Checkpoint::from_bytes(&bytes).map_err(|e| e.to_string())?;
    ensure!(ckpt.to_bytes().unwrap() == bytes, "checkpoint re-serialization differs");
    let model = ckpt.to_model().unwrap();
    ensure!(Checkpoint::from_model(&model, ckpt.metadata.step).to_bytes().unwrap() == bytes, "model roundtrip differs");
    Ok(format!("{} files byte-identical across two runs; checkpoint roundtrip exact", fa.len()))
}

fn manifest_closure(root: &Path) -> Outcome {
    let dir = root.join("run-a");
    let mut checked = 0;
    for stage in STAGES {
        let manifest: Value = serde_json::from_slice(&std::fs::read(dir.join(stage).join("manifest.json")).unwrap()).unwrap();
        let rerun = format!("rerun-{stage}");
        attnmod(&dir, &[stage, "--config", &format!("{stage}/manifest.json"), "--out", &rerun])?;
        let artifacts = manifest["manifest"]["artifacts"].as_array().ok_or("manifest without artifacts")?;
        ensure!(!artifacts.is_empty(), "{stage}: empty artifact list");
        for artifact in artifacts {
            let file = artifact["file"].as_str().unwrap();
            let (first, second) = (std::fs::read(dir.join(stage).join(file)).unwrap(), std::fs::read(dir.join(&rerun).join(file)).unwrap());
            ensure!(first == second, "{stage}/{file} not reproduced");
            checked += 1;
        }
        let again: Value = serde_json::from_slice(&std::fs::read(dir.join(&rerun).join("manifest.json")).unwrap()).unwrap();
        ensure!(again["manifest"] == manifest["manifest"], "{stage}: manifest info differs on rerun");
    }
    Ok(format!("{checked} artifacts from {} manifests reproduced", STAGES.len()))
}

// ---------------------------------------------------------------------------

#[test]
fn acceptance() {
    let t = trained();
    let tmp = tempfile::tempdir().unwrap();
    let criteria: Vec<(&str, Box<dyn FnOnce() -> Outcome + '_>)> = vec![
        ("identity invariance", Box::new(|| timed(Duration::from_secs(60), || identity_invariance(&t.model)))),
        ("hook linearity", Box::new(|| hook_linearity(&t.model))),
        ("schedule math", Box::new(schedule_math)),
        ("greedy strategy optimality", Box::new(|| timed(Duration::from_secs(600), || strategy_optimality(&t.model)))),
        ("scan integrity", Box::new(|| timed(Duration::from_secs(900), || scan_integrity(&t.model)))),
        ("gradient correctness", Box::new(|| timed(Duration::from_secs(120), gradient_correctness))),
        ("training efficacy", Box::new(|| training_efficacy(&t))),
        ("end-to-end determinism", Box::new(|| end_to_end_determinism(tmp.path()))),
        ("manifest closure", Box::new(|| manifest_closure(tmp.path()))),
    ];
    let mut failed = Vec::new();
    let mut lines = Vec::new();
    for (n, (name, check)) in criteria.into_iter().enumerate() {
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|_| Err("panicked".into()));
        let line = match &outcome {
            Ok(detail) => format!("criterion {}: PASS {name}: {detail}", n + 1),
            Err(detail) => {
                failed.push(n + 1);
                format!("criterion {}: FAIL {name}: {detail}", n + 1)
            }
        };
        // The raw handle bypasses libtest's capture, so the report shows up
        // in plain `cargo test` output.
        writeln!(std::io::stdout(), "{line}").unwrap();
        lines.push(line);
    }
    std::fs::write(cache_dir().join("acceptance.txt"), lines.join("\n") + "\n").unwrap();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
