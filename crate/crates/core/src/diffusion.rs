//! Noise schedule, deterministic DDIM sampling and classifier-free guidance.

use serde::{Deserialize, Serialize};

use crate::attnmod::AttnModSetup;
use crate::error::{Error, Result};
use crate::nn::{Rng, Tensor};
use crate::unet::{AttentionHook, UNet};
use crate::vocab;

pub const NUM_TIMESTEPS: usize = 1000;
pub const BETA_START: f64 = 1e-4;
pub const BETA_END: f64 = 0.02;

/// Linear beta schedule with cumulative products kept in f64.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::linear(NUM_TIMESTEPS, BETA_START, BETA_END)
    }
}

impl NoiseSchedule {
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Self {
        let denom = (steps.max(2) - 1) as f64;
        let betas: Vec<f64> =
            (0..steps).map(|t| beta_start + (beta_end - beta_start) * t as f64 / denom).collect();
        let mut acc = 1.0;
        let alpha_bar = betas
            .iter()
            .map(|b| {
                acc *= 1.0 - b;
                acc
            })
            .collect();
        NoiseSchedule { betas, alpha_bar }
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    /// `x_t = √ᾱ_t·x0 + √(1−ᾱ_t)·ε`.
    pub fn add_noise(&self, x0: &Tensor, noise: &Tensor, t: usize) -> Result<Tensor> {
        let ab = self.alpha_bar(t);
        let (a, b) = (ab.sqrt() as f32, (1.0 - ab).sqrt() as f32);
        x0.zip_map(noise, |x, n| a * x + b * n)
    }
}

/// `N` descending timesteps `t_i = ⌊T·(N−1−i)/N⌋`; a single loop uses
/// `T−1`.
pub fn timestep_sequence(n: usize, t: usize) -> Result<Vec<usize>> {
    if n == 0 || n > t {
        return Err(Error::InvalidArgument(format!("need 1 ≤ loops ≤ {t}, got {n}")));
    }
    if n == 1 {
        return Ok(vec![t - 1]);
    }
    Ok((0..n).map(|i| (t * (n - 1 - i) / n).min(t - 1)).collect())
}

/// `ε_u + g·(ε_c − ε_u)`, evaluated as `(1−g)·ε_u + g·ε_c` so that `g = 1`
/// and `g = 0` return the respective input exactly.
pub fn guided_eps(eps_uncond: &Tensor, eps_cond: &Tensor, g: f32) -> Result<Tensor> {
    let h = 1.0 - g;
    eps_uncond.zip_map(eps_cond, |u, c| h * u + g * c)
}

/// One deterministic DDIM update from explicit cumulative alphas.
/// `alpha_bar_prev = None` marks the final step, which returns `x0_hat`.
pub fn ddim_update(
    x_t: &Tensor,
    eps: &Tensor,
    alpha_bar_t: f64,
    alpha_bar_prev: Option<f64>,
    clip: bool,
) -> Result<(Tensor, Tensor)> {
    let sa = alpha_bar_t.sqrt() as f32;
    let sb = (1.0 - alpha_bar_t).sqrt() as f32;
    let x0 = x_t.zip_map(eps, |x, e| {
        let v = (x - sb * e) / sa;
        if clip {
            v.clamp(-1.0, 1.0)
        } else {
            v
        }
    })?;
    x0.check_finite("x0 prediction")?;
    let prev = match alpha_bar_prev {
        None => x0.clone(),
        Some(ab) => {
            let (pa, pb) = (ab.sqrt() as f32, (1.0 - ab).sqrt() as f32);
            x0.zip_map(eps, |x, e| pa * x + pb * e)?
        }
    };
    prev.check_finite("latent")?;
    Ok((prev, x0))
}

/// DDIM step on the schedule with `x0_hat` clipped to `[−1, 1]`.
pub fn ddim_step(
    x_t: &Tensor,
    eps: &Tensor,
    t: usize,
    t_prev: Option<usize>,
    schedule: &NoiseSchedule,
) -> Result<(Tensor, Tensor)> {
    if let Some(p) = t_prev {
        if p >= t {
            return Err(Error::InvalidArgument(format!("t_prev {p} must be below t {t}")));
        }
    }
    ddim_update(x_t, eps, schedule.alpha_bar(t), t_prev.map(|p| schedule.alpha_bar(p)), true)
}

fn default_guidance() -> f32 {
    5.0
}

fn default_loops() -> usize {
    30
}

/// Everything that defines one generation. Two requests that differ only in
/// `attnmod` share the same diffusion input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiseRequest {
    pub seed: u64,
    pub prompt: Vec<usize>,
    #[serde(default = "default_guidance")]
    pub guidance_scale: f32,
    #[serde(default = "default_loops")]
    pub num_loops: usize,
    #[serde(default)]
    pub eta: f32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attnmod: Option<AttnModSetup>,
}

impl DenoiseRequest {
    pub fn new(seed: u64, prompt: Vec<usize>) -> Self {
        DenoiseRequest {
            seed,
            prompt,
            guidance_scale: default_guidance(),
            num_loops: default_loops(),
            eta: 0.0,
            attnmod: None,
        }
    }

    pub fn with_attnmod(mut self, setup: AttnModSetup) -> Self {
        self.attnmod = Some(setup);
        self
    }

    pub fn validate(&self) -> Result<()> {
        vocab::validate_prompt(&self.prompt)?;
        if self.eta != 0.0 {
            return Err(Error::InvalidArgument("only eta = 0 is supported".into()));
        }
        if !self.guidance_scale.is_finite() {
            return Err(Error::InvalidArgument("guidance scale must be finite".into()));
        }
        timestep_sequence(self.num_loops, NUM_TIMESTEPS)?;
        Ok(())
    }
}

/// Seeded starting latent. Always draws exactly `numel` normals from a
/// fresh generator, independent of any schedule.
pub fn initial_latent(seed: u64, shape: &[usize]) -> Tensor {
    let mut rng = Rng::seed_from(seed);
    let mut out = Tensor::zeros(shape);
    rng.fill_normal(out.data_mut());
    out
}

/// Fixed conditioning for one request, exposing single loops so callers can
/// branch the trajectory.
pub struct Sampler<'a> {
    model: &'a UNet,
    schedule: NoiseSchedule,
    timesteps: Vec<usize>,
    cond: Tensor,
    uncond: Tensor,
    guidance: f32,
}

impl<'a> Sampler<'a> {
    pub fn new(model: &'a UNet, request: &DenoiseRequest) -> Result<Self> {
        request.validate()?;
        Ok(Sampler {
            model,
            schedule: NoiseSchedule::default(),
            timesteps: timestep_sequence(request.num_loops, NUM_TIMESTEPS)?,
            cond: model.embed_prompt(&request.prompt)?,
            uncond: model.embed_prompt(&vocab::null_prompt())?,
            guidance: request.guidance_scale,
        })
    }

    pub fn loops(&self) -> usize {
        self.timesteps.len()
    }

    pub fn timesteps(&self) -> &[usize] {
        &self.timesteps
    }

    /// Guided noise prediction at loop `i`; the hook applies to both passes.
    pub fn predict(&self, x: &Tensor, i: usize, hook: &AttentionHook) -> Result<Tensor> {
        let t = self.timesteps[i];
        let eps_u = self.model.forward(x, t, &self.uncond, hook)?;
        let eps_c = self.model.forward(x, t, &self.cond, hook)?;
        guided_eps(&eps_u, &eps_c, self.guidance)
    }

    /// Runs loop `i`, returning `(x_next, x0_hat)`.
    pub fn step(&self, x: &Tensor, i: usize, hook: &AttentionHook) -> Result<(Tensor, Tensor)> {
        let eps = self.predict(x, i, hook)?;
        let t_prev = self.timesteps.get(i + 1).copied();
        ddim_step(x, &eps, self.timesteps[i], t_prev, &self.schedule)
            .map_err(|e| match e {
                Error::NonFinite(what) => Error::NonFinite(format!("{what} at loop {i}")),
                other => other,
            })
    }
}

#[derive(Debug, Clone)]
pub struct DenoiseOutput {
    pub image: Tensor,
    /// `x0_hat` after every loop; the last entry equals `image`.
    pub x0_trace: Vec<Tensor>,
}

pub fn denoise(model: &UNet, request: &DenoiseRequest) -> Result<DenoiseOutput> {
    let sampler = Sampler::new(model, request)?;
    let mut x = initial_latent(request.seed, &model.config().image_shape());
    let empty = AttnModSetup::new();
    let setup = request.attnmod.as_ref().unwrap_or(&empty);
    let mut trace = Vec::with_capacity(sampler.loops());
    for i in 0..sampler.loops() {
        let (next, x0) = sampler.step(&x, i, &setup.multipliers_at(i))?;
        trace.push(x0);
        x = next;
    }
    Ok(DenoiseOutput { image: x, x0_trace: trace })
}
