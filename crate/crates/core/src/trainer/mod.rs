//! Denoiser training on the procedural shape dataset.

pub mod adam;
pub mod checkpoint;
pub mod data;

use serde::{Deserialize, Serialize};

use crate::diffusion::{NoiseSchedule, NUM_TIMESTEPS};
use crate::error::{Error, Result};
use crate::nn::{Rng, Tensor};
use crate::unet::{UNet, UNetConfig};
use crate::vocab;

pub use adam::{Adam, AdamConfig};
pub use checkpoint::{load_model, Checkpoint, CheckpointMeta};
pub use data::generate_sample;

/// Interval, in steps, between loss log entries.
pub const LOG_EVERY: usize = 100;

/// Stream used for dataset, dropout, timestep and noise draws.
pub const DATA_STREAM: u64 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub learning_rate: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub uncond_prob: f32,
    pub seed: u64,
    pub model: UNetConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 20_000,
            batch: 4,
            learning_rate: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            uncond_prob: 0.1,
            seed: 0,
            model: UNetConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        if self.steps == 0 || self.batch == 0 {
            return bad("steps and batch must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam betas must lie in [0, 1)");
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return bad("eps must be positive");
        }
        if !(0.0..=1.0).contains(&self.uncond_prob) {
            return bad("uncond_prob must lie in [0, 1]");
        }
        self.model.validate()
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.learning_rate, beta1: self.beta1, beta2: self.beta2, eps: self.eps }
    }
}

/// One line of the loss log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub loss: f64,
}

/// One training example after noising.
#[derive(Debug, Clone)]
pub struct Example {
    pub x_t: Tensor,
    pub noise: Tensor,
    pub t: usize,
    pub prompt: [usize; 4],
}

/// Draws the next example. The draw order per example is: image and
/// prompt, dropout, timestep, noise.
pub fn draw_example(rng: &mut Rng, schedule: &NoiseSchedule, uncond_prob: f32) -> Result<Example> {
    let (x0, mut prompt) = generate_sample(rng);
    if rng.next_f32() < uncond_prob {
        prompt = vocab::null_prompt();
    }
    let t = rng.below(NUM_TIMESTEPS as u32) as usize;
    let mut noise = Tensor::zeros(x0.shape());
    rng.fill_normal(noise.data_mut());
    let x_t = schedule.add_noise(&x0, &noise, t)?;
    Ok(Example { x_t, noise, t, prompt })
}

/// Stateful trainer; [`train`] drives it to completion.
pub struct Trainer {
    config: TrainConfig,
    model: UNet,
    grad: UNet,
    adam: Adam,
    rng: Rng,
    schedule: NoiseSchedule,
    step: usize,
    window: Vec<f64>,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = UNet::init(&config.model, config.seed)?;
        let grad = model.zeros_like();
        let sizes: Vec<usize> = model.named_parameters().iter().map(|(_, t)| t.numel()).collect();
        let adam = Adam::new(config.adam(), &sizes);
        Ok(Trainer {
            rng: Rng::derive(config.seed, DATA_STREAM),
            schedule: NoiseSchedule::default(),
            config,
            model,
            grad,
            adam,
            step: 0,
            window: Vec::new(),
        })
    }

    pub fn model(&self) -> &UNet {
        &self.model
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_model(&self.model, self.step as u64)
    }

    /// Runs one optimizer step and returns the batch loss.
    pub fn step(&mut self) -> Result<f64> {
        let batch = self.config.batch;
        self.grad.visit_mut(&mut |_, t| t.fill(0.0));
        let mut loss = 0.0f64;
        for _ in 0..batch {
            let ex = draw_example(&mut self.rng, &self.schedule, self.config.uncond_prob)?;
            let (eps, cache) = self.model.forward_train(&ex.x_t, ex.t, &ex.prompt)?;
            let numel = eps.numel();
            let scale = 2.0 / (batch * numel) as f32;
            let sq: f64 = eps.data().iter().zip(ex.noise.data()).map(|(&p, &n)| ((p - n) as f64).powi(2)).sum();
            let deps = eps.zip_map(&ex.noise, |p, n| scale * (p - n))?;
            loss += sq / numel as f64;
            self.model.backward(&cache, &deps, &mut self.grad);
        }
        loss /= batch as f64;
        if !loss.is_finite() {
            return Err(Error::Divergence { step: self.step });
        }

        let grads: Vec<&Tensor> = self.grad.named_parameters().into_iter().map(|(_, t)| t).collect();
        self.adam.begin_step();
        let mut index = 0;
        let adam = &mut self.adam;
        self.model.visit_mut(&mut |_, p| {
            adam.update(index, p.data_mut(), grads[index].data());
            index += 1;
        });
        self.step += 1;
        Ok(loss)
    }

    /// Runs one step and returns a log record when one is due: the first
    /// batch loss at step 0, then the mean over each block of
    /// [`LOG_EVERY`] steps.
    pub fn step_logged(&mut self) -> Result<(f64, Option<LossRecord>)> {
        let index = self.step;
        let loss = self.step()?;
        let mut record = None;
        if index == 0 {
            record = Some(LossRecord { step: 0, loss });
        }
        self.window.push(loss);
        if self.step % LOG_EVERY == 0 {
            let mean = self.window.iter().sum::<f64>() / self.window.len() as f64;
            record = Some(LossRecord { step: self.step, loss: mean });
            self.window.clear();
        }
        Ok((loss, record))
    }
}

/// Trains from scratch, reporting each loss log record to `on_log`.
pub fn train(config: &TrainConfig, on_log: &mut dyn FnMut(LossRecord)) -> Result<Checkpoint> {
    let mut trainer = Trainer::new(config.clone())?;
    for _ in 0..config.steps {
        let (_, record) = trainer.step_logged()?;
        if let Some(r) = record {
            on_log(r);
        }
    }
    Ok(trainer.checkpoint())
}

/// Formats a record as one JSON line without the trailing newline.
pub fn log_line(record: &LossRecord) -> String {
    serde_json::to_string(record).expect("plain struct serializes")
}
