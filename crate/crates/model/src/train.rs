use loosekey_core::datagen::TrainingPair;
use loosekey_core::infill_linear;
use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Grads;
use crate::error::{ModelError, Result};
use crate::net::Denoiser;
use crate::optim::{Adam, AdamConfig};
use crate::schedule::NoiseSchedule;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: AdamConfig,
    pub log_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            batch_size: 8,
            seed: 0,
            optimizer: AdamConfig::default(),
            log_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn violations(&self, prefix: &str) -> Vec<String> {
        let mut out = Vec::new();
        if self.batch_size == 0 {
            out.push(format!("{prefix}batch_size: must be >= 1"));
        }
        let lr = self.optimizer.learning_rate;
        if !(lr.is_finite() && lr > 0.0) {
            out.push(format!("{prefix}optimizer.learning_rate: must be positive, got {lr}"));
        }
        for (name, b) in [("beta1", self.optimizer.beta1), ("beta2", self.optimizer.beta2)] {
            if !(0.0..1.0).contains(&b) {
                out.push(format!("{prefix}optimizer.{name}: must lie in [0, 1), got {b}"));
            }
        }
        if self.optimizer.clip_norm.is_nan() || self.optimizer.clip_norm < 0.0 {
            out.push(format!("{prefix}optimizer.clip_norm: must be >= 0"));
        }
        out
    }
}

/// A training pair converted to the network's `f32` working precision.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedPair {
    pub x_infilled: Array2<f32>,
    pub mask: Vec<bool>,
    pub target: Array2<f32>,
}

impl PreparedPair {
    pub fn new(pair: &TrainingPair) -> Result<Self> {
        let infilled = infill_linear(&pair.observation)?;
        Ok(PreparedPair {
            x_infilled: infilled.frames().mapv(|v| v as f32),
            mask: pair.observation.mask().to_vec(),
            target: pair.target.frames().mapv(|v| v as f32),
        })
    }
}

/// Loss and gradients for one pair at diffusion step `t` with given noise.
pub fn pair_loss(
    net: &Denoiser,
    schedule: &NoiseSchedule,
    pair: &PreparedPair,
    t: usize,
    noise: ArrayView2<f32>,
) -> Result<(f32, Grads)> {
    if t == 0 || t > schedule.steps() {
        return Err(ModelError::Invalid(format!(
            "training step t={t} outside [1, {}]",
            schedule.steps()
        )));
    }
    let y_t = schedule.forward_noise_f32(pair.target.view(), t, noise);
    net.loss_and_grads(
        y_t.view(),
        pair.x_infilled.view(),
        &pair.mask,
        t,
        pair.target.view(),
    )
}

fn gaussian(rng: &mut ChaCha8Rng, shape: (usize, usize)) -> Array2<f32> {
    Array2::from_shape_simple_fn(shape, || rng.sample(rand_distr::StandardNormal))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub step: u64,
    pub loss: f32,
    pub grad_norm: f32,
}

pub struct Trainer {
    net: Denoiser,
    schedule: NoiseSchedule,
    optimizer: Adam,
    rng: ChaCha8Rng,
    pairs: Vec<PreparedPair>,
    order: Vec<usize>,
    cursor: usize,
    step: u64,
    batch_size: usize,
}

impl Trainer {
    pub fn new(net: Denoiser, pairs: &[TrainingPair], config: &TrainConfig) -> Result<Self> {
        let v = config.violations("");
        if !v.is_empty() {
            return Err(ModelError::Invalid(v.join("; ")));
        }
        if pairs.is_empty() {
            return Err(ModelError::Invalid("training needs at least one pair".into()));
        }
        let nc = net.config();
        for p in pairs {
            let dim = (p.target.num_frames(), p.target.layout().dim());
            if dim != (nc.frames, nc.dim) {
                return Err(ModelError::Shape {
                    context: "training pair",
                    expected: (nc.frames, nc.dim),
                    actual: dim,
                });
            }
        }
        let prepared = pairs.iter().map(PreparedPair::new).collect::<Result<Vec<_>>>()?;
        let schedule = NoiseSchedule::new(nc.schedule, nc.diffusion_steps)?;
        let optimizer = Adam::new(config.optimizer.clone(), net.params());
        Ok(Trainer {
            net,
            schedule,
            optimizer,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            order: (0..prepared.len()).collect(),
            cursor: prepared.len(),
            pairs: prepared,
            step: 0,
            batch_size: config.batch_size,
        })
    }

    pub fn net(&self) -> &Denoiser {
        &self.net
    }

    pub fn into_net(self) -> Denoiser {
        self.net
    }

    pub fn steps_done(&self) -> u64 {
        self.step
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn next_index(&mut self) -> usize {
        if self.cursor >= self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        self.cursor += 1;
        self.order[self.cursor - 1]
    }

    /// One optimizer update on a minibatch drawn from shuffled epochs.
    pub fn step(&mut self) -> Result<StepStats> {
        let shape = (self.net.config().frames, self.net.config().dim);
        let mut total = self.net.params().zeros_like();
        let mut loss_sum = 0.0f64;
        for _ in 0..self.batch_size {
            let idx = self.next_index();
            let t = self.rng.random_range(1..=self.schedule.steps());
            let noise = gaussian(&mut self.rng, shape);
            let (loss, grads) = pair_loss(&self.net, &self.schedule, &self.pairs[idx], t, noise.view())?;
            if !loss.is_finite() {
                return Err(ModelError::NonFiniteLoss {
                    step: self.step,
                    t,
                    loss,
                });
            }
            loss_sum += loss as f64;
            total.add_assign(&grads);
        }
        total.scale(1.0 / self.batch_size as f32);
        let grad_norm = self.optimizer.update(self.net.params_mut(), &total);
        self.step += 1;
        Ok(StepStats {
            step: self.step,
            loss: (loss_sum / self.batch_size as f64) as f32,
            grad_norm,
        })
    }

    /// Runs `steps` updates, logging every `log_every`.
    pub fn run(&mut self, steps: u64, log_every: u64) -> Result<Vec<StepStats>> {
        let mut history = Vec::with_capacity(steps as usize);
        for _ in 0..steps {
            let stats = self.step()?;
            if log_every > 0 && stats.step % log_every == 0 {
                tracing::info!(step = stats.step, loss = stats.loss, grad_norm = stats.grad_norm, "train");
            }
            history.push(stats);
        }
        Ok(history)
    }

    /// Deterministic training loss: every pair at `probes` evenly spaced
    /// diffusion steps, with noise drawn from a fixed seed.
    pub fn probe_loss(&self, probes: usize, seed: u64) -> Result<f32> {
        probe_loss(&self.net, &self.schedule, &self.pairs, probes, seed)
    }
}

pub fn probe_loss(
    net: &Denoiser,
    schedule: &NoiseSchedule,
    pairs: &[PreparedPair],
    probes: usize,
    seed: u64,
) -> Result<f32> {
    let probes = probes.max(1);
    let steps = schedule.steps();
    let shape = (net.config().frames, net.config().dim);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sum = 0.0f64;
    let mut count = 0usize;
    for pair in pairs {
        for j in 0..probes {
            let t = if probes == 1 {
                steps.div_ceil(2)
            } else {
                1 + j * (steps - 1) / (probes - 1)
            };
            let noise = gaussian(&mut rng, shape);
            let y_t = schedule.forward_noise_f32(pair.target.view(), t, noise.view());
            let out = net.forward(y_t.view(), pair.x_infilled.view(), &pair.mask, t)?;
            let mse = out
                .composed
                .iter()
                .zip(pair.target.iter())
                .map(|(a, b)| ((a - b) as f64).powi(2))
                .sum::<f64>()
                / out.composed.len() as f64;
            sum += mse;
            count += 1;
        }
    }
    Ok((sum / count as f64) as f32)
}
