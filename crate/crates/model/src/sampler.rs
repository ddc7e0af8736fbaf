//! Reverse diffusion with optional imputation of the constraints.

use loosekey_core::{infill_linear, Motion, ObservationSignal};
use ndarray::{s, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ModelError, Result};
use crate::longform::SpliceLayout;
use crate::net::Denoiser;
use crate::schedule::NoiseSchedule;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    /// Imputation step C: constrained frames are overwritten with the noised
    /// constraints at every step `s >= C`. `None` disables imputation.
    pub imputation: Option<usize>,
    pub seed: u64,
    pub num_samples: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            imputation: None,
            seed: 0,
            num_samples: 1,
        }
    }
}

impl SamplerConfig {
    pub fn violations(&self, prefix: &str, steps: usize) -> Vec<String> {
        let mut out = Vec::new();
        if self.num_samples == 0 {
            out.push(format!("{prefix}num_samples: must be >= 1"));
        }
        if let Some(c) = self.imputation {
            if c > steps + 1 {
                out.push(format!(
                    "{prefix}imputation: step {c} outside [0, {}]",
                    steps + 1
                ));
            }
        }
        out
    }
}

/// Random stream for one (sample, window) item.
pub fn item_rng(seed: u64, sample: usize, window: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((sample as u64) << 20) | window as u64);
    rng
}

fn gaussian(rng: &mut ChaCha8Rng, shape: (usize, usize)) -> Array2<f64> {
    Array2::from_shape_simple_fn(shape, || rng.sample(rand_distr::StandardNormal))
}

struct Window {
    x_infilled: Array2<f32>,
    constraints: Array2<f64>,
    mask: Vec<bool>,
}

fn impute(
    schedule: &NoiseSchedule,
    state: &mut Array2<f64>,
    window: &Window,
    s: usize,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let noised = if s == 0 {
        window.constraints.clone()
    } else {
        let noise = gaussian(rng, window.constraints.dim());
        schedule.forward_noise(window.constraints.view(), s, noise.view())?
    };
    for (f, &m) in window.mask.iter().enumerate() {
        if m {
            state.row_mut(f).assign(&noised.row(f));
        }
    }
    Ok(())
}

/// Copies the rows window `i` shares with window `i - 1`.
fn chain(states: &mut [Array2<f64>], layout: &SpliceLayout, i: usize) {
    let (head, tail) = states.split_at_mut(i);
    let prev = &head[i - 1];
    let cur = &mut tail[0];
    let shift = layout.offsets[i] - layout.offsets[i - 1];
    let overlap = layout.overlap(i);
    cur.slice_mut(s![..overlap, ..])
        .assign(&prev.slice(s![shift..shift + overlap, ..]));
}

/// Denoises every window of `layout` jointly for one sample index and
/// returns the final per-window motions.
pub(crate) fn denoise_windows(
    net: &Denoiser,
    schedule: &NoiseSchedule,
    observation: &ObservationSignal,
    layout: &SpliceLayout,
    config: &SamplerConfig,
    sample: usize,
) -> Result<Vec<Array2<f64>>> {
    let f = layout.window;
    let d = observation.layout().dim();
    let infilled = infill_linear(observation)?;
    let windows: Vec<Window> = layout
        .offsets
        .iter()
        .map(|&o| Window {
            x_infilled: infilled.frames().slice(s![o..o + f, ..]).mapv(|v| v as f32),
            constraints: observation.buffer().slice(s![o..o + f, ..]).to_owned(),
            mask: observation.mask()[o..o + f].to_vec(),
        })
        .collect();
    let mut rngs: Vec<ChaCha8Rng> = (0..windows.len())
        .map(|w| item_rng(config.seed, sample, w))
        .collect();
    let steps = schedule.steps();
    let imputes = |s: usize| config.imputation.is_some_and(|c| s >= c);

    let mut states: Vec<Array2<f64>> = rngs.iter_mut().map(|r| gaussian(r, (f, d))).collect();
    for i in 0..windows.len() {
        if imputes(steps) {
            impute(schedule, &mut states[i], &windows[i], steps, &mut rngs[i])?;
        }
        if i > 0 {
            chain(&mut states, layout, i);
        }
    }

    for t in (1..=steps).rev() {
        let (c_x0, c_xt, var) = schedule.posterior(t)?;
        for i in 0..windows.len() {
            let w = &windows[i];
            let y_t = states[i].mapv(|v| v as f32);
            let out = net.forward(y_t.view(), w.x_infilled.view(), &w.mask, t)?;
            let x0 = out.composed.mapv(|v| v as f64);
            let mut next = &x0 * c_x0 + &states[i] * c_xt;
            if t > 1 {
                let noise = gaussian(&mut rngs[i], (f, d));
                next.scaled_add(var.sqrt(), &noise);
            }
            if next.iter().any(|v| !v.is_finite()) {
                return Err(ModelError::Invalid(format!(
                    "sampler produced non-finite values at step {t}"
                )));
            }
            states[i] = next;
            if imputes(t - 1) {
                impute(schedule, &mut states[i], w, t - 1, &mut rngs[i])?;
            }
            if i > 0 {
                chain(&mut states, layout, i);
            }
        }
    }
    Ok(states)
}

/// Draws `config.num_samples` motions for an observation of any length at
/// least the network window; longer inputs are spliced into overlapping
/// windows.
pub fn sample(net: &Denoiser, observation: &ObservationSignal, config: &SamplerConfig) -> Result<Vec<Motion>> {
    let nc = net.config();
    if observation.layout().dim() != nc.dim {
        return Err(ModelError::Incompatible {
            field: "dim",
            expected: nc.dim.to_string(),
            actual: observation.layout().dim().to_string(),
        });
    }
    let v = config.violations("", nc.diffusion_steps);
    if !v.is_empty() {
        return Err(ModelError::Invalid(v.join("; ")));
    }
    let schedule = NoiseSchedule::new(nc.schedule, nc.diffusion_steps)?;
    let layout = SpliceLayout::new(observation.len(), nc.frames)?;
    (0..config.num_samples)
        .map(|k| {
            let windows = denoise_windows(net, &schedule, observation, &layout, config, k)?;
            let frames = layout.assemble(&windows);
            Ok(Motion::new(*observation.layout(), observation.fps(), frames)?)
        })
        .collect()
}
