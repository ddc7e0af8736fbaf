//! The two-headed denoiser: a shared transformer decoder with a per-frame
//! pose-residual head and a flattened time-warp head.

use std::fmt;
use std::str::FromStr;

use loosekey_core::warp::DEFAULT_SLOPE_FLOOR;
use ndarray::{Array1, Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Grads, ParamId, ParamStore, Tape, Var};
use crate::error::{ModelError, Result};
use crate::schedule::ScheduleKind;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    /// Time warp plus pose residual.
    #[default]
    #[serde(rename = "LT")]
    Lt,
    /// Residual only, trained on shifted keyframes.
    NoWarp,
    /// Residual only, trained without temporal shifts.
    NoTime,
}

impl Mode {
    pub fn has_warp(self) -> bool {
        matches!(self, Mode::Lt)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Lt => "LT",
            Mode::NoWarp => "NoWarp",
            Mode::NoTime => "NoTime",
        })
    }
}

impl FromStr for Mode {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "LT" | "lt" => Ok(Mode::Lt),
            "NoWarp" | "nowarp" | "no_warp" => Ok(Mode::NoWarp),
            "NoTime" | "notime" | "no_time" => Ok(Mode::NoTime),
            other => Err(ModelError::Invalid(format!("unknown mode {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    /// Window length F.
    pub frames: usize,
    /// Frame vector width D.
    pub dim: usize,
    pub latent: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff: usize,
    pub warp_hidden: [usize; 2],
    pub mode: Mode,
    pub mask_channel: bool,
    pub slope_floor: f64,
    pub diffusion_steps: usize,
    pub schedule: ScheduleKind,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            frames: 60,
            dim: 79,
            latent: 64,
            layers: 4,
            heads: 4,
            ff: 256,
            warp_hidden: [256, 64],
            mode: Mode::Lt,
            mask_channel: false,
            slope_floor: DEFAULT_SLOPE_FLOOR,
            diffusion_steps: 100,
            schedule: ScheduleKind::Cosine,
        }
    }
}

impl NetConfig {
    pub fn violations(&self, prefix: &str) -> Vec<String> {
        let mut out = Vec::new();
        let mut need = |ok: bool, msg: String| {
            if !ok {
                out.push(format!("{prefix}{msg}"));
            }
        };
        need(self.frames >= 2, format!("frames: must be >= 2, got {}", self.frames));
        need(self.dim >= 1, "dim: must be >= 1".into());
        need(self.latent >= 2, format!("latent: must be >= 2, got {}", self.latent));
        need(self.latent.is_multiple_of(2), format!("latent: must be even, got {}", self.latent));
        need(self.heads >= 1, "heads: must be >= 1".into());
        need(
            self.heads >= 1 && self.latent.is_multiple_of(self.heads),
            format!("latent: {} is not divisible by heads {}", self.latent, self.heads),
        );
        need(self.ff >= 1, "ff: must be >= 1".into());
        need(
            self.warp_hidden.iter().all(|&h| h >= 1),
            "warp_hidden: widths must be >= 1".into(),
        );
        need(
            self.slope_floor.is_finite() && self.slope_floor > 0.0,
            format!("slope_floor: must be positive, got {}", self.slope_floor),
        );
        need(self.diffusion_steps >= 1, "diffusion_steps: must be >= 1".into());
        out
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations("");
        if v.is_empty() {
            Ok(())
        } else {
            Err(ModelError::Invalid(v.join("; ")))
        }
    }

    fn cond_width(&self) -> usize {
        self.dim + usize::from(self.mask_channel)
    }
}

#[derive(Clone, Copy, Debug)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct Norm {
    gain: ParamId,
    bias: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

#[derive(Clone, Copy, Debug)]
struct Layer {
    norm1: Norm,
    self_attn: Attention,
    norm2: Norm,
    cross_attn: Attention,
    norm3: Norm,
    ff1: Linear,
    ff2: Linear,
}

#[derive(Clone, Copy, Debug)]
struct WarpHead {
    l1: Linear,
    l2: Linear,
    l3: Linear,
    alpha: ParamId,
}

#[derive(Clone, Debug)]
struct Layout {
    cond: Linear,
    motion: Linear,
    time1: Linear,
    time2: Linear,
    pos: ParamId,
    layers: Vec<Layer>,
    final_norm: Norm,
    residual: Linear,
    warp: Option<WarpHead>,
}

/// Output of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct NetOutput {
    /// Raw slopes before flooring; absent without a warp head.
    pub w_raw: Option<Array1<f32>>,
    pub delta: Array2<f32>,
    /// The prediction of the clean motion.
    pub composed: Array2<f32>,
}

#[derive(Clone, Debug)]
pub struct Denoiser {
    config: NetConfig,
    params: ParamStore,
    layout: Layout,
}

enum Init {
    Xavier,
    Zeros,
    Const(f32),
    Normal(f32),
}

struct Builder<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
}

impl Builder<'_> {
    fn tensor(&mut self, name: String, rows: usize, cols: usize, init: Init) -> ParamId {
        let value = match init {
            Init::Xavier => {
                let a = (6.0 / (rows + cols) as f64).sqrt() as f32;
                Array2::from_shape_simple_fn((rows, cols), || self.rng.random_range(-a..a))
            }
            Init::Zeros => Array2::zeros((rows, cols)),
            Init::Const(c) => Array2::from_elem((rows, cols), c),
            Init::Normal(std) => Array2::from_shape_simple_fn((rows, cols), || {
                let n: f32 = self.rng.sample(rand_distr::StandardNormal);
                n * std
            }),
        };
        self.store.add(name, value)
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Linear {
        Linear {
            w: self.tensor(format!("{name}.weight"), fan_in, fan_out, Init::Xavier),
            b: self.tensor(format!("{name}.bias"), 1, fan_out, Init::Zeros),
        }
    }

    fn norm(&mut self, name: &str, width: usize) -> Norm {
        Norm {
            gain: self.tensor(format!("{name}.gain"), 1, width, Init::Const(1.0)),
            bias: self.tensor(format!("{name}.bias"), 1, width, Init::Zeros),
        }
    }

    fn attention(&mut self, name: &str, width: usize) -> Attention {
        Attention {
            q: self.linear(&format!("{name}.q"), width, width),
            k: self.linear(&format!("{name}.k"), width, width),
            v: self.linear(&format!("{name}.v"), width, width),
            o: self.linear(&format!("{name}.o"), width, width),
        }
    }
}

/// One batch entry: `(y_t, x_inf, mask, t)`.
pub type BatchItem<'a> = (ArrayView2<'a, f32>, ArrayView2<'a, f32>, &'a [bool], usize);

/// Sinusoidal embedding of the diffusion step.
pub fn timestep_embedding(t: usize, width: usize) -> Array2<f32> {
    let half = width / 2;
    let mut out = Array2::zeros((1, width));
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        let angle = t as f64 * freq;
        out[[0, i]] = angle.sin() as f32;
        out[[0, half + i]] = angle.cos() as f32;
    }
    out
}

impl Denoiser {
    /// Builds a freshly initialized network. The residual head is zeroed and
    /// the warp head emits unit slopes, so the composed prediction starts as
    /// the infilled observation itself.
    pub fn new(config: NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let l = config.latent;
        let mut b = Builder {
            store: &mut params,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let cond = b.linear("cond_proj", config.cond_width(), l);
        let motion = b.linear("motion_proj", config.dim, l);
        let time1 = b.linear("time_embed.0", l, l);
        let time2 = b.linear("time_embed.1", l, l);
        let pos = b.tensor("pos_embed".into(), config.frames, l, Init::Normal(0.02));
        let layers = (0..config.layers)
            .map(|i| Layer {
                norm1: b.norm(&format!("layers.{i}.norm1"), l),
                self_attn: b.attention(&format!("layers.{i}.self_attn"), l),
                norm2: b.norm(&format!("layers.{i}.norm2"), l),
                cross_attn: b.attention(&format!("layers.{i}.cross_attn"), l),
                norm3: b.norm(&format!("layers.{i}.norm3"), l),
                ff1: b.linear(&format!("layers.{i}.ff.0"), l, config.ff),
                ff2: b.linear(&format!("layers.{i}.ff.1"), config.ff, l),
            })
            .collect();
        let final_norm = b.norm("final_norm", l);
        let residual = Linear {
            w: b.tensor("residual_head.weight".into(), l, config.dim, Init::Zeros),
            b: b.tensor("residual_head.bias".into(), 1, config.dim, Init::Zeros),
        };
        let warp = config.mode.has_warp().then(|| {
            let [h1, h2] = config.warp_hidden;
            WarpHead {
                l1: b.linear("warp_head.0", config.frames * l, h1),
                l2: b.linear("warp_head.1", h1, h2),
                l3: Linear {
                    w: b.tensor("warp_head.2.weight".into(), h2, config.frames, Init::Zeros),
                    b: b.tensor("warp_head.2.bias".into(), 1, config.frames, Init::Const(1.0)),
                },
                alpha: b.tensor("warp_head.prelu".into(), 1, 1, Init::Const(0.25)),
            }
        });
        let layout = Layout {
            cond,
            motion,
            time1,
            time2,
            pos,
            layers,
            final_norm,
            residual,
            warp,
        };
        Ok(Denoiser {
            config,
            params,
            layout,
        })
    }

    /// Rebuilds a network around stored parameters, checking every tensor
    /// name and shape against a fresh instance of `config`.
    pub fn from_params(config: NetConfig, params: ParamStore) -> Result<Self> {
        let fresh = Denoiser::new(config, 0)?;
        if fresh.params.len() != params.len() {
            return Err(ModelError::Incompatible {
                field: "parameter count",
                expected: fresh.params.len().to_string(),
                actual: params.len().to_string(),
            });
        }
        for ((_, name_a, a), (_, name_b, b)) in fresh.params.iter().zip(params.iter()) {
            if name_a != name_b {
                return Err(ModelError::Incompatible {
                    field: "parameter name",
                    expected: name_a.to_string(),
                    actual: name_b.to_string(),
                });
            }
            if a.dim() != b.dim() {
                return Err(ModelError::Incompatible {
                    field: "parameter shape",
                    expected: format!("{name_a} {:?}", a.dim()),
                    actual: format!("{name_b} {:?}", b.dim()),
                });
            }
        }
        Ok(Denoiser {
            config: fresh.config,
            params,
            layout: fresh.layout,
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    /// Names of the parameters that belong to the residual and warp heads.
    pub fn head_params(&self) -> (Vec<ParamId>, Vec<ParamId>) {
        let residual = vec![self.layout.residual.w, self.layout.residual.b];
        let warp = self
            .layout
            .warp
            .map(|h| vec![h.l1.w, h.l1.b, h.l2.w, h.l2.b, h.l3.w, h.l3.b, h.alpha])
            .unwrap_or_default();
        (residual, warp)
    }

    fn check_inputs(&self, y_t: &ArrayView2<f32>, x_inf: &ArrayView2<f32>, mask: &[bool]) -> Result<()> {
        let expected = (self.config.frames, self.config.dim);
        for (context, dim) in [("noisy motion", y_t.dim()), ("observation", x_inf.dim())] {
            if dim != expected {
                return Err(ModelError::Shape {
                    context,
                    expected,
                    actual: dim,
                });
            }
        }
        if mask.len() != self.config.frames {
            return Err(ModelError::Shape {
                context: "mask",
                expected: (self.config.frames, 1),
                actual: (mask.len(), 1),
            });
        }
        Ok(())
    }

    fn linear(&self, tape: &mut Tape, x: Var, lin: Linear) -> Var {
        let w = tape.param(lin.w);
        let b = tape.param(lin.b);
        let h = tape.matmul(x, w);
        tape.add_row(h, b)
    }

    fn norm(&self, tape: &mut Tape, x: Var, n: Norm) -> Var {
        let h = tape.layer_norm(x);
        let g = tape.param(n.gain);
        let b = tape.param(n.bias);
        let h = tape.mul_row(h, g);
        tape.add_row(h, b)
    }

    fn attention(&self, tape: &mut Tape, x: Var, memory: Var, a: Attention) -> Var {
        let q = self.linear(tape, x, a.q);
        let k = self.linear(tape, memory, a.k);
        let v = self.linear(tape, memory, a.v);
        let width = self.config.latent / self.config.heads;
        let scale = 1.0 / (width as f32).sqrt();
        let mut heads = Vec::with_capacity(self.config.heads);
        for h in 0..self.config.heads {
            let (lo, hi) = (h * width, (h + 1) * width);
            let qh = tape.slice_cols(q, lo, hi);
            let kh = tape.slice_cols(k, lo, hi);
            let vh = tape.slice_cols(v, lo, hi);
            let scores = tape.matmul_t(qh, kh);
            let scores = tape.scale(scores, scale);
            let weights = tape.softmax(scores);
            heads.push(tape.matmul(weights, vh));
        }
        let joined = if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads) };
        self.linear(tape, joined, a.o)
    }

    /// Records the forward pass on `tape`, returning (raw slopes, residual,
    /// composed prediction).
    fn record(
        &self,
        tape: &mut Tape,
        y_t: ArrayView2<f32>,
        x_inf: ArrayView2<f32>,
        mask: &[bool],
        t: usize,
    ) -> (Option<Var>, Var, Var) {
        let cfg = &self.config;
        let f = cfg.frames;
        let lay = &self.layout;

        let x_in = if cfg.mask_channel {
            let mut m = Array2::zeros((f, cfg.dim + 1));
            m.slice_mut(ndarray::s![.., ..cfg.dim]).assign(&x_inf);
            for (i, &c) in mask.iter().enumerate() {
                m[[i, cfg.dim]] = if c { 1.0 } else { 0.0 };
            }
            m
        } else {
            x_inf.to_owned()
        };
        let x_obs = tape.input(x_inf.to_owned());
        let x_var = tape.input(x_in);
        let y_var = tape.input(y_t.to_owned());
        let pos = tape.param(lay.pos);

        let cond = self.linear(tape, x_var, lay.cond);
        let cond = tape.add(cond, pos);

        let temb = tape.input(timestep_embedding(t, cfg.latent));
        let temb = self.linear(tape, temb, lay.time1);
        let temb = tape.gelu(temb);
        let temb = self.linear(tape, temb, lay.time2);

        let motion = self.linear(tape, y_var, lay.motion);
        let motion = tape.add(motion, pos);

        let mut h = tape.concat_rows(&[temb, cond, motion]);
        for layer in &lay.layers {
            let n = self.norm(tape, h, layer.norm1);
            let a = self.attention(tape, n, n, layer.self_attn);
            h = tape.add(h, a);
            let n = self.norm(tape, h, layer.norm2);
            let a = self.attention(tape, n, cond, layer.cross_attn);
            h = tape.add(h, a);
            let n = self.norm(tape, h, layer.norm3);
            let a = self.linear(tape, n, layer.ff1);
            let a = tape.gelu(a);
            let a = self.linear(tape, a, layer.ff2);
            h = tape.add(h, a);
        }
        let h = self.norm(tape, h, lay.final_norm);
        let latents = tape.slice_rows(h, f + 1, 2 * f + 1);
        let delta = self.linear(tape, latents, lay.residual);

        match lay.warp {
            Some(head) => {
                let flat = tape.flatten(latents);
                let z = self.linear(tape, flat, head.l1);
                let z = tape.relu(z);
                let z = self.linear(tape, z, head.l2);
                let z = tape.relu(z);
                let z = self.linear(tape, z, head.l3);
                let alpha = tape.param(head.alpha);
                let w_raw = tape.prelu(z, alpha);
                let warped = tape.warp(w_raw, x_obs, cfg.slope_floor as f32);
                let composed = tape.add(warped, delta);
                (Some(w_raw), delta, composed)
            }
            None => {
                let composed = tape.add(x_obs, delta);
                (None, delta, composed)
            }
        }
    }

    /// Runs the network on one window. `t` is the diffusion step.
    pub fn forward(
        &self,
        y_t: ArrayView2<f32>,
        x_inf: ArrayView2<f32>,
        mask: &[bool],
        t: usize,
    ) -> Result<NetOutput> {
        self.check_inputs(&y_t, &x_inf, mask)?;
        let mut tape = Tape::new(&self.params);
        let (w, delta, composed) = self.record(&mut tape, y_t, x_inf, mask, t);
        Ok(NetOutput {
            w_raw: w.map(|w| tape.value(w).row(0).to_owned()),
            delta: tape.value(delta).clone(),
            composed: tape.value(composed).clone(),
        })
    }

    /// Independent forward passes over a batch.
    pub fn forward_batch(
        &self,
        items: &[BatchItem<'_>],
    ) -> Result<Vec<NetOutput>> {
        items
            .iter()
            .map(|(y, x, m, t)| self.forward(y.view(), x.view(), m, *t))
            .collect()
    }

    /// Mean squared error of the composed prediction against `target`, with
    /// gradients for every parameter.
    pub fn loss_and_grads(
        &self,
        y_t: ArrayView2<f32>,
        x_inf: ArrayView2<f32>,
        mask: &[bool],
        t: usize,
        target: ArrayView2<f32>,
    ) -> Result<(f32, Grads)> {
        self.check_inputs(&y_t, &x_inf, mask)?;
        let mut tape = Tape::new(&self.params);
        let (_, _, composed) = self.record(&mut tape, y_t, x_inf, mask, t);
        let loss = tape.mse(composed, target.to_owned());
        let value = tape.value(loss)[[0, 0]];
        let grads = tape.backward(loss);
        Ok((value, grads.params))
    }

    /// Loss as a function of the warp-head output alone, with everything
    /// upstream held fixed. Used to check the warp gradient numerically.
    pub fn loss_given_slopes(
        &self,
        w_raw: &Array1<f32>,
        delta: ArrayView2<f32>,
        x_inf: ArrayView2<f32>,
        target: ArrayView2<f32>,
    ) -> (f32, Array1<f32>) {
        let mut tape = Tape::new(&self.params);
        let w = tape.input(w_raw.clone().insert_axis(ndarray::Axis(0)));
        let x = tape.input(x_inf.to_owned());
        let d = tape.input(delta.to_owned());
        let warped = tape.warp(w, x, self.config.slope_floor as f32);
        let composed = tape.add(warped, d);
        let loss = tape.mse(composed, target.to_owned());
        let value = tape.value(loss)[[0, 0]];
        let grads = tape.backward(loss);
        let g = grads.of(w).map(|g| g.row(0).to_owned()).unwrap_or_else(|| Array1::zeros(w_raw.len()));
        (value, g)
    }
}
