use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Grads, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 1.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    config: AdamConfig,
    m: Vec<Array2<f32>>,
    v: Vec<Array2<f32>>,
    step: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParamStore) -> Self {
        let zeros = params.zeros_like().0;
        Adam {
            config,
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update and returns the pre-clip gradient norm.
    pub fn update(&mut self, params: &mut ParamStore, grads: &Grads) -> f32 {
        let norm = grads.norm();
        let c = &self.config;
        let clip = if c.clip_norm > 0.0 && norm > c.clip_norm {
            c.clip_norm / norm
        } else {
            1.0
        };
        self.step += 1;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let lr = c.learning_rate;
        let ids: Vec<_> = params.iter().map(|(id, _, _)| id).collect();
        for id in ids {
            let i = id.0;
            let g = &grads.0[i];
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let p = params.get_mut(id);
            ndarray::Zip::from(p)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    let g = g * clip;
                    *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                    *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                    let mh = *m / bc1;
                    let vh = *v / bc2;
                    *p -= lr * mh / (vh.sqrt() + c.eps);
                });
        }
        norm
    }
}
