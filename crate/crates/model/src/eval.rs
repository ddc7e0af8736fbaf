use loosekey_core::datagen::TrainingPair;
use loosekey_core::metrics::{self, EvalReport, ReportAccumulator};
use loosekey_core::{infill_linear, Motion, Skeleton};
use serde::{Deserialize, Serialize};

use crate::error::{ModelError, Result};
use crate::net::Denoiser;
use crate::sampler::{sample, SamplerConfig};

/// What produces motions from observations during evaluation.
#[derive(Clone, Copy, Debug)]
pub enum Generator<'a> {
    /// Returns the target itself; an oracle for the metrics.
    GroundTruth,
    /// Linear infill of the observation.
    Interp,
    Model {
        net: &'a Denoiser,
        imputation: Option<usize>,
    },
}

impl Generator<'_> {
    pub fn name(&self) -> String {
        match self {
            Generator::GroundTruth => "GT".into(),
            Generator::Interp => "interp".into(),
            Generator::Model {
                net,
                imputation: Some(c),
            } => format!("{}+IMP({c})", net.config().mode),
            Generator::Model { net, imputation: None } => net.config().mode.to_string(),
        }
    }

    /// Motions for one pair. Deterministic generators repeat their output.
    pub fn generate(&self, pair: &TrainingPair, num_samples: usize, seed: u64) -> Result<Vec<Motion>> {
        match self {
            Generator::GroundTruth => Ok(vec![pair.target.clone(); num_samples]),
            Generator::Interp => Ok(vec![infill_linear(&pair.observation)?; num_samples]),
            Generator::Model { net, imputation } => sample(
                net,
                &pair.observation,
                &SamplerConfig {
                    imputation: *imputation,
                    seed,
                    num_samples,
                },
            ),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub num_samples: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            num_samples: 1,
            seed: 0,
        }
    }
}

/// Where the generated motion put one shifted keypose.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyposePlacement {
    pub pair: usize,
    /// Frame of the keypose in the ground truth.
    pub target_frame: usize,
    /// Frame the observation placed it at.
    pub observed_frame: usize,
    /// Closest frame of the first generated sample.
    pub generated_frame: usize,
}

impl KeyposePlacement {
    pub fn error(&self) -> usize {
        self.generated_frame.abs_diff(self.target_frame)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub report: EvalReport,
    pub placements: Vec<KeyposePlacement>,
}

impl Evaluation {
    /// Fraction of keyposes generated within `tolerance` frames of their
    /// ground-truth frame.
    pub fn retimed_fraction(&self, tolerance: usize) -> f64 {
        if self.placements.is_empty() {
            return 0.0;
        }
        let hits = self.placements.iter().filter(|p| p.error() <= tolerance).count();
        hits as f64 / self.placements.len() as f64
    }
}

/// Seed for pair `index` so each test pair draws independent noise.
pub fn pair_seed(seed: u64, index: usize) -> u64 {
    let mut z = seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn evaluate(
    generator: &Generator,
    pairs: &[TrainingPair],
    skeleton: &Skeleton,
    config: &EvalConfig,
) -> Result<Evaluation> {
    if config.num_samples == 0 {
        return Err(ModelError::Invalid("num_samples: must be >= 1".into()));
    }
    let mut acc = ReportAccumulator::default();
    let mut placements = Vec::new();
    for (i, pair) in pairs.iter().enumerate() {
        let samples = generator.generate(pair, config.num_samples, pair_seed(config.seed, i))?;
        let first = &samples[0];
        let l2 = metrics::l2_family(first, &pair.target, skeleton)?;
        acc.add_reconstruction(&l2, metrics::jitter(first, skeleton)?);
        for (observed, k) in pair.placements() {
            let keypose = pair.target.pose(k);
            let distances = metrics::keypose_distances(first, &keypose, skeleton)?;
            let (best, kpe) = distances
                .iter()
                .enumerate()
                .fold((0, f64::INFINITY), |b, (f, &v)| if v < b.1 { (f, v) } else { b });
            acc.add_kpe(kpe);
            placements.push(KeyposePlacement {
                pair: i,
                target_frame: k,
                observed_frame: observed,
                generated_frame: best,
            });
        }
        if samples.len() >= 2 {
            acc.add_diversity(metrics::diversity(&samples, skeleton)?);
        }
    }
    let report = acc.finish(config.num_samples);
    report.validate()?;
    Ok(Evaluation { report, placements })
}
