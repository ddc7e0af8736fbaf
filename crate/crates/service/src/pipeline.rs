//! The operations behind the CLI commands and the HTTP jobs.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use loosekey_core::datagen::{self, DatasetSummary, TrainingPair};
use loosekey_core::metrics::EvalReport;
use loosekey_core::{KeyframeSet, Motion, ObservationSignal};
use loosekey_model::checkpoint::{self, CheckpointHeader};
use loosekey_model::eval::KeyposePlacement;
use loosekey_model::train::StepStats;
use loosekey_model::{evaluate, Denoiser, EvalConfig, Evaluation, Generator, Mode, ModelError, SamplerConfig, Trainer};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::config::RunConfig;
use crate::error::{Error, Result};

pub const REPORT_VERSION: u32 = 1;

fn hash_annotation(cfg: &RunConfig) -> Map<String, Value> {
    let mut m = Map::new();
    m.insert("config_hash".into(), json!(cfg.hash()));
    m
}

/// Procedural source motions for training.
pub fn synth_sources(cfg: &RunConfig, seed: u64, count: usize) -> Result<Vec<Motion>> {
    Ok(datagen::synth_source_motions(
        count,
        &cfg.skeleton.skeleton(),
        cfg.synth.frames,
        cfg.synth.fps,
        seed,
    )?)
}

pub fn training_pairs(cfg: &RunConfig) -> Result<Vec<TrainingPair>> {
    let sources = synth_sources(cfg, cfg.synth.seed, cfg.synth.sources)?;
    Ok(datagen::generate_pairs(&sources, &cfg.datagen)?)
}

/// Held-out pairs drawn from sources synthesized with `eval.test_seed`, each
/// with `eval.test_keyframes` shifted keyframes.
pub fn test_pairs(cfg: &RunConfig) -> Result<Vec<TrainingPair>> {
    let per_source = datagen::slice_offsets(cfg.synth.frames, cfg.datagen.clip_len, cfg.datagen.stride).len().max(1);
    let sources = cfg.eval.test_pairs.div_ceil(per_source).max(1);
    let sources = synth_sources(cfg, cfg.eval.test_seed, sources)?;
    let datagen = datagen::DatagenConfig {
        keyframes_min: cfg.eval.test_keyframes,
        keyframes_max: cfg.eval.test_keyframes,
        ..cfg.datagen.clone()
    };
    let mut pairs = datagen::generate_pairs(&sources, &datagen)?;
    pairs.truncate(cfg.eval.test_pairs);
    Ok(pairs)
}

/// Writes a dataset built from `sources` (motion files) or from synthesized
/// motions when no directory is given.
pub fn run_datagen(cfg: &RunConfig, sources: Option<&Path>, out: &Path) -> Result<DatasetSummary> {
    let motions = match sources {
        Some(dir) => datagen::read_sources(dir, cfg.layout())?,
        None => synth_sources(cfg, cfg.synth.seed, cfg.synth.sources)?,
    };
    Ok(datagen::build_dataset(&motions, &cfg.datagen, out, hash_annotation(cfg))?)
}

/// Loads a dataset and checks it fits the configured network.
pub fn load_dataset(cfg: &RunConfig, dir: &Path) -> Result<Vec<TrainingPair>> {
    let ds = datagen::Dataset::load(dir)?;
    let mut problems = Vec::new();
    if ds.manifest.layout != cfg.layout() {
        problems.push(format!(
            "dataset layout has {} values per frame, the configured skeleton has {}",
            ds.manifest.layout.dim(),
            cfg.layout().dim()
        ));
    }
    if ds.manifest.config.clip_len != cfg.net.frames {
        problems.push(format!(
            "dataset clip_len {} differs from net.frames {}",
            ds.manifest.config.clip_len, cfg.net.frames
        ));
    }
    if !problems.is_empty() {
        return Err(Error::Invalid(format!("{}: {}", dir.display(), problems.join("; "))));
    }
    Ok(ds.pairs)
}

/// Trains a fresh network; `on_log` sees every `train.log_every`-th step.
pub fn train(cfg: &RunConfig, pairs: &[TrainingPair], mut on_log: impl FnMut(&StepStats)) -> Result<Denoiser> {
    let net = Denoiser::new(cfg.net.clone(), cfg.train.seed)?;
    let mut trainer = Trainer::new(net, pairs, &cfg.train)?;
    for _ in 0..cfg.train.steps {
        let stats = trainer.step()?;
        if cfg.train.log_every > 0 && stats.step % cfg.train.log_every == 0 {
            on_log(&stats);
        }
    }
    Ok(trainer.into_net())
}

pub fn checkpoint_header(cfg: &RunConfig, net: &Denoiser) -> CheckpointHeader {
    CheckpointHeader {
        net: net.config().clone(),
        steps: cfg.train.steps,
        config_hash: Some(cfg.hash()),
        metadata: Map::new(),
    }
}

pub fn save_checkpoint(cfg: &RunConfig, net: &Denoiser, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    Ok(checkpoint::save(net, &checkpoint_header(cfg, net), path)?)
}

/// Loads a checkpoint whose layout must match the configured skeleton.
pub fn load_checkpoint(cfg: &RunConfig, path: &Path) -> Result<checkpoint::Checkpoint> {
    let ck = checkpoint::load(path, None)?;
    let dim = cfg.layout().dim();
    if ck.net.config().dim != dim {
        return Err(Error::Model(ModelError::Incompatible {
            field: "dim",
            expected: format!("{dim} (configured skeleton)"),
            actual: format!("{} in {}", ck.net.config().dim, path.display()),
        }));
    }
    Ok(ck)
}

/// Which generator an evaluation runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Selector {
    /// A checkpoint trained in this mode, sampled without imputation.
    Model(Mode),
    /// Any checkpoint with imputation from step C.
    Imp(Option<usize>),
    Interp,
    GroundTruth,
}

impl Selector {
    pub fn needs_checkpoint(self) -> bool {
        matches!(self, Selector::Model(_) | Selector::Imp(_))
    }
}

impl fmt::Display for Selector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Selector::Model(m) => write!(f, "{m}"),
            Selector::Imp(Some(c)) => write!(f, "IMP({c})"),
            Selector::Imp(None) => f.write_str("IMP"),
            Selector::Interp => f.write_str("interp"),
            Selector::GroundTruth => f.write_str("gt"),
        }
    }
}

impl FromStr for Selector {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let lower = s.to_ascii_lowercase();
        match lower.as_str() {
            "interp" => return Ok(Selector::Interp),
            "gt" => return Ok(Selector::GroundTruth),
            "imp" => return Ok(Selector::Imp(None)),
            _ => {}
        }
        if let Some(inner) = lower.strip_prefix("imp(").and_then(|r| r.strip_suffix(')')) {
            return inner
                .trim()
                .parse()
                .map(|c| Selector::Imp(Some(c)))
                .map_err(|_| format!("IMP step must be a non-negative integer, got {inner:?}"));
        }
        s.parse::<Mode>()
            .map(Selector::Model)
            .map_err(|_| format!("unknown generator {s:?}; expected LT, NoWarp, NoTime, IMP(C), interp or gt"))
    }
}

impl TryFrom<String> for Selector {
    type Error = String;

    fn try_from(s: String) -> Result<Self, String> {
        s.parse()
    }
}

impl From<Selector> for String {
    fn from(s: Selector) -> String {
        s.to_string()
    }
}

/// Resolves a selector to a generator. An `IMP` selector without a step takes
/// `imputation`.
pub fn generator<'a>(selector: Selector, imputation: Option<usize>, net: Option<&'a Denoiser>) -> Result<Generator<'a>> {
    let need = |net: Option<&'a Denoiser>| {
        net.ok_or_else(|| Error::Invalid(format!("generator {selector} needs a checkpoint")))
    };
    match selector {
        Selector::Interp => Ok(Generator::Interp),
        Selector::GroundTruth => Ok(Generator::GroundTruth),
        Selector::Model(mode) => {
            let net = need(net)?;
            if net.config().mode != mode {
                return Err(Error::Invalid(format!(
                    "generator {mode} requested but the checkpoint was trained as {}",
                    net.config().mode
                )));
            }
            Ok(Generator::Model { net, imputation: None })
        }
        Selector::Imp(c) => {
            let c = c
                .or(imputation)
                .ok_or_else(|| Error::Invalid("IMP needs an imputation step C".into()))?;
            Ok(Generator::Model {
                net: need(net)?,
                imputation: Some(c),
            })
        }
    }
}

/// An evaluation as written to disk and served by the API.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportDoc {
    pub version: u32,
    pub generator: String,
    pub config_hash: String,
    /// Hash recorded in the evaluated checkpoint, if any.
    pub checkpoint_config_hash: Option<String>,
    pub report: EvalReport,
    pub retime_tolerance: usize,
    pub retimed_fraction: f64,
    pub placements: Vec<KeyposePlacement>,
}

pub fn run_eval(cfg: &RunConfig, generator: &Generator, pairs: &[TrainingPair]) -> Result<Evaluation> {
    let eval_cfg = EvalConfig {
        num_samples: cfg.eval.num_samples,
        seed: cfg.eval.seed,
    };
    Ok(evaluate(generator, pairs, &cfg.skeleton.skeleton(), &eval_cfg)?)
}

pub fn report_doc(cfg: &RunConfig, generator: &Generator, checkpoint_hash: Option<String>, ev: Evaluation) -> ReportDoc {
    ReportDoc {
        version: REPORT_VERSION,
        generator: generator.name(),
        config_hash: cfg.hash(),
        checkpoint_config_hash: checkpoint_hash,
        retime_tolerance: cfg.eval.retime_tolerance,
        retimed_fraction: ev.retimed_fraction(cfg.eval.retime_tolerance),
        report: ev.report,
        placements: ev.placements,
    }
}

/// Samples motions for an observation of at least one network window.
pub fn generate(net: &Denoiser, observation: &ObservationSignal, sampler: &SamplerConfig) -> Result<Vec<Motion>> {
    Ok(loosekey_model::sample(net, observation, sampler)?)
}

/// Observation for an edit: the base motion on `keep` ranges plus new
/// keyposes, which take precedence where they overlap a kept range.
pub fn edit_observation(base: &Motion, keep: &[(usize, usize)], keyframes: Option<&KeyframeSet>) -> Result<ObservationSignal> {
    let n = base.num_frames();
    let mut problems = Vec::new();
    for (i, &(a, b)) in keep.iter().enumerate() {
        if a >= b || b > n {
            problems.push(format!("keep_ranges[{i}]: [{a}, {b}) is not a non-empty range inside [0, {n})"));
        }
    }
    if let Some(kf) = keyframes {
        if kf.len() != n {
            problems.push(format!("keyframes.F: must equal the base motion length {n}, got {}", kf.len()));
        }
        if kf.layout() != base.layout() {
            problems.push("keyframes: pose layout differs from the base motion".into());
        }
    }
    if !problems.is_empty() {
        return Err(Error::Request(problems));
    }
    let mut buffer = Array2::zeros(base.frames().dim());
    let mut mask = vec![false; n];
    for &(a, b) in keep {
        for f in a..b {
            buffer.row_mut(f).assign(&base.frame(f));
            mask[f] = true;
        }
    }
    for k in keyframes.map(|k| k.entries()).unwrap_or_default() {
        buffer.row_mut(k.frame).assign(&k.pose.view());
        mask[k.frame] = true;
    }
    Ok(ObservationSignal::from_masked(*base.layout(), base.fps(), buffer, mask)?)
}
