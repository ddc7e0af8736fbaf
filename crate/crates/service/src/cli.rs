//! Command line interface.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use loosekey_core::io::write_motion;
use loosekey_core::metrics::EvalReport;
use loosekey_core::{place_on_timeline, KeyframeSet, Motion};
use loosekey_model::SamplerConfig;
use serde_json::{json, Value};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::jobs::JobStore;
use crate::pipeline::{self, Selector};
use crate::server::{self, AppState};

#[derive(Debug, Parser)]
#[command(name = "loosekey", version, about = "Loosely timed keyframe in-betweening")]
pub struct Cli {
    /// JSON run configuration; omitted keys take their defaults.
    #[arg(long, global = true, env = "LOOSEKEY_CONFIG")]
    pub config: Option<PathBuf>,
    /// Seed for the command's random stream, overriding the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Config override such as `net.latent=32`; the value is parsed as JSON
    /// when possible and taken as a string otherwise. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Writes a training dataset of mistimed keyframe pairs.
    Datagen {
        /// Directory of source motion files; synthesized when omitted.
        #[arg(long)]
        sources: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Trains a denoiser and writes its checkpoint.
    Train {
        /// Dataset directory; pairs are synthesized from the config when omitted.
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generates motions for a keyframe file.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        keyframes: PathBuf,
        /// Output motion file (`.lkm` for binary, JSON otherwise). Several
        /// samples get a `_k` suffix.
        #[arg(long)]
        out: PathBuf,
        /// Timeline length; defaults to the keyframe file's `F`.
        #[arg(long)]
        frames: Option<usize>,
        #[arg(long)]
        num_samples: Option<usize>,
        /// Imputation step C.
        #[arg(long)]
        imputation: Option<usize>,
    },
    /// Evaluates a checkpoint or baseline and writes a report.
    Eval {
        /// LT, NoWarp, NoTime, IMP(C), IMP (with --imputation), interp or gt.
        #[arg(long, alias = "baseline")]
        generator: Selector,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        imputation: Option<usize>,
        /// Dataset directory to test on; synthesized from `eval` settings when omitted.
        #[arg(long)]
        testset: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Runs the HTTP service.
    Serve {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Listen address, overriding `serve.addr`.
        #[arg(long)]
        addr: Option<String>,
    },
    /// Prints the resolved configuration.
    Config,
}

/// Sets `value` at a dotted `path` inside a JSON object tree.
fn set_path(root: &mut Value, path: &str, value: Value) -> Result<()> {
    let mut node = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if part.is_empty() {
            return Err(Error::Config(vec![format!("--set {path}: empty key segment")]));
        }
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::Config(vec![format!("--set {path}: {} is not an object", parts[..i].join("."))]))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj.entry(part.to_string()).or_insert_with(|| json!({}));
    }
    Ok(())
}

/// Merges the config file, `--set` overrides and the seed flag, then
/// validates the result.
pub fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut value = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            serde_json::from_str(&text).map_err(|e| Error::Config(vec![format!("{}: not valid JSON: {e}", path.display())]))?
        }
        None => json!({}),
    };
    let mut problems = Vec::new();
    for item in &cli.overrides {
        let Some((key, raw)) = item.split_once('=') else {
            problems.push(format!("--set {item}: expected KEY=VALUE"));
            continue;
        };
        let parsed = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        if let Err(Error::Config(v)) = set_path(&mut value, key.trim(), parsed) {
            problems.extend(v);
        }
    }
    if !problems.is_empty() {
        return Err(Error::Config(problems));
    }
    let mut cfg = RunConfig::from_json(&value.to_string())?;
    if let Some(seed) = cli.seed {
        match cli.command {
            Command::Datagen { .. } => {
                cfg.datagen.seed = seed;
                cfg.synth.seed = seed;
            }
            Command::Train { .. } => cfg.train.seed = seed,
            Command::Sample { .. } => cfg.sampler.seed = seed,
            Command::Eval { .. } => cfg.eval.seed = seed,
            Command::Serve { .. } | Command::Config => {}
        }
    }
    if let Command::Sample {
        num_samples, imputation, ..
    } = &cli.command
    {
        if let Some(n) = num_samples {
            cfg.sampler.num_samples = *n;
        }
        if imputation.is_some() {
            cfg.sampler.imputation = *imputation;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn sample_paths(out: &Path, n: usize) -> Vec<PathBuf> {
    if n == 1 {
        return vec![out.to_path_buf()];
    }
    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("motion");
    let ext = out.extension().and_then(|s| s.to_str()).unwrap_or("json");
    (0..n).map(|k| out.with_file_name(format!("{stem}_{k}.{ext}"))).collect()
}

fn write_output(motion: &Motion, cfg: &RunConfig, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    if path.extension().is_some_and(|e| e == "lkm") {
        let bytes = loosekey_core::io::encode_binary(motion);
        return std::fs::write(path, bytes).map_err(|e| Error::io(path, e));
    }
    Ok(write_motion(motion, Some(&cfg.skeleton.skeleton()), path)?)
}

fn write_json_file(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let text = serde_json::to_vec_pretty(value).map_err(|e| Error::json(path.display().to_string(), e))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Runs a command and returns its summary, printed as JSON on stdout.
pub fn run(cli: Cli) -> Result<Value> {
    let cfg = resolve_config(&cli)?;
    let hash = cfg.hash();
    tracing::info!(config = %serde_json::to_string(&cfg).unwrap_or_default(), config_hash = %hash, "resolved config");
    match cli.command {
        Command::Config => Ok(json!({"config": cfg, "config_hash": hash})),
        Command::Datagen { sources, out } => {
            tracing::info!(seed = cfg.datagen.seed, synth_seed = cfg.synth.seed, "datagen");
            let summary = pipeline::run_datagen(&cfg, sources.as_deref(), &out)?;
            Ok(json!({"dataset": out, "summary": summary, "config_hash": hash}))
        }
        Command::Train { dataset, out } => {
            tracing::info!(seed = cfg.train.seed, steps = cfg.train.steps, "train");
            let pairs = match &dataset {
                Some(dir) => pipeline::load_dataset(&cfg, dir)?,
                None => pipeline::training_pairs(&cfg)?,
            };
            let net = pipeline::train(&cfg, &pairs, |s| {
                tracing::info!(step = s.step, loss = s.loss, grad_norm = s.grad_norm, "train");
            })?;
            pipeline::save_checkpoint(&cfg, &net, &out)?;
            Ok(json!({
                "checkpoint": out,
                "pairs": pairs.len(),
                "steps": cfg.train.steps,
                "parameters": net.param_count(),
                "config_hash": hash,
            }))
        }
        Command::Sample {
            checkpoint,
            keyframes,
            out,
            frames,
            ..
        } => {
            let ck = pipeline::load_checkpoint(&cfg, &checkpoint)?;
            let kf = KeyframeSet::read(&keyframes, cfg.layout())?;
            let obs = place_on_timeline(&kf, frames.unwrap_or(kf.len()))?;
            let sampler: &SamplerConfig = &cfg.sampler;
            tracing::info!(seed = sampler.seed, samples = sampler.num_samples, imputation = ?sampler.imputation, "sample");
            let motions = pipeline::generate(&ck.net, &obs, sampler)?;
            let paths = sample_paths(&out, motions.len());
            for (m, p) in motions.iter().zip(&paths) {
                write_output(m, &cfg, p)?;
            }
            Ok(json!({"motions": paths, "frames": obs.len(), "config_hash": hash}))
        }
        Command::Eval {
            generator,
            checkpoint,
            imputation,
            testset,
            out,
        } => {
            let ck = checkpoint
                .as_deref()
                .map(|p| pipeline::load_checkpoint(&cfg, p))
                .transpose()?;
            let gen = pipeline::generator(generator, imputation, ck.as_ref().map(|c| &c.net))?;
            let pairs = match &testset {
                Some(dir) => pipeline::load_dataset(&cfg, dir)?,
                None => pipeline::test_pairs(&cfg)?,
            };
            tracing::info!(generator = %gen.name(), seed = cfg.eval.seed, pairs = pairs.len(), "eval");
            let ev = pipeline::run_eval(&cfg, &gen, &pairs)?;
            let ck_hash = ck.as_ref().and_then(|c| c.header.config_hash.clone());
            let doc = pipeline::report_doc(&cfg, &gen, ck_hash, ev);
            write_json_file(&out, &doc)?;
            eprintln!("{}", EvalReport::table(&[(doc.generator.as_str(), &doc.report)]));
            Ok(json!({
                "report": out,
                "generator": doc.generator,
                "retimed_fraction": doc.retimed_fraction,
                "kpe": doc.report.kpe,
                "config_hash": hash,
            }))
        }
        Command::Serve { checkpoint, addr } => {
            let (net, ck_hash) = match &checkpoint {
                Some(p) => {
                    let ck = pipeline::load_checkpoint(&cfg, p)?;
                    (Some(ck.net), ck.header.config_hash)
                }
                None => (None, None),
            };
            let store = JobStore::open(cfg.home().join("runs"))?;
            let addr = addr.unwrap_or_else(|| cfg.serve.addr.clone());
            let state = AppState::new(cfg, net, checkpoint.map(|p| p.display().to_string()), ck_hash, store);
            let rt = tokio::runtime::Runtime::new().map_err(|e| Error::io("tokio runtime", e))?;
            rt.block_on(server::serve(state, &addr))?;
            Ok(json!({"stopped": addr}))
        }
    }
}
