use std::path::{Path, PathBuf};

use loosekey_core::datagen::DatagenConfig;
use loosekey_core::{PoseLayout, Skeleton};
use loosekey_model::{NetConfig, SamplerConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkeletonChoice {
    #[default]
    Desk,
    Smpl24,
}

impl SkeletonChoice {
    pub fn skeleton(self) -> Skeleton {
        match self {
            SkeletonChoice::Desk => Skeleton::desk(),
            SkeletonChoice::Smpl24 => Skeleton::smpl24(),
        }
    }
}

/// Procedural source motions used in place of a mocap corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub sources: usize,
    pub frames: usize,
    pub fps: u32,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            sources: 64,
            frames: 240,
            fps: 30,
            seed: 0,
        }
    }
}

/// Evaluation settings, including the retiming thresholds, which are fixed
/// here before any training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub num_samples: usize,
    pub seed: u64,
    /// Synthesis seed of the held-out test sources.
    pub test_seed: u64,
    pub test_pairs: usize,
    /// Shifted keyframes per test pair.
    pub test_keyframes: usize,
    /// A keypose counts as retimed when generated within this many frames
    /// of its ground-truth frame.
    pub retime_tolerance: usize,
    pub retime_min_fraction: f64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            num_samples: 1,
            seed: 0,
            test_seed: 1_000_003,
            test_pairs: 200,
            test_keyframes: 1,
            retime_tolerance: 2,
            retime_min_fraction: 0.6,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServeConfig {
    pub addr: String,
    /// Jobs waiting beyond this depth are refused.
    pub queue_depth: usize,
    pub workers: usize,
    /// Largest `num_samples * windows` answered inline by /generate.
    pub inline_max_windows: usize,
}

impl Default for ServeConfig {
    fn default() -> Self {
        ServeConfig {
            addr: "127.0.0.1:8080".into(),
            queue_depth: 16,
            workers: 1,
            inline_max_windows: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub skeleton: SkeletonChoice,
    pub synth: SynthConfig,
    pub datagen: DatagenConfig,
    pub net: NetConfig,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    pub eval: EvalSettings,
    pub serve: ServeConfig,
    /// Artifact root; defaults to `LOOSEKEY_HOME` or `.loosekey`.
    pub home: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            skeleton: SkeletonChoice::Desk,
            synth: SynthConfig::default(),
            datagen: DatagenConfig::default(),
            net: NetConfig::default(),
            train: TrainConfig::default(),
            sampler: SamplerConfig::default(),
            eval: EvalSettings::default(),
            serve: ServeConfig::default(),
            home: None,
        }
    }
}

/// Keys of `value` that have no counterpart in `reference`.
fn unknown_keys(value: &Value, reference: &Value, prefix: &str, out: &mut Vec<String>) {
    if let (Value::Object(map), Value::Object(known)) = (value, reference) {
        for (k, v) in map {
            match known.get(k) {
                Some(r) => unknown_keys(v, r, &format!("{prefix}{k}."), out),
                None => out.push(format!("{prefix}{k}: unknown key")),
            }
        }
    }
}

impl RunConfig {
    /// Parses a JSON configuration, reporting every unknown key at once.
    pub fn from_json(text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text).map_err(|e| Error::Config(vec![format!("not valid JSON: {e}")]))?;
        let reference = serde_json::to_value(RunConfig::default()).expect("config serializes");
        let mut unknown = Vec::new();
        unknown_keys(&value, &reference, "", &mut unknown);
        if !unknown.is_empty() {
            return Err(Error::Config(unknown));
        }
        serde_json::from_value(value).map_err(|e| Error::Config(vec![e.to_string()]))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(v) => Error::Config(v.into_iter().map(|m| format!("{}: {m}", path.display())).collect()),
            other => other,
        })
    }

    pub fn layout(&self) -> PoseLayout {
        PoseLayout::for_skeleton(&self.skeleton.skeleton())
    }

    pub fn violations(&self) -> Vec<String> {
        let mut out = self.datagen.violations("datagen.");
        out.extend(self.net.violations("net."));
        out.extend(self.train.violations("train."));
        out.extend(self.sampler.violations("sampler.", self.net.diffusion_steps));
        let dim = self.layout().dim();
        if self.net.dim != dim {
            out.push(format!(
                "net.dim: the {:?} skeleton layout has {dim} values per frame, got {}",
                self.skeleton, self.net.dim
            ));
        }
        if self.net.frames != self.datagen.clip_len {
            out.push(format!(
                "net.frames: must equal datagen.clip_len ({}), got {}",
                self.datagen.clip_len, self.net.frames
            ));
        }
        if self.synth.sources == 0 {
            out.push("synth.sources: must be >= 1".into());
        }
        if self.synth.fps == 0 {
            out.push("synth.fps: must be >= 1".into());
        }
        if self.synth.frames < self.datagen.clip_len {
            out.push(format!(
                "synth.frames: must be >= datagen.clip_len ({}), got {}",
                self.datagen.clip_len, self.synth.frames
            ));
        }
        if self.eval.num_samples == 0 {
            out.push("eval.num_samples: must be >= 1".into());
        }
        if self.eval.test_keyframes == 0 {
            out.push("eval.test_keyframes: must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.eval.retime_min_fraction) {
            out.push(format!(
                "eval.retime_min_fraction: must lie in [0, 1], got {}",
                self.eval.retime_min_fraction
            ));
        }
        if self.serve.queue_depth == 0 {
            out.push("serve.queue_depth: must be >= 1".into());
        }
        if self.serve.workers == 0 {
            out.push("serve.workers: must be >= 1".into());
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v))
        }
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    pub fn home(&self) -> PathBuf {
        self.home
            .clone()
            .or_else(|| std::env::var_os("LOOSEKEY_HOME").map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(".loosekey"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn every_violation_is_listed() {
        let mut cfg = RunConfig::default();
        cfg.datagen.max_shift = 20;
        cfg.net.dim = 5;
        cfg.train.batch_size = 0;
        cfg.serve.workers = 0;
        let v = cfg.violations();
        for key in ["datagen.", "net.dim", "train.batch_size", "serve.workers"] {
            assert!(v.iter().any(|m| m.starts_with(key)), "{key} missing from {v:?}");
        }
    }

    #[test]
    fn unknown_keys_are_all_reported() {
        let err = RunConfig::from_json(r#"{"bogus": 1, "net": {"latnt": 3}, "train": {"optimizer": {"lr": 1}}}"#).unwrap_err();
        let Error::Config(v) = err else { panic!() };
        assert_eq!(v.len(), 3, "{v:?}");
        assert!(v.iter().any(|m| m.starts_with("net.latnt")));
        assert!(v.iter().any(|m| m.starts_with("train.optimizer.lr")));
    }

    #[test]
    fn partial_configs_fill_defaults_and_hash_changes() {
        let cfg = RunConfig::from_json(r#"{"train": {"steps": 5}}"#).unwrap();
        assert_eq!(cfg.train.steps, 5);
        assert_eq!(cfg.net, NetConfig::default());
        assert_ne!(cfg.hash(), RunConfig::default().hash());
        assert_eq!(RunConfig::default().hash(), RunConfig::default().hash());
    }
}
