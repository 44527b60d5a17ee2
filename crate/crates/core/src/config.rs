//! One JSON document holding every tunable of an experiment.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::corpus::SynthSpec;
use crate::error::{Error, Result};
use crate::evalsuite::{FinetuneSpec, ProbeSpec, ViewSpec};
use crate::network::ModelConfig;
use crate::trainer::{self, Objective, TrainConfig};

pub const CONFIG_VERSION: u32 = 1;

/// Environment variable consulted for the seed when none is given.
pub const SEED_ENV: &str = "VICMAE_SEED";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Training manifest.
    pub data: Option<PathBuf>,
    /// Held-out manifest for evaluation.
    pub val: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SemiSpec {
    pub fractions: Vec<f64>,
}

impl Default for SemiSpec {
    fn default() -> Self {
        Self {
            fractions: vec![0.05, 0.1, 0.25, 0.5, 0.75, 1.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VideoSpec {
    /// Frames per clip after inflating an image checkpoint.
    pub frames: usize,
    /// Random permutations averaged by the shuffled-order ablation.
    pub n_perms: usize,
    /// Views of the multi-view evaluation.
    pub views: ViewSpec,
}

impl Default for VideoSpec {
    fn default() -> Self {
        Self {
            frames: 4,
            n_perms: 16,
            views: ViewSpec {
                clips: 4,
                spatial_views: 3,
                stride: 1,
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub seed: u64,
    pub objective: Objective,
    pub paths: Paths,
    pub corpus: SynthSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub probe: ProbeSpec,
    pub finetune: FinetuneSpec,
    pub semi: SemiSpec,
    pub video: VideoSpec,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            seed: 0,
            objective: Objective::Vicmae,
            paths: Paths::default(),
            corpus: SynthSpec::default(),
            model: ModelConfig::tiny(),
            train: TrainConfig::default(),
            probe: ProbeSpec::default(),
            finetune: FinetuneSpec::default(),
            semi: SemiSpec::default(),
            video: VideoSpec::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let value: Value = serde_json::from_str(&text)?;
        Self::from_value(value, &[])
    }

    /// Builds a config from a JSON document after applying `key.path=value`
    /// overrides; values parse as JSON and fall back to plain strings.
    pub fn from_value(mut value: Value, overrides: &[String]) -> Result<Self> {
        if value.is_null() {
            value = Value::Object(Default::default());
        }
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        Ok(serde_json::from_value(value)?)
    }

    /// Copies the top-level seed and objective into every section that
    /// carries its own copy.
    pub fn resolved(mut self) -> Self {
        self.train.seed = self.seed;
        self.train.objective = self.objective;
        self.probe.seed = self.seed;
        self.finetune.seed = self.seed;
        self
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.version != CONFIG_VERSION {
            v.push(format!("config version {} unsupported (expected {CONFIG_VERSION})", self.version));
        }
        if let Err(e) = self.corpus.validate() {
            v.push(e.to_string());
        }
        let mut train = self.train.clone();
        train.objective = self.objective;
        if let Err(Error::Config(msg)) = trainer::validate(&self.model, &train) {
            v.extend(msg.split("; ").map(String::from));
        }
        v.extend(self.probe.violations());
        v.extend(self.finetune.violations());
        if self.semi.fractions.is_empty() {
            v.push("semi.fractions is empty".into());
        }
        for f in &self.semi.fractions {
            if !(*f > 0.0 && *f <= 1.0) {
                v.push(format!("semi fraction {f} outside (0, 1]"));
            }
        }
        if self.video.frames < 1 {
            v.push("video.frames must be >= 1".into());
        }
        if self.video.n_perms < 1 {
            v.push("video.n_perms must be >= 1".into());
        }
        v.extend(self.video.views.violations());
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v.join("; ")))
        }
    }
}

fn apply_override(root: &mut Value, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {spec:?} is not key=value")))?;
    let parsed = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if part.is_empty() {
            return Err(Error::Config(format!("override key {key:?} has an empty segment")));
        }
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("override {key:?}: {part:?} is not inside an object")))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), parsed);
            return Ok(());
        }
        node = obj
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    Ok(())
}
