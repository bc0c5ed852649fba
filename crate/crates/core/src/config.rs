//! Run configuration: one JSON document with a section per pipeline stage.
//! Unknown keys are rejected; `key.path=value` overrides are applied to
//! the JSON with defaults filled in, so they obey the same rules.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::dataset::SplitConfig;
use crate::diffusion::ScheduleConfig;
use crate::error::{Error, Result};
use crate::nets::{NetConfig, Role};
use crate::phantom::{Modality, PhantomRecipe};
use crate::train::{SamplerConfig, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricOptions {
    /// Segmentation thresholds in percent, each in `(0, 30]`.
    pub thresholds: Vec<f64>,
}

impl Default for MetricOptions {
    fn default() -> Self {
        MetricOptions { thresholds: (1..=30).map(f64::from).collect() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub name: String,
    pub seed: u64,
    /// Parent directory of `<name>/`.
    pub output_dir: PathBuf,
    /// Volume recipe; its `modality` and `seed` are set per generated volume.
    pub phantom: PhantomRecipe,
    pub modalities: Vec<Modality>,
    pub split: SplitConfig,
    pub models: Vec<Role>,
    pub net: NetConfig,
    pub train: TrainConfig,
    pub schedule: ScheduleConfig,
    pub sampler: SamplerConfig,
    pub metrics: MetricOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            name: "default".into(),
            seed: 0,
            output_dir: PathBuf::from("runs"),
            phantom: PhantomRecipe::default(),
            modalities: vec![Modality::T1, Modality::T1w],
            split: SplitConfig::default(),
            models: vec![Role::E2e, Role::Dm, Role::Fm],
            net: NetConfig::default(),
            train: TrainConfig::default(),
            schedule: ScheduleConfig::default(),
            sampler: SamplerConfig::default(),
            metrics: MetricOptions::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) || self.name == "." || self.name == ".." {
            return Err(Error::invalid(format!("run name {:?} must be a plain directory name", self.name)));
        }
        self.phantom.validate()?;
        self.split.validate()?;
        self.net.validate()?;
        self.train.validate()?;
        if self.modalities.is_empty() || self.models.is_empty() {
            return Err(Error::invalid("at least one modality and one model are required"));
        }
        if self.sampler.ensemble < 2 {
            return Err(Error::invalid("sampler.ensemble must be at least 2"));
        }
        if self.sampler.dm_steps == 0 || self.sampler.dm_steps > self.schedule.steps {
            return Err(Error::invalid(format!("sampler.dm_steps must lie in 1..={}", self.schedule.steps)));
        }
        if let Some(bad) = self.metrics.thresholds.iter().find(|p| !(**p > 0.0 && **p <= 30.0)) {
            return Err(Error::invalid(format!("threshold {bad} outside (0, 30]")));
        }
        Ok(())
    }

    pub fn run_dir(&self) -> PathBuf {
        self.output_dir.join(&self.name)
    }

    /// Parses JSON text, applies `key.path=value` overrides and validates.
    pub fn from_json_with(text: &str, overrides: &[String]) -> Result<RunConfig> {
        let parse = |v: Value| serde_json::from_value::<RunConfig>(v).map_err(|e| Error::invalid(format!("config: {e}")));
        let mut v = serde_json::to_value(parse(serde_json::from_str(text)?)?)?;
        for o in overrides {
            apply_override(&mut v, o)?;
        }
        let cfg = parse(v)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::invalid(format!("cannot read config {}: {e}", p.display())))?,
            None => "{}".to_string(),
        };
        Self::from_json_with(&text, overrides)
    }

    /// A copy with `key.path=value` overrides applied and validated.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<RunConfig> {
        Self::from_json_with(&self.to_json()?, overrides)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Sets `a.b.c` in a JSON object tree. The value is parsed as JSON when
/// possible and taken as a string otherwise.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::invalid(format!("override {assignment:?} is not key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut cur = root;
    let keys: Vec<&str> = path.split('.').collect();
    for (i, k) in keys.iter().enumerate() {
        if k.is_empty() {
            return Err(Error::invalid(format!("override {assignment:?} has an empty key")));
        }
        let obj = cur.as_object_mut().ok_or_else(|| Error::invalid(format!("override {path:?}: {k:?} is not inside an object")))?;
        if i + 1 == keys.len() {
            obj.insert((*k).to_string(), value);
            return Ok(());
        }
        cur = obj.entry((*k).to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("split yields at least one key")
}
