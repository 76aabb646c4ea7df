// SPDX-License-Identifier: MIT OR Apache-2.0

//! Run configuration read from TOML.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use beliefscope::metrics::MetricConfig;
use beliefscope::neurofeedback::NeuroConfig;
use beliefscope::steering::SteeringConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::HarnessError;

/// Experiment family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    /// Median BDDiff per manipulation with paired tests against `none`.
    ManipulationEffects,
    /// BDDiff grouped by the parsed action.
    ActionSplit,
    /// Steering success per direction.
    Steering,
    /// Few-shot self-report of discretized BD.
    Neurofeedback,
    /// Label shift under injection at the belief mention.
    NeuroProbe,
}

impl Experiment {
    /// Kebab-case name.
    pub fn as_str(self) -> &'static str {
        match self {
            Self::ManipulationEffects => "manipulation-effects",
            Self::ActionSplit => "action-split",
            Self::Steering => "steering",
            Self::Neurofeedback => "neurofeedback",
            Self::NeuroProbe => "neuro-probe",
        }
    }
}

/// Which model a run talks to.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ModelSpec {
    /// In-process tiny transformer loaded from `model_path`.
    Tiny,
    /// In-process scripted mock loaded from `model_path`.
    Mock,
    /// Remote runtime behind a bridge endpoint (`bridge:stdio:…` or `bridge:socket:…`).
    Bridge(String),
}

impl FromStr for ModelSpec {
    type Err = HarnessError;
    fn from_str(s: &str) -> Result<Self, HarnessError> {
        match s {
            "tiny" => Ok(Self::Tiny),
            "mock" => Ok(Self::Mock),
            _ if s.starts_with("bridge:") => {
                beliefscope::bridge::Endpoint::parse(s).map_err(|e| HarnessError::Config(e.to_string()))?;
                Ok(Self::Bridge(s.to_owned()))
            }
            _ => Err(HarnessError::Config(format!("model {s:?} is not tiny, mock or bridge:<endpoint>"))),
        }
    }
}

impl fmt::Display for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Tiny => f.write_str("tiny"),
            Self::Mock => f.write_str("mock"),
            Self::Bridge(e) => f.write_str(e),
        }
    }
}

/// Sample sizes and generation budget. Defaults are desk-scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleConfig {
    /// Source items per task; every manipulation of a chosen item is run.
    pub groups_per_task: usize,
    /// Queries kept per (manipulation, action) cell of the action split.
    pub per_action_cell: usize,
    /// Cells with fewer queries are omitted from the action split.
    pub min_cell: usize,
    /// Generation budget.
    pub max_new_tokens: usize,
    /// Keep only items whose unmanipulated answer shows the model knows them.
    pub filter_known: bool,
    /// Queries generated per parallel batch; records are persisted after each.
    pub batch_size: usize,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            groups_per_task: 50,
            per_action_cell: 150,
            min_cell: 10,
            max_new_tokens: beliefscope::model::DEFAULT_MAX_NEW_TOKENS,
            filter_known: true,
            batch_size: 32,
        }
    }
}

/// Everything a run needs. Relative paths resolve against the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Experiment family.
    pub experiment: Experiment,
    /// `tiny`, `mock`, or `bridge:<endpoint>`.
    #[serde(default = "default_model")]
    pub model: String,
    /// Weight file (tiny) or spec file (mock).
    #[serde(default)]
    pub model_path: Option<PathBuf>,
    /// Query corpus in JSON lines.
    pub corpus: PathBuf,
    /// Parent of the run directories.
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    /// Seeds for steering and neurofeedback; overrides their own lists.
    #[serde(default)]
    pub seeds: Option<Vec<u64>>,
    /// Sample sizes.
    #[serde(default)]
    pub sample: SampleConfig,
    /// BD settings.
    #[serde(default)]
    pub metric: MetricConfig,
    /// Required by the steering experiment.
    #[serde(default)]
    pub steering: Option<SteeringConfig>,
    /// Required by the neurofeedback experiments.
    #[serde(default)]
    pub neuro: Option<NeuroConfig>,
}

fn default_model() -> String {
    "mock".to_owned()
}

fn default_output() -> PathBuf {
    PathBuf::from("runs")
}

impl RunConfig {
    /// Parse TOML and resolve relative paths against `base`.
    pub fn from_toml(text: &str, base: &Path) -> Result<Self, HarnessError> {
        let mut cfg: Self = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut cfg.corpus);
        resolve(&mut cfg.output_dir);
        if let Some(p) = cfg.model_path.as_mut() {
            resolve(p);
        }
        Ok(cfg)
    }

    /// Read a config file.
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text, path.parent().unwrap_or(Path::new(".")))
    }

    /// Parsed model spec.
    pub fn model_spec(&self) -> Result<ModelSpec, HarnessError> {
        self.model.parse()
    }

    /// Check paths and experiment-specific sections, then push the run-level
    /// seeds into the sub-configs.
    pub fn validate(&mut self) -> Result<(), HarnessError> {
        let spec = self.model_spec()?;
        if !self.corpus.is_file() {
            return Err(HarnessError::Config(format!("corpus {} does not exist", self.corpus.display())));
        }
        if matches!(spec, ModelSpec::Tiny | ModelSpec::Mock) {
            match &self.model_path {
                Some(p) if p.is_file() => {}
                Some(p) => return Err(HarnessError::Config(format!("model file {} does not exist", p.display()))),
                None => return Err(HarnessError::Config(format!("model {spec} needs model_path"))),
            }
        }
        if self.metric.target_stride == 0 {
            return Err(HarnessError::Config("metric.target_stride must be at least 1".to_owned()));
        }
        let s = &self.sample;
        if s.groups_per_task == 0 || s.per_action_cell == 0 || s.batch_size == 0 || s.max_new_tokens == 0 {
            return Err(HarnessError::Config("sample sizes must be positive".to_owned()));
        }
        if let Some(seeds) = &self.seeds {
            if seeds.is_empty() {
                return Err(HarnessError::Config("seeds must not be empty".to_owned()));
            }
            if let Some(st) = self.steering.as_mut() {
                st.seeds.clone_from(seeds);
            }
            if let Some(n) = self.neuro.as_mut() {
                n.seeds.clone_from(seeds);
            }
        }
        match self.experiment {
            Experiment::Steering => {
                let st = self.steering.as_ref().ok_or_else(|| missing("steering"))?;
                st.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
            }
            Experiment::Neurofeedback | Experiment::NeuroProbe => {
                let n = self.neuro.as_ref().ok_or_else(|| missing("neuro"))?;
                n.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
            }
            Experiment::ManipulationEffects | Experiment::ActionSplit => {}
        }
        Ok(())
    }

    /// Hex SHA-256 over the canonical JSON of the config and the corpus
    /// bytes. Output paths are excluded so moving a tree keeps its hashes.
    pub fn content_hash(&self) -> Result<String, HarnessError> {
        let mut canonical = self.clone();
        canonical.output_dir = PathBuf::new();
        canonical.corpus = PathBuf::new();
        let model_bytes = match &canonical.model_path.take() {
            Some(p) => std::fs::read(p)?,
            None => Vec::new(),
        };
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&canonical)?);
        h.update(std::fs::read(&self.corpus)?);
        h.update(model_bytes);
        Ok(hex::encode(h.finalize()))
    }
}

fn missing(section: &str) -> HarnessError {
    HarnessError::Config(format!("experiment needs a [{section}] section"))
}
