//! Run configuration shared by every CLI command.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experts::EXACT_LIMIT;
use crate::model::ModelConfig;
use crate::problems::ProblemKind;
use crate::solver::DecodeStrategy;
use crate::training::TrainConfig;

/// Environment variable that overrides `run_dir`.
pub const RUN_DIR_ENV: &str = "COLM_RUN_DIR";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub run_dir: PathBuf,
    pub problems: ProblemsSection,
    #[serde(default)]
    pub experts: ExpertsSection,
    pub dataset: DatasetSection,
    #[serde(default)]
    pub model: ModelSection,
    pub training: TrainConfig,
    #[serde(default)]
    pub eval: EvalSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemsSection {
    pub kinds: Vec<String>,
    pub n: usize,
    pub train_count: usize,
    pub val_count: usize,
    pub test_count: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExpertsSection {
    /// Largest `n` solved exactly; larger instances use heuristics.
    pub exact_limit: usize,
    /// Also run the heuristic where the exact solver is used and report its gap.
    pub compare_heuristic: bool,
    pub random_seed: u64,
}

impl Default for ExpertsSection {
    fn default() -> Self {
        ExpertsSection { exact_limit: EXACT_LIMIT, compare_heuristic: true, random_seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    #[serde(rename = "L")]
    pub l: usize,
    /// Records drawn from each solved instance.
    #[serde(default = "one")]
    pub records_per_instance: usize,
    /// Sampling weight per kind name; equal pool shares when absent.
    #[serde(default)]
    pub weights: Option<BTreeMap<String, f64>>,
    #[serde(default = "shard_default")]
    pub shard_size: usize,
    pub seed: u64,
}

fn one() -> usize {
    1
}

fn shard_default() -> usize {
    4096
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub preset: Option<String>,
    /// Explicit shapes; takes precedence over `preset`.
    pub config: Option<ModelConfig>,
    /// `f32` or `f64`.
    pub dtype: String,
    pub prefix_masking: Option<bool>,
    /// Checkpoint directory to train from; a policy run defaults to the
    /// best dynamics checkpoint of the same run directory.
    pub init: Option<PathBuf>,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection { preset: Some("desk".into()), config: None, dtype: "f32".into(), prefix_masking: None, init: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub checkpoint: Option<PathBuf>,
    /// Instances per kind taken from the test split; all when absent.
    pub count: Option<usize>,
    pub strategy: DecodeStrategy,
    /// Also report greedy decoding when `strategy` samples.
    pub include_greedy: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { checkpoint: None, count: None, strategy: DecodeStrategy::default(), include_greedy: true }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    /// Seed of instance `i` of this split.
    pub fn instance_seed(self, base: u64, i: usize) -> u64 {
        let offset = match self {
            Split::Train => 0,
            Split::Val => 1 << 40,
            Split::Test => 2 << 40,
        };
        base.wrapping_add(offset).wrapping_add(i as u64)
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::File(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn kinds(&self) -> Result<Vec<ProblemKind>> {
        let kinds = self
            .problems
            .kinds
            .iter()
            .map(|k| k.parse::<ProblemKind>().map_err(|_| Error::Config(format!("unknown problem kind '{k}'"))))
            .collect::<Result<Vec<_>>>()?;
        if kinds.is_empty() {
            return Err(Error::Config("no problem kinds configured".into()));
        }
        Ok(kinds)
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let mut c = match (&self.model.config, &self.model.preset) {
            (Some(c), _) => c.clone(),
            (None, Some(p)) => ModelConfig::preset(p)?,
            (None, None) => return Err(Error::Config("model needs a preset or an explicit config".into())),
        };
        if let Some(m) = self.model.prefix_masking {
            c.prefix_masking = m;
        }
        c.validate()?;
        Ok(c)
    }

    /// Mixing weights aligned with `kinds`.
    pub fn weights(&self, kinds: &[ProblemKind]) -> Result<Option<Vec<f64>>> {
        let Some(w) = &self.dataset.weights else { return Ok(None) };
        for name in w.keys() {
            let k: ProblemKind = name.parse().map_err(|_| Error::Config(format!("unknown problem kind '{name}'")))?;
            if !kinds.contains(&k) {
                return Err(Error::Config(format!("weight given for unconfigured kind '{name}'")));
            }
        }
        Ok(Some(
            kinds
                .iter()
                .map(|k| w.iter().find(|(name, _)| name.parse::<ProblemKind>().ok() == Some(*k)).map_or(0.0, |(_, v)| *v))
                .collect(),
        ))
    }

    pub fn validate(&self) -> Result<()> {
        self.kinds()?;
        if self.problems.n < 2 {
            return Err(Error::Config("n must be at least 2".into()));
        }
        if self.dataset.shard_size == 0 || self.dataset.records_per_instance == 0 {
            return Err(Error::Config("shard_size and records_per_instance must be positive".into()));
        }
        if !["f32", "f64"].contains(&self.model.dtype.as_str()) {
            return Err(Error::Config(format!("dtype '{}' is not f32 or f64", self.model.dtype)));
        }
        self.model_config()?;
        self.weights(&self.kinds()?)?;
        self.training.validate()?;
        self.eval.strategy.validate()
    }

    /// Checks that configured checkpoint paths exist.
    pub fn check_paths(&self) -> Result<()> {
        for p in self.model.init.iter().chain(&self.eval.checkpoint) {
            if !p.join("meta.json").exists() {
                return Err(Error::File(format!("{}: no checkpoint found", p.display())));
            }
        }
        Ok(())
    }

    pub fn instance_path(&self, kind: ProblemKind, split: Split) -> PathBuf {
        self.run_dir.join("instances").join(format!("{}_n{}_{}.jsonl", kind.as_str(), self.problems.n, split.as_str()))
    }

    pub fn solution_path(&self, kind: ProblemKind, split: Split) -> PathBuf {
        self.run_dir.join("solutions").join(format!("{}_n{}_{}.jsonl", kind.as_str(), self.problems.n, split.as_str()))
    }

    pub fn traj_dir(&self, split: Split) -> PathBuf {
        self.run_dir.join("trajectories").join(split.as_str())
    }

    pub fn train_dir(&self) -> PathBuf {
        self.run_dir.join("train").join(self.training.stage.as_str())
    }

    pub fn eval_dir(&self) -> PathBuf {
        self.run_dir.join("eval")
    }
}
