//! Run configuration.

use std::fs;
use std::path::{Path, PathBuf};

use ibtpo::diagnostics::IbEvalConfig;
use ibtpo::env::{AnswerStructure, EnvSpec, PriorSpec, TokenRange};
use ibtpo::ibtree::{BranchStrategy, SamplingBudget};
use ibtpo::optimizer::{TrainConfig, CLIP_HIGHER_EPS, ENTROPY_OMEGA, FULL_SCALE_LEARNING_RATE};
use ibtpo::policy::remote::RemoteConfig;
use ibtpo::policy::SamplingParams;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum BaselineMode {
    #[default]
    Ibtpo,
    Grpo,
    GrpoClipHigher,
    GrpoEntropy,
    RandomTree,
    FixedWidthTree,
    EntropyTree,
}

impl BaselineMode {
    pub fn is_grpo(self) -> bool {
        matches!(
            self,
            BaselineMode::Grpo | BaselineMode::GrpoClipHigher | BaselineMode::GrpoEntropy
        )
    }

    pub fn strategy(self, beta: f64) -> BranchStrategy {
        match self {
            BaselineMode::Ibtpo => BranchStrategy::IbScore { beta },
            BaselineMode::RandomTree => BranchStrategy::Random,
            BaselineMode::FixedWidthTree => BranchStrategy::FixedWidth { width: 2 },
            BaselineMode::EntropyTree => BranchStrategy::Entropy,
            _ => BranchStrategy::Independent,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    #[default]
    Sim,
    Remote(RemoteConfig),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum BackendKind {
    Sim,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub problems_per_step: usize,
    pub epochs: usize,
    pub baseline_mode: BaselineMode,
    pub backend: Backend,
    /// Synthetic problem family; exclusive with `dataset`.
    pub env: Option<EnvSpec>,
    /// JSONL problem file; exclusive with `env`.
    pub dataset: Option<PathBuf>,
    /// Problems built from `env`.
    pub suite_size: usize,
    /// Leading problems whose exact success probability is tracked.
    pub val_problems: usize,
    pub sampling: SamplingParams,
    pub train: TrainConfig,
    /// Rounds between reference snapshots.
    pub ref_update_every: usize,
    /// Gradient steps per sampling round.
    pub updates_per_round: usize,
    /// Stop once this many tokens have been generated.
    pub token_budget: Option<u64>,
    /// Rounds between checkpoints; 0 keeps only the final one.
    pub checkpoint_every: usize,
    pub eval: IbEvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        desk()
    }
}

/// Small synthetic runs that finish in seconds.
pub fn desk() -> RunConfig {
    RunConfig {
        seed: 0,
        output_dir: PathBuf::from("runs/desk"),
        problems_per_step: 16,
        epochs: 4,
        baseline_mode: BaselineMode::Ibtpo,
        backend: Backend::Sim,
        env: Some(EnvSpec {
            step_vocab_size: 4,
            tokens_per_step: TokenRange { min: 2, max: 6 },
            max_depth: 8,
            answer_structure: AnswerStructure::CriticalSteps { min: 1, max: 4 },
            prior: PriorSpec { hint: 1.0, noise: 0.5 },
            seed: 7,
        }),
        dataset: None,
        suite_size: 64,
        val_problems: 16,
        sampling: SamplingParams::default(),
        train: TrainConfig {
            group_size: 8,
            ..TrainConfig::default()
        },
        ref_update_every: 1,
        updates_per_round: 1,
        token_budget: None,
        checkpoint_every: 0,
        eval: IbEvalConfig::default(),
    }
}

/// The sizes used for full language-model runs: 128 problems per step and a
/// learning rate of 1e-6.
pub fn full_scale() -> RunConfig {
    let mut c = desk();
    c.output_dir = PathBuf::from("runs/full_scale");
    c.problems_per_step = 128;
    c.suite_size = 1024;
    c.epochs = 1;
    c.train.learning_rate = FULL_SCALE_LEARNING_RATE;
    c
}

pub fn preset(name: &str) -> Result<RunConfig> {
    match name {
        "desk" => Ok(desk()),
        "full_scale" => Ok(full_scale()),
        _ => Err(CliError::Usage(format!(
            "unknown preset `{name}`; known presets: desk, full_scale"
        ))),
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let table: toml::Table = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        let dataset_only = table.contains_key("dataset") && !table.contains_key("env");
        let mut c: RunConfig = table
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
        if dataset_only {
            c.env = None;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_toml(&text)
    }

    /// The train config with the baseline's regularisers applied.
    pub fn effective_train(&self) -> TrainConfig {
        let mut t = self.train.clone();
        match self.baseline_mode {
            BaselineMode::GrpoClipHigher => t.eps_high = CLIP_HIGHER_EPS,
            BaselineMode::GrpoEntropy => t.omega = ENTROPY_OMEGA,
            _ => {}
        }
        t
    }

    /// Sampling budget for the configured baseline.
    pub fn effective_budget(&self) -> SamplingBudget {
        if self.baseline_mode.is_grpo() {
            SamplingBudget {
                b0: self.train.group_size,
                iterations: 1,
                ..self.train.budget
            }
        } else {
            self.train.budget
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(CliError::Config(m.into()));
        match (&self.env, &self.dataset) {
            (Some(_), Some(_)) => return bad("set exactly one of `env` and `dataset`, not both"),
            (None, None) => return bad("set one of `env` and `dataset`"),
            _ => {}
        }
        match &self.backend {
            Backend::Sim if self.env.is_none() => return bad("the simulated backend needs `env`"),
            Backend::Remote(_) if self.dataset.is_none() => return bad("the remote backend needs `dataset`"),
            Backend::Remote(r) => r.validate()?,
            Backend::Sim => {}
        }
        for (name, v) in [
            ("problems_per_step", self.problems_per_step),
            ("epochs", self.epochs),
            ("suite_size", self.suite_size),
            ("ref_update_every", self.ref_update_every),
            ("updates_per_round", self.updates_per_round),
        ] {
            if v == 0 {
                return Err(CliError::Config(format!("`{name}` must be >= 1")));
            }
        }
        if self.output_dir.as_os_str().is_empty() {
            return bad("`output_dir` must not be empty");
        }
        self.sampling.validate()?;
        self.train.validate()?;
        Ok(())
    }
}
