//! The sampling → advantage → update loop on synthetic environments.

use std::fs;
use std::path::Path;

use ibtpo::advantage::{grpo_advantage, tree_advantages};
use ibtpo::diagnostics::{self, MetricsRow, MetricsSink};
use ibtpo::env::{build_suite, Env, Task};
use ibtpo::ibtree::{run_forest, BranchStrategy, NodeId, SampleTree, SamplingBudget, SimGenerator};
use ibtpo::optimizer::{self, LossReport, TrainConfig, TrajectoryRecord};
use ibtpo::oracles;
use ibtpo::policy::{self, PolicyParams, ReferenceSnapshot, StepContext};
use ibtpo::seed;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{Backend, BaselineMode, RunConfig};
use crate::error::{CliError, Result};

/// Rollouts per problem when the success probability is estimated rather
/// than enumerated.
const VAL_ROLLOUTS: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub baseline_mode: BaselineMode,
    pub steps: u64,
    pub tokens_generated: u64,
    pub final_avg_rate: f64,
    pub final_eff_rate: f64,
    pub final_mean_ib_score: f64,
    pub final_val_accuracy: Option<f64>,
}

pub struct RoundOutcome {
    pub row: MetricsRow,
    pub loss: LossReport,
    pub trees: Vec<SampleTree>,
}

pub struct Trainer {
    cfg: RunConfig,
    train: TrainConfig,
    budget: SamplingBudget,
    strategy: BranchStrategy,
    tasks: Vec<Task>,
    policy: PolicyParams,
    reference: ReferenceSnapshot,
    step: u64,
    tokens: u64,
}

/// Geometric-mean probability of node `id`'s step under `params`.
fn node_geo(params: &PolicyParams, env: &Env, tree: &SampleTree, id: NodeId) -> ibtpo::Result<f64> {
    let node = tree.node(id);
    let parent = node.parent.expect("non-root node");
    let prefix = tree
        .prefix_symbols(parent)
        .ok_or_else(|| ibtpo::Error::InvalidArgument("text tree".into()))?;
    let ctx = StepContext::from_env(env, &tree.problem_id, &prefix);
    let sym = node.symbol().expect("symbol step");
    let choice = ctx.index_of(sym).ok_or(ibtpo::Error::UnknownCandidate {
        choice: sym as usize,
        candidates: ctx.len(),
    })?;
    Ok(params.step_log_geo_prob(&ctx, choice, node.step.n_tokens())?.exp())
}

impl Trainer {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        if let Backend::Remote(_) = cfg.backend {
            return Err(CliError::Config(
                "training needs the simulated backend; the remote backend only samples".into(),
            ));
        }
        let spec = cfg.env.clone().expect("validated sim config has an env");
        let tasks = build_suite(&spec, cfg.suite_size)?;
        let train = cfg.effective_train();
        let budget = cfg.effective_budget();
        let strategy = cfg.baseline_mode.strategy(train.beta);
        let policy = PolicyParams::new(cfg.sampling);
        let reference = policy::snapshot_reference(&policy);
        Ok(Trainer {
            cfg,
            train,
            budget,
            strategy,
            tasks,
            policy,
            reference,
            step: 0,
            tokens: 0,
        })
    }

    pub fn with_policy(mut self, policy: PolicyParams) -> Self {
        self.reference = policy::snapshot_reference(&policy);
        self.policy = policy;
        self
    }

    pub fn policy(&self) -> &PolicyParams {
        &self.policy
    }

    pub fn tasks(&self) -> &[Task] {
        &self.tasks
    }

    pub fn tokens_generated(&self) -> u64 {
        self.tokens
    }

    pub fn steps_done(&self) -> u64 {
        self.step
    }

    pub fn total_steps(&self) -> u64 {
        let per_epoch = self.tasks.len().div_ceil(self.cfg.problems_per_step);
        (self.cfg.epochs * per_epoch) as u64
    }

    /// Success probability averaged over the validation problems: exact when
    /// the environment is small enough to enumerate, otherwise estimated
    /// from a fixed rollout stream.
    pub fn val_accuracy(&self) -> Result<Option<f64>> {
        let n = self.cfg.val_problems.min(self.tasks.len());
        if n == 0 {
            return Ok(None);
        }
        let accs: Vec<f64> = self.tasks[..n]
            .par_iter()
            .enumerate()
            .map(|(i, t)| -> ibtpo::Result<f64> {
                match oracles::enumerate(&t.env, &self.policy, &t.problem.id) {
                    Ok(e) => Ok(e.success_probability()),
                    Err(_) => {
                        let g = SimGenerator {
                            env: &t.env,
                            policy: &self.policy,
                        };
                        let budget = SamplingBudget {
                            b0: VAL_ROLLOUTS,
                            iterations: 1,
                            ..self.budget
                        };
                        let mut rng = seed::rng(self.cfg.seed, &[0x7A1, i as u64]);
                        let tree =
                            ibtpo::ibtree::run_sampling(&t.problem, budget, BranchStrategy::Independent, &g, &mut rng)?;
                        Ok(tree.root().density.value().unwrap_or(0.0))
                    }
                }
            })
            .collect::<ibtpo::Result<_>>()?;
        Ok(Some(accs.iter().sum::<f64>() / n as f64))
    }

    fn batch_for(&self, tree: &SampleTree, env: &Env) -> ibtpo::Result<Vec<TrajectoryRecord>> {
        if self.cfg.baseline_mode.is_grpo() {
            let adv = grpo_advantage(&tree.rewards())?;
            optimizer::group_batch(tree, env, &adv)
        } else {
            let records = tree_advantages(
                tree,
                self.train.beta,
                self.train.lambda,
                |id| node_geo(self.reference.params(), env, tree, id),
                |id| node_geo(&self.policy, env, tree, id),
            )?;
            optimizer::tree_batch(tree, env, &records)
        }
    }

    /// One sampling round followed by `updates_per_round` gradient steps.
    pub fn round(&mut self) -> Result<RoundOutcome> {
        if self.step.is_multiple_of(self.cfg.ref_update_every as u64) {
            self.reference = policy::snapshot_reference(&self.policy);
        }
        let n = self.tasks.len();
        let pps = self.cfg.problems_per_step;
        let picks: Vec<usize> = (0..pps).map(|j| (self.step as usize * pps + j) % n).collect();
        let jobs: Vec<_> = picks
            .iter()
            .map(|&i| {
                let t = &self.tasks[i];
                (
                    t.problem.clone(),
                    SimGenerator {
                        env: &t.env,
                        policy: &self.policy,
                    },
                )
            })
            .collect();
        let round_seed = seed::derive(self.cfg.seed, &[0x5EED, self.step]);
        let trees = run_forest(&jobs, self.budget, self.strategy, round_seed)?;
        drop(jobs);

        let batches: Vec<Vec<TrajectoryRecord>> = trees
            .par_iter()
            .zip(&picks)
            .map(|(tree, &i)| self.batch_for(tree, &self.tasks[i].env))
            .collect::<ibtpo::Result<_>>()?;
        let batch: Vec<TrajectoryRecord> = batches.into_iter().flatten().collect();

        let mut first = None;
        let mut clip = 0.0;
        for _ in 0..self.cfg.updates_per_round {
            let (rep, grads) =
                optimizer::clipped_surrogate(&batch, &self.policy, self.reference.params(), &self.train)?;
            if !rep.total.is_finite() {
                return Err(ibtpo::Error::NonFinite(format!("loss at step {}", self.step)).into());
            }
            optimizer::apply_update(&mut self.policy, &grads, self.train.learning_rate)?;
            clip += rep.clip_fraction;
            first.get_or_insert(rep);
        }
        let loss = first.expect("at least one update");

        let groups: Vec<Vec<f64>> = trees.iter().map(SampleTree::rewards).collect();
        let tokens: u64 = trees.iter().map(|t| t.generated_tokens as u64).sum();
        let stats: Vec<_> = trees.iter().map(diagnostics::tree_stats).collect();
        let mean = |f: fn(&diagnostics::TreeStats) -> f64| stats.iter().map(f).sum::<f64>() / stats.len() as f64;
        self.tokens += tokens;
        let row = MetricsRow {
            train_step: self.step,
            eff_rate: diagnostics::eff_rate(&groups)?,
            avg_rate: diagnostics::avg_rate(&groups)?,
            tokens_generated: tokens,
            mean_step_entropy: mean(|s| s.mean_step_entropy),
            cov_eta: mean(|s| s.mean_cov),
            mean_ib_score: mean(|s| s.mean_ib_score),
            val_accuracy: self.val_accuracy()?,
            clip_fraction: clip / self.cfg.updates_per_round as f64,
        };
        self.step += 1;
        Ok(RoundOutcome { row, loss, trees })
    }

    fn budget_left(&self) -> bool {
        self.cfg.token_budget.is_none_or(|b| self.tokens < b)
    }

    /// Runs every configured round, writing metrics, checkpoints and a
    /// summary into `out`.
    pub fn run(&mut self, out: &Path) -> Result<Summary> {
        fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
        let base = out.join("metrics");
        for ext in ["jsonl", "csv"] {
            let p = base.with_extension(ext);
            if p.exists() {
                fs::remove_file(&p).map_err(|e| CliError::io(&p, e))?;
            }
        }
        let mut sink = MetricsSink::open(&base)?;
        let ckpt_dir = out.join("checkpoints");
        let mut last: Option<MetricsRow> = None;
        while self.step < self.total_steps() && self.budget_left() {
            let outcome = self.round()?;
            sink.write(&outcome.row)?;
            if self.cfg.checkpoint_every > 0 && self.step.is_multiple_of(self.cfg.checkpoint_every as u64) {
                fs::create_dir_all(&ckpt_dir).map_err(|e| CliError::io(&ckpt_dir, e))?;
                policy::save_checkpoint(&self.policy, ckpt_dir.join(format!("step_{:06}.json", self.step)))?;
            }
            last = Some(outcome.row);
        }
        policy::save_checkpoint(&self.policy, out.join("policy.json"))?;
        let last = last.ok_or_else(|| CliError::Config("the run performed no training step".into()))?;
        let summary = Summary {
            baseline_mode: self.cfg.baseline_mode,
            steps: self.step,
            tokens_generated: self.tokens,
            final_avg_rate: last.avg_rate,
            final_eff_rate: last.eff_rate,
            final_mean_ib_score: last.mean_ib_score,
            final_val_accuracy: last.val_accuracy,
        };
        let path = out.join("summary.json");
        fs::write(
            &path,
            serde_json::to_string_pretty(&summary).expect("summary serializes"),
        )
        .map_err(|e| CliError::io(&path, e))?;
        Ok(summary)
    }
}
