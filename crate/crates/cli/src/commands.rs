//! Implementations of the `ibtpo` subcommands. Each writes its human
//! readable output to `out` and its artifacts under the configured
//! output directory.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ibtpo::diagnostics::{offline_ibscore_eval, IbEvalReport};
use ibtpo::env::{build_suite, load_problems, Problem, Task};
use ibtpo::ibtree::{self, run_sampling, Generator, RemoteGenerator, SampleTree, SimGenerator};
use ibtpo::oracles;
use ibtpo::policy::remote::RemoteClient;
use ibtpo::policy::{self, PolicyParams};
use ibtpo::seed;

use crate::config::{Backend, RunConfig};
use crate::error::{CliError, Result};
use crate::train::{Summary, Trainer};

fn line(out: &mut dyn Write, text: impl AsRef<str>) -> Result<()> {
    writeln!(out, "{}", text.as_ref()).map_err(|e| CliError::io("<stdout>", e))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn sim_tasks(cfg: &RunConfig) -> Result<Vec<Task>> {
    let spec = cfg
        .env
        .as_ref()
        .ok_or_else(|| CliError::Config("env: the simulated backend needs an env section".into()))?;
    Ok(build_suite(spec, cfg.suite_size)?)
}

fn dataset(cfg: &RunConfig) -> Result<Vec<Problem>> {
    let path = cfg
        .dataset
        .as_ref()
        .ok_or_else(|| CliError::Config("dataset: the remote backend needs a dataset path".into()))?;
    Ok(load_problems(path)?)
}

pub fn train(cfg: &RunConfig, out: &mut dyn Write) -> Result<Summary> {
    let mut trainer = Trainer::new(cfg.clone())?;
    write_file(&cfg.output_dir.join("config.toml"), &cfg.to_toml())?;
    let summary = trainer.run(&cfg.output_dir)?;
    line(
        out,
        format!(
            "trained {} steps, {} tokens: avg_rate {:.4} eff_rate {:.4} mean IB-Score {:.6}",
            summary.steps,
            summary.tokens_generated,
            summary.final_avg_rate,
            summary.final_eff_rate,
            summary.final_mean_ib_score
        ),
    )?;
    if let Some(v) = summary.final_val_accuracy {
        line(out, format!("validation success probability {v:.4}"))?;
    }
    Ok(summary)
}

fn report_tree(tree: &SampleTree, path: &Path, out: &mut dyn Write) -> Result<()> {
    let savings = ibtree::token_savings(tree);
    line(out, format!("problem {}", tree.problem_id))?;
    line(out, format!("G = {} trajectories", tree.trajectories.len()))?;
    line(
        out,
        format!(
            "tokens: generated {} independent-equivalent {}",
            savings.tree_tokens, savings.independent_equivalent_tokens
        ),
    )?;
    for n in &tree.nodes {
        if let Some(s) = &n.ib_score {
            line(
                out,
                format!(
                    "node {:>4} depth {:>3} ib_score {:.6} cov {:.6}",
                    n.id, n.depth, s.value, s.cov
                ),
            )?;
        }
    }
    line(out, format!("snapshot written to {}", path.display()))
}

/// Samples one tree for `problem_id` and writes its snapshot.
pub fn sample(cfg: &RunConfig, problem_id: &str, checkpoint: Option<&Path>, out: &mut dyn Write) -> Result<SampleTree> {
    cfg.validate()?;
    let budget = cfg.effective_budget();
    let strategy = cfg.baseline_mode.strategy(cfg.effective_train().beta);
    let mut rng = seed::rng(cfg.seed, &[0x5A3, seed::hash_str(problem_id)]);
    let unknown = || CliError::Usage(format!("unknown problem id {problem_id:?}"));
    let tree = match &cfg.backend {
        Backend::Sim => {
            let tasks = sim_tasks(cfg)?;
            let task = tasks.iter().find(|t| t.problem.id == problem_id).ok_or_else(unknown)?;
            let params = load_params(cfg, checkpoint)?;
            let g = SimGenerator {
                env: &task.env,
                policy: &params,
            };
            run_sampling(&task.problem, budget, strategy, &g, &mut rng)?
        }
        Backend::Remote(rc) => {
            let problems = dataset(cfg)?;
            let problem = problems.iter().find(|p| p.id == problem_id).ok_or_else(unknown)?;
            let client = RemoteClient::connect(rc.clone())?;
            let g = RemoteGenerator {
                client: &client,
                sampling: cfg.sampling,
            };
            run_sampling(problem, budget, strategy, &g, &mut rng)?
        }
    };
    let path = cfg.output_dir.join("trees").join(format!("{problem_id}.json"));
    write_file(&path, &ibtree::tree_to_string(&tree))?;
    report_tree(&tree, &path, out)?;
    Ok(tree)
}

fn load_params(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<PolicyParams> {
    match checkpoint {
        Some(p) => Ok(policy::load_checkpoint(p)?),
        None => Ok(PolicyParams::new(cfg.sampling)),
    }
}

fn eval_jobs<G: Generator + Send>(
    problems: impl Iterator<Item = (Problem, G)>,
    cfg: &RunConfig,
    limit: Option<usize>,
) -> Result<IbEvalReport> {
    let jobs: Vec<(Problem, G)> = problems.take(limit.unwrap_or(usize::MAX)).collect();
    Ok(offline_ibscore_eval(&jobs, cfg.eval, cfg.seed)?)
}

/// Offline IB-Score evaluation of a checkpoint over the configured suite.
pub fn eval_ibscore(
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
    limit: Option<usize>,
    out: &mut dyn Write,
) -> Result<IbEvalReport> {
    cfg.validate()?;
    let report = match &cfg.backend {
        Backend::Sim => {
            let params = load_params(cfg, checkpoint)?;
            let tasks = sim_tasks(cfg)?;
            let it = tasks.iter().map(|t| {
                (
                    t.problem.clone(),
                    SimGenerator {
                        env: &t.env,
                        policy: &params,
                    },
                )
            });
            eval_jobs(it, cfg, limit)?
        }
        Backend::Remote(rc) => {
            let client = RemoteClient::connect(rc.clone())?;
            let it = dataset(cfg)?.into_iter().map(|p| {
                (
                    p,
                    RemoteGenerator {
                        client: &client,
                        sampling: cfg.sampling,
                    },
                )
            });
            eval_jobs(it, cfg, limit)?
        }
    };
    let path = cfg.output_dir.join("ibscore_report.json");
    write_file(
        &path,
        &serde_json::to_string_pretty(&report).expect("report serializes"),
    )?;
    line(
        out,
        format!(
            "seeds={} rollouts={} problems={}",
            report.config.seeds_per_problem,
            report.config.rollouts_per_step,
            report.rows.len()
        ),
    )?;
    line(
        out,
        format!(
            "mean IB-Score {:.9} mean Cov {:.9}",
            report.mean_ib_score, report.mean_cov
        ),
    )?;
    line(out, format!("report written to {}", path.display()))?;
    Ok(report)
}

/// Runs one oracle suite. Fails with [`CliError::Check`] if any check misses
/// its tolerance.
pub fn oracle(suite: &str, seed: u64, out: &mut dyn Write) -> Result<oracles::SuiteReport> {
    let report = oracles::run_suite(suite, seed).map_err(|e| match e {
        ibtpo::Error::InvalidArgument(m) => CliError::Usage(m),
        e => e.into(),
    })?;
    for c in &report.checks {
        line(
            out,
            format!(
                "{} {}/{}: delta {:.3e} tolerance {:.1e}",
                if c.passed { "PASS" } else { "FAIL" },
                c.suite,
                c.name,
                c.delta,
                c.tolerance
            ),
        )?;
    }
    let failed = report.checks.iter().filter(|c| !c.passed).count();
    line(
        out,
        format!(
            "{suite}: {} checks, {failed} failed, max delta {:.3e}",
            report.checks.len(),
            report.max_delta()
        ),
    )?;
    if failed > 0 {
        return Err(CliError::Check(format!("{failed} {suite} checks failed")));
    }
    Ok(report)
}

/// Flattens a tree snapshot into one CSV row per node.
pub fn export_tree(snapshot: &Path, dest: Option<PathBuf>, out: &mut dyn Write) -> Result<PathBuf> {
    let tree = ibtree::load_tree(snapshot)?;
    let dest = dest.unwrap_or_else(|| snapshot.with_extension("csv"));
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| CliError::Io {
        path: dest.clone(),
        source: e.into(),
    };
    w.write_record([
        "id",
        "parent",
        "depth",
        "step",
        "n_tokens",
        "geo_mean_prob",
        "path_tokens",
        "pass_sum",
        "rollouts",
        "density",
        "ib_score",
        "ending_here",
        "leaf",
        "truncated",
    ])
    .map_err(csv_err)?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for n in &tree.nodes {
        w.write_record([
            n.id.to_string(),
            n.parent.map(|p| p.to_string()).unwrap_or_default(),
            n.depth.to_string(),
            n.step.content.render(),
            n.step.n_tokens().to_string(),
            n.step.geo_mean_prob.to_string(),
            n.path_tokens.to_string(),
            n.density.pass_sum.to_string(),
            n.density.rollout_count.to_string(),
            opt(n.density.value()),
            opt(n.ib_score.as_ref().map(|s| s.value)),
            n.terminal.rollout_count.to_string(),
            n.is_leaf.to_string(),
            n.truncated.to_string(),
        ])
        .map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Io {
        path: dest.clone(),
        source: e.into_error(),
    })?;
    write_file(&dest, std::str::from_utf8(&bytes).expect("csv of utf-8 fields"))?;
    line(out, format!("{} nodes written to {}", tree.nodes.len(), dest.display()))?;
    Ok(dest)
}
