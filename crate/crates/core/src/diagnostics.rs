//! Training-dynamics metrics, the offline IB-Score evaluator, and the
//! metrics sink.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::Problem;
use crate::ibscore::{self, BranchStat};
use crate::ibtree::{Generator, Limits, SampleTree};
use crate::seed;
use crate::{Error, Result};

fn check_groups(groups: &[Vec<f64>]) -> Result<()> {
    if groups.is_empty() {
        return Err(Error::InvalidArgument("no groups".into()));
    }
    if groups.iter().any(Vec::is_empty) {
        return Err(Error::InvalidArgument("empty reward group".into()));
    }
    Ok(())
}

/// Share of groups whose rewards are not all equal.
pub fn eff_rate(groups: &[Vec<f64>]) -> Result<f64> {
    check_groups(groups)?;
    let mixed = groups.iter().filter(|g| g.iter().any(|r| *r != g[0])).count();
    Ok(mixed as f64 / groups.len() as f64)
}

/// Mean reward over all trajectories.
pub fn avg_rate(groups: &[Vec<f64>]) -> Result<f64> {
    check_groups(groups)?;
    let n: usize = groups.iter().map(Vec::len).sum();
    Ok(groups.iter().flatten().sum::<f64>() / n as f64)
}

/// Unbiased pass@k, `1 - C(n-c, k) / C(n, k)`, averaged over groups.
pub fn pass_at_k(groups: &[Vec<f64>], k: usize) -> Result<f64> {
    check_groups(groups)?;
    if k == 0 {
        return Err(Error::InvalidArgument("k must be >= 1".into()));
    }
    let mut total = 0.0;
    for g in groups {
        let n = g.len();
        if k > n {
            return Err(Error::InvalidArgument(format!("k = {k} exceeds group size {n}")));
        }
        let c = g.iter().filter(|r| **r > 0.0).count();
        // C(n-c, k) / C(n, k) = prod_{i=n-c+1}^{n} (1 - k / i)
        let miss: f64 = if n - c < k {
            0.0
        } else {
            ((n - c + 1)..=n).map(|i| 1.0 - k as f64 / i as f64).product()
        };
        total += 1.0 - miss;
    }
    Ok(total / groups.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TreeStats {
    pub mean_ib_score: f64,
    pub mean_cov: f64,
    /// Sampling estimate of step entropy, `1 - mean(geo prob)` over all
    /// generated steps.
    pub mean_step_entropy: f64,
    pub scored_nodes: usize,
}

pub fn tree_stats(tree: &SampleTree) -> TreeStats {
    let scored: Vec<_> = tree.nodes.iter().filter_map(|n| n.ib_score.as_ref()).collect();
    let geos: Vec<f64> = tree.nodes[1..].iter().map(|n| n.step.geo_mean_prob).collect();
    let mean = |xs: &mut dyn Iterator<Item = f64>, n: usize| if n == 0 { 0.0 } else { xs.sum::<f64>() / n as f64 };
    TreeStats {
        mean_ib_score: mean(&mut scored.iter().map(|s| s.value), scored.len()),
        mean_cov: mean(&mut scored.iter().map(|s| s.cov), scored.len()),
        mean_step_entropy: if geos.is_empty() {
            0.0
        } else {
            ibscore::tsallis_entropy(&geos, 2.0).unwrap_or(0.0)
        },
        scored_nodes: scored.len(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsRow {
    pub train_step: u64,
    pub eff_rate: f64,
    pub avg_rate: f64,
    pub tokens_generated: u64,
    pub mean_step_entropy: f64,
    pub cov_eta: f64,
    pub mean_ib_score: f64,
    pub val_accuracy: Option<f64>,
    pub clip_fraction: f64,
}

pub const METRICS_COLUMNS: &[&str] = &[
    "train_step",
    "eff_rate",
    "avg_rate",
    "tokens_generated",
    "mean_step_entropy",
    "cov_eta",
    "mean_ib_score",
    "val_accuracy",
    "clip_fraction",
];

/// Append-only sink writing `<base>.jsonl` and `<base>.csv` side by side.
pub struct MetricsSink {
    jsonl: PathBuf,
    csv: PathBuf,
}

fn open_append(path: &Path) -> Result<File> {
    OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))
}

impl MetricsSink {
    pub fn open(base: impl AsRef<Path>) -> Result<Self> {
        let base = base.as_ref();
        let sink = MetricsSink {
            jsonl: base.with_extension("jsonl"),
            csv: base.with_extension("csv"),
        };
        open_append(&sink.jsonl)?;
        let fresh = fs::metadata(&sink.csv).map(|m| m.len() == 0).unwrap_or(true);
        if fresh {
            let mut f = open_append(&sink.csv)?;
            writeln!(f, "{}", METRICS_COLUMNS.join(",")).map_err(|e| Error::io(&sink.csv, e))?;
        } else {
            let f = File::open(&sink.csv).map_err(|e| Error::io(&sink.csv, e))?;
            let mut header = String::new();
            BufReader::new(f)
                .read_line(&mut header)
                .map_err(|e| Error::io(&sink.csv, e))?;
            if header.trim_end() != METRICS_COLUMNS.join(",") {
                return Err(Error::Format(format!(
                    "{} has an unexpected header",
                    sink.csv.display()
                )));
            }
        }
        Ok(sink)
    }

    pub fn jsonl_path(&self) -> &Path {
        &self.jsonl
    }

    pub fn csv_path(&self) -> &Path {
        &self.csv
    }

    pub fn write(&mut self, row: &MetricsRow) -> Result<()> {
        let line = serde_json::to_string(row).expect("metrics row serializes");
        let mut j = open_append(&self.jsonl)?;
        writeln!(j, "{line}").map_err(|e| Error::io(&self.jsonl, e))?;
        let mut w = csv::WriterBuilder::new()
            .has_headers(false)
            .from_writer(open_append(&self.csv)?);
        w.serialize(row)
            .and_then(|_| w.flush().map_err(csv::Error::from))
            .map_err(|e| Error::Format(format!("csv: {e}")))?;
        Ok(())
    }
}

pub fn parse_metrics_jsonl(text: &str) -> Result<Vec<MetricsRow>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::MalformedLine {
                line: i + 1,
                reason: e.to_string(),
            })
        })
        .collect()
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricsRow>> {
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let header: Vec<String> = r
        .headers()
        .map_err(|e| Error::Format(format!("csv: {e}")))?
        .iter()
        .map(str::to_string)
        .collect();
    if header != METRICS_COLUMNS {
        return Err(Error::Format("metrics csv has an unexpected header".into()));
    }
    r.deserialize()
        .map(|row| row.map_err(|e| Error::Format(format!("csv: {e}"))))
        .collect()
}

pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<MetricsRow>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_metrics_jsonl(&text)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Average {
    /// Every problem weighs the same.
    #[default]
    Macro,
    /// Every scored step weighs the same.
    Micro,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IbEvalConfig {
    pub seeds_per_problem: usize,
    pub rollouts_per_step: usize,
    pub beta: f64,
    pub average: Average,
    pub max_depth: usize,
    pub max_tokens: usize,
}

impl Default for IbEvalConfig {
    fn default() -> Self {
        IbEvalConfig {
            seeds_per_problem: 4,
            rollouts_per_step: 5,
            beta: ibscore::DEFAULT_BETA,
            average: Average::Macro,
            max_depth: 64,
            max_tokens: 4096,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemRow {
    pub problem_id: String,
    pub n_steps: usize,
    pub mean_ib_score: f64,
    pub mean_cov: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IbEvalReport {
    pub config: IbEvalConfig,
    pub seed: u64,
    pub mean_ib_score: f64,
    pub mean_cov: f64,
    pub rows: Vec<ProblemRow>,
}

fn eval_problem<G: Generator>(
    problem: &Problem,
    g: &G,
    cfg: &IbEvalConfig,
    seed: u64,
) -> Result<(ProblemRow, Vec<(f64, f64)>)> {
    let mut rng = seed::rng(seed, &[seed::hash_str(&problem.id)]);
    let full = Limits {
        max_steps: cfg.max_depth,
        max_tokens: cfg.max_tokens,
    };
    let seeds = g.rollouts(problem, &[], full, cfg.seeds_per_problem, &mut rng)?;
    let mut scores = Vec::new();
    for traj in &seeds {
        let mut used = 0;
        // every generated step except the final one
        for i in 0..traj.steps.len().saturating_sub(1) {
            used += traj.steps[i].n_tokens();
            let prefix: Vec<_> = traj.steps[..=i].iter().collect();
            let limits = Limits {
                max_steps: cfg.max_depth.saturating_sub(i + 1),
                max_tokens: cfg.max_tokens.saturating_sub(used),
            };
            let outs = g.rollouts(problem, &prefix, limits, cfg.rollouts_per_step, &mut rng)?;
            let rewards: Vec<f64> = outs.iter().map(|o| o.reward.value()).collect();
            let parent = rewards.iter().sum::<f64>() / rewards.len() as f64;
            let kids: Vec<BranchStat> = outs
                .iter()
                .filter_map(|o| {
                    o.steps.first().map(|s| BranchStat {
                        density: o.reward.value(),
                        geo_prob: s.geo_mean_prob,
                    })
                })
                .collect();
            if kids.is_empty() {
                continue;
            }
            let est = ibscore::ib_score(parent, &kids, cfg.beta)?;
            scores.push((est.value, est.cov));
        }
    }
    let n = scores.len();
    let mean = |f: fn(&(f64, f64)) -> f64| {
        if n == 0 {
            0.0
        } else {
            scores.iter().map(f).sum::<f64>() / n as f64
        }
    };
    let row = ProblemRow {
        problem_id: problem.id.clone(),
        n_steps: n,
        mean_ib_score: mean(|s| s.0),
        mean_cov: mean(|s| s.1),
    };
    Ok((row, scores))
}

/// Seeds trajectories per problem, then launches rollouts from every
/// non-terminal step and scores each step with its rollouts as children.
pub fn offline_ibscore_eval<G: Generator + Send>(
    jobs: &[(Problem, G)],
    cfg: IbEvalConfig,
    seed: u64,
) -> Result<IbEvalReport> {
    if cfg.seeds_per_problem == 0 || cfg.rollouts_per_step < 2 {
        return Err(Error::InvalidArgument(
            "need seeds_per_problem >= 1 and rollouts_per_step >= 2".into(),
        ));
    }
    let per: Vec<(ProblemRow, Vec<(f64, f64)>)> = jobs
        .par_iter()
        .map(|(p, g)| eval_problem(p, g, &cfg, seed))
        .collect::<Result<_>>()?;
    let (mean_ib_score, mean_cov) = match cfg.average {
        Average::Macro => {
            let rows: Vec<_> = per.iter().filter(|(r, _)| r.n_steps > 0).map(|(r, _)| r).collect();
            let n = rows.len().max(1) as f64;
            (
                rows.iter().map(|r| r.mean_ib_score).sum::<f64>() / n,
                rows.iter().map(|r| r.mean_cov).sum::<f64>() / n,
            )
        }
        Average::Micro => {
            let all: Vec<&(f64, f64)> = per.iter().flat_map(|(_, s)| s).collect();
            let n = all.len().max(1) as f64;
            (
                all.iter().map(|s| s.0).sum::<f64>() / n,
                all.iter().map(|s| s.1).sum::<f64>() / n,
            )
        }
    };
    Ok(IbEvalReport {
        config: cfg,
        seed,
        mean_ib_score,
        mean_cov,
        rows: per.into_iter().map(|(r, _)| r).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{make_env, AnswerStructure, EnvSpec};
    use crate::ibtree::SimGenerator;
    use crate::policy::PolicyParams;
    use proptest::prelude::*;

    #[test]
    fn rate_examples() {
        assert_eq!(eff_rate(&[vec![1.0, 0.0], vec![1.0, 1.0]]).unwrap(), 0.5);
        assert_eq!(eff_rate(&[vec![0.0, 0.0], vec![1.0, 1.0]]).unwrap(), 0.0);
        assert_eq!(eff_rate(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap(), 1.0);
        assert!(eff_rate(&[]).is_err());
        assert_eq!(avg_rate(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap(), 0.25);
        assert_eq!(avg_rate(&[vec![0.0; 3]]).unwrap(), 0.0);
        assert_eq!(avg_rate(&[vec![1.0; 3]]).unwrap(), 1.0);
    }

    #[test]
    fn pass_at_k_examples() {
        for k in 1..=4 {
            assert_eq!(pass_at_k(&[vec![1.0; 4]], k).unwrap(), 1.0);
            assert_eq!(pass_at_k(&[vec![0.0; 4]], k).unwrap(), 0.0);
        }
        assert!((pass_at_k(&[vec![1.0, 0.0, 0.0, 0.0]], 2).unwrap() - 0.5).abs() < 1e-15);
        assert!(pass_at_k(&[vec![1.0, 0.0]], 3).is_err());
    }

    fn binom(n: u64, k: u64) -> f64 {
        if k > n {
            return 0.0;
        }
        (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
    }

    proptest! {
        #[test]
        fn pass_at_k_properties(g in proptest::collection::vec(0u8..=1, 1..16)) {
            let g: Vec<f64> = g.into_iter().map(f64::from).collect();
            let n = g.len();
            let c = g.iter().filter(|r| **r > 0.0).count();
            let mut last = 0.0;
            for k in 1..=n {
                let p = pass_at_k(std::slice::from_ref(&g), k).unwrap();
                let direct = 1.0 - binom((n - c) as u64, k as u64) / binom(n as u64, k as u64);
                prop_assert!((p - direct).abs() < 1e-12);
                prop_assert!(p >= last - 1e-12);
                last = p;
            }
            if c > 0 {
                prop_assert_eq!(pass_at_k(std::slice::from_ref(&g), n).unwrap(), 1.0);
            }
        }

        #[test]
        fn eff_rate_counts(groups in proptest::collection::vec(proptest::collection::vec(0u8..=1, 1..6), 1..20)) {
            let groups: Vec<Vec<f64>> = groups.into_iter().map(|g| g.into_iter().map(f64::from).collect()).collect();
            let zero_var = groups.iter().filter(|g| crate::advantage::population_std(g) == 0.0).count();
            let want = 1.0 - zero_var as f64 / groups.len() as f64;
            prop_assert!((eff_rate(&groups).unwrap() - want).abs() < 1e-15);
        }
    }

    fn row(step: u64) -> MetricsRow {
        MetricsRow {
            train_step: step,
            eff_rate: 0.1 * step as f64,
            avg_rate: 1.0 / 3.0,
            tokens_generated: 100 + step,
            mean_step_entropy: 0.123_456_789_012_345_67,
            cov_eta: -1e-17,
            mean_ib_score: 0.3,
            val_accuracy: if step.is_multiple_of(2) { Some(0.7) } else { None },
            clip_fraction: 0.0,
        }
    }

    #[test]
    fn sink_appends_and_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let base = dir.path().join("metrics");
        let mut s = MetricsSink::open(&base).unwrap();
        for i in 0..3 {
            s.write(&row(i)).unwrap();
        }
        drop(s);
        let mut s = MetricsSink::open(&base).unwrap();
        s.write(&row(3)).unwrap();
        let rows = read_metrics(s.jsonl_path()).unwrap();
        assert_eq!(rows, (0..4).map(row).collect::<Vec<_>>());
        let csv_rows = parse_metrics_csv(&fs::read_to_string(s.csv_path()).unwrap()).unwrap();
        assert_eq!(csv_rows, rows);
        let text = fs::read_to_string(s.csv_path()).unwrap();
        assert_eq!(text.lines().count(), 5);
        assert!(text.starts_with("train_step,eff_rate"));
    }

    #[test]
    fn sink_rejects_foreign_csv() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("m.csv"), "a,b\n1,2\n").unwrap();
        assert!(MetricsSink::open(dir.path().join("m")).is_err());
        assert!(MetricsSink::open(dir.path().join("missing/m")).is_err());
    }

    #[test]
    fn deterministic_env_scores_zero() {
        let env = make_env(EnvSpec::new(3, 6, AnswerStructure::Chain, 4)).unwrap();
        let policy = PolicyParams::default();
        let jobs: Vec<_> = (0..3)
            .map(|i| {
                (
                    env.problem(format!("p{i}")),
                    SimGenerator {
                        env: &env,
                        policy: &policy,
                    },
                )
            })
            .collect();
        let rep = offline_ibscore_eval(&jobs, IbEvalConfig::default(), 1).unwrap();
        assert!(rep.mean_ib_score.abs() < 1e-9);
        assert_eq!(rep.rows[0].n_steps, 4 * 5);
        assert_eq!(rep.config.seeds_per_problem, 4);
        assert_eq!(rep.config.rollouts_per_step, 5);
    }

    #[test]
    fn offline_eval_is_deterministic() {
        let env = make_env(EnvSpec::new(3, 4, AnswerStructure::PlantedPaths { count: 3 }, 4)).unwrap();
        let policy = PolicyParams::default();
        let jobs: Vec<_> = (0..4)
            .map(|i| {
                (
                    env.problem(format!("p{i}")),
                    SimGenerator {
                        env: &env,
                        policy: &policy,
                    },
                )
            })
            .collect();
        let a = offline_ibscore_eval(&jobs, IbEvalConfig::default(), 9).unwrap();
        let b = offline_ibscore_eval(&jobs, IbEvalConfig::default(), 9).unwrap();
        assert_eq!(a, b);
        let micro = offline_ibscore_eval(
            &jobs,
            IbEvalConfig {
                average: Average::Micro,
                ..IbEvalConfig::default()
            },
            9,
        )
        .unwrap();
        // equal step counts per problem make both averages agree
        assert!((micro.mean_ib_score - a.mean_ib_score).abs() < 1e-12);
    }
}
