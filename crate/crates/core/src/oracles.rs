//! Brute-force reference implementations.
//!
//! Nothing in here calls the arithmetic of the modules it checks: softmax,
//! truncation, densities, IB-Scores and the loss are all recomputed from
//! first principles. The suites at the bottom pit the two against each
//! other.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::env::{make_env, AnswerStructure, Env, EnvSpec, PlantedAnswer, StepId};
use crate::ibtree::{NodeId, SampleTree};
use crate::policy::{ContextKey, PolicyParams, SamplingParams, StepContext};
use crate::seed::{self, Rng};
use crate::{Error, Result};

/// Largest enumeration allowed.
pub const MAX_LEAVES: usize = 4096;

#[derive(Debug, Clone, PartialEq)]
pub struct EnumPath {
    pub path: Vec<StepId>,
    pub prob: f64,
    pub reward: f64,
}

/// Every root-to-leaf path of a small environment with its exact sampling
/// probability. Token truncation is not modelled.
#[derive(Debug, Clone)]
pub struct EnumeratedTree {
    pub paths: Vec<EnumPath>,
}

/// Correctness straight from the planted answer.
pub fn planted_correct(env: &Env, path: &[StepId]) -> bool {
    if path.len() != env.max_depth() {
        return false;
    }
    match env.planted() {
        PlantedAnswer::Paths(set) => set.contains(path),
        PlantedAnswer::Critical(marks) => marks.iter().zip(path).all(|(m, s)| m.is_none_or(|want| want == *s)),
        PlantedAnswer::All => true,
        PlantedAnswer::Chain(chain) => chain.as_slice() == path,
    }
}

/// Sampling distribution: tempered softmax, keep the `top_k` largest, keep
/// the shortest head reaching `top_p`, renormalise.
fn oracle_distribution(logits: &[f64], s: &SamplingParams, truncate: bool) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::MIN, f64::max);
    let w: Vec<f64> = logits.iter().map(|l| ((l - m) / s.temperature).exp()).collect();
    let z: f64 = w.iter().sum();
    let p: Vec<f64> = w.iter().map(|x| x / z).collect();
    if !truncate {
        return p;
    }
    let mut ranked: Vec<(f64, usize)> = p.iter().cloned().zip(0..).collect();
    ranked.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    ranked.truncate(s.top_k.max(1));
    let head: f64 = ranked.iter().map(|r| r.0).sum();
    let mut kept = Vec::new();
    let mut cum = 0.0;
    for (q, i) in ranked {
        kept.push((q, i));
        cum += q / head;
        if cum >= s.top_p {
            break;
        }
    }
    let mass: f64 = kept.iter().map(|k| k.0).sum();
    let mut out = vec![0.0; p.len()];
    for (q, i) in kept {
        out[i] = q / mass;
    }
    out
}

fn raw_logits(policy: &PolicyParams, env: &Env, problem: &str, prefix: &[StepId]) -> Vec<f64> {
    let key = ContextKey {
        problem: problem.to_string(),
        prefix: prefix.to_vec(),
    };
    match policy.stored(&key) {
        Some(l) => l.to_vec(),
        None => env.base_logits(prefix),
    }
}

/// Exact step probabilities at `prefix`, truncated or not.
pub fn exact_step_probs(
    policy: &PolicyParams,
    env: &Env,
    problem: &str,
    prefix: &[StepId],
    truncate: bool,
) -> Vec<f64> {
    oracle_distribution(&raw_logits(policy, env, problem, prefix), &policy.sampling, truncate)
}

pub fn enumerate(env: &Env, policy: &PolicyParams, problem: &str) -> Result<EnumeratedTree> {
    let leaves = (env.spec().step_vocab_size as f64).powi(env.max_depth() as i32);
    if leaves > MAX_LEAVES as f64 && !matches!(env.planted(), PlantedAnswer::Chain(_)) {
        return Err(Error::InvalidArgument(format!(
            "{leaves} leaves exceed the enumeration cap of {MAX_LEAVES}"
        )));
    }
    let mut paths = Vec::new();
    let mut stack = vec![(Vec::new(), 1.0)];
    while let Some((prefix, prob)) = stack.pop() {
        if prefix.len() == env.max_depth() {
            let reward = if planted_correct(env, &prefix) { 1.0 } else { 0.0 };
            paths.push(EnumPath {
                path: prefix,
                prob,
                reward,
            });
            continue;
        }
        let cands = env.candidates(&prefix);
        let dist = exact_step_probs(policy, env, problem, &prefix, true);
        for (c, q) in cands.into_iter().zip(dist).rev() {
            if q > 0.0 {
                let mut next = prefix.clone();
                next.push(c);
                stack.push((next, prob * q));
            }
        }
    }
    paths.sort_by(|a, b| a.path.cmp(&b.path));
    Ok(EnumeratedTree { paths })
}

impl EnumeratedTree {
    pub fn total_prob(&self) -> f64 {
        self.paths.iter().map(|p| p.prob).sum()
    }

    /// `P(correct | prefix)` computed exactly.
    pub fn exact_reward_density(&self, prefix: &[StepId]) -> Result<f64> {
        let (mut mass, mut good) = (0.0, 0.0);
        for p in self.paths.iter().filter(|p| p.path.starts_with(prefix)) {
            mass += p.prob;
            good += p.prob * p.reward;
        }
        if mass == 0.0 {
            return Err(Error::UnknownPrefix(prefix.to_vec()));
        }
        Ok(good / mass)
    }

    pub fn success_probability(&self) -> f64 {
        self.paths.iter().map(|p| p.prob * p.reward).sum()
    }
}

/// Exact Tsallis entropy `(1 - sum p^alpha) / (alpha - 1)`.
pub fn exact_tsallis(dist: &[f64], alpha: f64) -> Result<f64> {
    if alpha == 1.0 {
        return Err(Error::InvalidArgument("alpha = 1".into()));
    }
    let s: f64 = dist.iter().map(|p| p.powf(alpha)).sum();
    Ok((1.0 - s) / (alpha - 1.0))
}

/// One trajectory for the direct loss: `(step, token count, advantage)`.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleStep {
    pub prefix: Vec<StepId>,
    pub step: StepId,
    pub n_tokens: usize,
    pub advantage: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub eps_low: f64,
    pub eps_high: f64,
    pub beta_kl: f64,
    pub omega: f64,
}

fn oracle_log_geo(policy: &PolicyParams, env: &Env, problem: &str, s: &OracleStep) -> f64 {
    let cands = env.candidates(&s.prefix);
    let probs = exact_step_probs(policy, env, problem, &s.prefix, false);
    let i = cands
        .iter()
        .position(|&c| c == s.step)
        .expect("oracle step is a candidate");
    probs[i].max(f64::MIN_POSITIVE).ln() / s.n_tokens as f64
}

/// Loss of a batch of trajectories with given per-step advantages, written
/// out directly.
pub fn direct_loss(
    batch: &[Vec<OracleStep>],
    env: &Env,
    problem: &str,
    policy: &PolicyParams,
    reference: &PolicyParams,
    w8: LossWeights,
) -> f64 {
    let batch: Vec<&Vec<OracleStep>> = batch.iter().filter(|t| !t.is_empty()).collect();
    let mut surr = 0.0;
    let mut kl = 0.0;
    let mut ent = 0.0;
    for traj in &batch {
        let (mut s_t, mut k_t, mut e_t) = (0.0, 0.0, 0.0);
        for s in traj.iter() {
            let lt = oracle_log_geo(policy, env, problem, s);
            let lr = oracle_log_geo(reference, env, problem, s);
            let ratio = (lt - lr).exp();
            let lo = 1.0 - w8.eps_low;
            let hi = 1.0 + w8.eps_high;
            let clipped = if ratio < lo {
                lo
            } else if ratio > hi {
                hi
            } else {
                ratio
            };
            s_t += f64::min(ratio * s.advantage, clipped * s.advantage);
            let r = (lr - lt).exp();
            k_t += r - r.ln() - 1.0;
            e_t += -lt;
        }
        let n = traj.len() as f64;
        surr += s_t / n;
        kl += k_t / n;
        ent += e_t / n;
    }
    let g = batch.len() as f64;
    -(surr / g) + w8.beta_kl * (kl / g) - w8.omega * (ent / g)
}

/// Group-normalised outcome advantages followed by [`direct_loss`].
pub fn direct_grpo_loss(
    group: &[(Vec<(StepId, usize)>, f64)],
    env: &Env,
    problem: &str,
    policy: &PolicyParams,
    reference: &PolicyParams,
    w8: LossWeights,
) -> f64 {
    let g = group.len() as f64;
    let mean = group.iter().map(|t| t.1).sum::<f64>() / g;
    let var = group.iter().map(|t| (t.1 - mean).powi(2)).sum::<f64>() / g;
    let batch: Vec<Vec<OracleStep>> = group
        .iter()
        .map(|(steps, r)| {
            let a = if var == 0.0 { 0.0 } else { (r - mean) / var.sqrt() };
            let mut prefix = Vec::new();
            steps
                .iter()
                .map(|&(step, n_tokens)| {
                    let s = OracleStep {
                        prefix: prefix.clone(),
                        step,
                        n_tokens,
                        advantage: a,
                    };
                    prefix.push(step);
                    s
                })
                .collect()
        })
        .collect();
    direct_loss(&batch, env, problem, policy, reference, w8)
}

/// Central differences of `f` at `x`.
pub fn central_difference(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut y = x.to_vec();
    (0..x.len())
        .map(|i| {
            y[i] = x[i] + h;
            let up = f(&y);
            y[i] = x[i] - h;
            let down = f(&y);
            y[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `max |a - n| / max(|a|_inf, |n|_inf, 1e-12)`.
pub fn rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs())
        .fold(0.0, f64::max);
    let scale = analytic.iter().chain(numeric).map(|v| v.abs()).fold(1e-12, f64::max);
    diff / scale
}

/// Writes the flat vector `x` into the logits of `contexts`, in order.
pub fn scatter(params: &mut PolicyParams, contexts: &[Arc<StepContext>], x: &[f64]) {
    let mut at = 0;
    for c in contexts {
        let n = c.len();
        params
            .set_logits(c.key.clone(), x[at..at + n].to_vec())
            .expect("finite logits");
        at += n;
    }
}

/// Current logits of `contexts`, flattened in order.
pub fn gather(params: &PolicyParams, contexts: &[Arc<StepContext>]) -> Vec<f64> {
    contexts.iter().flat_map(|c| params.logits_for(c).to_vec()).collect()
}

/// `(pass_sum, count)` of a node recomputed from the trajectory list.
pub fn scratch_density(tree: &SampleTree, node: NodeId) -> (f64, u64) {
    let mut s = 0.0;
    let mut n = 0;
    for t in &tree.trajectories {
        if t.node_path.contains(&node) {
            s += t.reward.value();
            n += 1;
        }
    }
    (s, n)
}

/// IB-Score of a node recomputed from the trajectory list.
pub fn scratch_ib_score(tree: &SampleTree, node: NodeId, beta: f64) -> Option<f64> {
    let kids = &tree.nodes[node].children;
    if kids.is_empty() {
        return None;
    }
    let dens = |id| {
        let (s, n) = scratch_density(tree, id);
        if n == 0 {
            0.0
        } else {
            s / n as f64
        }
    };
    let parent = dens(node);
    let mut acc = 0.0;
    for &c in kids {
        let ratio = if parent == 0.0 { 1.0 } else { dens(c) / parent };
        acc += (ratio - 1.0 - 1.0 / beta) * tree.nodes[c].step.geo_mean_prob;
    }
    Some(1.0 + beta * acc / kids.len() as f64)
}

/// A random node whose `b` children each carry `n` rollouts, with the parent
/// density equal to the mean child density.
pub fn balanced_node(rng: &mut Rng) -> (f64, Vec<(f64, f64)>) {
    let b = rng.random_range(1..=8);
    let n = rng.random_range(1..=16u32);
    loop {
        let kids: Vec<(f64, f64)> = (0..b)
            .map(|_| {
                let passes = rng.random_range(0..=n);
                (f64::from(passes) / f64::from(n), rng.random_range(0.01..=1.0))
            })
            .collect();
        let parent = kids.iter().map(|k| k.0).sum::<f64>() / b as f64;
        if parent > 0.0 {
            return (parent, kids);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub suite: String,
    pub name: String,
    pub delta: f64,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SuiteReport {
    pub checks: Vec<Check>,
}

impl SuiteReport {
    fn check(&mut self, suite: &str, name: impl Into<String>, delta: f64, tolerance: f64) {
        self.checks.push(Check {
            suite: suite.into(),
            name: name.into(),
            delta,
            tolerance,
            passed: delta.is_finite() && delta <= tolerance,
        });
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn max_delta(&self) -> f64 {
        self.checks.iter().map(|c| c.delta).fold(0.0, f64::max)
    }
}

pub const SUITES: &[&str] = &["appendixA", "gradcheck", "enumeration", "entropy", "density", "grpo"];

pub fn run_suite(name: &str, seed: u64) -> Result<SuiteReport> {
    let mut rep = SuiteReport::default();
    match name {
        "appendixA" => suites::balanced(&mut rep, seed, 1000)?,
        "gradcheck" => suites::gradcheck(&mut rep, seed, 100)?,
        "enumeration" => suites::enumeration(&mut rep, seed)?,
        "entropy" => suites::entropy(&mut rep, seed, 10, 100_000)?,
        "density" => suites::density(&mut rep, seed, 10, 100_000)?,
        "grpo" => suites::grpo(&mut rep, seed, 50)?,
        _ => {
            return Err(Error::InvalidArgument(format!(
                "unknown oracle suite `{name}`; known suites: {}",
                SUITES.join(", ")
            )))
        }
    }
    Ok(rep)
}

/// Small environments used by the suites.
pub fn random_small_env(rng: &mut Rng) -> Result<Env> {
    let v = rng.random_range(2..=4u16);
    let d = rng.random_range(2..=4usize);
    let structure = match rng.random_range(0..3) {
        0 => AnswerStructure::PlantedPaths {
            count: rng.random_range(1..=3),
        },
        1 => AnswerStructure::CriticalSteps { min: 1, max: d },
        _ => AnswerStructure::AllCorrect,
    };
    let mut spec = EnvSpec::new(v, d, structure, rng.random());
    spec.tokens_per_step.min = 1;
    spec.tokens_per_step.max = rng.random_range(1..=4);
    make_env(spec)
}

/// Random logits on every internal prefix of a small environment.
pub fn randomize_policy(policy: &mut PolicyParams, env: &Env, problem: &str, scale: f64, rng: &mut Rng) {
    let mut stack = vec![Vec::new()];
    while let Some(prefix) = stack.pop() {
        if prefix.len() >= env.max_depth() {
            continue;
        }
        let cands = env.candidates(&prefix);
        let logits = (0..cands.len()).map(|_| rng.random_range(-scale..scale)).collect();
        policy
            .set_logits(
                ContextKey {
                    problem: problem.into(),
                    prefix: prefix.clone(),
                },
                logits,
            )
            .expect("finite");
        for c in cands {
            let mut p = prefix.clone();
            p.push(c);
            stack.push(p);
        }
    }
}

mod suites {
    use super::*;
    use crate::advantage::grpo_advantage;
    use crate::ibscore::{self, BranchStat};
    use crate::ibtree::{run_sampling, BranchStrategy, SamplingBudget, SimGenerator};
    use crate::optimizer::{self, StepRecord, TrainConfig, TrajectoryRecord};
    use crate::policy::{sample_step, snapshot_reference};

    pub fn balanced(rep: &mut SuiteReport, seed: u64, n: usize) -> Result<()> {
        let mut rng = seed::rng(seed, &[0xA1]);
        let (mut ratio_err, mut eta_err, mut dec_err) = (0f64, 0f64, 0f64);
        for _ in 0..n {
            let beta = rng.random_range(0.5..20.0);
            let (parent, kids) = balanced_node(&mut rng);
            let stats: Vec<BranchStat> = kids
                .iter()
                .map(|&(density, geo_prob)| BranchStat { density, geo_prob })
                .collect();
            let est = ibscore::ib_score(parent, &stats, beta)?;
            let b = kids.len() as f64;
            let mean_ratio = kids.iter().map(|k| k.0 / parent).sum::<f64>() / b;
            ratio_err = ratio_err.max((mean_ratio - 1.0).abs());
            let m1 = est.pairs.iter().map(|p| p.eta1).sum::<f64>() / b;
            eta_err = eta_err.max((m1 + 1.0 / beta).abs());
            let m2 = est.pairs.iter().map(|p| p.eta2).sum::<f64>() / b;
            let dec = 1.0 + beta * (est.cov + m1 * m2);
            dec_err = dec_err.max((dec - est.value).abs());
        }
        rep.check("appendixA", "mean density ratio = 1", ratio_err, 1e-12);
        rep.check("appendixA", "mean eta1 = -1/beta", eta_err, 1e-12);
        rep.check("appendixA", "value = 1 + beta(cov + m1 m2)", dec_err, 1e-12);
        Ok(())
    }

    /// Random off-boundary batch over a small environment.
    pub(super) struct GradCase {
        pub env: Env,
        pub problem: String,
        pub policy: PolicyParams,
        pub reference: PolicyParams,
        pub batch: Vec<TrajectoryRecord>,
        pub oracle_batch: Vec<Vec<OracleStep>>,
        pub contexts: Vec<Arc<StepContext>>,
        pub cfg: TrainConfig,
    }

    pub(super) fn grad_case(rng: &mut Rng) -> Result<GradCase> {
        let env = random_small_env(rng)?;
        let problem = "g".to_string();
        let sampling = SamplingParams {
            temperature: rng.random_range(0.5..1.5),
            top_p: 1.0,
            top_k: 64,
        };
        let mut reference = PolicyParams::new(sampling);
        randomize_policy(&mut reference, &env, &problem, 1.0, rng);
        let mut policy = reference.clone();
        // perturb theta a little so weights sit off 1 but inside the clip
        let mut perturbed = PolicyParams::new(sampling);
        randomize_policy(&mut perturbed, &env, &problem, 0.05, rng);
        for (k, v) in perturbed.contexts() {
            let base = policy.stored(k).unwrap().to_vec();
            policy
                .set_logits(k.clone(), base.iter().zip(v).map(|(a, b)| a + b).collect())
                .expect("finite");
        }
        let cfg = TrainConfig {
            eps_high: if rng.random_bool(0.5) { 0.2 } else { 0.26 },
            omega: if rng.random_bool(0.5) { 0.0 } else { 0.01 },
            beta_kl: rng.random_range(0.0..0.5),
            ..TrainConfig::default()
        };
        let mut ctx_cache: BTreeMap<Vec<StepId>, Arc<StepContext>> = BTreeMap::new();
        let mut batch = Vec::new();
        let mut oracle_batch = Vec::new();
        for _ in 0..rng.random_range(2..=5) {
            let mut prefix: Vec<StepId> = Vec::new();
            let mut steps = Vec::new();
            let mut osteps = Vec::new();
            while !env.is_terminal(&prefix) {
                let ctx = ctx_cache
                    .entry(prefix.clone())
                    .or_insert_with(|| Arc::new(StepContext::from_env(&env, &problem, &prefix)))
                    .clone();
                let (choice, sample) = sample_step(&reference, &ctx, rng)?;
                let a = rng.random_range(-2.0..2.0);
                steps.push(StepRecord {
                    context: ctx.clone(),
                    choice,
                    n_tokens: sample.n_tokens(),
                    advantage: a,
                });
                let step = ctx.candidates[choice];
                osteps.push(OracleStep {
                    prefix: prefix.clone(),
                    step,
                    n_tokens: sample.n_tokens(),
                    advantage: a,
                });
                prefix.push(step);
            }
            batch.push(TrajectoryRecord { steps });
            oracle_batch.push(osteps);
        }
        let contexts = ctx_cache.into_values().collect();
        Ok(GradCase {
            env,
            problem,
            policy,
            reference,
            batch,
            oracle_batch,
            contexts,
            cfg,
        })
    }

    fn weights(cfg: &TrainConfig) -> LossWeights {
        LossWeights {
            eps_low: cfg.eps_low,
            eps_high: cfg.eps_high,
            beta_kl: cfg.beta_kl,
            omega: cfg.omega,
        }
    }

    /// Distance of the nearest importance weight from a clip boundary.
    fn boundary_gap(case: &GradCase) -> Result<f64> {
        let mut gap = f64::INFINITY;
        for t in &case.batch {
            for s in &t.steps {
                let w = optimizer::importance_weight(&case.policy, &case.reference, &s.context, s.choice, s.n_tokens)?;
                gap = gap
                    .min((w - (1.0 - case.cfg.eps_low)).abs())
                    .min((w - (1.0 + case.cfg.eps_high)).abs());
            }
        }
        Ok(gap)
    }

    pub fn gradcheck(rep: &mut SuiteReport, seed: u64, n: usize) -> Result<()> {
        let mut rng = seed::rng(seed, &[0x6C]);
        let mut worst = 0f64;
        let mut worst_value = 0f64;
        let mut done = 0;
        while done < n {
            let case = grad_case(&mut rng)?;
            if boundary_gap(&case)? < 1e-3 {
                continue;
            }
            done += 1;
            let (lrep, grads) = optimizer::clipped_surrogate(&case.batch, &case.policy, &case.reference, &case.cfg)?;
            let w8 = weights(&case.cfg);
            let direct = direct_loss(
                &case.oracle_batch,
                &case.env,
                &case.problem,
                &case.policy,
                &case.reference,
                w8,
            );
            worst_value = worst_value.max((direct - lrep.total).abs());
            let x = gather(&case.policy, &case.contexts);
            let analytic: Vec<f64> = case
                .contexts
                .iter()
                .flat_map(|c| grads.get(&c.key).map_or(vec![0.0; c.len()], |g| g.to_vec()))
                .collect();
            let mut probe = case.policy.clone();
            let numeric = central_difference(
                |y| {
                    scatter(&mut probe, &case.contexts, y);
                    direct_loss(
                        &case.oracle_batch,
                        &case.env,
                        &case.problem,
                        &probe,
                        &case.reference,
                        w8,
                    )
                },
                &x,
                1e-5,
            );
            worst = worst.max(rel_error(&analytic, &numeric));
        }
        rep.check("gradcheck", format!("max rel. error over {n} points"), worst, 1e-4);
        rep.check("gradcheck", "loss value vs direct loss", worst_value, 1e-12);
        Ok(())
    }

    pub fn enumeration(rep: &mut SuiteReport, seed: u64) -> Result<()> {
        let mut rng = seed::rng(seed, &[0xE1]);
        // vocab 2, depth 2, one rewarded leaf, uniform policy
        let env = make_env(EnvSpec::new(2, 2, AnswerStructure::PlantedPaths { count: 1 }, seed))?;
        let uniform = PolicyParams::new(SamplingParams {
            temperature: 1.0,
            top_p: 1.0,
            top_k: 20,
        });
        let e = enumerate(&env, &uniform, "p")?;
        rep.check(
            "enumeration",
            "one-of-four root density",
            (e.exact_reward_density(&[])? - 0.25).abs(),
            1e-15,
        );
        let all = make_env(EnvSpec::new(3, 3, AnswerStructure::AllCorrect, seed))?;
        let e = enumerate(&all, &uniform, "p")?;
        rep.check(
            "enumeration",
            "all-correct root density",
            (e.exact_reward_density(&[])? - 1.0).abs(),
            1e-12,
        );
        let mut worst_mass = 0f64;
        let mut worst_score = 0f64;
        for i in 0..10 {
            let env = random_small_env(&mut rng)?;
            let mut p = PolicyParams::default();
            randomize_policy(&mut p, &env, "p", 2.0, &mut rng);
            worst_mass = worst_mass.max((enumerate(&env, &p, "p")?.total_prob() - 1.0).abs());
            let problem = env.problem("p");
            let g = SimGenerator { env: &env, policy: &p };
            let tree = run_sampling(
                &problem,
                SamplingBudget::default(),
                BranchStrategy::default(),
                &g,
                &mut seed::rng(seed, &[0xE2, i]),
            )?;
            for node in &tree.nodes {
                if let (Some(est), Some(s)) = (&node.ib_score, scratch_ib_score(&tree, node.id, ibscore::DEFAULT_BETA))
                {
                    worst_score = worst_score.max((est.value - s).abs());
                }
            }
        }
        rep.check("enumeration", "path probabilities sum to 1", worst_mass, 1e-9);
        rep.check("enumeration", "tree IB-Scores vs scratch", worst_score, 1e-12);
        Ok(())
    }

    /// A fixed categorical for instance `i`.
    pub fn categorical(seed: u64, i: u64) -> Vec<f64> {
        let mut rng = seed::rng(seed, &[0xCA7, i]);
        let k = 2 + (i as usize % 4);
        let w: Vec<f64> = (0..k).map(|_| rng.random_range(0.05..1.0)).collect();
        let z: f64 = w.iter().sum();
        w.into_iter().map(|x| x / z).collect()
    }

    pub fn entropy(rep: &mut SuiteReport, seed: u64, instances: u64, samples: usize) -> Result<()> {
        let mut worst = 0f64;
        for i in 0..instances {
            let dist = categorical(seed, i);
            let mut rng = seed::rng(seed, &[0xE7, i]);
            let ctx = StepContext {
                key: ContextKey {
                    problem: "h".into(),
                    prefix: vec![],
                },
                candidates: (0..dist.len() as StepId).collect(),
                base_logits: dist.iter().map(|p| p.ln()).collect(),
                token_lens: vec![1; dist.len()],
            };
            let policy = PolicyParams::new(SamplingParams {
                temperature: 1.0,
                top_p: 1.0,
                top_k: 64,
            });
            let geos: Vec<f64> = (0..samples)
                .map(|_| sample_step(&policy, &ctx, &mut rng).map(|(_, s)| s.geo_mean_prob))
                .collect::<Result<_>>()?;
            let est = ibscore::tsallis_entropy(&geos, 2.0)?;
            worst = worst.max((est - exact_tsallis(&dist, 2.0)?).abs());
        }
        rep.check(
            "entropy",
            format!("Tsallis estimate vs exact, {instances} instances x {samples}"),
            worst,
            0.02,
        );
        Ok(())
    }

    pub fn density(rep: &mut SuiteReport, seed: u64, instances: u64, samples: usize) -> Result<()> {
        let mut worst = 0f64;
        for i in 0..instances {
            let mut rng = seed::rng(seed, &[0xD3, i]);
            let env = random_small_env(&mut rng)?;
            let mut policy = PolicyParams::default();
            randomize_policy(&mut policy, &env, "p", 1.5, &mut rng);
            let exact = enumerate(&env, &policy, "p")?.exact_reward_density(&[])?;
            let problem = env.problem("p");
            let g = SimGenerator {
                env: &env,
                policy: &policy,
            };
            let tree = run_sampling(
                &problem,
                SamplingBudget {
                    b0: samples,
                    iterations: 1,
                    max_tokens_per_traj: usize::MAX / 2,
                    ..SamplingBudget::default()
                },
                BranchStrategy::Independent,
                &g,
                &mut rng,
            )?;
            let mc = tree.root().density.value().unwrap_or(0.0);
            worst = worst.max((mc - exact).abs());
        }
        rep.check(
            "density",
            format!("root density vs exact, {instances} instances x {samples}"),
            worst,
            0.02,
        );
        Ok(())
    }

    pub fn grpo(rep: &mut SuiteReport, seed: u64, n: usize) -> Result<()> {
        let mut rng = seed::rng(seed, &[0x6B]);
        let mut worst_loss = 0f64;
        let mut worst_norm = 0f64;
        for _ in 0..n {
            let case = grad_case(&mut rng)?;
            let rewards: Vec<f64> = case
                .batch
                .iter()
                .map(|_| f64::from(rng.random_range(0..=1u8)))
                .collect();
            let adv = grpo_advantage(&rewards)?;
            if adv.effective {
                let m = adv.values.iter().sum::<f64>() / adv.values.len() as f64;
                let sd = crate::advantage::population_std(&adv.values);
                worst_norm = worst_norm.max(m.abs()).max((sd - 1.0).abs());
            }
            let batch: Vec<TrajectoryRecord> = case
                .batch
                .iter()
                .zip(&adv.values)
                .map(|(t, &a)| TrajectoryRecord {
                    steps: t
                        .steps
                        .iter()
                        .map(|s| StepRecord {
                            advantage: a,
                            ..s.clone()
                        })
                        .collect(),
                })
                .collect();
            let cfg = TrainConfig {
                lambda: 0.0,
                ..case.cfg.clone()
            };
            let (lrep, _) = optimizer::clipped_surrogate(&batch, &case.policy, &case.reference, &cfg)?;
            let group: Vec<(Vec<(StepId, usize)>, f64)> = case
                .oracle_batch
                .iter()
                .zip(&rewards)
                .map(|(t, &r)| (t.iter().map(|s| (s.step, s.n_tokens)).collect(), r))
                .collect();
            let direct = direct_grpo_loss(
                &group,
                &case.env,
                &case.problem,
                &case.policy,
                &case.reference,
                weights(&cfg),
            );
            worst_loss = worst_loss.max((direct - lrep.total).abs());
        }
        rep.check(
            "grpo",
            format!("optimizer loss vs direct GRPO loss, {n} batches"),
            worst_loss,
            1e-12,
        );
        rep.check("grpo", "advantage mean 0 / std 1", worst_norm, 1e-9);
        let fresh = snapshot_reference(&PolicyParams::default());
        rep.check(
            "grpo",
            "fresh snapshot weight",
            {
                let env = make_env(EnvSpec::new(2, 2, AnswerStructure::AllCorrect, seed))?;
                let ctx = StepContext::from_env(&env, "p", &[]);
                (optimizer::importance_weight(&PolicyParams::default(), fresh.params(), &ctx, 0, 1)? - 1.0).abs()
            },
            0.0,
        );
        Ok(())
    }
}

pub use suites::categorical;
