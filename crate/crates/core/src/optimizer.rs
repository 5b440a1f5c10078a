//! Clipped policy-gradient objective with step-level advantages.
//!
//! Importance ratios, clipping, KL and entropy are all taken per step on
//! geometric-mean step probabilities. Each trajectory's step terms are
//! averaged, then trajectories are averaged.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::advantage::{AdvantageRecord, GroupAdvantage};
use crate::env::Env;
use crate::ibtree::{NodeId, SampleTree, SamplingBudget};
use crate::policy::{ContextKey, PolicyParams, StepContext};
use crate::{Error, Result};

/// Upper clip threshold of the clip-higher variant.
pub const CLIP_HIGHER_EPS: f64 = 0.26;
/// Entropy-bonus weight of the entropy-regularised variant.
pub const ENTROPY_OMEGA: f64 = 0.001;
/// Learning rate used for full-size language models.
pub const FULL_SCALE_LEARNING_RATE: f64 = 1e-6;
pub const DESK_LEARNING_RATE: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub beta: f64,
    pub alpha: f64,
    pub lambda: f64,
    pub eps_low: f64,
    pub eps_high: f64,
    pub beta_kl: f64,
    pub omega: f64,
    pub learning_rate: f64,
    pub seed: u64,
    pub budget: SamplingBudget,
    pub group_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            beta: crate::ibscore::DEFAULT_BETA,
            alpha: crate::ibscore::DEFAULT_ALPHA,
            lambda: crate::advantage::DEFAULT_LAMBDA,
            eps_low: 0.2,
            eps_high: 0.2,
            beta_kl: 0.001,
            omega: 0.0,
            learning_rate: DESK_LEARNING_RATE,
            seed: 0,
            budget: SamplingBudget::default(),
            group_size: 12,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.into()));
        let finite = [
            self.beta,
            self.alpha,
            self.lambda,
            self.eps_low,
            self.eps_high,
            self.beta_kl,
            self.omega,
            self.learning_rate,
        ];
        if finite.iter().any(|x| !x.is_finite()) {
            return bad("train config values must be finite");
        }
        if !(self.eps_low > 0.0 && self.eps_high >= self.eps_low) {
            return bad("need eps_high >= eps_low > 0");
        }
        if self.beta <= 0.0 {
            return bad("beta must be > 0");
        }
        if self.alpha == 1.0 {
            return bad("alpha must not be 1");
        }
        if self.lambda < 0.0 || self.beta_kl < 0.0 || self.omega < 0.0 {
            return bad("lambda, beta_kl and omega must be >= 0");
        }
        if self.learning_rate <= 0.0 {
            return bad("learning_rate must be > 0");
        }
        if self.group_size < 2 {
            return bad("group_size must be >= 2");
        }
        self.budget.validate()
    }
}

/// One step of one trajectory, ready for the loss.
#[derive(Debug, Clone)]
pub struct StepRecord {
    pub context: Arc<StepContext>,
    pub choice: usize,
    pub n_tokens: usize,
    pub advantage: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrajectoryRecord {
    pub steps: Vec<StepRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub surrogate: f64,
    pub kl_term: f64,
    pub entropy_term: f64,
    pub total: f64,
    pub clip_fraction: f64,
    pub n_steps: usize,
}

/// Sparse gradient over the contexts a batch touched.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    entries: BTreeMap<ContextKey, (Arc<StepContext>, Vec<f64>)>,
}

impl Gradients {
    fn add(&mut self, ctx: &Arc<StepContext>, scale: f64, dir: &[f64]) {
        let (_, g) = self
            .entries
            .entry(ctx.key.clone())
            .or_insert_with(|| (ctx.clone(), vec![0.0; dir.len()]));
        for (gi, d) in g.iter_mut().zip(dir) {
            *gi += scale * d;
        }
    }

    pub fn get(&self, key: &ContextKey) -> Option<&[f64]> {
        self.entries.get(key).map(|(_, g)| g.as_slice())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&StepContext, &[f64])> {
        self.entries.values().map(|(c, g)| (c.as_ref(), g.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn max_abs(&self) -> f64 {
        self.entries
            .values()
            .flat_map(|(_, g)| g.iter())
            .fold(0.0, |m, x| m.max(x.abs()))
    }
}

/// `ln p(choice)` and `d ln p(choice) / d logits` under `params`.
fn log_prob_and_dir(params: &PolicyParams, ctx: &StepContext, choice: usize) -> Result<(f64, Vec<f64>)> {
    let probs = params.probs(ctx)?;
    if choice >= probs.len() {
        return Err(Error::UnknownCandidate {
            choice,
            candidates: probs.len(),
        });
    }
    let t = params.sampling.temperature;
    let dir = probs
        .iter()
        .enumerate()
        .map(|(i, p)| ((if i == choice { 1.0 } else { 0.0 }) - p) / t)
        .collect();
    Ok((probs[choice].max(f64::MIN_POSITIVE).ln(), dir))
}

fn n_tokens(step: &StepRecord) -> Result<f64> {
    if step.n_tokens == 0 {
        return Err(Error::InvalidArgument("step with zero tokens".into()));
    }
    Ok(step.n_tokens as f64)
}

/// `pi_theta(s) / pi_ref(s)` on geometric-mean step probabilities.
pub fn importance_weight(
    policy: &PolicyParams,
    reference: &PolicyParams,
    ctx: &StepContext,
    choice: usize,
    n_tokens: usize,
) -> Result<f64> {
    let lr = reference.step_log_geo_prob(ctx, choice, n_tokens)?;
    let lt = policy.step_log_geo_prob(ctx, choice, n_tokens)?;
    if lr.exp() == 0.0 {
        return Err(Error::InvalidArgument("reference step probability is zero".into()));
    }
    Ok((lt - lr).exp())
}

/// `r - ln r - 1`.
pub fn kl_estimate(r: f64) -> f64 {
    r - r.ln() - 1.0
}

/// Loss and gradient of the full objective
/// `-surrogate + beta_kl * kl - omega * entropy` for `batch`.
pub fn clipped_surrogate(
    batch: &[TrajectoryRecord],
    policy: &PolicyParams,
    reference: &PolicyParams,
    cfg: &TrainConfig,
) -> Result<(LossReport, Gradients)> {
    let trajs: Vec<&TrajectoryRecord> = batch.iter().filter(|t| !t.steps.is_empty()).collect();
    if trajs.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let g_scale = 1.0 / trajs.len() as f64;
    let mut rep = LossReport::default();
    let mut clipped = 0usize;
    let mut grads = Gradients::default();
    for traj in trajs {
        let t_scale = g_scale / traj.steps.len() as f64;
        for step in &traj.steps {
            let n = n_tokens(step)?;
            let (lp, dir) = log_prob_and_dir(policy, &step.context, step.choice)?;
            let lref = reference.step_log_geo_prob(&step.context, step.choice, step.n_tokens)?;
            let lg = lp / n;
            let w = (lg - lref).exp();
            let a = step.advantage;
            let unclipped = w * a;
            let clip = w.clamp(1.0 - cfg.eps_low, 1.0 + cfg.eps_high) * a;
            let (surr, active) = if clip < unclipped {
                (clip, false)
            } else {
                (unclipped, true)
            };
            if !active {
                clipped += 1;
            }
            let r = (lref - lg).exp();
            let kl = kl_estimate(r);
            let ent = -lg;
            rep.surrogate += t_scale * surr;
            rep.kl_term += t_scale * kl;
            rep.entropy_term += t_scale * ent;
            rep.n_steps += 1;
            // d total / d lg
            let d_surr = if active { a * w } else { 0.0 };
            let d_lg = -d_surr + cfg.beta_kl * (1.0 - r) + cfg.omega;
            if d_lg != 0.0 {
                grads.add(&step.context, t_scale * d_lg / n, &dir);
            }
        }
    }
    rep.total = -rep.surrogate + cfg.beta_kl * rep.kl_term - cfg.omega * rep.entropy_term;
    rep.clip_fraction = clipped as f64 / rep.n_steps as f64;
    Ok((rep, grads))
}

/// Mean per-step KL estimate and its gradient.
pub fn kl_penalty(steps: &[StepRecord], policy: &PolicyParams, reference: &PolicyParams) -> Result<(f64, Gradients)> {
    if steps.is_empty() {
        return Ok((0.0, Gradients::default()));
    }
    let scale = 1.0 / steps.len() as f64;
    let mut total = 0.0;
    let mut grads = Gradients::default();
    for s in steps {
        let n = n_tokens(s)?;
        let (lp, dir) = log_prob_and_dir(policy, &s.context, s.choice)?;
        let lref = reference.step_log_geo_prob(&s.context, s.choice, s.n_tokens)?;
        let r = (lref - lp / n).exp();
        total += scale * kl_estimate(r);
        grads.add(&s.context, scale * (1.0 - r) / n, &dir);
    }
    Ok((total, grads))
}

/// Mean geometric-mean step surprisal and its gradient.
pub fn entropy_bonus(steps: &[StepRecord], policy: &PolicyParams) -> Result<(f64, Gradients)> {
    if steps.is_empty() {
        return Ok((0.0, Gradients::default()));
    }
    let scale = 1.0 / steps.len() as f64;
    let mut total = 0.0;
    let mut grads = Gradients::default();
    for s in steps {
        let n = n_tokens(s)?;
        let (lp, dir) = log_prob_and_dir(policy, &s.context, s.choice)?;
        total -= scale * lp / n;
        grads.add(&s.context, -scale / n, &dir);
    }
    Ok((total, grads))
}

/// `params <- params - lr * grads`. Returns the new revision.
pub fn apply_update(params: &mut PolicyParams, grads: &Gradients, learning_rate: f64) -> Result<u64> {
    for (ctx, g) in grads.iter() {
        if g.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("gradient for {:?}", ctx.key)));
        }
        if g.len() != ctx.len() {
            return Err(Error::InvalidArgument(format!(
                "gradient for {:?} has the wrong length",
                ctx.key
            )));
        }
    }
    for (ctx, g) in grads.iter() {
        let logits = params.logits_mut(ctx);
        for (l, gi) in logits.iter_mut().zip(g) {
            *l -= learning_rate * gi;
        }
    }
    Ok(params.bump_revision())
}

/// Step contexts of every non-root node of a synthetic tree.
type NodeContext = Option<(Arc<StepContext>, usize)>;

fn node_contexts(tree: &SampleTree, env: &Env) -> Result<Vec<NodeContext>> {
    let mut out = vec![None; tree.nodes.len()];
    for node in &tree.nodes[1..] {
        let parent = node.parent.expect("non-root node has a parent");
        let prefix = tree
            .prefix_symbols(parent)
            .ok_or_else(|| Error::InvalidArgument("text tree cannot be trained".into()))?;
        let sym = node
            .symbol()
            .ok_or_else(|| Error::InvalidArgument("text tree cannot be trained".into()))?;
        let ctx = StepContext::from_env(env, &tree.problem_id, &prefix);
        let choice = ctx.index_of(sym).ok_or(Error::EnvMismatch {
            problem: tree.problem_id.clone(),
            reason: format!("step {sym} is not a candidate"),
        })?;
        out[node.id] = Some((Arc::new(ctx), choice));
    }
    Ok(out)
}

fn trajectories_with(
    tree: &SampleTree,
    env: &Env,
    mut advantage: impl FnMut(usize, NodeId) -> f64,
) -> Result<Vec<TrajectoryRecord>> {
    let ctxs = node_contexts(tree, env)?;
    Ok(tree
        .trajectories
        .iter()
        .enumerate()
        .map(|(k, t)| TrajectoryRecord {
            steps: t.node_path[1..]
                .iter()
                .map(|&id| {
                    let (ctx, choice) = ctxs[id].clone().expect("context for non-root node");
                    StepRecord {
                        context: ctx,
                        choice,
                        n_tokens: tree.nodes[id].step.n_tokens(),
                        advantage: advantage(k, id),
                    }
                })
                .collect(),
        })
        .collect())
}

/// Batch with per-node step advantages.
pub fn tree_batch(tree: &SampleTree, env: &Env, records: &[AdvantageRecord]) -> Result<Vec<TrajectoryRecord>> {
    let mut by_node = vec![0.0; tree.nodes.len()];
    for r in records {
        by_node[r.node_id] = r.a_total;
    }
    trajectories_with(tree, env, |_, id| by_node[id])
}

/// Batch with one outcome advantage per trajectory.
pub fn group_batch(tree: &SampleTree, env: &Env, adv: &GroupAdvantage) -> Result<Vec<TrajectoryRecord>> {
    trajectories_with(tree, env, |k, _| adv.values[k])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{snapshot_reference, SamplingParams};
    use approx::assert_relative_eq;

    fn key(i: u16) -> ContextKey {
        ContextKey {
            problem: "p".into(),
            prefix: vec![i],
        }
    }

    fn params() -> PolicyParams {
        PolicyParams::new(SamplingParams {
            temperature: 1.0,
            top_p: 1.0,
            top_k: 20,
        })
    }

    fn step(ctx: &Arc<StepContext>, choice: usize, n: usize, a: f64) -> StepRecord {
        StepRecord {
            context: ctx.clone(),
            choice,
            n_tokens: n,
            advantage: a,
        }
    }

    #[test]
    fn weights() {
        let mut p = params();
        let ctx = StepContext::uniform(key(0), 2, 1);
        let r = snapshot_reference(&p);
        assert_eq!(importance_weight(&p, r.params(), &ctx, 0, 1).unwrap(), 1.0);
        // theta: [0.4, 0.6], ref: [0.5, 0.5]
        p.set_logits(ctx.key.clone(), vec![0.4f64.ln(), 0.6f64.ln()]).unwrap();
        assert_relative_eq!(
            importance_weight(&p, r.params(), &ctx, 0, 1).unwrap(),
            0.8,
            epsilon = 1e-12
        );
    }

    #[test]
    fn kl_examples() {
        assert_eq!(kl_estimate(1.0), 0.0);
        assert_relative_eq!(kl_estimate(2.0), 2.0 - 2f64.ln() - 1.0);
        assert!((kl_estimate(2.0) - 0.3069).abs() < 1e-4);
        for r in [1e-6, 0.1, 0.9, 1.1, 10.0, 1e6] {
            assert!(kl_estimate(r) >= 0.0);
        }
    }

    #[test]
    fn entropy_examples() {
        let mut p = params();
        let ctx = Arc::new(StepContext::uniform(key(0), 2, 1));
        assert_relative_eq!(entropy_bonus(&[step(&ctx, 0, 1, 0.0)], &p).unwrap().0, 2f64.ln());
        p.set_logits(ctx.key.clone(), vec![800.0, 0.0]).unwrap();
        assert_eq!(entropy_bonus(&[step(&ctx, 0, 1, 0.0)], &p).unwrap().0, 0.0);
        let mut last = f64::INFINITY;
        for l in [0.0, 0.5, 1.0, 2.0] {
            p.set_logits(ctx.key.clone(), vec![l, 0.0]).unwrap();
            let e = entropy_bonus(&[step(&ctx, 0, 1, 0.0)], &p).unwrap().0;
            assert!(e < last);
            last = e;
        }
    }

    #[test]
    fn fresh_snapshot_surrogate_is_mean_advantage() {
        let p = params();
        let r = snapshot_reference(&p);
        let ctx = Arc::new(StepContext::uniform(key(0), 3, 2));
        let batch = vec![
            TrajectoryRecord {
                steps: vec![step(&ctx, 0, 2, 1.0), step(&ctx, 1, 2, -0.5)],
            },
            TrajectoryRecord {
                steps: vec![step(&ctx, 2, 2, 0.25)],
            },
        ];
        let (rep, _) = clipped_surrogate(&batch, &p, r.params(), &TrainConfig::default()).unwrap();
        assert_relative_eq!(rep.surrogate, (0.25 + 0.25) / 2.0, epsilon = 1e-15);
        assert_eq!(rep.clip_fraction, 0.0);
        assert_eq!(rep.kl_term, 0.0);
    }

    #[test]
    fn clip_binds_above_one_plus_eps() {
        let mut p = params();
        let r = snapshot_reference(&p);
        let ctx = Arc::new(StepContext::uniform(key(0), 2, 1));
        // w = 0.75 / 0.5 = 1.5
        p.set_logits(ctx.key.clone(), vec![0.75f64.ln(), 0.25f64.ln()]).unwrap();
        let batch = vec![TrajectoryRecord {
            steps: vec![step(&ctx, 0, 1, 2.0)],
        }];
        let cfg = TrainConfig {
            beta_kl: 0.0,
            ..TrainConfig::default()
        };
        let (rep, g) = clipped_surrogate(&batch, &p, r.params(), &cfg).unwrap();
        assert_relative_eq!(rep.surrogate, 1.2 * 2.0, epsilon = 1e-12);
        assert_eq!(rep.clip_fraction, 1.0);
        assert!(g.is_empty());
    }

    #[test]
    fn snapshot_gradient_is_vanilla_policy_gradient() {
        let mut p = params();
        let ctx = Arc::new(StepContext::uniform(key(0), 3, 1));
        p.set_logits(ctx.key.clone(), vec![0.3, -0.1, 0.2]).unwrap();
        let r = snapshot_reference(&p);
        let batch = vec![TrajectoryRecord {
            steps: vec![step(&ctx, 1, 1, 0.7)],
        }];
        let (_, g) = clipped_surrogate(&batch, &p, r.params(), &TrainConfig::default()).unwrap();
        let pg = crate::policy::grad_log_step_prob(&p, &ctx, 1).unwrap();
        for (a, b) in g.get(&ctx.key).unwrap().iter().zip(pg) {
            assert_relative_eq!(*a, -0.7 * b, epsilon = 1e-15);
        }
    }

    #[test]
    fn update_rules() {
        let mut p = params();
        let ctx = Arc::new(StepContext::uniform(key(0), 2, 1));
        let before = p.clone();
        let rev = apply_update(&mut p, &Gradients::default(), 0.1).unwrap();
        assert_eq!(rev, 1);
        assert_eq!(p.probs(&ctx).unwrap(), before.probs(&ctx).unwrap());

        let mut g = Gradients::default();
        g.add(&ctx, 1.0, &[0.5, -2.0]);
        apply_update(&mut p, &g, 0.1).unwrap();
        assert_relative_eq!(p.stored(&ctx.key).unwrap()[0], -0.05, epsilon = 1e-15);
        assert_relative_eq!(p.stored(&ctx.key).unwrap()[1], 0.2, epsilon = 1e-15);

        let mut bad = Gradients::default();
        bad.add(&ctx, 1.0, &[f64::NAN, 0.0]);
        let snapshot = p.clone();
        assert!(matches!(apply_update(&mut p, &bad, 0.1), Err(Error::NonFinite(_))));
        assert_eq!(p, snapshot);
    }

    #[test]
    fn positive_advantage_raises_probability_until_clipped() {
        let mut p = params();
        let ctx = Arc::new(StepContext::uniform(key(0), 4, 1));
        let r = snapshot_reference(&p);
        let batch = vec![TrajectoryRecord {
            steps: vec![step(&ctx, 2, 1, 1.0)],
        }];
        let cfg = TrainConfig {
            learning_rate: 0.1,
            ..TrainConfig::default()
        };
        let mut last = p.probs(&ctx).unwrap()[2];
        for _ in 0..10 {
            let (rep, g) = clipped_surrogate(&batch, &p, r.params(), &cfg).unwrap();
            apply_update(&mut p, &g, cfg.learning_rate).unwrap();
            let now = p.probs(&ctx).unwrap()[2];
            if rep.clip_fraction > 0.0 {
                assert!(now <= last + 1e-12);
                break;
            }
            assert!(now > last);
            last = now;
        }
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            eps_high: 0.1,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            beta: 0.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn unknown_choice_is_an_error() {
        let p = params();
        let ctx = Arc::new(StepContext::uniform(key(0), 2, 1));
        let batch = vec![TrajectoryRecord {
            steps: vec![step(&ctx, 5, 1, 1.0)],
        }];
        assert!(clipped_surrogate(&batch, &p, &p, &TrainConfig::default()).is_err());
    }
}
