//! Step-level stochastic policies.
//!
//! The simulated policy is tabular: every context (problem id plus the exact
//! prefix of step ids) owns a logit vector over the candidate steps the
//! environment offers there. Contexts that were never updated fall back to
//! the environment's prior logits, which are zero unless a prior is
//! configured.
//!
//! A simulated step spans several tokens. The first token carries the step
//! decision and the remaining tokens are deterministic continuations, so a
//! step of `n` tokens chosen with probability `p` records token log-probs
//! `[ln p, 0, ..., 0]` and a geometric-mean probability of `p^(1/n)`.

pub mod remote;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::env::{Env, StepId};
use crate::seed::Rng;
use crate::{Error, Result};

/// Sampling parameters; the defaults are the recommended decoding settings
/// (temperature 0.7, top-p 0.95, top-k 20).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingParams {
    pub temperature: f64,
    pub top_p: f64,
    pub top_k: usize,
}

impl Default for SamplingParams {
    fn default() -> Self {
        SamplingParams {
            temperature: 0.7,
            top_p: 0.95,
            top_k: 20,
        }
    }
}

impl SamplingParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "temperature must be > 0, got {}",
                self.temperature
            )));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "top_p must be in (0, 1], got {}",
                self.top_p
            )));
        }
        if self.top_k == 0 {
            return Err(Error::InvalidArgument("top_k must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ContextKey {
    pub problem: String,
    pub prefix: Vec<StepId>,
}

/// Everything the policy needs to act in one context.
#[derive(Debug, Clone, PartialEq)]
pub struct StepContext {
    pub key: ContextKey,
    pub candidates: Vec<StepId>,
    /// Logits used while the context has no stored entry.
    pub base_logits: Vec<f64>,
    pub token_lens: Vec<usize>,
}

impl StepContext {
    pub fn from_env(env: &Env, problem: &str, prefix: &[StepId]) -> Self {
        let candidates = env.candidates(prefix);
        let token_lens = candidates.iter().map(|&c| env.token_len(prefix, c)).collect();
        StepContext {
            key: ContextKey {
                problem: problem.to_string(),
                prefix: prefix.to_vec(),
            },
            base_logits: env.base_logits(prefix),
            candidates,
            token_lens,
        }
    }

    /// A context with zero prior logits and `tokens` tokens per step.
    pub fn uniform(key: ContextKey, n: usize, tokens: usize) -> Self {
        StepContext {
            key,
            candidates: (0..n as StepId).collect(),
            base_logits: vec![0.0; n],
            token_lens: vec![tokens; n],
        }
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn index_of(&self, step: StepId) -> Option<usize> {
        self.candidates.iter().position(|&c| c == step)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepContent {
    Symbol(StepId),
    Text(String),
}

impl StepContent {
    pub fn symbol(&self) -> Option<StepId> {
        match self {
            StepContent::Symbol(s) => Some(*s),
            StepContent::Text(_) => None,
        }
    }

    pub fn render(&self) -> String {
        match self {
            StepContent::Symbol(s) => s.to_string(),
            StepContent::Text(t) => t.clone(),
        }
    }
}

/// One generated step with its token log-probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepSample {
    pub content: StepContent,
    pub token_logprobs: Vec<f64>,
    pub geo_mean_prob: f64,
}

impl StepSample {
    pub fn new(content: StepContent, token_logprobs: Vec<f64>) -> Result<Self> {
        let geo_mean_prob = geo_mean_prob(&token_logprobs)?;
        Ok(StepSample {
            content,
            token_logprobs,
            geo_mean_prob,
        })
    }

    /// The root "step": the prompt itself. It has no generated tokens.
    pub fn prompt(text: impl Into<String>) -> Self {
        StepSample {
            content: StepContent::Text(text.into()),
            token_logprobs: Vec::new(),
            geo_mean_prob: 1.0,
        }
    }

    pub fn n_tokens(&self) -> usize {
        self.token_logprobs.len()
    }
}

/// Geometric mean of token probabilities, `exp(mean(logprobs))`.
pub fn geo_mean_prob(token_logprobs: &[f64]) -> Result<f64> {
    if token_logprobs.is_empty() {
        return Err(Error::InvalidArgument("geometric mean of an empty step".into()));
    }
    if let Some(bad) = token_logprobs.iter().find(|l| !(l.is_finite() && **l <= 0.0)) {
        return Err(Error::InvalidArgument(format!(
            "token log-probability {bad} is not in (-inf, 0]"
        )));
    }
    let mean = token_logprobs.iter().sum::<f64>() / token_logprobs.len() as f64;
    Ok(mean.exp())
}

/// Temperature softmax.
pub fn softmax(logits: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::EmptyCandidates);
    }
    if logits.iter().any(|l| !l.is_finite()) {
        return Err(Error::NonFinite("logits".into()));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| ((l - max) / temperature).exp()).collect();
    let z: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / z).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Categorical {
    pub probs: Vec<f64>,
}

impl Categorical {
    pub fn sample(&self, rng: &mut Rng) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut last = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > 0.0 {
                acc += p;
                last = i;
                if u < acc {
                    return i;
                }
            }
        }
        last
    }
}

/// Applies top-k then top-p truncation and renormalises.
pub fn truncate(probs: &[f64], top_k: usize, top_p: f64) -> Vec<f64> {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    // stable: ties keep index order
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]));
    let k = top_k.min(order.len()).max(1);
    let kept_k = &order[..k];
    let mass_k: f64 = kept_k.iter().map(|&i| probs[i]).sum();
    let mut keep = Vec::with_capacity(k);
    let mut acc = 0.0;
    for &i in kept_k {
        keep.push(i);
        acc += probs[i] / mass_k;
        if acc >= top_p {
            break;
        }
    }
    let mass: f64 = keep.iter().map(|&i| probs[i]).sum();
    let mut out = vec![0.0; probs.len()];
    for &i in &keep {
        out[i] = probs[i] / mass;
    }
    out
}

/// Tabular policy parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    pub sampling: SamplingParams,
    logits: BTreeMap<ContextKey, Vec<f64>>,
    revision: u64,
}

impl Default for PolicyParams {
    fn default() -> Self {
        PolicyParams::new(SamplingParams::default())
    }
}

impl PolicyParams {
    pub fn new(sampling: SamplingParams) -> Self {
        PolicyParams {
            sampling,
            logits: BTreeMap::new(),
            revision: 0,
        }
    }

    pub fn revision(&self) -> u64 {
        self.revision
    }

    pub(crate) fn bump_revision(&mut self) -> u64 {
        self.revision += 1;
        self.revision
    }

    /// Logits in effect for `ctx`: the stored vector or the context prior.
    pub fn logits_for<'a>(&'a self, ctx: &'a StepContext) -> &'a [f64] {
        self.logits.get(&ctx.key).map_or(&ctx.base_logits, Vec::as_slice)
    }

    pub fn stored(&self, key: &ContextKey) -> Option<&[f64]> {
        self.logits.get(key).map(Vec::as_slice)
    }

    /// Mutable logits for `ctx`, materialising the prior on first touch.
    pub fn logits_mut(&mut self, ctx: &StepContext) -> &mut Vec<f64> {
        self.logits
            .entry(ctx.key.clone())
            .or_insert_with(|| ctx.base_logits.clone())
    }

    pub fn set_logits(&mut self, key: ContextKey, logits: Vec<f64>) -> Result<()> {
        if logits.iter().any(|l| !l.is_finite()) {
            return Err(Error::NonFinite(format!("logits for {key:?}")));
        }
        self.logits.insert(key, logits);
        Ok(())
    }

    pub fn contexts(&self) -> impl Iterator<Item = (&ContextKey, &Vec<f64>)> {
        self.logits.iter()
    }

    pub fn n_contexts(&self) -> usize {
        self.logits.len()
    }

    fn check<'a>(&'a self, ctx: &'a StepContext) -> Result<&'a [f64]> {
        let logits = self.logits_for(ctx);
        if logits.len() != ctx.len() {
            return Err(Error::InvalidArgument(format!(
                "context {:?} stores {} logits for {} candidates",
                ctx.key,
                logits.len(),
                ctx.len()
            )));
        }
        Ok(logits)
    }

    /// Untruncated step probabilities `softmax(logits / T)`.
    pub fn probs(&self, ctx: &StepContext) -> Result<Vec<f64>> {
        softmax(self.check(ctx)?, self.sampling.temperature)
    }

    /// `ln pi(step) / n_tokens`: the log geometric-mean step probability.
    pub fn step_log_geo_prob(&self, ctx: &StepContext, choice: usize, n_tokens: usize) -> Result<f64> {
        let probs = self.probs(ctx)?;
        let p = *probs.get(choice).ok_or(Error::UnknownCandidate {
            choice,
            candidates: ctx.len(),
        })?;
        if n_tokens == 0 {
            return Err(Error::InvalidArgument("step with zero tokens".into()));
        }
        Ok(p.max(f64::MIN_POSITIVE).ln() / n_tokens as f64)
    }
}

/// The truncated sampling distribution for `ctx`.
pub fn step_distribution(params: &PolicyParams, ctx: &StepContext) -> Result<Categorical> {
    let probs = params.probs(ctx)?;
    Ok(Categorical {
        probs: truncate(&probs, params.sampling.top_k, params.sampling.top_p),
    })
}

/// Draws one step. Returns the candidate index and the sample, whose token
/// log-probs are taken from the untruncated distribution.
pub fn sample_step(params: &PolicyParams, ctx: &StepContext, rng: &mut Rng) -> Result<(usize, StepSample)> {
    if ctx.is_empty() {
        return Err(Error::EmptyCandidates);
    }
    let probs = params.probs(ctx)?;
    let dist = Categorical {
        probs: truncate(&probs, params.sampling.top_k, params.sampling.top_p),
    };
    let choice = dist.sample(rng);
    let n = ctx.token_lens[choice].max(1);
    let mut lp = vec![0.0; n];
    lp[0] = probs[choice].max(f64::MIN_POSITIVE).ln();
    let sample = StepSample::new(StepContent::Symbol(ctx.candidates[choice]), lp)?;
    Ok((choice, sample))
}

/// `d/d logits log pi(choice | ctx) = (onehot(choice) - softmax(logits/T)) / T`.
pub fn grad_log_step_prob(params: &PolicyParams, ctx: &StepContext, choice: usize) -> Result<Vec<f64>> {
    let probs = params.probs(ctx)?;
    if choice >= probs.len() {
        return Err(Error::UnknownCandidate {
            choice,
            candidates: probs.len(),
        });
    }
    let t = params.sampling.temperature;
    Ok(probs
        .iter()
        .enumerate()
        .map(|(i, p)| ((if i == choice { 1.0 } else { 0.0 }) - p) / t)
        .collect())
}

/// Frozen copy of the policy at a given revision.
#[derive(Debug, Clone)]
pub struct ReferenceSnapshot {
    params: Arc<PolicyParams>,
}

impl ReferenceSnapshot {
    pub fn params(&self) -> &PolicyParams {
        &self.params
    }

    pub fn revision(&self) -> u64 {
        self.params.revision
    }
}

pub fn snapshot_reference(params: &PolicyParams) -> ReferenceSnapshot {
    ReferenceSnapshot {
        params: Arc::new(params.clone()),
    }
}

const CHECKPOINT_FORMAT: &str = "ibtpo-policy";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointContext {
    problem: String,
    prefix: Vec<StepId>,
    logits: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Checkpoint {
    format: String,
    version: u32,
    revision: u64,
    sampling: SamplingParams,
    contexts: Vec<CheckpointContext>,
}

pub fn checkpoint_to_string(params: &PolicyParams) -> String {
    let ck = Checkpoint {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        revision: params.revision,
        sampling: params.sampling,
        contexts: params
            .logits
            .iter()
            .map(|(k, v)| CheckpointContext {
                problem: k.problem.clone(),
                prefix: k.prefix.clone(),
                logits: v.clone(),
            })
            .collect(),
    };
    serde_json::to_string_pretty(&ck).expect("checkpoint serializes")
}

pub fn checkpoint_from_str(text: &str) -> Result<PolicyParams> {
    let ck: Checkpoint = serde_json::from_str(text).map_err(|e| Error::Format(format!("checkpoint: {e}")))?;
    if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint {} v{}",
            ck.format, ck.version
        )));
    }
    ck.sampling.validate()?;
    let mut params = PolicyParams::new(ck.sampling);
    params.revision = ck.revision;
    for c in ck.contexts {
        if c.logits.is_empty() {
            return Err(Error::Format("checkpoint context with no logits".into()));
        }
        let key = ContextKey {
            problem: c.problem,
            prefix: c.prefix,
        };
        if params.logits.contains_key(&key) {
            return Err(Error::Format(format!("duplicate checkpoint context {key:?}")));
        }
        params.set_logits(key, c.logits)?;
    }
    Ok(params)
}

pub fn save_checkpoint(params: &PolicyParams, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, checkpoint_to_string(params)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<PolicyParams> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    checkpoint_from_str(&text)
}
