//! Synthetic tree-structured reasoning environments.
//!
//! An environment is a rooted tree of depth `max_depth` in which every
//! internal prefix offers a fixed set of candidate steps. A planted answer
//! decides which complete paths are correct, so every leaf can be verified
//! exhaustively. Environments are immutable after construction.

use std::collections::{BTreeSet, HashSet};
use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::seed::{self, hash_str, mix64, unit};
use crate::{Error, Result};

pub type StepId = u16;

/// The step delimiter used by chain-of-thought text.
pub const DEFAULT_DELIMITER: &str = "\n\n";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Problem {
    pub id: String,
    pub prompt: String,
    pub answer: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tags: Vec<String>,
}

/// Outcome reward in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Reward(f64);

impl Reward {
    pub const ZERO: Reward = Reward(0.0);
    pub const ONE: Reward = Reward(1.0);

    pub fn new(value: f64) -> Result<Self> {
        if (0.0..=1.0).contains(&value) {
            Ok(Reward(value))
        } else {
            Err(Error::InvalidArgument(format!("reward {value} outside [0, 1]")))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }

    pub fn is_binary(self) -> bool {
        self.0 == 0.0 || self.0 == 1.0
    }
}

impl TryFrom<f64> for Reward {
    type Error = Error;
    fn try_from(v: f64) -> Result<Self> {
        Reward::new(v)
    }
}

impl From<Reward> for f64 {
    fn from(r: Reward) -> f64 {
        r.0
    }
}

#[derive(Deserialize)]
struct RawProblem {
    id: Option<String>,
    prompt: Option<String>,
    answer: Option<String>,
    #[serde(default)]
    tags: Vec<String>,
}

/// Parses line-delimited problem records. Blank lines are skipped; line
/// numbers in errors are 1-based.
pub fn parse_problems(text: &str) -> Result<Vec<Problem>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawProblem = serde_json::from_str(line).map_err(|e| Error::MalformedLine {
            line: line_no,
            reason: e.to_string(),
        })?;
        let field = |v: Option<String>, name: &str| {
            v.ok_or_else(|| Error::MalformedLine {
                line: line_no,
                reason: format!("missing field `{name}`"),
            })
        };
        let id = field(raw.id, "id")?;
        let prompt = field(raw.prompt, "prompt")?;
        let answer = field(raw.answer, "answer")?;
        if answer.is_empty() {
            return Err(Error::MalformedLine {
                line: line_no,
                reason: "empty `answer`".into(),
            });
        }
        if !seen.insert(id.clone()) {
            return Err(Error::DuplicateId { id, line: line_no });
        }
        out.push(Problem {
            id,
            prompt,
            answer,
            tags: raw.tags,
        });
    }
    Ok(out)
}

pub fn load_problems(path: impl AsRef<Path>) -> Result<Vec<Problem>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_problems(&text)
}

/// Splits text into steps on `delimiter`, dropping empty segments.
pub fn split_steps<'a>(text: &'a str, delimiter: &str) -> Vec<&'a str> {
    if delimiter.is_empty() {
        return if text.is_empty() { vec![] } else { vec![text] };
    }
    text.split(delimiter).filter(|s| !s.is_empty()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenRange {
    pub min: usize,
    pub max: usize,
}

impl Default for TokenRange {
    fn default() -> Self {
        TokenRange { min: 1, max: 1 }
    }
}

/// Which complete paths are correct.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AnswerStructure {
    /// `count` distinct random full-depth paths are correct.
    PlantedPaths { count: usize },
    /// Between `min` and `max` depths carry a designated symbol; a path is
    /// correct iff it matches every designated symbol.
    CriticalSteps { min: usize, max: usize },
    /// Every complete path is correct.
    AllCorrect,
    /// Each prefix offers exactly one candidate; the single path is correct.
    Chain,
}

/// Base-model prior over candidate steps.
///
/// With both fields zero every unseen context starts uniform. `hint` is added
/// to the logits of candidates that keep a correct completion reachable;
/// `noise` scales a hashed perturbation in `[-noise, noise]`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PriorSpec {
    #[serde(default)]
    pub hint: f64,
    #[serde(default)]
    pub noise: f64,
}

impl PriorSpec {
    pub fn is_zero(&self) -> bool {
        self.hint == 0.0 && self.noise == 0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvSpec {
    pub step_vocab_size: u16,
    #[serde(default)]
    pub tokens_per_step: TokenRange,
    pub max_depth: usize,
    pub answer_structure: AnswerStructure,
    #[serde(default, skip_serializing_if = "PriorSpec::is_zero")]
    pub prior: PriorSpec,
    pub seed: u64,
}

impl EnvSpec {
    pub fn new(step_vocab_size: u16, max_depth: usize, answer_structure: AnswerStructure, seed: u64) -> Self {
        EnvSpec {
            step_vocab_size,
            tokens_per_step: TokenRange::default(),
            max_depth,
            answer_structure,
            prior: PriorSpec::default(),
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidEnvSpec(m));
        if self.max_depth < 2 {
            return bad(format!("max_depth must be >= 2, got {}", self.max_depth));
        }
        if self.step_vocab_size < 2 {
            return bad(format!("step_vocab_size must be >= 2, got {}", self.step_vocab_size));
        }
        let TokenRange { min, max } = self.tokens_per_step;
        if min == 0 || min > max {
            return bad(format!("tokens_per_step range [{min}, {max}] is empty or starts at 0"));
        }
        if !self.prior.hint.is_finite() || !self.prior.noise.is_finite() || self.prior.noise < 0.0 {
            return bad("prior hint/noise must be finite and noise non-negative".into());
        }
        match self.answer_structure {
            AnswerStructure::PlantedPaths { count } => {
                if count == 0 {
                    return bad("planted path count must be >= 1".into());
                }
                let leaves = (self.step_vocab_size as f64).powi(self.max_depth as i32);
                if count as f64 > leaves {
                    return bad(format!("cannot plant {count} distinct paths among {leaves} leaves"));
                }
            }
            AnswerStructure::CriticalSteps { min, max } => {
                if min == 0 || min > max || max > self.max_depth {
                    return bad(format!(
                        "critical step range [{min}, {max}] must satisfy 1 <= min <= max <= max_depth"
                    ));
                }
            }
            AnswerStructure::AllCorrect | AnswerStructure::Chain => {}
        }
        Ok(())
    }

    /// The spec for the `index`-th member of a problem family. Index 0 is the
    /// spec itself.
    pub fn instance(&self, index: u64) -> EnvSpec {
        let mut spec = self.clone();
        if index > 0 {
            spec.seed = seed::derive(self.seed, &[0x5u64, index]);
        }
        spec
    }
}

/// The planted answer of an environment, exposed so independent checkers can
/// evaluate correctness without going through [`Env::verify`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PlantedAnswer {
    Paths(BTreeSet<Vec<StepId>>),
    /// Designated symbol per depth, `None` where the depth is unconstrained.
    Critical(Vec<Option<StepId>>),
    All,
    Chain(Vec<StepId>),
}

#[derive(Debug, Clone)]
pub struct Env {
    spec: EnvSpec,
    fingerprint: u64,
    answer: PlantedAnswer,
    canonical: String,
}

const ANSWER_STREAM: u64 = 0xA45;
const NOISE_SALT: u64 = 0x006E_015E;
const TOKEN_SALT: u64 = 0x0070_C34E;

/// Builds a deterministic environment from its spec.
pub fn make_env(spec: EnvSpec) -> Result<Env> {
    spec.validate()?;
    let mut rng = seed::rng(spec.seed, &[ANSWER_STREAM]);
    let v = spec.step_vocab_size;
    let d = spec.max_depth;
    let answer = match spec.answer_structure {
        AnswerStructure::PlantedPaths { count } => {
            let mut paths = BTreeSet::new();
            while paths.len() < count {
                let p: Vec<StepId> = (0..d).map(|_| rng.random_range(0..v)).collect();
                paths.insert(p);
            }
            PlantedAnswer::Paths(paths)
        }
        AnswerStructure::CriticalSteps { min, max } => {
            let k = rng.random_range(min..=max);
            let mut depths: Vec<usize> = (0..d).collect();
            depths.shuffle(&mut rng);
            let mut marks = vec![None; d];
            for &depth in &depths[..k] {
                marks[depth] = Some(rng.random_range(0..v));
            }
            PlantedAnswer::Critical(marks)
        }
        AnswerStructure::AllCorrect => PlantedAnswer::All,
        AnswerStructure::Chain => PlantedAnswer::Chain((0..d).map(|_| rng.random_range(0..v)).collect()),
    };
    let canonical = canonical_answer(&answer);
    let spec_json = serde_json::to_string(&spec).expect("env spec serializes");
    let fingerprint = hash_str(&spec_json);
    Ok(Env {
        spec,
        fingerprint,
        answer,
        canonical,
    })
}

fn join_path(p: &[StepId]) -> String {
    p.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(".")
}

fn canonical_answer(answer: &PlantedAnswer) -> String {
    match answer {
        PlantedAnswer::Paths(paths) => paths.iter().map(|p| join_path(p)).collect::<Vec<_>>().join("|"),
        PlantedAnswer::Critical(marks) => marks
            .iter()
            .map(|m| m.map_or_else(|| "*".to_string(), |s| s.to_string()))
            .collect::<Vec<_>>()
            .join("."),
        PlantedAnswer::All => "*".into(),
        PlantedAnswer::Chain(p) => join_path(p),
    }
}

fn hash_prefix(fingerprint: u64, prefix: &[StepId]) -> u64 {
    prefix.iter().fold(mix64(fingerprint ^ prefix.len() as u64), |h, &s| {
        mix64(h ^ (u64::from(s) + 1))
    })
}

impl Env {
    pub fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    pub fn max_depth(&self) -> usize {
        self.spec.max_depth
    }

    pub fn planted(&self) -> &PlantedAnswer {
        &self.answer
    }

    /// Canonical rendering of the correct-path set; doubles as the problem
    /// answer.
    pub fn canonical_answer(&self) -> &str {
        &self.canonical
    }

    pub fn candidates(&self, prefix: &[StepId]) -> Vec<StepId> {
        let d = prefix.len();
        if d >= self.spec.max_depth {
            return Vec::new();
        }
        match &self.answer {
            PlantedAnswer::Chain(chain) => vec![chain[d]],
            _ => (0..self.spec.step_vocab_size).collect(),
        }
    }

    pub fn is_terminal(&self, prefix: &[StepId]) -> bool {
        prefix.len() >= self.spec.max_depth
    }

    /// Number of tokens step `step` occupies after `prefix`.
    pub fn token_len(&self, prefix: &[StepId], step: StepId) -> usize {
        let TokenRange { min, max } = self.spec.tokens_per_step;
        if min == max {
            return min;
        }
        let h = mix64(hash_prefix(self.fingerprint, prefix) ^ mix64(u64::from(step) ^ TOKEN_SALT));
        min + (h % (max - min + 1) as u64) as usize
    }

    /// Whether a correct completion of `prefix` exists.
    pub fn is_viable(&self, prefix: &[StepId]) -> bool {
        if prefix.len() > self.spec.max_depth {
            return false;
        }
        match &self.answer {
            PlantedAnswer::Paths(paths) => paths.iter().any(|p| p.starts_with(prefix)),
            PlantedAnswer::Critical(marks) => prefix.iter().zip(marks).all(|(s, m)| m.is_none_or(|want| want == *s)),
            PlantedAnswer::All => true,
            PlantedAnswer::Chain(chain) => chain.starts_with(prefix),
        }
    }

    pub fn is_correct(&self, path: &[StepId]) -> bool {
        path.len() == self.spec.max_depth && self.is_viable(path)
    }

    /// Prior logits over `candidates(prefix)`.
    pub fn base_logits(&self, prefix: &[StepId]) -> Vec<f64> {
        let cands = self.candidates(prefix);
        let prior = self.spec.prior;
        if prior.is_zero() {
            return vec![0.0; cands.len()];
        }
        let base = hash_prefix(self.fingerprint, prefix);
        let mut ext = prefix.to_vec();
        cands
            .iter()
            .map(|&c| {
                ext.push(c);
                let hint = if prior.hint != 0.0 && self.is_viable(&ext) {
                    prior.hint
                } else {
                    0.0
                };
                ext.pop();
                let u = unit(mix64(base ^ mix64(u64::from(c) ^ NOISE_SALT)));
                hint + prior.noise * (2.0 * u - 1.0)
            })
            .collect()
    }

    fn check_problem(&self, problem: &Problem) -> Result<()> {
        if problem.answer != self.canonical {
            return Err(Error::EnvMismatch {
                problem: problem.id.clone(),
                reason: format!("answer `{}` does not match this environment", problem.answer),
            });
        }
        Ok(())
    }

    /// Outcome verifier. Truncated or incomplete paths score 0.
    pub fn verify(&self, path: &[StepId], truncated: bool, problem: &Problem) -> Result<Reward> {
        self.check_problem(problem)?;
        if path.len() > self.spec.max_depth {
            return Err(Error::EnvMismatch {
                problem: problem.id.clone(),
                reason: format!("path of length {} exceeds max depth", path.len()),
            });
        }
        for i in 0..path.len() {
            if !self.candidates(&path[..i]).contains(&path[i]) {
                return Err(Error::EnvMismatch {
                    problem: problem.id.clone(),
                    reason: format!("step {} at depth {i} is not a candidate", path[i]),
                });
            }
        }
        if truncated || path.len() < self.spec.max_depth {
            return Ok(Reward::ZERO);
        }
        Ok(if self.is_correct(path) {
            Reward::ONE
        } else {
            Reward::ZERO
        })
    }

    pub fn problem(&self, id: impl Into<String>) -> Problem {
        Problem {
            id: id.into(),
            prompt: format!(
                "env {:016x}: choose {} steps over {} symbols",
                self.fingerprint, self.spec.max_depth, self.spec.step_vocab_size
            ),
            answer: self.canonical.clone(),
            tags: vec!["synthetic".into(), format!("env:{:016x}", self.fingerprint)],
        }
    }
}

/// A problem paired with the environment that verifies it.
#[derive(Debug, Clone)]
pub struct Task {
    pub problem: Problem,
    pub env: Arc<Env>,
}

/// Builds `n` problems from the family rooted at `spec`.
pub fn build_suite(spec: &EnvSpec, n: usize) -> Result<Vec<Task>> {
    (0..n)
        .map(|i| {
            let env = make_env(spec.instance(i as u64))?;
            let problem = env.problem(format!("p{i:04}"));
            Ok(Task {
                problem,
                env: Arc::new(env),
            })
        })
        .collect()
}

/// Extracts the final answer from generated text: the content of the last
/// `\boxed{...}` if present, otherwise the last non-empty line.
pub fn extract_answer(text: &str) -> Option<&str> {
    if let Some(start) = text.rfind("\\boxed{") {
        let body = &text[start + "\\boxed{".len()..];
        let mut depth = 1usize;
        for (i, ch) in body.char_indices() {
            match ch {
                '{' => depth += 1,
                '}' => {
                    depth -= 1;
                    if depth == 0 {
                        return Some(body[..i].trim());
                    }
                }
                _ => {}
            }
        }
        return None;
    }
    text.lines().rev().map(str::trim).find(|l| !l.is_empty())
}

/// Exact-match verifier for text trajectories.
pub fn verify_text(text: &str, truncated: bool, problem: &Problem) -> Reward {
    if truncated {
        return Reward::ZERO;
    }
    match extract_answer(text) {
        Some(a) if a == problem.answer.trim() => Reward::ONE,
        _ => Reward::ZERO,
    }
}
