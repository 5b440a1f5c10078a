//! The sampling tree and IB-guided expansion.
//!
//! Iteration 1 samples `b0` independent trajectories from the root. Every
//! later iteration scores the non-leaf nodes, picks the top `k`, and samples
//! `b` fresh continuations from each. Trajectories share their prefixes, so
//! tokens of a re-used prefix are generated once.

use std::fs;
use std::path::Path;

use rand::seq::index::sample as sample_indices;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::{self, Env, Problem, Reward, StepId};
use crate::ibscore::{self, BranchStat, DensityEstimate, IBScoreEstimate};
use crate::policy::remote::{step_samples, RemoteClient, Transport};
use crate::policy::{self, PolicyParams, SamplingParams, StepContext, StepSample};
use crate::seed::{self, Rng};
use crate::{Error, Result};

pub type NodeId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingBudget {
    pub b0: usize,
    /// Number of sampling iterations `L`.
    pub iterations: usize,
    /// Nodes branched per iteration `K`.
    pub branch_nodes: usize,
    /// Continuations per branched node `B`.
    pub branches: usize,
    pub max_depth: usize,
    pub max_tokens_per_traj: usize,
    /// Optional cap on tokens generated for the whole tree.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_tree_tokens: Option<usize>,
}

impl Default for SamplingBudget {
    fn default() -> Self {
        SamplingBudget {
            b0: 4,
            iterations: 9,
            branch_nodes: 1,
            branches: 1,
            max_depth: 64,
            max_tokens_per_traj: 4096,
            max_tree_tokens: None,
        }
    }
}

impl SamplingBudget {
    pub fn new(b0: usize, iterations: usize, branch_nodes: usize, branches: usize) -> Self {
        SamplingBudget {
            b0,
            iterations,
            branch_nodes,
            branches,
            ..SamplingBudget::default()
        }
    }

    /// Budget for `g` independent trajectories.
    pub fn independent(g: usize) -> Self {
        SamplingBudget::new(g, 1, 1, 1)
    }

    /// `G = b0 + (L - 1) * K * B`.
    pub fn group_size(&self) -> usize {
        self.b0 + self.iterations.saturating_sub(1) * self.branch_nodes * self.branches
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("b0", self.b0),
            ("iterations", self.iterations),
            ("branch_nodes", self.branch_nodes),
            ("branches", self.branches),
            ("max_depth", self.max_depth),
            ("max_tokens_per_traj", self.max_tokens_per_traj),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(Error::InvalidArgument(format!("budget.{name} must be >= 1")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeNode {
    pub id: NodeId,
    pub parent: Option<NodeId>,
    pub children: Vec<NodeId>,
    pub step: StepSample,
    pub depth: usize,
    pub density: DensityEstimate,
    /// Tally of trajectories ending exactly here.
    pub terminal: DensityEstimate,
    pub is_leaf: bool,
    pub truncated: bool,
    /// Tokens from the root through this node.
    pub path_tokens: usize,
    pub ib_score: Option<IBScoreEstimate>,
}

impl TreeNode {
    pub fn symbol(&self) -> Option<StepId> {
        self.step.content.symbol()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub node_path: Vec<NodeId>,
    pub reward: Reward,
    pub new_tokens: usize,
    pub truncated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleTree {
    pub problem_id: String,
    pub nodes: Vec<TreeNode>,
    pub trajectories: Vec<Trajectory>,
    pub generated_tokens: usize,
    pub budget: SamplingBudget,
    /// Set when sampling stopped before the full trajectory count.
    pub short: bool,
}

/// Step budget left for one rollout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Limits {
    pub max_steps: usize,
    pub max_tokens: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub steps: Vec<StepSample>,
    pub truncated: bool,
    pub reward: Reward,
}

/// Produces continuations of a prefix. `prefix` excludes the root prompt.
pub trait Generator: Sync {
    fn rollouts(
        &self,
        problem: &Problem,
        prefix: &[&StepSample],
        limits: Limits,
        n: usize,
        rng: &mut Rng,
    ) -> Result<Vec<Rollout>>;

    /// Exact next-step entropy at `prefix`, when the generator can compute it.
    fn next_step_entropy(&self, _problem: &Problem, _prefix: &[&StepSample]) -> Option<f64> {
        None
    }
}

/// Samples steps from the tabular policy in a synthetic environment.
pub struct SimGenerator<'a> {
    pub env: &'a Env,
    pub policy: &'a PolicyParams,
}

fn symbols(prefix: &[&StepSample]) -> Result<Vec<StepId>> {
    prefix
        .iter()
        .map(|s| {
            s.content
                .symbol()
                .ok_or_else(|| Error::InvalidArgument("text step in a synthetic environment".into()))
        })
        .collect()
}

impl SimGenerator<'_> {
    fn one(&self, problem: &Problem, mut path: Vec<StepId>, limits: Limits, rng: &mut Rng) -> Result<Rollout> {
        let mut steps = Vec::new();
        let mut tokens = 0;
        let mut truncated = false;
        while !self.env.is_terminal(&path) && steps.len() < limits.max_steps {
            let ctx = StepContext::from_env(self.env, &problem.id, &path);
            let (choice, mut sample) = policy::sample_step(self.policy, &ctx, rng)?;
            let left = limits.max_tokens - tokens;
            if sample.n_tokens() > left {
                truncated = true;
                if left == 0 {
                    break;
                }
                sample.token_logprobs.truncate(left);
                sample = StepSample::new(sample.content, sample.token_logprobs)?;
            }
            tokens += sample.n_tokens();
            path.push(ctx.candidates[choice]);
            steps.push(sample);
            if truncated {
                break;
            }
        }
        let reward = self.env.verify(&path, truncated, problem)?;
        Ok(Rollout {
            steps,
            truncated,
            reward,
        })
    }
}

impl Generator for SimGenerator<'_> {
    fn rollouts(
        &self,
        problem: &Problem,
        prefix: &[&StepSample],
        limits: Limits,
        n: usize,
        rng: &mut Rng,
    ) -> Result<Vec<Rollout>> {
        let path = symbols(prefix)?;
        (0..n).map(|_| self.one(problem, path.clone(), limits, rng)).collect()
    }

    fn next_step_entropy(&self, problem: &Problem, prefix: &[&StepSample]) -> Option<f64> {
        let path = symbols(prefix).ok()?;
        if self.env.is_terminal(&path) {
            return Some(0.0);
        }
        let ctx = StepContext::from_env(self.env, &problem.id, &path);
        let probs = self.policy.probs(&ctx).ok()?;
        Some(1.0 - probs.iter().map(|p| p * p).sum::<f64>())
    }
}

/// Samples text continuations from a remote backend and scores them with
/// the exact-match text verifier.
pub struct RemoteGenerator<'a, T: Transport> {
    pub client: &'a RemoteClient<T>,
    pub sampling: SamplingParams,
}

impl<T: Transport> Generator for RemoteGenerator<'_, T> {
    fn rollouts(
        &self,
        problem: &Problem,
        prefix: &[&StepSample],
        limits: Limits,
        n: usize,
        rng: &mut Rng,
    ) -> Result<Vec<Rollout>> {
        let delim = self.client.config().delimiter.as_str();
        let done: Vec<String> = prefix.iter().map(|s| s.content.render()).collect();
        let mut text = problem.prompt.clone();
        for s in &done {
            text.push_str(delim);
            text.push_str(s);
        }
        text.push_str(delim);
        let seed = rng.random::<u64>();
        let completions = self
            .client
            .complete(&text, n, limits.max_tokens, &self.sampling, Some(seed))?;
        completions
            .into_iter()
            .map(|c| {
                let mut steps = step_samples(&c, delim)?;
                let mut truncated = c.truncated;
                if steps.len() > limits.max_steps {
                    steps.truncate(limits.max_steps);
                    truncated = true;
                }
                let full: Vec<String> = done
                    .iter()
                    .cloned()
                    .chain(steps.iter().map(|s| s.content.render()))
                    .collect();
                let reward = env::verify_text(&full.join(delim), truncated, problem);
                Ok(Rollout {
                    steps,
                    truncated,
                    reward,
                })
            })
            .collect()
    }
}

/// How branch nodes are chosen in iterations after the first.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BranchStrategy {
    /// Top-K non-leaf nodes by IB-Score.
    IbScore { beta: f64 },
    /// K distinct non-leaf nodes uniformly at random.
    Random,
    /// Breadth-first: the shallowest non-leaf nodes with fewer than `width`
    /// children.
    FixedWidth { width: usize },
    /// Top-K non-leaf nodes by next-step entropy.
    Entropy,
    /// Always the root: plain independent sampling.
    Independent,
}

impl Default for BranchStrategy {
    fn default() -> Self {
        BranchStrategy::IbScore {
            beta: ibscore::DEFAULT_BETA,
        }
    }
}

pub fn init_tree(problem: &Problem, budget: SamplingBudget) -> Result<SampleTree> {
    budget.validate()?;
    Ok(SampleTree {
        problem_id: problem.id.clone(),
        nodes: vec![TreeNode {
            id: 0,
            parent: None,
            children: Vec::new(),
            step: StepSample::prompt(problem.prompt.clone()),
            depth: 0,
            density: DensityEstimate::default(),
            terminal: DensityEstimate::default(),
            is_leaf: false,
            truncated: false,
            path_tokens: 0,
            ib_score: None,
        }],
        trajectories: Vec::new(),
        generated_tokens: 0,
        budget,
        short: false,
    })
}

impl SampleTree {
    pub fn root(&self) -> &TreeNode {
        &self.nodes[0]
    }

    pub fn node(&self, id: NodeId) -> &TreeNode {
        &self.nodes[id]
    }

    /// Node ids from the root to `id`.
    pub fn path_to(&self, id: NodeId) -> Vec<NodeId> {
        let mut path = vec![id];
        let mut at = id;
        while let Some(p) = self.nodes[at].parent {
            path.push(p);
            at = p;
        }
        path.reverse();
        path
    }

    /// Steps from the first generated step through `id`.
    pub fn prefix_steps(&self, id: NodeId) -> Vec<&StepSample> {
        self.path_to(id)[1..].iter().map(|&n| &self.nodes[n].step).collect()
    }

    /// Step symbols along the path to `id`, for synthetic trees.
    pub fn prefix_symbols(&self, id: NodeId) -> Option<Vec<StepId>> {
        self.path_to(id)[1..].iter().map(|&n| self.nodes[n].symbol()).collect()
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.trajectories.iter().map(|t| t.reward.value()).collect()
    }

    pub fn is_eligible(&self, id: NodeId) -> bool {
        !self.nodes[id].is_leaf
    }

    /// IB-Score of a node from the current tallies. `None` for nodes without
    /// children.
    pub fn score_node(&self, id: NodeId, beta: f64) -> Result<Option<IBScoreEstimate>> {
        let node = &self.nodes[id];
        if node.children.is_empty() {
            return Ok(None);
        }
        let parent = node.density.value().unwrap_or(0.0);
        let kids: Vec<BranchStat> = node
            .children
            .iter()
            .map(|&c| {
                let c = &self.nodes[c];
                BranchStat {
                    density: c.density.value().unwrap_or(0.0),
                    geo_prob: c.step.geo_mean_prob,
                }
            })
            .collect();
        ibscore::ib_score(parent, &kids, beta).map(Some)
    }

    /// Recomputes and caches the IB-Score of every non-leaf node with children.
    pub fn refresh_scores(&mut self, beta: f64) -> Result<()> {
        for id in 0..self.nodes.len() {
            let s = if self.nodes[id].is_leaf {
                None
            } else {
                self.score_node(id, beta)?
            };
            self.nodes[id].ib_score = s;
        }
        Ok(())
    }

    fn add_node(&mut self, parent: NodeId, step: StepSample) -> NodeId {
        let id = self.nodes.len();
        let depth = self.nodes[parent].depth + 1;
        let path_tokens = self.nodes[parent].path_tokens + step.n_tokens();
        self.nodes.push(TreeNode {
            id,
            parent: Some(parent),
            children: Vec::new(),
            step,
            depth,
            density: DensityEstimate::default(),
            terminal: DensityEstimate::default(),
            is_leaf: false,
            truncated: false,
            path_tokens,
            ib_score: None,
        });
        self.nodes[parent].children.push(id);
        id
    }

    /// Grafts a rollout below `from` and updates tallies along the path.
    fn attach(&mut self, from: NodeId, rollout: Rollout) -> usize {
        let mut at = from;
        let mut new_tokens = 0;
        for step in rollout.steps {
            new_tokens += step.n_tokens();
            at = self.add_node(at, step);
        }
        // a rollout that adds no step ends at `from` without closing it
        if at != from || rollout.truncated {
            let leaf = &mut self.nodes[at];
            leaf.is_leaf = true;
            leaf.truncated |= rollout.truncated;
        }
        let path = self.path_to(at);
        let r = rollout.reward.value();
        for &n in &path {
            self.nodes[n].density.record(r);
        }
        self.nodes[at].terminal.record(r);
        self.generated_tokens += new_tokens;
        self.trajectories.push(Trajectory {
            node_path: path,
            reward: rollout.reward,
            new_tokens,
            truncated: rollout.truncated,
        });
        self.trajectories.len() - 1
    }

    /// Checks the structural invariants; used by tests and the snapshot
    /// parser.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Format(m));
        if self.nodes.is_empty() {
            return bad("tree without a root".into());
        }
        let root = &self.nodes[0];
        if root.parent.is_some() || root.depth != 0 {
            return bad("root must have no parent and depth 0".into());
        }
        for (i, n) in self.nodes.iter().enumerate() {
            if n.id != i {
                return bad(format!("node at index {i} has id {}", n.id));
            }
            if i > 0 {
                let Some(p) = n.parent.filter(|&p| p < i) else {
                    return bad(format!("node {i} has an invalid parent"));
                };
                let parent = &self.nodes[p];
                if n.depth != parent.depth + 1 || !parent.children.contains(&i) {
                    return bad(format!("node {i} is not linked to parent {p}"));
                }
                if n.path_tokens != parent.path_tokens + n.step.n_tokens() {
                    return bad(format!("node {i} token count mismatch"));
                }
            }
            for &c in &n.children {
                if c >= self.nodes.len() || self.nodes[c].parent != Some(i) {
                    return bad(format!("node {i} lists foreign child {c}"));
                }
            }
            let below: u64 = n.children.iter().map(|&c| self.nodes[c].density.rollout_count).sum();
            if n.density.rollout_count != below + n.terminal.rollout_count {
                return bad(format!("node {i} rollout count is not conserved"));
            }
        }
        let mut tokens = 0;
        for (k, t) in self.trajectories.iter().enumerate() {
            if t.node_path.first() != Some(&0) {
                return bad(format!("trajectory {k} does not start at the root"));
            }
            for w in t.node_path.windows(2) {
                if w[1] >= self.nodes.len() || self.nodes[w[1]].parent != Some(w[0]) {
                    return bad(format!("trajectory {k} has a broken edge {:?}", w));
                }
            }
            tokens += t.new_tokens;
        }
        if tokens != self.generated_tokens {
            return bad("generated token count does not match trajectories".into());
        }
        let step_tokens: usize = self.nodes[1..].iter().map(|n| n.step.n_tokens()).sum();
        if step_tokens != self.generated_tokens {
            return bad("generated token count does not match nodes".into());
        }
        Ok(())
    }
}

/// Top-K nodes under `strategy`; ties go to the smaller id.
pub fn select_branch_nodes<G: Generator + ?Sized>(
    tree: &mut SampleTree,
    k: usize,
    strategy: BranchStrategy,
    generator: &G,
    problem: &Problem,
    rng: &mut Rng,
) -> Result<Vec<NodeId>> {
    let eligible: Vec<NodeId> = (0..tree.nodes.len()).filter(|&i| tree.is_eligible(i)).collect();
    if eligible.is_empty() {
        return Err(Error::NoEligibleNode);
    }
    let k = k.min(eligible.len());
    let top_k = |scored: Vec<(f64, NodeId)>| {
        let mut scored = scored;
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        scored.into_iter().take(k).map(|(_, i)| i).collect::<Vec<_>>()
    };
    Ok(match strategy {
        BranchStrategy::IbScore { beta } => {
            tree.refresh_scores(beta)?;
            top_k(
                eligible
                    .iter()
                    .map(|&i| (tree.nodes[i].ib_score.as_ref().map_or(f64::INFINITY, |s| s.value), i))
                    .collect(),
            )
        }
        BranchStrategy::Random => {
            let mut picked: Vec<NodeId> = sample_indices(rng, eligible.len(), k)
                .into_iter()
                .map(|j| eligible[j])
                .collect();
            picked.sort_unstable();
            picked
        }
        BranchStrategy::FixedWidth { width } => {
            let mut open: Vec<NodeId> = eligible
                .iter()
                .copied()
                .filter(|&i| tree.nodes[i].children.len() < width.max(1) || i == 0 && tree.nodes[0].children.is_empty())
                .collect();
            if open.is_empty() {
                open = eligible.clone();
            }
            open.sort_by_key(|&i| (tree.nodes[i].depth, tree.nodes[i].children.len(), i));
            open.truncate(k);
            open
        }
        BranchStrategy::Entropy => top_k(
            eligible
                .iter()
                .map(|&i| {
                    let h = generator
                        .next_step_entropy(problem, &tree.prefix_steps(i))
                        .unwrap_or_else(|| {
                            let kids = &tree.nodes[i].children;
                            if kids.is_empty() {
                                1.0
                            } else {
                                1.0 - kids.iter().map(|&c| tree.nodes[c].step.geo_mean_prob).sum::<f64>()
                                    / kids.len() as f64
                            }
                        });
                    (h, i)
                })
                .collect(),
        ),
        BranchStrategy::Independent => vec![0],
    })
}

/// Samples `b` continuations from each branch node. Stops after the current
/// node once the tree token cap is reached and reports whether it did.
pub fn expand<G: Generator + ?Sized>(
    tree: &mut SampleTree,
    branch_nodes: &[NodeId],
    b: usize,
    generator: &G,
    problem: &Problem,
    rng: &mut Rng,
) -> Result<(Vec<usize>, bool)> {
    if branch_nodes.is_empty() {
        return Err(Error::InvalidArgument("expand needs at least one branch node".into()));
    }
    let mut out = Vec::new();
    for &id in branch_nodes {
        if id >= tree.nodes.len() || tree.nodes[id].is_leaf {
            return Err(Error::InvalidArgument(format!("node {id} cannot be branched")));
        }
        let node = &tree.nodes[id];
        let limits = Limits {
            max_steps: tree.budget.max_depth.saturating_sub(node.depth),
            max_tokens: tree.budget.max_tokens_per_traj.saturating_sub(node.path_tokens),
        };
        let rollouts = {
            let prefix = tree.prefix_steps(id);
            generator.rollouts(problem, &prefix, limits, b, rng)?
        };
        for r in rollouts {
            out.push(tree.attach(id, r));
        }
        if tree
            .budget
            .max_tree_tokens
            .is_some_and(|cap| tree.generated_tokens >= cap)
        {
            return Ok((out, true));
        }
    }
    Ok((out, false))
}

pub fn run_sampling<G: Generator + ?Sized>(
    problem: &Problem,
    budget: SamplingBudget,
    strategy: BranchStrategy,
    generator: &G,
    rng: &mut Rng,
) -> Result<SampleTree> {
    let mut tree = init_tree(problem, budget)?;
    let (_, exhausted) = expand(&mut tree, &[0], budget.b0, generator, problem, rng)?;
    if exhausted {
        tree.short = true;
    }
    for _ in 1..budget.iterations {
        if tree.short {
            break;
        }
        let picked = match select_branch_nodes(&mut tree, budget.branch_nodes, strategy, generator, problem, rng) {
            Ok(p) => p,
            Err(Error::NoEligibleNode) => {
                tree.short = true;
                break;
            }
            Err(e) => return Err(e),
        };
        let (_, exhausted) = expand(&mut tree, &picked, budget.branches, generator, problem, rng)?;
        tree.short |= exhausted;
    }
    if tree.trajectories.len() < budget.group_size() {
        tree.short = true;
    }
    if let BranchStrategy::IbScore { beta } = strategy {
        tree.refresh_scores(beta)?;
    } else {
        tree.refresh_scores(ibscore::DEFAULT_BETA)?;
    }
    Ok(tree)
}

/// Samples one tree per job in parallel. Tree `i` uses a stream derived
/// from `(seed, i)`, so results do not depend on scheduling.
pub fn run_forest<G: Generator + Send>(
    jobs: &[(Problem, G)],
    budget: SamplingBudget,
    strategy: BranchStrategy,
    seed: u64,
) -> Result<Vec<SampleTree>> {
    jobs.par_iter()
        .enumerate()
        .map(|(i, (problem, generator))| {
            let mut rng = seed::rng(seed, &[0x7EE, i as u64]);
            run_sampling(problem, budget, strategy, generator, &mut rng)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TokenSavings {
    pub tree_tokens: usize,
    pub independent_equivalent_tokens: usize,
    pub ratio: f64,
}

pub fn token_savings(tree: &SampleTree) -> TokenSavings {
    let independent: usize = tree
        .trajectories
        .iter()
        .map(|t| tree.nodes[*t.node_path.last().expect("non-empty path")].path_tokens)
        .sum();
    TokenSavings {
        tree_tokens: tree.generated_tokens,
        independent_equivalent_tokens: independent,
        ratio: if independent == 0 {
            1.0
        } else {
            tree.generated_tokens as f64 / independent as f64
        },
    }
}

const SNAPSHOT_FORMAT: &str = "ibtpo-tree";
const SNAPSHOT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Snapshot<T> {
    format: String,
    version: u32,
    tree: T,
}

pub fn tree_to_string(tree: &SampleTree) -> String {
    serde_json::to_string_pretty(&Snapshot {
        format: SNAPSHOT_FORMAT.into(),
        version: SNAPSHOT_VERSION,
        tree,
    })
    .expect("tree serializes")
}

pub fn tree_from_str(text: &str) -> Result<SampleTree> {
    let snap: Snapshot<SampleTree> =
        serde_json::from_str(text).map_err(|e| Error::Format(format!("tree snapshot: {e}")))?;
    if snap.format != SNAPSHOT_FORMAT || snap.version != SNAPSHOT_VERSION {
        return Err(Error::Format(format!(
            "unsupported tree snapshot {} v{}",
            snap.format, snap.version
        )));
    }
    snap.tree.validate()?;
    Ok(snap.tree)
}

pub fn save_tree(tree: &SampleTree, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, tree_to_string(tree)).map_err(|e| Error::io(path, e))
}

pub fn load_tree(path: impl AsRef<Path>) -> Result<SampleTree> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    tree_from_str(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{make_env, AnswerStructure, EnvSpec, TokenRange};
    use crate::policy::StepContent;
    use approx::assert_relative_eq;

    fn env(v: u16, d: usize, structure: AnswerStructure) -> Env {
        make_env(EnvSpec::new(v, d, structure, 11)).unwrap()
    }

    fn sample(env: &Env, budget: SamplingBudget, strategy: BranchStrategy, s: u64) -> SampleTree {
        let policy = PolicyParams::default();
        let g = SimGenerator { env, policy: &policy };
        let problem = env.problem("p");
        run_sampling(&problem, budget, strategy, &g, &mut seed::rng(s, &[])).unwrap()
    }

    fn budget(b0: usize, l: usize, k: usize, b: usize) -> SamplingBudget {
        SamplingBudget::new(b0, l, k, b)
    }

    /// Feeds fixed rollouts in order.
    struct Scripted(std::sync::Mutex<Vec<Rollout>>);

    impl Generator for Scripted {
        fn rollouts(&self, _: &Problem, _: &[&StepSample], _: Limits, n: usize, _: &mut Rng) -> Result<Vec<Rollout>> {
            let mut q = self.0.lock().unwrap();
            Ok(q.drain(..n).collect())
        }
    }

    fn roll(tokens: &[usize], reward: f64) -> Rollout {
        Rollout {
            steps: tokens
                .iter()
                .map(|&n| StepSample::new(StepContent::Text("s".into()), vec![-0.5; n]).unwrap())
                .collect(),
            truncated: false,
            reward: Reward::new(reward).unwrap(),
        }
    }

    #[test]
    fn init_is_root_only() {
        let e = env(3, 3, AnswerStructure::AllCorrect);
        let t = init_tree(&e.problem("p"), SamplingBudget::default()).unwrap();
        assert_eq!(t.nodes.len(), 1);
        assert!(t.trajectories.is_empty());
        assert_eq!(t.generated_tokens, 0);
        assert!(!t.root().is_leaf);
    }

    #[test]
    fn first_selection_is_root() {
        let e = env(3, 3, AnswerStructure::AllCorrect);
        let p = e.problem("p");
        let policy = PolicyParams::default();
        let g = SimGenerator {
            env: &e,
            policy: &policy,
        };
        let mut t = init_tree(&p, SamplingBudget::default()).unwrap();
        let mut rng = seed::rng(0, &[]);
        let picked = select_branch_nodes(&mut t, 1, BranchStrategy::default(), &g, &p, &mut rng).unwrap();
        assert_eq!(picked, vec![0]);
    }

    #[test]
    fn selection_prefers_higher_score_and_smaller_id() {
        // root -> a (density 1, geo .9), b (density 0, geo .5); a -> a1; b -> b1
        let script = vec![roll(&[1, 1], 1.0), roll(&[1, 1], 0.0)];
        let g = Scripted(std::sync::Mutex::new(script));
        let p = env(2, 2, AnswerStructure::AllCorrect).problem("p");
        let mut t = init_tree(&p, budget(2, 2, 1, 1)).unwrap();
        let mut rng = seed::rng(0, &[]);
        expand(&mut t, &[0], 2, &g, &p, &mut rng).unwrap();
        // nodes: 0 root, 1 -> 2 (leaf), 3 -> 4 (leaf)
        let s1 = t.score_node(1, 5.0).unwrap().unwrap().value;
        let s3 = t.score_node(3, 5.0).unwrap().unwrap().value;
        let s0 = t.score_node(0, 5.0).unwrap().unwrap().value;
        let mut want = [(s0, 0), (s1, 1), (s3, 3)];
        want.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let picked = select_branch_nodes(&mut t, 1, BranchStrategy::IbScore { beta: 5.0 }, &g, &p, &mut rng).unwrap();
        assert_eq!(picked, vec![want[0].1]);
        // ties: 1 and 3 have one child each with ratio 1 and equal geo
        assert_relative_eq!(s1, s3);
        let all = select_branch_nodes(&mut t, 10, BranchStrategy::IbScore { beta: 5.0 }, &g, &p, &mut rng).unwrap();
        assert_eq!(all.len(), 3);
        let pos = |x| all.iter().position(|&i| i == x).unwrap();
        assert!(pos(1) < pos(3));
        assert!(all.iter().all(|&i| !t.nodes[i].is_leaf));
    }

    #[test]
    fn default_budget_yields_twelve() {
        let e = env(4, 6, AnswerStructure::PlantedPaths { count: 3 });
        for s in 0..20 {
            let t = sample(&e, SamplingBudget::default(), BranchStrategy::default(), s);
            assert_eq!(t.trajectories.len(), 12);
            assert!(!t.short);
            t.validate().unwrap();
        }
    }

    #[test]
    fn single_iteration_is_independent() {
        let e = env(4, 6, AnswerStructure::AllCorrect);
        let t = sample(&e, budget(2, 1, 1, 1), BranchStrategy::default(), 3);
        assert_eq!(t.trajectories.len(), 2);
        assert_eq!(token_savings(&t).ratio, 1.0);
    }

    #[test]
    fn same_seed_same_tree() {
        let e = env(4, 6, AnswerStructure::PlantedPaths { count: 2 });
        let a = sample(&e, SamplingBudget::default(), BranchStrategy::default(), 99);
        let b = sample(&e, SamplingBudget::default(), BranchStrategy::default(), 99);
        assert_eq!(tree_to_string(&a), tree_to_string(&b));
    }

    #[test]
    fn root_expansion_counts_all_tokens() {
        let mut spec = EnvSpec::new(3, 2, AnswerStructure::AllCorrect, 5);
        spec.tokens_per_step = TokenRange { min: 2, max: 5 };
        let e = make_env(spec).unwrap();
        let t = sample(&e, budget(4, 1, 1, 1), BranchStrategy::default(), 1);
        assert_eq!(t.trajectories.len(), 4);
        let sum: usize = t
            .trajectories
            .iter()
            .map(|tr| t.nodes[*tr.node_path.last().unwrap()].path_tokens)
            .sum();
        assert_eq!(t.generated_tokens, sum);
    }

    #[test]
    fn internal_expansion_excludes_shared_prefix() {
        let script = vec![roll(&[10, 5], 1.0), roll(&[5], 0.0)];
        let g = Scripted(std::sync::Mutex::new(script));
        let p = env(2, 2, AnswerStructure::AllCorrect).problem("p");
        let mut t = init_tree(&p, budget(1, 2, 1, 1)).unwrap();
        let mut rng = seed::rng(0, &[]);
        expand(&mut t, &[0], 1, &g, &p, &mut rng).unwrap();
        let (new, _) = expand(&mut t, &[1], 1, &g, &p, &mut rng).unwrap();
        assert_eq!(t.trajectories[new[0]].new_tokens, 5);
        let s = token_savings(&t);
        assert_eq!(s.tree_tokens, 20);
        assert_eq!(s.independent_equivalent_tokens, 30);
        assert_relative_eq!(s.ratio, 20.0 / 30.0);
        t.validate().unwrap();
    }

    #[test]
    fn densities_match_scratch() {
        let e = env(3, 5, AnswerStructure::CriticalSteps { min: 1, max: 2 });
        let t = sample(&e, budget(4, 9, 2, 2), BranchStrategy::default(), 5);
        for n in &t.nodes {
            let rs: Vec<f64> = t
                .trajectories
                .iter()
                .filter(|tr| tr.node_path.contains(&n.id))
                .map(|tr| tr.reward.value())
                .collect();
            let scratch = DensityEstimate::from_rewards(rs);
            assert_eq!(scratch.rollout_count, n.density.rollout_count);
            assert_relative_eq!(scratch.pass_sum, n.density.pass_sum);
        }
    }

    #[test]
    fn truncation_makes_leaf_and_zero_reward() {
        let mut spec = EnvSpec::new(2, 4, AnswerStructure::AllCorrect, 5);
        spec.tokens_per_step = TokenRange { min: 3, max: 3 };
        let e = make_env(spec).unwrap();
        let mut b = budget(3, 1, 1, 1);
        b.max_tokens_per_traj = 7;
        let t = sample(&e, b, BranchStrategy::default(), 2);
        for tr in &t.trajectories {
            assert!(tr.truncated);
            assert_eq!(tr.reward, Reward::ZERO);
            let leaf = &t.nodes[*tr.node_path.last().unwrap()];
            assert!(leaf.is_leaf && leaf.truncated);
            assert_eq!(leaf.path_tokens, 7);
        }
    }

    #[test]
    fn exhausted_tree_is_short() {
        let e = env(2, 2, AnswerStructure::Chain);
        // the single path leaves only the root eligible, and the root can keep branching
        let t = sample(&e, SamplingBudget::default(), BranchStrategy::default(), 0);
        assert_eq!(t.trajectories.len(), 12);
        let b = SamplingBudget {
            max_tree_tokens: Some(5),
            ..SamplingBudget::default()
        };
        let t = sample(&e, b, BranchStrategy::default(), 0);
        assert!(t.short);
        assert!(t.trajectories.len() < 12);
    }

    #[test]
    fn strategies_respect_leaf_exclusion() {
        let e = env(3, 4, AnswerStructure::PlantedPaths { count: 2 });
        for strategy in [
            BranchStrategy::Random,
            BranchStrategy::FixedWidth { width: 2 },
            BranchStrategy::Entropy,
            BranchStrategy::Independent,
        ] {
            let t = sample(&e, SamplingBudget::default(), strategy, 8);
            assert_eq!(t.trajectories.len(), 12, "{strategy:?}");
            t.validate().unwrap();
        }
    }

    #[test]
    fn fixed_width_goes_breadth_first() {
        let e = env(3, 4, AnswerStructure::AllCorrect);
        let t = sample(&e, budget(4, 5, 1, 1), BranchStrategy::FixedWidth { width: 2 }, 8);
        let depth1: Vec<_> = t.root().children.iter().take(4).collect();
        for &&c in &depth1 {
            assert_eq!(t.nodes[c].children.len(), 2);
        }
    }

    #[test]
    fn snapshot_round_trip() {
        let e = env(4, 5, AnswerStructure::PlantedPaths { count: 4 });
        let t = sample(&e, SamplingBudget::default(), BranchStrategy::default(), 4);
        let text = tree_to_string(&t);
        let back = tree_from_str(&text).unwrap();
        assert_eq!(t, back);
        assert_eq!(text, tree_to_string(&back));
    }

    #[test]
    fn snapshot_rejects_broken_trees() {
        let e = env(3, 3, AnswerStructure::AllCorrect);
        let mut t = sample(&e, budget(2, 2, 1, 1), BranchStrategy::default(), 4);
        t.nodes[2].parent = Some(0);
        assert!(tree_from_str(&tree_to_string(&t)).is_err());
        assert!(tree_from_str("{}").is_err());
    }

    #[test]
    fn forest_is_schedule_independent() {
        let e = env(3, 5, AnswerStructure::PlantedPaths { count: 2 });
        let policy = PolicyParams::default();
        let jobs: Vec<_> = (0..8)
            .map(|i| {
                (
                    e.problem(format!("p{i}")),
                    SimGenerator {
                        env: &e,
                        policy: &policy,
                    },
                )
            })
            .collect();
        let a = run_forest(&jobs, SamplingBudget::default(), BranchStrategy::default(), 3).unwrap();
        let b = run_forest(&jobs, SamplingBudget::default(), BranchStrategy::default(), 3).unwrap();
        assert_eq!(a, b);
        let mut rng = seed::rng(3, &[0x7EE, 5]);
        let solo = run_sampling(
            &jobs[5].0,
            SamplingBudget::default(),
            BranchStrategy::default(),
            &jobs[5].1,
            &mut rng,
        )
        .unwrap();
        assert_eq!(solo, a[5]);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(48))]
            #[test]
            fn trees_satisfy_invariants(
                v in 2u16..5, d in 2usize..7, b0 in 1usize..5, l in 1usize..6, k in 1usize..3, b in 1usize..3,
                s in 0u64..1000, tmin in 1usize..4, tspan in 0usize..4, strat in 0usize..5,
            ) {
                let mut spec = EnvSpec::new(v, d, AnswerStructure::CriticalSteps { min: 1, max: d.min(2) }, s);
                spec.tokens_per_step = TokenRange { min: tmin, max: tmin + tspan };
                let e = make_env(spec).unwrap();
                let strategy = [
                    BranchStrategy::default(),
                    BranchStrategy::Random,
                    BranchStrategy::FixedWidth { width: 2 },
                    BranchStrategy::Entropy,
                    BranchStrategy::Independent,
                ][strat];
                let t = sample(&e, budget(b0, l, k, b), strategy, s);
                t.validate().unwrap();
                if !t.short {
                    prop_assert_eq!(t.trajectories.len(), b0 + (l - 1) * k * b);
                }
                let sv = token_savings(&t);
                prop_assert!(sv.ratio <= 1.0 + 1e-15);
                for n in &t.nodes {
                    let below: f64 = n.children.iter().map(|&c| t.nodes[c].density.pass_sum).sum();
                    prop_assert!((n.density.pass_sum - below - n.terminal.pass_sum).abs() < 1e-9);
                    if let Some(est) = &n.ib_score {
                        let scratch = t.score_node(n.id, ibscore::DEFAULT_BETA).unwrap().unwrap();
                        prop_assert!((est.value - scratch.value).abs() < 1e-12);
                    }
                }
            }
        }
    }
}
