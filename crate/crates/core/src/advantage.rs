//! Step-level advantages.

use serde::{Deserialize, Serialize};

use crate::ibscore::density_ratio;
use crate::ibtree::{NodeId, SampleTree};
use crate::{Error, Result};

pub const DEFAULT_LAMBDA: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdvantageRecord {
    pub node_id: NodeId,
    pub a_ib: f64,
    pub a_gl: f64,
    pub a_total: f64,
    pub importance_weight: f64,
}

/// Population standard deviation.
pub fn population_std(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    (xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt()
}

/// `[child / parent - (1 + 1/beta)] * ref_geo_prob`, with the zero-density
/// rule applied to the ratio.
pub fn local_ib_advantage(child_density: f64, parent_density: f64, beta: f64, ref_geo_prob: f64) -> Result<f64> {
    if !(beta.is_finite() && beta > 0.0) {
        return Err(Error::InvalidArgument(format!("beta must be > 0, got {beta}")));
    }
    if !(ref_geo_prob > 0.0 && ref_geo_prob <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "reference step probability {ref_geo_prob} is not in (0, 1]"
        )));
    }
    Ok((density_ratio(child_density, parent_density) - (1.0 + 1.0 / beta)) * ref_geo_prob)
}

/// `(node - root) / reward_std`, or 0 when the rewards do not vary.
pub fn global_advantage(node_density: f64, root_density: f64, reward_std: f64) -> f64 {
    if reward_std == 0.0 {
        0.0
    } else {
        (node_density - root_density) / reward_std
    }
}

pub fn combined_advantage(a_ib: f64, a_gl: f64, lambda: f64) -> f64 {
    a_gl + lambda * a_ib
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupAdvantage {
    pub values: Vec<f64>,
    /// False when all rewards are equal.
    pub effective: bool,
}

/// Group-normalised outcome advantages `(R - mean) / std`.
pub fn grpo_advantage(rewards: &[f64]) -> Result<GroupAdvantage> {
    if rewards.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "a group needs at least 2 rewards, got {}",
            rewards.len()
        )));
    }
    let std = population_std(rewards);
    if std == 0.0 {
        return Ok(GroupAdvantage {
            values: vec![0.0; rewards.len()],
            effective: false,
        });
    }
    let mean = rewards.iter().sum::<f64>() / rewards.len() as f64;
    Ok(GroupAdvantage {
        values: rewards.iter().map(|r| (r - mean) / std).collect(),
        effective: true,
    })
}

/// Advantage records for every non-root node of a finished tree.
///
/// `ref_geo(id)` and `cur_geo(id)` give the node's geometric-mean step
/// probability under the reference and current policies.
pub fn tree_advantages(
    tree: &SampleTree,
    beta: f64,
    lambda: f64,
    mut ref_geo: impl FnMut(NodeId) -> Result<f64>,
    mut cur_geo: impl FnMut(NodeId) -> Result<f64>,
) -> Result<Vec<AdvantageRecord>> {
    let root = tree.root().density.value().unwrap_or(0.0);
    let std = population_std(&tree.rewards());
    tree.nodes[1..]
        .iter()
        .map(|n| {
            let parent = n.parent.expect("non-root node has a parent");
            let d = n.density.value().unwrap_or(0.0);
            let pd = tree.nodes[parent].density.value().unwrap_or(0.0);
            let r = ref_geo(n.id)?;
            let a_ib = local_ib_advantage(d, pd, beta, r)?;
            let a_gl = global_advantage(d, root, std);
            Ok(AdvantageRecord {
                node_id: n.id,
                a_ib,
                a_gl,
                a_total: combined_advantage(a_ib, a_gl, lambda),
                importance_weight: cur_geo(n.id)? / r,
            })
        })
        .collect()
}
