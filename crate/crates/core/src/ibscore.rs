//! IB-Score estimators.
//!
//! Everything here is a pure function of densities and geometric-mean step
//! probabilities; the tree module feeds in its tallies.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const DEFAULT_BETA: f64 = 5.0;
pub const DEFAULT_ALPHA: f64 = 2.0;

/// Monte Carlo reward density: the mean reward of completed trajectories
/// passing through a node.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DensityEstimate {
    pub pass_sum: f64,
    pub rollout_count: u64,
}

impl DensityEstimate {
    pub fn is_empty(&self) -> bool {
        self.rollout_count == 0
    }

    pub fn value(&self) -> Option<f64> {
        (self.rollout_count > 0).then(|| self.pass_sum / self.rollout_count as f64)
    }

    pub fn record(&mut self, reward: f64) {
        self.pass_sum += reward;
        self.rollout_count += 1;
    }

    pub fn from_rewards(rewards: impl IntoIterator<Item = f64>) -> Self {
        let mut d = DensityEstimate::default();
        for r in rewards {
            d.record(r);
        }
        d
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EtaPair {
    pub eta1: f64,
    pub eta2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IBScoreEstimate {
    pub value: f64,
    pub pairs: Vec<EtaPair>,
    pub n_children: usize,
    pub cov: f64,
}

/// What the estimator needs to know about one sampled child.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BranchStat {
    pub density: f64,
    pub geo_prob: f64,
}

fn check_beta(beta: f64) -> Result<()> {
    if beta.is_finite() && beta > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("beta must be > 0, got {beta}")))
    }
}

fn check_prob(p: f64, what: &str) -> Result<()> {
    if p > 0.0 && p <= 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("{what} {p} is not in (0, 1]")))
    }
}

/// Sampling estimator of Tsallis entropy from the probabilities of sampled
/// outcomes: `(1 - mean(p^(alpha-1))) / (alpha - 1)`.
pub fn tsallis_entropy(probs: &[f64], alpha: f64) -> Result<f64> {
    if probs.is_empty() {
        return Err(Error::InvalidArgument("tsallis entropy of an empty sample".into()));
    }
    if alpha == 1.0 || !alpha.is_finite() {
        return Err(Error::InvalidArgument(format!("entropic index {alpha} is undefined")));
    }
    for &p in probs {
        check_prob(p, "probability")?;
    }
    let m = probs.iter().map(|p| p.powf(alpha - 1.0)).sum::<f64>() / probs.len() as f64;
    Ok((1.0 - m) / (alpha - 1.0))
}

/// `child / parent`, or 1 when the parent density is zero.
pub fn density_ratio(child_density: f64, parent_density: f64) -> f64 {
    if parent_density == 0.0 {
        1.0
    } else {
        child_density / parent_density
    }
}

/// Bayes posterior before clamping.
pub fn posterior_prob_raw(child_density: f64, parent_density: f64, child_geo_prob: f64) -> Result<f64> {
    if parent_density.is_nan() || parent_density <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "parent density must be > 0 for the posterior, got {parent_density}"
        )));
    }
    Ok(child_density * child_geo_prob / parent_density)
}

/// Bayes posterior clamped to `[0, 1]`.
pub fn posterior_prob(child_density: f64, parent_density: f64, child_geo_prob: f64) -> Result<f64> {
    posterior_prob_raw(child_density, parent_density, child_geo_prob).map(|p| p.clamp(0.0, 1.0))
}

/// `1 - mean(posteriors)`.
pub fn posterior_entropy(posteriors: &[f64]) -> Result<f64> {
    if posteriors.is_empty() {
        return Err(Error::InvalidArgument("posterior entropy of an empty sample".into()));
    }
    Ok(1.0 - posteriors.iter().sum::<f64>() / posteriors.len() as f64)
}

pub fn eta_pair(child: BranchStat, parent_density: f64, beta: f64) -> Result<EtaPair> {
    check_beta(beta)?;
    check_prob(child.geo_prob, "geometric-mean step probability")?;
    Ok(EtaPair {
        eta1: density_ratio(child.density, parent_density) - (1.0 + 1.0 / beta),
        eta2: child.geo_prob,
    })
}

/// Population covariance of the pairs; a single pair gives 0.
pub fn cov_eta(pairs: &[EtaPair]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("covariance of an empty pair list".into()));
    }
    let n = pairs.len() as f64;
    let m1 = pairs.iter().map(|p| p.eta1).sum::<f64>() / n;
    let m2 = pairs.iter().map(|p| p.eta2).sum::<f64>() / n;
    Ok(pairs.iter().map(|p| (p.eta1 - m1) * (p.eta2 - m2)).sum::<f64>() / n)
}

/// `1 + (beta / B) * sum(eta1 * eta2)` over the node's sampled children.
pub fn ib_score(parent_density: f64, children: &[BranchStat], beta: f64) -> Result<IBScoreEstimate> {
    if children.is_empty() {
        return Err(Error::InvalidArgument("IB-Score of a node without children".into()));
    }
    let pairs = children
        .iter()
        .map(|&c| eta_pair(c, parent_density, beta))
        .collect::<Result<Vec<_>>>()?;
    let b = pairs.len() as f64;
    let value = 1.0 + beta / b * pairs.iter().map(|p| p.eta1 * p.eta2).sum::<f64>();
    let cov = cov_eta(&pairs)?;
    Ok(IBScoreEstimate {
        value,
        n_children: pairs.len(),
        pairs,
        cov,
    })
}

/// `1 + beta * (cov + mean(eta1) * mean(eta2))`.
pub fn decomposed_value(est: &IBScoreEstimate, beta: f64) -> f64 {
    let n = est.pairs.len() as f64;
    let m1 = est.pairs.iter().map(|p| p.eta1).sum::<f64>() / n;
    let m2 = est.pairs.iter().map(|p| p.eta2).sum::<f64>() / n;
    1.0 + beta * (est.cov + m1 * m2)
}
