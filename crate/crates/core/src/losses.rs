//! Training objective: task loss plus weighted load-balancing and expert
//! diversity regularizers,
//! `total = task + lambda1 * balance + lambda2 * diversity`.
//!
//! `balance = sum_k (f_k - 1/N_e)^2`. Hard utilization counts every top-K
//! assignment and divides by the number of assignments. Counts carry no
//! gradient, so training uses the soft frequency `f_k = mean_i p_{i,k}`, where
//! `p_i` is query `i`'s masked routing distribution renormalized over its pool.
//!
//! `diversity` is the negative mean pairwise Jensen-Shannon divergence
//! between experts' softmaxed responses on a shared probe set.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{jsd, softmax_temp, Tape, Var, Vector};
use crate::routing::RoutingTrace;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    /// Shared probe inputs for the diversity term.
    pub n_probes: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda1: 0.01,
            lambda2: 0.001,
            n_probes: 32,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (key, v) in [("loss.lambda1", self.lambda1), ("loss.lambda2", self.lambda2)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{key} must be a finite value >= 0, got {v}")));
            }
        }
        if self.n_probes == 0 {
            return Err(Error::Config("loss.n_probes must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtilizationStats {
    pub counts: Vec<u64>,
    pub f: Vec<f64>,
}

pub fn utilization(trace: &RoutingTrace) -> Result<UtilizationStats> {
    if trace.is_empty() {
        return Err(Error::Input("utilization of an empty trace".into()));
    }
    let counts = trace.counts().to_vec();
    let total: u64 = counts.iter().sum();
    let f = counts.iter().map(|&c| c as f64 / total as f64).collect();
    Ok(UtilizationStats { counts, f })
}

pub fn balance_loss(f: &[f64]) -> f64 {
    let target = 1.0 / f.len() as f64;
    f.iter().map(|v| (v - target) * (v - target)).sum()
}

/// Differentiable balance loss over per-query probability vectors.
pub(crate) fn soft_balance_t(tape: &mut Tape, soft: &[Var], n_experts: usize) -> Result<(Var, Var)> {
    let f = tape.mean(soft)?;
    let loss = tape.sq_dev(f, 1.0 / n_experts as f64);
    Ok((loss, f))
}

/// Mean pairwise JSD between the given distributions.
pub fn mean_pairwise_jsd(dists: &[&[f64]]) -> Result<f64> {
    if dists.len() < 2 {
        return Err(Error::Config(format!("pairwise divergence needs at least 2 distributions, got {}", dists.len())));
    }
    let mut acc = 0.0;
    let mut pairs = 0usize;
    for a in 0..dists.len() {
        for b in a + 1..dists.len() {
            acc += jsd(dists[a], dists[b])?;
            pairs += 1;
        }
    }
    Ok(acc / pairs as f64)
}

/// `responses[k][p]` is expert `k`'s output on probe `p`.
pub fn diversity_loss(responses: &[Vec<Vector>]) -> Result<f64> {
    if responses.len() < 2 {
        return Err(Error::Config(format!(
            "diversity loss needs at least 2 experts, got {}",
            responses.len()
        )));
    }
    let n_probes = responses[0].len();
    if n_probes == 0 || responses.iter().any(|r| r.len() != n_probes) {
        return Err(Error::Input("every expert must answer the same non-empty probe set".into()));
    }
    let mut acc = 0.0;
    for p in 0..n_probes {
        let dists = responses
            .iter()
            .map(|r| softmax_temp(&r[p], 1.0).map(|s| s.into_vec()))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&[f64]> = dists.iter().map(Vec::as_slice).collect();
        acc += mean_pairwise_jsd(&refs)?;
    }
    Ok(-acc / n_probes as f64)
}

/// Taped diversity loss; `responses[k][p]` as in [`diversity_loss`].
pub(crate) fn diversity_t(tape: &mut Tape, responses: &[Vec<Var>]) -> Result<Var> {
    if responses.len() < 2 {
        return Err(Error::Config(format!(
            "diversity loss needs at least 2 experts, got {}",
            responses.len()
        )));
    }
    let n_probes = responses[0].len();
    let mut terms = Vec::new();
    for p in 0..n_probes {
        let dists = responses
            .iter()
            .map(|r| tape.softmax_temp(r[p], 1.0))
            .collect::<Result<Vec<_>>>()?;
        for a in 0..dists.len() {
            for b in a + 1..dists.len() {
                terms.push(tape.jsd(dists[a], dists[b])?);
            }
        }
    }
    let n = terms.len() as f64;
    tape.lincomb(&terms.iter().map(|&t| (-1.0 / n, t)).collect::<Vec<_>>())
}

/// One step's loss components.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub task: f64,
    pub balance_hard: f64,
    pub balance_soft: f64,
    pub diversity: f64,
    pub total: f64,
}

pub fn combine(task: f64, balance: f64, diversity: f64, cfg: &LossConfig) -> f64 {
    task + cfg.lambda1 * balance + cfg.lambda2 * diversity
}

/// Evaluation-mode total: hard-count balance plus probe diversity.
pub fn total_loss(
    task: f64,
    trace: &RoutingTrace,
    expert_outputs: &[Vec<Vector>],
    losscfg: &LossConfig,
) -> Result<LossBreakdown> {
    let balance = balance_loss(&utilization(trace)?.f);
    let diversity = diversity_loss(expert_outputs)?;
    Ok(LossBreakdown {
        task,
        balance_hard: balance,
        balance_soft: balance,
        diversity,
        total: combine(task, balance, diversity, losscfg),
    })
}
