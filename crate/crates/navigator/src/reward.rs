//! Trajectory-level reward and group-relative advantage normalization.
//!
//! Each trajectory is scored by four statistics — peak (best normalized
//! score), retention (final normalized score), efficiency (turns consumed),
//! and format correctness — combined as `P + alpha*R - beta*E + gamma*F`.
//! Rewards are standardized within a rollout group before policy updates.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trajectory::{score_sequence, Trajectory, TrajectoryError};

#[derive(Debug, Error, PartialEq)]
pub enum RewardError {
    #[error("budget violation: {turns} candidate turns exceed t_max {t_max}")]
    BudgetViolation { turns: usize, t_max: usize },
    #[error("degenerate group: {0} rewards, need >= 2")]
    DegenerateGroup(usize),
    #[error(transparent)]
    Trajectory(#[from] TrajectoryError),
}

/// Reward weights and scales.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardWeights {
    /// Retention weight.
    pub alpha: f64,
    /// Turn-cost weight.
    pub beta: f64,
    /// Format weight.
    pub gamma: f64,
    /// Reviewer score ceiling used for normalization.
    pub rho_max: f64,
    /// Turn budget.
    pub t_max: usize,
    /// Guard added to the group standard deviation.
    pub epsilon: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self {
            alpha: 0.25,
            beta: 0.025,
            gamma: 0.1,
            rho_max: 5.0,
            t_max: 3,
            epsilon: 1e-8,
        }
    }
}

/// Per-trajectory statistics feeding the reward.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryStats {
    /// Best normalized score across the trajectory.
    pub peak: f64,
    /// Final normalized score.
    pub retention: f64,
    /// `(T-1)/(t_max-1)`, or 0 for a one-turn budget.
    pub efficiency: f64,
    /// 1 when every action in the trajectory is well formed, else 0.
    pub format_ok: f64,
    /// Number of candidate-producing turns.
    pub length: usize,
}

/// Reward variants used in ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardVariant {
    PreGrpo,
    FinalOnly,
    BestOnly,
    NoPeak,
    NoRetention,
    NoEfficiency,
}

impl RewardVariant {
    pub const ALL: [RewardVariant; 6] = [
        RewardVariant::PreGrpo,
        RewardVariant::FinalOnly,
        RewardVariant::BestOnly,
        RewardVariant::NoPeak,
        RewardVariant::NoRetention,
        RewardVariant::NoEfficiency,
    ];
}

impl std::str::FromStr for RewardVariant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "pre-grpo" => Ok(RewardVariant::PreGrpo),
            "final-only" => Ok(RewardVariant::FinalOnly),
            "best-only" => Ok(RewardVariant::BestOnly),
            "no-peak" => Ok(RewardVariant::NoPeak),
            "no-retention" => Ok(RewardVariant::NoRetention),
            "no-efficiency" => Ok(RewardVariant::NoEfficiency),
            other => Err(format!("unknown reward variant '{other}'")),
        }
    }
}

impl std::fmt::Display for RewardVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            RewardVariant::PreGrpo => "pre-grpo",
            RewardVariant::FinalOnly => "final-only",
            RewardVariant::BestOnly => "best-only",
            RewardVariant::NoPeak => "no-peak",
            RewardVariant::NoRetention => "no-retention",
            RewardVariant::NoEfficiency => "no-efficiency",
        };
        f.write_str(s)
    }
}

/// Compute the trajectory statistics.
///
/// Scores are normalized by `rho_max` and clamped to `[0,1]` defensively;
/// the reviewer contract already bounds them. A one-turn budget has no
/// efficiency gradient, so efficiency is 0 when `t_max == 1`.
pub fn compute_stats(traj: &Trajectory, w: &RewardWeights) -> Result<TrajectoryStats, RewardError> {
    let scores = score_sequence(traj)?;
    let t = scores.len();
    if t > w.t_max {
        return Err(RewardError::BudgetViolation {
            turns: t,
            t_max: w.t_max,
        });
    }
    let norm: Vec<f64> = scores
        .iter()
        .map(|s| (s / w.rho_max).clamp(0.0, 1.0))
        .collect();
    let peak = norm.iter().cloned().fold(f64::MIN, f64::max);
    let retention = *norm.last().unwrap();
    let efficiency = if w.t_max > 1 {
        (t - 1) as f64 / (w.t_max - 1) as f64
    } else {
        0.0
    };
    let format_ok = if traj.turns.iter().all(|t| t.action.is_well_formed()) {
        1.0
    } else {
        0.0
    };
    Ok(TrajectoryStats {
        peak,
        retention,
        efficiency,
        format_ok,
        length: t,
    })
}

/// The full trajectory reward `P + alpha*R - beta*E + gamma*F`.
pub fn pre_grpo_reward(stats: &TrajectoryStats, w: &RewardWeights) -> f64 {
    stats.peak + w.alpha * stats.retention - w.beta * stats.efficiency + w.gamma * stats.format_ok
}

/// Reward under the requested variant.
pub fn reward_variant(
    traj: &Trajectory,
    w: &RewardWeights,
    variant: RewardVariant,
) -> Result<f64, RewardError> {
    let stats = compute_stats(traj, w)?;
    Ok(variant_from_stats(&stats, w, variant))
}

/// Variant reward from precomputed statistics.
pub fn variant_from_stats(stats: &TrajectoryStats, w: &RewardWeights, variant: RewardVariant) -> f64 {
    let format_term = w.gamma * stats.format_ok;
    match variant {
        RewardVariant::PreGrpo => pre_grpo_reward(stats, w),
        RewardVariant::FinalOnly => stats.retention + format_term,
        RewardVariant::BestOnly => stats.peak + format_term,
        RewardVariant::NoPeak => {
            w.alpha * stats.retention - w.beta * stats.efficiency + format_term
        }
        RewardVariant::NoRetention => stats.peak - w.beta * stats.efficiency + format_term,
        RewardVariant::NoEfficiency => stats.peak + w.alpha * stats.retention + format_term,
    }
}

/// Standardize rewards within a rollout group: `(r - mean) / (std + eps)`
/// with the population standard deviation.
pub fn group_advantages(rewards: &[f64], epsilon: f64) -> Result<Vec<f64>, RewardError> {
    let k = rewards.len();
    if k < 2 {
        return Err(RewardError::DegenerateGroup(k));
    }
    let mean = rewards.iter().sum::<f64>() / k as f64;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / k as f64;
    let std = var.sqrt();
    Ok(rewards.iter().map(|r| (r - mean) / (std + epsilon)).collect())
}
