//! Group-rollout policy-gradient training loop and evaluation runs.
//!
//! For every training prompt the current policy samples a group of K
//! complete episodes; trajectory rewards are standardized within the group
//! and each decision in a trajectory receives that trajectory's advantage.
//! Updates use the clipped surrogate with old log-probabilities captured at
//! collection time, one plain gradient-ascent step per group.

use std::cell::RefCell;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{run_episode, EpisodeError, SimEnv};
use crate::metrics;
use crate::policy::{
    action_distribution, action_record_for, log_prob_gradient, sample_index, HeuristicThresholds,
    Navigator, PolicyParams, StateFeatures, NUM_ACTIONS, NUM_FEATURES,
};
use crate::reward::{
    compute_stats, group_advantages, variant_from_stats, RewardError, RewardVariant, RewardWeights,
};
use crate::rng::SeedTree;
use crate::trajectory::{ActionChoice, ActionRecord, PromptSpec, RolloutGroup, Trajectory};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error("episode failure: {0}")]
    Episode(String),
    #[error("non-finite gradient at step {step}; parameters left unchanged")]
    NonFiniteGradient { step: usize },
    #[error("empty prompt pool")]
    EmptyPool,
}

impl From<EpisodeError> for TrainError {
    fn from(e: EpisodeError) -> Self {
        TrainError::Episode(e.to_string())
    }
}

/// How the policy is initialized before optimization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyInit {
    Zeros,
    /// Least-squares fit of the softmax logits to the heuristic policy's
    /// decisions over a feature grid.
    HeuristicFit,
}

impl std::str::FromStr for PolicyInit {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "zeros" => Ok(PolicyInit::Zeros),
            "heuristic-fit" => Ok(PolicyInit::HeuristicFit),
            other => Err(format!("unknown policy init '{other}'")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Rollout group size K.
    pub group_size: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub clip_epsilon: f64,
    pub reward_variant: RewardVariant,
    pub weights: RewardWeights,
    pub seed: u64,
    pub prompts_per_step: usize,
    pub init: PolicyInit,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            group_size: 8,
            steps: 300,
            learning_rate: 0.12,
            clip_epsilon: 0.2,
            reward_variant: RewardVariant::PreGrpo,
            weights: RewardWeights::default(),
            seed: 0,
            prompts_per_step: 8,
            init: PolicyInit::HeuristicFit,
        }
    }
}

/// One recorded policy decision (turn 2 onward; the forced turn-1
/// generation carries no gradient).
#[derive(Debug, Clone, PartialEq)]
pub struct Decision {
    pub turn: usize,
    pub features: StateFeatures,
    pub choice: ActionChoice,
    pub old_log_prob: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CollectedRollout {
    pub trajectory: Trajectory,
    pub decisions: Vec<Decision>,
}

/// K rollouts for one prompt with their collection-time log-probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct CollectedGroup {
    pub prompt: PromptSpec,
    pub rollouts: Vec<CollectedRollout>,
}

impl CollectedGroup {
    pub fn to_rollout_group(&self) -> RolloutGroup {
        RolloutGroup {
            prompt: self.prompt.clone(),
            trajectories: self.rollouts.iter().map(|r| r.trajectory.clone()).collect(),
        }
    }
}

/// Navigator wrapper that samples from the softmax policy and records each
/// decision with its log-probability. One recorder per episode.
struct RecordingNavigator<'a> {
    params: &'a PolicyParams,
    log: RefCell<Vec<Decision>>,
}

impl Navigator for RecordingNavigator<'_> {
    fn decide(
        &self,
        feat: &StateFeatures,
        turn: usize,
        prompt_id: &str,
        rng: &mut rand_chacha::ChaCha8Rng,
    ) -> ActionRecord {
        let probs = action_distribution(self.params, feat, turn)
            .expect("recording navigator saw non-finite features");
        let idx = sample_index(&probs, rng);
        let choice = ActionChoice::from_index(idx).unwrap();
        if turn >= 2 {
            self.log.borrow_mut().push(Decision {
                turn,
                features: *feat,
                choice,
                old_log_prob: probs[idx].ln(),
            });
        }
        action_record_for(choice, prompt_id, turn)
    }
}

/// Sample K independent rollouts for one prompt under the current policy.
pub fn collect_group(
    params: &PolicyParams,
    env: &SimEnv,
    prompt: &PromptSpec,
    k: usize,
    t_max: usize,
    tree: &SeedTree,
) -> Result<CollectedGroup, TrainError> {
    assert!(k >= 2, "group size must be >= 2");
    let rollouts = (0..k)
        .map(|i| {
            let recorder = RecordingNavigator {
                params,
                log: RefCell::new(Vec::new()),
            };
            let trajectory = run_episode(
                &recorder,
                env,
                prompt,
                t_max,
                &tree.child_idx("rollout", i as u64),
            )?;
            Ok(CollectedRollout {
                trajectory,
                decisions: recorder.log.into_inner(),
            })
        })
        .collect::<Result<Vec<_>, TrainError>>()?;
    Ok(CollectedGroup {
        prompt: prompt.clone(),
        rollouts,
    })
}

/// Clipped surrogate value and whether the unclipped branch carries the
/// gradient: `min(ratio*adv, clamp(ratio, 1-eps, 1+eps)*adv)`.
pub fn clipped_surrogate(ratio: f64, advantage: f64, clip_epsilon: f64) -> (f64, bool) {
    let clipped_ratio = ratio.clamp(1.0 - clip_epsilon, 1.0 + clip_epsilon);
    let value = (ratio * advantage).min(clipped_ratio * advantage);
    let active = if advantage >= 0.0 {
        ratio <= 1.0 + clip_epsilon
    } else {
        ratio >= 1.0 - clip_epsilon
    };
    (value, active)
}

/// Diagnostics from one group update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepDiagnostics {
    pub mean_reward: f64,
    pub clip_fraction: f64,
    pub mean_peak: f64,
    pub mean_retention: f64,
    pub mean_efficiency: f64,
    pub mean_format: f64,
    pub grad_norm: f64,
}

/// One clipped policy-gradient ascent step on a collected group. The
/// trajectory advantage is broadcast to every decision in that trajectory;
/// per-trajectory sums are length-normalized and averaged across the group.
pub fn grpo_update(
    params: &PolicyParams,
    group: &CollectedGroup,
    config: &TrainConfig,
) -> Result<(PolicyParams, StepDiagnostics), TrainError> {
    let stats = group
        .rollouts
        .iter()
        .map(|r| compute_stats(&r.trajectory, &config.weights))
        .collect::<Result<Vec<_>, _>>()?;
    let rewards: Vec<f64> = stats
        .iter()
        .map(|s| variant_from_stats(s, &config.weights, config.reward_variant))
        .collect();
    let advantages = group_advantages(&rewards, config.weights.epsilon)?;

    let k = group.rollouts.len() as f64;
    let mut grad = [[0.0; NUM_FEATURES]; NUM_ACTIONS];
    let mut decisions = 0usize;
    let mut clipped = 0usize;
    for (rollout, &advantage) in group.rollouts.iter().zip(&advantages) {
        if rollout.decisions.is_empty() {
            continue;
        }
        let weight = 1.0 / (k * rollout.decisions.len() as f64);
        for decision in &rollout.decisions {
            decisions += 1;
            let new_log_prob = crate::policy::log_prob(
                params,
                &decision.features,
                decision.turn,
                decision.choice,
            )
            .map_err(|e| TrainError::Episode(e.to_string()))?;
            let ratio = (new_log_prob - decision.old_log_prob).exp();
            if !ratio.is_finite() || !advantage.is_finite() {
                return Err(TrainError::NonFiniteGradient { step: 0 });
            }
            let (_, active) = clipped_surrogate(ratio, advantage, config.clip_epsilon);
            if !active {
                clipped += 1;
                continue;
            }
            let g = log_prob_gradient(params, &decision.features, decision.turn, decision.choice)
                .map_err(|e| TrainError::Episode(e.to_string()))?;
            for (grad_row, g_row) in grad.iter_mut().zip(&g) {
                for (grad_cell, g_cell) in grad_row.iter_mut().zip(g_row) {
                    *grad_cell += weight * advantage * ratio * g_cell;
                }
            }
        }
    }

    let grad_norm = grad
        .iter()
        .flatten()
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    if !grad_norm.is_finite() {
        return Err(TrainError::NonFiniteGradient { step: 0 });
    }

    let mut updated = params.clone();
    for (row, grad_row) in updated.weights.iter_mut().zip(&grad) {
        for (cell, g) in row.iter_mut().zip(grad_row) {
            *cell += config.learning_rate * g;
        }
    }

    let n = stats.len() as f64;
    let diag = StepDiagnostics {
        mean_reward: rewards.iter().sum::<f64>() / n,
        clip_fraction: if decisions > 0 {
            clipped as f64 / decisions as f64
        } else {
            0.0
        },
        mean_peak: stats.iter().map(|s| s.peak).sum::<f64>() / n,
        mean_retention: stats.iter().map(|s| s.retention).sum::<f64>() / n,
        mean_efficiency: stats.iter().map(|s| s.efficiency).sum::<f64>() / n,
        mean_format: stats.iter().map(|s| s.format_ok).sum::<f64>() / n,
        grad_norm,
    };
    Ok((updated, diag))
}

/// One line of the persisted training curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainCurvePoint {
    pub step: usize,
    pub mean_reward: f64,
    pub clip_fraction: f64,
    pub stop_share: f64,
    pub refine_share: f64,
    pub regenerate_share: f64,
    pub mean_turns: f64,
    pub mean_peak: f64,
    pub mean_gap: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: PolicyParams,
    pub curve: Vec<TrainCurvePoint>,
}

/// Initial parameters for a config.
pub fn initial_params(init: PolicyInit) -> PolicyParams {
    match init {
        PolicyInit::Zeros => PolicyParams::zeros(),
        PolicyInit::HeuristicFit => heuristic_fit_params(&HeuristicThresholds::default()),
    }
}

/// Run the full training loop over a prompt pool. Deterministic in
/// `(env.config.seed, config.seed)` regardless of worker count.
pub fn train(
    config: &TrainConfig,
    env: &SimEnv,
    pool: &[PromptSpec],
) -> Result<TrainOutcome, TrainError> {
    if pool.is_empty() {
        return Err(TrainError::EmptyPool);
    }
    let mut params = initial_params(config.init);
    let root = SeedTree::from_root(env.config.seed)
        .child("train")
        .child_idx("run", config.seed);
    let mut curve = Vec::with_capacity(config.steps);

    for step in 0..config.steps {
        let step_tree = root.child_idx("step", step as u64);
        let groups: Vec<CollectedGroup> = (0..config.prompts_per_step)
            .into_par_iter()
            .map(|j| {
                let prompt = &pool[(step * config.prompts_per_step + j) % pool.len()];
                collect_group(
                    &params,
                    env,
                    prompt,
                    config.group_size,
                    config.weights.t_max,
                    &step_tree.child_idx("slot", j as u64),
                )
            })
            .collect::<Result<Vec<_>, _>>()?;

        let mut diags = Vec::with_capacity(groups.len());
        for group in &groups {
            let (updated, diag) =
                grpo_update(&params, group, config).map_err(|e| match e {
                    TrainError::NonFiniteGradient { .. } => {
                        TrainError::NonFiniteGradient { step }
                    }
                    other => other,
                })?;
            params = updated;
            diags.push(diag);
        }

        let trajectories: Vec<Trajectory> = groups
            .iter()
            .flat_map(|g| g.rollouts.iter().map(|r| r.trajectory.clone()))
            .collect();
        let shares = metrics::action_distribution(&trajectories).unwrap_or(
            metrics::ActionShares {
                stop: 0.0,
                refine: 0.0,
                regenerate: 0.0,
                decisions: 0,
            },
        );
        let n = diags.len() as f64;
        curve.push(TrainCurvePoint {
            step,
            mean_reward: diags.iter().map(|d| d.mean_reward).sum::<f64>() / n,
            clip_fraction: diags.iter().map(|d| d.clip_fraction).sum::<f64>() / n,
            stop_share: shares.stop,
            refine_share: shares.refine,
            regenerate_share: shares.regenerate,
            mean_turns: metrics::avg_turns(&trajectories).unwrap_or(0.0),
            mean_peak: diags.iter().map(|d| d.mean_peak).sum::<f64>() / n,
            mean_gap: diags
                .iter()
                .map(|d| d.mean_peak - d.mean_retention)
                .sum::<f64>()
                / n,
        });
    }

    Ok(TrainOutcome { params, curve })
}

/// Evaluation summary over a prompt pool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub episodes: usize,
    pub mean_best_score: f64,
    pub mean_final_score: f64,
    pub best_final_delta: f64,
    pub per_turn_curve: Vec<(usize, f64)>,
    pub action_shares: Option<metrics::ActionShares>,
    pub avg_turns: f64,
    pub mean_peak_norm: f64,
    pub mean_retention_norm: f64,
}

#[derive(Debug, Clone)]
pub struct EvalRun {
    pub report: EvalReport,
    pub trajectories: Vec<Trajectory>,
}

/// Roll out a navigator over every (prompt, seed) pair and fold the
/// diagnostics. Same seeds, same report.
pub fn evaluate(
    nav: &(dyn Navigator + Sync),
    env: &SimEnv,
    pool: &[PromptSpec],
    t_max: usize,
    seeds: &[u64],
) -> Result<EvalRun, TrainError> {
    if pool.is_empty() || seeds.is_empty() {
        return Err(TrainError::EmptyPool);
    }
    let jobs: Vec<(usize, u64)> = (0..pool.len())
        .flat_map(|i| seeds.iter().map(move |&s| (i, s)))
        .collect();
    let trajectories: Vec<Trajectory> = jobs
        .par_iter()
        .map(|&(i, seed)| {
            let tree = SeedTree::from_root(env.config.seed)
                .child("eval")
                .child_idx("seed", seed)
                .child_idx("prompt", i as u64);
            run_episode(nav, env, &pool[i], t_max, &tree).map_err(TrainError::from)
        })
        .collect::<Result<Vec<_>, _>>()?;

    let bvf = metrics::best_vs_final(&trajectories).map_err(|e| TrainError::Episode(e.to_string()))?;
    let weights = RewardWeights {
        t_max,
        ..RewardWeights::default()
    };
    let stats: Vec<_> = trajectories
        .iter()
        .map(|t| compute_stats(t, &weights))
        .collect::<Result<Vec<_>, _>>()?;
    let n = stats.len() as f64;
    let report = EvalReport {
        episodes: trajectories.len(),
        mean_best_score: bvf.mean_best,
        mean_final_score: bvf.mean_final,
        best_final_delta: bvf.delta,
        per_turn_curve: metrics::per_turn_curve(&trajectories),
        action_shares: metrics::action_distribution(&trajectories).ok(),
        avg_turns: metrics::avg_turns(&trajectories)
            .map_err(|e| TrainError::Episode(e.to_string()))?,
        mean_peak_norm: stats.iter().map(|s| s.peak).sum::<f64>() / n,
        mean_retention_norm: stats.iter().map(|s| s.retention).sum::<f64>() / n,
    };
    Ok(EvalRun {
        report,
        trajectories,
    })
}

/// Fit softmax logits to the heuristic policy's decisions by least squares
/// over a feature grid, then sharpen. Gives the learner a cold start that
/// behaves like the threshold rule.
pub fn heuristic_fit_params(thresholds: &HeuristicThresholds) -> PolicyParams {
    const SHARPEN: f64 = 40.0;
    let mut rows: Vec<[f64; NUM_FEATURES]> = Vec::new();
    let mut targets: Vec<usize> = Vec::new();
    for score_step in 0..=10 {
        let score = score_step as f64 / 10.0;
        for turn_frac in [1.0 / 3.0, 2.0 / 3.0] {
            for delta in [-0.2, 0.0, 0.2] {
                for difficulty in [0.25, 0.75] {
                    let feat = StateFeatures {
                        current_score_norm: score,
                        turn_frac,
                        score_delta: delta,
                        prompt_difficulty: difficulty,
                        bias: 1.0,
                    };
                    let action = crate::policy::heuristic_policy(&feat, thresholds, "fit", 2);
                    rows.push(feat.as_array());
                    targets.push(action.choice.index());
                }
            }
        }
    }

    // normal equations with a small ridge term
    let mut xtx = [[0.0f64; NUM_FEATURES]; NUM_FEATURES];
    for row in &rows {
        for i in 0..NUM_FEATURES {
            for j in 0..NUM_FEATURES {
                xtx[i][j] += row[i] * row[j];
            }
        }
    }
    for (i, row) in xtx.iter_mut().enumerate() {
        row[i] += 1e-6;
    }

    let mut params = PolicyParams::zeros();
    for action in 0..NUM_ACTIONS {
        let mut xty = [0.0f64; NUM_FEATURES];
        for (row, &target) in rows.iter().zip(&targets) {
            let y = if target == action { 1.0 } else { 0.0 };
            for i in 0..NUM_FEATURES {
                xty[i] += row[i] * y;
            }
        }
        let w = solve_linear(xtx, xty);
        for (cell, fitted) in params.weights[action].iter_mut().zip(&w) {
            *cell = SHARPEN * fitted;
        }
    }
    params
}

/// Gaussian elimination with partial pivoting for the 5x5 normal equations.
fn solve_linear(
    mut a: [[f64; NUM_FEATURES]; NUM_FEATURES],
    mut b: [f64; NUM_FEATURES],
) -> [f64; NUM_FEATURES] {
    let n = NUM_FEATURES;
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i][col].abs().partial_cmp(&a[j][col].abs()).unwrap())
            .unwrap();
        a.swap(col, pivot);
        b.swap(col, pivot);
        let diag = a[col][col];
        for row in (col + 1)..n {
            let factor = a[row][col] / diag;
            let (pivot_rows, rest) = a.split_at_mut(row);
            for (cell, pivot_cell) in rest[0][col..n].iter_mut().zip(&pivot_rows[col][col..n]) {
                *cell -= factor * pivot_cell;
            }
            b[row] -= factor * b[col];
        }
    }
    let mut x = [0.0; NUM_FEATURES];
    for col in (0..n).rev() {
        let mut sum = b[col];
        for (coeff, xk) in a[col][(col + 1)..n].iter().zip(&x[(col + 1)..n]) {
            sum -= coeff * xk;
        }
        x[col] = sum / a[col][col];
    }
    x
}
