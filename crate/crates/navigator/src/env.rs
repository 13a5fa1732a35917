//! The simulated generator/reviewer environment and the episode loop.
//!
//! The simulator stands in for a real text-to-image generator and a
//! multimodal reviewer: each candidate carries a hidden latent quality in
//! `[0,1]`, regeneration redraws it from a difficulty-dependent base
//! distribution, refinement applies a piecewise-linear expected gain that
//! turns negative past a degradation knee, and the reviewer maps latent
//! quality to noisy visual/instruction sub-scores on the 0-5 scale.
//!
//! Everything is driven by hierarchical RNG streams ([`crate::rng`]), so an
//! episode replays bit-identically from its seed.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::policy::{Navigator, StateFeatures};
use crate::rng::SeedTree;
use crate::trajectory::{
    ActionChoice, Candidate, PromptSpec, ReviewerFeedback, TerminationReason, Trajectory,
    TurnRecord, SCORE_MAX,
};

#[derive(Debug, Error)]
pub enum EnvironmentError {
    #[error("generator failure: {0}")]
    Generator(String),
    #[error("reviewer failure: {0}")]
    Reviewer(String),
    #[error("bad environment config: {0}")]
    Config(String),
}

/// An episode failure with the turn it happened on and the turns completed
/// before it, so partial trajectories can still be logged.
#[derive(Debug, Error)]
#[error("episode failed at turn {turn}: {source}")]
pub struct EpisodeError {
    pub turn: usize,
    pub partial: Vec<TurnRecord>,
    #[source]
    pub source: EnvironmentError,
}

/// Generator/reviewer interface shared by the simulator and live adapters.
///
/// `tag` names the candidate within its episode (turn, branch) so candidate
/// ids stay deterministic. Navigators must regenerate on turn 1.
pub trait Environment {
    /// Produce a fresh candidate from scratch. `instruction` is the revised
    /// generation prompt for this action.
    fn generate(
        &self,
        prompt: &PromptSpec,
        instruction: &str,
        tag: &str,
        rng: &mut ChaCha8Rng,
    ) -> Result<Candidate, EnvironmentError>;

    /// Edit the current candidate in place, guided by `instruction`.
    fn refine(
        &self,
        prompt: &PromptSpec,
        current: &Candidate,
        instruction: &str,
        tag: &str,
        rng: &mut ChaCha8Rng,
    ) -> Result<Candidate, EnvironmentError>;

    /// Critique a candidate.
    fn review(
        &self,
        prompt: &PromptSpec,
        candidate: &Candidate,
        rng: &mut ChaCha8Rng,
    ) -> Result<ReviewerFeedback, EnvironmentError>;
}

/// Simulation parameters. Defaults are the repo's documented configuration;
/// every field can be overridden from the run config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimEnvConfig {
    /// Mean initial latent quality at difficulty 0.
    pub base_quality_intercept: f64,
    /// Change in mean initial latent per unit difficulty.
    pub base_quality_slope: f64,
    /// Std of the initial/regenerated latent.
    pub regen_std: f64,
    /// Expected refine gain at latent 0.
    pub refine_gain_at_zero: f64,
    /// Latent where the refine gain peaks.
    pub refine_mid_quality: f64,
    /// Peak expected refine gain.
    pub refine_gain_peak: f64,
    /// Degradation knee: expected gain is 0 here and negative beyond.
    pub refine_knee: f64,
    /// Expected refine gain at latent 1 (negative: over-editing hurts).
    pub refine_gain_at_one: f64,
    /// Std of the refine step.
    pub refine_std: f64,
    /// Std of the reviewer sub-score noise (raw 0-5 units).
    pub reviewer_noise_std: f64,
    /// Base seed of the environment; run seeds are layered on top.
    pub seed: u64,
}

impl Default for SimEnvConfig {
    fn default() -> Self {
        Self {
            base_quality_intercept: 0.95,
            base_quality_slope: -0.65,
            regen_std: 0.15,
            refine_gain_at_zero: 0.05,
            refine_mid_quality: 0.45,
            refine_gain_peak: 0.25,
            refine_knee: 0.80,
            refine_gain_at_one: -0.45,
            refine_std: 0.03,
            reviewer_noise_std: 0.03,
            seed: 0,
        }
    }
}

impl SimEnvConfig {
    pub fn validate(&self) -> Result<(), EnvironmentError> {
        for (name, v) in [
            ("regen_std", self.regen_std),
            ("refine_std", self.refine_std),
            ("reviewer_noise_std", self.reviewer_noise_std),
        ] {
            if v < 0.0 || !v.is_finite() {
                return Err(EnvironmentError::Config(format!("{name} must be >= 0, got {v}")));
            }
        }
        if !(self.refine_mid_quality > 0.0
            && self.refine_mid_quality < self.refine_knee
            && self.refine_knee < 1.0)
        {
            return Err(EnvironmentError::Config(format!(
                "need 0 < mid ({}) < knee ({}) < 1",
                self.refine_mid_quality, self.refine_knee
            )));
        }
        Ok(())
    }

    /// Mean initial latent quality for a prompt difficulty.
    pub fn base_quality_mean(&self, difficulty: f64) -> f64 {
        (self.base_quality_intercept + self.base_quality_slope * difficulty).clamp(0.0, 1.0)
    }

    /// Expected refine gain: piecewise-linear through
    /// `(0, gain_at_zero) -> (mid, gain_peak) -> (knee, 0) -> (1, gain_at_one)`.
    pub fn refine_gain(&self, latent: f64) -> f64 {
        let q = latent.clamp(0.0, 1.0);
        let lerp = |x0: f64, y0: f64, x1: f64, y1: f64, x: f64| {
            y0 + (y1 - y0) * (x - x0) / (x1 - x0)
        };
        if q <= self.refine_mid_quality {
            lerp(0.0, self.refine_gain_at_zero, self.refine_mid_quality, self.refine_gain_peak, q)
        } else if q <= self.refine_knee {
            lerp(self.refine_mid_quality, self.refine_gain_peak, self.refine_knee, 0.0, q)
        } else {
            lerp(self.refine_knee, 0.0, 1.0, self.refine_gain_at_one, q)
        }
    }
}

/// The seeded stochastic simulator.
#[derive(Debug, Clone)]
pub struct SimEnv {
    pub config: SimEnvConfig,
}

impl SimEnv {
    pub fn new(config: SimEnvConfig) -> Self {
        Self { config }
    }

    fn sample_normal(mean: f64, std: f64, rng: &mut ChaCha8Rng) -> f64 {
        if std == 0.0 {
            return mean;
        }
        Normal::new(mean, std).unwrap().sample(rng)
    }

    fn latent_of(candidate: &Candidate) -> Result<f64, EnvironmentError> {
        candidate.latent_quality.ok_or_else(|| {
            EnvironmentError::Generator(format!(
                "candidate {} has no latent quality (not a simulator candidate)",
                candidate.id
            ))
        })
    }
}

fn diagnosis_for(visual: f64, instruction: f64) -> String {
    let verdict = if instruction >= 4.5 {
        "request fully satisfied"
    } else if instruction >= 3.0 {
        "request partially satisfied; details off"
    } else {
        "request not satisfied; key elements missing"
    };
    format!("{verdict} (visual {visual:.2}, instruction {instruction:.2})")
}

impl Environment for SimEnv {
    fn generate(
        &self,
        prompt: &PromptSpec,
        _instruction: &str,
        tag: &str,
        rng: &mut ChaCha8Rng,
    ) -> Result<Candidate, EnvironmentError> {
        let mean = self.config.base_quality_mean(prompt.difficulty);
        let latent = Self::sample_normal(mean, self.config.regen_std, rng).clamp(0.0, 1.0);
        let id = format!("{}-{tag}", prompt.id);
        Ok(Candidate {
            payload_ref: format!("sim://{id}"),
            id,
            latent_quality: Some(latent),
        })
    }

    fn refine(
        &self,
        prompt: &PromptSpec,
        current: &Candidate,
        _instruction: &str,
        tag: &str,
        rng: &mut ChaCha8Rng,
    ) -> Result<Candidate, EnvironmentError> {
        let latent = Self::latent_of(current)?;
        let gain = self.config.refine_gain(latent);
        let step = Self::sample_normal(gain, self.config.refine_std, rng);
        let new_latent = (latent + step).clamp(0.0, 1.0);
        let id = format!("{}-{tag}", prompt.id);
        Ok(Candidate {
            payload_ref: format!("sim://{id}"),
            id,
            latent_quality: Some(new_latent),
        })
    }

    fn review(
        &self,
        _prompt: &PromptSpec,
        candidate: &Candidate,
        rng: &mut ChaCha8Rng,
    ) -> Result<ReviewerFeedback, EnvironmentError> {
        let latent = Self::latent_of(candidate)?;
        let noise_std = self.config.reviewer_noise_std;
        // fixed draw order: instruction noise first, then visual
        let instruction = (SCORE_MAX * latent + Self::sample_normal(0.0, noise_std, rng))
            .clamp(0.0, SCORE_MAX);
        let visual = (SCORE_MAX * (0.5 + 0.5 * latent) + Self::sample_normal(0.0, noise_std, rng))
            .clamp(0.0, SCORE_MAX);
        Ok(ReviewerFeedback::from_subscores(
            visual,
            instruction,
            diagnosis_for(visual, instruction),
        ))
    }
}

/// Run one episode: turn 1 generates, later turns follow the navigator until
/// it stops or the budget runs out. On a live-mode failure the completed
/// turns are preserved inside the error.
pub fn run_episode(
    nav: &dyn Navigator,
    env: &dyn Environment,
    prompt: &PromptSpec,
    t_max: usize,
    tree: &SeedTree,
) -> Result<Trajectory, EpisodeError> {
    assert!(t_max >= 1, "t_max must be >= 1");
    let mut turns: Vec<TurnRecord> = Vec::new();
    for turn in 1..=t_max {
        let node = tree.child_idx("turn", turn as u64);
        let feat = StateFeatures::from_history(prompt, &turns, turn, t_max);
        let action = nav.decide(&feat, turn, &prompt.id, &mut node.child("decide").rng());
        if turn == 1 {
            assert_eq!(
                action.choice,
                ActionChoice::Regenerate,
                "navigator must regenerate on turn 1"
            );
        }
        let fail = |source| EpisodeError {
            turn,
            partial: turns.clone(),
            source,
        };
        match action.choice {
            ActionChoice::Stop => {
                turns.push(TurnRecord {
                    turn_index: turn,
                    action,
                    candidate: None,
                    feedback: None,
                });
                return Ok(Trajectory {
                    prompt: prompt.clone(),
                    turns,
                    t_max,
                    terminated_by: TerminationReason::StopAction,
                });
            }
            ActionChoice::Refine => {
                let current = turns
                    .last()
                    .and_then(|t| t.candidate.as_ref())
                    .expect("refine with no prior candidate");
                let instruction = action
                    .revised_prompt
                    .as_deref()
                    .expect("refine carries a revised prompt");
                let candidate = env
                    .refine(
                        prompt,
                        current,
                        instruction,
                        &format!("t{turn}"),
                        &mut node.child("gen").rng(),
                    )
                    .map_err(fail)?;
                let feedback = env
                    .review(prompt, &candidate, &mut node.child("review").rng())
                    .map_err(|source| EpisodeError {
                        turn,
                        partial: turns.clone(),
                        source,
                    })?;
                turns.push(TurnRecord {
                    turn_index: turn,
                    action,
                    candidate: Some(candidate),
                    feedback: Some(feedback),
                });
            }
            ActionChoice::Regenerate => {
                let instruction = action
                    .revised_prompt
                    .as_deref()
                    .expect("regenerate carries a revised prompt");
                let candidate = env
                    .generate(
                        prompt,
                        instruction,
                        &format!("t{turn}"),
                        &mut node.child("gen").rng(),
                    )
                    .map_err(fail)?;
                let feedback = env
                    .review(prompt, &candidate, &mut node.child("review").rng())
                    .map_err(|source| EpisodeError {
                        turn,
                        partial: turns.clone(),
                        source,
                    })?;
                turns.push(TurnRecord {
                    turn_index: turn,
                    action,
                    candidate: Some(candidate),
                    feedback: Some(feedback),
                });
            }
        }
    }
    Ok(Trajectory {
        prompt: prompt.clone(),
        turns,
        t_max,
        terminated_by: TerminationReason::BudgetExhausted,
    })
}

/// Deterministic synthetic prompt pool with uniformly spread difficulties.
pub fn synthetic_pool(n: usize, seed: u64) -> Vec<PromptSpec> {
    let tree = SeedTree::from_root(seed).child("pool");
    (0..n)
        .map(|i| {
            let difficulty: f64 = tree.child_idx("prompt", i as u64).rng().gen();
            PromptSpec {
                id: format!("p{i:05}"),
                text: format!("procedural scene {i:05}"),
                difficulty,
                tags: vec!["synthetic".into()],
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{FixedWorkflow, HeuristicNavigator};
    use rand::SeedableRng;

    fn noiseless(intercept: f64, slope: f64) -> SimEnvConfig {
        SimEnvConfig {
            base_quality_intercept: intercept,
            base_quality_slope: slope,
            regen_std: 0.0,
            refine_std: 0.0,
            reviewer_noise_std: 0.0,
            ..SimEnvConfig::default()
        }
    }

    #[test]
    fn generate_zero_noise_is_affine_in_difficulty() {
        let env = SimEnv::new(noiseless(1.0, -1.0));
        let prompt = PromptSpec::new("p", "x", 0.2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let c = env.generate(&prompt, "x", "t1", &mut rng).unwrap();
        assert!((c.latent_quality.unwrap() - 0.8).abs() < 1e-12);
    }

    #[test]
    fn generate_boundary_difficulty() {
        let env = SimEnv::new(noiseless(1.0, -1.0));
        let prompt = PromptSpec::new("p", "x", 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let c = env.generate(&prompt, "x", "t1", &mut rng).unwrap();
        assert_eq!(c.latent_quality.unwrap(), 0.0);
    }

    #[test]
    fn generate_replays_identically() {
        let env = SimEnv::new(SimEnvConfig::default());
        let prompt = PromptSpec::new("p", "x", 0.4);
        let a = env
            .generate(&prompt, "x", "t1", &mut ChaCha8Rng::seed_from_u64(9))
            .unwrap();
        let b = env
            .generate(&prompt, "x", "t1", &mut ChaCha8Rng::seed_from_u64(9))
            .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn refine_applies_configured_gain() {
        let mut cfg = noiseless(1.0, -1.0);
        cfg.refine_mid_quality = 0.5;
        cfg.refine_gain_peak = 0.2;
        let env = SimEnv::new(cfg);
        let prompt = PromptSpec::new("p", "x", 0.5);
        let current = Candidate {
            id: "c".into(),
            latent_quality: Some(0.5),
            payload_ref: "sim://c".into(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let refined = env.refine(&prompt, &current, "x", "t2", &mut rng).unwrap();
        assert!((refined.latent_quality.unwrap() - 0.7).abs() < 1e-12);
    }

    #[test]
    fn refine_degrades_past_knee() {
        let mut cfg = noiseless(1.0, -1.0);
        cfg.refine_knee = 0.9;
        cfg.refine_gain_at_one = -0.1;
        let env = SimEnv::new(cfg);
        assert!((env.config.refine_gain(0.95) + 0.05).abs() < 1e-12);
        let prompt = PromptSpec::new("p", "x", 0.5);
        let current = Candidate {
            id: "c".into(),
            latent_quality: Some(0.95),
            payload_ref: "sim://c".into(),
        };
        let refined = env
            .refine(&prompt, &current, "x", "t2", &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap();
        assert!((refined.latent_quality.unwrap() - 0.90).abs() < 1e-12);
    }

    #[test]
    fn refine_clamps_at_one() {
        let mut cfg = noiseless(1.0, -1.0);
        cfg.refine_gain_at_one = 0.3; // force a positive gain at the top
        cfg.refine_knee = 0.5;
        cfg.refine_mid_quality = 0.25;
        let env = SimEnv::new(cfg);
        let prompt = PromptSpec::new("p", "x", 0.5);
        let current = Candidate {
            id: "c".into(),
            latent_quality: Some(1.0),
            payload_ref: "sim://c".into(),
        };
        let refined = env
            .refine(&prompt, &current, "x", "t2", &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap();
        assert_eq!(refined.latent_quality.unwrap(), 1.0);
    }

    #[test]
    fn review_perfect_candidate() {
        let env = SimEnv::new(noiseless(1.0, -1.0));
        let prompt = PromptSpec::new("p", "x", 0.5);
        let c = Candidate {
            id: "c".into(),
            latent_quality: Some(1.0),
            payload_ref: "sim://c".into(),
        };
        let fb = env
            .review(&prompt, &c, &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap();
        assert_eq!(fb.visual, 5.0);
        assert_eq!(fb.instruction, 5.0);
        assert_eq!(fb.score, 5.0);
    }

    #[test]
    fn review_zero_latent_keeps_visual_floor() {
        let env = SimEnv::new(noiseless(1.0, -1.0));
        let prompt = PromptSpec::new("p", "x", 0.5);
        let c = Candidate {
            id: "c".into(),
            latent_quality: Some(0.0),
            payload_ref: "sim://c".into(),
        };
        let fb = env
            .review(&prompt, &c, &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap();
        assert!((fb.visual - 2.5).abs() < 1e-12);
        assert_eq!(fb.instruction, 0.0);
        assert!((fb.score - 0.75).abs() < 1e-12);
        fb.validate().unwrap();
    }

    #[test]
    fn episode_stop_policy_yields_one_candidate() {
        let env = SimEnv::new(SimEnvConfig::default());
        let prompt = PromptSpec::new("p", "x", 0.5);
        let tree = SeedTree::from_root(1).child("episode");
        let traj =
            run_episode(&FixedWorkflow::one_shot(), &env, &prompt, 3, &tree).unwrap();
        assert_eq!(traj.candidate_count(), 1);
        assert_eq!(traj.terminated_by, TerminationReason::StopAction);
        traj.validate().unwrap();
    }

    #[test]
    fn episode_never_stop_policy_exhausts_budget() {
        let env = SimEnv::new(SimEnvConfig::default());
        let prompt = PromptSpec::new("p", "x", 0.5);
        let tree = SeedTree::from_root(1).child("episode");
        let traj =
            run_episode(&FixedWorkflow::refine_only(), &env, &prompt, 3, &tree).unwrap();
        assert_eq!(traj.candidate_count(), 3);
        assert_eq!(traj.terminated_by, TerminationReason::BudgetExhausted);
        traj.validate().unwrap();
    }

    #[test]
    fn episode_replays_bit_identically() {
        let env = SimEnv::new(SimEnvConfig::default());
        let prompt = PromptSpec::new("p", "x", 0.7);
        let nav = HeuristicNavigator::default();
        let tree = SeedTree::from_root(77).child("episode");
        let a = run_episode(&nav, &env, &prompt, 3, &tree).unwrap();
        let b = run_episode(&nav, &env, &prompt, 3, &tree).unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
    }

    #[test]
    fn episode_bounds_hold() {
        let env = SimEnv::new(SimEnvConfig::default());
        for i in 0..50 {
            let prompt = PromptSpec::new(format!("p{i}"), "x", (i as f64) / 49.0);
            let tree = SeedTree::from_root(i).child("episode");
            let traj =
                run_episode(&FixedWorkflow::regenerate_only(), &env, &prompt, 3, &tree).unwrap();
            for turn in traj.candidate_turns() {
                let q = turn.candidate.as_ref().unwrap().latent_quality.unwrap();
                assert!((0.0..=1.0).contains(&q));
                let fb = turn.feedback.as_ref().unwrap();
                assert!((0.0..=5.0).contains(&fb.score));
                fb.validate().unwrap();
            }
        }
    }

    // two-sample KS p-value, asymptotic approximation
    fn ks_p_value(d: f64, n: usize, m: usize) -> f64 {
        let ne = (n * m) as f64 / (n + m) as f64;
        let lambda = (ne.sqrt() + 0.12 + 0.11 / ne.sqrt()) * d;
        let mut p = 0.0;
        for k in 1..=100 {
            let term = (-2.0 * (k as f64 * lambda).powi(2)).exp();
            p += if k % 2 == 1 { 2.0 * term } else { -2.0 * term };
        }
        p.clamp(0.0, 1.0)
    }

    #[test]
    fn regenerate_is_independent_of_prior_state() {
        // run two-turn regenerate-only episodes on one prompt; the turn-2
        // draw distribution must not depend on the turn-1 outcome
        let env = SimEnv::new(SimEnvConfig::default());
        let prompt = PromptSpec::new("p", "x", 0.5);
        let mut low = Vec::new();
        let mut high = Vec::new();
        for i in 0..30_000u64 {
            let tree = SeedTree::from_root(500).child_idx("episode", i);
            let traj =
                run_episode(&FixedWorkflow::regenerate_only(), &env, &prompt, 2, &tree).unwrap();
            let turns: Vec<f64> = traj
                .candidate_turns()
                .map(|t| t.candidate.as_ref().unwrap().latent_quality.unwrap())
                .collect();
            let median = env.config.base_quality_mean(prompt.difficulty);
            if turns[0] < median {
                low.push(turns[1]);
            } else {
                high.push(turns[1]);
            }
            if low.len() >= 10_000 && high.len() >= 10_000 {
                break;
            }
        }
        low.sort_by(|a, b| a.partial_cmp(b).unwrap());
        high.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut d: f64 = 0.0;
        let (mut i, mut j) = (0usize, 0usize);
        while i < low.len() && j < high.len() {
            if low[i] <= high[j] {
                i += 1;
            } else {
                j += 1;
            }
            let f1 = i as f64 / low.len() as f64;
            let f2 = j as f64 / high.len() as f64;
            d = d.max((f1 - f2).abs());
        }
        let p = ks_p_value(d, low.len(), high.len());
        assert!(p > 0.01, "KS D={d}, p={p}");
    }

    #[test]
    fn synthetic_pool_is_deterministic() {
        let a = synthetic_pool(10, 3);
        let b = synthetic_pool(10, 3);
        assert_eq!(a, b);
        assert!(a.iter().all(|p| (0.0..=1.0).contains(&p.difficulty)));
        assert_ne!(a, synthetic_pool(10, 4));
    }

    #[test]
    fn refine_gain_is_continuous_at_anchors() {
        let cfg = SimEnvConfig::default();
        for x in [cfg.refine_mid_quality, cfg.refine_knee] {
            let before = cfg.refine_gain(x - 1e-9);
            let after = cfg.refine_gain(x + 1e-9);
            assert!((before - after).abs() < 1e-6);
        }
        assert!(cfg.refine_gain(cfg.refine_knee + 0.01) < 0.0);
        assert!(cfg.refine_gain(cfg.refine_mid_quality) > 0.0);
    }

    #[test]
    fn config_validation() {
        let negative_std = SimEnvConfig {
            regen_std: -0.1,
            ..SimEnvConfig::default()
        };
        assert!(negative_std.validate().is_err());
        let knee_below_mid = SimEnvConfig {
            refine_knee: 0.3,
            ..SimEnvConfig::default()
        };
        assert!(knee_below_mid.validate().is_err());
        assert!(SimEnvConfig::default().validate().is_ok());
    }
}
