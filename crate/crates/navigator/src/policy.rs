//! Navigator policies.
//!
//! The trainable policy is a softmax-linear head over five hand-built state
//! features; it stands in for the multimodal navigator so the learning
//! machinery can run at desk scale. A threshold heuristic, fixed workflows,
//! and the dual-branch preference reference share the same [`Navigator`]
//! interface.
//!
//! Features are derived exclusively from the prompt and the visible
//! interaction history (reviewer scores); a candidate's hidden latent
//! quality never enters feature extraction.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{Environment, EnvironmentError};
use crate::rng::SeedTree;
use crate::trajectory::{
    ActionChoice, ActionRecord, PromptSpec, TerminationReason, Trajectory, TurnRecord, SCORE_MAX,
};

pub const NUM_ACTIONS: usize = 3;
pub const NUM_FEATURES: usize = 5;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("non-finite feature: {0}")]
    NonFinite(String),
    #[error("action {choice:?} is masked at turn {turn}")]
    MaskedAction { turn: usize, choice: ActionChoice },
    #[error("turn index must be >= 1")]
    BadTurn,
    #[error("bad parameter file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// State visible to the policy at a decision point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StateFeatures {
    /// Latest normalized reviewer score, 0 before any feedback.
    pub current_score_norm: f64,
    /// `(t-1)/t_max`.
    pub turn_frac: f64,
    /// Normalized score delta between the last two reviews, 0 before turn 3.
    pub score_delta: f64,
    pub prompt_difficulty: f64,
    /// Constant 1.
    pub bias: f64,
}

impl StateFeatures {
    /// Extract features for the decision at `turn` from the turns recorded
    /// so far. Reads only reviewer scores and the prompt difficulty.
    pub fn from_history(
        prompt: &PromptSpec,
        turns: &[TurnRecord],
        turn: usize,
        t_max: usize,
    ) -> Self {
        let scores: Vec<f64> = turns
            .iter()
            .filter_map(|t| t.feedback.as_ref().map(|f| f.score / SCORE_MAX))
            .collect();
        let current = scores.last().copied().unwrap_or(0.0);
        let delta = if scores.len() >= 2 {
            current - scores[scores.len() - 2]
        } else {
            0.0
        };
        Self {
            current_score_norm: current,
            turn_frac: (turn - 1) as f64 / t_max as f64,
            score_delta: delta,
            prompt_difficulty: prompt.difficulty,
            bias: 1.0,
        }
    }

    pub fn as_array(&self) -> [f64; NUM_FEATURES] {
        [
            self.current_score_norm,
            self.turn_frac,
            self.score_delta,
            self.prompt_difficulty,
            self.bias,
        ]
    }

    fn check_finite(&self) -> Result<(), PolicyError> {
        for (name, v) in [
            ("current_score_norm", self.current_score_norm),
            ("turn_frac", self.turn_frac),
            ("score_delta", self.score_delta),
            ("prompt_difficulty", self.prompt_difficulty),
            ("bias", self.bias),
        ] {
            if !v.is_finite() {
                return Err(PolicyError::NonFinite(format!("{name}={v}")));
            }
        }
        Ok(())
    }
}

/// Weights of the softmax-linear policy head, actions x features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub weights: [[f64; NUM_FEATURES]; NUM_ACTIONS],
}

impl PolicyParams {
    pub fn zeros() -> Self {
        Self {
            weights: [[0.0; NUM_FEATURES]; NUM_ACTIONS],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().flatten().all(|w| w.is_finite())
    }

    /// Flat numeric text format: comment header, a `rows cols` line, then
    /// one whitespace-separated row per action.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str("# navigator policy weights v1\n");
        out.push_str(
            "# rows: stop refine regenerate | cols: score_norm turn_frac score_delta difficulty bias\n",
        );
        out.push_str(&format!("{NUM_ACTIONS} {NUM_FEATURES}\n"));
        for row in &self.weights {
            let cells: Vec<String> = row.iter().map(|w| format!("{w}")).collect();
            out.push_str(&cells.join(" "));
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, PolicyError> {
        let mut lines = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'));
        let dims = lines
            .next()
            .ok_or_else(|| PolicyError::Format("missing dimensions line".into()))?;
        let mut dim_it = dims.split_whitespace();
        let rows: usize = dim_it
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| PolicyError::Format("bad row count".into()))?;
        let cols: usize = dim_it
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| PolicyError::Format("bad column count".into()))?;
        if rows != NUM_ACTIONS || cols != NUM_FEATURES {
            return Err(PolicyError::Format(format!(
                "expected {NUM_ACTIONS}x{NUM_FEATURES}, file declares {rows}x{cols}"
            )));
        }
        let mut weights = [[0.0; NUM_FEATURES]; NUM_ACTIONS];
        for (r, row) in weights.iter_mut().enumerate() {
            let line = lines
                .next()
                .ok_or_else(|| PolicyError::Format(format!("missing row {r}")))?;
            let cells: Vec<&str> = line.split_whitespace().collect();
            if cells.len() != NUM_FEATURES {
                return Err(PolicyError::Format(format!(
                    "row {r} has {} cells, expected {NUM_FEATURES}",
                    cells.len()
                )));
            }
            for (c, cell) in cells.iter().enumerate() {
                row[c] = cell
                    .parse()
                    .map_err(|_| PolicyError::Format(format!("bad number '{cell}'")))?;
            }
        }
        Ok(Self { weights })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), PolicyError> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self, PolicyError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_text(&text)
    }
}

fn allowed_actions(turn: usize) -> [bool; NUM_ACTIONS] {
    if turn == 1 {
        // turn 1 is the initial text-to-image generation: no image or
        // feedback exists yet, so stop and refine are masked out
        [false, false, true]
    } else {
        [true, true, true]
    }
}

/// Action probabilities over {stop, refine, regenerate}.
pub fn action_distribution(
    params: &PolicyParams,
    feat: &StateFeatures,
    turn: usize,
) -> Result<[f64; NUM_ACTIONS], PolicyError> {
    if turn < 1 {
        return Err(PolicyError::BadTurn);
    }
    feat.check_finite()?;
    let x = feat.as_array();
    let allowed = allowed_actions(turn);
    let mut logits = [f64::NEG_INFINITY; NUM_ACTIONS];
    let mut max_logit = f64::NEG_INFINITY;
    for a in 0..NUM_ACTIONS {
        if allowed[a] {
            let logit: f64 = params.weights[a].iter().zip(&x).map(|(w, f)| w * f).sum();
            if !logit.is_finite() {
                return Err(PolicyError::NonFinite(format!("logit for action {a}")));
            }
            logits[a] = logit;
            max_logit = max_logit.max(logit);
        }
    }
    let mut probs = [0.0; NUM_ACTIONS];
    let mut z = 0.0;
    for a in 0..NUM_ACTIONS {
        if allowed[a] {
            probs[a] = (logits[a] - max_logit).exp();
            z += probs[a];
        }
    }
    for p in &mut probs {
        *p /= z;
    }
    Ok(probs)
}

/// Log-probability of a choice under the masked softmax.
pub fn log_prob(
    params: &PolicyParams,
    feat: &StateFeatures,
    turn: usize,
    choice: ActionChoice,
) -> Result<f64, PolicyError> {
    let probs = action_distribution(params, feat, turn)?;
    let p = probs[choice.index()];
    if p <= 0.0 {
        return Err(PolicyError::MaskedAction { turn, choice });
    }
    Ok(p.ln())
}

/// Gradient of `log pi(choice | feat)` with respect to the weight matrix:
/// `(1{a=k} - pi_k) * feat` per action row, zero rows for masked actions.
pub fn log_prob_gradient(
    params: &PolicyParams,
    feat: &StateFeatures,
    turn: usize,
    choice: ActionChoice,
) -> Result<[[f64; NUM_FEATURES]; NUM_ACTIONS], PolicyError> {
    let probs = action_distribution(params, feat, turn)?;
    if probs[choice.index()] <= 0.0 {
        return Err(PolicyError::MaskedAction { turn, choice });
    }
    let allowed = allowed_actions(turn);
    let x = feat.as_array();
    let mut grad = [[0.0; NUM_FEATURES]; NUM_ACTIONS];
    for a in 0..NUM_ACTIONS {
        if !allowed[a] {
            continue;
        }
        let indicator = if a == choice.index() { 1.0 } else { 0.0 };
        let coeff = indicator - probs[a];
        for (g, f) in grad[a].iter_mut().zip(&x) {
            *g = coeff * f;
        }
    }
    Ok(grad)
}

fn placeholder_prompt(prompt_id: &str, turn: usize, choice: ActionChoice) -> String {
    let verb = match choice {
        ActionChoice::Refine => "refine",
        ActionChoice::Regenerate => "regenerate",
        ActionChoice::Stop => "stop",
    };
    format!("{prompt_id}:t{turn}:{verb}")
}

fn record_for_choice(choice: ActionChoice, prompt_id: &str, turn: usize) -> ActionRecord {
    match choice {
        ActionChoice::Stop => ActionRecord::stop(),
        ActionChoice::Refine => {
            ActionRecord::refine(placeholder_prompt(prompt_id, turn, ActionChoice::Refine))
        }
        ActionChoice::Regenerate => ActionRecord::regenerate(placeholder_prompt(
            prompt_id,
            turn,
            ActionChoice::Regenerate,
        )),
    }
}

/// Draw an action index from a probability vector (one rng draw).
pub fn sample_index(probs: &[f64; NUM_ACTIONS], rng: &mut ChaCha8Rng) -> usize {
    let draw: f64 = rng.gen();
    let mut acc = 0.0;
    for (a, p) in probs.iter().enumerate() {
        acc += p;
        if draw < acc {
            return a;
        }
    }
    NUM_ACTIONS - 1
}

/// Sample an action; the revised prompt is a synthetic token derived from
/// the prompt id and turn.
pub fn sample_action(
    params: &PolicyParams,
    feat: &StateFeatures,
    turn: usize,
    prompt_id: &str,
    rng: &mut ChaCha8Rng,
) -> Result<ActionRecord, PolicyError> {
    let probs = action_distribution(params, feat, turn)?;
    let choice = ActionChoice::from_index(sample_index(&probs, rng)).unwrap();
    Ok(record_for_choice(choice, prompt_id, turn))
}

/// Build the action record a navigator should emit for a bare choice.
pub fn action_record_for(choice: ActionChoice, prompt_id: &str, turn: usize) -> ActionRecord {
    record_for_choice(choice, prompt_id, turn)
}

/// A policy that can drive an episode.
pub trait Navigator {
    fn decide(
        &self,
        feat: &StateFeatures,
        turn: usize,
        prompt_id: &str,
        rng: &mut ChaCha8Rng,
    ) -> ActionRecord;
}

/// The trainable softmax-linear navigator.
#[derive(Debug, Clone)]
pub struct SoftmaxNavigator {
    pub params: PolicyParams,
}

impl Navigator for SoftmaxNavigator {
    fn decide(
        &self,
        feat: &StateFeatures,
        turn: usize,
        prompt_id: &str,
        rng: &mut ChaCha8Rng,
    ) -> ActionRecord {
        sample_action(&self.params, feat, turn, prompt_id, rng)
            .expect("softmax navigator saw non-finite features")
    }
}

/// Thresholds of the training-free heuristic, on the raw reviewer scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeuristicThresholds {
    pub stop: f64,
    pub refine: f64,
}

impl Default for HeuristicThresholds {
    fn default() -> Self {
        Self {
            stop: 4.5,
            refine: 3.0,
        }
    }
}

/// Training-free state-conditioned rule: stop when the score is high,
/// refine when it is middling, regenerate otherwise.
pub fn heuristic_policy(
    feat: &StateFeatures,
    thresholds: &HeuristicThresholds,
    prompt_id: &str,
    turn: usize,
) -> ActionRecord {
    let raw = feat.current_score_norm * SCORE_MAX;
    let choice = if raw >= thresholds.stop {
        ActionChoice::Stop
    } else if raw >= thresholds.refine {
        ActionChoice::Refine
    } else {
        ActionChoice::Regenerate
    };
    record_for_choice(choice, prompt_id, turn)
}

/// Navigator wrapper around [`heuristic_policy`].
#[derive(Debug, Clone, Default)]
pub struct HeuristicNavigator {
    pub thresholds: HeuristicThresholds,
}

impl Navigator for HeuristicNavigator {
    fn decide(
        &self,
        feat: &StateFeatures,
        turn: usize,
        prompt_id: &str,
        _rng: &mut ChaCha8Rng,
    ) -> ActionRecord {
        if turn == 1 {
            return record_for_choice(ActionChoice::Regenerate, prompt_id, turn);
        }
        heuristic_policy(feat, &self.thresholds, prompt_id, turn)
    }
}

/// Fixed workflow that applies the same choice at every decision turn.
#[derive(Debug, Clone, Copy)]
pub struct FixedWorkflow {
    pub choice: ActionChoice,
}

impl FixedWorkflow {
    /// Edits the current image every turn.
    pub fn refine_only() -> Self {
        Self {
            choice: ActionChoice::Refine,
        }
    }

    /// Restarts from scratch every turn.
    pub fn regenerate_only() -> Self {
        Self {
            choice: ActionChoice::Regenerate,
        }
    }

    /// Stops immediately after the initial generation.
    pub fn one_shot() -> Self {
        Self {
            choice: ActionChoice::Stop,
        }
    }
}

impl Navigator for FixedWorkflow {
    fn decide(
        &self,
        _feat: &StateFeatures,
        turn: usize,
        prompt_id: &str,
        _rng: &mut ChaCha8Rng,
    ) -> ActionRecord {
        if turn == 1 {
            return record_for_choice(ActionChoice::Regenerate, prompt_id, turn);
        }
        record_for_choice(self.choice, prompt_id, turn)
    }
}

/// Outcome of one refine-vs-regenerate duel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DuelOutcome {
    RefineWin,
    RegenerateWin,
    Tie,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionDuel {
    pub turn: usize,
    pub refine_score: f64,
    pub regenerate_score: f64,
    pub outcome: DuelOutcome,
}

/// A preference-reference rollout: the trajectory actually followed plus the
/// per-turn duel outcomes.
#[derive(Debug, Clone, PartialEq)]
pub struct PreferenceRollout {
    pub trajectory: Trajectory,
    pub duels: Vec<ActionDuel>,
}

/// Greedy per-turn oracle: at every decision turn execute both refine and
/// regenerate, score both outcomes, and continue along the higher-scoring
/// branch. Ties (|score difference| < `tie_margin`) follow the refine branch.
pub fn preference_reference(
    env: &dyn Environment,
    prompt: &PromptSpec,
    t_max: usize,
    tie_margin: f64,
    tree: &SeedTree,
) -> Result<PreferenceRollout, EnvironmentError> {
    let turn_tree = tree.child_idx("turn", 1);
    let first_action = record_for_choice(ActionChoice::Regenerate, &prompt.id, 1);
    let first = env.generate(
        prompt,
        first_action.revised_prompt.as_deref().unwrap(),
        "t1",
        &mut turn_tree.child("gen").rng(),
    )?;
    let first_feedback = env.review(prompt, &first, &mut turn_tree.child("review").rng())?;
    let mut turns = vec![TurnRecord {
        turn_index: 1,
        action: first_action,
        candidate: Some(first),
        feedback: Some(first_feedback),
    }];
    let mut duels = Vec::new();

    for turn in 2..=t_max {
        let node = tree.child_idx("turn", turn as u64);
        let current = turns.last().unwrap().candidate.as_ref().unwrap();

        let refine_action = record_for_choice(ActionChoice::Refine, &prompt.id, turn);
        let refined = env.refine(
            prompt,
            current,
            refine_action.revised_prompt.as_deref().unwrap(),
            &format!("t{turn}r"),
            &mut node.child("refine").rng(),
        )?;
        let refined_feedback =
            env.review(prompt, &refined, &mut node.child("refine-review").rng())?;

        let regen_action = record_for_choice(ActionChoice::Regenerate, &prompt.id, turn);
        let regen = env.generate(
            prompt,
            regen_action.revised_prompt.as_deref().unwrap(),
            &format!("t{turn}g"),
            &mut node.child("regen").rng(),
        )?;
        let regen_feedback = env.review(prompt, &regen, &mut node.child("regen-review").rng())?;

        let diff = refined_feedback.score - regen_feedback.score;
        let outcome = if diff.abs() < tie_margin || diff == 0.0 {
            DuelOutcome::Tie
        } else if diff > 0.0 {
            DuelOutcome::RefineWin
        } else {
            DuelOutcome::RegenerateWin
        };
        duels.push(ActionDuel {
            turn,
            refine_score: refined_feedback.score,
            regenerate_score: regen_feedback.score,
            outcome,
        });

        let take_refine = outcome != DuelOutcome::RegenerateWin;
        let (action, candidate, feedback) = if take_refine {
            (refine_action, refined, refined_feedback)
        } else {
            (regen_action, regen, regen_feedback)
        };
        turns.push(TurnRecord {
            turn_index: turn,
            action,
            candidate: Some(candidate),
            feedback: Some(feedback),
        });
    }

    Ok(PreferenceRollout {
        trajectory: Trajectory {
            prompt: prompt.clone(),
            turns,
            t_max,
            terminated_by: TerminationReason::BudgetExhausted,
        },
        duels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn feat(score_norm: f64) -> StateFeatures {
        StateFeatures {
            current_score_norm: score_norm,
            turn_frac: 1.0 / 3.0,
            score_delta: 0.0,
            prompt_difficulty: 0.5,
            bias: 1.0,
        }
    }

    #[test]
    fn zero_weights_give_uniform_distribution() {
        let probs = action_distribution(&PolicyParams::zeros(), &feat(0.5), 2).unwrap();
        for p in probs {
            assert!((p - 1.0 / 3.0).abs() < 1e-12);
        }
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn turn_one_forces_regenerate() {
        let mut params = PolicyParams::zeros();
        params.weights[0] = [9.0, 9.0, 9.0, 9.0, 9.0];
        let probs = action_distribution(&params, &feat(0.0), 1).unwrap();
        assert_eq!(probs[ActionChoice::Stop.index()], 0.0);
        assert_eq!(probs[ActionChoice::Refine.index()], 0.0);
        assert_eq!(probs[ActionChoice::Regenerate.index()], 1.0);
    }

    #[test]
    fn strong_stop_logit_dominates() {
        let mut params = PolicyParams::zeros();
        // +10 logits for stop at full score via the score feature
        params.weights[ActionChoice::Stop.index()][0] = 10.0;
        let probs = action_distribution(&params, &feat(1.0), 2).unwrap();
        assert!(probs[ActionChoice::Stop.index()] > 0.99);
    }

    #[test]
    fn non_finite_features_rejected() {
        let mut f = feat(0.5);
        f.score_delta = f64::NAN;
        assert!(action_distribution(&PolicyParams::zeros(), &f, 2).is_err());
    }

    #[test]
    #[allow(clippy::needless_range_loop)]
    fn gradient_uniform_pattern() {
        let f = feat(0.5);
        let grad =
            log_prob_gradient(&PolicyParams::zeros(), &f, 2, ActionChoice::Refine).unwrap();
        let x = f.as_array();
        for a in 0..NUM_ACTIONS {
            let coeff = if a == ActionChoice::Refine.index() {
                1.0 - 1.0 / 3.0
            } else {
                -1.0 / 3.0
            };
            for c in 0..NUM_FEATURES {
                assert!((grad[a][c] - coeff * x[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gradient_zero_features_touch_only_bias() {
        let f = StateFeatures {
            current_score_norm: 0.0,
            turn_frac: 0.0,
            score_delta: 0.0,
            prompt_difficulty: 0.0,
            bias: 1.0,
        };
        let grad = log_prob_gradient(&PolicyParams::zeros(), &f, 2, ActionChoice::Stop).unwrap();
        for row in &grad {
            for (c, g) in row.iter().enumerate() {
                if c == NUM_FEATURES - 1 {
                    assert!(g.abs() > 0.0);
                } else {
                    assert_eq!(*g, 0.0);
                }
            }
        }
    }

    #[test]
    fn masked_action_gradient_errors() {
        let err = log_prob_gradient(&PolicyParams::zeros(), &feat(0.5), 1, ActionChoice::Stop);
        assert!(matches!(err, Err(PolicyError::MaskedAction { .. })));
    }

    #[test]
    #[allow(clippy::needless_range_loop)]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let h = 1e-5;
        for _ in 0..25 {
            let mut params = PolicyParams::zeros();
            for row in &mut params.weights {
                for w in row.iter_mut() {
                    *w = rng.gen_range(-2.0..2.0);
                }
            }
            let f = StateFeatures {
                current_score_norm: rng.gen(),
                turn_frac: rng.gen(),
                score_delta: rng.gen_range(-1.0..1.0),
                prompt_difficulty: rng.gen(),
                bias: 1.0,
            };
            let choice = ActionChoice::from_index(rng.gen_range(0..3)).unwrap();
            let grad = log_prob_gradient(&params, &f, 2, choice).unwrap();
            for a in 0..NUM_ACTIONS {
                for c in 0..NUM_FEATURES {
                    let mut plus = params.clone();
                    plus.weights[a][c] += h;
                    let mut minus = params.clone();
                    minus.weights[a][c] -= h;
                    let numeric = (log_prob(&plus, &f, 2, choice).unwrap()
                        - log_prob(&minus, &f, 2, choice).unwrap())
                        / (2.0 * h);
                    let analytic = grad[a][c];
                    assert!(
                        (analytic - numeric).abs() <= 1e-5 * analytic.abs().max(1.0),
                        "grad mismatch at [{a}][{c}]: {analytic} vs {numeric}"
                    );
                }
            }
        }
    }

    #[test]
    fn sample_action_deterministic_per_seed() {
        let params = PolicyParams::zeros();
        let f = feat(0.5);
        let a = sample_action(&params, &f, 2, "p1", &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = sample_action(&params, &f, 2, "p1", &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn sample_action_fills_placeholder_prompt() {
        let mut params = PolicyParams::zeros();
        params.weights[ActionChoice::Refine.index()][4] = 50.0;
        let a = sample_action(&params, &feat(0.5), 2, "p7", &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap();
        assert_eq!(a.choice, ActionChoice::Refine);
        assert_eq!(a.revised_prompt.as_deref(), Some("p7:t2:refine"));
        assert!(a.well_formed);
    }

    #[test]
    fn sample_frequencies_match_distribution() {
        // chi-squared over 10^4 samples against a fixed non-uniform target;
        // critical value for df=2 at p=0.01 is 9.21
        let mut params = PolicyParams::zeros();
        params.weights[0][4] = 0.3;
        params.weights[1][4] = -0.4;
        let f = feat(0.5);
        let probs = action_distribution(&params, &f, 2).unwrap();
        let n = 10_000usize;
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut counts = [0usize; NUM_ACTIONS];
        for _ in 0..n {
            let a = sample_action(&params, &f, 2, "p", &mut rng).unwrap();
            counts[a.choice.index()] += 1;
        }
        let chi2: f64 = (0..NUM_ACTIONS)
            .map(|a| {
                let expected = probs[a] * n as f64;
                (counts[a] as f64 - expected).powi(2) / expected
            })
            .sum();
        assert!(chi2 < 9.21, "chi2={chi2}, counts={counts:?}");
    }

    #[test]
    fn heuristic_thresholds() {
        let th = HeuristicThresholds::default();
        let stop = heuristic_policy(&feat(4.7 / 5.0), &th, "p", 2);
        assert_eq!(stop.choice, ActionChoice::Stop);
        let refine = heuristic_policy(&feat(3.5 / 5.0), &th, "p", 2);
        assert_eq!(refine.choice, ActionChoice::Refine);
        let regen = heuristic_policy(&feat(2.0 / 5.0), &th, "p", 2);
        assert_eq!(regen.choice, ActionChoice::Regenerate);
    }

    #[test]
    fn params_text_round_trip() {
        let mut params = PolicyParams::zeros();
        params.weights[1][2] = -0.123456789012345;
        params.weights[2][4] = 7.25;
        let text = params.to_text();
        let back = PolicyParams::from_text(&text).unwrap();
        assert_eq!(params, back);
        // canonical text is stable
        assert_eq!(back.to_text(), text);
    }

    #[test]
    fn params_text_rejects_bad_shapes() {
        assert!(PolicyParams::from_text("2 5\n0 0 0 0 0\n0 0 0 0 0\n").is_err());
        assert!(PolicyParams::from_text("3 5\n0 0 0\n0 0 0 0 0\n0 0 0 0 0\n").is_err());
    }

    #[test]
    fn features_from_history_ignore_latent_quality() {
        use crate::testutil::trajectory_from_scores;
        let mut traj =
            trajectory_from_scores("p", &[3.0, 4.0], 3, TerminationReason::BudgetExhausted);
        let feat_a = StateFeatures::from_history(&traj.prompt, &traj.turns, 3, 3);
        for turn in &mut traj.turns {
            if let Some(c) = turn.candidate.as_mut() {
                c.latent_quality = Some(0.01);
            }
        }
        let feat_b = StateFeatures::from_history(&traj.prompt, &traj.turns, 3, 3);
        assert_eq!(feat_a, feat_b);
        let pa = action_distribution(&PolicyParams::zeros(), &feat_a, 3).unwrap();
        let pb = action_distribution(&PolicyParams::zeros(), &feat_b, 3).unwrap();
        assert_eq!(pa, pb);
    }

    #[test]
    fn preference_reference_follows_dominant_refine() {
        use crate::testutil::ConstantEnv;
        let env = ConstantEnv::new(3.0, 4.0);
        let prompt = crate::trajectory::PromptSpec::new("p", "x", 0.5);
        let tree = crate::rng::SeedTree::from_root(1).child("pref");
        let rollout = preference_reference(&env, &prompt, 3, 0.0, &tree).unwrap();
        assert_eq!(rollout.duels.len(), 2);
        for duel in &rollout.duels {
            assert_eq!(duel.outcome, DuelOutcome::RefineWin);
            assert_eq!(duel.refine_score, 4.0);
            assert_eq!(duel.regenerate_score, 3.0);
        }
        // every decision turn followed the refine branch
        for turn in &rollout.trajectory.turns[1..] {
            assert_eq!(turn.action.choice, ActionChoice::Refine);
        }
        assert_eq!(
            rollout.trajectory.terminated_by,
            TerminationReason::BudgetExhausted
        );
        rollout.trajectory.validate().unwrap();
    }

    #[test]
    fn preference_reference_records_ties_on_equal_scores() {
        use crate::testutil::ConstantEnv;
        let env = ConstantEnv::new(3.5, 3.5);
        let prompt = crate::trajectory::PromptSpec::new("p", "x", 0.5);
        let tree = crate::rng::SeedTree::from_root(1).child("pref");
        let rollout = preference_reference(&env, &prompt, 3, 0.0, &tree).unwrap();
        assert!(rollout
            .duels
            .iter()
            .all(|d| d.outcome == DuelOutcome::Tie));
        // ties follow the refine branch by convention
        assert!(rollout.trajectory.turns[1..]
            .iter()
            .all(|t| t.action.choice == ActionChoice::Refine));
    }

    #[test]
    fn preference_reference_tie_margin_widens_ties() {
        use crate::testutil::ConstantEnv;
        let env = ConstantEnv::new(3.8, 4.0);
        let prompt = crate::trajectory::PromptSpec::new("p", "x", 0.5);
        let tree = crate::rng::SeedTree::from_root(1).child("pref");
        let strict = preference_reference(&env, &prompt, 2, 0.0, &tree).unwrap();
        assert_eq!(strict.duels[0].outcome, DuelOutcome::RefineWin);
        let loose = preference_reference(&env, &prompt, 2, 0.3, &tree).unwrap();
        assert_eq!(loose.duels[0].outcome, DuelOutcome::Tie);
    }

    #[test]
    fn features_delta_zero_at_turn_two() {
        use crate::testutil::trajectory_from_scores;
        let traj = trajectory_from_scores("p", &[3.0], 3, TerminationReason::BudgetExhausted);
        let f = StateFeatures::from_history(&traj.prompt, &traj.turns, 2, 3);
        assert_eq!(f.score_delta, 0.0);
        assert!((f.current_score_norm - 0.6).abs() < 1e-12);
        let traj2 =
            trajectory_from_scores("p", &[3.0, 4.0], 3, TerminationReason::BudgetExhausted);
        let f2 = StateFeatures::from_history(&traj2.prompt, &traj2.turns, 3, 3);
        assert!((f2.score_delta - 0.2).abs() < 1e-12);
    }
}
