//! Domain types shared by every stage: prompts, actions, turns, trajectories,
//! and rollout groups.
//!
//! All types here are plain immutable values with a stable serde layout; the
//! line-delimited trajectory log (see [`crate::logio`]) is the contract
//! between data construction, training, and reporting.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Upper bound of the reviewer score scale.
pub const SCORE_MAX: f64 = 5.0;

/// Weight of the visual sub-score in the aggregated reviewer score.
pub const VISUAL_WEIGHT: f64 = 0.3;
/// Weight of the instruction sub-score in the aggregated reviewer score.
pub const INSTRUCTION_WEIGHT: f64 = 0.7;

#[derive(Debug, Error, PartialEq)]
pub enum TrajectoryError {
    #[error("no generated candidates")]
    NoCandidates,
    #[error("invalid trajectory: {0}")]
    Invalid(String),
}

/// A single prompt episode's task description.
///
/// `difficulty` is a simulation parameter in `[0,1]`; it is visible to the
/// policy as a feature but drives nothing outside the simulated environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptSpec {
    pub id: String,
    pub text: String,
    pub difficulty: f64,
    pub tags: Vec<String>,
}

impl PromptSpec {
    pub fn new(id: impl Into<String>, text: impl Into<String>, difficulty: f64) -> Self {
        Self {
            id: id.into(),
            text: text.into(),
            difficulty,
            tags: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<(), TrajectoryError> {
        if self.text.is_empty() {
            return Err(TrajectoryError::Invalid("prompt text empty".into()));
        }
        if !(0.0..=1.0).contains(&self.difficulty) {
            return Err(TrajectoryError::Invalid(format!(
                "difficulty {} outside [0,1]",
                self.difficulty
            )));
        }
        Ok(())
    }
}

/// Discrete action choice available to the navigator at a decision state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionChoice {
    Stop,
    Refine,
    Regenerate,
}

impl ActionChoice {
    /// Index used by the policy head: stop=0, refine=1, regenerate=2.
    pub fn index(self) -> usize {
        match self {
            ActionChoice::Stop => 0,
            ActionChoice::Refine => 1,
            ActionChoice::Regenerate => 2,
        }
    }

    pub fn from_index(idx: usize) -> Option<Self> {
        match idx {
            0 => Some(ActionChoice::Stop),
            1 => Some(ActionChoice::Refine),
            2 => Some(ActionChoice::Regenerate),
            _ => None,
        }
    }
}

/// A structured action: discrete choice plus a revised-prompt payload.
///
/// `well_formed` holds iff the choice parsed and the prompt-presence rule is
/// satisfied (no prompt for stop, a non-empty prompt otherwise). Constructors
/// always produce well-formed actions; malformed records only enter through
/// external logs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionRecord {
    pub choice: ActionChoice,
    pub revised_prompt: Option<String>,
    pub well_formed: bool,
}

impl ActionRecord {
    pub fn stop() -> Self {
        Self {
            choice: ActionChoice::Stop,
            revised_prompt: None,
            well_formed: true,
        }
    }

    pub fn refine(revised_prompt: impl Into<String>) -> Self {
        Self {
            choice: ActionChoice::Refine,
            revised_prompt: Some(revised_prompt.into()),
            well_formed: true,
        }
    }

    pub fn regenerate(revised_prompt: impl Into<String>) -> Self {
        Self {
            choice: ActionChoice::Regenerate,
            revised_prompt: Some(revised_prompt.into()),
            well_formed: true,
        }
    }

    /// Recompute the well-formedness predicate from the fields.
    pub fn is_well_formed(&self) -> bool {
        match self.choice {
            ActionChoice::Stop => self.revised_prompt.is_none(),
            ActionChoice::Refine | ActionChoice::Regenerate => self
                .revised_prompt
                .as_ref()
                .map(|p| !p.is_empty())
                .unwrap_or(false),
        }
    }
}

/// A generated artifact. `latent_quality` exists only in simulation and must
/// never reach policy features; live-mode candidates carry `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub latent_quality: Option<f64>,
    pub payload_ref: String,
}

impl Candidate {
    pub fn validate(&self) -> Result<(), TrajectoryError> {
        if let Some(q) = self.latent_quality {
            if !(0.0..=1.0).contains(&q) {
                return Err(TrajectoryError::Invalid(format!(
                    "latent_quality {q} outside [0,1]"
                )));
            }
        }
        Ok(())
    }
}

/// Reviewer critique plus sub-scores and the aggregated scalar score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewerFeedback {
    pub visual: f64,
    pub instruction: f64,
    pub score: f64,
    pub diagnosis: String,
}

impl ReviewerFeedback {
    /// Build feedback from sub-scores, computing the aggregate score.
    pub fn from_subscores(visual: f64, instruction: f64, diagnosis: impl Into<String>) -> Self {
        Self {
            visual,
            instruction,
            score: VISUAL_WEIGHT * visual + INSTRUCTION_WEIGHT * instruction,
            diagnosis: diagnosis.into(),
        }
    }

    pub fn validate(&self) -> Result<(), TrajectoryError> {
        for (name, v) in [
            ("visual", self.visual),
            ("instruction", self.instruction),
            ("score", self.score),
        ] {
            if !(0.0..=SCORE_MAX).contains(&v) {
                return Err(TrajectoryError::Invalid(format!(
                    "{name} score {v} outside [0,{SCORE_MAX}]"
                )));
            }
        }
        let expected = VISUAL_WEIGHT * self.visual + INSTRUCTION_WEIGHT * self.instruction;
        if (self.score - expected).abs() > 1e-9 {
            return Err(TrajectoryError::Invalid(format!(
                "score {} does not aggregate sub-scores (expected {expected})",
                self.score
            )));
        }
        Ok(())
    }
}

/// One turn of an episode. A stop turn carries neither candidate nor
/// feedback; every other turn carries both.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnRecord {
    pub turn_index: usize,
    pub action: ActionRecord,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub candidate: Option<Candidate>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub feedback: Option<ReviewerFeedback>,
}

/// Why an episode ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminationReason {
    StopAction,
    BudgetExhausted,
}

/// An ordered record of one prompt episode; the unit of reward assignment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub prompt: PromptSpec,
    pub turns: Vec<TurnRecord>,
    pub t_max: usize,
    pub terminated_by: TerminationReason,
}

impl Trajectory {
    /// Number of candidate-producing turns.
    pub fn candidate_count(&self) -> usize {
        self.turns.iter().filter(|t| t.candidate.is_some()).count()
    }

    /// Turns that produced a candidate, in order.
    pub fn candidate_turns(&self) -> impl Iterator<Item = &TurnRecord> {
        self.turns.iter().filter(|t| t.candidate.is_some())
    }

    /// Structural invariants of the log format. Filter predicates and
    /// reward-format checks are separate concerns and not enforced here.
    pub fn validate(&self) -> Result<(), TrajectoryError> {
        self.prompt.validate()?;
        if self.t_max < 1 {
            return Err(TrajectoryError::Invalid("t_max < 1".into()));
        }
        let t = self.candidate_count();
        if t == 0 {
            return Err(TrajectoryError::NoCandidates);
        }
        if t > self.t_max {
            return Err(TrajectoryError::Invalid(format!(
                "{t} candidates exceed budget {}",
                self.t_max
            )));
        }
        for (i, turn) in self.turns.iter().enumerate() {
            if turn.turn_index != i + 1 {
                return Err(TrajectoryError::Invalid(format!(
                    "turn {} has index {}",
                    i + 1,
                    turn.turn_index
                )));
            }
            if turn.action.well_formed != turn.action.is_well_formed() {
                return Err(TrajectoryError::Invalid(format!(
                    "turn {}: stored well_formed flag disagrees with fields",
                    turn.turn_index
                )));
            }
            let is_stop = turn.action.choice == ActionChoice::Stop;
            if is_stop {
                if i == 0 {
                    return Err(TrajectoryError::Invalid("turn 1 cannot stop".into()));
                }
                if i + 1 != self.turns.len() {
                    return Err(TrajectoryError::Invalid(
                        "stop turn must be the final entry".into(),
                    ));
                }
                if turn.candidate.is_some() || turn.feedback.is_some() {
                    return Err(TrajectoryError::Invalid(
                        "stop turn carries candidate or feedback".into(),
                    ));
                }
                if self.terminated_by != TerminationReason::StopAction {
                    return Err(TrajectoryError::Invalid(
                        "stop turn present but termination reason is not stop_action".into(),
                    ));
                }
            } else {
                if turn.candidate.is_none() || turn.feedback.is_none() {
                    return Err(TrajectoryError::Invalid(format!(
                        "turn {} missing candidate or feedback",
                        turn.turn_index
                    )));
                }
                turn.candidate.as_ref().unwrap().validate()?;
                turn.feedback.as_ref().unwrap().validate()?;
            }
        }
        let has_stop = self
            .turns
            .last()
            .map(|t| t.action.choice == ActionChoice::Stop)
            .unwrap_or(false);
        if self.terminated_by == TerminationReason::StopAction && !has_stop {
            return Err(TrajectoryError::Invalid(
                "terminated_by=stop_action but no stop turn".into(),
            ));
        }
        Ok(())
    }
}

/// K trajectories sampled for the same prompt; the unit of advantage
/// normalization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutGroup {
    pub prompt: PromptSpec,
    pub trajectories: Vec<Trajectory>,
}

impl RolloutGroup {
    pub fn validate(&self) -> Result<(), TrajectoryError> {
        if self.trajectories.len() < 2 {
            return Err(TrajectoryError::Invalid(format!(
                "rollout group has {} trajectories, need >= 2",
                self.trajectories.len()
            )));
        }
        for traj in &self.trajectories {
            if traj.prompt.id != self.prompt.id {
                return Err(TrajectoryError::Invalid(format!(
                    "trajectory for prompt {} in group for prompt {}",
                    traj.prompt.id, self.prompt.id
                )));
            }
        }
        Ok(())
    }
}

/// Reviewer scores of the candidate-producing turns, in turn order.
pub fn score_sequence(traj: &Trajectory) -> Result<Vec<f64>, TrajectoryError> {
    let scores: Vec<f64> = traj
        .candidate_turns()
        .map(|t| t.feedback.as_ref().map(|f| f.score).unwrap_or(f64::NAN))
        .collect();
    if scores.is_empty() || scores.iter().any(|s| s.is_nan()) {
        return Err(TrajectoryError::NoCandidates);
    }
    Ok(scores)
}

/// The delivered output: the highest-scored candidate across the whole
/// trajectory, ties broken by the earliest qualifying turn. Returns the
/// 1-based candidate turn position alongside the candidate.
pub fn select_output(traj: &Trajectory) -> Result<(usize, &Candidate), TrajectoryError> {
    let mut best: Option<(usize, f64, &Candidate)> = None;
    for (pos, turn) in traj.candidate_turns().enumerate() {
        let score = turn.feedback.as_ref().map(|f| f.score).unwrap_or(f64::NAN);
        let cand = turn.candidate.as_ref().unwrap();
        match best {
            Some((_, best_score, _)) if score <= best_score => {}
            _ => best = Some((pos + 1, score, cand)),
        }
    }
    best.map(|(t, _, c)| (t, c)).ok_or(TrajectoryError::NoCandidates)
}
