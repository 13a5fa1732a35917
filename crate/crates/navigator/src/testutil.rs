//! Fixture builders and scripted environments shared by the unit,
//! integration, and acceptance suites.

use std::cell::RefCell;
use std::collections::{HashMap, VecDeque};

use rand_chacha::ChaCha8Rng;

use crate::env::{Environment, EnvironmentError};
use crate::trajectory::{
    ActionChoice, ActionRecord, Candidate, PromptSpec, ReviewerFeedback, TerminationReason,
    Trajectory, TurnRecord, SCORE_MAX,
};

/// Build a trajectory whose candidate turns carry the given reviewer scores.
///
/// Turn 1 is the initial generation; later turns are refinements. When
/// `terminated_by` is `StopAction` a trailing stop record is appended.
pub fn trajectory_from_scores(
    prompt_id: &str,
    scores: &[f64],
    t_max: usize,
    terminated_by: TerminationReason,
) -> Trajectory {
    let choices: Vec<ActionChoice> = (0..scores.len())
        .map(|i| {
            if i == 0 {
                ActionChoice::Regenerate
            } else {
                ActionChoice::Refine
            }
        })
        .collect();
    trajectory_with_choices(prompt_id, scores, &choices, t_max, terminated_by)
}

/// Like [`trajectory_from_scores`] but with an explicit action choice per
/// candidate turn (turn 1 should be regenerate to mirror real episodes).
pub fn trajectory_with_choices(
    prompt_id: &str,
    scores: &[f64],
    choices: &[ActionChoice],
    t_max: usize,
    terminated_by: TerminationReason,
) -> Trajectory {
    assert_eq!(scores.len(), choices.len());
    let prompt = PromptSpec::new(prompt_id, format!("fixture prompt {prompt_id}"), 0.5);
    let mut turns = Vec::new();
    for (i, (&score, &choice)) in scores.iter().zip(choices).enumerate() {
        let t = i + 1;
        let payload = format!("{prompt_id}#t{t}");
        let action = match choice {
            ActionChoice::Refine => ActionRecord::refine(payload.clone()),
            ActionChoice::Regenerate => ActionRecord::regenerate(payload.clone()),
            ActionChoice::Stop => panic!("stop is not a candidate-producing choice"),
        };
        turns.push(TurnRecord {
            turn_index: t,
            action,
            candidate: Some(Candidate {
                id: format!("{prompt_id}-t{t}"),
                latent_quality: Some((score / SCORE_MAX).clamp(0.0, 1.0)),
                payload_ref: format!("sim://{prompt_id}-t{t}"),
            }),
            // equal sub-scores aggregate back to `score` exactly
            feedback: Some(ReviewerFeedback {
                visual: score,
                instruction: score,
                score,
                diagnosis: format!("fixture score {score}"),
            }),
        });
    }
    if terminated_by == TerminationReason::StopAction {
        turns.push(TurnRecord {
            turn_index: scores.len() + 1,
            action: ActionRecord::stop(),
            candidate: None,
            feedback: None,
        });
    }
    Trajectory {
        prompt,
        turns,
        t_max,
        terminated_by,
    }
}

/// Noise-free environment where refined candidates always review to
/// `refine_score` and generated ones to `generate_score`.
pub struct ConstantEnv {
    pub generate_score: f64,
    pub refine_score: f64,
    assigned: RefCell<HashMap<String, f64>>,
}

impl ConstantEnv {
    pub fn new(generate_score: f64, refine_score: f64) -> Self {
        Self {
            generate_score,
            refine_score,
            assigned: RefCell::new(HashMap::new()),
        }
    }
}

fn scripted_candidate(
    prompt: &PromptSpec,
    tag: &str,
    score: f64,
    assigned: &RefCell<HashMap<String, f64>>,
) -> Candidate {
    let id = format!("{}-{tag}", prompt.id);
    assigned.borrow_mut().insert(id.clone(), score);
    Candidate {
        payload_ref: format!("scripted://{id}"),
        id,
        latent_quality: Some((score / SCORE_MAX).clamp(0.0, 1.0)),
    }
}

fn scripted_review(
    candidate: &Candidate,
    assigned: &RefCell<HashMap<String, f64>>,
) -> ReviewerFeedback {
    let score = *assigned
        .borrow()
        .get(&candidate.id)
        .expect("review of unknown scripted candidate");
    ReviewerFeedback {
        visual: score,
        instruction: score,
        score,
        diagnosis: "scripted".into(),
    }
}

impl Environment for ConstantEnv {
    fn generate(
        &self,
        prompt: &PromptSpec,
        _instruction: &str,
        tag: &str,
        _rng: &mut ChaCha8Rng,
    ) -> Result<Candidate, EnvironmentError> {
        Ok(scripted_candidate(prompt, tag, self.generate_score, &self.assigned))
    }

    fn refine(
        &self,
        prompt: &PromptSpec,
        _current: &Candidate,
        _instruction: &str,
        tag: &str,
        _rng: &mut ChaCha8Rng,
    ) -> Result<Candidate, EnvironmentError> {
        Ok(scripted_candidate(prompt, tag, self.refine_score, &self.assigned))
    }

    fn review(
        &self,
        _prompt: &PromptSpec,
        candidate: &Candidate,
        _rng: &mut ChaCha8Rng,
    ) -> Result<ReviewerFeedback, EnvironmentError> {
        Ok(scripted_review(candidate, &self.assigned))
    }
}

/// Environment replaying a fixed queue of reviewer scores: each generated or
/// refined candidate consumes the next score. Panics when the script runs dry.
pub struct QueueEnv {
    scores: RefCell<VecDeque<f64>>,
    assigned: RefCell<HashMap<String, f64>>,
}

impl QueueEnv {
    pub fn new(scores: &[f64]) -> Self {
        Self {
            scores: RefCell::new(scores.iter().copied().collect()),
            assigned: RefCell::new(HashMap::new()),
        }
    }

    fn next_score(&self) -> f64 {
        self.scores
            .borrow_mut()
            .pop_front()
            .expect("scripted score queue exhausted")
    }
}

impl Environment for QueueEnv {
    fn generate(
        &self,
        prompt: &PromptSpec,
        _instruction: &str,
        tag: &str,
        _rng: &mut ChaCha8Rng,
    ) -> Result<Candidate, EnvironmentError> {
        Ok(scripted_candidate(prompt, tag, self.next_score(), &self.assigned))
    }

    fn refine(
        &self,
        prompt: &PromptSpec,
        _current: &Candidate,
        _instruction: &str,
        tag: &str,
        _rng: &mut ChaCha8Rng,
    ) -> Result<Candidate, EnvironmentError> {
        Ok(scripted_candidate(prompt, tag, self.next_score(), &self.assigned))
    }

    fn review(
        &self,
        _prompt: &PromptSpec,
        candidate: &Candidate,
        _rng: &mut ChaCha8Rng,
    ) -> Result<ReviewerFeedback, EnvironmentError> {
        Ok(scripted_review(candidate, &self.assigned))
    }
}
