//! Branch-and-select trajectory construction, trajectory filtering, and
//! conversational export.
//!
//! Per turn the proposer expands K candidate actions, every branch is
//! executed and scored, and exploration continues from the per-turn best
//! branch. Expansion stops when the best branch clears the stop threshold,
//! the turn budget is reached, or the best branch fails to improve on the
//! running best score. The full tree is logged; the selected path is what
//! filtering and export consume. A no-improvement stop excludes its final
//! (non-improving) turn from the selected path.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{Environment, EnvironmentError};
use crate::rng::SeedTree;
use crate::trajectory::{
    ActionChoice, ActionRecord, Candidate, PromptSpec, ReviewerFeedback, SCORE_MAX,
};

#[derive(Debug, Error)]
pub enum DatagenError {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("proposer returned {got} actions at turn {turn}, expected {want}")]
    BadProposal { turn: usize, got: usize, want: usize },
    #[error("environment failure at turn {turn} branch {branch}: {source}")]
    Env {
        turn: usize,
        branch: usize,
        #[source]
        source: EnvironmentError,
    },
}

/// One executed branch of an expanded turn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchCandidate {
    pub action: ActionRecord,
    pub candidate: Candidate,
    pub feedback: ReviewerFeedback,
}

/// One turn of the exploration tree: exactly K branches plus the index of
/// the per-turn argmax (ties take the lowest branch index).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpandedTurn {
    pub turn_index: usize,
    pub branches: Vec<BranchCandidate>,
    pub selected: usize,
}

impl ExpandedTurn {
    pub fn selected_branch(&self) -> &BranchCandidate {
        &self.branches[self.selected]
    }

    pub fn selected_score(&self) -> f64 {
        self.selected_branch().feedback.score
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Threshold,
    Budget,
    NoImprovement,
}

/// Full exploration record for one prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchLog {
    pub prompt: PromptSpec,
    pub k: usize,
    pub rho_thr: f64,
    pub turns: Vec<ExpandedTurn>,
    /// Number of leading turns forming the selected path.
    pub path_len: usize,
    pub stop: StopReason,
}

impl BranchLog {
    pub fn selected_path(&self) -> impl Iterator<Item = &ExpandedTurn> {
        self.turns.iter().take(self.path_len)
    }

    /// Score sequence along the selected path.
    pub fn selected_scores(&self) -> Vec<f64> {
        self.selected_path().map(|t| t.selected_score()).collect()
    }
}

/// Proposes the K candidate actions for one turn (refine or regenerate;
/// stopping is decided by the threshold rule, not the proposer).
pub trait Proposer {
    fn propose(
        &self,
        prompt: &PromptSpec,
        turn: usize,
        k: usize,
        rng: &mut ChaCha8Rng,
    ) -> Vec<ActionChoice>;
}

/// Draws each branch action independently from a refine/regenerate mixture.
#[derive(Debug, Clone, Copy)]
pub struct MixtureProposer {
    pub refine_prob: f64,
}

impl Default for MixtureProposer {
    fn default() -> Self {
        Self { refine_prob: 0.5 }
    }
}

impl Proposer for MixtureProposer {
    fn propose(
        &self,
        _prompt: &PromptSpec,
        _turn: usize,
        k: usize,
        rng: &mut ChaCha8Rng,
    ) -> Vec<ActionChoice> {
        (0..k)
            .map(|_| {
                if rng.gen::<f64>() < self.refine_prob {
                    ActionChoice::Refine
                } else {
                    ActionChoice::Regenerate
                }
            })
            .collect()
    }
}

fn branch_action(choice: ActionChoice, prompt_id: &str, turn: usize, branch: usize) -> ActionRecord {
    let payload = format!("{prompt_id}:t{turn}:k{branch}");
    match choice {
        ActionChoice::Refine => ActionRecord::refine(format!("{payload}:refine")),
        ActionChoice::Regenerate => ActionRecord::regenerate(format!("{payload}:regenerate")),
        ActionChoice::Stop => unreachable!("proposer never proposes stop"),
    }
}

/// Expand-and-select construction for one prompt.
pub fn branch_and_select(
    proposer: &dyn Proposer,
    env: &dyn Environment,
    prompt: &PromptSpec,
    k: usize,
    t_max: usize,
    rho_thr: f64,
    tree: &SeedTree,
) -> Result<BranchLog, DatagenError> {
    if k < 1 {
        return Err(DatagenError::InvalidParams("k must be >= 1".into()));
    }
    if t_max < 1 {
        return Err(DatagenError::InvalidParams("t_max must be >= 1".into()));
    }
    if !(rho_thr > 0.0 && rho_thr <= SCORE_MAX) {
        return Err(DatagenError::InvalidParams(format!(
            "rho_thr must be in (0,{SCORE_MAX}], got {rho_thr}"
        )));
    }

    let mut turns: Vec<ExpandedTurn> = Vec::new();
    let mut rho_best = f64::NEG_INFINITY;
    let mut stop = StopReason::Budget;
    let mut path_len = 0;

    for turn in 1..=t_max {
        let node = tree.child_idx("turn", turn as u64);
        let choices = if turn == 1 {
            vec![ActionChoice::Regenerate; k]
        } else {
            let proposed =
                proposer.propose(prompt, turn, k, &mut node.child("propose").rng());
            if proposed.len() != k {
                return Err(DatagenError::BadProposal {
                    turn,
                    got: proposed.len(),
                    want: k,
                });
            }
            proposed
        };

        let current = turns
            .last()
            .map(|t: &ExpandedTurn| t.selected_branch().candidate.clone());
        let mut branches = Vec::with_capacity(k);
        for (branch, choice) in choices.into_iter().enumerate() {
            let branch_node = node.child_idx("branch", branch as u64);
            let tag = format!("t{turn}k{branch}");
            let action = branch_action(choice, &prompt.id, turn, branch);
            let instruction = action.revised_prompt.as_deref().unwrap();
            let env_err = |source| DatagenError::Env {
                turn,
                branch,
                source,
            };
            let candidate = match choice {
                ActionChoice::Refine => {
                    let base = current.as_ref().ok_or_else(|| DatagenError::Env {
                        turn,
                        branch,
                        source: EnvironmentError::Generator(
                            "refine proposed with no prior candidate".into(),
                        ),
                    })?;
                    env.refine(prompt, base, instruction, &tag, &mut branch_node.child("gen").rng())
                        .map_err(env_err)?
                }
                _ => env
                    .generate(prompt, instruction, &tag, &mut branch_node.child("gen").rng())
                    .map_err(env_err)?,
            };
            let feedback = env
                .review(prompt, &candidate, &mut branch_node.child("review").rng())
                .map_err(|source| DatagenError::Env {
                    turn,
                    branch,
                    source,
                })?;
            branches.push(BranchCandidate {
                action,
                candidate,
                feedback,
            });
        }

        let selected = branches
            .iter()
            .enumerate()
            .max_by(|(ia, a), (ib, b)| {
                a.feedback
                    .score
                    .partial_cmp(&b.feedback.score)
                    .unwrap()
                    // lowest index wins ties
                    .then(ib.cmp(ia))
            })
            .unwrap()
            .0;
        let best_score = branches[selected].feedback.score;
        turns.push(ExpandedTurn {
            turn_index: turn,
            branches,
            selected,
        });

        if best_score >= rho_thr {
            stop = StopReason::Threshold;
            path_len = turns.len();
            break;
        }
        if turn == t_max {
            stop = StopReason::Budget;
            path_len = turns.len();
            break;
        }
        if best_score <= rho_best {
            stop = StopReason::NoImprovement;
            // the non-improving turn stays in the tree but not in the path
            path_len = turns.len() - 1;
            break;
        }
        rho_best = best_score;
        path_len = turns.len();
    }

    Ok(BranchLog {
        prompt: prompt.clone(),
        k,
        rho_thr,
        turns,
        path_len,
        stop,
    })
}

/// Why a log was rejected (both predicates are always evaluated).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterVerdict {
    pub index: usize,
    pub strictly_increasing: bool,
    pub best_above_min: bool,
}

impl FilterVerdict {
    pub fn kept(&self) -> bool {
        self.strictly_increasing && self.best_above_min
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RejectionStats {
    pub total: usize,
    pub kept: usize,
    pub non_monotone: usize,
    pub low_best: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterReport {
    pub verdicts: Vec<FilterVerdict>,
    pub stats: RejectionStats,
}

impl FilterReport {
    pub fn kept_indices(&self) -> Vec<usize> {
        self.verdicts
            .iter()
            .filter(|v| v.kept())
            .map(|v| v.index)
            .collect()
    }
}

/// Keep only logs whose selected-path scores strictly increase and whose
/// best score exceeds `min_best`; plateaus violate strictness.
pub fn filter_trajectories(logs: &[BranchLog], min_best: f64) -> FilterReport {
    let mut verdicts = Vec::with_capacity(logs.len());
    let mut stats = RejectionStats {
        total: logs.len(),
        ..RejectionStats::default()
    };
    for (index, log) in logs.iter().enumerate() {
        let scores = log.selected_scores();
        let strictly_increasing = scores.windows(2).all(|w| w[1] > w[0]);
        let best = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let best_above_min = best > min_best;
        let verdict = FilterVerdict {
            index,
            strictly_increasing,
            best_above_min,
        };
        if verdict.kept() {
            stats.kept += 1;
        } else {
            if !strictly_increasing {
                stats.non_monotone += 1;
            }
            if !best_above_min {
                stats.low_best += 1;
            }
        }
        verdicts.push(verdict);
    }
    FilterReport { verdicts, stats }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackSummary {
    pub score: f64,
    pub diagnosis: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetAction {
    pub choice: ActionChoice,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub revised_prompt: Option<String>,
}

/// One supervised turn: the state the navigator saw and the action to emit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConversationTurn {
    pub turn_index: usize,
    pub state_summary: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub feedback: Option<FeedbackSummary>,
    pub target: TargetAction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConversationRecord {
    pub prompt_id: String,
    pub prompt_text: String,
    pub turns: Vec<ConversationTurn>,
}

fn state_summary(prompt: &PromptSpec, turn: usize, last_score: Option<f64>) -> String {
    match last_score {
        None => format!("request: {} | turn {turn} | no image yet", prompt.text),
        Some(score) => format!(
            "request: {} | turn {turn} | last score {score:.2}",
            prompt.text
        ),
    }
}

/// Convert kept logs to multi-turn conversational records, one per log.
/// Threshold-stopped logs get a final stop target after the winning turn.
pub fn export_conversational(kept: &[&BranchLog]) -> Vec<ConversationRecord> {
    kept.iter()
        .map(|log| {
            let mut turns = Vec::new();
            let mut last: Option<&BranchCandidate> = None;
            for expanded in log.selected_path() {
                let selected = expanded.selected_branch();
                turns.push(ConversationTurn {
                    turn_index: expanded.turn_index,
                    state_summary: state_summary(
                        &log.prompt,
                        expanded.turn_index,
                        last.map(|b| b.feedback.score),
                    ),
                    feedback: last.map(|b| FeedbackSummary {
                        score: b.feedback.score,
                        diagnosis: b.feedback.diagnosis.clone(),
                    }),
                    target: TargetAction {
                        choice: selected.action.choice,
                        revised_prompt: selected.action.revised_prompt.clone(),
                    },
                });
                last = Some(selected);
            }
            if log.stop == StopReason::Threshold {
                let final_turn = log.path_len + 1;
                turns.push(ConversationTurn {
                    turn_index: final_turn,
                    state_summary: state_summary(
                        &log.prompt,
                        final_turn,
                        last.map(|b| b.feedback.score),
                    ),
                    feedback: last.map(|b| FeedbackSummary {
                        score: b.feedback.score,
                        diagnosis: b.feedback.diagnosis.clone(),
                    }),
                    target: TargetAction {
                        choice: ActionChoice::Stop,
                        revised_prompt: None,
                    },
                });
            }
            ConversationRecord {
                prompt_id: log.prompt.id.clone(),
                prompt_text: log.prompt.text.clone(),
                turns,
            }
        })
        .collect()
}

/// Knobs of the construction pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConstructionParams {
    /// Branch factor K.
    pub k: usize,
    pub t_max: usize,
    /// Stop threshold on the raw score scale.
    pub rho_thr: f64,
    /// Filter: a kept trajectory's best score must exceed this.
    pub min_best: f64,
}

/// Full pipeline over a prompt pool: expand, filter, export.
pub fn construct_dataset(
    proposer: &(dyn Proposer + Sync),
    env: &(dyn Environment + Sync),
    pool: &[PromptSpec],
    params: &ConstructionParams,
    tree: &SeedTree,
) -> Result<(Vec<BranchLog>, FilterReport, Vec<ConversationRecord>), DatagenError> {
    let logs: Vec<BranchLog> = pool
        .par_iter()
        .enumerate()
        .map(|(i, prompt)| {
            branch_and_select(
                proposer,
                env,
                prompt,
                params.k,
                params.t_max,
                params.rho_thr,
                &tree.child_idx("prompt", i as u64),
            )
        })
        .collect::<Result<Vec<_>, _>>()?;
    let report = filter_trajectories(&logs, params.min_best);
    let kept: Vec<&BranchLog> = report.kept_indices().iter().map(|&i| &logs[i]).collect();
    let conversations = export_conversational(&kept);
    Ok((logs, report, conversations))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{SimEnv, SimEnvConfig};
    use crate::testutil::QueueEnv;

    fn prompt() -> PromptSpec {
        PromptSpec::new("p0", "scripted prompt", 0.5)
    }

    fn tree() -> SeedTree {
        SeedTree::from_root(1).child("datagen")
    }

    fn run_scripted(scores: &[f64], k: usize, t_max: usize) -> BranchLog {
        let env = QueueEnv::new(scores);
        branch_and_select(
            &MixtureProposer { refine_prob: 0.5 },
            &env,
            &prompt(),
            k,
            t_max,
            4.5,
            &tree(),
        )
        .unwrap()
    }

    #[test]
    fn threshold_stop_at_first_turn() {
        let log = run_scripted(&[4.6, 3.0], 2, 3);
        assert_eq!(log.turns.len(), 1);
        assert_eq!(log.stop, StopReason::Threshold);
        assert_eq!(log.turns[0].selected, 0);
        assert_eq!(log.selected_scores(), vec![4.6]);
    }

    #[test]
    fn no_improvement_stop_excludes_final_turn() {
        let log = run_scripted(&[4.0, 3.0, 3.9, 3.5], 2, 3);
        assert_eq!(log.turns.len(), 2);
        assert_eq!(log.stop, StopReason::NoImprovement);
        // the degrading turn is logged in the tree but not in the path
        assert_eq!(log.path_len, 1);
        assert_eq!(log.selected_scores(), vec![4.0]);
    }

    #[test]
    fn budget_stop_on_rising_sub_threshold_scores() {
        let log = run_scripted(&[3.0, 2.0, 3.6, 3.0, 4.2, 4.0], 2, 3);
        assert_eq!(log.turns.len(), 3);
        assert_eq!(log.stop, StopReason::Budget);
        assert_eq!(log.selected_scores(), vec![3.0, 3.6, 4.2]);
    }

    #[test]
    fn plateau_counts_as_no_improvement() {
        // equal best scores on consecutive turns trip the stop rule
        let log = run_scripted(&[3.0, 3.0, 3.0, 3.0], 2, 3);
        assert_eq!(log.stop, StopReason::NoImprovement);
        assert_eq!(log.turns.len(), 2);
        assert_eq!(log.selected_scores(), vec![3.0]);
    }

    #[test]
    fn argmax_tie_takes_lowest_branch_index() {
        let log = run_scripted(&[4.0, 4.0], 2, 1);
        assert_eq!(log.turns[0].selected, 0);
    }

    #[test]
    fn every_turn_has_exactly_k_branches() {
        let log = run_scripted(&[1.0, 1.5, 2.0, 2.5, 3.0, 3.5], 3, 2);
        for turn in &log.turns {
            assert_eq!(turn.branches.len(), 3);
            let best = turn
                .branches
                .iter()
                .map(|b| b.feedback.score)
                .fold(f64::NEG_INFINITY, f64::max);
            assert_eq!(turn.selected_score(), best);
        }
    }

    #[test]
    fn turn_one_proposes_only_regeneration() {
        let log = run_scripted(&[1.0, 1.5, 2.5, 3.5], 2, 2);
        for branch in &log.turns[0].branches {
            assert_eq!(branch.action.choice, ActionChoice::Regenerate);
        }
        // later turns carry distinct branch payloads
        let payloads: Vec<_> = log.turns[1]
            .branches
            .iter()
            .map(|b| b.action.revised_prompt.clone().unwrap())
            .collect();
        assert_ne!(payloads[0], payloads[1]);
    }

    #[test]
    fn mixture_proposer_extremes() {
        let always_refine = MixtureProposer { refine_prob: 1.0 };
        let never_refine = MixtureProposer { refine_prob: 0.0 };
        let mut rng = SeedTree::from_root(0).child("p").rng();
        let a = always_refine.propose(&prompt(), 2, 4, &mut rng);
        assert!(a.iter().all(|c| *c == ActionChoice::Refine));
        let b = never_refine.propose(&prompt(), 2, 4, &mut rng);
        assert!(b.iter().all(|c| *c == ActionChoice::Regenerate));
    }

    #[test]
    fn rho_best_strictly_increases_along_continued_turns() {
        let env = SimEnv::new(SimEnvConfig::default());
        for i in 0..20u64 {
            let log = branch_and_select(
                &MixtureProposer::default(),
                &env,
                &PromptSpec::new(format!("p{i}"), "x", 0.7),
                3,
                3,
                4.5,
                &SeedTree::from_root(i).child("bas"),
            )
            .unwrap();
            // every continued turn strictly improved on the running best
            let continued = match log.stop {
                StopReason::NoImprovement => log.path_len,
                _ => log.path_len.saturating_sub(1),
            };
            let scores = log.selected_scores();
            for w in scores[..continued.min(scores.len())].windows(2) {
                assert!(w[1] > w[0], "{scores:?} ({:?})", log.stop);
            }
        }
    }

    #[test]
    fn invalid_parameters_rejected() {
        let env = QueueEnv::new(&[]);
        let p = MixtureProposer::default();
        assert!(branch_and_select(&p, &env, &prompt(), 0, 3, 4.5, &tree()).is_err());
        assert!(branch_and_select(&p, &env, &prompt(), 2, 0, 4.5, &tree()).is_err());
        assert!(branch_and_select(&p, &env, &prompt(), 2, 3, 0.0, &tree()).is_err());
        assert!(branch_and_select(&p, &env, &prompt(), 2, 3, 5.5, &tree()).is_err());
    }

    fn log_from_path(scores: &[f64]) -> BranchLog {
        let env = QueueEnv::new(scores);
        let mut turns = Vec::new();
        for (i, &s) in scores.iter().enumerate() {
            let mut rng = tree().rng();
            let candidate = env
                .generate(&prompt(), "x", &format!("t{}", i + 1), &mut rng)
                .unwrap();
            let feedback = env.review(&prompt(), &candidate, &mut rng).unwrap();
            assert_eq!(feedback.score, s);
            turns.push(ExpandedTurn {
                turn_index: i + 1,
                branches: vec![BranchCandidate {
                    action: branch_action(ActionChoice::Regenerate, "p0", i + 1, 0),
                    candidate,
                    feedback,
                }],
                selected: 0,
            });
        }
        BranchLog {
            prompt: prompt(),
            k: 1,
            rho_thr: 4.5,
            path_len: turns.len(),
            turns,
            stop: StopReason::Budget,
        }
    }

    #[test]
    fn filter_keeps_strictly_increasing_high_best() {
        let logs = vec![
            log_from_path(&[3.0, 4.0, 4.8]),
            log_from_path(&[3.0, 4.8, 4.0]),
            log_from_path(&[3.0, 3.0, 4.8]),
        ];
        let report = filter_trajectories(&logs, 4.5);
        assert_eq!(report.kept_indices(), vec![0]);
        assert!(!report.verdicts[1].strictly_increasing);
        assert!(report.verdicts[1].best_above_min);
        assert!(!report.verdicts[2].strictly_increasing);
        assert_eq!(report.stats.kept, 1);
        assert_eq!(report.stats.non_monotone, 2);
    }

    #[test]
    fn filter_rejects_low_best() {
        let logs = vec![log_from_path(&[2.0, 3.0, 4.4])];
        let report = filter_trajectories(&logs, 4.5);
        assert!(report.kept_indices().is_empty());
        assert!(report.verdicts[0].strictly_increasing);
        assert!(!report.verdicts[0].best_above_min);
        assert_eq!(report.stats.low_best, 1);
    }

    #[test]
    fn filter_boundary_is_strict() {
        // best exactly at the minimum is not "exceeds"
        let logs = vec![log_from_path(&[3.0, 4.5])];
        let report = filter_trajectories(&logs, 4.5);
        assert!(report.kept_indices().is_empty());
    }

    #[test]
    fn rejected_rules_fail_on_recheck() {
        let logs = vec![
            log_from_path(&[3.0, 4.0, 4.8]),
            log_from_path(&[3.0, 4.8, 4.0]),
            log_from_path(&[2.0, 1.0]),
        ];
        let report = filter_trajectories(&logs, 4.5);
        for verdict in &report.verdicts {
            let scores = logs[verdict.index].selected_scores();
            let increasing = scores.windows(2).all(|w| w[1] > w[0]);
            let best = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert_eq!(verdict.strictly_increasing, increasing);
            assert_eq!(verdict.best_above_min, best > 4.5);
            if !verdict.kept() {
                assert!(!increasing || best <= 4.5);
            }
        }
    }

    #[test]
    fn export_appends_stop_after_threshold_win() {
        let log = run_scripted(&[4.6, 3.0], 2, 3);
        let records = export_conversational(&[&log]);
        assert_eq!(records.len(), 1);
        let turns = &records[0].turns;
        assert_eq!(turns.len(), 2);
        assert_eq!(turns[0].target.choice, ActionChoice::Regenerate);
        assert!(turns[0].feedback.is_none());
        let last = turns.last().unwrap();
        assert_eq!(last.target.choice, ActionChoice::Stop);
        assert_eq!(last.target.revised_prompt, None);
        assert_eq!(last.feedback.as_ref().unwrap().score, 4.6);
    }

    #[test]
    fn export_one_record_per_kept_log() {
        let logs = [log_from_path(&[3.0, 4.0, 4.8]), log_from_path(&[2.0, 4.6])];
        let kept: Vec<&BranchLog> = logs.iter().collect();
        let records = export_conversational(&kept);
        assert_eq!(records.len(), 2);
        // budget-stopped logs get no stop turn appended
        assert_eq!(records[0].turns.len(), 3);
    }

    #[test]
    fn export_round_trips_through_jsonl() {
        let log = run_scripted(&[4.6, 3.0], 2, 3);
        let records = export_conversational(&[&log]);
        let line = crate::logio::encode_line(&records[0]);
        let back: ConversationRecord = crate::logio::decode_line(&line).unwrap();
        assert_eq!(back, records[0]);
        assert_eq!(crate::logio::encode_line(&back), line);
    }

    #[test]
    fn branch_log_round_trips_through_jsonl() {
        let log = run_scripted(&[3.0, 2.0, 3.6, 3.0, 4.2, 4.0], 2, 3);
        let line = crate::logio::encode_line(&log);
        let back: BranchLog = crate::logio::decode_line(&line).unwrap();
        assert_eq!(back, log);
    }

    #[test]
    fn construct_dataset_end_to_end() {
        let env = SimEnv::new(SimEnvConfig::default());
        let pool = crate::env::synthetic_pool(20, 9);
        let (logs, report, conversations) = construct_dataset(
            &MixtureProposer::default(),
            &env,
            &pool,
            &ConstructionParams {
                k: 3,
                t_max: 3,
                rho_thr: 4.5,
                min_best: 4.5,
            },
            &SeedTree::from_root(3).child("dataset"),
        )
        .unwrap();
        assert_eq!(logs.len(), 20);
        assert_eq!(report.stats.total, 20);
        assert_eq!(conversations.len(), report.stats.kept);
        for idx in report.kept_indices() {
            let scores = logs[idx].selected_scores();
            assert!(scores.windows(2).all(|w| w[1] > w[0]));
            assert!(scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max) > 4.5);
        }
    }
}
