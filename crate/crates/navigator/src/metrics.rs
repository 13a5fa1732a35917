//! Diagnostics over trajectory logs: action shares, per-turn score curves,
//! turn counts, best-vs-final selection deltas, reviewer/human agreement,
//! and a declarative latency account.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trajectory::{score_sequence, ActionChoice, Trajectory};

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("no trajectories")]
    EmptyLog,
    #[error("no decision turns (all trajectories are single-turn)")]
    NoDecisions,
    #[error("no decisive comparisons")]
    NoDecisivePairs,
}

/// Shares of each action among decision turns (turn 2 onward). The forced
/// turn-1 generation is excluded so the metric reflects actual decisions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActionShares {
    pub stop: f64,
    pub refine: f64,
    pub regenerate: f64,
    pub decisions: usize,
}

pub fn action_distribution(logs: &[Trajectory]) -> Result<ActionShares, MetricsError> {
    if logs.is_empty() {
        return Err(MetricsError::EmptyLog);
    }
    let mut counts = [0usize; 3];
    for traj in logs {
        for turn in &traj.turns {
            if turn.turn_index >= 2 {
                counts[turn.action.choice.index()] += 1;
            }
        }
    }
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Err(MetricsError::NoDecisions);
    }
    let share = |c: ActionChoice| counts[c.index()] as f64 / total as f64;
    Ok(ActionShares {
        stop: share(ActionChoice::Stop),
        refine: share(ActionChoice::Refine),
        regenerate: share(ActionChoice::Regenerate),
        decisions: total,
    })
}

/// Mean reviewer score per turn index, averaged over the trajectories that
/// reach that turn. Empty buckets are omitted.
pub fn per_turn_curve(logs: &[Trajectory]) -> Vec<(usize, f64)> {
    let mut sums: Vec<(f64, usize)> = Vec::new();
    for traj in logs {
        for (idx, turn) in traj.candidate_turns().enumerate() {
            if sums.len() <= idx {
                sums.resize(idx + 1, (0.0, 0));
            }
            sums[idx].0 += turn.feedback.as_ref().unwrap().score;
            sums[idx].1 += 1;
        }
    }
    sums.iter()
        .enumerate()
        .filter(|(_, (_, n))| *n > 0)
        .map(|(idx, (sum, n))| (idx + 1, sum / *n as f64))
        .collect()
}

/// Mean number of candidate-producing turns.
pub fn avg_turns(logs: &[Trajectory]) -> Result<f64, MetricsError> {
    if logs.is_empty() {
        return Err(MetricsError::EmptyLog);
    }
    let total: usize = logs.iter().map(|t| t.candidate_count()).sum();
    Ok(total as f64 / logs.len() as f64)
}

/// Mean best score, mean final score, and their difference (raw 0-5 scale).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BestVsFinal {
    pub mean_best: f64,
    pub mean_final: f64,
    pub delta: f64,
}

pub fn best_vs_final(logs: &[Trajectory]) -> Result<BestVsFinal, MetricsError> {
    if logs.is_empty() {
        return Err(MetricsError::EmptyLog);
    }
    let mut best_sum = 0.0;
    let mut final_sum = 0.0;
    for traj in logs {
        let scores = score_sequence(traj).map_err(|_| MetricsError::EmptyLog)?;
        best_sum += scores.iter().cloned().fold(f64::MIN, f64::max);
        final_sum += *scores.last().unwrap();
    }
    let n = logs.len() as f64;
    let mean_best = best_sum / n;
    let mean_final = final_sum / n;
    Ok(BestVsFinal {
        mean_best,
        mean_final,
        delta: mean_best - mean_final,
    })
}

/// Human side of a pairwise comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HumanChoice {
    A,
    B,
    Tie,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgreementPair {
    pub rho_a: f64,
    pub rho_b: f64,
    pub human: HumanChoice,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgreementReport {
    /// Pairs excluded because the reviewer scores are within the tie margin.
    pub reviewer_ties: usize,
    /// Pairs counted: reviewer decisive and human decisive.
    pub decisive: usize,
    pub agreements: usize,
    pub rate: f64,
}

/// Agreement between reviewer-induced and human pairwise preferences on
/// decisive comparisons. A pair is a reviewer tie when `|rho_a - rho_b|`
/// is below `tie_margin`; human ties are likewise excluded.
pub fn reviewer_human_agreement(
    pairs: &[AgreementPair],
    tie_margin: f64,
) -> Result<AgreementReport, MetricsError> {
    let mut reviewer_ties = 0;
    let mut decisive = 0;
    let mut agreements = 0;
    for pair in pairs {
        if (pair.rho_a - pair.rho_b).abs() < tie_margin {
            reviewer_ties += 1;
            continue;
        }
        if pair.human == HumanChoice::Tie {
            continue;
        }
        decisive += 1;
        let reviewer_prefers_a = pair.rho_a > pair.rho_b;
        let human_prefers_a = pair.human == HumanChoice::A;
        if reviewer_prefers_a == human_prefers_a {
            agreements += 1;
        }
    }
    if decisive == 0 {
        return Err(MetricsError::NoDecisivePairs);
    }
    Ok(AgreementReport {
        reviewer_ties,
        decisive,
        agreements,
        rate: agreements as f64 / decisive as f64,
    })
}

/// Declarative per-step costs in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyCost {
    pub per_generation: f64,
    pub per_review: f64,
    pub per_decision: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub total: f64,
    pub mean_per_trajectory: f64,
    /// Summed cost attributed to each turn index across the log.
    pub per_turn: Vec<(usize, f64)>,
}

/// Account latency for a log under a user-supplied cost model: every
/// candidate turn costs one generation plus one review plus one navigator
/// decision; a trailing stop turn costs one decision.
pub fn latency_account(logs: &[Trajectory], cost: &LatencyCost) -> LatencyReport {
    let mut per_turn: Vec<f64> = Vec::new();
    let mut total = 0.0;
    for traj in logs {
        for turn in &traj.turns {
            let c = if turn.candidate.is_some() {
                cost.per_generation + cost.per_review + cost.per_decision
            } else {
                cost.per_decision
            };
            if per_turn.len() < turn.turn_index {
                per_turn.resize(turn.turn_index, 0.0);
            }
            per_turn[turn.turn_index - 1] += c;
            total += c;
        }
    }
    let mean = if logs.is_empty() {
        0.0
    } else {
        total / logs.len() as f64
    };
    LatencyReport {
        total,
        mean_per_trajectory: mean,
        per_turn: per_turn
            .iter()
            .enumerate()
            .map(|(i, c)| (i + 1, *c))
            .collect(),
    }
}

/// Fraction of trajectories that produced their last candidate exactly when
/// the score first reached `threshold` (stopping neither early nor late).
pub fn correct_stop_rate(logs: &[Trajectory], threshold: f64) -> Result<f64, MetricsError> {
    if logs.is_empty() {
        return Err(MetricsError::EmptyLog);
    }
    let mut correct = 0usize;
    for traj in logs {
        let scores = score_sequence(traj).map_err(|_| MetricsError::EmptyLog)?;
        let first_eligible = scores.iter().position(|s| *s >= threshold);
        if first_eligible == Some(scores.len() - 1) {
            correct += 1;
        }
    }
    Ok(correct as f64 / logs.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{trajectory_from_scores, trajectory_with_choices};
    use crate::trajectory::TerminationReason;

    #[test]
    fn action_shares_all_stop() {
        let logs = vec![
            trajectory_from_scores("a", &[4.8], 3, TerminationReason::StopAction),
            trajectory_from_scores("b", &[4.9], 3, TerminationReason::StopAction),
        ];
        let shares = action_distribution(&logs).unwrap();
        assert_eq!(shares.stop, 1.0);
        assert_eq!(shares.refine, 0.0);
        assert_eq!(shares.regenerate, 0.0);
        assert_eq!(shares.decisions, 2);
    }

    #[test]
    fn action_shares_sum_to_one() {
        let logs = vec![
            trajectory_with_choices(
                "a",
                &[2.0, 3.0, 4.0],
                &[
                    ActionChoice::Regenerate,
                    ActionChoice::Refine,
                    ActionChoice::Regenerate,
                ],
                3,
                TerminationReason::BudgetExhausted,
            ),
            trajectory_from_scores("b", &[4.8], 3, TerminationReason::StopAction),
        ];
        let s = action_distribution(&logs).unwrap();
        assert!((s.stop + s.refine + s.regenerate - 1.0).abs() < 1e-12);
        assert!(s.stop >= 0.0 && s.refine >= 0.0 && s.regenerate >= 0.0);
        assert_eq!(s.decisions, 3);
    }

    #[test]
    fn action_shares_reproduce_crafted_counts() {
        // 2000 decisions: 1303 regenerate, 400 refine, 297 stop
        let mut logs = Vec::new();
        for i in 0..1303 {
            logs.push(trajectory_with_choices(
                &format!("g{i}"),
                &[2.0, 3.0],
                &[ActionChoice::Regenerate, ActionChoice::Regenerate],
                2,
                TerminationReason::BudgetExhausted,
            ));
        }
        for i in 0..400 {
            logs.push(trajectory_with_choices(
                &format!("f{i}"),
                &[2.0, 3.0],
                &[ActionChoice::Regenerate, ActionChoice::Refine],
                2,
                TerminationReason::BudgetExhausted,
            ));
        }
        for i in 0..297 {
            logs.push(trajectory_from_scores(
                &format!("s{i}"),
                &[4.8],
                2,
                TerminationReason::StopAction,
            ));
        }
        let s = action_distribution(&logs).unwrap();
        assert!((s.regenerate - 0.6515).abs() < 1e-12);
        assert_eq!(s.decisions, 2000);
    }

    #[test]
    fn no_decision_turns_is_an_error() {
        let logs = vec![trajectory_from_scores(
            "a",
            &[3.0],
            1,
            TerminationReason::BudgetExhausted,
        )];
        assert_eq!(action_distribution(&logs), Err(MetricsError::NoDecisions));
    }

    #[test]
    fn per_turn_curve_single_trajectory() {
        let logs = vec![trajectory_from_scores(
            "a",
            &[3.0, 4.0, 5.0],
            3,
            TerminationReason::BudgetExhausted,
        )];
        assert_eq!(per_turn_curve(&logs), vec![(1, 3.0), (2, 4.0), (3, 5.0)]);
    }

    #[test]
    fn per_turn_curve_uneven_lengths() {
        let logs = vec![
            trajectory_from_scores("a", &[3.0, 4.0, 5.0], 3, TerminationReason::BudgetExhausted),
            trajectory_from_scores("b", &[2.0, 3.0], 3, TerminationReason::StopAction),
            trajectory_from_scores("c", &[4.0], 3, TerminationReason::StopAction),
        ];
        let curve = per_turn_curve(&logs);
        assert_eq!(curve[0], (1, 3.0));
        assert_eq!(curve[1], (2, 3.5));
        assert_eq!(curve[2], (3, 5.0));
    }

    #[test]
    fn per_turn_curve_empty_log() {
        assert!(per_turn_curve(&[]).is_empty());
    }

    #[test]
    fn avg_turns_examples() {
        let logs = vec![
            trajectory_from_scores("a", &[3.0], 3, TerminationReason::StopAction),
            trajectory_from_scores("b", &[3.0, 4.0], 3, TerminationReason::BudgetExhausted),
        ];
        assert!((avg_turns(&logs).unwrap() - 1.5).abs() < 1e-12);
        let all3 = vec![
            trajectory_from_scores("a", &[1.0, 2.0, 3.0], 3, TerminationReason::BudgetExhausted);
            4
        ];
        assert!((avg_turns(&all3).unwrap() - 3.0).abs() < 1e-12);
    }

    #[test]
    fn avg_turns_matches_synthetic_mean() {
        // lengths 1,2,2 -> 5/3, printed as 1.67
        let logs = vec![
            trajectory_from_scores("a", &[3.0], 3, TerminationReason::StopAction),
            trajectory_from_scores("b", &[3.0, 4.0], 3, TerminationReason::StopAction),
            trajectory_from_scores("c", &[3.0, 4.0], 3, TerminationReason::StopAction),
        ];
        let avg = avg_turns(&logs).unwrap();
        assert!((avg - 5.0 / 3.0).abs() < 1e-12);
        assert_eq!(format!("{avg:.2}"), "1.67");
    }

    #[test]
    fn best_vs_final_monotone_is_zero_delta() {
        let logs = vec![trajectory_from_scores(
            "a",
            &[3.0, 4.0, 5.0],
            3,
            TerminationReason::BudgetExhausted,
        )];
        let b = best_vs_final(&logs).unwrap();
        assert_eq!(b.delta, 0.0);
    }

    #[test]
    fn best_vs_final_regression_delta() {
        let logs = vec![trajectory_from_scores(
            "a",
            &[4.8, 4.0],
            3,
            TerminationReason::BudgetExhausted,
        )];
        let b = best_vs_final(&logs).unwrap();
        assert!((b.delta - 0.8).abs() < 1e-12);
        assert!(b.delta >= 0.0);
    }

    #[test]
    fn agreement_simple_cases() {
        let pairs = vec![
            AgreementPair {
                rho_a: 4.0,
                rho_b: 3.0,
                human: HumanChoice::A,
            }, // agree
            AgreementPair {
                rho_a: 4.0,
                rho_b: 3.9,
                human: HumanChoice::A,
            }, // reviewer tie, excluded
            AgreementPair {
                rho_a: 2.0,
                rho_b: 4.0,
                human: HumanChoice::A,
            }, // disagree
        ];
        let report = reviewer_human_agreement(&pairs, 0.3).unwrap();
        assert_eq!(report.reviewer_ties, 1);
        assert_eq!(report.decisive, 2);
        assert_eq!(report.agreements, 1);
        assert!((report.rate - 0.5).abs() < 1e-12);
    }

    #[test]
    fn agreement_fixture_rate() {
        // 10 decisive pairs, 7 agreements, plus 2 excluded reviewer ties
        let mut pairs = Vec::new();
        for i in 0..10 {
            let human = if i < 7 { HumanChoice::A } else { HumanChoice::B };
            pairs.push(AgreementPair {
                rho_a: 4.5,
                rho_b: 3.0,
                human,
            });
        }
        pairs.push(AgreementPair {
            rho_a: 3.0,
            rho_b: 3.1,
            human: HumanChoice::A,
        });
        pairs.push(AgreementPair {
            rho_a: 2.0,
            rho_b: 2.2,
            human: HumanChoice::B,
        });
        let report = reviewer_human_agreement(&pairs, 0.3).unwrap();
        assert_eq!(report.decisive, 10);
        assert!((report.rate - 0.70).abs() < 1e-12);
    }

    #[test]
    fn latency_one_turn_is_plain_sum() {
        let cost = LatencyCost {
            per_generation: 5.0,
            per_review: 2.0,
            per_decision: 3.0,
        };
        let logs = vec![trajectory_from_scores(
            "a",
            &[3.0],
            1,
            TerminationReason::BudgetExhausted,
        )];
        let report = latency_account(&logs, &cost);
        assert_eq!(report.total, 10.0);
    }

    #[test]
    fn latency_three_turns_triples() {
        let cost = LatencyCost {
            per_generation: 5.0,
            per_review: 2.0,
            per_decision: 3.0,
        };
        let logs = vec![trajectory_from_scores(
            "a",
            &[3.0, 3.5, 4.0],
            3,
            TerminationReason::BudgetExhausted,
        )];
        let report = latency_account(&logs, &cost);
        assert_eq!(report.total, 30.0);
        assert_eq!(report.per_turn, vec![(1, 10.0), (2, 10.0), (3, 10.0)]);
    }

    #[test]
    fn latency_zero_cost_model() {
        let cost = LatencyCost {
            per_generation: 0.0,
            per_review: 0.0,
            per_decision: 0.0,
        };
        let logs = vec![trajectory_from_scores(
            "a",
            &[3.0, 4.0],
            3,
            TerminationReason::StopAction,
        )];
        assert_eq!(latency_account(&logs, &cost).total, 0.0);
    }

    #[test]
    fn latency_counts_trailing_stop_decision() {
        let cost = LatencyCost {
            per_generation: 5.0,
            per_review: 2.0,
            per_decision: 3.0,
        };
        let logs = vec![trajectory_from_scores(
            "a",
            &[4.8],
            3,
            TerminationReason::StopAction,
        )];
        // one generated turn plus the stop decision
        assert_eq!(latency_account(&logs, &cost).total, 13.0);
    }

    #[test]
    fn correct_stop_rate_counts_first_eligible_at_end() {
        let logs = vec![
            // first eligible index == last: correct
            trajectory_from_scores("a", &[3.0, 4.8], 3, TerminationReason::StopAction),
            // eligible at turn 2 but continued: late
            trajectory_from_scores("b", &[3.0, 4.8, 4.9], 3, TerminationReason::BudgetExhausted),
            // never eligible
            trajectory_from_scores("c", &[3.0, 3.5], 3, TerminationReason::StopAction),
        ];
        let rate = correct_stop_rate(&logs, 4.5).unwrap();
        assert!((rate - 1.0 / 3.0).abs() < 1e-12);
    }
}
