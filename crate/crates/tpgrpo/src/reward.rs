//! Reward computation: outcome extraction, group normalization, step-to-
//! thought merging, token-level reward placement and suffix-sum advantages,
//! together with the closed-form per-thought advantages used as an
//! independent oracle.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::model::{merge_runs, LabeledStep, RolloutGroup, StepLabel, Thought, TokenMap};

/// Groups with outcome standard deviation below this are treated as
/// degenerate: every normalized reward becomes zero instead of dividing by
/// an epsilon, so uninformative groups contribute no gradient.
pub const DEGENERATE_STD: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum RewardError {
    #[error("step {step} label {label:?} does not belong to the {family} family")]
    MixedLabelFamilies {
        step: usize,
        label: StepLabel,
        family: &'static str,
    },
    #[error("thought ends at byte {offset} beyond the token map")]
    ThoughtEndBeyondTokens { offset: usize },
    #[error("adjacent thoughts share end token {token}")]
    NonIncreasingEndTokens { token: usize },
    #[error("thought reward index {index} exceeds token count {n_tokens}")]
    RewardIndexOutOfRange { index: usize, n_tokens: usize },
    #[error("thought labels are not strictly alternating at position {position}")]
    NotAlternating { position: usize },
    #[error("final thought must be Correct or Matched, found {label:?}")]
    BadFinalThought { label: StepLabel },
    #[error("empty thought sequence")]
    EmptyThoughts,
}

/// Hyperparameters of the capability-adaptive process reward.
#[derive(Debug, Clone, Copy)]
pub struct RewardParams {
    /// Process-reward coefficient; scales the group mean accuracy.
    pub alpha: f64,
}

impl Default for RewardParams {
    fn default() -> Self {
        Self { alpha: 1.0 }
    }
}

/// Group statistics from outcome normalization.
#[derive(Debug, Clone)]
pub struct GroupStats {
    pub mean: f64,
    pub std: f64,
    pub normalized: Vec<f64>,
}

/// Extracts the content of the last `\boxed{...}` in the answer, honoring
/// nested braces.
pub fn extract_boxed(answer: &str) -> Option<&str> {
    const MARKER: &str = "\\boxed{";
    let start = answer.rfind(MARKER)?;
    let body = &answer[start + MARKER.len()..];
    let mut depth = 1usize;
    for (i, ch) in body.char_indices() {
        match ch {
            '{' => depth += 1,
            '}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(&body[..i]);
                }
            }
            _ => {}
        }
    }
    None
}

/// Binary outcome reward: 1 when the last boxed expression matches the gold
/// answer exactly after trimming, 0 otherwise (including a missing box).
pub fn outcome_reward(answer: &str, gold_answer: &str) -> f64 {
    match extract_boxed(answer) {
        Some(content) if content.trim() == gold_answer.trim() => 1.0,
        _ => 0.0,
    }
}

fn population_stats(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Normalizes outcome rewards within a group using the population standard
/// deviation. Degenerate groups normalize to all zeros.
pub fn normalize_outcomes(rewards: &[f64]) -> GroupStats {
    assert!(!rewards.is_empty(), "normalize_outcomes needs a group");
    let (mean, std) = population_stats(rewards);
    let normalized = if std < DEGENERATE_STD {
        vec![0.0; rewards.len()]
    } else {
        rewards.iter().map(|r| (r - mean) / std).collect()
    };
    GroupStats {
        mean,
        std,
        normalized,
    }
}

/// Normalizes a pooled set of step rewards by its mean and population std.
/// This is the baseline process-supervised path; the thought-level algorithm
/// does not pool-normalize its process rewards.
pub fn normalize_process_rewards(pooled: &[f64]) -> Vec<f64> {
    assert!(!pooled.is_empty(), "normalize_process_rewards needs rewards");
    let (mean, std) = population_stats(pooled);
    if std < DEGENERATE_STD {
        vec![0.0; pooled.len()]
    } else {
        pooled.iter().map(|r| (r - mean) / std).collect()
    }
}

/// Capability-adaptive reward magnitude for correct solutions:
/// `alpha * acc_mean` of the rollout group.
pub fn capability_reward(group: &RolloutGroup, params: &RewardParams) -> f64 {
    params.alpha * group.acc_mean
}

/// Merges steps into thoughts: reflective steps are first relabeled Correct,
/// then maximal runs of equal labels collapse. Each thought's end token is
/// the token containing the last byte of its last step.
pub fn merge_to_thoughts(
    steps: &[LabeledStep],
    tokens: &TokenMap<'_>,
) -> Result<Vec<Thought>, RewardError> {
    if steps.is_empty() {
        return Err(RewardError::EmptyThoughts);
    }
    let correct_family = steps[0].label.is_correct_family();
    let labels: Vec<StepLabel> = steps
        .iter()
        .map(|s| {
            let family_ok = if correct_family {
                s.label.is_correct_family()
            } else {
                s.label.is_incorrect_family()
            };
            if !family_ok {
                return Err(RewardError::MixedLabelFamilies {
                    step: s.index,
                    label: s.label,
                    family: if correct_family { "correct" } else { "incorrect" },
                });
            }
            // Reflection counts as correct at reward time.
            Ok(match s.label {
                StepLabel::Reflection => StepLabel::Correct,
                other => other,
            })
        })
        .collect::<Result<_, _>>()?;

    let mut thoughts = Vec::new();
    let mut prev_end_token: Option<usize> = None;
    for (first, last, label) in merge_runs(&labels) {
        let end_byte = steps[last].char_span.1;
        debug_assert!(end_byte > steps[first].char_span.0);
        let end_token = tokens
            .token_at(end_byte - 1)
            .ok_or(RewardError::ThoughtEndBeyondTokens { offset: end_byte })?;
        if prev_end_token == Some(end_token) {
            return Err(RewardError::NonIncreasingEndTokens { token: end_token });
        }
        prev_end_token = Some(end_token);
        thoughts.push(Thought {
            step_range: (first, last),
            label,
            end_token_index: end_token,
        });
    }
    Ok(thoughts)
}

/// Places the sparse token rewards for one solution.
///
/// The final token of the whole solution carries the normalized outcome
/// reward. Every non-final thought contributes a process reward at its end
/// token: for correct solutions `+r_correct` on Correct and `-r_correct` on
/// Incorrect thoughts; for incorrect solutions `+r_hat` on Matched and
/// `-r_hat` on Unmatched thoughts. The final thought contributes nothing:
/// its outcome already sits on the solution's last token.
pub fn assign_token_rewards(
    thoughts: &[Thought],
    n_tokens: usize,
    r_hat: f64,
    r_correct: f64,
    correct: bool,
) -> Result<BTreeMap<usize, f64>, RewardError> {
    if thoughts.is_empty() {
        return Err(RewardError::EmptyThoughts);
    }
    if n_tokens == 0 {
        return Err(RewardError::RewardIndexOutOfRange {
            index: 0,
            n_tokens: 0,
        });
    }
    let mut rewards = BTreeMap::new();
    for thought in &thoughts[..thoughts.len() - 1] {
        let idx = thought.end_token_index;
        if idx >= n_tokens {
            return Err(RewardError::RewardIndexOutOfRange {
                index: idx,
                n_tokens,
            });
        }
        let value = if correct {
            match thought.label {
                StepLabel::Correct => r_correct,
                StepLabel::Incorrect => -r_correct,
                other => {
                    return Err(RewardError::MixedLabelFamilies {
                        step: thought.step_range.0,
                        label: other,
                        family: "correct",
                    })
                }
            }
        } else {
            match thought.label {
                StepLabel::Matched => r_hat,
                // Uncertain maps onto the unmatched branch: its advantage
                // cancels to zero, so uncertain thoughts are not suppressed.
                StepLabel::Unmatched | StepLabel::Uncertain => -r_hat,
                other => {
                    return Err(RewardError::MixedLabelFamilies {
                        step: thought.step_range.0,
                        label: other,
                        family: "incorrect",
                    })
                }
            }
        };
        rewards.insert(idx, value);
    }
    let last_thought = thoughts.last().expect("nonempty");
    if last_thought.end_token_index >= n_tokens {
        return Err(RewardError::RewardIndexOutOfRange {
            index: last_thought.end_token_index,
            n_tokens,
        });
    }
    *rewards.entry(n_tokens - 1).or_insert(0.0) += r_hat;
    Ok(rewards)
}

/// Advantage of token `t` as the sum of all rewards at positions `>= t`,
/// computed in one reverse pass.
pub fn compute_advantages(sparse_rewards: &BTreeMap<usize, f64>, n_tokens: usize) -> Vec<f64> {
    if let Some((&max_idx, _)) = sparse_rewards.iter().next_back() {
        assert!(
            max_idx < n_tokens,
            "reward index {max_idx} out of range for {n_tokens} tokens"
        );
    }
    let mut advantages = vec![0.0; n_tokens];
    let mut acc = 0.0;
    for t in (0..n_tokens).rev() {
        if let Some(r) = sparse_rewards.get(&t) {
            acc += r;
        }
        advantages[t] = acc;
    }
    advantages
}

/// Closed-form per-thought advantages for strictly alternating thought
/// sequences ending in a Correct (or Matched) outcome-bearing thought.
///
/// Correct solutions: Correct thoughts carry `r_hat`, Incorrect thoughts
/// `r_hat - r_correct`. Incorrect solutions: Matched thoughts carry `r_hat`,
/// Unmatched thoughts zero. Any other structure violates the precondition
/// and the suffix sum remains the ground truth.
pub fn closed_form_advantages(
    thoughts: &[Thought],
    r_hat: f64,
    r_correct: f64,
    correct: bool,
) -> Result<Vec<f64>, RewardError> {
    if thoughts.is_empty() {
        return Err(RewardError::EmptyThoughts);
    }
    for (i, pair) in thoughts.windows(2).enumerate() {
        if pair[0].label == pair[1].label {
            return Err(RewardError::NotAlternating { position: i + 1 });
        }
    }
    let final_label = thoughts.last().expect("nonempty").label;
    let expected_final = if correct {
        StepLabel::Correct
    } else {
        StepLabel::Matched
    };
    if final_label != expected_final {
        return Err(RewardError::BadFinalThought { label: final_label });
    }
    thoughts
        .iter()
        .map(|t| {
            let value = if correct {
                match t.label {
                    StepLabel::Correct => r_hat,
                    StepLabel::Incorrect => r_hat - r_correct,
                    other => {
                        return Err(RewardError::MixedLabelFamilies {
                            step: t.step_range.0,
                            label: other,
                            family: "correct",
                        })
                    }
                }
            } else {
                match t.label {
                    StepLabel::Matched => r_hat,
                    StepLabel::Unmatched | StepLabel::Uncertain => 0.0,
                    other => {
                        return Err(RewardError::MixedLabelFamilies {
                            step: t.step_range.0,
                            label: other,
                            family: "incorrect",
                        })
                    }
                }
            };
            Ok(value)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::{prop_assert, proptest};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn thought(label: StepLabel, end: usize, idx: usize) -> Thought {
        Thought {
            step_range: (idx, idx),
            label,
            end_token_index: end,
        }
    }

    #[test]
    fn boxed_extraction() {
        assert_eq!(outcome_reward("so \\boxed{42}", "42"), 1.0);
        assert_eq!(outcome_reward("no box at all", "42"), 0.0);
        assert_eq!(outcome_reward("padded \\boxed{ 42 }", "42"), 1.0);
        assert_eq!(outcome_reward("nested \\boxed{\\frac{1}{2}}", "\\frac{1}{2}"), 1.0);
        assert_eq!(outcome_reward("two \\boxed{1} then \\boxed{2}", "2"), 1.0);
        assert_eq!(outcome_reward("unclosed \\boxed{42", "42"), 0.0);
    }

    #[test]
    fn normalize_single_positive() {
        // Hand-computed population statistics for {1,0,0,0}:
        // mean 0.25, std sqrt(3)/4 ~ 0.4330.
        let stats = normalize_outcomes(&[1.0, 0.0, 0.0, 0.0]);
        assert!((stats.mean - 0.25).abs() < 1e-12);
        assert!((stats.std - 3.0f64.sqrt() / 4.0).abs() < 1e-12);
        assert!((stats.normalized[0] - 1.7320508).abs() < 1e-6);
        for r in &stats.normalized[1..] {
            assert!((r + 0.5773503).abs() < 1e-6);
        }
    }

    #[test]
    fn normalize_degenerate_group() {
        let stats = normalize_outcomes(&[1.0, 1.0, 1.0]);
        assert!(stats.normalized.iter().all(|&r| r == 0.0));
    }

    #[test]
    fn normalize_two_point() {
        let stats = normalize_outcomes(&[1.0, 0.0]);
        assert!((stats.normalized[0] - 1.0).abs() < 1e-12);
        assert!((stats.normalized[1] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn normalized_moments_match_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let n = rng.gen_range(2..12);
            let rewards: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let normalized = normalize_process_rewards(&rewards);
            let (mean, std) = population_stats(&rewards);
            if std < DEGENERATE_STD {
                continue;
            }
            for (r, z) in rewards.iter().zip(&normalized) {
                assert!((z - (r - mean) / std).abs() < 1e-12);
            }
            let (zm, zs) = population_stats(&normalized);
            assert!(zm.abs() < 1e-9);
            assert!((zs - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn process_pool_two_point() {
        let normalized = normalize_process_rewards(&[2.0, 0.0]);
        assert_eq!(normalized, vec![1.0, -1.0]);
        assert!(normalize_process_rewards(&[0.5, 0.5, 0.5])
            .iter()
            .all(|&z| z == 0.0));
    }

    #[test]
    fn capability_reward_values() {
        let sol = crate::model::Solution {
            id: "x".into(),
            problem: "p".into(),
            think: "t.".into(),
            answer: "\\boxed{1}".into(),
            gold_answer: "1".into(),
            truncated: false,
            token_boundaries: vec![2, 11],
        };
        let make = |rewards: Vec<f64>| {
            RolloutGroup::new("p".into(), vec![sol.clone(); rewards.len()], rewards)
        };
        let params = RewardParams { alpha: 1.0 };
        let group = make(vec![1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0]);
        assert!((capability_reward(&group, &params) - 0.75).abs() < 1e-12);
        let group = make(vec![0.0; 4]);
        assert_eq!(capability_reward(&group, &params), 0.0);
        let group = make(vec![1.0; 4]);
        assert_eq!(capability_reward(&group, &params), 1.0);
    }

    fn steps_with_labels(labels: &[StepLabel]) -> (String, Vec<LabeledStep>, Vec<usize>) {
        // One step per 4-byte chunk; one token per 2 bytes.
        let think: String = (0..labels.len()).map(|_| "ab. ").collect();
        let steps = labels
            .iter()
            .enumerate()
            .map(|(i, &label)| LabeledStep {
                index: i,
                char_span: (i * 4, (i + 1) * 4),
                label,
            })
            .collect();
        let boundaries = (1..=labels.len() * 2).map(|i| i * 2).collect();
        (think, steps, boundaries)
    }

    #[test]
    fn merge_basic_runs() {
        use StepLabel::*;
        let (_, steps, boundaries) = steps_with_labels(&[Correct, Correct, Incorrect, Incorrect, Correct]);
        let map = TokenMap::new(&boundaries);
        let thoughts = merge_to_thoughts(&steps, &map).unwrap();
        let summary: Vec<_> = thoughts.iter().map(|t| (t.step_range, t.label)).collect();
        assert_eq!(
            summary,
            vec![((0, 1), Correct), ((2, 3), Incorrect), ((4, 4), Correct)]
        );
        assert_eq!(thoughts[0].end_token_index, 3);
        assert_eq!(thoughts[1].end_token_index, 7);
        assert_eq!(thoughts[2].end_token_index, 9);
    }

    #[test]
    fn reflection_merges_into_correct() {
        use StepLabel::*;
        let (_, steps, boundaries) = steps_with_labels(&[Correct, Reflection, Correct]);
        let map = TokenMap::new(&boundaries);
        let thoughts = merge_to_thoughts(&steps, &map).unwrap();
        assert_eq!(thoughts.len(), 1);
        assert_eq!(thoughts[0].step_range, (0, 2));
        assert_eq!(thoughts[0].label, Correct);
    }

    #[test]
    fn incorrect_family_runs() {
        use StepLabel::*;
        let (_, steps, boundaries) = steps_with_labels(&[Matched, Matched, Unmatched, Matched]);
        let map = TokenMap::new(&boundaries);
        let thoughts = merge_to_thoughts(&steps, &map).unwrap();
        let summary: Vec<_> = thoughts.iter().map(|t| (t.step_range, t.label)).collect();
        assert_eq!(
            summary,
            vec![((0, 1), Matched), ((2, 2), Unmatched), ((3, 3), Matched)]
        );
    }

    #[test]
    fn mixed_families_rejected() {
        use StepLabel::*;
        let (_, steps, boundaries) = steps_with_labels(&[Correct, Matched]);
        let map = TokenMap::new(&boundaries);
        assert!(matches!(
            merge_to_thoughts(&steps, &map),
            Err(RewardError::MixedLabelFamilies { .. })
        ));
    }

    #[test]
    fn merge_idempotent_on_random_labels() {
        use StepLabel::*;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let pool = [Correct, Incorrect, Reflection];
        for _ in 0..200 {
            let n = rng.gen_range(1..15);
            let labels: Vec<StepLabel> = (0..n).map(|_| pool[rng.gen_range(0..3)]).collect();
            let (_, steps, boundaries) = steps_with_labels(&labels);
            let map = TokenMap::new(&boundaries);
            let thoughts = merge_to_thoughts(&steps, &map).unwrap();
            // Flatten thoughts back to per-step labels and re-merge.
            let flat: Vec<StepLabel> = thoughts
                .iter()
                .flat_map(|t| (t.step_range.0..=t.step_range.1).map(|_| t.label))
                .collect();
            let (_, steps2, _) = steps_with_labels(&flat);
            let thoughts2 = merge_to_thoughts(&steps2, &map).unwrap();
            let a: Vec<_> = thoughts.iter().map(|t| (t.step_range, t.label)).collect();
            let b: Vec<_> = thoughts2.iter().map(|t| (t.step_range, t.label)).collect();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn token_rewards_correct_solution() {
        use StepLabel::*;
        let thoughts = vec![
            thought(Correct, 10, 0),
            thought(Incorrect, 20, 1),
            thought(Correct, 30, 2),
        ];
        let rewards = assign_token_rewards(&thoughts, 31, 0.9, 0.5, true).unwrap();
        let expected: BTreeMap<usize, f64> =
            [(10, 0.5), (20, -0.5), (30, 0.9)].into_iter().collect();
        assert_eq!(rewards, expected);
    }

    #[test]
    fn token_rewards_single_thought() {
        use StepLabel::*;
        let thoughts = vec![thought(Correct, 5, 0)];
        let rewards = assign_token_rewards(&thoughts, 8, 1.25, 0.5, true).unwrap();
        let expected: BTreeMap<usize, f64> = [(7, 1.25)].into_iter().collect();
        assert_eq!(rewards, expected);
    }

    #[test]
    fn token_rewards_incorrect_solution() {
        use StepLabel::*;
        let thoughts = vec![
            thought(Matched, 10, 0),
            thought(Unmatched, 20, 1),
            thought(Matched, 30, 2),
        ];
        let rewards = assign_token_rewards(&thoughts, 31, -1.2, 0.0, false).unwrap();
        let expected: BTreeMap<usize, f64> =
            [(10, -1.2), (20, 1.2), (30, -1.2)].into_iter().collect();
        assert_eq!(rewards, expected);
    }

    #[test]
    fn token_rewards_out_of_range() {
        use StepLabel::*;
        let thoughts = vec![thought(Correct, 4, 0), thought(Correct, 40, 1)];
        assert!(matches!(
            assign_token_rewards(&thoughts, 10, 0.5, 0.5, true),
            Err(RewardError::RewardIndexOutOfRange { .. })
        ));
    }

    #[test]
    fn advantages_suffix_sums() {
        let rewards: BTreeMap<usize, f64> = [(10, 0.5), (20, -0.5), (30, 0.9)].into_iter().collect();
        let adv = compute_advantages(&rewards, 31);
        for t in 0..=10 {
            assert!((adv[t] - 0.9).abs() < 1e-15);
        }
        for t in 11..=20 {
            assert!((adv[t] - 0.4).abs() < 1e-15);
        }
        for t in 21..=30 {
            assert!((adv[t] - 0.9).abs() < 1e-15);
        }
    }

    #[test]
    fn advantages_empty_rewards() {
        let adv = compute_advantages(&BTreeMap::new(), 5);
        assert_eq!(adv, vec![0.0; 5]);
    }

    #[test]
    fn advantages_incorrect_example() {
        let rewards: BTreeMap<usize, f64> =
            [(10, -1.2), (20, 1.2), (30, -1.2)].into_iter().collect();
        let adv = compute_advantages(&rewards, 31);
        assert!((adv[0] + 1.2).abs() < 1e-12);
        assert!((adv[15]).abs() < 1e-12);
        assert!((adv[25] + 1.2).abs() < 1e-12);
    }

    /// Brute-force oracle: advantage of t is the literal sum over all reward
    /// positions at or after t.
    fn brute_force_advantages(rewards: &BTreeMap<usize, f64>, n: usize) -> Vec<f64> {
        (0..n)
            .map(|t| rewards.iter().filter(|(&i, _)| i >= t).map(|(_, v)| v).sum())
            .collect()
    }

    #[test]
    fn closed_form_matches_spec_examples() {
        use StepLabel::*;
        let thoughts = vec![
            thought(Correct, 10, 0),
            thought(Incorrect, 20, 1),
            thought(Correct, 30, 2),
        ];
        let per_thought = closed_form_advantages(&thoughts, 0.9, 0.5, true).unwrap();
        assert_eq!(per_thought, vec![0.9, 0.4, 0.9]);

        let collapsed = closed_form_advantages(&thoughts, 0.9, 0.0, true).unwrap();
        assert!(collapsed.iter().all(|&a| (a - 0.9).abs() < 1e-15));

        let thoughts = vec![
            thought(Matched, 10, 0),
            thought(Unmatched, 20, 1),
            thought(Matched, 30, 2),
        ];
        let per_thought = closed_form_advantages(&thoughts, -1.2, 0.0, false).unwrap();
        assert_eq!(per_thought, vec![-1.2, 0.0, -1.2]);
    }

    #[test]
    fn closed_form_rejects_bad_structure() {
        use StepLabel::*;
        let thoughts = vec![thought(Correct, 5, 0), thought(Correct, 9, 1)];
        assert!(matches!(
            closed_form_advantages(&thoughts, 1.0, 0.5, true),
            Err(RewardError::NotAlternating { .. })
        ));
        let thoughts = vec![thought(Correct, 5, 0), thought(Incorrect, 9, 1)];
        assert!(matches!(
            closed_form_advantages(&thoughts, 1.0, 0.5, true),
            Err(RewardError::BadFinalThought { .. })
        ));
    }

    /// Random alternating thought structure of the shape the closed form
    /// assumes, plus a few trailing answer-region tokens.
    pub(crate) fn random_alternating(
        rng: &mut impl Rng,
        correct: bool,
    ) -> (Vec<Thought>, usize, f64, f64) {
        let n_thoughts = rng.gen_range(1..=21);
        let (a, b) = if correct {
            (StepLabel::Correct, StepLabel::Incorrect)
        } else {
            (StepLabel::Matched, StepLabel::Unmatched)
        };
        let mut end = 0usize;
        let mut thoughts = Vec::new();
        for j in 0..n_thoughts {
            end += rng.gen_range(1..=4);
            // Work backwards from the final thought, which must carry the
            // outcome-bearing label.
            let label = if (n_thoughts - 1 - j) % 2 == 0 { a } else { b };
            thoughts.push(Thought {
                step_range: (j, j),
                label,
                end_token_index: end - 1,
            });
        }
        let n_tokens = end + rng.gen_range(1..=3);
        let r_hat = rng.gen_range(-3.0..3.0);
        let r_correct = rng.gen_range(0.0..1.0);
        (thoughts, n_tokens, r_hat, r_correct)
    }

    #[test]
    fn proposition_equivalence_fuzz() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for case in 0..1000 {
            let correct = case % 2 == 0;
            let (thoughts, n_tokens, r_hat, r_correct) = random_alternating(&mut rng, correct);
            let rewards = assign_token_rewards(&thoughts, n_tokens, r_hat, r_correct, correct).unwrap();
            let adv = compute_advantages(&rewards, n_tokens);
            for (a, b) in adv.iter().zip(brute_force_advantages(&rewards, n_tokens)) {
                assert!((a - b).abs() < 1e-12);
            }
            let per_thought = closed_form_advantages(&thoughts, r_hat, r_correct, correct).unwrap();
            let mut start = 0usize;
            for (t, expected) in thoughts.iter().zip(&per_thought) {
                for token in start..=t.end_token_index {
                    assert!(
                        (adv[token] - expected).abs() < 1e-12,
                        "case {case}: token {token} adv {} expected {expected}",
                        adv[token]
                    );
                }
                start = t.end_token_index + 1;
            }
            // Tokens past the last thought carry the outcome reward alone.
            for token in start..n_tokens {
                assert!((adv[token] - r_hat).abs() < 1e-12);
            }
        }
    }

    proptest! {
        // Suffix-sum identity against the brute-force oracle on arbitrary
        // sparse reward maps.
        #[test]
        fn suffix_sum_identity(entries in proptest::collection::btree_map(0usize..40, -3.0f64..3.0, 0..10)) {
            let n = entries.keys().next_back().map(|&k| k + 1).unwrap_or(0).max(5);
            let adv = compute_advantages(&entries, n);
            let oracle = brute_force_advantages(&entries, n);
            for (a, b) in adv.iter().zip(&oracle) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
