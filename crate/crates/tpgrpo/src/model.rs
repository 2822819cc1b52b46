//! Shared domain types: solutions, steps, thoughts, rollout groups and
//! token-level signals, plus the token-boundary abstraction that decouples
//! reward placement from any particular tokenizer.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

/// One sampled rollout for a problem, split into its reasoning trace
/// (`think`) and the concise summary that ends in the boxed result
/// (`answer`).
///
/// `token_boundaries` are byte offsets into `think + answer` marking the end
/// of each token (exclusive). They are strictly increasing and the last one
/// equals the total text length. Two built-in producers exist:
/// [`whitespace_token_boundaries`] for replaying external text, and the toy
/// policy's own symbol boundaries in training mode.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Solution {
    pub id: String,
    pub problem: String,
    pub think: String,
    pub answer: String,
    pub gold_answer: String,
    #[serde(default)]
    pub truncated: bool,
    #[serde(default)]
    pub token_boundaries: Vec<usize>,
}

impl Solution {
    /// Full output text, think followed by answer.
    pub fn full_text(&self) -> String {
        let mut s = String::with_capacity(self.think.len() + self.answer.len());
        s.push_str(&self.think);
        s.push_str(&self.answer);
        s
    }

    /// Number of tokens in the output.
    pub fn token_count(&self) -> usize {
        self.token_boundaries.len()
    }

    pub fn token_map(&self) -> TokenMap<'_> {
        TokenMap {
            boundaries: &self.token_boundaries,
        }
    }
}

/// Lookup from byte positions to token indices.
#[derive(Debug, Clone, Copy)]
pub struct TokenMap<'a> {
    boundaries: &'a [usize],
}

impl<'a> TokenMap<'a> {
    pub fn new(boundaries: &'a [usize]) -> Self {
        Self { boundaries }
    }

    pub fn token_count(&self) -> usize {
        self.boundaries.len()
    }

    /// Index of the token whose span contains the byte at `pos`.
    ///
    /// Token `i` spans `[boundaries[i-1], boundaries[i])` with an implicit
    /// leading zero. Returns `None` when `pos` lies past the last boundary.
    pub fn token_at(&self, pos: usize) -> Option<usize> {
        let idx = self.boundaries.partition_point(|&b| b <= pos);
        if idx < self.boundaries.len() {
            Some(idx)
        } else {
            None
        }
    }
}

/// Token boundaries for plain text: maximal non-whitespace runs, with any
/// following whitespace attached to the preceding token and leading
/// whitespace attached to the first token.
pub fn whitespace_token_boundaries(text: &str) -> Vec<usize> {
    let mut boundaries = Vec::new();
    let mut prev_ws = false;
    let mut seen_token = false;
    for (i, ch) in text.char_indices() {
        let ws = ch.is_whitespace();
        if prev_ws && !ws && seen_token {
            boundaries.push(i);
        }
        seen_token |= !ws;
        prev_ws = ws;
    }
    if !text.is_empty() {
        boundaries.push(text.len());
    }
    boundaries
}

/// Correctness label attached to a step.
///
/// `Correct`, `Incorrect` and `Reflection` only appear on steps of solutions
/// with a correct final answer; `Matched`, `Unmatched` and `Uncertain` only
/// on incorrect ones. `Uncertain` additionally serves as the placeholder for
/// steps that have not been evaluated yet.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StepLabel {
    Correct,
    Incorrect,
    Reflection,
    Matched,
    Unmatched,
    Uncertain,
}

impl StepLabel {
    /// Whether the label belongs to the correct-solution family.
    pub fn is_correct_family(self) -> bool {
        matches!(
            self,
            StepLabel::Correct | StepLabel::Incorrect | StepLabel::Reflection
        )
    }

    /// Whether the label belongs to the incorrect-solution family.
    pub fn is_incorrect_family(self) -> bool {
        matches!(
            self,
            StepLabel::Matched | StepLabel::Unmatched | StepLabel::Uncertain
        )
    }
}

/// A contiguous byte span of the think holding one atomic logical action.
///
/// Spans of consecutive steps are contiguous and non-overlapping; the
/// concatenation of all spans reconstructs the think byte-exactly.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledStep {
    pub index: usize,
    /// Half-open byte range `[start, end)` into the think.
    pub char_span: (usize, usize),
    pub label: StepLabel,
}

impl LabeledStep {
    pub fn text<'a>(&self, think: &'a str) -> &'a str {
        &think[self.char_span.0..self.char_span.1]
    }
}

/// A maximal run of consecutive same-labeled steps.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Thought {
    /// Inclusive range of step indices covered by this thought.
    pub step_range: (usize, usize),
    pub label: StepLabel,
    /// Token whose span contains the last byte of the thought's last step.
    pub end_token_index: usize,
}

/// The G solutions sampled for one problem together with their binary
/// outcome rewards.
#[derive(Debug, Clone)]
pub struct RolloutGroup {
    pub problem_id: String,
    pub solutions: Vec<Solution>,
    pub outcome_rewards: Vec<f64>,
    pub acc_mean: f64,
}

impl RolloutGroup {
    pub fn new(problem_id: String, solutions: Vec<Solution>, outcome_rewards: Vec<f64>) -> Self {
        assert_eq!(solutions.len(), outcome_rewards.len());
        let acc_mean = if outcome_rewards.is_empty() {
            0.0
        } else {
            outcome_rewards.iter().sum::<f64>() / outcome_rewards.len() as f64
        };
        Self {
            problem_id,
            solutions,
            outcome_rewards,
            acc_mean,
        }
    }

    pub fn group_size(&self) -> usize {
        self.solutions.len()
    }
}

/// Per-solution reward and advantage signal over token positions.
///
/// `sparse_rewards` holds the nonzero-by-construction reward placements;
/// `advantages` is the dense suffix sum, recomputed from the sparse part so
/// the suffix-sum identity holds by construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenSignal {
    pub solution_id: String,
    pub n_tokens: usize,
    pub sparse_rewards: BTreeMap<usize, f64>,
    #[serde(skip)]
    pub advantages: Vec<f64>,
}

impl TokenSignal {
    /// Builds the signal, computing advantages as the suffix sum of rewards.
    ///
    /// Panics if a reward index is out of range; callers own that contract.
    pub fn new(solution_id: String, n_tokens: usize, sparse_rewards: BTreeMap<usize, f64>) -> Self {
        let advantages = crate::reward::compute_advantages(&sparse_rewards, n_tokens);
        Self {
            solution_id,
            n_tokens,
            sparse_rewards,
            advantages,
        }
    }

    /// Restores the dense advantage vector after deserialization.
    pub fn recompute_advantages(&mut self) {
        self.advantages = crate::reward::compute_advantages(&self.sparse_rewards, self.n_tokens);
    }
}

/// A single invariant violation found by validation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Violation {
    /// token_boundaries not strictly increasing at the given position.
    BoundaryNotIncreasing { index: usize },
    /// Final boundary does not equal the total output length.
    BoundaryCoverage { last: usize, expected: usize },
    /// A boundary does not fall on a UTF-8 character boundary.
    BoundaryNotCharAligned { index: usize, offset: usize },
    /// Consecutive step spans leave a gap or overlap.
    StepSpanGap {
        step: usize,
        expected_start: usize,
        actual_start: usize,
    },
    /// Step spans do not cover the think exactly.
    StepSpanCoverage { end: usize, expected: usize },
    /// A step label from the wrong family for the solution kind.
    LabelFamily { step: usize, label: StepLabel },
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Violation::BoundaryNotIncreasing { index } => {
                write!(f, "token boundary {index} is not strictly increasing")
            }
            Violation::BoundaryCoverage { last, expected } => {
                write!(f, "last token boundary {last} != text length {expected}")
            }
            Violation::BoundaryNotCharAligned { index, offset } => {
                write!(f, "token boundary {index} at byte {offset} splits a character")
            }
            Violation::StepSpanGap {
                step,
                expected_start,
                actual_start,
            } => write!(
                f,
                "step {step} starts at {actual_start}, expected {expected_start}"
            ),
            Violation::StepSpanCoverage { end, expected } => {
                write!(f, "step spans end at {end}, think has length {expected}")
            }
            Violation::LabelFamily { step, label } => {
                write!(f, "step {step} carries out-of-family label {label:?}")
            }
        }
    }
}

/// Report-style validation result; valid inputs yield an empty report.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks the Solution invariants: strictly increasing token boundaries that
/// cover `think + answer` exactly and fall on character boundaries.
pub fn validate_solution(s: &Solution) -> ValidationReport {
    let mut report = ValidationReport::default();
    let full = s.full_text();
    let mut prev = 0usize;
    for (i, &b) in s.token_boundaries.iter().enumerate() {
        if b <= prev && !(i == 0 && b > 0) {
            report
                .violations
                .push(Violation::BoundaryNotIncreasing { index: i });
        }
        if !full.is_char_boundary(b.min(full.len())) || b > full.len() {
            report
                .violations
                .push(Violation::BoundaryNotCharAligned { index: i, offset: b });
        }
        prev = b;
    }
    let last = s.token_boundaries.last().copied().unwrap_or(0);
    if !full.is_empty() && last != full.len() {
        report.violations.push(Violation::BoundaryCoverage {
            last,
            expected: full.len(),
        });
    }
    report
}

/// Checks that step spans tile the think exactly and that labels come from a
/// single family.
pub fn validate_steps(think: &str, steps: &[LabeledStep]) -> ValidationReport {
    let mut report = ValidationReport::default();
    let mut cursor = 0usize;
    for step in steps {
        if step.char_span.0 != cursor {
            report.violations.push(Violation::StepSpanGap {
                step: step.index,
                expected_start: cursor,
                actual_start: step.char_span.0,
            });
        }
        cursor = step.char_span.1;
    }
    if cursor != think.len() {
        report.violations.push(Violation::StepSpanCoverage {
            end: cursor,
            expected: think.len(),
        });
    }
    if let Some(first) = steps.first() {
        let correct_family = first.label.is_correct_family();
        for step in steps {
            let same = if correct_family {
                step.label.is_correct_family()
            } else {
                step.label.is_incorrect_family()
            };
            if !same && step.label != StepLabel::Uncertain {
                report.violations.push(Violation::LabelFamily {
                    step: step.index,
                    label: step.label,
                });
            }
        }
    }
    report
}

/// Collapses a label sequence into maximal runs of equal labels, returning
/// `(first_index, last_index, label)` triples. Pure run-length merge; does
/// not relabel anything, so flattening the runs restores the input exactly.
pub fn merge_runs(labels: &[StepLabel]) -> Vec<(usize, usize, StepLabel)> {
    let mut runs: Vec<(usize, usize, StepLabel)> = Vec::new();
    for (i, &label) in labels.iter().enumerate() {
        match runs.last_mut() {
            Some(run) if run.2 == label => run.1 = i,
            _ => runs.push((i, i, label)),
        }
    }
    runs
}
