//! Deterministic pre-segmentation of solutions and parsers for the reply
//! formats of the decomposition prompts.
//!
//! Splitting happens on blank-line separators (exactly `"\n\n"`); fragments
//! are then greedily merged until the accumulated text ends with a terminal
//! punctuation mark. Separators are attributed to the preceding sentence so
//! that concatenating sentence (and therefore step) spans reconstructs the
//! think byte-exactly.

use thiserror::Error;

use crate::model::{LabeledStep, StepLabel};

/// Blank-line separator used by the pre-split.
pub const SEPARATOR: &str = "\n\n";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SegmentError {
    #[error("line {line}: malformed range line: {text:?}")]
    MalformedLine { line: usize, text: String },
    #[error("no section ranges found in reply")]
    NoRanges,
    #[error("range ({start}, {end}) is inverted")]
    InvertedRange { start: usize, end: usize },
    #[error("range ({start}, {end}) overlaps previous range ending at {prev_end}")]
    OverlappingRange {
        start: usize,
        end: usize,
        prev_end: usize,
    },
    #[error("range index {index} out of bounds for {n_sentences} sentences")]
    IndexOutOfBounds { index: usize, n_sentences: usize },
    #[error("unbalanced step tags in tagged answer")]
    UnbalancedTags,
}

/// A pre-split sentence of the think.
///
/// `span` is the half-open byte range into the original think, including the
/// trailing separator; `text` excludes that separator.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledSentence {
    pub label_index: usize,
    pub text: String,
    pub span: (usize, usize),
}

fn ends_with_terminal(text: &str) -> bool {
    // The terminal-mark list is {., ..., ...., ....., ......, !, ?}; every
    // entry ends in '.', '!' or '?', so checking the last non-whitespace
    // character suffices.
    matches!(text.trim_end().chars().last(), Some('.' | '!' | '?'))
}

/// Splits the think on blank lines and merges consecutive fragments until
/// each sentence ends with a terminal mark. The final fragment is kept even
/// without one. Empty input yields an empty list.
pub fn split_and_merge_sentences(think: &str) -> Vec<LabeledSentence> {
    if think.is_empty() {
        return Vec::new();
    }
    // Fragment start offsets: pieces between consecutive separators.
    let mut fragment_starts = vec![0usize];
    let bytes = think.as_bytes();
    let mut i = 0;
    while i + 1 < bytes.len() {
        if &bytes[i..i + 2] == SEPARATOR.as_bytes() {
            fragment_starts.push(i + 2);
            i += 2;
        } else {
            i += 1;
        }
    }

    let mut sentences = Vec::new();
    let mut current_start: Option<usize> = None;
    for (k, &start) in fragment_starts.iter().enumerate() {
        let end = fragment_starts
            .get(k + 1)
            .map(|&next| next - SEPARATOR.len())
            .unwrap_or(think.len());
        let begin = *current_start.get_or_insert(start);
        let is_last = k + 1 == fragment_starts.len();
        if is_last && begin == end {
            // Trailing separator; its bytes already belong to the previous
            // sentence's span.
            break;
        }
        if ends_with_terminal(&think[begin..end]) || is_last {
            // Attribute the trailing separator to this sentence's span.
            let span_end = if is_last { think.len() } else { end + SEPARATOR.len() };
            sentences.push(LabeledSentence {
                label_index: sentences.len(),
                text: think[begin..end].to_string(),
                span: (begin, span_end),
            });
            current_start = None;
        }
    }
    sentences
}

/// Prefixes sentence `k` with `<<k>>`, joining on newlines.
pub fn insert_labels(sentences: &[LabeledSentence]) -> String {
    assert!(!sentences.is_empty(), "insert_labels requires sentences");
    sentences
        .iter()
        .map(|s| format!("<<{}>>{}", s.label_index, s.text))
        .collect::<Vec<_>>()
        .join("\n")
}

fn parse_range_line(line: &str) -> Option<(usize, usize)> {
    // Shape: <<start>> - <<end>> explanation, with optional spaces inside
    // the angle markers.
    let rest = line.trim_start();
    let rest = rest.strip_prefix("<<")?;
    let close = rest.find(">>")?;
    let start: usize = rest[..close].trim().parse().ok()?;
    let rest = rest[close + 2..].trim_start();
    let rest = rest.strip_prefix('-')?;
    let rest = rest.trim_start();
    let rest = rest.strip_prefix("<<")?;
    let close = rest.find(">>")?;
    let end: usize = rest[..close].trim().parse().ok()?;
    Some((start, end))
}

/// Extracts `<<start>> - <<end>>` section lines from a decompose reply and
/// validates them against the sentence count.
///
/// Ranges are sorted by start before validation. Uncovered sentences are
/// filled in as singleton ranges so unreliable replies still yield a total
/// segmentation; overlaps and out-of-bounds indices are hard errors.
pub fn parse_section_ranges(
    reply: &str,
    n_sentences: usize,
) -> Result<Vec<(usize, usize)>, SegmentError> {
    assert!(n_sentences >= 1, "parse_section_ranges needs sentences");
    let mut ranges = Vec::new();
    for (lineno, line) in reply.lines().enumerate() {
        if !line.trim_start().starts_with("<<") {
            continue;
        }
        match parse_range_line(line) {
            Some(r) => ranges.push(r),
            None => {
                return Err(SegmentError::MalformedLine {
                    line: lineno + 1,
                    text: line.trim().to_string(),
                })
            }
        }
    }
    if ranges.is_empty() {
        return Err(SegmentError::NoRanges);
    }
    ranges.sort_by_key(|r| r.0);

    let mut covered: Vec<(usize, usize)> = Vec::new();
    let mut prev_end: Option<usize> = None;
    for (start, end) in ranges {
        if start > end {
            return Err(SegmentError::InvertedRange { start, end });
        }
        if end >= n_sentences {
            return Err(SegmentError::IndexOutOfBounds {
                index: end,
                n_sentences,
            });
        }
        if let Some(pe) = prev_end {
            if start <= pe {
                return Err(SegmentError::OverlappingRange {
                    start,
                    end,
                    prev_end: pe,
                });
            }
        }
        prev_end = Some(end);
        covered.push((start, end));
    }

    // Gap-fill: every uncovered sentence becomes a singleton range.
    let mut full = Vec::new();
    let mut cursor = 0usize;
    for (start, end) in covered {
        while cursor < start {
            full.push((cursor, cursor));
            cursor += 1;
        }
        full.push((start, end));
        cursor = end + 1;
    }
    while cursor < n_sentences {
        full.push((cursor, cursor));
        cursor += 1;
    }
    Ok(full)
}

/// Turns validated sentence ranges into unlabeled steps whose spans tile the
/// think.
pub fn ranges_to_steps(sentences: &[LabeledSentence], ranges: &[(usize, usize)]) -> Vec<LabeledStep> {
    ranges
        .iter()
        .enumerate()
        .map(|(i, &(start, end))| LabeledStep {
            index: i,
            char_span: (sentences[start].span.0, sentences[end].span.1),
            label: StepLabel::Uncertain,
        })
        .collect()
}

fn strip_all_whitespace(text: &str) -> String {
    text.chars().filter(|c| !c.is_whitespace()).collect()
}

/// Extracts the texts between `<step>`/`</step>` tags in order.
///
/// The tag-stripped reply must reproduce the original answer up to
/// whitespace (the prompt forbids content changes but models add incidental
/// whitespace); on mismatch or when no tags are present, the whole answer is
/// returned as a single step. Unbalanced tags are a parse error.
pub fn parse_answer_steps(
    tagged_answer: &str,
    original_answer: &str,
) -> Result<Vec<String>, SegmentError> {
    const OPEN: &str = "<step>";
    const CLOSE: &str = "</step>";
    if !tagged_answer.contains(OPEN) && !tagged_answer.contains(CLOSE) {
        return Ok(vec![original_answer.to_string()]);
    }
    let mut steps = Vec::new();
    let mut rest = tagged_answer;
    loop {
        match rest.find(OPEN) {
            None => {
                if rest.contains(CLOSE) {
                    return Err(SegmentError::UnbalancedTags);
                }
                break;
            }
            Some(open_at) => {
                let after_open = &rest[open_at + OPEN.len()..];
                let close_at = after_open.find(CLOSE).ok_or(SegmentError::UnbalancedTags)?;
                let body = &after_open[..close_at];
                if body.contains(OPEN) {
                    return Err(SegmentError::UnbalancedTags);
                }
                steps.push(body.to_string());
                rest = &after_open[close_at + CLOSE.len()..];
            }
        }
    }
    if steps.is_empty() {
        return Ok(vec![original_answer.to_string()]);
    }
    let stripped: String = steps.iter().map(|s| s.as_str()).collect();
    if strip_all_whitespace(&stripped) != strip_all_whitespace(original_answer) {
        // Evaluator rewrote the content; fall back to a single step.
        return Ok(vec![original_answer.to_string()]);
    }
    Ok(steps)
}
