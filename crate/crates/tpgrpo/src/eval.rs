//! Process-evaluation orchestration: skip heuristics, judge-driven solution
//! decomposition, the reflection pipeline for correct solutions and the
//! matching pipeline for incorrect ones, with bounded-concurrency batch
//! evaluation.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use log::warn;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::judge::{last_json_object, sanitize_reply, Judge, SamplingParams};
use crate::model::{LabeledStep, Solution, StepLabel};
use crate::prompts::{format_step_list, render, PromptKind};
use crate::segment::{
    insert_labels, parse_answer_steps, parse_section_ranges, ranges_to_steps,
    split_and_merge_sentences,
};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("evaluation unavailable at {stage}: {detail}")]
    Unavailable { stage: &'static str, detail: String },
}

/// Knobs of the evaluation stage. Skip thresholds are character counts.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalConfig {
    pub max_retries: usize,
    pub concurrency: usize,
    pub skip_truncated: bool,
    pub skip_short_think: bool,
    pub skip_short_answer: bool,
    pub min_think_chars: usize,
    pub min_answer_chars: usize,
    /// Thinks longer than this get per-step summarization before matching.
    pub summarize_over_chars: usize,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            max_retries: 3,
            concurrency: 8,
            skip_truncated: true,
            skip_short_think: true,
            skip_short_answer: true,
            min_think_chars: 4096,
            min_answer_chars: 256,
            summarize_over_chars: 8192,
            temperature: 0.7,
            max_tokens: 8192,
        }
    }
}

impl EvalConfig {
    pub fn sampling(&self) -> SamplingParams {
        SamplingParams {
            temperature: self.temperature,
            max_tokens: self.max_tokens,
        }
    }

    /// Disables every skip heuristic; used by the synthetic training task,
    /// whose solutions are far below the transcript-scale thresholds.
    pub fn without_skip_heuristics(mut self) -> Self {
        self.skip_truncated = false;
        self.skip_short_think = false;
        self.skip_short_answer = false;
        self
    }
}

/// An error-identifying reflection segment returned by the judge.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Reflection {
    pub step_index: usize,
    pub fragment: String,
    pub reason: String,
    pub source_step_index: Option<usize>,
}

/// Outcome of evaluating one solution: labeled steps, or a skip with its
/// reason.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvaluationResult {
    pub solution_id: String,
    pub steps: Vec<LabeledStep>,
    pub skipped: bool,
    pub skip_reason: Option<String>,
}

impl EvaluationResult {
    pub fn skipped(solution_id: &str, reason: impl Into<String>) -> Self {
        Self {
            solution_id: solution_id.to_string(),
            steps: Vec::new(),
            skipped: true,
            skip_reason: Some(reason.into()),
        }
    }

    pub fn labels(&self) -> Vec<StepLabel> {
        self.steps.iter().map(|s| s.label).collect()
    }
}

/// Whether a solution is worth sending to the judge. Short thinks of correct
/// solutions rarely contain mistakes, short answers of incorrect solutions
/// rarely contain reasoning to match, and truncated solutions are skipped
/// outright.
pub fn should_evaluate(
    s: &Solution,
    outcome_correct: bool,
    cfg: &EvalConfig,
) -> (bool, Option<&'static str>) {
    if cfg.skip_truncated && s.truncated {
        return (false, Some("truncated"));
    }
    if outcome_correct && cfg.skip_short_think && s.think.chars().count() < cfg.min_think_chars {
        return (false, Some("short-think"));
    }
    if !outcome_correct && cfg.skip_short_answer && s.answer.chars().count() < cfg.min_answer_chars
    {
        return (false, Some("short-answer"));
    }
    (true, None)
}

fn call_judge<T>(
    judge: &dyn Judge,
    prompt: &str,
    cfg: &EvalConfig,
    stage: &'static str,
    parse: impl Fn(&str) -> Result<T, String>,
) -> Result<T, EvalError> {
    let params = cfg.sampling();
    let mut last_error = String::new();
    for _ in 0..cfg.max_retries.max(1) {
        match judge.complete(prompt, &params) {
            Err(e) => last_error = e.to_string(),
            Ok(raw) => match parse(&sanitize_reply(&raw)) {
                Ok(value) => return Ok(value),
                Err(e) => last_error = e,
            },
        }
    }
    Err(EvalError::Unavailable {
        stage,
        detail: last_error,
    })
}

/// Pre-splits the think, asks the judge to group sentences into steps, and
/// materializes the step spans. Retries on parse failure; exhausting the
/// retries marks the solution unavailable for evaluation.
pub fn decompose_solution(
    s: &Solution,
    judge: &dyn Judge,
    cfg: &EvalConfig,
) -> Result<Vec<LabeledStep>, EvalError> {
    let sentences = split_and_merge_sentences(&s.think);
    if sentences.is_empty() {
        return Err(EvalError::Unavailable {
            stage: "decompose",
            detail: "empty think".into(),
        });
    }
    let annotated = insert_labels(&sentences);
    let prompt = render(PromptKind::DecomposeSolution, &[("format_solution", &annotated)])
        .expect("decompose template");
    let ranges = call_judge(judge, &prompt, cfg, "decompose", |reply| {
        parse_section_ranges(reply, sentences.len()).map_err(|e| e.to_string())
    })?;
    Ok(ranges_to_steps(&sentences, &ranges))
}

fn value_as_index(value: &Value) -> Option<usize> {
    match value {
        Value::Number(n) => n.as_u64().map(|v| v as usize),
        Value::String(text) => {
            let digits: String = text
                .chars()
                .skip_while(|c| !c.is_ascii_digit())
                .take_while(|c| c.is_ascii_digit())
                .collect();
            digits.parse().ok()
        }
        _ => None,
    }
}

fn parse_reflections(reply: &str) -> Result<Vec<Reflection>, String> {
    let value = last_json_object(reply).ok_or("no JSON object in reflection reply")?;
    let object = value.as_object().expect("object");
    let mut reflections = Vec::new();
    for (key, entry) in object {
        let Some(step_index) = entry.get("Step Index").and_then(value_as_index) else {
            warn!("reflection entry {key} lacks a usable step index; dropped");
            continue;
        };
        reflections.push(Reflection {
            step_index,
            fragment: entry
                .get("Identified Fragment")
                .and_then(Value::as_str)
                .unwrap_or_default()
                .to_string(),
            reason: entry
                .get("Reason")
                .and_then(Value::as_str)
                .unwrap_or_default()
                .to_string(),
            source_step_index: None,
        });
    }
    reflections.sort_by_key(|r| r.step_index);
    Ok(reflections)
}

fn parse_source_index(reply: &str) -> Result<usize, String> {
    let value = last_json_object(reply).ok_or("no JSON object in source reply")?;
    value
        .get("Step Index")
        .and_then(value_as_index)
        .ok_or_else(|| "source reply lacks a step index".to_string())
}

fn parse_step_type(text: &str) -> Option<StepLabel> {
    let lowered = text.to_lowercase();
    // "incorrect" contains "correct"; test it first.
    if lowered.contains("incorrect") {
        Some(StepLabel::Incorrect)
    } else if lowered.contains("reflection") {
        Some(StepLabel::Reflection)
    } else if lowered.contains("correct") {
        Some(StepLabel::Correct)
    } else {
        None
    }
}

fn parse_classifications(reply: &str) -> Result<BTreeMap<usize, StepLabel>, String> {
    let value = last_json_object(reply).ok_or("no JSON object in classification reply")?;
    let object = value.as_object().expect("object");
    let mut labels = BTreeMap::new();
    for (key, entry) in object {
        let Some(index) = value_as_index(&Value::String(key.clone())) else {
            continue;
        };
        let Some(label) = entry
            .get("Step Type")
            .and_then(Value::as_str)
            .and_then(parse_step_type)
        else {
            warn!("classification for step {index} unusable; dropped");
            continue;
        };
        labels.insert(index, label);
    }
    Ok(labels)
}

fn parse_match_mapping(reply: &str) -> Result<BTreeMap<usize, Vec<usize>>, String> {
    let value = last_json_object(reply).ok_or("no JSON object in match reply")?;
    let object = value.as_object().expect("object");
    let mut mapping = BTreeMap::new();
    for (key, entry) in object {
        let Some(answer_index) = value_as_index(&Value::String(key.clone())) else {
            continue;
        };
        let Some(list) = entry.as_array() else {
            continue;
        };
        let indices: Option<Vec<usize>> = list.iter().map(value_as_index).collect();
        match indices {
            Some(indices) => {
                mapping.insert(answer_index, indices);
            }
            None => warn!("match entry {key} holds non-indices; dropped"),
        }
    }
    Ok(mapping)
}

fn parse_summaries(reply: &str) -> Result<BTreeMap<usize, String>, String> {
    let value = last_json_object(reply).ok_or("no JSON object in summary reply")?;
    let object = value.as_object().expect("object");
    let mut summaries = BTreeMap::new();
    for (key, entry) in object {
        let Some(index) = value_as_index(&Value::String(key.clone())) else {
            continue;
        };
        if let Some(text) = entry.as_str() {
            summaries.insert(index, text.to_string());
        }
    }
    Ok(summaries)
}

/// Three-stage reflection pipeline for solutions with a correct outcome:
/// find error-identifying reflections, trace each to its earliest
/// responsible step, keep the minimum-index source (ties broken by the
/// maximum reflection index), then classify every step inside the span.
/// Steps outside the span are Correct.
pub fn evaluate_correct_solution(
    s: &Solution,
    steps: &[LabeledStep],
    judge: &dyn Judge,
    cfg: &EvalConfig,
) -> Result<Vec<StepLabel>, EvalError> {
    let texts: Vec<String> = steps.iter().map(|st| st.text(&s.think).to_string()).collect();
    let listed = format_step_list(&texts);
    let prompt = render(
        PromptKind::AwareReflection,
        &[("problem", &s.problem), ("solution", &listed)],
    )
    .expect("reflection template");
    let mut reflections = call_judge(judge, &prompt, cfg, "aware-reflection", parse_reflections)?;
    reflections.retain(|r| r.step_index < steps.len());
    if reflections.is_empty() {
        return Ok(vec![StepLabel::Correct; steps.len()]);
    }

    for reflection in reflections.iter_mut() {
        let prompt = render(
            PromptKind::AwareMistakeSource,
            &[
                ("problem", &s.problem),
                ("solution", &listed),
                ("fragment", &reflection.fragment),
                ("reason", &reflection.reason),
            ],
        )
        .expect("source template");
        match call_judge(judge, &prompt, cfg, "mistake-source", parse_source_index) {
            Ok(source) if source <= reflection.step_index => {
                reflection.source_step_index = Some(source);
            }
            Ok(source) => {
                warn!(
                    "source {source} after reflection {}; reflection dropped",
                    reflection.step_index
                );
            }
            Err(e) => warn!("no source for reflection {}: {e}", reflection.step_index),
        }
    }

    // Minimum source wins; among reflections sharing it, the latest one.
    let selected = reflections
        .iter()
        .filter(|r| r.source_step_index.is_some())
        .max_by_key(|r| {
            let source = r.source_step_index.expect("filtered");
            (std::cmp::Reverse(source), r.step_index)
        });
    let Some(selected) = selected else {
        // No reflection has an identifiable source; treat the whole
        // solution as correct.
        return Ok(vec![StepLabel::Correct; steps.len()]);
    };
    let source = selected.source_step_index.expect("selected");
    let span = (source, selected.step_index);

    let prompt = render(
        PromptKind::ClassifySteps,
        &[
            ("problem", &s.problem),
            ("solution", &listed),
            ("source_index", &span.0.to_string()),
            ("source_step", &texts[span.0]),
            ("reflection_index", &span.1.to_string()),
            ("fragment", &selected.fragment),
        ],
    )
    .expect("classify template");
    let classified = call_judge(judge, &prompt, cfg, "classify-steps", parse_classifications)?;

    let mut labels = vec![StepLabel::Correct; steps.len()];
    for k in span.0..=span.1 {
        labels[k] = classified.get(&k).copied().unwrap_or(StepLabel::Correct);
    }
    Ok(labels)
}

/// Matching pipeline for solutions with an incorrect outcome: think steps
/// matched to the answer's reasoning are the ones responsible for the error.
/// Over-long thinks are summarized step by step first. Every step ends up
/// Matched or Unmatched.
pub fn evaluate_incorrect_solution(
    s: &Solution,
    steps: &[LabeledStep],
    judge: &dyn Judge,
    cfg: &EvalConfig,
) -> Result<Vec<StepLabel>, EvalError> {
    let mut texts: Vec<String> =
        steps.iter().map(|st| st.text(&s.think).to_string()).collect();

    if s.think.chars().count() > cfg.summarize_over_chars {
        let listed = format_step_list(&texts);
        let prompt = render(
            PromptKind::Summarize,
            &[
                ("problem", &s.problem),
                ("solution", &listed),
                ("n_steps", &texts.len().to_string()),
            ],
        )
        .expect("summarize template");
        let summaries = call_judge(judge, &prompt, cfg, "summarize", parse_summaries)?;
        for (i, text) in texts.iter_mut().enumerate() {
            if let Some(summary) = summaries.get(&i) {
                *text = summary.clone();
            }
        }
    }

    let prompt = render(
        PromptKind::DecomposeAnswer,
        &[("problem", &s.problem), ("answer", &s.answer)],
    )
    .expect("answer template");
    let answer_steps = call_judge(judge, &prompt, cfg, "decompose-answer", |reply| {
        parse_answer_steps(reply, &s.answer).map_err(|e| e.to_string())
    })?;

    let listed = format_step_list(&texts);
    let answer_listed = format_step_list(&answer_steps);
    let prompt = render(
        PromptKind::Match,
        &[
            ("problem", &s.problem),
            ("solution", &listed),
            ("answer", &answer_listed),
        ],
    )
    .expect("match template");
    let mapping = call_judge(judge, &prompt, cfg, "match", parse_match_mapping)?;

    let mut matched: BTreeSet<usize> = BTreeSet::new();
    for (answer_index, think_indices) in mapping {
        if answer_index >= answer_steps.len()
            || think_indices.iter().any(|&i| i >= steps.len())
        {
            warn!("match entry for answer step {answer_index} out of range; dropped");
            continue;
        }
        matched.extend(think_indices);
    }
    Ok((0..steps.len())
        .map(|i| {
            if matched.contains(&i) {
                StepLabel::Matched
            } else {
                StepLabel::Unmatched
            }
        })
        .collect())
}

/// Full evaluation of one solution. Judge failures degrade to a skip; the
/// skip short-circuits before any judge call.
pub fn evaluate_solution(
    s: &Solution,
    outcome_correct: bool,
    judge: &dyn Judge,
    cfg: &EvalConfig,
) -> EvaluationResult {
    let (run, reason) = should_evaluate(s, outcome_correct, cfg);
    if !run {
        return EvaluationResult::skipped(&s.id, reason.expect("skip reason"));
    }
    let mut steps = match decompose_solution(s, judge, cfg) {
        Ok(steps) => steps,
        Err(e) => return EvaluationResult::skipped(&s.id, e.to_string()),
    };
    let labels = if outcome_correct {
        evaluate_correct_solution(s, &steps, judge, cfg)
    } else {
        evaluate_incorrect_solution(s, &steps, judge, cfg)
    };
    match labels {
        Ok(labels) => {
            for (step, label) in steps.iter_mut().zip(labels) {
                step.label = label;
            }
            EvaluationResult {
                solution_id: s.id.clone(),
                steps,
                skipped: false,
                skip_reason: None,
            }
        }
        Err(e) => EvaluationResult::skipped(&s.id, e.to_string()),
    }
}

/// Evaluates a batch concurrently, at most `concurrency` solutions in
/// flight. Individual failures become skips; the batch always completes.
pub fn evaluate_batch(
    solutions: &[(&Solution, bool)],
    judge: &dyn Judge,
    cfg: &EvalConfig,
) -> Vec<EvaluationResult> {
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<EvaluationResult>>> =
        solutions.iter().map(|_| Mutex::new(None)).collect();
    let workers = cfg.concurrency.max(1).min(solutions.len().max(1));
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= solutions.len() {
                    break;
                }
                let (solution, correct) = solutions[i];
                let result = evaluate_solution(solution, correct, judge, cfg);
                *slots[i].lock().unwrap() = Some(result);
            });
        }
    });
    slots
        .into_iter()
        .map(|slot| slot.into_inner().unwrap().expect("worker filled slot"))
        .collect()
}
