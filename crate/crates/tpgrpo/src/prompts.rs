//! Prompt templates for the generative judge, stored as text files with
//! `{placeholder}` substitution.
//!
//! Substitution only touches `{word}` tokens whose name is in the variable
//! map; the literal JSON braces that the templates contain pass through
//! untouched.

use std::collections::BTreeMap;

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PromptError {
    #[error("template for {kind:?} never used variable {name:?}")]
    UnusedVariable { kind: PromptKind, name: String },
}

/// The prompt protocols the judge is driven with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PromptKind {
    Summarize,
    DecomposeSolution,
    DecomposeAnswer,
    Match,
    AwareReflection,
    AwareMistakeSource,
    ClassifySteps,
}

impl PromptKind {
    pub const ALL: [PromptKind; 7] = [
        PromptKind::Summarize,
        PromptKind::DecomposeSolution,
        PromptKind::DecomposeAnswer,
        PromptKind::Match,
        PromptKind::AwareReflection,
        PromptKind::AwareMistakeSource,
        PromptKind::ClassifySteps,
    ];

    pub fn template(self) -> &'static str {
        match self {
            PromptKind::Summarize => include_str!("../prompts/summarize.txt"),
            PromptKind::DecomposeSolution => include_str!("../prompts/decompose_solution.txt"),
            PromptKind::DecomposeAnswer => include_str!("../prompts/decompose_answer.txt"),
            PromptKind::Match => include_str!("../prompts/match.txt"),
            PromptKind::AwareReflection => include_str!("../prompts/aware_reflection.txt"),
            PromptKind::AwareMistakeSource => include_str!("../prompts/aware_mistake_source.txt"),
            PromptKind::ClassifySteps => include_str!("../prompts/classify_steps.txt"),
        }
    }

    /// A phrase unique to this template, used to recognize rendered prompts.
    fn marker(self) -> &'static str {
        match self {
            PromptKind::Summarize => "summarize the main content of these all Steps",
            PromptKind::DecomposeSolution => "[Pre Split Format Thought]",
            PromptKind::DecomposeAnswer => "Insert '<step>' and '</step>'",
            PromptKind::Match => "Mapping Table (JSON format)",
            PromptKind::AwareReflection => "Record the Step Index",
            PromptKind::AwareMistakeSource => "identify the earliest step in the thought process",
            PromptKind::ClassifySteps => "identify the types of thinking steps within the range",
        }
    }

    /// Recognizes which protocol a rendered prompt belongs to.
    pub fn detect(prompt: &str) -> Option<PromptKind> {
        PromptKind::ALL
            .into_iter()
            .find(|kind| prompt.contains(kind.marker()))
    }
}

/// Renders a template, replacing each `{name}` for the provided variables.
/// Every provided variable must occur in the template at least once.
pub fn render(kind: PromptKind, vars: &[(&str, &str)]) -> Result<String, PromptError> {
    let template = kind.template();
    let map: BTreeMap<&str, &str> = vars.iter().copied().collect();
    let mut used: BTreeMap<&str, bool> = vars.iter().map(|(k, _)| (*k, false)).collect();
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let tail = &rest[open + 1..];
        match tail.find('}') {
            Some(close)
                if tail[..close]
                    .chars()
                    .all(|c| c.is_ascii_alphanumeric() || c == '_')
                    && map.contains_key(&tail[..close]) =>
            {
                out.push_str(map[&tail[..close]]);
                used.insert(&tail[..close], true);
                rest = &tail[close + 1..];
            }
            _ => {
                out.push('{');
                rest = tail;
            }
        }
    }
    out.push_str(rest);
    for (name, was_used) in used {
        if !was_used {
            return Err(PromptError::UnusedVariable {
                kind,
                name: name.to_string(),
            });
        }
    }
    Ok(out)
}

/// Renders a decomposed step list the way the judge sees it.
pub fn format_step_list(steps: &[String]) -> String {
    steps
        .iter()
        .enumerate()
        .map(|(i, text)| format!("Step {i}: {text}"))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Recovers a `Step k: text` list from a rendered prompt block. Inverse of
/// [`format_step_list`] for well-behaved step texts; used by the mock judge.
pub fn parse_step_list(block: &str) -> Vec<(usize, String)> {
    let mut steps: Vec<(usize, String)> = Vec::new();
    for line in block.lines() {
        if let Some(rest) = line.strip_prefix("Step ") {
            if let Some(colon) = rest.find(':') {
                if let Ok(idx) = rest[..colon].trim().parse::<usize>() {
                    steps.push((idx, rest[colon + 1..].trim_start().to_string()));
                    continue;
                }
            }
        }
        if let Some(last) = steps.last_mut() {
            last.1.push('\n');
            last.1.push_str(line);
        }
    }
    steps
}
