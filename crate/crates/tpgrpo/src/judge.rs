//! The pluggable judge interface plus a deterministic mock for offline
//! end-to-end runs, reply sanitation, and failure-injection wrappers.

use std::collections::{HashMap, VecDeque};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use serde_json::Value;
use thiserror::Error;

use crate::prompts::{parse_step_list, PromptKind};

#[derive(Debug, Error)]
pub enum JudgeError {
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("judge returned http status {0}")]
    HttpStatus(u16),
    #[error("no fixture for prompt kind {0:?}")]
    MissingFixture(PromptKind),
    #[error("prompt does not match any known protocol")]
    UnknownPromptKind,
    #[error("malformed completion payload: {0}")]
    BadPayload(String),
}

/// Sampling parameters forwarded to the judge backend.
#[derive(Debug, Clone, Copy)]
pub struct SamplingParams {
    pub temperature: f64,
    pub max_tokens: u32,
}

impl Default for SamplingParams {
    fn default() -> Self {
        Self {
            temperature: 0.7,
            max_tokens: 8192,
        }
    }
}

/// A generative judge: completes a prompt into a reply.
///
/// Implementations must tolerate concurrent calls.
pub trait Judge: Send + Sync {
    fn complete(&self, prompt: &str, params: &SamplingParams) -> Result<String, JudgeError>;

    /// Whether identical prompts always yield identical replies.
    fn deterministic(&self) -> bool {
        false
    }
}

/// Strips chain-of-thought preambles and code-fence marker lines from a raw
/// judge reply, leaving the content the parsers consume.
pub fn sanitize_reply(raw: &str) -> String {
    let body = match raw.rfind("</think>") {
        Some(pos) => &raw[pos + "</think>".len()..],
        None => raw,
    };
    body.lines()
        .filter(|line| !line.trim_start().starts_with("```"))
        .collect::<Vec<_>>()
        .join("\n")
        .trim()
        .to_string()
}

fn balanced_object_end(text: &str, start: usize) -> Option<usize> {
    let bytes = text.as_bytes();
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (offset, &b) in bytes[start..].iter().enumerate() {
        if in_string {
            if escaped {
                escaped = false;
            } else if b == b'\\' {
                escaped = true;
            } else if b == b'"' {
                in_string = false;
            }
            continue;
        }
        match b {
            b'"' => in_string = true,
            b'{' => depth += 1,
            b'}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(start + offset + 1);
                }
            }
            _ => {}
        }
    }
    None
}

/// Returns the last well-formed top-level JSON object in a reply. Models
/// often restate intermediate JSON; the final object is the answer.
pub fn last_json_object(reply: &str) -> Option<Value> {
    let mut result = None;
    let mut i = 0;
    let bytes = reply.as_bytes();
    while i < bytes.len() {
        if bytes[i] == b'{' {
            if let Some(end) = balanced_object_end(reply, i) {
                if let Ok(value) = serde_json::from_str::<Value>(&reply[i..end]) {
                    if value.is_object() {
                        result = Some(value);
                        i = end;
                        continue;
                    }
                }
            }
        }
        i += 1;
    }
    result
}

fn block_between<'a>(prompt: &'a str, start: &str, end: &str) -> Option<&'a str> {
    let s = prompt.find(start)? + start.len();
    let e = prompt[s..].rfind(end)? + s;
    Some(&prompt[s..e])
}

fn first_integer_after(text: &str, markers: &[&str]) -> Option<usize> {
    for marker in markers {
        if let Some(pos) = text.find(marker) {
            let digits: String = text[pos + marker.len()..]
                .chars()
                .skip_while(|c| c.is_whitespace())
                .take_while(|c| c.is_ascii_digit())
                .collect();
            if let Ok(v) = digits.parse() {
                return Some(v);
            }
        }
    }
    None
}

/// Sentinel substrings the mock judge reacts to inside step texts.
pub mod sentinel {
    /// Marks a step containing an error.
    pub const ERROR: &str = "[ERR]";
    /// Marks a reflection step; `[REFLECT src=K]` or `[REFLECT]@K` pins the
    /// error source to step K, otherwise the earliest `[ERR]` step is used.
    pub const REFLECT: &str = "[REFLECT";
    /// Marks a think step that matches the answer's main reasoning line.
    pub const MAIN: &str = "[MAIN]";
}

/// Deterministic offline judge.
///
/// Scripted replies, when queued for a prompt kind, are consumed first.
/// Otherwise the reply is synthesized from sentinel markers embedded in the
/// prompt's step texts: `[ERR]`, `[REFLECT...]` and `[MAIN]`. Solution
/// decomposition defaults to identity ranges.
#[derive(Default)]
pub struct MockJudge {
    scripted: Mutex<HashMap<PromptKind, VecDeque<String>>>,
}

impl MockJudge {
    pub fn new() -> Self {
        Self::default()
    }

    /// Queues a canned reply for the given prompt kind.
    pub fn push_reply(&self, kind: PromptKind, reply: impl Into<String>) {
        self.scripted
            .lock()
            .unwrap()
            .entry(kind)
            .or_default()
            .push_back(reply.into());
    }

    fn decompose_reply(prompt: &str) -> Result<String, JudgeError> {
        let block = block_between(prompt, "[Pre Split Format Thought]\n", "\n\nThen, you are")
            .ok_or(JudgeError::MissingFixture(PromptKind::DecomposeSolution))?;
        let mut labels = Vec::new();
        for line in block.lines() {
            if let Some(rest) = line.strip_prefix("<<") {
                if let Some(close) = rest.find(">>") {
                    if let Ok(k) = rest[..close].parse::<usize>() {
                        labels.push(k);
                    }
                }
            }
        }
        if labels.is_empty() {
            return Err(JudgeError::MissingFixture(PromptKind::DecomposeSolution));
        }
        Ok(labels
            .iter()
            .map(|k| format!("<<{k}>> - <<{k}>> one step per sentence"))
            .collect::<Vec<_>>()
            .join("\n"))
    }

    fn reflection_reply(prompt: &str) -> Result<String, JudgeError> {
        let block = block_between(prompt, "[Decomposed Solution]\n", "\n\n**Your Task:**")
            .ok_or(JudgeError::MissingFixture(PromptKind::AwareReflection))?;
        let mut entries = serde_json::Map::new();
        let mut n = 0;
        for (idx, text) in parse_step_list(block) {
            if text.contains(sentinel::REFLECT) {
                n += 1;
                entries.insert(
                    format!("Reflection {n}"),
                    serde_json::json!({
                        "Step Index": idx.to_string(),
                        "Identified Fragment": text,
                        "Reason": "the step flags an earlier mistake",
                    }),
                );
            }
        }
        Ok(Value::Object(entries).to_string())
    }

    fn source_reply(prompt: &str) -> Result<String, JudgeError> {
        let fragment = block_between(prompt, "[Identified Fragment]\n", "\n\nAnd the reason")
            .ok_or(JudgeError::MissingFixture(PromptKind::AwareMistakeSource))?;
        let explicit = first_integer_after(fragment, &["src=", "]@"]);
        let source = match explicit {
            Some(k) => Some(k),
            None => {
                let block =
                    block_between(prompt, "[Decomposed Solution]\n", "\n\nThis solution records")
                        .ok_or(JudgeError::MissingFixture(PromptKind::AwareMistakeSource))?;
                parse_step_list(block)
                    .into_iter()
                    .find(|(_, text)| text.contains(sentinel::ERROR))
                    .map(|(idx, _)| idx)
            }
        };
        match source {
            Some(k) => Ok(serde_json::json!({
                "Earliest Step": "the step the sentinel points at",
                "Step Index": k.to_string(),
                "Reason": "sentinel-attributed source",
            })
            .to_string()),
            None => Ok("No step in the trace is responsible for this mistake.".to_string()),
        }
    }

    fn classify_reply(prompt: &str) -> Result<String, JudgeError> {
        let from = first_integer_after(prompt, &["within the range from step "])
            .ok_or(JudgeError::MissingFixture(PromptKind::ClassifySteps))?;
        let to_part = prompt
            .find("within the range from step ")
            .map(|p| &prompt[p..])
            .unwrap_or(prompt);
        let to = first_integer_after(to_part, &[" to step "])
            .ok_or(JudgeError::MissingFixture(PromptKind::ClassifySteps))?;
        let block = block_between(prompt, "[Decomposed solution]\n", "\n\nThis thought process")
            .ok_or(JudgeError::MissingFixture(PromptKind::ClassifySteps))?;
        let steps: HashMap<usize, String> = parse_step_list(block).into_iter().collect();
        let mut entries = serde_json::Map::new();
        for k in from..=to {
            let text = steps.get(&k).map(String::as_str).unwrap_or("");
            let step_type = if text.contains(sentinel::REFLECT) {
                "Reflection"
            } else if text.contains(sentinel::ERROR) {
                "Incorrect"
            } else {
                "Correct"
            };
            entries.insert(
                format!("Step {k}"),
                serde_json::json!({ "Analysis": "sentinel driven", "Step Type": step_type }),
            );
        }
        Ok(Value::Object(entries).to_string())
    }

    fn match_reply(prompt: &str) -> Result<String, JudgeError> {
        let block = block_between(prompt, "[Summarized Solution]\n", "\n[Answer]")
            .ok_or(JudgeError::MissingFixture(PromptKind::Match))?;
        let matched: Vec<usize> = parse_step_list(block)
            .into_iter()
            .filter(|(_, text)| text.contains(sentinel::MAIN))
            .map(|(idx, _)| idx)
            .collect();
        if matched.is_empty() {
            return Ok("{}".to_string());
        }
        Ok(serde_json::json!({ "0": matched }).to_string())
    }

    fn summarize_reply(prompt: &str) -> Result<String, JudgeError> {
        let block = block_between(prompt, "[Solution]\n", "\n\nThis thought process includes")
            .ok_or(JudgeError::MissingFixture(PromptKind::Summarize))?;
        let mut entries = serde_json::Map::new();
        for (idx, text) in parse_step_list(block) {
            entries.insert(format!("Thought Step {idx}"), Value::String(text));
        }
        Ok(Value::Object(entries).to_string())
    }

    fn answer_decompose_reply(prompt: &str) -> Result<String, JudgeError> {
        let answer = block_between(prompt, "[Answer]\n", "\n\n**Task Requirements**")
            .ok_or(JudgeError::MissingFixture(PromptKind::DecomposeAnswer))?;
        Ok(format!("<step>{answer}</step>"))
    }
}

impl Judge for MockJudge {
    fn complete(&self, prompt: &str, _params: &SamplingParams) -> Result<String, JudgeError> {
        let kind = PromptKind::detect(prompt).ok_or(JudgeError::UnknownPromptKind)?;
        if let Some(queue) = self.scripted.lock().unwrap().get_mut(&kind) {
            if let Some(reply) = queue.pop_front() {
                return Ok(reply);
            }
        }
        match kind {
            PromptKind::DecomposeSolution => Self::decompose_reply(prompt),
            PromptKind::AwareReflection => Self::reflection_reply(prompt),
            PromptKind::AwareMistakeSource => Self::source_reply(prompt),
            PromptKind::ClassifySteps => Self::classify_reply(prompt),
            PromptKind::Match => Self::match_reply(prompt),
            PromptKind::Summarize => Self::summarize_reply(prompt),
            PromptKind::DecomposeAnswer => Self::answer_decompose_reply(prompt),
        }
    }

    fn deterministic(&self) -> bool {
        true
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// Wraps a judge and fails a deterministic, content-keyed fraction of calls.
/// Keying on the prompt rather than call order keeps outcomes stable under
/// concurrent scheduling.
pub struct FlakyJudge<J> {
    inner: J,
    failure_rate: f64,
    seed: u64,
}

impl<J: Judge> FlakyJudge<J> {
    pub fn new(inner: J, failure_rate: f64, seed: u64) -> Self {
        Self {
            inner,
            failure_rate,
            seed,
        }
    }
}

impl<J: Judge> Judge for FlakyJudge<J> {
    fn complete(&self, prompt: &str, params: &SamplingParams) -> Result<String, JudgeError> {
        let mut h = self.seed;
        for chunk in prompt.as_bytes().chunks(8) {
            let mut word = [0u8; 8];
            word[..chunk.len()].copy_from_slice(chunk);
            h = splitmix64(h ^ u64::from_le_bytes(word));
        }
        if (h % 10_000) as f64 / 10_000.0 < self.failure_rate {
            return Err(JudgeError::Transport("injected failure".into()));
        }
        self.inner.complete(prompt, params)
    }

    fn deterministic(&self) -> bool {
        self.inner.deterministic()
    }
}

/// Counts completions; used to assert that skipped solutions never reach the
/// judge.
pub struct CountingJudge<J> {
    inner: J,
    calls: Arc<AtomicUsize>,
}

impl<J: Judge> CountingJudge<J> {
    pub fn new(inner: J) -> Self {
        Self {
            inner,
            calls: Arc::new(AtomicUsize::new(0)),
        }
    }

    pub fn call_counter(&self) -> Arc<AtomicUsize> {
        Arc::clone(&self.calls)
    }
}

impl<J: Judge> Judge for CountingJudge<J> {
    fn complete(&self, prompt: &str, params: &SamplingParams) -> Result<String, JudgeError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.complete(prompt, params)
    }

    fn deterministic(&self) -> bool {
        self.inner.deterministic()
    }
}

impl<J: Judge + ?Sized> Judge for Arc<J> {
    fn complete(&self, prompt: &str, params: &SamplingParams) -> Result<String, JudgeError> {
        (**self).complete(prompt, params)
    }

    fn deterministic(&self) -> bool {
        (**self).deterministic()
    }
}
