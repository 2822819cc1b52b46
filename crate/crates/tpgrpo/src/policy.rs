//! Tabular autoregressive softmax policy over a small symbol vocabulary.
//!
//! Parameters are per-context logit vectors with a bounded context length,
//! which keeps exact enumeration and finite-difference checks tractable.
//! Snapshots serialize to a versioned JSON text format.

use std::collections::HashMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAX_VOCAB: usize = 64;
pub const SNAPSHOT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("vocabulary of {0} symbols exceeds the {MAX_VOCAB}-symbol cap")]
    VocabTooLarge(usize),
    #[error("token {0} outside vocabulary of size {1}")]
    UnknownToken(u16, usize),
    #[error("snapshot version {0} unsupported (expected {SNAPSHOT_VERSION})")]
    BadVersion(u32),
    #[error("snapshot io: {0}")]
    Io(#[from] std::io::Error),
    #[error("snapshot decode: {0}")]
    Decode(#[from] serde_json::Error),
}

/// Context key: the last `context_len` tokens (fewer near the start).
pub type Context = Vec<u16>;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ToyPolicy {
    vocab: Vec<String>,
    context_len: usize,
    /// Logits used for contexts that have no materialized table entry.
    init_logits: Vec<f64>,
    #[serde(with = "table_serde")]
    table: HashMap<Context, Vec<f64>>,
}

/// JSON needs string keys, so the table serializes as a sorted entry list;
/// sorting keeps snapshot bytes deterministic.
mod table_serde {
    use super::Context;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};
    use std::collections::HashMap;

    pub fn serialize<S: Serializer>(
        table: &HashMap<Context, Vec<f64>>,
        serializer: S,
    ) -> Result<S::Ok, S::Error> {
        let mut entries: Vec<(&Context, &Vec<f64>)> = table.iter().collect();
        entries.sort_by(|a, b| a.0.cmp(b.0));
        entries.serialize(serializer)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(
        deserializer: D,
    ) -> Result<HashMap<Context, Vec<f64>>, D::Error> {
        let entries = Vec::<(Context, Vec<f64>)>::deserialize(deserializer)?;
        Ok(entries.into_iter().collect())
    }
}

impl ToyPolicy {
    pub fn new(vocab: Vec<String>, context_len: usize) -> Result<Self, PolicyError> {
        if vocab.len() > MAX_VOCAB {
            return Err(PolicyError::VocabTooLarge(vocab.len()));
        }
        let n = vocab.len();
        Ok(Self {
            vocab,
            context_len,
            init_logits: vec![0.0; n],
            table: HashMap::new(),
        })
    }

    pub fn with_init_logits(mut self, logits: Vec<f64>) -> Self {
        assert_eq!(logits.len(), self.vocab.len());
        self.init_logits = logits;
        self
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn context_len(&self) -> usize {
        self.context_len
    }

    pub fn symbol_index(&self, name: &str) -> Option<u16> {
        self.vocab.iter().position(|s| s == name).map(|i| i as u16)
    }

    /// Trailing window of the sequence used to key the table.
    pub fn context_of(&self, sequence: &[u16]) -> Context {
        let start = sequence.len().saturating_sub(self.context_len);
        sequence[start..].to_vec()
    }

    pub fn logits(&self, context: &[u16]) -> &[f64] {
        self.table.get(context).map(|v| v.as_slice()).unwrap_or(&self.init_logits)
    }

    /// Softmax probabilities over the vocabulary for a context.
    pub fn probabilities(&self, context: &[u16]) -> Vec<f64> {
        let logits = self.logits(context);
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        exps.into_iter().map(|e| e / sum).collect()
    }

    /// Log probability of `token` given the trailing context of `prefix`.
    pub fn log_prob(&self, prefix: &[u16], token: u16) -> Result<f64, PolicyError> {
        if token as usize >= self.vocab.len() {
            return Err(PolicyError::UnknownToken(token, self.vocab.len()));
        }
        let context = self.context_of(prefix);
        let logits = self.logits(&context);
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let log_sum = logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln() + max;
        Ok(logits[token as usize] - log_sum)
    }

    /// Samples one token for the trailing context of `sequence`.
    pub fn sample_token(&self, sequence: &[u16], rng: &mut impl Rng) -> u16 {
        let context = self.context_of(sequence);
        let probs = self.probabilities(&context);
        let mut u: f64 = rng.gen();
        for (i, p) in probs.iter().enumerate() {
            u -= p;
            if u <= 0.0 {
                return i as u16;
            }
        }
        (probs.len() - 1) as u16
    }

    /// Samples up to `max_new` tokens, stopping after a token for which
    /// `stop` returns true. The cap bounds every rollout.
    pub fn sample_sequence(
        &self,
        prefix: &[u16],
        max_new: usize,
        rng: &mut impl Rng,
        stop: impl Fn(u16) -> bool,
    ) -> Vec<u16> {
        let mut sequence = prefix.to_vec();
        let mut out = Vec::new();
        while out.len() < max_new {
            let token = self.sample_token(&sequence, rng);
            sequence.push(token);
            out.push(token);
            if stop(token) {
                break;
            }
        }
        out
    }

    /// Ensures a table entry exists for the context, seeding it from the
    /// init logits, and returns a mutable handle.
    pub fn materialize(&mut self, context: &[u16]) -> &mut Vec<f64> {
        let init = &self.init_logits;
        self.table
            .entry(context.to_vec())
            .or_insert_with(|| init.clone())
    }

    pub fn table(&self) -> &HashMap<Context, Vec<f64>> {
        &self.table
    }

    pub fn table_mut(&mut self) -> &mut HashMap<Context, Vec<f64>> {
        &mut self.table
    }

    pub fn save(&self, path: &Path) -> Result<(), PolicyError> {
        let snapshot = PolicySnapshot {
            version: SNAPSHOT_VERSION,
            policy: self.clone(),
        };
        let text = serde_json::to_string(&snapshot)?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, PolicyError> {
        let text = std::fs::read_to_string(path)?;
        let snapshot: PolicySnapshot = serde_json::from_str(&text)?;
        if snapshot.version != SNAPSHOT_VERSION {
            return Err(PolicyError::BadVersion(snapshot.version));
        }
        Ok(snapshot.policy)
    }
}

/// Versioned on-disk form of a policy.
#[derive(Debug, Serialize, Deserialize)]
pub struct PolicySnapshot {
    pub version: u32,
    pub policy: ToyPolicy,
}
