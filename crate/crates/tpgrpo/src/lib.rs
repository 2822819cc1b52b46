//! Thought-level process rewards for group-relative policy optimization,
//! runnable end to end at desk scale.
//!
//! The library segments chain-of-thought solutions into steps and thoughts,
//! evaluates them through a pluggable generative judge, converts the
//! evaluations into token-level rewards and suffix-sum advantages, and
//! optimizes a small tabular policy through a three-stage off-policy loop.

pub mod eval;
pub mod judge;
pub mod model;
pub mod objective;
pub mod pipeline;
pub mod policy;
pub mod prompts;
pub mod records;
pub mod remote;
pub mod reward;
pub mod segment;
pub mod synth;

pub use judge::{Judge, JudgeError, MockJudge, SamplingParams};
pub use model::{LabeledStep, RolloutGroup, Solution, StepLabel, Thought, TokenSignal};
pub use objective::{ClipConfig, TokenizedRollout};
pub use policy::ToyPolicy;
