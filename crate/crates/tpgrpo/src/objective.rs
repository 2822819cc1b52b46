//! Clipped surrogate objective with token-level normalization, asymmetric
//! clipping ranges, a k3 KL penalty, and its analytic gradient over the
//! tabular policy.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::policy::{Context, PolicyError, ToyPolicy};

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error("advantage length {advantages} does not match token length {tokens}")]
    AdvantageMismatch { advantages: usize, tokens: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("non-finite gradient for context {context:?}")]
    NonFiniteGradient { context: Context },
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

/// Clipping ranges and KL coefficient.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClipConfig {
    pub eps_low: f64,
    pub eps_high: f64,
    pub beta: f64,
}

impl ClipConfig {
    pub fn new(eps_low: f64, eps_high: f64, beta: f64) -> Self {
        assert!(eps_low > 0.0 && eps_high > 0.0, "clip ranges must be positive");
        assert!(beta >= 0.0, "beta must be nonnegative");
        Self {
            eps_low,
            eps_high,
            beta,
        }
    }
}

impl Default for ClipConfig {
    fn default() -> Self {
        Self {
            eps_low: 0.2,
            eps_high: 0.28,
            beta: 0.0,
        }
    }
}

/// One sampled sequence with its per-token advantages, ready for the
/// objective. `prefix` is the conditioning context (the problem); only the
/// `tokens` positions enter the loss.
#[derive(Debug, Clone)]
pub struct TokenizedRollout {
    pub prefix: Vec<u16>,
    pub tokens: Vec<u16>,
    pub advantages: Vec<f64>,
}

impl TokenizedRollout {
    fn check(&self) -> Result<(), ObjectiveError> {
        if self.advantages.len() != self.tokens.len() {
            return Err(ObjectiveError::AdvantageMismatch {
                advantages: self.advantages.len(),
                tokens: self.tokens.len(),
            });
        }
        Ok(())
    }
}

/// Importance ratio pi_theta(token|prefix) / pi_old(token|prefix).
pub fn policy_ratio(
    current: &ToyPolicy,
    old: &ToyPolicy,
    prefix: &[u16],
    token: u16,
) -> Result<f64, PolicyError> {
    Ok((current.log_prob(prefix, token)? - old.log_prob(prefix, token)?).exp())
}

/// k3 estimator of the per-token KL contribution: `r - ln r - 1` with
/// `r = pi_ref / pi_theta` at the sampled token. Nonnegative for all r > 0.
pub fn kl_estimate(
    current: &ToyPolicy,
    reference: &ToyPolicy,
    prefix: &[u16],
    token: u16,
) -> Result<f64, PolicyError> {
    let log_r = reference.log_prob(prefix, token)? - current.log_prob(prefix, token)?;
    let r = log_r.exp();
    Ok(r - log_r - 1.0)
}

fn clip(rho: f64, cfg: &ClipConfig) -> f64 {
    rho.clamp(1.0 - cfg.eps_low, 1.0 + cfg.eps_high)
}

struct TokenView<'a> {
    context: Context,
    token: u16,
    advantage: f64,
    rollout: &'a TokenizedRollout,
}

fn for_each_token<'a>(
    rollouts: &'a [TokenizedRollout],
    policy: &ToyPolicy,
    mut f: impl FnMut(TokenView<'a>) -> Result<(), ObjectiveError>,
) -> Result<usize, ObjectiveError> {
    let mut total = 0usize;
    for rollout in rollouts {
        rollout.check()?;
        let mut sequence = rollout.prefix.clone();
        for (t, &token) in rollout.tokens.iter().enumerate() {
            let context = policy.context_of(&sequence);
            f(TokenView {
                context,
                token,
                advantage: rollout.advantages[t],
                rollout,
            })?;
            sequence.push(token);
            total += 1;
        }
    }
    Ok(total)
}

/// The surrogate objective over a batch of rollouts:
/// `J = (1/N) * sum_i sum_t { min[rho*A, clip(rho)*A] - beta*k3 }` where `N`
/// is the total token count across the batch.
pub fn tp_grpo_objective(
    rollouts: &[TokenizedRollout],
    current: &ToyPolicy,
    old: &ToyPolicy,
    reference: &ToyPolicy,
    cfg: &ClipConfig,
) -> Result<f64, ObjectiveError> {
    let mut sum = 0.0;
    let total = for_each_token(rollouts, current, |view| {
        let lp = current.log_prob(&view.context, view.token)?;
        let lp_old = old.log_prob(&view.context, view.token)?;
        let rho = (lp - lp_old).exp();
        let term = (rho * view.advantage).min(clip(rho, cfg) * view.advantage);
        let kl = if cfg.beta > 0.0 {
            let log_r = reference.log_prob(&view.context, view.token)? - lp;
            log_r.exp() - log_r - 1.0
        } else {
            0.0
        };
        let _ = view.rollout;
        sum += term - cfg.beta * kl;
        Ok(())
    })?;
    if total == 0 {
        return Err(ObjectiveError::EmptyBatch);
    }
    Ok(sum / total as f64)
}

/// Analytic gradient of the objective with respect to the current policy's
/// logits. Clipping follows the usual surrogate semantics: tokens whose
/// clipped term is strictly smaller contribute no gradient.
pub fn objective_gradient(
    rollouts: &[TokenizedRollout],
    current: &ToyPolicy,
    old: &ToyPolicy,
    reference: &ToyPolicy,
    cfg: &ClipConfig,
) -> Result<BTreeMap<Context, Vec<f64>>, ObjectiveError> {
    let vocab = current.vocab_size();
    let mut grad: BTreeMap<Context, Vec<f64>> = BTreeMap::new();
    let mut count = 0usize;
    let total = for_each_token(rollouts, current, |view| {
        let lp = current.log_prob(&view.context, view.token)?;
        let lp_old = old.log_prob(&view.context, view.token)?;
        let rho = (lp - lp_old).exp();
        let unclipped = rho * view.advantage;
        let clipped = clip(rho, cfg) * view.advantage;
        let mut coeff = if unclipped <= clipped { unclipped } else { 0.0 };
        if cfg.beta > 0.0 {
            let log_r = reference.log_prob(&view.context, view.token)? - lp;
            let r = log_r.exp();
            coeff -= cfg.beta * (1.0 - r);
        }
        if coeff != 0.0 {
            let probs = current.probabilities(&view.context);
            let entry = grad
                .entry(view.context.clone())
                .or_insert_with(|| vec![0.0; vocab]);
            for k in 0..vocab {
                let indicator = if k == view.token as usize { 1.0 } else { 0.0 };
                entry[k] += coeff * (indicator - probs[k]);
            }
        }
        count += 1;
        Ok(())
    })?;
    if total == 0 {
        return Err(ObjectiveError::EmptyBatch);
    }
    let scale = 1.0 / total as f64;
    for entry in grad.values_mut() {
        for g in entry.iter_mut() {
            *g *= scale;
        }
    }
    Ok(grad)
}

/// Central finite differences of the objective over every materialized
/// table entry. Diagnostic oracle for the analytic gradient.
pub fn finite_difference_gradient(
    rollouts: &[TokenizedRollout],
    current: &ToyPolicy,
    old: &ToyPolicy,
    reference: &ToyPolicy,
    cfg: &ClipConfig,
    h: f64,
) -> Result<BTreeMap<Context, Vec<f64>>, ObjectiveError> {
    let mut out = BTreeMap::new();
    let contexts: Vec<Context> = current.table().keys().cloned().collect();
    for context in contexts {
        let vocab = current.vocab_size();
        let mut row = vec![0.0; vocab];
        for k in 0..vocab {
            let mut plus = current.clone();
            plus.materialize(&context)[k] += h;
            let mut minus = current.clone();
            minus.materialize(&context)[k] -= h;
            let j_plus = tp_grpo_objective(rollouts, &plus, old, reference, cfg)?;
            let j_minus = tp_grpo_objective(rollouts, &minus, old, reference, cfg)?;
            row[k] = (j_plus - j_minus) / (2.0 * h);
        }
        out.insert(context, row);
    }
    Ok(out)
}

/// Summary of one ascent step.
#[derive(Debug, Clone)]
pub struct StepStats {
    pub objective: f64,
    pub grad_norm: f64,
    pub tokens: usize,
}

/// One gradient-ascent step on the current policy. The old policy stays the
/// sampling snapshot; the step aborts on a non-finite gradient.
pub fn train_step(
    policy: &mut ToyPolicy,
    rollouts: &[TokenizedRollout],
    old: &ToyPolicy,
    reference: &ToyPolicy,
    lr: f64,
    cfg: &ClipConfig,
) -> Result<StepStats, ObjectiveError> {
    let objective = tp_grpo_objective(rollouts, policy, old, reference, cfg)?;
    let grad = objective_gradient(rollouts, policy, old, reference, cfg)?;
    let mut norm_sq = 0.0;
    for (context, row) in &grad {
        for g in row {
            if !g.is_finite() {
                return Err(ObjectiveError::NonFiniteGradient {
                    context: context.clone(),
                });
            }
            norm_sq += g * g;
        }
    }
    let tokens = rollouts.iter().map(|r| r.tokens.len()).sum();
    for (context, row) in grad {
        let entry = policy.materialize(&context);
        for (z, g) in entry.iter_mut().zip(row) {
            *z += lr * g;
        }
    }
    Ok(StepStats {
        objective,
        grad_norm: norm_sq.sqrt(),
        tokens,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn vocab(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("s{i}")).collect()
    }

    fn randomized_policy(rng: &mut impl Rng, n_vocab: usize, contexts: &[Context]) -> ToyPolicy {
        let mut policy = ToyPolicy::new(vocab(n_vocab), 2).unwrap();
        for ctx in contexts {
            let logits = policy.materialize(ctx);
            for z in logits.iter_mut() {
                *z = rng.gen_range(-1.5..1.5);
            }
        }
        policy
    }

    fn single_token_rollout(advantage: f64) -> Vec<TokenizedRollout> {
        vec![TokenizedRollout {
            prefix: vec![],
            tokens: vec![0],
            advantages: vec![advantage],
        }]
    }

    #[test]
    fn ratio_is_one_for_identical_policies() {
        let policy = ToyPolicy::new(vocab(4), 2).unwrap();
        let rho = policy_ratio(&policy, &policy, &[1, 2], 3).unwrap();
        assert_eq!(rho, 1.0);
    }

    #[test]
    fn ratio_matches_direct_quotient() {
        let mut current = ToyPolicy::new(vocab(2), 1).unwrap();
        // p(token 0) = 0.6 for current, 0.4 for old.
        current.materialize(&[1])[0] = (0.6f64 / 0.4).ln();
        let old = ToyPolicy::new(vocab(2), 1).unwrap();
        let mut old = old;
        old.materialize(&[1])[0] = (0.4f64 / 0.6).ln();
        let p_cur = current.probabilities(&[1])[0];
        let p_old = old.probabilities(&[1])[0];
        let rho = policy_ratio(&current, &old, &[1], 0).unwrap();
        assert!((rho - p_cur / p_old).abs() < 1e-12);
        assert!((rho - 1.5).abs() < 1e-9);
        assert!(rho > 0.0);
    }

    #[test]
    fn kl_zero_for_equal_policies() {
        let policy = ToyPolicy::new(vocab(4), 2).unwrap();
        assert_eq!(kl_estimate(&policy, &policy, &[0], 1).unwrap(), 0.0);
    }

    #[test]
    fn kl_estimate_nonnegative() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..50 {
            let ctx = vec![rng.gen_range(0..4) as u16];
            let current = randomized_policy(&mut rng, 4, &[ctx.clone()]);
            let reference = randomized_policy(&mut rng, 4, &[ctx.clone()]);
            for token in 0..4u16 {
                let k = kl_estimate(&current, &reference, &ctx, token).unwrap();
                assert!(k >= 0.0, "k3 must be nonnegative, got {k}");
            }
        }
    }

    #[test]
    fn kl_monte_carlo_matches_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let ctx: Context = vec![];
        let current = randomized_policy(&mut rng, 4, &[ctx.clone()]);
        let reference = randomized_policy(&mut rng, 4, &[ctx.clone()]);
        let p = current.probabilities(&ctx);
        let q = reference.probabilities(&ctx);
        let exact: f64 = p
            .iter()
            .zip(&q)
            .map(|(pi, qi)| pi * (pi / qi).ln())
            .sum();
        let n = 20000;
        let samples: Vec<f64> = (0..n)
            .map(|_| {
                let token = current.sample_token(&ctx, &mut rng);
                kl_estimate(&current, &reference, &ctx, token).unwrap()
            })
            .collect();
        let mean = samples.iter().sum::<f64>() / n as f64;
        let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
        let sigma = (var / n as f64).sqrt();
        assert!(
            (mean - exact).abs() < 3.0 * sigma.max(1e-9),
            "MC mean {mean} vs exact {exact} (sigma {sigma})"
        );
    }

    #[test]
    fn objective_equals_advantage_mean_when_static() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let contexts: Vec<Context> = vec![vec![], vec![0], vec![1, 2], vec![2, 0]];
        let policy = randomized_policy(&mut rng, 3, &contexts);
        let rollouts = vec![
            TokenizedRollout {
                prefix: vec![0],
                tokens: vec![1, 2, 0],
                advantages: vec![0.3, -0.7, 1.1],
            },
            TokenizedRollout {
                prefix: vec![2],
                tokens: vec![0, 1],
                advantages: vec![0.5, 0.25],
            },
        ];
        let cfg = ClipConfig::new(0.2, 0.28, 0.0);
        let j = tp_grpo_objective(&rollouts, &policy, &policy, &policy, &cfg).unwrap();
        let mean = (0.3 - 0.7 + 1.1 + 0.5 + 0.25) / 5.0;
        assert!((j - mean).abs() < 1e-12);
    }

    #[test]
    fn clip_branch_high() {
        // rho = 1.5 via p=0.75 against p_old=0.5, advantage +1.
        let mut current = ToyPolicy::new(vocab(2), 2).unwrap();
        current.materialize(&[])[0] = 3.0f64.ln();
        let old = ToyPolicy::new(vocab(2), 2).unwrap();
        let cfg = ClipConfig::new(0.2, 0.28, 0.0);
        let j = tp_grpo_objective(&single_token_rollout(1.0), &current, &old, &old, &cfg).unwrap();
        assert!((j - 1.28).abs() < 1e-9, "expected clipped 1.28, got {j}");
    }

    #[test]
    fn clip_branch_low() {
        // rho = 0.5 via p=0.25 against p_old=0.5, advantage -1.
        let mut current = ToyPolicy::new(vocab(2), 2).unwrap();
        current.materialize(&[])[1] = 3.0f64.ln();
        let old = ToyPolicy::new(vocab(2), 2).unwrap();
        let cfg = ClipConfig::new(0.2, 0.28, 0.0);
        let j = tp_grpo_objective(&single_token_rollout(-1.0), &current, &old, &old, &cfg).unwrap();
        assert!((j + 0.8).abs() < 1e-9, "expected clipped -0.8, got {j}");
    }

    #[test]
    fn clipping_invariance_beyond_range() {
        // Any rho beyond 1+eps_high yields the same positive-advantage term.
        let old = ToyPolicy::new(vocab(2), 2).unwrap();
        let cfg = ClipConfig::new(0.2, 0.28, 0.0);
        let mut values = Vec::new();
        for logit in [1.5f64, 2.5, 4.0] {
            let mut current = ToyPolicy::new(vocab(2), 2).unwrap();
            current.materialize(&[])[0] = logit;
            let j =
                tp_grpo_objective(&single_token_rollout(1.0), &current, &old, &old, &cfg).unwrap();
            values.push(j);
        }
        for v in &values {
            assert!((v - values[0]).abs() < 1e-12);
        }
    }

    fn rollout_near_boundary(
        rollouts: &[TokenizedRollout],
        current: &ToyPolicy,
        old: &ToyPolicy,
        cfg: &ClipConfig,
    ) -> bool {
        let mut near = false;
        let _ = for_each_token(rollouts, current, |view| {
            let rho = policy_ratio(current, old, &view.context, view.token).unwrap();
            for bound in [1.0 - cfg.eps_low, 1.0 + cfg.eps_high] {
                if (rho - bound).abs() < 1e-3 {
                    near = true;
                }
            }
            Ok(())
        });
        near
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let mut checked = 0;
        while checked < 25 {
            let n_vocab = rng.gen_range(2..5);
            let n_ctx = rng.gen_range(2..6);
            let mut contexts: Vec<Context> = Vec::new();
            let mut rollouts = Vec::new();
            for _ in 0..rng.gen_range(1..4) {
                let len = rng.gen_range(1..6);
                let prefix = vec![rng.gen_range(0..n_vocab) as u16];
                let tokens: Vec<u16> =
                    (0..len).map(|_| rng.gen_range(0..n_vocab) as u16).collect();
                let advantages: Vec<f64> = (0..len).map(|_| rng.gen_range(-2.0..2.0)).collect();
                rollouts.push(TokenizedRollout {
                    prefix,
                    tokens,
                    advantages,
                });
            }
            for _ in 0..n_ctx {
                contexts.push(
                    (0..rng.gen_range(0..3))
                        .map(|_| rng.gen_range(0..n_vocab) as u16)
                        .collect(),
                );
            }
            let mut current = randomized_policy(&mut rng, n_vocab, &contexts);
            let old = randomized_policy(&mut rng, n_vocab, &contexts);
            // Materialize every context the batch touches so finite
            // differences sweep them all.
            let ctx_list: Vec<Context> = {
                let mut v = Vec::new();
                for_each_token(&rollouts, &current, |view| {
                    v.push(view.context);
                    Ok(())
                })
                .unwrap();
                v
            };
            for ctx in &ctx_list {
                current.materialize(ctx);
            }
            let beta = [0.0, 0.04, 0.1][rng.gen_range(0..3)];
            let cfg = ClipConfig::new(0.2, 0.28, beta);
            if rollout_near_boundary(&rollouts, &current, &old, &cfg) {
                continue;
            }
            let analytic = objective_gradient(&rollouts, &current, &old, &old, &cfg).unwrap();
            let fd = finite_difference_gradient(&rollouts, &current, &old, &old, &cfg, 1e-5)
                .unwrap();
            for (ctx, fd_row) in &fd {
                let zero = vec![0.0; fd_row.len()];
                let a_row = analytic.get(ctx).unwrap_or(&zero);
                for (a, f) in a_row.iter().zip(fd_row) {
                    let denom = a.abs().max(f.abs()).max(1e-6);
                    assert!(
                        (a - f).abs() / denom < 1e-5,
                        "analytic {a} vs fd {f} at {ctx:?}"
                    );
                }
            }
            checked += 1;
        }
    }

    #[test]
    fn zero_advantages_zero_gradient() {
        let policy = ToyPolicy::new(vocab(3), 2).unwrap();
        let rollouts = vec![TokenizedRollout {
            prefix: vec![0],
            tokens: vec![1, 2],
            advantages: vec![0.0, 0.0],
        }];
        let cfg = ClipConfig::new(0.2, 0.28, 0.0);
        let grad = objective_gradient(&rollouts, &policy, &policy, &policy, &cfg).unwrap();
        assert!(grad.values().flatten().all(|&g| g == 0.0));
    }

    #[test]
    fn kl_only_gradient_when_static() {
        // With theta = theta_old the ratio term's gradient is A*(e-p); with
        // zero advantages the whole gradient reduces to the beta-scaled KL
        // part alone.
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        let ctx: Context = vec![0, 1];
        let current = randomized_policy(&mut rng, 3, &[ctx.clone()]);
        let reference = randomized_policy(&mut rng, 3, &[ctx.clone()]);
        let rollouts = vec![TokenizedRollout {
            prefix: vec![0, 1],
            tokens: vec![2],
            advantages: vec![0.0],
        }];
        let with_kl = ClipConfig::new(0.2, 0.28, 0.5);
        let grad = objective_gradient(&rollouts, &current, &current, &reference, &with_kl).unwrap();
        let fd =
            finite_difference_gradient(&rollouts, &current, &current, &reference, &with_kl, 1e-6)
                .unwrap();
        for (ctx, fd_row) in &fd {
            let zero = vec![0.0; fd_row.len()];
            let a_row = grad.get(ctx).unwrap_or(&zero);
            for (a, f) in a_row.iter().zip(fd_row) {
                assert!((a - f).abs() < 1e-6, "analytic {a} vs fd {f}");
            }
        }
    }

    #[test]
    fn positive_advantage_raises_probability() {
        let mut policy = ToyPolicy::new(vocab(3), 2).unwrap();
        let old = policy.clone();
        let rollouts = vec![TokenizedRollout {
            prefix: vec![0],
            tokens: vec![1],
            advantages: vec![1.0],
        }];
        let cfg = ClipConfig::default();
        let before = policy.probabilities(&[0])[1];
        train_step(&mut policy, &rollouts, &old, &old, 0.5, &cfg).unwrap();
        let after = policy.probabilities(&[0])[1];
        assert!(after > before);
    }

    #[test]
    fn zero_lr_keeps_policy() {
        let mut policy = ToyPolicy::new(vocab(3), 2).unwrap();
        let old = policy.clone();
        let rollouts = vec![TokenizedRollout {
            prefix: vec![0],
            tokens: vec![1, 2],
            advantages: vec![1.0, -1.0],
        }];
        train_step(&mut policy, &rollouts, &old, &old, 0.0, &ClipConfig::default()).unwrap();
        assert_eq!(policy.probabilities(&[0]), old.probabilities(&[0]));
    }

    #[test]
    fn repeated_steps_increase_objective() {
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        let mut policy = randomized_policy(&mut rng, 3, &[vec![0], vec![0, 1]]);
        let old = policy.clone();
        let rollouts = vec![TokenizedRollout {
            prefix: vec![0],
            tokens: vec![1, 2, 1],
            advantages: vec![0.8, -0.3, 0.5],
        }];
        let cfg = ClipConfig::new(0.2, 0.28, 0.0);
        let mut last = f64::NEG_INFINITY;
        for _ in 0..20 {
            let stats = train_step(&mut policy, &rollouts, &old, &old, 0.05, &cfg).unwrap();
            assert!(stats.objective >= last - 1e-12, "objective decreased");
            last = stats.objective;
        }
    }
}
