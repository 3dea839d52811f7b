//! Empirical risk and divergence estimators over logged samples.
//!
//! Risk estimators average importance-weighted rewards over the known-reward
//! samples. The reward-free regularizers group the unknown-reward samples by
//! logged action and sum the per-group averages; a group with no samples
//! contributes nothing. Every estimator has a value form and a
//! value-plus-gradient form; the gradient forms accumulate per-sample score
//! derivatives in fixed-size chunks (see [`crate::exec`]).

use thiserror::Error;

use crate::data::{AugmentedSample, Logged, LoggedKnownSample};
use crate::exec::{chunked_reduce, Execution};
use crate::policy::{log_prob_score_grad, ForwardPass, PolicyError, PolicyGradient, SoftmaxPolicy};

#[derive(Debug, Error)]
pub enum EstimatorError {
    #[error("known-reward sample set is empty")]
    EmptyKnown,
    #[error("alpha {0} outside [0, 1]")]
    InvalidAlpha(f64),
    #[error("truncation parameter {name} = {value} outside [0, 1]")]
    InvalidTruncation { name: &'static str, value: f64 },
    #[error("sample {index} has zero propensity and tau = 0; the KL estimate diverges")]
    ZeroPropensity { index: usize },
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

/// Propensity floors: `zeta` for the risk estimators, `tau` for the
/// regularizers.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TruncationParams {
    pub zeta: f64,
    pub tau: f64,
}

impl TruncationParams {
    pub fn new(zeta: f64, tau: f64) -> Result<Self, EstimatorError> {
        for (name, value) in [("zeta", zeta), ("tau", tau)] {
            if !(0.0..=1.0).contains(&value) {
                return Err(EstimatorError::InvalidTruncation { name, value });
            }
        }
        Ok(Self { zeta, tau })
    }

    /// No truncation.
    pub fn none() -> Self {
        Self {
            zeta: 0.0,
            tau: 0.0,
        }
    }
}

impl Default for TruncationParams {
    fn default() -> Self {
        Self {
            zeta: 0.001,
            tau: 0.001,
        }
    }
}

/// Which reward-free regularizer to use.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Regularizer {
    /// Truncated KL estimate.
    Kl,
    /// Reverse-KL estimate (untruncated).
    Rkl,
    /// Truncated propensity-weighted cross-entropy.
    Wce,
}

/// Sample indices grouped by logged action.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ActionGroups {
    members: Vec<Vec<usize>>,
}

impl ActionGroups {
    pub fn new<T: Logged>(samples: &[T], action_count: usize) -> Result<Self, EstimatorError> {
        let mut members = vec![Vec::new(); action_count];
        for (i, s) in samples.iter().enumerate() {
            let a = s.action();
            if a >= action_count {
                return Err(PolicyError::ActionOutOfRange {
                    action: a,
                    count: action_count,
                }
                .into());
            }
            members[a].push(i);
        }
        Ok(Self { members })
    }

    pub fn members(&self, action: usize) -> &[usize] {
        &self.members[action]
    }

    /// `m_[i]` for every action.
    pub fn counts(&self) -> Vec<usize> {
        self.members.iter().map(Vec::len).collect()
    }

    pub fn total(&self) -> usize {
        self.members.iter().map(Vec::len).sum()
    }

    /// `1 / m_[a]` for each sample, in sample order.
    fn sample_weights(&self, len: usize) -> Vec<f64> {
        let mut w = vec![0.0; len];
        for group in &self.members {
            let inv = 1.0 / group.len() as f64;
            for &i in group {
                w[i] = inv;
            }
        }
        w
    }
}

pub(crate) fn check_alpha(alpha: f64) -> Result<(), EstimatorError> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(EstimatorError::InvalidAlpha(alpha));
    }
    Ok(())
}

fn action_prob(policy: &SoftmaxPolicy, x: &[f64], a: usize) -> Result<(f64, f64), EstimatorError> {
    if a >= policy.action_count() {
        return Err(PolicyError::ActionOutOfRange {
            action: a,
            count: policy.action_count(),
        }
        .into());
    }
    let pass = policy.forward(x)?;
    Ok((pass.probs[a], pass.log_probs[a]))
}

/// `(1/n) Σ r_i π(a_i|x_i) / p_i`.
pub fn ips_risk(
    policy: &SoftmaxPolicy,
    known: &[LoggedKnownSample],
) -> Result<f64, EstimatorError> {
    truncated_ips_risk(policy, known, 0.0)
}

/// `(1/n) Σ r_i π(a_i|x_i) / max(p_i, ζ)`.
pub fn truncated_ips_risk(
    policy: &SoftmaxPolicy,
    known: &[LoggedKnownSample],
    zeta: f64,
) -> Result<f64, EstimatorError> {
    if known.is_empty() {
        return Err(EstimatorError::EmptyKnown);
    }
    let mut total = 0.0;
    for s in known {
        let (pi, _) = action_prob(policy, &s.context, s.action)?;
        total += s.reward * pi / s.propensity.max(zeta);
    }
    Ok(total / known.len() as f64)
}

fn grouped_sum<T, F>(
    policy: &SoftmaxPolicy,
    samples: &[T],
    mut term: F,
) -> Result<f64, EstimatorError>
where
    T: Logged,
    F: FnMut(usize, &T, f64, f64) -> Result<f64, EstimatorError>,
{
    let groups = ActionGroups::new(samples, policy.action_count())?;
    let mut total = 0.0;
    for a in 0..policy.action_count() {
        let members = groups.members(a);
        if members.is_empty() {
            continue;
        }
        let mut group_sum = 0.0;
        for &i in members {
            let s = &samples[i];
            let (pi, log_pi) = action_prob(policy, s.context(), s.action())?;
            group_sum += term(i, s, pi, log_pi)?;
        }
        total += group_sum / members.len() as f64;
    }
    Ok(total)
}

fn kl_floor(index: usize, propensity: f64, tau: f64) -> Result<f64, EstimatorError> {
    let q = propensity.max(tau);
    if q <= 0.0 {
        return Err(EstimatorError::ZeroPropensity { index });
    }
    Ok(q)
}

/// `Σ_i (1/m_[i]) Σ π(a_i|x) log(π(a_i|x) / max(τ, p))`.
pub fn kl_regularizer<T: Logged>(
    policy: &SoftmaxPolicy,
    unknown: &[T],
    tau: f64,
) -> Result<f64, EstimatorError> {
    grouped_sum(policy, unknown, |i, s, pi, log_pi| {
        let q = kl_floor(i, s.propensity(), tau)?;
        Ok(pi * (log_pi - q.ln()))
    })
}

/// `Σ_i (1/m_[i]) Σ [−p log π(a_i|x) + p log p]`.
pub fn rkl_regularizer<T: Logged>(
    policy: &SoftmaxPolicy,
    unknown: &[T],
) -> Result<f64, EstimatorError> {
    grouped_sum(policy, unknown, |_, s, _, log_pi| {
        let p = s.propensity();
        Ok(-p * log_pi + p * p.ln())
    })
}

/// `Σ_i (1/m_[i]) Σ −max(τ, p) log π(a_i|x)`.
pub fn wce_regularizer<T: Logged>(
    policy: &SoftmaxPolicy,
    unknown: &[T],
    tau: f64,
) -> Result<f64, EstimatorError> {
    grouped_sum(policy, unknown, |_, s, _, log_pi| {
        Ok(-s.propensity().max(tau) * log_pi)
    })
}

pub fn regularizer_value<T: Logged>(
    policy: &SoftmaxPolicy,
    unknown: &[T],
    regularizer: Regularizer,
    tau: f64,
) -> Result<f64, EstimatorError> {
    match regularizer {
        Regularizer::Kl => kl_regularizer(policy, unknown, tau),
        Regularizer::Rkl => rkl_regularizer(policy, unknown),
        Regularizer::Wce => wce_regularizer(policy, unknown, tau),
    }
}

/// `α · truncated IPS + (1 − α) · regularizer`. A term whose weight is zero
/// is not evaluated.
pub fn combined_objective<T: Logged>(
    policy: &SoftmaxPolicy,
    known: &[LoggedKnownSample],
    unknown: &[T],
    alpha: f64,
    trunc: TruncationParams,
    regularizer: Regularizer,
) -> Result<f64, EstimatorError> {
    check_alpha(alpha)?;
    let risk = if alpha > 0.0 {
        alpha * truncated_ips_risk(policy, known, trunc.zeta)?
    } else {
        0.0
    };
    let reg = if alpha < 1.0 {
        (1.0 - alpha) * regularizer_value(policy, unknown, regularizer, trunc.tau)?
    } else {
        0.0
    };
    Ok(risk + reg)
}

/// Value pieces of the pseudo-reward objective.
#[derive(Clone, Debug)]
pub struct PseudoRewardTerms {
    /// `(1/(n+m)) [Σ_S r π/max(ζ,p) + Σ_Su r̂ π/max(ζ,p)]`, before the α factor.
    pub risk: f64,
    /// WCE regularizer over the union, before the `1 − α` factor.
    pub regularizer: f64,
    pub value: f64,
}

/// A known sample with a reward or an augmented sample with its clamped
/// pseudo-reward, viewed uniformly.
struct RewardTerm<'a> {
    context: &'a [f64],
    action: usize,
    propensity: f64,
    reward: f64,
}

impl Logged for RewardTerm<'_> {
    fn context(&self) -> &[f64] {
        self.context
    }
    fn action(&self) -> usize {
        self.action
    }
    fn propensity(&self) -> f64 {
        self.propensity
    }
}

fn union_terms<'a>(
    known: &'a [LoggedKnownSample],
    augmented: &'a [AugmentedSample],
) -> Vec<RewardTerm<'a>> {
    known
        .iter()
        .map(|s| RewardTerm {
            context: &s.context,
            action: s.action,
            propensity: s.propensity,
            reward: s.reward,
        })
        .chain(augmented.iter().map(|s| RewardTerm {
            context: &s.sample.context,
            action: s.sample.action,
            propensity: s.sample.propensity,
            reward: s.pseudo_reward.clamp(-1.0, 0.0),
        }))
        .collect()
}

/// `α/(n+m) [Σ_S r π/max(ζ,p) + Σ_Su r̂ π/max(ζ,p)] + (1−α) WCE_τ(S ∪ S_u)`.
pub fn pseudo_reward_objective(
    policy: &SoftmaxPolicy,
    known: &[LoggedKnownSample],
    augmented: &[AugmentedSample],
    alpha: f64,
    trunc: TruncationParams,
) -> Result<PseudoRewardTerms, EstimatorError> {
    check_alpha(alpha)?;
    let terms = union_terms(known, augmented);
    if terms.is_empty() {
        return Err(EstimatorError::EmptyKnown);
    }
    let mut risk = 0.0;
    for t in &terms {
        let (pi, _) = action_prob(policy, t.context, t.action)?;
        risk += t.reward * pi / t.propensity.max(trunc.zeta);
    }
    risk /= terms.len() as f64;
    let regularizer = wce_regularizer(policy, &terms, trunc.tau)?;
    Ok(PseudoRewardTerms {
        risk,
        regularizer,
        value: alpha * risk + (1.0 - alpha) * regularizer,
    })
}

/// Sums per-sample value contributions and score derivatives over `len`
/// samples in fixed chunks.
fn accumulate<F>(
    policy: &SoftmaxPolicy,
    len: usize,
    exec: Execution,
    per_sample: F,
) -> Result<(f64, PolicyGradient), EstimatorError>
where
    F: Fn(usize) -> Result<(ForwardPass, f64, Vec<f64>), EstimatorError> + Sync + Send,
{
    let result = chunked_reduce(
        exec,
        len,
        |range| -> Result<(f64, PolicyGradient), EstimatorError> {
            let mut grad = PolicyGradient::zeros_like(policy);
            let mut value = 0.0;
            for i in range {
                let (pass, v, dscores) = per_sample(i)?;
                value += v;
                policy.accumulate_backward(&pass, &dscores, &mut grad);
            }
            Ok((value, grad))
        },
        |a, b| {
            let (va, ga) = a?;
            let (vb, gb) = b?;
            Ok((va + vb, ga.merge(gb)))
        },
    );
    result.unwrap_or_else(|| Ok((0.0, PolicyGradient::zeros_like(policy))))
}

fn forward_checked(
    policy: &SoftmaxPolicy,
    x: &[f64],
    a: usize,
) -> Result<ForwardPass, EstimatorError> {
    if a >= policy.action_count() {
        return Err(PolicyError::ActionOutOfRange {
            action: a,
            count: policy.action_count(),
        }
        .into());
    }
    Ok(policy.forward(x)?)
}

/// Truncated IPS risk and its gradient.
pub fn truncated_ips_gradient(
    policy: &SoftmaxPolicy,
    known: &[LoggedKnownSample],
    zeta: f64,
    exec: Execution,
) -> Result<(f64, PolicyGradient), EstimatorError> {
    if known.is_empty() {
        return Err(EstimatorError::EmptyKnown);
    }
    let n = known.len() as f64;
    accumulate(policy, known.len(), exec, |i| {
        let s = &known[i];
        let pass = forward_checked(policy, &s.context, s.action)?;
        let coeff = s.reward / (n * s.propensity.max(zeta));
        let pi = pass.probs[s.action];
        let dscores = log_prob_score_grad(&pass.probs, s.action, coeff * pi);
        Ok((pass, coeff * pi, dscores))
    })
}

/// Regularizer value and gradient, grouped by action over `unknown`.
pub fn regularizer_gradient<T: Logged + Sync>(
    policy: &SoftmaxPolicy,
    unknown: &[T],
    regularizer: Regularizer,
    tau: f64,
    exec: Execution,
) -> Result<(f64, PolicyGradient), EstimatorError> {
    let groups = ActionGroups::new(unknown, policy.action_count())?;
    let weights = groups.sample_weights(unknown.len());
    accumulate(policy, unknown.len(), exec, |i| {
        let s = &unknown[i];
        let a = s.action();
        let pass = forward_checked(policy, s.context(), a)?;
        let w = weights[i];
        let (pi, log_pi) = (pass.probs[a], pass.log_probs[a]);
        let p = s.propensity();
        let (value, dscores) = match regularizer {
            Regularizer::Kl => {
                let log_q = kl_floor(i, p, tau)?.ln();
                let dvalue_dpi = w * (log_pi - log_q + 1.0);
                (
                    w * pi * (log_pi - log_q),
                    log_prob_score_grad(&pass.probs, a, dvalue_dpi * pi),
                )
            }
            Regularizer::Rkl => (
                w * (-p * log_pi + p * p.ln()),
                log_prob_score_grad(&pass.probs, a, -w * p),
            ),
            Regularizer::Wce => {
                let q = p.max(tau);
                (-w * q * log_pi, log_prob_score_grad(&pass.probs, a, -w * q))
            }
        };
        Ok((pass, value, dscores))
    })
}

/// Pseudo-reward objective pieces and the gradient of the full objective.
pub fn pseudo_reward_gradient(
    policy: &SoftmaxPolicy,
    known: &[LoggedKnownSample],
    augmented: &[AugmentedSample],
    alpha: f64,
    trunc: TruncationParams,
    exec: Execution,
) -> Result<(PseudoRewardTerms, PolicyGradient), EstimatorError> {
    check_alpha(alpha)?;
    let terms = union_terms(known, augmented);
    if terms.is_empty() {
        return Err(EstimatorError::EmptyKnown);
    }
    let total = terms.len() as f64;
    let (risk, risk_grad) = accumulate(policy, terms.len(), exec, |i| {
        let t = &terms[i];
        let pass = forward_checked(policy, t.context, t.action)?;
        let coeff = t.reward / (total * t.propensity.max(trunc.zeta));
        let pi = pass.probs[t.action];
        let dscores = log_prob_score_grad(&pass.probs, t.action, coeff * pi);
        Ok((pass, coeff * pi, dscores))
    })?;
    let (regularizer, reg_grad) =
        regularizer_gradient(policy, &terms, Regularizer::Wce, trunc.tau, exec)?;
    let mut grad = risk_grad;
    grad.scale(alpha);
    grad.add_scaled(&reg_grad, 1.0 - alpha);
    Ok((
        PseudoRewardTerms {
            risk,
            regularizer,
            value: alpha * risk + (1.0 - alpha) * regularizer,
        },
        grad,
    ))
}
