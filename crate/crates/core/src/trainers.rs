//! Training loops: WCE-CRM, KL-CRM and PR-CRM, plus the linear reward
//! regressor used by PR-CRM.
//!
//! Every epoch performs one update on one minibatch from each dataset.
//! Minibatches are drawn without replacement and kept in dataset order; the
//! known and unknown batches use separate streams derived from the seed.

use std::borrow::Cow;
use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::data::{AugmentedSample, LoggedKnownSample, LoggedUnknownSample};
use crate::estimators::{
    check_alpha, pseudo_reward_gradient, regularizer_gradient, truncated_ips_gradient,
    EstimatorError, Regularizer, TruncationParams,
};
use crate::exec::Execution;
use crate::policy::{PolicyError, PolicyGradient, SoftmaxPolicy};
use crate::rng::{derive_seed, RngState};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("known-reward dataset is empty but alpha = {0} > 0")]
    EmptyKnown(f64),
    #[error("unknown-reward dataset is empty but alpha = {0} < 1")]
    EmptyUnknown(f64),
    #[error("all propensities are zero; the weighted least-squares problem is undefined")]
    ZeroPropensityMass,
    #[error("weighted normal equations are not positive definite")]
    SingularDesign,
    #[error("unknown algorithm `{0}` (expected wce, kl or pr)")]
    UnknownAlgorithm(String),
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Algorithm {
    Wce,
    Kl,
    Pr,
}

impl Algorithm {
    pub const ALL: [Algorithm; 3] = [Algorithm::Wce, Algorithm::Kl, Algorithm::Pr];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Wce => "wce",
            Algorithm::Kl => "kl",
            Algorithm::Pr => "pr",
        }
    }
}

impl std::fmt::Display for Algorithm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algorithm {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "wce" | "wce-crm" => Ok(Algorithm::Wce),
            "kl" | "kl-crm" => Ok(Algorithm::Kl),
            "pr" | "pr-crm" => Ok(Algorithm::Pr),
            _ => Err(TrainError::UnknownAlgorithm(s.to_string())),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub algorithm: Algorithm,
    pub alpha: f64,
    pub trunc: TruncationParams,
    pub epochs: usize,
    /// Known-reward minibatch size; clamped to the dataset size.
    pub batch_known: usize,
    /// Unknown-reward minibatch size; clamped to the dataset size.
    pub batch_unknown: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub exec: Execution,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::Wce,
            alpha: 0.5,
            trunc: TruncationParams::default(),
            epochs: 1000,
            batch_known: 64,
            batch_unknown: 256,
            learning_rate: 0.01,
            seed: 0,
            exec: Execution::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        check_alpha(self.alpha)?;
        TruncationParams::new(self.trunc.zeta, self.trunc.tau)?;
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        if self.epochs == 0 {
            return bad("epochs must be positive".into());
        }
        if self.batch_known == 0 || self.batch_unknown == 0 {
            return bad("batch sizes must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!(
                "learning rate {} must be positive and finite",
                self.learning_rate
            ));
        }
        Ok(())
    }
}

/// One record per epoch. Terms are evaluated on the epoch's minibatches,
/// before the update; a term whose weight is zero is not computed and is
/// recorded as NaN.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub ips_term: f64,
    pub reg_term: f64,
    pub grad_norm: f64,
    /// Wall time since training started.
    pub seconds: f64,
}

impl EpochRecord {
    /// `α · ips_term + (1 − α) · reg_term`, skipping zero-weight terms.
    pub fn objective(&self, alpha: f64) -> f64 {
        let mut v = 0.0;
        if alpha > 0.0 {
            v += alpha * self.ips_term;
        }
        if alpha < 1.0 {
            v += (1.0 - alpha) * self.reg_term;
        }
        v
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainTrace {
    pub records: Vec<EpochRecord>,
}

impl TrainTrace {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "epoch,ips_term,reg_term,grad_norm,seconds")?;
        for r in &self.records {
            writeln!(
                out,
                "{},{:.16e},{:.16e},{:.16e},{:.6}",
                r.epoch, r.ips_term, r.reg_term, r.grad_norm, r.seconds
            )?;
        }
        Ok(())
    }
}

/// Objective pieces of one update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepTerms {
    pub ips_term: f64,
    pub reg_term: f64,
}

/// `α ∇ IPS_ζ(known) + (1 − α) ∇ reg_τ(unknown)`. A term with weight zero is
/// neither evaluated nor required to have data.
pub fn update_direction(
    policy: &SoftmaxPolicy,
    known: &[LoggedKnownSample],
    unknown: &[LoggedUnknownSample],
    alpha: f64,
    regularizer: Regularizer,
    trunc: TruncationParams,
    exec: Execution,
) -> Result<(StepTerms, PolicyGradient), TrainError> {
    check_alpha(alpha)?;
    let mut direction = PolicyGradient::zeros_like(policy);
    let mut terms = StepTerms {
        ips_term: f64::NAN,
        reg_term: f64::NAN,
    };
    if alpha > 0.0 {
        if known.is_empty() {
            return Err(TrainError::EmptyKnown(alpha));
        }
        let (value, grad) = truncated_ips_gradient(policy, known, trunc.zeta, exec)?;
        terms.ips_term = value;
        direction.add_scaled(&grad, alpha);
    }
    if alpha < 1.0 {
        if unknown.is_empty() {
            return Err(TrainError::EmptyUnknown(alpha));
        }
        let (value, grad) = regularizer_gradient(policy, unknown, regularizer, trunc.tau, exec)?;
        terms.reg_term = value;
        direction.add_scaled(&grad, 1.0 - alpha);
    }
    Ok((terms, direction))
}

/// Draws `size` items without replacement, in dataset order. The full
/// dataset is borrowed rather than copied.
fn minibatch<'a, T: Clone>(items: &'a [T], size: usize, rng: &mut RngState) -> Cow<'a, [T]> {
    if size >= items.len() {
        return Cow::Borrowed(items);
    }
    Cow::Owned(
        rng.sample_indices(items.len(), size)
            .into_iter()
            .map(|i| items[i].clone())
            .collect(),
    )
}

const KNOWN_STREAM: u64 = 1;
const UNKNOWN_STREAM: u64 = 2;

fn check_inputs(known_len: usize, unknown_len: usize, cfg: &TrainConfig) -> Result<(), TrainError> {
    cfg.validate()?;
    if cfg.alpha > 0.0 && known_len == 0 {
        return Err(TrainError::EmptyKnown(cfg.alpha));
    }
    if cfg.alpha < 1.0 && unknown_len == 0 {
        return Err(TrainError::EmptyUnknown(cfg.alpha));
    }
    Ok(())
}

fn train_regularized(
    known: &[LoggedKnownSample],
    unknown: &[LoggedUnknownSample],
    cfg: &TrainConfig,
    init: SoftmaxPolicy,
    regularizer: Regularizer,
) -> Result<(SoftmaxPolicy, TrainTrace), TrainError> {
    check_inputs(known.len(), unknown.len(), cfg)?;
    let mut known_rng = RngState::new(derive_seed(cfg.seed, KNOWN_STREAM));
    let mut unknown_rng = RngState::new(derive_seed(cfg.seed, UNKNOWN_STREAM));
    let mut policy = init;
    let mut trace = TrainTrace::default();
    let start = Instant::now();
    for epoch in 0..cfg.epochs {
        let kb = minibatch(known, cfg.batch_known, &mut known_rng);
        let ub = minibatch(unknown, cfg.batch_unknown, &mut unknown_rng);
        let (terms, direction) = update_direction(
            &policy,
            &kb,
            &ub,
            cfg.alpha,
            regularizer,
            cfg.trunc,
            cfg.exec,
        )?;
        policy.apply_step(&direction, cfg.learning_rate);
        trace.records.push(EpochRecord {
            epoch,
            ips_term: terms.ips_term,
            reg_term: terms.reg_term,
            grad_norm: direction.norm(),
            seconds: start.elapsed().as_secs_f64(),
        });
    }
    Ok((policy, trace))
}

/// WCE-CRM: truncated IPS on known rewards plus the weighted cross-entropy
/// regularizer on reward-free samples.
pub fn train_wce_crm(
    known: &[LoggedKnownSample],
    unknown: &[LoggedUnknownSample],
    cfg: &TrainConfig,
    init: SoftmaxPolicy,
) -> Result<(SoftmaxPolicy, TrainTrace), TrainError> {
    train_regularized(known, unknown, cfg, init, Regularizer::Wce)
}

/// KL-CRM: as WCE-CRM with the truncated KL regularizer.
pub fn train_kl_crm(
    known: &[LoggedKnownSample],
    unknown: &[LoggedUnknownSample],
    cfg: &TrainConfig,
    init: SoftmaxPolicy,
) -> Result<(SoftmaxPolicy, TrainTrace), TrainError> {
    train_regularized(known, unknown, cfg, init, Regularizer::Kl)
}

/// PR-CRM: fits the reward regressor on `known`, labels `unknown` with
/// clamped pseudo-rewards and minimizes the pseudo-reward objective.
pub fn train_pr_crm(
    known: &[LoggedKnownSample],
    unknown: &[LoggedUnknownSample],
    cfg: &TrainConfig,
    init: SoftmaxPolicy,
) -> Result<(SoftmaxPolicy, TrainTrace), TrainError> {
    check_inputs(known.len(), unknown.len(), cfg)?;
    let augmented = if known.is_empty() {
        // Only reachable with alpha = 0, where rewards carry no weight.
        unknown
            .iter()
            .map(|s| AugmentedSample {
                sample: s.clone(),
                pseudo_reward: 0.0,
            })
            .collect()
    } else {
        let regressor = fit_reward_regressor(known, init.action_count())?;
        predict_pseudo_rewards(&regressor, unknown)?
    };
    train_pr_with_augmented(known, &augmented, cfg, init)
}

/// The policy phase of PR-CRM on an already augmented reward-free set.
pub fn train_pr_with_augmented(
    known: &[LoggedKnownSample],
    augmented: &[AugmentedSample],
    cfg: &TrainConfig,
    init: SoftmaxPolicy,
) -> Result<(SoftmaxPolicy, TrainTrace), TrainError> {
    cfg.validate()?;
    if cfg.alpha > 0.0 && known.is_empty() {
        return Err(TrainError::EmptyKnown(cfg.alpha));
    }
    if known.is_empty() && augmented.is_empty() {
        return Err(TrainError::EmptyUnknown(cfg.alpha));
    }
    let mut known_rng = RngState::new(derive_seed(cfg.seed, KNOWN_STREAM));
    let mut unknown_rng = RngState::new(derive_seed(cfg.seed, UNKNOWN_STREAM));
    let mut policy = init;
    let mut trace = TrainTrace::default();
    let start = Instant::now();
    for epoch in 0..cfg.epochs {
        let kb = minibatch(known, cfg.batch_known, &mut known_rng);
        let ub = minibatch(augmented, cfg.batch_unknown, &mut unknown_rng);
        let (terms, direction) =
            pseudo_reward_gradient(&policy, &kb, &ub, cfg.alpha, cfg.trunc, cfg.exec)?;
        policy.apply_step(&direction, cfg.learning_rate);
        trace.records.push(EpochRecord {
            epoch,
            ips_term: terms.risk,
            reg_term: terms.regularizer,
            grad_norm: direction.norm(),
            seconds: start.elapsed().as_secs_f64(),
        });
    }
    Ok((policy, trace))
}

/// Runs the trainer selected by `cfg.algorithm`.
pub fn train(
    known: &[LoggedKnownSample],
    unknown: &[LoggedUnknownSample],
    cfg: &TrainConfig,
    init: SoftmaxPolicy,
) -> Result<(SoftmaxPolicy, TrainTrace), TrainError> {
    match cfg.algorithm {
        Algorithm::Wce => train_wce_crm(known, unknown, cfg, init),
        Algorithm::Kl => train_kl_crm(known, unknown, cfg, init),
        Algorithm::Pr => train_pr_crm(known, unknown, cfg, init),
    }
}

/// Linear reward model over `φ(x, a) = x ⊕ one_hot(a) ⊕ 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct RewardRegressor {
    dim: usize,
    actions: usize,
    weights: Vec<f64>,
}

pub const RIDGE: f64 = 1e-8;
const REFINEMENT_STEPS: usize = 2;

impl RewardRegressor {
    pub fn from_weights(dim: usize, actions: usize, weights: Vec<f64>) -> Result<Self, TrainError> {
        if weights.len() != dim + actions + 1 {
            return Err(TrainError::InvalidConfig(format!(
                "regressor needs {} weights, got {}",
                dim + actions + 1,
                weights.len()
            )));
        }
        Ok(Self {
            dim,
            actions,
            weights,
        })
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn feature_dim(&self) -> usize {
        self.weights.len()
    }

    pub fn features(&self, x: &[f64], a: usize) -> Result<Vec<f64>, TrainError> {
        feature_map(x, a, self.dim, self.actions)
    }

    /// Unclamped prediction `⟨w, φ(x, a)⟩`.
    pub fn predict_raw(&self, x: &[f64], a: usize) -> Result<f64, TrainError> {
        if x.len() != self.dim {
            return Err(PolicyError::DimensionMismatch {
                expected: self.dim,
                actual: x.len(),
            }
            .into());
        }
        if a >= self.actions {
            return Err(PolicyError::ActionOutOfRange {
                action: a,
                count: self.actions,
            }
            .into());
        }
        let linear: f64 = x.iter().zip(&self.weights).map(|(v, w)| v * w).sum();
        Ok(linear + self.weights[self.dim + a] + self.weights[self.dim + self.actions])
    }

    /// Prediction clamped to `[-1, 0]`.
    pub fn predict(&self, x: &[f64], a: usize) -> Result<f64, TrainError> {
        Ok(self.predict_raw(x, a)?.clamp(-1.0, 0.0))
    }
}

fn feature_map(x: &[f64], a: usize, dim: usize, actions: usize) -> Result<Vec<f64>, TrainError> {
    if x.len() != dim {
        return Err(PolicyError::DimensionMismatch {
            expected: dim,
            actual: x.len(),
        }
        .into());
    }
    if a >= actions {
        return Err(PolicyError::ActionOutOfRange {
            action: a,
            count: actions,
        }
        .into());
    }
    let mut phi = Vec::with_capacity(dim + actions + 1);
    phi.extend_from_slice(x);
    phi.extend((0..actions).map(|j| if j == a { 1.0 } else { 0.0 }));
    phi.push(1.0);
    Ok(phi)
}

/// Minimizes `(1/P) Σ p_i (r_i − ⟨w, φ(x_i, a_i)⟩)² + λ‖w‖²` with
/// `P = Σ p_i`, by Cholesky on the weighted normal equations.
pub fn fit_reward_regressor(
    known: &[LoggedKnownSample],
    action_count: usize,
) -> Result<RewardRegressor, TrainError> {
    let first = known.first().ok_or(TrainError::EmptyKnown(1.0))?;
    let dim = first.context.len();
    let total: f64 = known.iter().map(|s| s.propensity).sum();
    if !(total > 0.0) {
        return Err(TrainError::ZeroPropensityMass);
    }
    let p = dim + action_count + 1;
    let mut gram = DMatrix::<f64>::zeros(p, p);
    let mut rhs = DVector::<f64>::zeros(p);
    for s in known {
        let phi = DVector::from_vec(feature_map(&s.context, s.action, dim, action_count)?);
        let w = s.propensity / total;
        gram.ger(w, &phi, &phi, 1.0);
        rhs.axpy(w * s.reward, &phi, 1.0);
    }
    for i in 0..p {
        gram[(i, i)] += RIDGE;
    }
    let chol = gram.clone().cholesky().ok_or(TrainError::SingularDesign)?;
    let mut solution = chol.solve(&rhs);
    // Iterative refinement against the unridged system removes the ridge
    // shrinkage on the well-determined directions.
    for i in 0..p {
        gram[(i, i)] -= RIDGE;
    }
    for _ in 0..REFINEMENT_STEPS {
        let residual = &rhs - &gram * &solution;
        solution += chol.solve(&residual);
    }
    RewardRegressor::from_weights(dim, action_count, solution.iter().copied().collect())
}

/// Labels each reward-free sample with its clamped predicted reward.
pub fn predict_pseudo_rewards(
    regressor: &RewardRegressor,
    unknown: &[LoggedUnknownSample],
) -> Result<Vec<AugmentedSample>, TrainError> {
    unknown
        .iter()
        .map(|s| {
            Ok(AugmentedSample {
                pseudo_reward: regressor.predict(&s.context, s.action)?,
                sample: s.clone(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimators::{kl_regularizer, wce_regularizer};
    use crate::policy::{sample_from, Dense};

    /// Linear env over `d` uniform contexts; logging is context-independent.
    fn synthetic_logged(
        seed: u64,
        n: usize,
        d: usize,
        k: usize,
    ) -> (Vec<LoggedKnownSample>, Vec<f64>) {
        let mut rng = RngState::new(seed);
        let logging: Vec<f64> = {
            let raw: Vec<f64> = (0..k).map(|i| 1.0 + i as f64).collect();
            let t: f64 = raw.iter().sum();
            raw.into_iter().map(|v| v / t).collect()
        };
        let samples = (0..n)
            .map(|_| {
                let context: Vec<f64> = (0..d).map(|_| rng.standard_normal()).collect();
                let action = sample_from(&logging, &mut rng);
                let best = if context[0] > 0.0 { 0 } else { k - 1 };
                LoggedKnownSample {
                    context,
                    action,
                    propensity: logging[action],
                    reward: if action == best { -1.0 } else { 0.0 },
                }
            })
            .collect();
        (samples, logging)
    }

    fn strip(known: &[LoggedKnownSample]) -> Vec<LoggedUnknownSample> {
        known
            .iter()
            .map(LoggedKnownSample::without_reward)
            .collect()
    }

    fn init_policy(seed: u64, d: usize, k: usize) -> SoftmaxPolicy {
        SoftmaxPolicy::new(d, &[4], k, &mut RngState::new(seed)).unwrap()
    }

    fn cfg(alpha: f64) -> TrainConfig {
        TrainConfig {
            alpha,
            epochs: 40,
            batch_known: 16,
            batch_unknown: 32,
            learning_rate: 0.1,
            seed: 9,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn algorithm_names_parse() {
        for a in Algorithm::ALL {
            assert_eq!(a.name().parse::<Algorithm>().unwrap(), a);
        }
        assert!("sgd".parse::<Algorithm>().is_err());
    }

    #[test]
    fn direction_is_linear_in_alpha() {
        let (known, _) = synthetic_logged(1, 50, 3, 4);
        let unknown = strip(&synthetic_logged(2, 80, 3, 4).0);
        let policy = init_policy(3, 3, 4);
        for reg in [Regularizer::Wce, Regularizer::Kl, Regularizer::Rkl] {
            let t = TruncationParams::default();
            let e = Execution::Sequential;
            let (_, g1) = update_direction(&policy, &known, &unknown, 1.0, reg, t, e).unwrap();
            let (_, g0) = update_direction(&policy, &known, &unknown, 0.0, reg, t, e).unwrap();
            for alpha in [0.1, 0.5, 0.77] {
                let (_, ga) =
                    update_direction(&policy, &known, &unknown, alpha, reg, t, e).unwrap();
                for ((a, b1), b0) in ga.flat().iter().zip(g1.flat()).zip(g0.flat()) {
                    assert!((a - (alpha * b1 + (1.0 - alpha) * b0)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn empty_dataset_errors() {
        let (known, _) = synthetic_logged(1, 10, 2, 3);
        let init = init_policy(1, 2, 3);
        assert!(matches!(
            train_wce_crm(&[], &strip(&known), &cfg(0.5), init.clone()),
            Err(TrainError::EmptyKnown(_))
        ));
        assert!(matches!(
            train_wce_crm(&known, &[], &cfg(0.5), init.clone()),
            Err(TrainError::EmptyUnknown(_))
        ));
        assert!(train_wce_crm(&known, &[], &cfg(1.0), init.clone()).is_ok());
        assert!(train_wce_crm(&[], &strip(&known), &cfg(0.0), init.clone()).is_ok());
        assert!(matches!(
            train_pr_crm(&[], &strip(&known), &cfg(0.5), init),
            Err(TrainError::EmptyKnown(_))
        ));
    }

    #[test]
    fn runs_exactly_the_configured_epochs() {
        let (known, _) = synthetic_logged(1, 30, 2, 3);
        let unknown = strip(&known);
        for algorithm in Algorithm::ALL {
            let c = TrainConfig {
                algorithm,
                ..cfg(0.5)
            };
            let (_, trace) = train(&known, &unknown, &c, init_policy(2, 2, 3)).unwrap();
            assert_eq!(trace.len(), c.epochs);
        }
    }

    #[test]
    fn alpha_one_ignores_the_regularizer() {
        let (known, _) = synthetic_logged(4, 60, 3, 3);
        let unknown = strip(&synthetic_logged(5, 100, 3, 3).0);
        let init = init_policy(6, 3, 3);
        let (wce, _) = train_wce_crm(&known, &unknown, &cfg(1.0), init.clone()).unwrap();
        let (kl, _) = train_kl_crm(&known, &unknown, &cfg(1.0), init.clone()).unwrap();
        let (ips_only, _) = train_wce_crm(&known, &[], &cfg(1.0), init).unwrap();
        assert_eq!(wce, kl);
        assert_eq!(wce, ips_only);
    }

    #[test]
    fn trainers_are_seed_deterministic() {
        let (known, _) = synthetic_logged(7, 60, 3, 3);
        let unknown = strip(&synthetic_logged(8, 100, 3, 3).0);
        for algorithm in Algorithm::ALL {
            let c = TrainConfig {
                algorithm,
                ..cfg(0.6)
            };
            let (a, _) = train(&known, &unknown, &c, init_policy(1, 3, 3)).unwrap();
            let (b, _) = train(&known, &unknown, &c, init_policy(1, 3, 3)).unwrap();
            assert_eq!(a.to_checkpoint_string(), b.to_checkpoint_string());
            let seq = TrainConfig {
                exec: Execution::Sequential,
                ..c
            };
            let (s, _) = train(&known, &unknown, &seq, init_policy(1, 3, 3)).unwrap();
            assert_eq!(a, s);
        }
    }

    #[test]
    fn single_step_matches_hand_arithmetic() {
        // d = 1, one hidden unit, two actions.
        let (w1, b1) = (0.7, 0.1);
        let (v, c) = ([0.4, -0.3], [0.05, -0.02]);
        let hidden = Dense {
            outputs: 1,
            inputs: 1,
            weights: vec![w1],
            bias: vec![b1],
        };
        let out = Dense {
            outputs: 2,
            inputs: 1,
            weights: v.to_vec(),
            bias: c.to_vec(),
        };
        let policy = SoftmaxPolicy::from_layers(vec![hidden, out]).unwrap();
        let (x1, a1, p1, r1) = (1.5, 0usize, 0.4, -1.0);
        let (x2, a2, p2) = (0.8, 1usize, 0.6);
        let known = vec![LoggedKnownSample {
            context: vec![x1],
            action: a1,
            propensity: p1,
            reward: r1,
        }];
        let unknown = vec![LoggedUnknownSample {
            context: vec![x2],
            action: a2,
            propensity: p2,
        }];
        let alpha = 0.3;
        let c_cfg = TrainConfig {
            alpha,
            epochs: 1,
            batch_known: 1,
            batch_unknown: 1,
            learning_rate: 1.0,
            ..TrainConfig::default()
        };
        let (trained, _) = train_wce_crm(&known, &unknown, &c_cfg, policy).unwrap();

        // Manual forward/backward for one sample with dL/ds = g.
        let grads = |x: f64, g: [f64; 2]| {
            let h = (w1 * x + b1).max(0.0);
            let dh = if w1 * x + b1 > 0.0 {
                g[0] * v[0] + g[1] * v[1]
            } else {
                0.0
            };
            // [w1, b1, v0, v1, c0, c1]
            [dh * x, dh, g[0] * h, g[1] * h, g[0], g[1]]
        };
        let probs = |x: f64| {
            let h = (w1 * x + b1).max(0.0);
            let s = [v[0] * h + c[0], v[1] * h + c[1]];
            let m = s[0].max(s[1]);
            let e = [(s[0] - m).exp(), (s[1] - m).exp()];
            [e[0] / (e[0] + e[1]), e[1] / (e[0] + e[1])]
        };
        let pi1 = probs(x1);
        let coeff = r1 / p1 * pi1[a1];
        let g_ips = grads(x1, [coeff * (1.0 - pi1[0]), coeff * (0.0 - pi1[1])]);
        let pi2 = probs(x2);
        let g_wce = grads(x2, [-p2 * (0.0 - pi2[0]), -p2 * (1.0 - pi2[1])]);
        let before = [w1, b1, v[0], v[1], c[0], c[1]];
        let after = trained.params_flat();
        for i in 0..6 {
            let expected = before[i] - (alpha * g_ips[i] + (1.0 - alpha) * g_wce[i]);
            assert!(
                (after[i] - expected).abs() < 1e-10,
                "param {i}: {} vs {expected}",
                after[i]
            );
        }
    }

    fn mean_tv(policy: &SoftmaxPolicy, contexts: &[Vec<f64>], logging: &[f64]) -> f64 {
        contexts
            .iter()
            .map(|x| {
                let p = policy.probs(x).unwrap();
                0.5 * p
                    .iter()
                    .zip(logging)
                    .map(|(a, b)| (a - b).abs())
                    .sum::<f64>()
            })
            .sum::<f64>()
            / contexts.len() as f64
    }

    #[test]
    fn pure_wce_approaches_the_logging_policy() {
        let (known, logging) = synthetic_logged(11, 2000, 3, 4);
        let unknown = strip(&known);
        let held_out: Vec<Vec<f64>> = synthetic_logged(12, 200, 3, 4)
            .0
            .into_iter()
            .map(|s| s.context)
            .collect();
        let mut policy = SoftmaxPolicy::new(3, &[], 4, &mut RngState::new(2)).unwrap();
        let mut prev = mean_tv(&policy, &held_out, &logging);
        let c = TrainConfig {
            alpha: 0.0,
            epochs: 20,
            batch_unknown: usize::MAX,
            learning_rate: 0.2,
            ..TrainConfig::default()
        };
        for _ in 0..5 {
            policy = train_wce_crm(&[], &unknown, &c, policy).unwrap().0;
            let tv = mean_tv(&policy, &held_out, &logging);
            assert!(tv < prev, "{tv} !< {prev}");
            prev = tv;
        }
        assert!(prev < 0.05, "{prev}");
    }

    #[test]
    fn pure_kl_training_descends() {
        let (known, _) = synthetic_logged(13, 300, 3, 3);
        let unknown = strip(&known);
        let init = init_policy(3, 3, 3);
        let before = kl_regularizer(&init, &unknown, 0.001).unwrap();
        let c = TrainConfig {
            epochs: 100,
            ..cfg(0.0)
        };
        let (trained, _) = train_kl_crm(&[], &unknown, &c, init).unwrap();
        assert!(kl_regularizer(&trained, &unknown, 0.001).unwrap() <= before);
    }

    #[test]
    fn pr_without_unknown_matches_wce_on_known_only() {
        let (known, _) = synthetic_logged(14, 40, 3, 3);
        let stripped = strip(&known);
        let c = TrainConfig {
            epochs: 25,
            batch_known: usize::MAX,
            batch_unknown: usize::MAX,
            ..cfg(0.4)
        };
        let init = init_policy(5, 3, 3);
        let (pr, _) = train_pr_with_augmented(&known, &[], &c, init.clone()).unwrap();
        let (wce, _) = train_wce_crm(&known, &stripped, &c, init).unwrap();
        for (a, b) in pr.params_flat().iter().zip(wce.params_flat()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn pr_objective_decreases() {
        let (known, _) = synthetic_logged(15, 100, 3, 3);
        let unknown = strip(&synthetic_logged(16, 400, 3, 3).0);
        let c = TrainConfig {
            algorithm: Algorithm::Pr,
            epochs: 200,
            batch_known: usize::MAX,
            batch_unknown: usize::MAX,
            ..cfg(0.7)
        };
        let (_, trace) = train(&known, &unknown, &c, init_policy(2, 3, 3)).unwrap();
        let first = trace.records.first().unwrap().objective(c.alpha);
        let last = trace.records.last().unwrap().objective(c.alpha);
        assert!(last < first, "{last} !< {first}");
    }

    #[test]
    fn wce_regularizer_descends_under_alpha_zero() {
        let (known, _) = synthetic_logged(17, 200, 2, 3);
        let unknown = strip(&known);
        let init = init_policy(8, 2, 3);
        let before = wce_regularizer(&init, &unknown, 0.001).unwrap();
        let (trained, _) = train_wce_crm(
            &[],
            &unknown,
            &TrainConfig {
                epochs: 100,
                ..cfg(0.0)
            },
            init,
        )
        .unwrap();
        assert!(wce_regularizer(&trained, &unknown, 0.001).unwrap() < before);
    }

    #[test]
    fn trace_csv_header() {
        let (known, _) = synthetic_logged(1, 10, 2, 3);
        let (_, trace) = train_wce_crm(
            &known,
            &strip(&known),
            &TrainConfig {
                epochs: 2,
                ..cfg(0.5)
            },
            init_policy(1, 2, 3),
        )
        .unwrap();
        let mut buf = Vec::new();
        trace.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("epoch,ips_term,reg_term,grad_norm,seconds\n0,"));
        assert_eq!(text.lines().count(), 3);
    }

    // Reward regressor.

    fn regression_data(seed: u64, n: usize, d: usize, k: usize) -> Vec<LoggedKnownSample> {
        let mut rng = RngState::new(seed);
        (0..n)
            .map(|_| LoggedKnownSample {
                context: (0..d).map(|_| rng.standard_normal()).collect(),
                action: rng.below(k),
                propensity: rng.uniform_range(0.05, 1.0),
                reward: -rng.uniform(),
            })
            .collect()
    }

    fn weighted_gradient(reg: &RewardRegressor, data: &[LoggedKnownSample]) -> Vec<f64> {
        let total: f64 = data.iter().map(|s| s.propensity).sum();
        let mut g = vec![0.0; reg.feature_dim()];
        for s in data {
            let phi = reg.features(&s.context, s.action).unwrap();
            let resid = reg.predict_raw(&s.context, s.action).unwrap() - s.reward;
            for (gi, f) in g.iter_mut().zip(phi) {
                *gi += 2.0 * s.propensity / total * resid * f;
            }
        }
        g
    }

    #[test]
    fn constant_rewards_are_fitted_exactly() {
        let mut data = regression_data(1, 50, 3, 4);
        for s in &mut data {
            s.reward = -1.0;
        }
        let reg = fit_reward_regressor(&data, 4).unwrap();
        for s in &data {
            assert!((reg.predict_raw(&s.context, s.action).unwrap() + 1.0).abs() < 1e-8);
        }
        let unknown = strip(&data);
        assert!(predict_pseudo_rewards(&reg, &unknown)
            .unwrap()
            .iter()
            .all(|a| (a.pseudo_reward + 1.0).abs() < 1e-8));
    }

    #[test]
    fn regressor_is_first_order_optimal() {
        let data = regression_data(2, 300, 4, 3);
        let reg = fit_reward_regressor(&data, 3).unwrap();
        let g = weighted_gradient(&reg, &data);
        let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(norm < 1e-6, "{norm}");
    }

    #[test]
    fn regressor_matches_gradient_descent() {
        let data = regression_data(3, 200, 3, 3);
        let reg = fit_reward_regressor(&data, 3).unwrap();
        let mut gd = RewardRegressor::from_weights(3, 3, vec![0.0; 7]).unwrap();
        for _ in 0..20_000 {
            let g = weighted_gradient(&gd, &data);
            let w: Vec<f64> = gd
                .weights()
                .iter()
                .zip(&g)
                .map(|(w, g)| w - 0.2 * g)
                .collect();
            gd = RewardRegressor::from_weights(3, 3, w).unwrap();
        }
        for s in &data {
            let a = reg.predict_raw(&s.context, s.action).unwrap();
            let b = gd.predict_raw(&s.context, s.action).unwrap();
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn rank_deficient_design_is_solvable() {
        // Every sample uses the same action and a constant context.
        let data: Vec<LoggedKnownSample> = (0..10)
            .map(|i| LoggedKnownSample {
                context: vec![1.0, 1.0],
                action: 0,
                propensity: 0.5,
                reward: -(i as f64) / 10.0,
            })
            .collect();
        let reg = fit_reward_regressor(&data, 2).unwrap();
        assert!((reg.predict_raw(&[1.0, 1.0], 0).unwrap() + 0.45).abs() < 1e-6);
    }

    #[test]
    fn zero_propensity_mass_is_an_error() {
        let mut data = regression_data(4, 5, 2, 2);
        for s in &mut data {
            s.propensity = 0.0;
        }
        assert!(matches!(
            fit_reward_regressor(&data, 2),
            Err(TrainError::ZeroPropensityMass)
        ));
    }

    #[test]
    fn pseudo_rewards_are_clamped() {
        // Bias-only regressors predicting 0.3 and -0.4.
        let unknown = vec![LoggedUnknownSample {
            context: vec![0.0],
            action: 0,
            propensity: 0.5,
        }];
        let high = RewardRegressor::from_weights(1, 1, vec![0.0, 0.0, 0.3]).unwrap();
        assert_eq!(
            predict_pseudo_rewards(&high, &unknown).unwrap()[0].pseudo_reward,
            0.0
        );
        let mid = RewardRegressor::from_weights(1, 1, vec![0.0, 0.0, -0.4]).unwrap();
        assert_eq!(
            predict_pseudo_rewards(&mid, &unknown).unwrap()[0].pseudo_reward,
            -0.4
        );
    }
}
