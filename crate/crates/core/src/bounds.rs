//! Closed-form variance and risk bounds, and exact oracles on finite
//! environments.
//!
//! A [`DiscreteEnvironment`] lists a context distribution, a logging table, a
//! target table and a reward table. Everything the bounds talk about (true
//! risks, divergences, the variance of the importance-weighted reward) can be
//! computed on it exactly by enumeration, which is how the bounds are checked.
//!
//! Conventions: `0 · log 0 = 0` and `0² / q = 0`.

use std::io::{Read, Write};

use statrs::distribution::{Beta, ContinuousCDF};
use thiserror::Error;

use crate::data::LoggedKnownSample;
use crate::estimators::{ips_risk, EstimatorError};
use crate::exec::{map_ordered, Execution};
use crate::policy::{PolicyError, SoftmaxPolicy};
use crate::rng::{derive_seed, RngState};

#[derive(Debug, Error)]
pub enum BoundsError {
    #[error("invalid environment: {0}")]
    InvalidEnvironment(String),
    #[error("target puts mass on context {context}, action {action} where logging has none")]
    AbsoluteContinuity { context: usize, action: usize },
    #[error("invalid bound input: {0}")]
    InvalidInput(String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

const ROW_TOLERANCE: f64 = 1e-12;

/// Which conditional table of an environment to use.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TableKind {
    Target,
    Logging,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteEnvironment {
    context_probs: Vec<f64>,
    logging: Vec<Vec<f64>>,
    target: Vec<Vec<f64>>,
    reward: Vec<Vec<f64>>,
}

fn check_distribution(row: &[f64], what: &str) -> Result<(), BoundsError> {
    if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(BoundsError::InvalidEnvironment(format!(
            "{what} has a negative or non-finite entry"
        )));
    }
    let total: f64 = row.iter().sum();
    if (total - 1.0).abs() > ROW_TOLERANCE {
        return Err(BoundsError::InvalidEnvironment(format!(
            "{what} sums to {total}"
        )));
    }
    Ok(())
}

fn normalized(mut row: Vec<f64>) -> Vec<f64> {
    let total: f64 = row.iter().sum();
    for v in &mut row {
        *v /= total;
    }
    row
}

impl DiscreteEnvironment {
    pub fn new(
        context_probs: Vec<f64>,
        logging: Vec<Vec<f64>>,
        target: Vec<Vec<f64>>,
        reward: Vec<Vec<f64>>,
    ) -> Result<Self, BoundsError> {
        let contexts = context_probs.len();
        if contexts == 0 {
            return Err(BoundsError::InvalidEnvironment("no contexts".into()));
        }
        check_distribution(&context_probs, "context distribution")?;
        let actions = logging.first().map_or(0, Vec::len);
        if actions == 0 {
            return Err(BoundsError::InvalidEnvironment("no actions".into()));
        }
        for (name, table) in [
            ("logging", &logging),
            ("target", &target),
            ("reward", &reward),
        ] {
            if table.len() != contexts || table.iter().any(|r| r.len() != actions) {
                return Err(BoundsError::InvalidEnvironment(format!(
                    "{name} table must be {contexts} x {actions}"
                )));
            }
        }
        for x in 0..contexts {
            check_distribution(&logging[x], &format!("logging row {x}"))?;
            check_distribution(&target[x], &format!("target row {x}"))?;
            if reward[x].iter().any(|r| !r.is_finite()) {
                return Err(BoundsError::InvalidEnvironment(format!(
                    "reward row {x} is not finite"
                )));
            }
            for a in 0..actions {
                if target[x][a] > 0.0 && logging[x][a] <= 0.0 {
                    return Err(BoundsError::AbsoluteContinuity {
                        context: x,
                        action: a,
                    });
                }
            }
        }
        Ok(Self {
            context_probs,
            logging,
            target,
            reward,
        })
    }

    /// Random environment with strictly positive tables. Rows are
    /// `exp(spread · N(0,1))` normalized; rewards are uniform on
    /// `[reward_min, reward_max]`.
    pub fn random(
        rng: &mut RngState,
        contexts: usize,
        actions: usize,
        spread: f64,
        reward_min: f64,
        reward_max: f64,
    ) -> Self {
        let mut row = |len: usize| {
            normalized(
                (0..len)
                    .map(|_| (spread * rng.standard_normal()).exp())
                    .collect(),
            )
        };
        let context_probs = row(contexts);
        let logging = (0..contexts).map(|_| row(actions)).collect();
        let target = (0..contexts).map(|_| row(actions)).collect();
        let reward = (0..contexts)
            .map(|_| {
                (0..actions)
                    .map(|_| rng.uniform_range(reward_min, reward_max))
                    .collect()
            })
            .collect();
        Self::new(context_probs, logging, target, reward).expect("random tables are valid")
    }

    pub fn contexts(&self) -> usize {
        self.context_probs.len()
    }

    pub fn actions(&self) -> usize {
        self.logging[0].len()
    }

    pub fn context_probs(&self) -> &[f64] {
        &self.context_probs
    }

    pub fn table(&self, kind: TableKind) -> &[Vec<f64>] {
        match kind {
            TableKind::Target => &self.target,
            TableKind::Logging => &self.logging,
        }
    }

    pub fn reward(&self) -> &[Vec<f64>] {
        &self.reward
    }

    /// Copy of the environment with another target table.
    pub fn with_target(&self, target: Vec<Vec<f64>>) -> Result<Self, BoundsError> {
        Self::new(
            self.context_probs.clone(),
            self.logging.clone(),
            target,
            self.reward.clone(),
        )
    }

    /// Copy with every reward shifted by `offset`.
    pub fn with_reward_offset(&self, offset: f64) -> Self {
        let mut env = self.clone();
        for row in &mut env.reward {
            for r in row {
                *r += offset;
            }
        }
        env
    }

    /// `(min, max)` over the reward table.
    pub fn reward_range(&self) -> (f64, f64) {
        self.reward
            .iter()
            .flatten()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| {
                (lo.min(*r), hi.max(*r))
            })
    }

    /// `sup π_θ / π_0` over pairs reachable under the logging distribution.
    pub fn max_weight(&self) -> f64 {
        let mut w_m: f64 = 0.0;
        for x in 0..self.contexts() {
            if self.context_probs[x] <= 0.0 {
                continue;
            }
            for a in 0..self.actions() {
                if self.logging[x][a] > 0.0 {
                    w_m = w_m.max(self.target[x][a] / self.logging[x][a]);
                }
            }
        }
        w_m
    }

    /// Contexts are presented to policies as one-hot vectors.
    pub fn one_hot(&self, x: usize) -> Vec<f64> {
        let mut v = vec![0.0; self.contexts()];
        v[x] = 1.0;
        v
    }

    /// A softmax policy over one-hot contexts reproducing a table (which must
    /// be strictly positive).
    pub fn table_policy(&self, kind: TableKind) -> Result<SoftmaxPolicy, BoundsError> {
        Ok(SoftmaxPolicy::from_table(self.table(kind))?)
    }

    /// Every possible single logged sample under `P_X ⊗ π_0` with its
    /// probability.
    pub fn enumerate_logged(&self) -> Vec<(f64, LoggedKnownSample)> {
        let mut out = Vec::new();
        for x in 0..self.contexts() {
            for a in 0..self.actions() {
                let mass = self.context_probs[x] * self.logging[x][a];
                if mass > 0.0 {
                    out.push((
                        mass,
                        LoggedKnownSample {
                            context: self.one_hot(x),
                            action: a,
                            propensity: self.logging[x][a],
                            reward: self.reward[x][a],
                        },
                    ));
                }
            }
        }
        out
    }

    /// `n` i.i.d. logged samples from `P_X ⊗ π_0`.
    pub fn sample_logged(&self, n: usize, rng: &mut RngState) -> Vec<LoggedKnownSample> {
        (0..n)
            .map(|_| {
                let x = crate::policy::sample_from(&self.context_probs, rng);
                let a = crate::policy::sample_from(&self.logging[x], rng);
                LoggedKnownSample {
                    context: self.one_hot(x),
                    action: a,
                    propensity: self.logging[x][a],
                    reward: self.reward[x][a],
                }
            })
            .collect()
    }

    /// Reads the environment file format:
    ///
    /// ```text
    /// context_probs,<p_1>,...,<p_X>
    /// logging,<x>,<π_0(a_1|x)>,...,<π_0(a_k|x)>
    /// target,<x>,...
    /// reward,<x>,...
    /// ```
    ///
    /// One `logging`, `target` and `reward` row per context, in any order.
    /// Lines starting with `#` are ignored.
    pub fn read<R: Read>(input: R) -> Result<Self, BoundsError> {
        let mut r = csv::ReaderBuilder::new()
            .has_headers(false)
            .flexible(true)
            .comment(Some(b'#'))
            .from_reader(input);
        let mut context_probs = None;
        let mut tables: [Vec<Option<Vec<f64>>>; 3] = Default::default();
        for record in r.records() {
            let record = record?;
            let line = record.position().map_or(0, |p| p.line() as usize);
            let err = |message: String| BoundsError::Parse { line, message };
            let parse = |s: &str| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|_| err(format!("`{s}` is not a number")))
            };
            let key = record.get(0).unwrap_or("").trim();
            if key == "context_probs" {
                context_probs = Some(
                    record
                        .iter()
                        .skip(1)
                        .map(parse)
                        .collect::<Result<Vec<_>, _>>()?,
                );
                continue;
            }
            let slot = match key {
                "logging" => 0,
                "target" => 1,
                "reward" => 2,
                "" => continue,
                other => return Err(err(format!("unknown row kind `{other}`"))),
            };
            let x: usize = record
                .get(1)
                .and_then(|s| s.trim().parse().ok())
                .ok_or_else(|| err("missing context index".into()))?;
            let values = record
                .iter()
                .skip(2)
                .map(parse)
                .collect::<Result<Vec<_>, _>>()?;
            let table = &mut tables[slot];
            if table.len() <= x {
                table.resize(x + 1, None);
            }
            if table[x].replace(values).is_some() {
                return Err(err(format!("duplicate {key} row for context {x}")));
            }
        }
        let context_probs = context_probs
            .ok_or_else(|| BoundsError::InvalidEnvironment("missing context_probs row".into()))?;
        let [logging, target, reward] = tables.map(|t| t.into_iter().collect::<Option<Vec<_>>>());
        let missing = || {
            BoundsError::InvalidEnvironment(
                "every context needs logging, target and reward rows".into(),
            )
        };
        Self::new(
            context_probs,
            logging.ok_or_else(missing)?,
            target.ok_or_else(missing)?,
            reward.ok_or_else(missing)?,
        )
    }

    pub fn write<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let join = |row: &[f64]| {
            row.iter()
                .map(|v| format!("{v:.16e}"))
                .collect::<Vec<_>>()
                .join(",")
        };
        writeln!(out, "context_probs,{}", join(&self.context_probs))?;
        for (name, table) in [
            ("logging", &self.logging),
            ("target", &self.target),
            ("reward", &self.reward),
        ] {
            for (x, row) in table.iter().enumerate() {
                writeln!(out, "{name},{x},{}", join(row))?;
            }
        }
        Ok(())
    }
}

/// `Σ_x P_X(x) Σ_a π(a|x) f_r(x, a)`.
pub fn exact_true_risk(env: &DiscreteEnvironment, kind: TableKind) -> f64 {
    table_risk(env, env.table(kind))
}

fn table_risk(env: &DiscreteEnvironment, table: &[Vec<f64>]) -> f64 {
    let mut total = 0.0;
    for (x, px) in env.context_probs.iter().enumerate() {
        let inner: f64 = table[x]
            .iter()
            .zip(&env.reward[x])
            .map(|(p, r)| p * r)
            .sum();
        total += px * inner;
    }
    total
}

/// Conditional divergences of the target table from the logging table,
/// averaged over the context distribution.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Divergences {
    pub kl: f64,
    pub reverse_kl: f64,
    pub chi_square: f64,
}

impl Divergences {
    pub fn min_kl(&self) -> f64 {
        self.kl.min(self.reverse_kl)
    }
}

/// `D(π‖π_0|P_X)` for an arbitrary table against the environment's logging
/// table.
pub fn conditional_kl(env: &DiscreteEnvironment, table: &[Vec<f64>]) -> Result<f64, BoundsError> {
    let mut total = 0.0;
    for (x, px) in env.context_probs.iter().enumerate() {
        let mut inner = 0.0;
        for (a, &p) in table[x].iter().enumerate() {
            if p > 0.0 {
                let q = env.logging[x][a];
                if q <= 0.0 {
                    return Err(BoundsError::AbsoluteContinuity {
                        context: x,
                        action: a,
                    });
                }
                inner += p * (p / q).ln();
            }
        }
        total += px * inner;
    }
    Ok(total)
}

pub fn exact_divergences(env: &DiscreteEnvironment) -> Result<Divergences, BoundsError> {
    let kl = conditional_kl(env, &env.target)?;
    let mut reverse_kl = 0.0;
    let mut chi_square = 0.0;
    for (x, px) in env.context_probs.iter().enumerate() {
        let mut rkl = 0.0;
        let mut second_moment = 0.0;
        for a in 0..env.actions() {
            let (p, q) = (env.target[x][a], env.logging[x][a]);
            if q > 0.0 {
                rkl += if p > 0.0 {
                    q * (q / p).ln()
                } else {
                    f64::INFINITY
                };
                second_moment += p * p / q;
            }
        }
        reverse_kl += px * rkl;
        chi_square += px * (second_moment - 1.0);
    }
    Ok(Divergences {
        kl,
        reverse_kl,
        chi_square,
    })
}

/// `E_{P_X⊗π_0}[(w f_r)²] − R(π_θ)²` with `w = π_θ/π_0`.
pub fn exact_weighted_variance(env: &DiscreteEnvironment) -> f64 {
    let mut second = 0.0;
    for (x, px) in env.context_probs.iter().enumerate() {
        let mut inner = 0.0;
        for a in 0..env.actions() {
            let (p, q, r) = (env.target[x][a], env.logging[x][a], env.reward[x][a]);
            if q > 0.0 && p > 0.0 {
                inner += p * p * r * r / q;
            }
        }
        second += px * inner;
    }
    let risk = exact_true_risk(env, TableKind::Target);
    second - risk * risk
}

/// Constants shared by the variance and risk bounds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundInputs {
    /// Sub-Gaussian parameter; defaults to `w_m · b_u² / 2` when unset.
    pub sigma: Option<f64>,
    /// Uniform bound `w_m` on the importance weights.
    pub max_weight: Option<f64>,
    /// Reward range `[c, b]`.
    pub reward_min: f64,
    pub reward_max: f64,
    /// Lower-bound constant `q ≥ 0`, certified by the caller.
    pub q: f64,
    pub n: usize,
    pub delta: f64,
}

impl Default for BoundInputs {
    fn default() -> Self {
        Self {
            sigma: None,
            max_weight: None,
            reward_min: -1.0,
            reward_max: 0.0,
            q: 0.0,
            n: 1,
            delta: 0.05,
        }
    }
}

impl BoundInputs {
    pub fn validate(&self) -> Result<(), BoundsError> {
        let bad = |m: String| Err(BoundsError::InvalidInput(m));
        if !(self.reward_max >= 0.0) {
            return bad(format!(
                "reward upper end b = {} must be >= 0",
                self.reward_max
            ));
        }
        if !(self.reward_min <= self.reward_max) {
            return bad(format!(
                "reward range [{}, {}] is empty",
                self.reward_min, self.reward_max
            ));
        }
        if !(self.q >= 0.0) {
            return bad(format!("q = {} must be >= 0", self.q));
        }
        if let Some(s) = self.sigma {
            if !(s >= 0.0) {
                return bad(format!("sigma = {s} must be >= 0"));
            }
        }
        if let Some(w) = self.max_weight {
            if !(w >= 1.0) || !w.is_finite() {
                return bad(format!("w_m = {w} must be finite and >= 1"));
            }
        }
        Ok(())
    }

    /// `b_u = max(|c|, b)`.
    pub fn b_u(&self) -> f64 {
        self.reward_min.abs().max(self.reward_max)
    }

    /// `c_l = max(c, 0)`.
    pub fn c_l(&self) -> f64 {
        self.reward_min.max(0.0)
    }

    pub fn effective_sigma(&self) -> Result<f64, BoundsError> {
        match (self.sigma, self.max_weight) {
            (Some(s), _) => Ok(s),
            (None, Some(w)) => Ok(w * self.b_u().powi(2) / 2.0),
            (None, None) => Err(BoundsError::InvalidInput(
                "either sigma or w_m is required".into(),
            )),
        }
    }
}

fn check_divergence(name: &str, d: f64) -> Result<(), BoundsError> {
    if !(d >= 0.0) {
        return Err(BoundsError::InvalidInput(format!(
            "{name} = {d} must be >= 0"
        )));
    }
    Ok(())
}

/// `√(2σ² · min(D, D_r)) + b_u² − c_l²`.
pub fn var_upper_kl(inputs: &BoundInputs, kl: f64, reverse_kl: f64) -> Result<f64, BoundsError> {
    inputs.validate()?;
    check_divergence("D", kl)?;
    check_divergence("D_r", reverse_kl)?;
    let sigma = inputs.effective_sigma()?;
    Ok(
        (2.0 * sigma * sigma * kl.min(reverse_kl)).sqrt() + inputs.b_u().powi(2)
            - inputs.c_l().powi(2),
    )
}

/// `b_u² · χ² + b_u² − c_l²`.
pub fn var_upper_chi2(inputs: &BoundInputs, chi_square: f64) -> Result<f64, BoundsError> {
    inputs.validate()?;
    check_divergence("chi2", chi_square)?;
    let bu2 = inputs.b_u().powi(2);
    Ok(bu2 * chi_square + bu2 - inputs.c_l().powi(2))
}

/// `q² · e^D − b_u²`.
pub fn var_lower_kl(inputs: &BoundInputs, kl: f64) -> f64 {
    inputs.q * inputs.q * kl.exp() - inputs.b_u().powi(2)
}

/// High-probability upper bound on the true risk for rewards in `[-1, 0]`:
/// `R̂ + w_m ln(1/δ)/(3n) + √((w_m √(2 min(D, D_r)) + 2) ln(1/δ)/n)`.
pub fn true_risk_bound(
    r_hat: f64,
    inputs: &BoundInputs,
    kl: f64,
    reverse_kl: f64,
) -> Result<f64, BoundsError> {
    if !(inputs.delta > 0.0 && inputs.delta < 1.0) {
        return Err(BoundsError::InvalidInput(format!(
            "delta = {} outside (0, 1)",
            inputs.delta
        )));
    }
    if inputs.n == 0 {
        return Err(BoundsError::InvalidInput("n must be positive".into()));
    }
    check_divergence("D", kl)?;
    check_divergence("D_r", reverse_kl)?;
    let w_m = inputs
        .max_weight
        .filter(|w| w.is_finite())
        .ok_or_else(|| BoundsError::InvalidInput("a finite w_m is required".into()))?;
    let n = inputs.n as f64;
    let log_term = (1.0 / inputs.delta).ln();
    Ok(r_hat
        + w_m * log_term / (3.0 * n)
        + ((w_m * (2.0 * kl.min(reverse_kl)).sqrt() + 2.0) * log_term / n).sqrt())
}

/// `min(√(D/2), √(D_r/2))`.
pub fn risk_diff_bound(kl: f64, reverse_kl: f64) -> f64 {
    (kl / 2.0).sqrt().min((reverse_kl / 2.0).sqrt())
}

/// `√(2σ² D)`.
pub fn expectation_gap_bound(sigma: f64, kl: f64) -> f64 {
    (2.0 * sigma * sigma * kl).sqrt()
}

/// The positive root of `ln(1 + x) − 2x²/w_m²`, for `1 < w_m < e² − 1`.
/// Above it the KL-based variance bound is the tighter of the two.
pub fn chi2_kl_crossover(max_weight: f64) -> Result<f64, BoundsError> {
    let upper = std::f64::consts::E.powi(2) - 1.0;
    if !(max_weight > 1.0 && max_weight < upper) {
        return Err(BoundsError::InvalidInput(format!(
            "w_m = {max_weight} outside (1, e^2 - 1)"
        )));
    }
    let g = |x: f64| (1.0 + x).ln() - 2.0 * x * x / (max_weight * max_weight);
    // g is concave with g(0) = 0 and g'(0) = 1, so it is positive just right
    // of 0 and negative at w_m.
    let (mut lo, mut hi) = (max_weight * 1e-9, max_weight);
    while hi - lo > 1e-12 {
        let mid = 0.5 * (lo + hi);
        if g(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Minimizer of `α R(π) + (1 − α) D(π‖π_0|P_X)`:
/// `π*(a|x) ∝ π_0(a|x) exp(−α/(1−α) f_r(x, a))`. At `α = 1` the limit is
/// `π_0` restricted to the reward-minimizing actions and renormalized.
pub fn gibbs_optimal_policy(
    env: &DiscreteEnvironment,
    alpha: f64,
) -> Result<Vec<Vec<f64>>, BoundsError> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(BoundsError::InvalidInput(format!(
            "alpha = {alpha} outside (0, 1]"
        )));
    }
    let mut table = Vec::with_capacity(env.contexts());
    for x in 0..env.contexts() {
        let logging = &env.logging[x];
        let reward = &env.reward[x];
        let row = if alpha == 1.0 {
            let best = (0..env.actions())
                .filter(|&a| logging[a] > 0.0)
                .map(|a| reward[a])
                .fold(f64::INFINITY, f64::min);
            let mask: Vec<f64> = (0..env.actions())
                .map(|a| {
                    if logging[a] > 0.0 && reward[a] == best {
                        logging[a]
                    } else {
                        0.0
                    }
                })
                .collect();
            normalized(mask)
        } else {
            let beta = alpha / (1.0 - alpha);
            let logits: Vec<f64> = (0..env.actions())
                .map(|a| {
                    if logging[a] > 0.0 {
                        logging[a].ln() - beta * reward[a]
                    } else {
                        f64::NEG_INFINITY
                    }
                })
                .collect();
            crate::policy::softmax(&logits)
        };
        table.push(row);
    }
    Ok(table)
}

/// `α R(π) + (1 − α) D(π‖π_0|P_X)` for a candidate table.
pub fn regularized_objective(
    env: &DiscreteEnvironment,
    table: &[Vec<f64>],
    alpha: f64,
) -> Result<f64, BoundsError> {
    Ok(alpha * table_risk(env, table) + (1.0 - alpha) * conditional_kl(env, table)?)
}

/// Outcome of a Monte-Carlo coverage experiment for [`true_risk_bound`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Coverage {
    pub trials: usize,
    pub violations: usize,
}

impl Coverage {
    pub fn rate(&self) -> f64 {
        self.violations as f64 / self.trials as f64
    }

    /// Clopper–Pearson upper limit of the two-sided interval at `level`.
    pub fn upper_limit(&self, level: f64) -> f64 {
        binomial_upper_limit(self.violations, self.trials, (1.0 - level) / 2.0)
    }
}

/// Clopper–Pearson bound: the `1 − tail` quantile of `Beta(k + 1, n − k)`.
fn binomial_upper_limit(k: usize, n: usize, tail: f64) -> f64 {
    if k >= n {
        return 1.0;
    }
    Beta::new((k + 1) as f64, (n - k) as f64)
        .map(|b| b.inverse_cdf(1.0 - tail))
        .unwrap_or(f64::NAN)
}

/// Draws `trials` logged datasets of size `n` from the environment and counts
/// how often the true target risk exceeds [`true_risk_bound`] evaluated at the
/// IPS estimate. Trial `t` uses the stream `derive_seed(seed, t)`.
pub fn risk_bound_coverage(
    env: &DiscreteEnvironment,
    n: usize,
    trials: usize,
    delta: f64,
    seed: u64,
    exec: Execution,
) -> Result<Coverage, BoundsError> {
    let policy = env.table_policy(TableKind::Target)?;
    let div = exact_divergences(env)?;
    let truth = exact_true_risk(env, TableKind::Target);
    let inputs = BoundInputs {
        max_weight: Some(env.max_weight().max(1.0)),
        n,
        delta,
        ..BoundInputs::default()
    };
    let outcomes = map_ordered(
        exec,
        (0..trials as u64).collect(),
        |t| -> Result<bool, BoundsError> {
            let mut rng = RngState::new(derive_seed(seed, t));
            let samples = env.sample_logged(n, &mut rng);
            let r_hat = ips_risk(&policy, &samples)?;
            Ok(truth > true_risk_bound(r_hat, &inputs, div.kl, div.reverse_kl)?)
        },
    );
    let mut violations = 0;
    for o in outcomes {
        if o? {
            violations += 1;
        }
    }
    Ok(Coverage { trials, violations })
}

/// Named bound values, in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BoundReport {
    entries: Vec<(String, f64)>,
}

impl BoundReport {
    pub fn push(&mut self, key: &str, value: f64) {
        self.entries.push((key.to_string(), value));
    }

    pub fn get(&self, key: &str) -> Option<f64> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| *v)
    }

    pub fn entries(&self) -> &[(String, f64)] {
        &self.entries
    }

    /// `key,value` CSV with a header line.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "key,value")?;
        for (k, v) in &self.entries {
            writeln!(out, "{k},{v:.16e}")?;
        }
        Ok(())
    }
}

/// Evaluates every bound on an environment. Reward range and `w_m` are taken
/// from the environment unless set in `overrides`; the risk bound uses the
/// exact expected IPS value (the target risk) unless `r_hat` is given.
pub fn evaluate_report(
    env: &DiscreteEnvironment,
    overrides: &BoundInputs,
    r_hat: Option<f64>,
) -> Result<BoundReport, BoundsError> {
    let (lo, hi) = env.reward_range();
    let inputs = BoundInputs {
        max_weight: Some(
            overrides
                .max_weight
                .unwrap_or_else(|| env.max_weight().max(1.0)),
        ),
        reward_min: overrides.reward_min.min(lo),
        reward_max: overrides.reward_max.max(hi),
        ..*overrides
    };
    inputs.validate()?;
    let div = exact_divergences(env)?;
    let target_risk = exact_true_risk(env, TableKind::Target);
    let logging_risk = exact_true_risk(env, TableKind::Logging);
    let mut report = BoundReport::default();
    report.push("contexts", env.contexts() as f64);
    report.push("actions", env.actions() as f64);
    report.push("w_m", inputs.max_weight.unwrap());
    report.push("b_u", inputs.b_u());
    report.push("c_l", inputs.c_l());
    report.push("sigma", inputs.effective_sigma()?);
    report.push("q", inputs.q);
    report.push("delta", inputs.delta);
    report.push("n", inputs.n as f64);
    report.push("kl", div.kl);
    report.push("reverse_kl", div.reverse_kl);
    report.push("chi_square", div.chi_square);
    report.push("true_risk_target", target_risk);
    report.push("true_risk_logging", logging_risk);
    report.push("exact_variance", exact_weighted_variance(env));
    report.push(
        "var_upper_kl",
        var_upper_kl(&inputs, div.kl, div.reverse_kl)?,
    );
    report.push("var_upper_chi2", var_upper_chi2(&inputs, div.chi_square)?);
    report.push("var_lower_kl", var_lower_kl(&inputs, div.kl));
    report.push("risk_diff", (target_risk - logging_risk).abs());
    report.push("risk_diff_bound", risk_diff_bound(div.kl, div.reverse_kl));
    let r_hat = r_hat.unwrap_or(target_risk);
    report.push("r_hat", r_hat);
    if lo >= -1.0 && hi <= 0.0 {
        report.push(
            "true_risk_bound",
            true_risk_bound(r_hat, &inputs, div.kl, div.reverse_kl)?,
        );
    }
    if let Ok(c) = chi2_kl_crossover(inputs.max_weight.unwrap()) {
        report.push("chi2_kl_crossover", c);
    }
    Ok(report)
}
