//! Logged bandit samples, supervised datasets and the transformations
//! between them.

mod csv_io;

pub use csv_io::{
    read_logged, read_supervised, write_logged, write_supervised, LoggedData, ReadOptions,
};

use thiserror::Error;

use crate::policy::{PolicyError, SoftmaxPolicy};
use crate::rng::RngState;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: propensity {value} must lie in (0, 1]")]
    InvalidPropensity { line: usize, value: f64 },
    #[error("line {line}: reward {value} outside [-1, 0]")]
    RewardOutOfRange { line: usize, value: f64 },
    #[error("dataset has {actual} features per row, expected {expected}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("logging policy has {policy} actions but the dataset has {dataset} classes")]
    ClassCountMismatch { policy: usize, dataset: usize },
    #[error("keep fraction {0} outside [0, 1]")]
    InvalidFraction(f64),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Read access shared by every logged sample type.
pub trait Logged {
    fn context(&self) -> &[f64];
    fn action(&self) -> usize;
    fn propensity(&self) -> f64;
}

/// Context, logged action, its propensity under the logging policy, and the
/// observed reward.
#[derive(Clone, Debug, PartialEq)]
pub struct LoggedKnownSample {
    pub context: Vec<f64>,
    pub action: usize,
    pub propensity: f64,
    pub reward: f64,
}

/// A logged sample whose reward was never observed.
#[derive(Clone, Debug, PartialEq)]
pub struct LoggedUnknownSample {
    pub context: Vec<f64>,
    pub action: usize,
    pub propensity: f64,
}

/// An unknown-reward sample carrying a predicted reward in `[-1, 0]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedSample {
    pub sample: LoggedUnknownSample,
    pub pseudo_reward: f64,
}

impl LoggedKnownSample {
    pub fn without_reward(&self) -> LoggedUnknownSample {
        LoggedUnknownSample {
            context: self.context.clone(),
            action: self.action,
            propensity: self.propensity,
        }
    }
}

impl Logged for LoggedKnownSample {
    fn context(&self) -> &[f64] {
        &self.context
    }
    fn action(&self) -> usize {
        self.action
    }
    fn propensity(&self) -> f64 {
        self.propensity
    }
}

impl Logged for LoggedUnknownSample {
    fn context(&self) -> &[f64] {
        &self.context
    }
    fn action(&self) -> usize {
        self.action
    }
    fn propensity(&self) -> f64 {
        self.propensity
    }
}

impl Logged for AugmentedSample {
    fn context(&self) -> &[f64] {
        &self.sample.context
    }
    fn action(&self) -> usize {
        self.sample.action
    }
    fn propensity(&self) -> f64 {
        self.sample.propensity
    }
}

impl<T: Logged + ?Sized> Logged for &T {
    fn context(&self) -> &[f64] {
        (**self).context()
    }
    fn action(&self) -> usize {
        (**self).action()
    }
    fn propensity(&self) -> f64 {
        (**self).propensity()
    }
}

/// Classification data: feature rows with labels in `0..classes`.
#[derive(Clone, Debug, PartialEq)]
pub struct SupervisedDataset {
    dim: usize,
    classes: usize,
    features: Vec<Vec<f64>>,
    labels: Vec<usize>,
}

impl SupervisedDataset {
    pub fn new(
        features: Vec<Vec<f64>>,
        labels: Vec<usize>,
        classes: usize,
    ) -> Result<Self, DataError> {
        let dim = features.first().map_or(0, Vec::len);
        if features.len() != labels.len() {
            return Err(DataError::Malformed {
                line: 0,
                message: format!(
                    "{} feature rows but {} labels",
                    features.len(),
                    labels.len()
                ),
            });
        }
        if let Some(row) = features.iter().find(|r| r.len() != dim) {
            return Err(DataError::DimensionMismatch {
                expected: dim,
                actual: row.len(),
            });
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(DataError::LabelOutOfRange { label, classes });
        }
        Ok(Self {
            dim,
            classes,
            features,
            labels,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn features(&self) -> &[Vec<f64>] {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn row(&self, i: usize) -> (&[f64], usize) {
        (&self.features[i], self.labels[i])
    }

    pub fn subset(&self, indices: &[usize]) -> SupervisedDataset {
        SupervisedDataset {
            dim: self.dim,
            classes: self.classes,
            features: indices.iter().map(|&i| self.features[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Seeded split into a `fraction` part (rounded) and the remainder, each
    /// kept in original row order.
    pub fn split(
        &self,
        fraction: f64,
        rng: &mut RngState,
    ) -> (SupervisedDataset, SupervisedDataset) {
        let take = ((fraction.clamp(0.0, 1.0)) * self.len() as f64).round() as usize;
        let chosen = rng.sample_indices(self.len(), take);
        let mut in_first = vec![false; self.len()];
        for &i in &chosen {
            in_first[i] = true;
        }
        let rest: Vec<usize> = (0..self.len()).filter(|&i| !in_first[i]).collect();
        (self.subset(&chosen), self.subset(&rest))
    }
}

/// Logs one action per row drawn from `logging`; reward is `-1` when the
/// action equals the label and `0` otherwise.
pub fn supervised_to_bandit(
    ds: &SupervisedDataset,
    logging: &SoftmaxPolicy,
    rng: &mut RngState,
) -> Result<Vec<LoggedKnownSample>, DataError> {
    if logging.input_dim() != ds.dim() {
        return Err(DataError::DimensionMismatch {
            expected: logging.input_dim(),
            actual: ds.dim(),
        });
    }
    if logging.action_count() != ds.classes() {
        return Err(DataError::ClassCountMismatch {
            policy: logging.action_count(),
            dataset: ds.classes(),
        });
    }
    ds.features()
        .iter()
        .zip(ds.labels())
        .map(|(x, &label)| {
            let probs = logging.probs(x)?;
            let action = crate::policy::sample_from(&probs, rng);
            Ok(LoggedKnownSample {
                context: x.clone(),
                action,
                propensity: probs[action],
                reward: if action == label { -1.0 } else { 0.0 },
            })
        })
        .collect()
}

/// How [`mask_rewards`] chooses which rewards stay observed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskMode {
    /// `round(keep · n)` rows chosen uniformly from the whole set.
    Uniform,
    /// `round(keep · n_a)` rows chosen uniformly within each action.
    PerAction,
}

/// Splits logged samples into a reward-observed part and a reward-free part.
/// Both parts keep the input order.
pub fn mask_rewards(
    samples: &[LoggedKnownSample],
    keep_fraction: f64,
    mode: MaskMode,
    rng: &mut RngState,
) -> Result<(Vec<LoggedKnownSample>, Vec<LoggedUnknownSample>), DataError> {
    if !(0.0..=1.0).contains(&keep_fraction) {
        return Err(DataError::InvalidFraction(keep_fraction));
    }
    let mut keep = vec![false; samples.len()];
    match mode {
        MaskMode::Uniform => {
            let count = (keep_fraction * samples.len() as f64).round() as usize;
            for i in rng.sample_indices(samples.len(), count) {
                keep[i] = true;
            }
        }
        MaskMode::PerAction => {
            let actions = samples.iter().map(|s| s.action + 1).max().unwrap_or(0);
            for a in 0..actions {
                let members: Vec<usize> = (0..samples.len())
                    .filter(|&i| samples[i].action == a)
                    .collect();
                let count = (keep_fraction * members.len() as f64).round() as usize;
                for j in rng.sample_indices(members.len(), count) {
                    keep[members[j]] = true;
                }
            }
        }
    }
    let mut known = Vec::new();
    let mut unknown = Vec::new();
    for (s, k) in samples.iter().zip(keep) {
        if k {
            known.push(s.clone());
        } else {
            unknown.push(s.without_reward());
        }
    }
    Ok((known, unknown))
}

/// Removes every known-reward sample with the given action.
pub fn drop_action(known: Vec<LoggedKnownSample>, action: usize) -> Vec<LoggedKnownSample> {
    known.into_iter().filter(|s| s.action != action).collect()
}

/// Number of actions referenced by the samples (`max action + 1`).
pub fn inferred_action_count<'a, I, T>(samples: I) -> usize
where
    I: IntoIterator<Item = &'a T>,
    T: Logged + 'a,
{
    samples
        .into_iter()
        .map(|s| s.action() + 1)
        .max()
        .unwrap_or(0)
}
