//! Flat `section.key = value` configuration.
//!
//! One assignment per line; `#` starts a comment; blank lines are ignored.
//! Only the keys listed in [`KEYS`] are accepted. Lists are comma-separated
//! and an empty value means "unset" for optional keys.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::bounds::BoundInputs;
use crate::data::MaskMode;
use crate::estimators::TruncationParams;
use crate::exec::Execution;
use crate::trainers::{Algorithm, TrainConfig};

use super::experiment::{DataSource, ExperimentConfig, LoggingConfig};
use super::synthetic::SyntheticSpec;
use super::HarnessError;

/// `(key, default, description)` for every accepted key.
pub const KEYS: &[(&str, &str, &str)] = &[
    (
        "data.path",
        "",
        "input CSV (supervised or logged, depending on the command)",
    ),
    ("data.test_path", "", "labelled test CSV"),
    (
        "data.keep_fraction",
        "0.1",
        "share of logged rewards kept observed",
    ),
    ("data.mask_mode", "uniform", "uniform or per_action"),
    (
        "data.drop_action",
        "",
        "action removed from the known-reward set",
    ),
    (
        "data.allow_general_rewards",
        "false",
        "accept rewards outside [-1, 0]",
    ),
    (
        "data.actions",
        "",
        "action count (inferred from the data when unset)",
    ),
    ("data.seed", "0", "seed for generate, to-bandit and mask"),
    ("synth.dim", "10", "context dimension"),
    ("synth.classes", "5", "number of classes (actions)"),
    ("synth.train_rows", "6000", "training rows"),
    ("synth.test_rows", "2000", "test rows"),
    (
        "synth.separation",
        "2.0",
        "distance of class means from the origin",
    ),
    (
        "synth.noise",
        "1.0",
        "per-coordinate noise standard deviation",
    ),
    (
        "synth.class_weights",
        "",
        "class weights (uniform when unset)",
    ),
    (
        "logging.fraction",
        "0.05",
        "share of training rows used for the logging policy",
    ),
    ("logging.epochs", "100", "logging-policy gradient steps"),
    ("logging.learning_rate", "0.5", "logging-policy step size"),
    (
        "logging.hidden",
        "",
        "logging-policy hidden widths (linear when unset)",
    ),
    (
        "logging.batch",
        "0",
        "logging-policy minibatch (0 = full batch)",
    ),
    ("train.algorithm", "wce", "wce, kl or pr"),
    ("train.alpha", "0.5", "weight of the risk term"),
    (
        "train.zeta",
        "0.001",
        "propensity floor of the risk estimator",
    ),
    ("train.tau", "0.001", "propensity floor of the regularizer"),
    ("train.epochs", "1000", "updates per training run"),
    ("train.batch_known", "64", "known-reward minibatch"),
    ("train.batch_unknown", "256", "unknown-reward minibatch"),
    ("train.learning_rate", "0.01", "step size"),
    ("train.hidden", "20,20", "policy hidden widths"),
    (
        "train.seed",
        "0",
        "initialization and minibatch seed for train",
    ),
    (
        "train.parallel",
        "true",
        "data-parallel gradient accumulation",
    ),
    (
        "sweep.source",
        "synthetic",
        "synthetic or files (data.path / data.test_path)",
    ),
    ("sweep.algorithms", "wce,kl,pr", "algorithms to sweep"),
    ("sweep.alphas", "0,0.1,0.3,0.5,0.7,0.9,1", "alpha grid"),
    ("sweep.taus", "0.001", "tau grid"),
    ("sweep.repetitions", "10", "repetitions per cell"),
    ("sweep.seed", "0", "master seed"),
    ("output.dir", "results", "sweep output directory"),
    (
        "output.record_runtime",
        "false",
        "write measured runtimes into the metrics CSV",
    ),
    (
        "bounds.env",
        "",
        "environment file (random environment when unset)",
    ),
    ("bounds.contexts", "3", "contexts of the random environment"),
    ("bounds.actions", "3", "actions of the random environment"),
    (
        "bounds.spread",
        "1.0",
        "log-scale spread of the random tables",
    ),
    (
        "bounds.seed",
        "0",
        "seed of the random environment and of coverage runs",
    ),
    ("bounds.delta", "0.05", "confidence parameter"),
    ("bounds.n", "200", "sample size in the risk bound"),
    (
        "bounds.sigma",
        "",
        "sub-Gaussian parameter (w_m * b_u^2 / 2 when unset)",
    ),
    (
        "bounds.w_m",
        "",
        "importance-weight bound (from the environment when unset)",
    ),
    ("bounds.q", "0", "variance lower-bound constant"),
    ("bounds.reward_min", "-1", "lower end of the reward range"),
    ("bounds.reward_max", "0", "upper end of the reward range"),
    (
        "bounds.r_hat",
        "",
        "empirical risk in the risk bound (exact IPS mean when unset)",
    ),
    (
        "bounds.coverage_trials",
        "0",
        "Monte-Carlo trials for the risk-bound coverage check",
    ),
];

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Config {
    values: BTreeMap<String, String>,
}

fn default_of(key: &str) -> Option<&'static str> {
    KEYS.iter().find(|(k, _, _)| *k == key).map(|(_, d, _)| *d)
}

impl Config {
    pub fn parse(text: &str) -> Result<Self, HarnessError> {
        let mut cfg = Config::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| HarnessError::ConfigSyntax {
                    line: i + 1,
                    message: format!("expected `section.key = value`, found `{line}`"),
                })?;
            cfg.set(key.trim(), value.trim()).map_err(|e| match e {
                HarnessError::UnknownKey(k) => HarnessError::ConfigSyntax {
                    line: i + 1,
                    message: format!("unknown key `{k}`"),
                },
                other => other,
            })?;
        }
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self, HarnessError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), HarnessError> {
        if default_of(key).is_none() {
            return Err(HarnessError::UnknownKey(key.to_string()));
        }
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    pub fn is_known_key(key: &str) -> bool {
        default_of(key).is_some()
    }

    /// The effective value: the explicit setting or the default.
    pub fn get(&self, key: &str) -> &str {
        match self.values.get(key) {
            Some(v) => v,
            None => default_of(key).unwrap_or_else(|| panic!("undeclared config key {key}")),
        }
    }

    fn parse_as<T: std::str::FromStr>(
        &self,
        key: &str,
        expected: &'static str,
    ) -> Result<T, HarnessError> {
        let value = self.get(key);
        value.trim().parse().map_err(|_| HarnessError::BadValue {
            key: key.into(),
            value: value.into(),
            expected,
        })
    }

    pub fn f64(&self, key: &str) -> Result<f64, HarnessError> {
        self.parse_as(key, "a number")
    }

    pub fn usize(&self, key: &str) -> Result<usize, HarnessError> {
        self.parse_as(key, "a non-negative integer")
    }

    pub fn u64(&self, key: &str) -> Result<u64, HarnessError> {
        self.parse_as(key, "a 64-bit unsigned integer")
    }

    pub fn bool(&self, key: &str) -> Result<bool, HarnessError> {
        self.parse_as(key, "true or false")
    }

    pub fn optional_f64(&self, key: &str) -> Result<Option<f64>, HarnessError> {
        if self.get(key).trim().is_empty() {
            return Ok(None);
        }
        self.f64(key).map(Some)
    }

    pub fn optional_usize(&self, key: &str) -> Result<Option<usize>, HarnessError> {
        if self.get(key).trim().is_empty() {
            return Ok(None);
        }
        self.usize(key).map(Some)
    }

    pub fn path(&self, key: &str) -> Option<PathBuf> {
        let v = self.get(key).trim();
        (!v.is_empty()).then(|| PathBuf::from(v))
    }

    fn list<T: std::str::FromStr>(
        &self,
        key: &str,
        expected: &'static str,
    ) -> Result<Vec<T>, HarnessError> {
        let value = self.get(key);
        value
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse().map_err(|_| HarnessError::BadValue {
                    key: key.into(),
                    value: value.into(),
                    expected,
                })
            })
            .collect()
    }

    pub fn f64_list(&self, key: &str) -> Result<Vec<f64>, HarnessError> {
        self.list(key, "a comma-separated list of numbers")
    }

    pub fn usize_list(&self, key: &str) -> Result<Vec<usize>, HarnessError> {
        self.list(key, "a comma-separated list of integers")
    }

    pub fn execution(&self) -> Result<Execution, HarnessError> {
        Ok(if self.bool("train.parallel")? {
            Execution::Parallel
        } else {
            Execution::Sequential
        })
    }

    pub fn mask_mode(&self) -> Result<MaskMode, HarnessError> {
        match self.get("data.mask_mode").trim() {
            "uniform" => Ok(MaskMode::Uniform),
            "per_action" | "per-action" => Ok(MaskMode::PerAction),
            other => Err(HarnessError::BadValue {
                key: "data.mask_mode".into(),
                value: other.into(),
                expected: "uniform or per_action",
            }),
        }
    }

    pub fn algorithm(&self) -> Result<Algorithm, HarnessError> {
        Ok(self.get("train.algorithm").parse()?)
    }

    pub fn synthetic_spec(&self) -> Result<SyntheticSpec, HarnessError> {
        let spec = SyntheticSpec {
            dim: self.usize("synth.dim")?,
            classes: self.usize("synth.classes")?,
            separation: self.f64("synth.separation")?,
            noise: self.f64("synth.noise")?,
            class_weights: self.f64_list("synth.class_weights")?,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn logging_config(&self) -> Result<LoggingConfig, HarnessError> {
        Ok(LoggingConfig {
            fraction: self.f64("logging.fraction")?,
            epochs: self.usize("logging.epochs")?,
            learning_rate: self.f64("logging.learning_rate")?,
            hidden: self.usize_list("logging.hidden")?,
            batch: self.usize("logging.batch")?,
        })
    }

    pub fn train_config(&self) -> Result<TrainConfig, HarnessError> {
        let cfg = TrainConfig {
            algorithm: self.algorithm()?,
            alpha: self.f64("train.alpha")?,
            trunc: TruncationParams::new(self.f64("train.zeta")?, self.f64("train.tau")?)?,
            epochs: self.usize("train.epochs")?,
            batch_known: self.usize("train.batch_known")?,
            batch_unknown: self.usize("train.batch_unknown")?,
            learning_rate: self.f64("train.learning_rate")?,
            seed: self.u64("train.seed")?,
            exec: self.execution()?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn hidden(&self) -> Result<Vec<usize>, HarnessError> {
        self.usize_list("train.hidden")
    }

    pub fn experiment_config(&self) -> Result<ExperimentConfig, HarnessError> {
        let source = match self.get("sweep.source").trim() {
            "synthetic" => DataSource::Synthetic {
                spec: self.synthetic_spec()?,
                train_rows: self.usize("synth.train_rows")?,
                test_rows: self.usize("synth.test_rows")?,
            },
            "files" => {
                let missing = |k: &str| {
                    HarnessError::InvalidConfig(format!("sweep.source = files needs {k}"))
                };
                DataSource::Files {
                    train: self.path("data.path").ok_or_else(|| missing("data.path"))?,
                    test: self
                        .path("data.test_path")
                        .ok_or_else(|| missing("data.test_path"))?,
                }
            }
            other => {
                return Err(HarnessError::BadValue {
                    key: "sweep.source".into(),
                    value: other.into(),
                    expected: "synthetic or files",
                })
            }
        };
        let algorithms = self
            .get("sweep.algorithms")
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(str::parse)
            .collect::<Result<Vec<Algorithm>, _>>()?;
        let cfg = ExperimentConfig {
            source,
            logging: self.logging_config()?,
            keep_fraction: self.f64("data.keep_fraction")?,
            mask_mode: self.mask_mode()?,
            drop_action: self.optional_usize("data.drop_action")?,
            train: self.train_config()?,
            hidden: self.hidden()?,
            algorithms,
            alphas: self.f64_list("sweep.alphas")?,
            taus: self.f64_list("sweep.taus")?,
            repetitions: self.usize("sweep.repetitions")?,
            seed: self.u64("sweep.seed")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn bound_inputs(&self) -> Result<BoundInputs, HarnessError> {
        Ok(BoundInputs {
            sigma: self.optional_f64("bounds.sigma")?,
            max_weight: self.optional_f64("bounds.w_m")?,
            reward_min: self.f64("bounds.reward_min")?,
            reward_max: self.f64("bounds.reward_max")?,
            q: self.f64("bounds.q")?,
            n: self.usize("bounds.n")?,
            delta: self.f64("bounds.delta")?,
        })
    }

    /// Every key with its effective value, in `section.key = value` form.
    pub fn render(&self) -> String {
        KEYS.iter()
            .map(|(k, _, _)| format!("{k} = {}\n", self.get(k)))
            .collect()
    }
}
