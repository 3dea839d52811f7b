//! End-to-end experiment pipeline.
//!
//! Per repetition `r` the pipeline seed is `derive_seed(master, r)`, and every
//! stage draws from `derive_seed(pipeline_seed, STAGE)`:
//!
//! | stage | tag |
//! |---|---|
//! | synthetic train rows | 1 |
//! | synthetic test rows | 2 |
//! | logging/bandit split | 3 |
//! | logging-policy training | 4 |
//! | supervised-to-bandit actions | 5 |
//! | reward masking | 6 |
//! | policy initialization | 7 |
//! | trainer minibatches | 8 |
//!
//! so any stage can be rerun in isolation from the master seed.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use crate::data::{
    drop_action, mask_rewards, read_supervised, supervised_to_bandit, LoggedKnownSample,
    LoggedUnknownSample, MaskMode, SupervisedDataset,
};
use crate::exec::{chunked_reduce, map_ordered, Execution};
use crate::policy::{log_prob_score_grad, PolicyError, PolicyGradient, SoftmaxPolicy};
use crate::rng::{derive_seed, RngState};
use crate::trainers::{train, Algorithm, TrainConfig};

use super::synthetic::{generate_synthetic, SyntheticSpec};
use super::HarnessError;

pub const STAGE_TRAIN_DATA: u64 = 1;
pub const STAGE_TEST_DATA: u64 = 2;
pub const STAGE_SPLIT: u64 = 3;
pub const STAGE_LOGGING: u64 = 4;
pub const STAGE_BANDIT: u64 = 5;
pub const STAGE_MASK: u64 = 6;
pub const STAGE_INIT: u64 = 7;
pub const STAGE_TRAIN: u64 = 8;

/// Cross-entropy training of the logging policy.
#[derive(Clone, Debug, PartialEq)]
pub struct LoggingConfig {
    /// Share of the training rows used to fit the logging policy.
    pub fraction: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub hidden: Vec<usize>,
    /// Minibatch size; 0 means full batch.
    pub batch: usize,
}

impl Default for LoggingConfig {
    fn default() -> Self {
        Self {
            fraction: 0.05,
            epochs: 100,
            learning_rate: 0.5,
            hidden: Vec::new(),
            batch: 0,
        }
    }
}

/// Fits a softmax policy to a `fraction` subsample of `ds` by gradient
/// descent on the mean cross-entropy of the true labels.
pub fn train_logging_policy(
    ds: &SupervisedDataset,
    cfg: &LoggingConfig,
    seed: u64,
    exec: Execution,
) -> Result<SoftmaxPolicy, HarnessError> {
    if !(0.0..=1.0).contains(&cfg.fraction) {
        return Err(HarnessError::InvalidConfig(format!(
            "logging fraction {} outside [0, 1]",
            cfg.fraction
        )));
    }
    if !(cfg.learning_rate > 0.0) {
        return Err(HarnessError::InvalidConfig(
            "logging learning rate must be positive".into(),
        ));
    }
    let mut rng = RngState::new(seed);
    let rows = (cfg.fraction * ds.len() as f64).round() as usize;
    if rows < ds.classes() || rows == 0 {
        return Err(HarnessError::TooFewLoggingRows {
            rows,
            classes: ds.classes(),
        });
    }
    let subset = ds.subset(&rng.sample_indices(ds.len(), rows));
    let mut policy = SoftmaxPolicy::new(ds.dim(), &cfg.hidden, ds.classes(), &mut rng)?;
    for _ in 0..cfg.epochs {
        let batch = if cfg.batch == 0 || cfg.batch >= subset.len() {
            (0..subset.len()).collect()
        } else {
            rng.sample_indices(subset.len(), cfg.batch)
        };
        let scale = 1.0 / batch.len() as f64;
        let grad = chunked_reduce(
            exec,
            batch.len(),
            |range| -> Result<PolicyGradient, PolicyError> {
                let mut g = PolicyGradient::zeros_like(&policy);
                for &i in &batch[range] {
                    let (x, label) = subset.row(i);
                    let pass = policy.forward(x)?;
                    // d/ds of −log π(label|x).
                    let dscores = log_prob_score_grad(&pass.probs, label, -scale);
                    policy.accumulate_backward(&pass, &dscores, &mut g);
                }
                Ok(g)
            },
            |a, b| Ok(a?.merge(b?)),
        )
        .expect("non-empty batch")?;
        policy.apply_step(&grad, cfg.learning_rate);
    }
    Ok(policy)
}

/// `(expected_risk, accuracy)` on labelled data: the exact expected reward
/// `−(1/N) Σ π(label_i|x_i)` and the hit rate of the argmax action.
pub fn evaluate_policy(
    policy: &SoftmaxPolicy,
    test: &SupervisedDataset,
    exec: Execution,
) -> Result<(f64, f64), HarnessError> {
    if test.is_empty() {
        return Err(HarnessError::InvalidConfig(
            "evaluation set is empty".into(),
        ));
    }
    if test.dim() != policy.input_dim() {
        return Err(PolicyError::DimensionMismatch {
            expected: policy.input_dim(),
            actual: test.dim(),
        }
        .into());
    }
    let (mass, hits) = chunked_reduce(
        exec,
        test.len(),
        |range| -> Result<(f64, usize), PolicyError> {
            let mut mass = 0.0;
            let mut hits = 0;
            for i in range {
                let (x, label) = test.row(i);
                let probs = policy.probs(x)?;
                mass += probs.get(label).copied().unwrap_or(0.0);
                if crate::policy::argmax(&probs) == label {
                    hits += 1;
                }
            }
            Ok((mass, hits))
        },
        |a, b| {
            let (ma, ha) = a?;
            let (mb, hb) = b?;
            Ok((ma + mb, ha + hb))
        },
    )
    .expect("non-empty test set")?;
    let n = test.len() as f64;
    Ok((-mass / n, hits as f64 / n))
}

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    /// Fresh train and test rows per repetition.
    Synthetic {
        spec: SyntheticSpec,
        train_rows: usize,
        test_rows: usize,
    },
    /// Supervised CSV files, shared by every repetition.
    Files { train: PathBuf, test: PathBuf },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub source: DataSource,
    pub logging: LoggingConfig,
    pub keep_fraction: f64,
    pub mask_mode: MaskMode,
    /// Action removed from the known-reward set after masking.
    pub drop_action: Option<usize>,
    /// Template for every cell; algorithm, alpha, tau and seed are replaced.
    pub train: TrainConfig,
    pub hidden: Vec<usize>,
    pub algorithms: Vec<Algorithm>,
    pub alphas: Vec<f64>,
    pub taus: Vec<f64>,
    pub repetitions: usize,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic {
                spec: SyntheticSpec::default(),
                train_rows: 6000,
                test_rows: 2000,
            },
            logging: LoggingConfig::default(),
            keep_fraction: 0.1,
            mask_mode: MaskMode::Uniform,
            drop_action: None,
            train: TrainConfig::default(),
            hidden: vec![20, 20],
            algorithms: Algorithm::ALL.to_vec(),
            alphas: vec![0.0, 0.1, 0.3, 0.5, 0.7, 0.9, 1.0],
            taus: vec![0.001],
            repetitions: 10,
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::InvalidConfig(m));
        if !(0.0..=1.0).contains(&self.keep_fraction) {
            return bad(format!(
                "keep fraction {} outside [0, 1]",
                self.keep_fraction
            ));
        }
        if !(0.0..=1.0).contains(&self.logging.fraction) {
            return bad(format!(
                "logging fraction {} outside [0, 1]",
                self.logging.fraction
            ));
        }
        if self.repetitions == 0 {
            return bad("repetitions must be >= 1".into());
        }
        if self.algorithms.is_empty() || self.alphas.is_empty() || self.taus.is_empty() {
            return bad("algorithms, alphas and taus must be non-empty".into());
        }
        if let Some(a) = self.alphas.iter().find(|a| !(0.0..=1.0).contains(*a)) {
            return bad(format!("alpha {a} outside [0, 1]"));
        }
        if let Some(t) = self.taus.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return bad(format!("tau {t} outside [0, 1]"));
        }
        if let DataSource::Synthetic {
            spec,
            train_rows,
            test_rows,
        } = &self.source
        {
            spec.validate()?;
            if *train_rows == 0 || *test_rows == 0 {
                return bad("synthetic row counts must be positive".into());
            }
        }
        self.train.validate()?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    /// `wce`, `kl`, `pr`, or `logging` for the logging-policy baseline.
    pub algorithm: String,
    pub alpha: Option<f64>,
    pub tau: Option<f64>,
    /// Pipeline seed of the repetition.
    pub seed: u64,
    pub expected_risk: f64,
    pub accuracy: f64,
    pub runtime_seconds: f64,
}

fn cmp_opt(a: Option<f64>, b: Option<f64>) -> Ordering {
    match (a, b) {
        (None, None) => Ordering::Equal,
        (None, Some(_)) => Ordering::Less,
        (Some(_), None) => Ordering::Greater,
        (Some(x), Some(y)) => x.total_cmp(&y),
    }
}

impl MetricsRow {
    fn canonical_cmp(&self, other: &Self) -> Ordering {
        self.algorithm
            .cmp(&other.algorithm)
            .then(cmp_opt(self.alpha, other.alpha))
            .then(cmp_opt(self.tau, other.tau))
            .then(self.seed.cmp(&other.seed))
    }
}

/// A cell or repetition that could not be completed.
#[derive(Clone, Debug, PartialEq)]
pub struct CellFailure {
    pub algorithm: String,
    pub alpha: Option<f64>,
    pub tau: Option<f64>,
    pub seed: u64,
    pub message: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ExperimentResult {
    /// Sorted by `(algorithm, alpha, tau, seed)`.
    pub rows: Vec<MetricsRow>,
    pub failures: Vec<CellFailure>,
}

/// Everything a repetition's cells share.
struct Prepared {
    seed: u64,
    known: Vec<LoggedKnownSample>,
    unknown: Vec<LoggedUnknownSample>,
    test: SupervisedDataset,
    init: SoftmaxPolicy,
    baseline: MetricsRow,
}

fn prepare(
    cfg: &ExperimentConfig,
    shared: Option<&(SupervisedDataset, SupervisedDataset)>,
    seed: u64,
) -> Result<Prepared, HarnessError> {
    let start = Instant::now();
    let exec = cfg.train.exec;
    let (train_ds, test) = match (&cfg.source, shared) {
        (_, Some((train_ds, test))) => (train_ds.clone(), test.clone()),
        (
            DataSource::Synthetic {
                spec,
                train_rows,
                test_rows,
            },
            None,
        ) => (
            generate_synthetic(spec, *train_rows, derive_seed(seed, STAGE_TRAIN_DATA))?,
            generate_synthetic(spec, *test_rows, derive_seed(seed, STAGE_TEST_DATA))?,
        ),
        (DataSource::Files { .. }, None) => unreachable!("file sources are loaded up front"),
    };
    let (logging_rows, bandit_rows) = train_ds.split(
        cfg.logging.fraction,
        &mut RngState::new(derive_seed(seed, STAGE_SPLIT)),
    );
    let logging_cfg = LoggingConfig {
        fraction: 1.0,
        ..cfg.logging.clone()
    };
    let logging = train_logging_policy(
        &logging_rows,
        &logging_cfg,
        derive_seed(seed, STAGE_LOGGING),
        exec,
    )?;
    let logged = supervised_to_bandit(
        &bandit_rows,
        &logging,
        &mut RngState::new(derive_seed(seed, STAGE_BANDIT)),
    )?;
    let (mut known, unknown) = mask_rewards(
        &logged,
        cfg.keep_fraction,
        cfg.mask_mode,
        &mut RngState::new(derive_seed(seed, STAGE_MASK)),
    )?;
    if let Some(a) = cfg.drop_action {
        known = drop_action(known, a);
    }
    let init = SoftmaxPolicy::new(
        train_ds.dim(),
        &cfg.hidden,
        train_ds.classes(),
        &mut RngState::new(derive_seed(seed, STAGE_INIT)),
    )?;
    let (expected_risk, accuracy) = evaluate_policy(&logging, &test, exec)?;
    Ok(Prepared {
        seed,
        known,
        unknown,
        test,
        init,
        baseline: MetricsRow {
            algorithm: "logging".into(),
            alpha: None,
            tau: None,
            seed,
            expected_risk,
            accuracy,
            runtime_seconds: start.elapsed().as_secs_f64(),
        },
    })
}

fn run_cell(
    cfg: &ExperimentConfig,
    prep: &Prepared,
    algorithm: Algorithm,
    alpha: f64,
    tau: f64,
) -> Result<MetricsRow, HarnessError> {
    let start = Instant::now();
    let train_cfg = TrainConfig {
        algorithm,
        alpha,
        trunc: crate::estimators::TruncationParams::new(cfg.train.trunc.zeta, tau)?,
        seed: derive_seed(prep.seed, STAGE_TRAIN),
        ..cfg.train
    };
    let (policy, _) = train(&prep.known, &prep.unknown, &train_cfg, prep.init.clone())?;
    let (expected_risk, accuracy) = evaluate_policy(&policy, &prep.test, cfg.train.exec)?;
    Ok(MetricsRow {
        algorithm: algorithm.name().into(),
        alpha: Some(alpha),
        tau: Some(tau),
        seed: prep.seed,
        expected_risk,
        accuracy,
        runtime_seconds: start.elapsed().as_secs_f64(),
    })
}

fn load_shared(
    cfg: &ExperimentConfig,
) -> Result<Option<(SupervisedDataset, SupervisedDataset)>, HarnessError> {
    match &cfg.source {
        DataSource::Synthetic { .. } => Ok(None),
        DataSource::Files { train, test } => {
            let train_ds = read_supervised(std::fs::File::open(train)?, None)?;
            let test_ds = read_supervised(std::fs::File::open(test)?, Some(train_ds.classes()))?;
            Ok(Some((train_ds, test_ds)))
        }
    }
}

/// Runs every `(algorithm, alpha, tau)` cell for every repetition, plus one
/// logging-policy baseline row per repetition. A failing cell is recorded in
/// `failures` and the sweep continues.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult, HarnessError> {
    cfg.validate()?;
    let shared = load_shared(cfg)?;
    let exec = cfg.train.exec;
    let seeds: Vec<u64> = (0..cfg.repetitions as u64)
        .map(|r| derive_seed(cfg.seed, r))
        .collect();
    let prepared = map_ordered(exec, seeds.clone(), |seed| {
        prepare(cfg, shared.as_ref(), seed)
    });

    let mut result = ExperimentResult::default();
    let mut ready = Vec::new();
    for (seed, prep) in seeds.iter().zip(prepared) {
        match prep {
            Ok(p) => {
                result.rows.push(p.baseline.clone());
                ready.push(p);
            }
            Err(e) => result.failures.push(CellFailure {
                algorithm: "pipeline".into(),
                alpha: None,
                tau: None,
                seed: *seed,
                message: e.to_string(),
            }),
        }
    }

    let mut cells = Vec::new();
    for (r, _) in ready.iter().enumerate() {
        for &algorithm in &cfg.algorithms {
            for &alpha in &cfg.alphas {
                for &tau in &cfg.taus {
                    cells.push((r, algorithm, alpha, tau));
                }
            }
        }
    }
    let outcomes = map_ordered(exec, cells.clone(), |(r, algorithm, alpha, tau)| {
        run_cell(cfg, &ready[r], algorithm, alpha, tau)
    });
    for ((r, algorithm, alpha, tau), outcome) in cells.into_iter().zip(outcomes) {
        match outcome {
            Ok(row) => result.rows.push(row),
            Err(e) => result.failures.push(CellFailure {
                algorithm: algorithm.name().into(),
                alpha: Some(alpha),
                tau: Some(tau),
                seed: ready[r].seed,
                message: e.to_string(),
            }),
        }
    }
    result.rows.sort_by(MetricsRow::canonical_cmp);
    Ok(result)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub const METRICS_HEADER: &str = "algorithm,alpha,tau,seed,expected_risk,accuracy,runtime_seconds";

/// Metrics CSV. Runtimes are written as 0 unless `record_runtime`, so that
/// identical configs give identical bytes.
pub fn write_metrics_csv<W: Write>(
    rows: &[MetricsRow],
    record_runtime: bool,
    mut out: W,
) -> std::io::Result<()> {
    writeln!(out, "{METRICS_HEADER}")?;
    for r in rows {
        let runtime = if record_runtime {
            r.runtime_seconds
        } else {
            0.0
        };
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.algorithm,
            fmt_opt(r.alpha),
            fmt_opt(r.tau),
            r.seed,
            r.expected_risk,
            r.accuracy,
            runtime
        )?;
    }
    Ok(())
}

/// Measured wall times per row.
pub fn write_timings_csv<W: Write>(rows: &[MetricsRow], mut out: W) -> std::io::Result<()> {
    writeln!(out, "algorithm,alpha,tau,seed,runtime_seconds")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{:.6}",
            r.algorithm,
            fmt_opt(r.alpha),
            fmt_opt(r.tau),
            r.seed,
            r.runtime_seconds
        )?;
    }
    Ok(())
}

pub fn write_failures_csv<W: Write>(failures: &[CellFailure], mut out: W) -> std::io::Result<()> {
    writeln!(out, "algorithm,alpha,tau,seed,message")?;
    for f in failures {
        let message = f.message.replace(['"', '\n'], " ");
        writeln!(
            out,
            "{},{},{},{},\"{}\"",
            f.algorithm,
            fmt_opt(f.alpha),
            fmt_opt(f.tau),
            f.seed,
            message
        )?;
    }
    Ok(())
}

/// Mean and sample standard deviation per `(algorithm, alpha, tau)` cell.
#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub algorithm: String,
    pub alpha: Option<f64>,
    pub tau: Option<f64>,
    pub count: usize,
    pub mean_expected_risk: f64,
    pub std_expected_risk: f64,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, f64::NAN);
    }
    let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
    (mean, (ss / (n - 1.0)).sqrt())
}

pub fn summarize(rows: &[MetricsRow]) -> Vec<SummaryRow> {
    let mut groups: Vec<(&MetricsRow, Vec<&MetricsRow>)> = Vec::new();
    let mut sorted: Vec<&MetricsRow> = rows.iter().collect();
    sorted.sort_by(|a, b| a.canonical_cmp(b));
    for r in sorted {
        match groups.last_mut() {
            Some((head, members))
                if head.algorithm == r.algorithm
                    && cmp_opt(head.alpha, r.alpha).is_eq()
                    && cmp_opt(head.tau, r.tau).is_eq() =>
            {
                members.push(r)
            }
            _ => groups.push((r, vec![r])),
        }
    }
    groups
        .into_iter()
        .map(|(head, members)| {
            let risks: Vec<f64> = members.iter().map(|m| m.expected_risk).collect();
            let accs: Vec<f64> = members.iter().map(|m| m.accuracy).collect();
            let (mean_expected_risk, std_expected_risk) = mean_std(&risks);
            let (mean_accuracy, std_accuracy) = mean_std(&accs);
            SummaryRow {
                algorithm: head.algorithm.clone(),
                alpha: head.alpha,
                tau: head.tau,
                count: members.len(),
                mean_expected_risk,
                std_expected_risk,
                mean_accuracy,
                std_accuracy,
            }
        })
        .collect()
}

pub fn write_summary_csv<W: Write>(summary: &[SummaryRow], mut out: W) -> std::io::Result<()> {
    writeln!(
        out,
        "algorithm,alpha,tau,count,mean_expected_risk,std_expected_risk,mean_accuracy,std_accuracy"
    )?;
    for s in summary {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            s.algorithm,
            fmt_opt(s.alpha),
            fmt_opt(s.tau),
            s.count,
            s.mean_expected_risk,
            s.std_expected_risk,
            s.mean_accuracy,
            s.std_accuracy
        )?;
    }
    Ok(())
}

/// Median of the expected risks of the rows matching `algorithm` and
/// `alpha` (`None` matches the baseline rows).
pub fn median_risk(rows: &[MetricsRow], algorithm: &str, alpha: Option<f64>) -> Option<f64> {
    let mut v: Vec<f64> = rows
        .iter()
        .filter(|r| r.algorithm == algorithm && cmp_opt(r.alpha, alpha).is_eq())
        .map(|r| r.expected_risk)
        .collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    Some(if v.len().is_multiple_of(2) {
        0.5 * (v[mid - 1] + v[mid])
    } else {
        v[mid]
    })
}

/// Medians per alpha for one algorithm, keyed by the alpha's bit pattern so
/// that the map iterates in ascending alpha order for non-negative alphas.
pub fn median_risk_by_alpha(rows: &[MetricsRow], algorithm: &str) -> BTreeMap<u64, (f64, f64)> {
    let mut out = BTreeMap::new();
    for r in rows.iter().filter(|r| r.algorithm == algorithm) {
        if let Some(alpha) = r.alpha {
            out.entry(alpha.to_bits())
                .or_insert_with(|| (alpha, median_risk(rows, algorithm, Some(alpha)).unwrap()));
        }
    }
    out
}
