use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use semi_crm::bounds::{evaluate_report, risk_bound_coverage, DiscreteEnvironment};
use semi_crm::data::{
    drop_action, inferred_action_count, mask_rewards, read_logged, read_supervised,
    supervised_to_bandit, write_logged, write_supervised, ReadOptions,
};
use semi_crm::harness::config::Config;
use semi_crm::harness::experiment::{
    self, evaluate_policy, median_risk, run_experiment, summarize, train_logging_policy,
    LoggingConfig, STAGE_BANDIT, STAGE_INIT, STAGE_LOGGING, STAGE_MASK, STAGE_SPLIT,
    STAGE_TEST_DATA, STAGE_TRAIN, STAGE_TRAIN_DATA,
};
use semi_crm::harness::{generate_synthetic, HarnessError};
use semi_crm::policy::SoftmaxPolicy;
use semi_crm::rng::{derive_seed, RngState};
use semi_crm::trainers::{train, TrainConfig};

type CliResult<T = ()> = Result<T, HarnessError>;

fn usage(message: impl Into<String>) -> HarnessError {
    HarnessError::Usage(message.into())
}

/// Counterfactual policy learning from logged bandit feedback with partially
/// missing rewards.
///
/// Every config key can be given as `--section.key value` or
/// `--section.key=value`; such flags override the `--config` file.
#[derive(Parser, Debug)]
#[command(name = "semi-crm", version)]
struct Cli {
    /// Flat `section.key = value` config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write synthetic train (and test) supervised CSVs.
    Generate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        test_out: Option<PathBuf>,
    },
    /// Fit the logging policy on a `logging.fraction` share of `data.path`.
    TrainLogging {
        #[arg(long)]
        out: PathBuf,
        /// Rows not used for the logging policy.
        #[arg(long)]
        rest_out: Option<PathBuf>,
    },
    /// Turn the supervised rows of `data.path` into logged bandit feedback.
    ToBandit {
        #[arg(long)]
        policy: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Hide all but `data.keep_fraction` of the rewards in `data.path`.
    Mask {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a policy on the logged data in `data.path`.
    Train {
        #[arg(long)]
        out: PathBuf,
        /// Per-epoch trace CSV.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Expected risk and accuracy of a policy on `data.test_path`.
    Evaluate {
        #[arg(long)]
        policy: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Full experiment sweep; results go to `output.dir`.
    Sweep,
    /// Evaluate the variance and risk bounds on a finite environment.
    Bounds {
        #[arg(long)]
        out: Option<PathBuf>,
        /// Save the environment that was used.
        #[arg(long)]
        write_env: Option<PathBuf>,
    },
}

/// Separates `--section.key[=value]` overrides from the clap arguments.
fn split_overrides(args: Vec<String>) -> CliResult<(Vec<String>, Vec<(String, String)>)> {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    let mut iter = args.into_iter();
    while let Some(arg) = iter.next() {
        let Some(flag) = arg
            .strip_prefix("--")
            .filter(|f| f.split('=').next().is_some_and(|k| k.contains('.')))
        else {
            rest.push(arg);
            continue;
        };
        let (key, value) = match flag.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let v = iter
                    .next()
                    .ok_or_else(|| usage(format!("--{flag} needs a value")))?;
                (flag.to_string(), v)
            }
        };
        if !Config::is_known_key(&key) {
            return Err(usage(format!("unknown config key --{key}")));
        }
        overrides.push((key, value));
    }
    Ok((rest, overrides))
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

fn open(path: &Path) -> CliResult<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| usage(format!("cannot open {}: {e}", path.display())))
}

fn required_path(cfg: &Config, key: &str) -> CliResult<PathBuf> {
    cfg.path(key)
        .ok_or_else(|| usage(format!("set {key} (config file or --{key})")))
}

fn read_options(cfg: &Config) -> CliResult<ReadOptions> {
    Ok(ReadOptions {
        allow_general_rewards: cfg.bool("data.allow_general_rewards")?,
    })
}

fn generate(cfg: &Config, out: &Path, test_out: Option<&Path>) -> CliResult {
    let spec = cfg.synthetic_spec()?;
    let seed = cfg.u64("data.seed")?;
    let train_ds = generate_synthetic(
        &spec,
        cfg.usize("synth.train_rows")?,
        derive_seed(seed, STAGE_TRAIN_DATA),
    )?;
    write_supervised(create(out)?, &train_ds)?;
    if let Some(path) = test_out {
        let test = generate_synthetic(
            &spec,
            cfg.usize("synth.test_rows")?,
            derive_seed(seed, STAGE_TEST_DATA),
        )?;
        write_supervised(create(path)?, &test)?;
    }
    Ok(())
}

fn train_logging(cfg: &Config, out: &Path, rest_out: Option<&Path>) -> CliResult {
    let ds = read_supervised(
        open(&required_path(cfg, "data.path")?)?,
        cfg.optional_usize("data.actions")?,
    )?;
    let logging_cfg = cfg.logging_config()?;
    let seed = cfg.u64("data.seed")?;
    let (part, rest) = ds.split(
        logging_cfg.fraction,
        &mut RngState::new(derive_seed(seed, STAGE_SPLIT)),
    );
    let fit_cfg = LoggingConfig {
        fraction: 1.0,
        ..logging_cfg
    };
    let policy = train_logging_policy(
        &part,
        &fit_cfg,
        derive_seed(seed, STAGE_LOGGING),
        cfg.execution()?,
    )?;
    policy.write_checkpoint(create(out)?)?;
    if let Some(path) = rest_out {
        write_supervised(create(path)?, &rest)?;
    }
    eprintln!(
        "logging policy fitted on {} rows, {} rows left",
        part.len(),
        rest.len()
    );
    Ok(())
}

fn load_policy(path: &Path) -> CliResult<SoftmaxPolicy> {
    Ok(SoftmaxPolicy::read_checkpoint(open(path)?)?)
}

fn to_bandit(cfg: &Config, policy: &Path, out: &Path) -> CliResult {
    let logging = load_policy(policy)?;
    let ds = read_supervised(
        open(&required_path(cfg, "data.path")?)?,
        Some(logging.action_count()),
    )?;
    let mut rng = RngState::new(derive_seed(cfg.u64("data.seed")?, STAGE_BANDIT));
    let logged = supervised_to_bandit(&ds, &logging, &mut rng)?;
    write_logged(create(out)?, ds.dim(), &logged, &[])?;
    Ok(())
}

fn mask(cfg: &Config, out: &Path) -> CliResult {
    let data = read_logged(open(&required_path(cfg, "data.path")?)?, read_options(cfg)?)?;
    if !data.unknown.is_empty() {
        return Err(usage("mask expects data whose rewards are all observed"));
    }
    let mut rng = RngState::new(derive_seed(cfg.u64("data.seed")?, STAGE_MASK));
    let (mut known, unknown) = mask_rewards(
        &data.known,
        cfg.f64("data.keep_fraction")?,
        cfg.mask_mode()?,
        &mut rng,
    )?;
    if let Some(a) = cfg.optional_usize("data.drop_action")? {
        known = drop_action(known, a);
    }
    write_logged(create(out)?, data.dim, &known, &unknown)?;
    eprintln!(
        "{} known-reward rows, {} reward-free rows",
        known.len(),
        unknown.len()
    );
    Ok(())
}

fn train_policy(cfg: &Config, out: &Path, trace_out: Option<&Path>) -> CliResult {
    let data = read_logged(open(&required_path(cfg, "data.path")?)?, read_options(cfg)?)?;
    let actions = match cfg.optional_usize("data.actions")? {
        Some(k) => k,
        None => inferred_action_count(&data.known).max(inferred_action_count(&data.unknown)),
    };
    if actions == 0 || data.dim == 0 {
        return Err(usage("logged data is empty; cannot infer the policy shape"));
    }
    let base = cfg.train_config()?;
    let seed = base.seed;
    let train_cfg = TrainConfig {
        seed: derive_seed(seed, STAGE_TRAIN),
        ..base
    };
    let init = SoftmaxPolicy::new(
        data.dim,
        &cfg.hidden()?,
        actions,
        &mut RngState::new(derive_seed(seed, STAGE_INIT)),
    )?;
    let (policy, trace) = train(&data.known, &data.unknown, &train_cfg, init)?;
    policy.write_checkpoint(create(out)?)?;
    if let Some(path) = trace_out {
        trace.write_csv(create(path)?)?;
    }
    if let Some(last) = trace.records.last() {
        eprintln!(
            "{} epochs of {}; last ips_term {:.6}, reg_term {:.6}",
            trace.len(),
            train_cfg.algorithm,
            last.ips_term,
            last.reg_term
        );
    }
    Ok(())
}

fn evaluate(cfg: &Config, policy_path: &Path, out: Option<&Path>) -> CliResult {
    let policy = load_policy(policy_path)?;
    let test = read_supervised(
        open(&required_path(cfg, "data.test_path")?)?,
        Some(policy.action_count()),
    )?;
    let (risk, accuracy) = evaluate_policy(&policy, &test, cfg.execution()?)?;
    let text = format!("expected_risk,accuracy\n{risk},{accuracy}\n");
    match out {
        Some(path) => create(path)?.write_all(text.as_bytes())?,
        None => print!("{text}"),
    }
    Ok(())
}

fn sweep(cfg: &Config) -> CliResult {
    let exp = cfg.experiment_config()?;
    let dir = PathBuf::from(cfg.get("output.dir"));
    let record_runtime = cfg.bool("output.record_runtime")?;
    let result = run_experiment(&exp)?;
    experiment::write_metrics_csv(
        &result.rows,
        record_runtime,
        create(&dir.join("metrics.csv"))?,
    )?;
    experiment::write_summary_csv(&summarize(&result.rows), create(&dir.join("summary.csv"))?)?;
    experiment::write_timings_csv(&result.rows, create(&dir.join("timings.csv"))?)?;
    experiment::write_failures_csv(&result.failures, create(&dir.join("failures.csv"))?)?;
    create(&dir.join("config.txt"))?.write_all(cfg.render().as_bytes())?;
    if let Some(m) = median_risk(&result.rows, "logging", None) {
        eprintln!("logging policy median expected risk {m:.4}");
    }
    for alg in &exp.algorithms {
        for (_, (alpha, m)) in experiment::median_risk_by_alpha(&result.rows, alg.name()) {
            eprintln!("{alg} alpha={alpha}: median expected risk {m:.4}");
        }
    }
    for f in &result.failures {
        eprintln!(
            "failed: {} alpha={:?} tau={:?} seed={}: {}",
            f.algorithm, f.alpha, f.tau, f.seed, f.message
        );
    }
    eprintln!("wrote {}", dir.display());
    Ok(())
}

fn bounds(cfg: &Config, out: Option<&Path>, write_env: Option<&Path>) -> CliResult {
    let inputs = cfg.bound_inputs()?;
    let env = match cfg.path("bounds.env") {
        Some(path) => DiscreteEnvironment::read(open(&path)?)?,
        None => DiscreteEnvironment::random(
            &mut RngState::new(cfg.u64("bounds.seed")?),
            cfg.usize("bounds.contexts")?,
            cfg.usize("bounds.actions")?,
            cfg.f64("bounds.spread")?,
            inputs.reward_min,
            inputs.reward_max,
        ),
    };
    if let Some(path) = write_env {
        env.write(create(path)?)?;
    }
    let mut report = evaluate_report(&env, &inputs, cfg.optional_f64("bounds.r_hat")?)?;
    let trials = cfg.usize("bounds.coverage_trials")?;
    if trials > 0 {
        let coverage = risk_bound_coverage(
            &env,
            inputs.n,
            trials,
            inputs.delta,
            cfg.u64("bounds.seed")?,
            cfg.execution()?,
        )?;
        report.push("coverage_trials", trials as f64);
        report.push("coverage_violations", coverage.violations as f64);
        report.push("coverage_rate", coverage.rate());
        report.push("coverage_upper_99", coverage.upper_limit(0.99));
    }
    match out {
        Some(path) => report.write_csv(create(path)?)?,
        None => report.write_csv(std::io::stdout().lock())?,
    }
    Ok(())
}

fn run() -> CliResult {
    let (args, overrides) = split_overrides(std::env::args().collect())?;
    let cli = Cli::try_parse_from(args).unwrap_or_else(|e| e.exit());
    let mut cfg = match &cli.config {
        Some(path) => Config::from_file(path)?,
        None => Config::default(),
    };
    for (k, v) in &overrides {
        cfg.set(k, v)?;
    }
    match &cli.command {
        Command::Generate { out, test_out } => generate(&cfg, out, test_out.as_deref()),
        Command::TrainLogging { out, rest_out } => train_logging(&cfg, out, rest_out.as_deref()),
        Command::ToBandit { policy, out } => to_bandit(&cfg, policy, out),
        Command::Mask { out } => mask(&cfg, out),
        Command::Train { out, trace } => train_policy(&cfg, out, trace.as_deref()),
        Command::Evaluate { policy, out } => evaluate(&cfg, policy, out.as_deref()),
        Command::Sweep => sweep(&cfg),
        Command::Bounds { out, write_env } => bounds(&cfg, out.as_deref(), write_env.as_deref()),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
