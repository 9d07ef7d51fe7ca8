//! `nmir`: collect demonstrations, train the scan generator and policy,
//! recover rewards, and evaluate closed-loop behaviour.

mod config;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context as _};
use clap::{Parser, Subcommand, ValueEnum};
use nmir_core::archive::{
    encode_rollout, load_dataset, load_generator, load_policy, save_dataset, save_generator, save_policy,
};
use nmir_core::dataset::collect_dataset;
use nmir_core::env::EnvSpec;
use nmir_core::generator::{GeneratorModel, GeneratorTrainer};
use nmir_core::irl::{irl_recover, irl_validate, solve_exact, FeatureMap};
use nmir_core::mdp::{tabular_build, DEFAULT_DISCOUNT};
use nmir_core::policy::{PolicyParams, PolicyTrainer};
use nmir_core::runtime::{eval_suite, metrics_csv, rollout, RolloutConfig, ScanMode};
use serde::Serialize;

use crate::config::RunConfig;

/// A mistake in how the program was invoked; exits with status 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Debug, Parser)]
#[command(name = "nmir", version, about = "Scan-conditioned imitation: data, training and evaluation")]
struct Cli {
    /// TOML run configuration; every section is optional.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides `output_dir` from the config.
    #[arg(long, global = true, value_name = "DIR")]
    output_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Features {
    OneHot,
    Compact,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Mode {
    Oracle,
    Generated,
    Zeroed,
}

impl From<Mode> for ScanMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Oracle => ScanMode::Oracle,
            Mode::Generated => ScanMode::Generated,
            Mode::Zeroed => ScanMode::Zeroed,
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Record expert episodes with their scans into a dataset file.
    Collect {
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
    },
    /// Train the scan generator on a dataset.
    TrainGen {
        #[arg(long, required = true, value_name = "PATH")]
        data: PathBuf,
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Continue from a checkpoint saved with optimiser state.
        #[arg(long, value_name = "PATH")]
        resume: Option<PathBuf>,
    },
    /// Train the policy by behavioural cloning.
    TrainPolicy {
        #[arg(long, required = true, value_name = "PATH")]
        data: PathBuf,
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long, value_name = "PATH")]
        resume: Option<PathBuf>,
        /// Ablation: replace every scan with zeros.
        #[arg(long)]
        zero_scans: bool,
    },
    /// Recover a linear reward for the gridworld expert.
    Irl {
        #[arg(long, value_enum, default_value = "one-hot")]
        features: Features,
        /// Gridworld size; defaults to the configured gridworld, else 4×4.
        #[arg(long)]
        rows: Option<usize>,
        #[arg(long)]
        cols: Option<usize>,
        #[arg(long, value_name = "PATH")]
        report: Option<PathBuf>,
    },
    /// Run one closed-loop episode.
    Rollout {
        #[arg(long, required = true, value_name = "PATH")]
        policy: PathBuf,
        #[arg(long, value_name = "PATH")]
        generator: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "oracle")]
        mode: Mode,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        max_steps: Option<usize>,
        /// Write the episode trace in the binary trajectory format.
        #[arg(long, value_name = "PATH")]
        trace: Option<PathBuf>,
    },
    /// Evaluate all scan modes on shared seeds and write a CSV table.
    Eval {
        #[arg(long, required = true, value_name = "PATH")]
        policy: PathBuf,
        #[arg(long, required = true, value_name = "PATH")]
        generator: PathBuf,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
    },
    /// Run the built-in oracle checks.
    Selftest,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Collect { .. } => "collect",
            Command::TrainGen { .. } => "train-gen",
            Command::TrainPolicy { .. } => "train-policy",
            Command::Irl { .. } => "irl",
            Command::Rollout { .. } => "rollout",
            Command::Eval { .. } => "eval",
            Command::Selftest => "selftest",
        }
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    argv: Vec<String>,
    version: &'a str,
    outputs: Vec<String>,
    config: &'a RunConfig,
}

struct Run {
    cfg: RunConfig,
    outputs: Vec<PathBuf>,
}

impl Run {
    fn path(&self, explicit: Option<PathBuf>, default: &str) -> PathBuf {
        explicit.unwrap_or_else(|| self.cfg.output_dir.join(default))
    }

    fn wrote(&mut self, p: &Path) {
        self.outputs.push(p.to_path_buf());
    }
}

fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let usage = e.downcast_ref::<UsageError>().is_some()
                || matches!(e.downcast_ref::<nmir_core::Error>(), Some(nmir_core::Error::Usage(_)));
            ExitCode::from(if usage { 2 } else { 1 })
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    if let Some(dir) = cli.output_dir {
        cfg.output_dir = dir;
    }
    fs::create_dir_all(&cfg.output_dir).with_context(|| format!("creating {}", cfg.output_dir.display()))?;
    let name = cli.command.name();
    let mut run = Run { cfg, outputs: Vec::new() };
    match cli.command {
        Command::Collect { episodes, seed, out } => collect(&mut run, episodes, seed, out)?,
        Command::TrainGen {
            data,
            out,
            epochs,
            resume,
        } => train_gen(&mut run, &data, out, epochs, resume)?,
        Command::TrainPolicy {
            data,
            out,
            epochs,
            resume,
            zero_scans,
        } => train_policy(&mut run, &data, out, epochs, resume, zero_scans)?,
        Command::Irl {
            features,
            rows,
            cols,
            report,
        } => irl(&mut run, features, rows, cols, report)?,
        Command::Rollout {
            policy,
            generator,
            mode,
            seed,
            max_steps,
            trace,
        } => rollout_cmd(&mut run, &policy, generator.as_deref(), mode, seed, max_steps, trace)?,
        Command::Eval {
            policy,
            generator,
            episodes,
            seed,
            out,
        } => eval(&mut run, &policy, &generator, episodes, seed, out)?,
        Command::Selftest => selftest()?,
    }
    let manifest = Manifest {
        command: name,
        argv: std::env::args().collect(),
        version: env!("CARGO_PKG_VERSION"),
        outputs: run.outputs.iter().map(|p| p.display().to_string()).collect(),
        config: &run.cfg,
    };
    let path = run.cfg.output_dir.join(format!("manifest-{name}.toml"));
    write_text(&path, &toml::to_string(&manifest).context("serializing manifest")?)
}

fn collect(run: &mut Run, episodes: Option<usize>, seed: Option<u64>, out: Option<PathBuf>) -> anyhow::Result<()> {
    if let Some(e) = episodes {
        run.cfg.collect.episodes = e;
    }
    if let Some(s) = seed {
        run.cfg.seed = s;
    }
    let c = &run.cfg;
    let ds = collect_dataset(&c.env, c.collect.episodes, &c.scan, c.seed, c.eval.exec)?;
    let path = run.path(out, "dataset.nmir");
    save_dataset(&ds, &path)?;
    println!("collected {} records from {} episodes -> {}", ds.len(), c.collect.episodes, path.display());
    run.wrote(&path);
    Ok(())
}

fn train_gen(
    run: &mut Run,
    data: &Path,
    out: Option<PathBuf>,
    epochs: Option<usize>,
    resume: Option<PathBuf>,
) -> anyhow::Result<()> {
    if let Some(e) = epochs {
        run.cfg.generator.epochs = e;
    }
    let hyper = run.cfg.generator;
    let ds = load_dataset(data).with_context(|| format!("loading {}", data.display()))?;
    let mut trainer = match resume {
        None => GeneratorTrainer::new(&ds, hyper)?,
        Some(p) => {
            let (model, opt) = load_generator(&p)?;
            let Some(opt) = opt else {
                bail!(UsageError(format!("{} has no optimiser state to resume from", p.display())));
            };
            GeneratorTrainer::resume(&ds, hyper, model, opt)?
        }
    };
    let curve = trainer.run(hyper.epochs)?;
    let mut csv = String::from("epoch,train_nll,heldout_nll\n");
    for p in &curve {
        csv += &format!("{},{},{}\n", p.epoch, p.train_nll, p.heldout_nll);
    }
    let ckpt = run.path(out, "generator.nmir");
    save_generator(&ckpt, &trainer.model, Some(&trainer.opt), hyper.seed)?;
    let curve_path = run.cfg.output_dir.join("generator_nll.csv");
    write_text(&curve_path, &csv)?;
    if let Some(last) = curve.last() {
        println!("epoch {}: train nll {:.4}, held-out nll {:.4}", last.epoch, last.train_nll, last.heldout_nll);
    }
    run.wrote(&ckpt);
    run.wrote(&curve_path);
    Ok(())
}

fn train_policy(
    run: &mut Run,
    data: &Path,
    out: Option<PathBuf>,
    epochs: Option<usize>,
    resume: Option<PathBuf>,
    zero_scans: bool,
) -> anyhow::Result<()> {
    if let Some(e) = epochs {
        run.cfg.policy.epochs = e;
    }
    run.cfg.policy.zero_scans |= zero_scans;
    let hyper = run.cfg.policy;
    let ds = load_dataset(data).with_context(|| format!("loading {}", data.display()))?;
    let mut trainer = match resume {
        None => PolicyTrainer::new(&ds, hyper)?,
        Some(p) => {
            let (policy, opt) = load_policy(&p)?;
            let Some(opt) = opt else {
                bail!(UsageError(format!("{} has no optimiser state to resume from", p.display())));
            };
            PolicyTrainer::resume(&ds, hyper, policy, opt)?
        }
    };
    let curve = trainer.run(hyper.epochs)?;
    let mut csv = String::from("epoch,train_accuracy,heldout_accuracy\n");
    for p in &curve {
        csv += &format!("{},{},{}\n", p.epoch, p.train_accuracy, p.heldout_accuracy);
    }
    let ckpt = run.path(out, "policy.nmir");
    save_policy(&ckpt, &trainer.policy, Some(&trainer.opt), hyper.seed)?;
    let curve_path = run.cfg.output_dir.join("policy_accuracy.csv");
    write_text(&curve_path, &csv)?;
    if let Some(last) = curve.last() {
        println!(
            "epoch {}: train accuracy {:.4}, held-out accuracy {:.4}",
            last.epoch, last.train_accuracy, last.heldout_accuracy
        );
    }
    run.wrote(&ckpt);
    run.wrote(&curve_path);
    Ok(())
}

fn irl(
    run: &mut Run,
    features: Features,
    rows: Option<usize>,
    cols: Option<usize>,
    report: Option<PathBuf>,
) -> anyhow::Result<()> {
    let spec = match (run.cfg.env, rows, cols) {
        (spec @ EnvSpec::Gridworld { .. }, None, None) => spec,
        (_, r, c) => EnvSpec::gridworld(r.unwrap_or(4), c.unwrap_or(4)),
    };
    spec.validate().map_err(|e| UsageError(e.to_string()))?;
    let mdp = tabular_build(&spec, DEFAULT_DISCOUNT)?;
    let (_, expert) = solve_exact(&mdp)?;
    let phi = match features {
        Features::OneHot => FeatureMap::one_hot(mdp.n_states),
        Features::Compact => FeatureMap::compact_grid(&spec)?,
    };
    let rec = irl_recover(&mdp, &expert, &phi, &run.cfg.irl)?;
    let check = irl_validate(&mdp, &rec.weights, &phi, &expert, 1e-9 * rec.weights.sup_norm().max(1.0))?;
    let path = run.path(report, "irl_report.csv");
    write_text(&path, &check.to_csv())?;
    println!(
        "recovered w after {} iterations (margin {:.3e}); expert optimal in {:.1}% of states",
        rec.iterations,
        rec.margin,
        100.0 * check.optimal_fraction()
    );
    println!("w = {:?}", rec.weights.w);
    run.wrote(&path);
    Ok(())
}

fn load_models(policy: &Path, generator: Option<&Path>) -> anyhow::Result<(PolicyParams, Option<GeneratorModel>)> {
    let (pol, _) = load_policy(policy).with_context(|| format!("loading policy {}", policy.display()))?;
    let gen = match generator {
        None => None,
        Some(p) => Some(load_generator(p).with_context(|| format!("loading generator {}", p.display()))?.0),
    };
    Ok((pol, gen))
}

fn rollout_cmd(
    run: &mut Run,
    policy: &Path,
    generator: Option<&Path>,
    mode: Mode,
    seed: u64,
    max_steps: Option<usize>,
    trace: Option<PathBuf>,
) -> anyhow::Result<()> {
    let mode = ScanMode::from(mode);
    if mode == ScanMode::Generated && generator.is_none() {
        bail!(UsageError("--generator is required with --mode generated".into()));
    }
    let (pol, gen) = load_models(policy, generator)?;
    let mut rc = RolloutConfig::new(mode, seed);
    rc.max_steps = max_steps.unwrap_or(run.cfg.eval.max_steps);
    rc.policy_mode = run.cfg.eval.policy_mode;
    rc.generator_mode = run.cfg.eval.generator_mode;
    let result = rollout(gen.as_ref(), &pol, &run.cfg.env, &rc)?;
    println!(
        "mode={} seed={seed} steps={} success={} agreement={:.4} divergence={:.4}",
        mode.name(),
        result.steps.len(),
        result.success,
        result.agreement(),
        result.mean_divergence()
    );
    if let Some(path) = trace {
        fs::write(&path, encode_rollout(&result, pol.scan_config(), seed)?)
            .with_context(|| format!("writing {}", path.display()))?;
        run.wrote(&path);
    }
    Ok(())
}

fn eval(
    run: &mut Run,
    policy: &Path,
    generator: &Path,
    episodes: Option<usize>,
    seed: Option<u64>,
    out: Option<PathBuf>,
) -> anyhow::Result<()> {
    if let Some(e) = episodes {
        run.cfg.eval.episodes = e;
    }
    if let Some(s) = seed {
        run.cfg.eval.seed = s;
    }
    let (pol, gen) = load_models(policy, Some(generator))?;
    let gen = gen.expect("generator path given");
    let rows = eval_suite(&gen, &pol, &run.cfg.env, &run.cfg.eval)?;
    let csv = metrics_csv(&rows);
    let path = run.path(out, "eval.csv");
    write_text(&path, &csv)?;
    print!("{csv}");
    run.wrote(&path);
    Ok(())
}

fn selftest() -> anyhow::Result<()> {
    let checks = nmir_core::selftest::run_all()?;
    let mut failed = 0;
    for c in &checks {
        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
        failed += usize::from(!c.passed);
    }
    if failed > 0 {
        bail!("{failed} of {} oracle checks failed", checks.len());
    }
    Ok(())
}
