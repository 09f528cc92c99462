use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cyclefit::autodiff::LossKind;
use cyclefit::data::{load_csv, Task};
use cyclefit::eval::{
    aggregate, comparison_table, report_emit, reports_to_csv, reports_to_json, summaries_to_csv, write_file,
    MetricsReport, ReportFormat,
};
use cyclefit::experiment::{
    epochs_csv, evaluate_checkpoint, prediction_plots, run_single, run_sweep, write_dataset, DataSource,
    ExperimentConfig, RunCheckpoint, SweepConfig,
};
use cyclefit::models::{Activation, CycleDirection};
use cyclefit::optim::OptimizerConfig;
use cyclefit::stability::{estimate_lipschitz, run_random_systems, systems_csv, total_summary, write_trajectory, StabilityConfig};
use cyclefit::training::{Strategy, UpdateMode};
use cyclefit::Error;

const OUT_DIR_ENV: &str = "CYCLEFIT_OUT_DIR";
const DEFAULT_OUT_DIR: &str = "runs";
const DEFAULT_N: usize = 20_000;

mod exit {
    pub const VIOLATION: u8 = 1;
    pub const CONFIG: u8 = 2;
    pub const DIVERGED: u8 = 3;
    pub const IO: u8 = 4;
}

#[derive(Parser)]
#[command(name = "cyclefit", version, about = "Cycle-consistent forward/backward regression")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset and its manifest.
    GenData(GenDataArgs),
    /// Train a model pair and write checkpoint, epoch losses and report.
    Train(TrainArgs),
    /// Evaluate a checkpoint, optionally emitting prediction plots.
    Eval(EvalArgs),
    /// Run a grid of settings over seeds and aggregate the results.
    Sweep(SweepArgs),
    /// Simulate perturbed contraction maps and check the Lyapunov decrease.
    Stability(StabilityArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    task: String,
    #[arg(long, default_value_t = DEFAULT_N)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Input range `LOW:HIGH`, once per input column.
    #[arg(long = "range", value_parser = parse_range)]
    ranges: Vec<(f64, f64)>,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Flags shared by `train` and `sweep`; each overrides the config file.
#[derive(Args, Default)]
struct ExperimentArgs {
    /// JSON experiment config.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    task: Option<String>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long = "range", value_parser = parse_range)]
    ranges: Vec<(f64, f64)>,
    /// CSV dataset; needs --x-cols and --y-cols.
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    x_cols: Vec<String>,
    #[arg(long, value_delimiter = ',')]
    y_cols: Vec<String>,
    #[arg(long)]
    strategy: Option<Strategy>,
    #[arg(long)]
    update_mode: Option<UpdateMode>,
    #[arg(long)]
    loss: Option<LossKind>,
    #[arg(long)]
    mapping_loss: Option<LossKind>,
    /// `adam` or `sgd`.
    #[arg(long)]
    optimizer: Option<String>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_fraction: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    alpha_f: Option<f64>,
    #[arg(long)]
    alpha_b: Option<f64>,
    #[arg(long)]
    beta_f: Option<f64>,
    #[arg(long)]
    beta_b: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    keep_best: Option<bool>,
    /// Hidden widths for both models, e.g. `64,64,64,64`.
    #[arg(long, value_delimiter = ',')]
    hidden: Vec<usize>,
    #[arg(long)]
    activation: Option<Activation>,
    #[arg(long)]
    batchnorm: Option<bool>,
    #[arg(long)]
    dropout: Option<bool>,
    /// Seeds to run; replaces the config's list.
    #[arg(long = "seed", value_delimiter = ',')]
    seeds: Vec<u64>,
    /// Train/validation/test fractions, e.g. `0.8,0.1,0.1`.
    #[arg(long, value_delimiter = ',')]
    split: Vec<f64>,
    #[arg(long)]
    lipschitz_pairs: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    exp: ExperimentArgs,
    /// Print per-epoch losses to stderr.
    #[arg(long)]
    verbose: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Raw CSV to evaluate on instead of the checkpoint's own test split.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// `csv`, `json` or `both`.
    #[arg(long, default_value = "both")]
    format: String,
    #[arg(long)]
    plot: bool,
}

#[derive(Args)]
struct SweepArgs {
    /// JSON sweep config: `{"base": <experiment config>, "grid": {...}}`.
    #[arg(long)]
    sweep_config: Option<PathBuf>,
    #[command(flatten)]
    exp: ExperimentArgs,
    #[arg(long, value_delimiter = ',')]
    tasks: Vec<String>,
    #[arg(long, value_delimiter = ',')]
    strategies: Vec<Strategy>,
    #[arg(long, value_delimiter = ',')]
    update_modes: Vec<UpdateMode>,
    #[arg(long, value_delimiter = ',')]
    batch_fractions: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    losses: Vec<LossKind>,
    #[arg(long, value_delimiter = ',')]
    learning_rates: Vec<f64>,
}

#[derive(Args)]
struct StabilityArgs {
    /// JSON stability config.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    systems: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    /// Fixed Lipschitz bound for every system.
    #[arg(long, conflicts_with = "lipschitz_range")]
    lipschitz: Option<f64>,
    /// `LOW:HIGH` range the Lipschitz bounds are drawn from.
    #[arg(long, value_parser = parse_range)]
    lipschitz_range: Option<(f64, f64)>,
    #[arg(long)]
    delta_fraction: Option<f64>,
    #[arg(long)]
    delta_max: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Estimate the Lipschitz constants of a trained pair's cycles instead.
    #[arg(long)]
    from_checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 2000)]
    pairs: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_range(s: &str) -> Result<(f64, f64), String> {
    let (a, b) = s.split_once(':').ok_or_else(|| format!("expected LOW:HIGH, got `{s}`"))?;
    let lo = a.trim().parse::<f64>().map_err(|e| format!("`{a}`: {e}"))?;
    let hi = b.trim().parse::<f64>().map_err(|e| format!("`{b}`: {e}"))?;
    Ok((lo, hi))
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io { .. } | Error::Csv { .. } | Error::Json { .. } | Error::Checkpoint(_) => exit::IO,
        _ => exit::CONFIG,
    }
}

fn out_dir(flag: Option<&Path>, config: Option<&Path>) -> PathBuf {
    flag.map(Path::to_path_buf)
        .or_else(|| config.map(Path::to_path_buf))
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR))
}

fn write_text(path: &Path, text: &str) -> cyclefit::Result<()> {
    write_file(path, text.as_bytes())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Sweep(a) => sweep(a),
        Command::Stability(a) => stability(a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn gen_data(a: GenDataArgs) -> cyclefit::Result<u8> {
    let task = Task::from_id(&a.task)?;
    let source = DataSource::Synthetic {
        task,
        n: a.n,
        ranges: (!a.ranges.is_empty()).then_some(a.ranges),
    };
    let dir = out_dir(a.out.as_deref(), None);
    let (csv, manifest) = write_dataset(&source, a.seed, &dir)?;
    println!("{}", csv.display());
    println!("{}", manifest.display());
    Ok(0)
}

/// Base config from `--config` (or the flags alone), then flag overrides.
fn resolve_experiment(a: &ExperimentArgs, base: Option<ExperimentConfig>) -> cyclefit::Result<ExperimentConfig> {
    let from_file = match &a.config {
        Some(p) => Some(ExperimentConfig::load(p)?),
        None => base,
    };
    let mut c = match from_file {
        Some(c) => c,
        None => {
            let data = if let Some(path) = &a.csv {
                DataSource::Csv {
                    path: path.clone(),
                    x_columns: a.x_cols.clone(),
                    y_columns: a.y_cols.clone(),
                }
            } else if let Some(t) = &a.task {
                DataSource::Synthetic {
                    task: Task::from_id(t)?,
                    n: a.n.unwrap_or(DEFAULT_N),
                    ranges: None,
                }
            } else {
                return Err(Error::Config("give --config, --task or --csv".into()));
            };
            ExperimentConfig {
                data,
                ..ExperimentConfig::synthetic(Task::XSquared, DEFAULT_N, Default::default(), vec![0])
            }
        }
    };
    if let Some(path) = &a.csv {
        c.data = DataSource::Csv {
            path: path.clone(),
            x_columns: a.x_cols.clone(),
            y_columns: a.y_cols.clone(),
        };
    } else if let Some(t) = &a.task {
        let task = Task::from_id(t)?;
        let n = match &c.data {
            DataSource::Synthetic { n, .. } => *n,
            DataSource::Csv { .. } => DEFAULT_N,
        };
        c.data = DataSource::Synthetic { task, n, ranges: None };
    }
    if let DataSource::Synthetic { n, ranges, .. } = &mut c.data {
        if let Some(v) = a.n {
            *n = v;
        }
        if !a.ranges.is_empty() {
            *ranges = Some(a.ranges.clone());
        }
    }
    let p = &mut c.plan;
    if let Some(v) = a.strategy {
        p.strategy = v;
    }
    if let Some(v) = a.update_mode {
        p.update_mode = v;
    }
    if let Some(v) = a.loss {
        p.loss = v;
    }
    if let Some(v) = a.mapping_loss {
        p.mapping_loss = Some(v);
    }
    if let Some(o) = &a.optimizer {
        let lr = p.optimizer.lr();
        p.optimizer = match o.as_str() {
            "adam" => OptimizerConfig::adam(lr),
            "sgd" => OptimizerConfig::sgd(lr),
            _ => return Err(Error::Config(format!("unknown optimizer `{o}` (adam, sgd)"))),
        };
    }
    if let Some(v) = a.lr {
        p.optimizer = p.optimizer.with_lr(v);
    }
    if let Some(v) = a.batch_fraction {
        p.batch_fraction = v;
    }
    if let Some(v) = a.epochs {
        p.epochs = v;
    }
    for (flag, field) in [
        (a.alpha_f, &mut p.alpha_f),
        (a.alpha_b, &mut p.alpha_b),
        (a.beta_f, &mut p.beta_f),
        (a.beta_b, &mut p.beta_b),
        (a.weight_decay, &mut p.weight_decay),
    ] {
        if let Some(v) = flag {
            *field = v;
        }
    }
    if let Some(v) = a.keep_best {
        p.keep_best = v;
    }
    for m in [&mut c.phi, &mut c.psi] {
        if !a.hidden.is_empty() {
            m.hidden = a.hidden.clone();
        }
        if let Some(v) = a.activation {
            m.activation = v;
        }
        if let Some(v) = a.batchnorm {
            m.batchnorm = v;
        }
        if let Some(v) = a.dropout {
            m.dropout = v;
        }
    }
    if !a.seeds.is_empty() {
        c.seeds = a.seeds.clone();
    }
    if !a.split.is_empty() {
        let [train, validation, test] = a.split[..] else {
            return Err(Error::Config("--split needs three fractions".into()));
        };
        c.split.train = train;
        c.split.validation = validation;
        c.split.test = test;
    }
    if let Some(v) = a.lipschitz_pairs {
        c.lipschitz_pairs = v;
    }
    if let Some(v) = &a.out {
        c.output_dir = Some(v.clone());
    }
    c.validate()?;
    Ok(c)
}

fn train(a: TrainArgs) -> cyclefit::Result<u8> {
    let config = resolve_experiment(&a.exp, None)?;
    let root = out_dir(a.exp.out.as_deref(), config.output_dir.as_deref());
    let snapshot = ExperimentConfig {
        output_dir: None,
        ..config.clone()
    };
    let mut code = 0;
    for &seed in &config.seeds {
        let dir = if config.seeds.len() == 1 {
            root.clone()
        } else {
            root.join(format!("seed_{seed}"))
        };
        let verbose = a.verbose;
        let run = run_single(&snapshot, seed, |m| {
            if verbose {
                eprintln!("seed {seed} epoch {:>4}  L_f {:.6e}  L_b {:.6e}  L_total {:.6e}", m.epoch, m.l_f, m.l_b, m.l_total);
            }
        })?;
        let single = ExperimentConfig {
            seeds: vec![seed],
            ..snapshot.clone()
        };
        write_text(&dir.join("config.json"), &single.to_json())?;
        run.checkpoint(&snapshot).save(&dir.join("checkpoint.json"))?;
        write_text(&dir.join("epochs.csv"), &epochs_csv(&run.outcome.history)?)?;
        let reports = std::slice::from_ref(&run.report);
        report_emit(reports, ReportFormat::Csv, &dir.join("report.csv"))?;
        report_emit(reports, ReportFormat::Json, &dir.join("report.json"))?;
        print_report(&run.report);
        if run.report.large_batch_risk {
            eprintln!(
                "warning: batch fraction {} is above the large-batch risk threshold",
                run.report.batch_fraction
            );
        }
        if run.report.diverged {
            eprintln!("seed {seed} diverged: {:?}", run.outcome.status);
            code = exit::DIVERGED;
        }
        println!("wrote {}", dir.display());
    }
    Ok(code)
}

fn fmt(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.6}")).unwrap_or_else(|| "-".into())
}

fn print_report(r: &MetricsReport) {
    println!(
        "{} {} seed {}: forward {} backward {} ratio {} ({})",
        r.task,
        r.strategy.id(),
        r.seed,
        fmt(r.forward_error),
        fmt(r.backward_error),
        r.relative_ratio,
        if r.diverged { "diverged" } else { "converged" }
    );
}

fn eval(a: EvalArgs) -> cyclefit::Result<u8> {
    let ck = RunCheckpoint::load(&a.checkpoint)?;
    let external = match &a.data {
        Some(p) => Some(load_csv(p, &ck.metadata.x_names, &ck.metadata.y_names)?),
        None => None,
    };
    let (report, test) = evaluate_checkpoint(&ck, external.as_ref())?;
    let dir = a
        .out
        .clone()
        .or_else(|| a.checkpoint.parent().map(Path::to_path_buf))
        .unwrap_or_default();
    let reports = std::slice::from_ref(&report);
    let formats: &[ReportFormat] = match a.format.as_str() {
        "csv" => &[ReportFormat::Csv],
        "json" => &[ReportFormat::Json],
        "both" => &[ReportFormat::Csv, ReportFormat::Json],
        f => return Err(Error::Config(format!("unknown format `{f}` (csv, json, both)"))),
    };
    for f in formats {
        let name = match f {
            ReportFormat::Csv => "eval_report.csv",
            ReportFormat::Json => "eval_report.json",
        };
        report_emit(reports, *f, &dir.join(name))?;
    }
    print_report(&report);
    if a.plot {
        let pair = ck.restore()?;
        for (name, svg) in prediction_plots(&pair, &test, &report.task)? {
            let path = dir.join(format!("{name}.svg"));
            write_text(&path, &svg)?;
            println!("wrote {}", path.display());
        }
    }
    Ok(0)
}

fn sweep(a: SweepArgs) -> cyclefit::Result<u8> {
    let mut sw = match &a.sweep_config {
        Some(p) => SweepConfig::load(p)?,
        None => SweepConfig {
            base: resolve_experiment(&a.exp, None)?,
            grid: Default::default(),
        },
    };
    if a.sweep_config.is_some() {
        sw.base = resolve_experiment(&a.exp, Some(sw.base))?;
    }
    let g = &mut sw.grid;
    if !a.tasks.is_empty() {
        g.tasks = Some(a.tasks.iter().map(|t| Task::from_id(t)).collect::<cyclefit::Result<_>>()?);
    }
    if !a.strategies.is_empty() {
        g.strategies = Some(a.strategies.clone());
    }
    if !a.update_modes.is_empty() {
        g.update_modes = Some(a.update_modes.clone());
    }
    if !a.batch_fractions.is_empty() {
        g.batch_fractions = Some(a.batch_fractions.clone());
    }
    if !a.losses.is_empty() {
        g.losses = Some(a.losses.clone());
    }
    if !a.learning_rates.is_empty() {
        g.learning_rates = Some(a.learning_rates.clone());
    }
    let dir = out_dir(a.exp.out.as_deref(), sw.base.output_dir.as_deref());
    sw.base.output_dir = None;
    let jobs = sw.expand()?.iter().map(|c| c.seeds.len()).sum::<usize>();
    eprintln!("sweep: {jobs} runs");
    let result = run_sweep(&sw)?;
    write_text(&dir.join("sweep_config.json"), &serde_json::to_string_pretty(&sw).expect("serializable"))?;
    write_text(&dir.join("runs.csv"), &reports_to_csv(&result.reports)?)?;
    write_text(&dir.join("runs.json"), &reports_to_json(&result.reports)?)?;
    let summaries = aggregate(&result.reports);
    write_text(&dir.join("summary.csv"), &summaries_to_csv(&summaries)?)?;
    let table = comparison_table(&summaries)?;
    write_text(&dir.join("comparison.csv"), &table)?;
    write_text(
        &dir.join("failures.json"),
        &serde_json::to_string_pretty(&result.failures).expect("serializable"),
    )?;
    print!("{table}");
    for s in &summaries {
        println!(
            "{} {} [{}]: converged {}/{}",
            s.task,
            s.strategy.id(),
            s.variant,
            s.converged,
            s.runs
        );
    }
    for f in &result.failures {
        eprintln!("run failed: {} {} seed {}: {}", f.task, f.strategy.id(), f.seed, f.error);
    }
    println!("wrote {}", dir.display());
    Ok(0)
}

fn stability(a: StabilityArgs) -> cyclefit::Result<u8> {
    let dir = out_dir(a.out.as_deref(), None);
    if let Some(path) = &a.from_checkpoint {
        return lipschitz_of_checkpoint(path, a.pairs, &dir);
    }
    let mut c = match &a.config {
        Some(p) => {
            let s = std::fs::read_to_string(p).map_err(|e| Error::Io {
                path: p.clone(),
                source: e,
            })?;
            serde_json::from_str(&s).map_err(|e| Error::Config(format!("stability config: {e}")))?
        }
        None => StabilityConfig::default(),
    };
    if let Some(v) = a.systems {
        c.systems = v;
    }
    if let Some(v) = a.dim {
        c.dim = v;
    }
    if let Some(l) = a.lipschitz {
        c.lipschitz = (l, l);
    }
    if let Some(r) = a.lipschitz_range {
        c.lipschitz = r;
    }
    if let Some(v) = a.delta_fraction {
        c.delta_fraction = v;
    }
    if a.delta_max.is_some() {
        c.delta_max = a.delta_max;
    }
    if let Some(v) = a.steps {
        c.steps = v;
    }
    if let Some(v) = a.seed {
        c.seed = v;
    }
    c.validate()?;
    let runs = run_random_systems(&c)?;
    let width = runs.len().saturating_sub(1).to_string().len().max(4);
    for r in &runs {
        let path = dir.join("trajectories").join(format!("system_{:0width$}.csv", r.index));
        write_trajectory(&path, &r.record, &r.report)?;
    }
    write_text(&dir.join("systems.csv"), &systems_csv(&runs)?)?;
    let total = total_summary(&runs);
    let summary = serde_json::json!({ "config": c, "summary": total, "ok": total.ok() });
    write_text(&dir.join("summary.json"), &serde_json::to_string_pretty(&summary).expect("serializable"))?;
    println!(
        "{} systems, {} steps: {} condition met, {} decreased, {} not met, {} violations, {} bound failures",
        runs.len(),
        total.steps,
        total.condition_met,
        total.decreased,
        total.steps - total.condition_met,
        total.violations,
        total.bound_failures
    );
    println!("wrote {}", dir.display());
    Ok(if total.ok() { 0 } else { exit::VIOLATION })
}

fn lipschitz_of_checkpoint(path: &Path, pairs: usize, dir: &Path) -> cyclefit::Result<u8> {
    let ck = RunCheckpoint::load(path)?;
    let pair = ck.restore()?;
    let (_, test) = evaluate_checkpoint(&ck, None)?;
    let seed = ck.metadata.seed;
    let forward = estimate_lipschitz(|x| Ok(pair.cycle(x, CycleDirection::Forward)?.1), &test.x, pairs, seed)?;
    let backward = estimate_lipschitz(|y| Ok(pair.cycle(y, CycleDirection::Backward)?.1), &test.y, pairs, seed)?;
    let out = serde_json::json!({
        "checkpoint": path,
        "psi_after_phi": forward,
        "phi_after_psi": backward,
    });
    write_text(&dir.join("lipschitz.json"), &serde_json::to_string_pretty(&out).expect("serializable"))?;
    println!("Lipschitz estimate of Ψ∘Φ: {:.6} ({} pairs)", forward.value, forward.pairs);
    println!("Lipschitz estimate of Φ∘Ψ: {:.6} ({} pairs)", backward.value, backward.pairs);
    Ok(0)
}
