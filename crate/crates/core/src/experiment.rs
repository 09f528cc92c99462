//! End-to-end runs: data → split → normalize → train → evaluate, single or
//! over a grid of settings and seeds.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{self, decouple_pairs, gen_synthetic, load_csv, normalize, split_shuffle, Dataset, NormalizationStats, SplitSpec, Task};
use crate::error::{Error, Result};
use crate::eval::{improvement_vs_baseline, mae, ratio, write_table, MetricKind, MetricsReport};
use crate::models::{Activation, Checkpoint, CycleDirection, MlpSpec, ModelPair};
use crate::plot::{ScatterPlot, Series};
use crate::stability::estimate_lipschitz;
use crate::tensor::Tensor;
use crate::autodiff::LossKind;
use crate::training::{train_with, EpochMetrics, RunStatus, Strategy, TrainOutcome, TrainingPlan, UpdateMode};

/// Where a run's data comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Synthetic {
        task: Task,
        n: usize,
        /// Per-input `(low, high)`; task defaults when absent.
        #[serde(default)]
        ranges: Option<Vec<(f64, f64)>>,
    },
    Csv {
        path: PathBuf,
        x_columns: Vec<String>,
        y_columns: Vec<String>,
    },
}

impl DataSource {
    /// Task id for synthetic data, file stem for CSV data.
    pub fn label(&self) -> String {
        match self {
            DataSource::Synthetic { task, .. } => task.id().to_string(),
            DataSource::Csv { path, .. } => path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "csv".into()),
        }
    }

    pub fn task(&self) -> Option<Task> {
        match self {
            DataSource::Synthetic { task, .. } => Some(*task),
            DataSource::Csv { .. } => None,
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            DataSource::Synthetic { task, n, ranges } => {
                if *n < 3 {
                    return Err(Error::Config(format!("synthetic n must be >= 3, got {n}")));
                }
                task.check_ranges(ranges.as_deref().unwrap_or(&task.default_ranges()))
            }
            DataSource::Csv {
                x_columns,
                y_columns,
                ..
            } => {
                if x_columns.is_empty() || y_columns.is_empty() {
                    return Err(Error::Config("csv source needs x_columns and y_columns".into()));
                }
                Ok(())
            }
        }
    }
}

fn default_hidden() -> Vec<usize> {
    vec![64; 4]
}

fn default_activation() -> Activation {
    Activation::Tanh
}

fn default_true() -> bool {
    true
}

/// Hidden-layer layout of one model; input/output widths come from the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    #[serde(default = "default_true")]
    pub batchnorm: bool,
    #[serde(default)]
    pub dropout: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden: default_hidden(),
            activation: default_activation(),
            batchnorm: true,
            dropout: false,
        }
    }
}

impl ModelConfig {
    pub fn spec(&self, input: usize, output: usize, seed: u64) -> MlpSpec {
        MlpSpec::hidden(input, &self.hidden, output, self.activation, self.batchnorm, self.dropout, seed)
    }

    fn validate(&self) -> Result<()> {
        if self.hidden.contains(&0) {
            return Err(Error::Config("hidden layer widths must be positive".into()));
        }
        Ok(())
    }
}

fn default_lipschitz_pairs() -> usize {
    2000
}

/// Machine form of one experiment. Unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataSource,
    #[serde(default)]
    pub phi: ModelConfig,
    #[serde(default)]
    pub psi: ModelConfig,
    #[serde(default)]
    pub plan: TrainingPlan,
    #[serde(default)]
    pub split: SplitSpec,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    /// Random pairs used for the Lipschitz estimate of Ψ∘Φ; 0 disables it.
    #[serde(default = "default_lipschitz_pairs")]
    pub lipschitz_pairs: usize,
}

impl ExperimentConfig {
    pub fn synthetic(task: Task, n: usize, plan: TrainingPlan, seeds: Vec<u64>) -> Self {
        ExperimentConfig {
            data: DataSource::Synthetic { task, n, ranges: None },
            phi: ModelConfig::default(),
            psi: ModelConfig::default(),
            plan,
            split: SplitSpec::default(),
            seeds,
            output_dir: None,
            lipschitz_pairs: default_lipschitz_pairs(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.phi.validate()?;
        self.psi.validate()?;
        self.plan.validate()?;
        self.split.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::Config("seed list is empty".into()));
        }
        Ok(())
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Config(format!("experiment config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// First 16 hex digits of SHA-256 over the canonical JSON of everything
    /// except the output directory.
    pub fn digest(&self) -> String {
        let mut c = self.clone();
        c.output_dir = None;
        // serde_json::Value keeps object keys sorted, giving a canonical form.
        let canonical = serde_json::to_value(&c).expect("config serializes").to_string();
        hex::encode(&Sha256::digest(canonical.as_bytes())[..8])
    }
}

/// SplitMix64 finalizer, used to derive independent stream seeds.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

mod stream {
    pub const DATA: u64 = 1;
    pub const SPLIT: u64 = 2;
    pub const DECOUPLE_TRAIN: u64 = 3;
    pub const DECOUPLE_VALIDATION: u64 = 4;
    pub const PHI_INIT: u64 = 5;
    pub const PSI_INIT: u64 = 6;
    pub const LIPSCHITZ: u64 = 7;
}

/// Normalized splits for one seed. `train` and `validation` are decoupled
/// for strategies that train on unpaired data; `test` always keeps pairs.
pub struct PreparedData {
    pub train: Dataset,
    pub validation: Dataset,
    pub test: Dataset,
    pub stats: NormalizationStats,
}

pub fn load_source(source: &DataSource, seed: u64) -> Result<Dataset> {
    match source {
        DataSource::Synthetic { task, n, ranges } => {
            let ranges = ranges.clone().unwrap_or_else(|| task.default_ranges());
            gen_synthetic(*task, *n, &ranges, derive_seed(seed, stream::DATA))
        }
        DataSource::Csv {
            path,
            x_columns,
            y_columns,
        } => load_csv(path, x_columns, y_columns),
    }
}

pub fn prepare_data(config: &ExperimentConfig, seed: u64) -> Result<PreparedData> {
    let full = load_source(&config.data, seed)?;
    let split = SplitSpec {
        seed: derive_seed(config.split.seed ^ seed, stream::SPLIT),
        ..config.split
    };
    let parts = split_shuffle(&full, &split)?;
    let (train, stats) = normalize(&parts.train, None)?;
    let (validation, _) = normalize(&parts.validation, Some(&stats))?;
    let (test, _) = normalize(&parts.test, Some(&stats))?;
    let (train, validation) = if config.plan.strategy.needs_decoupled_data() {
        (
            decouple_pairs(&train, derive_seed(seed, stream::DECOUPLE_TRAIN)),
            decouple_pairs(&validation, derive_seed(seed, stream::DECOUPLE_VALIDATION)),
        )
    } else {
        (train, validation)
    };
    Ok(PreparedData {
        train,
        validation,
        test,
        stats,
    })
}

pub fn build_pair(config: &ExperimentConfig, x_dim: usize, y_dim: usize, seed: u64) -> Result<ModelPair> {
    ModelPair::new(
        config.phi.spec(x_dim, y_dim, derive_seed(seed, stream::PHI_INIT)),
        config.psi.spec(y_dim, x_dim, derive_seed(seed, stream::PSI_INIT)),
    )
}

/// Everything a checkpoint needs to be evaluated again later.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunMetadata {
    pub config: ExperimentConfig,
    pub seed: u64,
    pub config_digest: String,
    pub normalization: NormalizationStats,
    pub x_names: Vec<String>,
    pub y_names: Vec<String>,
    pub status: RunStatus,
}

pub type RunCheckpoint = Checkpoint<RunMetadata>;

pub struct RunOutput {
    pub report: MetricsReport,
    pub outcome: TrainOutcome,
    pub pair: ModelPair,
    pub data: PreparedData,
    pub seed: u64,
}

impl RunOutput {
    pub fn checkpoint(&self, config: &ExperimentConfig) -> RunCheckpoint {
        Checkpoint::capture(
            &self.pair,
            RunMetadata {
                config: config.clone(),
                seed: self.seed,
                config_digest: config.digest(),
                normalization: self.data.stats.clone(),
                x_names: self.data.test.x_names.clone(),
                y_names: self.data.test.y_names.clone(),
                status: self.outcome.status.clone(),
            },
        )
    }
}

/// Train one seed of `config`. `on_epoch` sees every completed epoch.
pub fn run_single(
    config: &ExperimentConfig,
    seed: u64,
    on_epoch: impl FnMut(&EpochMetrics),
) -> Result<RunOutput> {
    config.validate()?;
    let data = prepare_data(config, seed)?;
    let mut pair = build_pair(config, data.train.x.cols(), data.train.y.cols(), seed)?;
    let plan = TrainingPlan {
        seed,
        ..config.plan.clone()
    };
    let outcome = train_with(&mut pair, &data.train, Some(&data.validation), &plan, on_epoch)?;
    let mut report = evaluate_run(&pair, &data.test, &data.stats, config, seed)?;
    apply_outcome(&mut report, &outcome);
    Ok(RunOutput {
        report,
        outcome,
        pair,
        data,
        seed,
    })
}

fn apply_outcome(report: &mut MetricsReport, outcome: &TrainOutcome) {
    let last = outcome.final_metrics();
    report.final_l_f = last.map(|m| m.l_f);
    report.final_l_b = last.map(|m| m.l_b);
    report.final_l_total = last.map(|m| m.l_total);
    report.epochs_run = outcome.history.len();
    report.best_epoch = outcome.best_epoch;
    if outcome.status.diverged() {
        mark_diverged(report);
    }
}

fn mark_diverged(report: &mut MetricsReport) {
    report.diverged = true;
    report.forward_error = None;
    report.backward_error = None;
    report.relative_ratio = crate::eval::Ratio::UNDEFINED;
    report.improvement_vs_baseline = None;
}

fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

/// Test-set metrics of a trained pair on normalized, paired data.
pub fn evaluate_run(
    pair: &ModelPair,
    test: &Dataset,
    stats: &NormalizationStats,
    config: &ExperimentConfig,
    seed: u64,
) -> Result<MetricsReport> {
    if test.x.cols() != pair.x_width() || test.y.cols() != pair.y_width() {
        return Err(Error::shape(
            "evaluate",
            format!(
                "dataset {}→{} vs model pair {}→{}",
                test.x.cols(),
                test.y.cols(),
                pair.x_width(),
                pair.y_width()
            ),
        ));
    }
    let phi_x = pair.phi.predict(&test.x)?;
    let psi_y = pair.psi.predict(&test.y)?;
    let forward_direct = mae(&phi_x, &test.y)?;
    let backward_direct = mae(&psi_y, &test.x)?;
    let forward_cycle = mae(&pair.psi.predict(&phi_x)?, &test.x)?;
    let backward_cycle = mae(&pair.phi.predict(&psi_y)?, &test.y)?;
    let backward_truth = match config.data.task() {
        Some(task) => Some(truth_error(task, &psi_y, &test.y, stats)?),
        None => None,
    };
    let strategy = config.plan.strategy;
    let (forward_error, forward_metric) = if strategy == Strategy::Jcm {
        (forward_cycle, MetricKind::CycleReconstruction)
    } else {
        (forward_direct, MetricKind::Direct)
    };
    let backward_error = backward_cycle;
    let lipschitz_cycle = if config.lipschitz_pairs > 0 && test.len() >= 2 {
        let est = estimate_lipschitz(
            |x| {
                let (_, recon) = pair.cycle(x, CycleDirection::Forward)?;
                Ok(recon)
            },
            &test.x,
            config.lipschitz_pairs,
            derive_seed(seed, stream::LIPSCHITZ),
        );
        est.ok().map(|e| e.value).and_then(finite)
    } else {
        None
    };
    let all_finite = [forward_direct, backward_direct, forward_cycle, backward_cycle]
        .iter()
        .all(|v| v.is_finite());
    let mut report = MetricsReport {
        task: config.data.label(),
        strategy,
        variant: plan_variant(&config.plan),
        seed,
        config_digest: config.digest(),
        diverged: false,
        forward_error: finite(forward_error),
        forward_metric,
        backward_error: finite(backward_error),
        backward_metric: MetricKind::CycleReconstruction,
        relative_ratio: ratio(backward_error, forward_error),
        improvement_vs_baseline: None,
        forward_direct: finite(forward_direct),
        forward_cycle: finite(forward_cycle),
        backward_direct: finite(backward_direct),
        backward_cycle: finite(backward_cycle),
        backward_truth: backward_truth.and_then(finite),
        final_l_f: None,
        final_l_b: None,
        final_l_total: None,
        epochs_run: 0,
        best_epoch: None,
        batch_fraction: config.plan.batch_fraction,
        large_batch_risk: config.plan.large_batch_risk(),
        lipschitz_cycle,
    };
    if !all_finite {
        mark_diverged(&mut report);
    }
    Ok(report)
}

/// Label for the plan settings a sweep may vary besides the strategy.
pub fn plan_variant(plan: &TrainingPlan) -> String {
    format!(
        "{} bf={} {} lr={}",
        plan.update_mode.id(),
        plan.batch_fraction,
        plan.loss.id(),
        plan.optimizer.lr()
    )
}

pub const EPOCH_COLUMNS: [&str; 5] = ["epoch", "l_f", "l_b", "l_total", "val_total"];

/// Per-epoch losses as CSV. Wall-clock time is left out so the file is
/// reproducible.
pub fn epochs_csv(history: &[EpochMetrics]) -> Result<String> {
    write_table(
        &EPOCH_COLUMNS,
        history.iter().map(|m| {
            vec![
                m.epoch.to_string(),
                m.l_f.to_string(),
                m.l_b.to_string(),
                m.l_total.to_string(),
                m.val_total.map(|v| v.to_string()).unwrap_or_default(),
            ]
        }),
    )
}

/// `mean|y − f(Ψ(y))|` in normalized units, `f` being the generator.
fn truth_error(task: Task, psi_y: &Tensor, y: &Tensor, stats: &NormalizationStats) -> Result<f64> {
    let x_raw = stats.x.denormalize(psi_y);
    let rows: Vec<Vec<f64>> = (0..x_raw.rows()).map(|r| task.evaluate(x_raw.row(r))).collect();
    let y_hat = stats.y.normalize(&Tensor::from_rows(&rows)?);
    mae(&y_hat, y)
}

/// Re-evaluate a saved run, on the test split it was trained against or on
/// an external raw (unnormalized) dataset.
pub fn evaluate_checkpoint(ck: &RunCheckpoint, external: Option<&Dataset>) -> Result<(MetricsReport, Dataset)> {
    let pair = ck.restore()?;
    let meta = &ck.metadata;
    let test = match external {
        Some(d) => normalize(d, Some(&meta.normalization))?.0,
        None => prepare_data(&meta.config, meta.seed)?.test,
    };
    let mut report = evaluate_run(&pair, &test, &meta.normalization, &meta.config, meta.seed)?;
    if meta.status.diverged() {
        mark_diverged(&mut report);
    }
    Ok((report, test))
}

const PLOT_COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

/// Predictions against targets on `test`, one SVG per direction, named
/// `forward` and `backward`. Values are in normalized units.
pub fn prediction_plots(pair: &ModelPair, test: &Dataset, label: &str) -> Result<Vec<(&'static str, String)>> {
    let mut out = Vec::new();
    for (name, input, target, names) in [
        ("forward", &test.x, &test.y, &test.y_names),
        ("backward", &test.y, &test.x, &test.x_names),
    ] {
        let model = if name == "forward" { &pair.phi } else { &pair.psi };
        let pred = model.predict(input)?;
        let series = (0..target.cols())
            .map(|c| Series {
                label: names[c].as_str(),
                color: PLOT_COLORS[c % PLOT_COLORS.len()],
                points: (0..target.rows()).map(|r| (target.get(r, c), pred.get(r, c))).collect(),
            })
            .collect();
        let title = format!("{label}: {name} predictions");
        let svg = ScatterPlot {
            title: &title,
            x_label: "target",
            y_label: "prediction",
            series,
        }
        .render()?;
        out.push((name, svg));
    }
    Ok(out)
}

/// Value lists for the axes of a sweep. An absent axis keeps the base
/// config's value; a present axis must be non-empty.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepGrid {
    #[serde(default)]
    pub tasks: Option<Vec<Task>>,
    #[serde(default)]
    pub strategies: Option<Vec<Strategy>>,
    #[serde(default)]
    pub update_modes: Option<Vec<UpdateMode>>,
    #[serde(default)]
    pub batch_fractions: Option<Vec<f64>>,
    #[serde(default)]
    pub losses: Option<Vec<LossKind>>,
    #[serde(default)]
    pub learning_rates: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub base: ExperimentConfig,
    #[serde(default)]
    pub grid: SweepGrid,
}

impl SweepConfig {
    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Config(format!("sweep config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }

    /// Every grid point as a full config, validated before anything runs.
    pub fn expand(&self) -> Result<Vec<ExperimentConfig>> {
        fn axis<T: Clone>(name: &str, v: &Option<Vec<T>>, base: T) -> Result<Vec<T>> {
            match v {
                Some(v) if v.is_empty() => Err(Error::Config(format!("sweep axis `{name}` is empty"))),
                Some(v) => Ok(v.clone()),
                None => Ok(vec![base]),
            }
        }
        let b = &self.base;
        let g = &self.grid;
        let tasks: Vec<Option<Task>> = match (&g.tasks, &b.data) {
            (Some(_), DataSource::Csv { .. }) => {
                return Err(Error::Config("sweep over tasks needs a synthetic base data source".into()))
            }
            (Some(t), _) => axis("tasks", &Some(t.clone()), Task::XSquared)?.into_iter().map(Some).collect(),
            (None, _) => vec![None],
        };
        let strategies = axis("strategies", &g.strategies, b.plan.strategy)?;
        let modes = axis("update_modes", &g.update_modes, b.plan.update_mode)?;
        let fractions = axis("batch_fractions", &g.batch_fractions, b.plan.batch_fraction)?;
        let losses = axis("losses", &g.losses, b.plan.loss)?;
        let lrs = axis("learning_rates", &g.learning_rates, b.plan.optimizer.lr())?;
        let mut out = Vec::new();
        for task in &tasks {
            for &strategy in &strategies {
                for &mode in &modes {
                    for &fraction in &fractions {
                        for &loss in &losses {
                            for &lr in &lrs {
                                let mut c = b.clone();
                                if let (Some(t), DataSource::Synthetic { task, ranges, .. }) = (task, &mut c.data) {
                                    if *task != *t {
                                        *ranges = None;
                                    }
                                    *task = *t;
                                }
                                c.plan.strategy = strategy;
                                c.plan.update_mode = mode;
                                c.plan.batch_fraction = fraction;
                                c.plan.loss = loss;
                                c.plan.optimizer = c.plan.optimizer.with_lr(lr);
                                c.validate()?;
                                out.push(c);
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

/// A grid run that failed outright (as opposed to diverging).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunFailure {
    pub task: String,
    pub strategy: Strategy,
    pub seed: u64,
    pub config_digest: String,
    pub error: String,
}

pub struct SweepResult {
    pub reports: Vec<MetricsReport>,
    pub failures: Vec<RunFailure>,
}

/// Run every grid point for every seed, in parallel, then fill
/// improvement-vs-baseline from matched-seed baseline runs (same task,
/// seed and variant) when the grid contains them.
pub fn run_sweep(sweep: &SweepConfig) -> Result<SweepResult> {
    let configs = sweep.expand()?;
    let jobs: Vec<(&ExperimentConfig, u64)> = configs
        .iter()
        .flat_map(|c| c.seeds.iter().map(move |&s| (c, s)))
        .collect();
    let results: Vec<std::result::Result<MetricsReport, RunFailure>> = jobs
        .par_iter()
        .map(|(c, seed)| {
            run_single(c, *seed, |_| {}).map(|r| r.report).map_err(|e| RunFailure {
                task: c.data.label(),
                strategy: c.plan.strategy,
                seed: *seed,
                config_digest: c.digest(),
                error: e.to_string(),
            })
        })
        .collect();
    let mut reports = Vec::new();
    let mut failures = Vec::new();
    for r in results {
        match r {
            Ok(rep) => reports.push(rep),
            Err(f) => failures.push(f),
        }
    }
    fill_improvements(&mut reports);
    Ok(SweepResult { reports, failures })
}

/// Set `improvement_vs_baseline` on non-baseline reports from the baseline
/// report with the same task, seed and variant.
pub fn fill_improvements(reports: &mut [MetricsReport]) {
    let baselines: Vec<(String, u64, String, Option<f64>)> = reports
        .iter()
        .filter(|r| r.strategy == Strategy::Baseline && !r.diverged)
        .map(|r| (r.task.clone(), r.seed, r.variant.clone(), r.backward_error))
        .collect();
    for r in reports.iter_mut().filter(|r| r.strategy != Strategy::Baseline && !r.diverged) {
        let base = baselines
            .iter()
            .find(|(t, s, v, _)| *t == r.task && *s == r.seed && *v == r.variant)
            .and_then(|b| b.3.clone());
        if let (Some(b), Some(c)) = (base, r.backward_error) {
            r.improvement_vs_baseline = improvement_vs_baseline(c, b).ok();
        }
    }
}

/// Write the synthetic dataset for `source`/`seed` plus a manifest.
pub fn write_dataset(source: &DataSource, seed: u64, dir: &Path) -> Result<(PathBuf, PathBuf)> {
    let DataSource::Synthetic { task, n, ranges } = source else {
        return Err(Error::Config("gen-data needs a synthetic source".into()));
    };
    let ranges = ranges.clone().unwrap_or_else(|| task.default_ranges());
    task.check_ranges(&ranges)?;
    let d = gen_synthetic(*task, *n, &ranges, seed)?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let stem = format!("{}_n{}_seed{}", task.id(), n, seed);
    let csv_path = dir.join(format!("{stem}.csv"));
    d.write_csv(&csv_path)?;
    let manifest = DatasetManifest {
        generator: task.id().to_string(),
        n: *n,
        ranges,
        seed,
        x_columns: task.x_names(),
        y_columns: task.y_names(),
        file: csv_path.file_name().expect("file name").to_string_lossy().into_owned(),
    };
    let manifest_path = dir.join(format!("{stem}.manifest.json"));
    let body = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&manifest_path, body).map_err(|e| Error::io(&manifest_path, e))?;
    Ok((csv_path, manifest_path))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub generator: String,
    pub n: usize,
    pub ranges: Vec<(f64, f64)>,
    pub seed: u64,
    pub x_columns: Vec<String>,
    pub y_columns: Vec<String>,
    pub file: String,
}

pub use data::Pairing;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::OptimizerConfig;

    fn small(strategy: Strategy) -> ExperimentConfig {
        let plan = TrainingPlan {
            strategy,
            epochs: 3,
            batch_fraction: 0.1,
            optimizer: OptimizerConfig::adam(3e-3),
            ..TrainingPlan::default()
        };
        let mut c = ExperimentConfig::synthetic(Task::XSquared, 200, plan, vec![1]);
        c.phi.hidden = vec![8];
        c.psi.hidden = vec![8];
        c.lipschitz_pairs = 100;
        c
    }

    #[test]
    fn config_rejects_unknown_keys_and_bad_ranges() {
        let c = small(Strategy::Ucm);
        let json = c.to_json();
        assert_eq!(ExperimentConfig::from_json(&json).unwrap(), c);
        let extra = json.replacen('{', "{\"bogus\": 1,", 1);
        assert!(ExperimentConfig::from_json(&extra).is_err());

        let mut bad = c.clone();
        bad.plan.batch_fraction = 0.6;
        assert!(bad.validate().is_err());
        bad = c.clone();
        bad.plan.alpha_f = 0.5;
        assert!(bad.validate().is_err());
        bad = c.clone();
        bad.plan.beta_b = 1.5;
        assert!(bad.validate().is_err());
        bad = c;
        bad.seeds.clear();
        assert!(bad.validate().is_err());
    }

    #[test]
    fn digest_ignores_output_dir_only() {
        let c = small(Strategy::Ucm);
        let mut d = c.clone();
        d.output_dir = Some("elsewhere".into());
        assert_eq!(c.digest(), d.digest());
        assert_eq!(c.digest().len(), 16);
        d.plan.epochs += 1;
        assert_ne!(c.digest(), d.digest());
    }

    #[test]
    fn derived_seeds_differ_per_stream() {
        assert_ne!(derive_seed(0, 1), derive_seed(0, 2));
        assert_ne!(derive_seed(0, 1), derive_seed(1, 1));
        assert_eq!(derive_seed(5, 3), derive_seed(5, 3));
    }

    #[test]
    fn jcm_trains_on_unpaired_data_and_tests_on_pairs() {
        let d = prepare_data(&small(Strategy::Jcm), 1).unwrap();
        assert_eq!(d.train.pairing, Pairing::Decoupled);
        assert_eq!(d.validation.pairing, Pairing::Decoupled);
        assert_eq!(d.test.pairing, Pairing::Paired);
        let p = prepare_data(&small(Strategy::Ucm), 1).unwrap();
        assert_eq!(p.train.pairing, Pairing::Paired);
    }

    #[test]
    fn single_run_is_reproducible() {
        let c = small(Strategy::Ucm);
        let a = run_single(&c, 1, |_| {}).unwrap();
        let b = run_single(&c, 1, |_| {}).unwrap();
        assert_eq!(a.report, b.report);
        assert_eq!(a.pair, b.pair);
        assert_eq!(a.report.epochs_run, 3);
        assert!(a.report.forward_error.is_some());
        assert!(a.report.lipschitz_cycle.is_some());
    }

    #[test]
    fn checkpoint_reevaluates_identically() {
        let c = small(Strategy::Baseline);
        let run = run_single(&c, 1, |_| {}).unwrap();
        let ck = RunCheckpoint::from_json(&run.checkpoint(&c).to_json().unwrap()).unwrap();
        let (report, _) = evaluate_checkpoint(&ck, None).unwrap();
        let mut expected = run.report.clone();
        expected.final_l_f = None;
        expected.final_l_b = None;
        expected.final_l_total = None;
        expected.epochs_run = 0;
        expected.best_epoch = None;
        assert_eq!(report, expected);
        let plots = prediction_plots(&run.pair, &run.data.test, "x_squared").unwrap();
        assert_eq!(plots.len(), 2);
        assert_eq!(plots[1].0, "backward");
    }

    #[test]
    fn sweep_expands_grid_and_matches_baselines() {
        let sweep = SweepConfig {
            base: small(Strategy::Baseline),
            grid: SweepGrid {
                strategies: Some(vec![Strategy::Baseline, Strategy::Ucm]),
                ..Default::default()
            },
        };
        let mut base = sweep.base.clone();
        base.seeds = vec![1, 2];
        let sweep = SweepConfig { base, ..sweep };
        let res = run_sweep(&sweep).unwrap();
        assert_eq!(res.reports.len(), 4);
        assert!(res.failures.is_empty());
        for r in &res.reports {
            match r.strategy {
                Strategy::Baseline => assert!(r.improvement_vs_baseline.is_none()),
                _ => assert!(r.improvement_vs_baseline.is_some()),
            }
        }
    }

    #[test]
    fn empty_axis_is_rejected_before_running() {
        let sweep = SweepConfig {
            base: small(Strategy::Baseline),
            grid: SweepGrid {
                batch_fractions: Some(vec![]),
                ..Default::default()
            },
        };
        assert!(matches!(sweep.expand(), Err(Error::Config(_))));
        let out_of_range = SweepConfig {
            base: small(Strategy::Baseline),
            grid: SweepGrid {
                batch_fractions: Some(vec![0.01]),
                ..Default::default()
            },
        };
        assert!(out_of_range.expand().is_err());
    }

    #[test]
    fn dataset_files_are_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let src = DataSource::Synthetic {
            task: Task::Spring,
            n: 50,
            ranges: None,
        };
        let (csv_a, man_a) = write_dataset(&src, 7, &dir.path().join("a")).unwrap();
        let (csv_b, man_b) = write_dataset(&src, 7, &dir.path().join("b")).unwrap();
        assert_eq!(std::fs::read(&csv_a).unwrap(), std::fs::read(&csv_b).unwrap());
        assert_eq!(std::fs::read(&man_a).unwrap(), std::fs::read(&man_b).unwrap());
        let text = std::fs::read_to_string(&csv_a).unwrap();
        assert_eq!(text.lines().next().unwrap().split(',').count(), 3);
    }
}
