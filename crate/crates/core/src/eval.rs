//! Direct and cycle-reconstruction errors, per-run reports and multi-seed
//! aggregation.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{loss_eval, LossKind};
use crate::error::{Error, Result};
use crate::models::{CycleDirection, ModelPair};
use crate::tensor::Tensor;
use crate::training::Strategy;

/// Mean absolute residual over all elements.
pub fn mae(prediction: &Tensor, target: &Tensor) -> Result<f64> {
    if prediction.shape() != target.shape() {
        return Err(Error::shape(
            "mae",
            format!("{:?} vs {:?}", prediction.shape(), target.shape()),
        ));
    }
    if prediction.numel() == 0 {
        return Err(Error::Empty("mae of an empty tensor".into()));
    }
    let sum: f64 = prediction
        .data()
        .iter()
        .zip(target.data())
        .map(|(p, t)| (p - t).abs())
        .sum();
    Ok(sum / prediction.numel() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CycleMetric {
    Mae,
    Loss(LossKind),
}

/// Distance between `batch` and its reconstruction through both models,
/// in inference mode.
pub fn cycle_reconstruction_error(
    pair: &ModelPair,
    batch: &Tensor,
    direction: CycleDirection,
    metric: CycleMetric,
) -> Result<f64> {
    let (_, recon) = pair.cycle(batch, direction)?;
    match metric {
        CycleMetric::Mae => mae(&recon, batch),
        CycleMetric::Loss(kind) => loss_eval(kind, &recon, batch),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Direct,
    CycleReconstruction,
}

impl MetricKind {
    fn id(self) -> &'static str {
        match self {
            MetricKind::Direct => "direct",
            MetricKind::CycleReconstruction => "cycle_reconstruction",
        }
    }
}

/// A ratio that may be undefined (zero denominator).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Ratio {
    Value(f64),
    Undefined(UndefinedTag),
}

/// Serialized as the string `"undefined"`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UndefinedTag {
    Undefined,
}

impl Ratio {
    pub const UNDEFINED: Ratio = Ratio::Undefined(UndefinedTag::Undefined);

    pub fn value(self) -> Option<f64> {
        match self {
            Ratio::Value(v) => Some(v),
            Ratio::Undefined(_) => None,
        }
    }
}

impl fmt::Display for Ratio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Ratio::Value(v) => write!(f, "{v}"),
            Ratio::Undefined(_) => f.write_str("undefined"),
        }
    }
}

/// `backward / forward`; undefined when the forward error is not positive.
pub fn ratio(backward: f64, forward: f64) -> Ratio {
    if forward > 0.0 && forward.is_finite() && backward.is_finite() {
        Ratio::Value(backward / forward)
    } else {
        Ratio::UNDEFINED
    }
}

/// `100 · (baseline − candidate) / baseline`.
pub fn improvement_vs_baseline(candidate: f64, baseline: f64) -> Result<f64> {
    if !(baseline > 0.0) {
        return Err(Error::Undefined(format!(
            "improvement against a non-positive baseline error {baseline}"
        )));
    }
    Ok(100.0 * (baseline - candidate) / baseline)
}

/// One training run's evaluation. Error fields are `None` for diverged runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub task: String,
    pub strategy: Strategy,
    /// Non-strategy plan settings that distinguish sweep points.
    pub variant: String,
    pub seed: u64,
    pub config_digest: String,
    pub diverged: bool,
    pub forward_error: Option<f64>,
    pub forward_metric: MetricKind,
    pub backward_error: Option<f64>,
    pub backward_metric: MetricKind,
    pub relative_ratio: Ratio,
    pub improvement_vs_baseline: Option<f64>,
    /// `mean|y − Φ(x)|`.
    pub forward_direct: Option<f64>,
    /// `mean|x − Ψ(Φ(x))|`.
    pub forward_cycle: Option<f64>,
    /// `mean|x − Ψ(y)|`.
    pub backward_direct: Option<f64>,
    /// `mean|y − Φ(Ψ(y))|`.
    pub backward_cycle: Option<f64>,
    /// `mean|y − f(Ψ(y))|` against the generating function, synthetic only.
    pub backward_truth: Option<f64>,
    pub final_l_f: Option<f64>,
    pub final_l_b: Option<f64>,
    pub final_l_total: Option<f64>,
    pub epochs_run: usize,
    pub best_epoch: Option<usize>,
    pub batch_fraction: f64,
    pub large_batch_risk: bool,
    /// Empirical Lipschitz estimate of Ψ∘Φ over the test inputs.
    pub lipschitz_cycle: Option<f64>,
}

impl MetricsReport {
    pub fn relative_error_ratio(&self) -> Ratio {
        match (self.backward_error, self.forward_error) {
            (Some(b), Some(f)) => ratio(b, f),
            _ => Ratio::UNDEFINED,
        }
    }
}

/// Field order of the CSV form.
pub const REPORT_COLUMNS: [&str; 26] = [
    "task",
    "strategy",
    "variant",
    "seed",
    "config_digest",
    "diverged",
    "forward_error",
    "forward_metric",
    "backward_error",
    "backward_metric",
    "relative_ratio",
    "improvement_vs_baseline",
    "forward_direct",
    "forward_cycle",
    "backward_direct",
    "backward_cycle",
    "backward_truth",
    "final_l_f",
    "final_l_b",
    "final_l_total",
    "epochs_run",
    "best_epoch",
    "batch_fraction",
    "large_batch_risk",
    "lipschitz_cycle",
    "status",
];

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

impl MetricsReport {
    fn csv_row(&self) -> Vec<String> {
        vec![
            self.task.clone(),
            self.strategy.id().to_string(),
            self.variant.clone(),
            self.seed.to_string(),
            self.config_digest.clone(),
            self.diverged.to_string(),
            opt(self.forward_error),
            self.forward_metric.id().to_string(),
            opt(self.backward_error),
            self.backward_metric.id().to_string(),
            self.relative_ratio.to_string(),
            opt(self.improvement_vs_baseline),
            opt(self.forward_direct),
            opt(self.forward_cycle),
            opt(self.backward_direct),
            opt(self.backward_cycle),
            opt(self.backward_truth),
            opt(self.final_l_f),
            opt(self.final_l_b),
            opt(self.final_l_total),
            self.epochs_run.to_string(),
            opt(self.best_epoch),
            self.batch_fraction.to_string(),
            self.large_batch_risk.to_string(),
            opt(self.lipschitz_cycle),
            if self.diverged { "diverged" } else { "converged" }.to_string(),
        ]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
}

impl ReportFormat {
    /// From a file extension, defaulting to CSV.
    pub fn for_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("json") => ReportFormat::Json,
            _ => ReportFormat::Csv,
        }
    }
}

pub fn reports_to_csv(reports: &[MetricsReport]) -> Result<String> {
    write_table(&REPORT_COLUMNS, reports.iter().map(MetricsReport::csv_row))
}

pub fn reports_to_json(reports: &[MetricsReport]) -> Result<String> {
    serde_json::to_string_pretty(reports).map_err(|e| Error::Config(e.to_string()))
}

pub fn reports_from_json(s: &str) -> Result<Vec<MetricsReport>> {
    serde_json::from_str(s).map_err(|e| Error::Config(format!("invalid report JSON: {e}")))
}

pub fn report_emit(reports: &[MetricsReport], format: ReportFormat, path: &Path) -> Result<()> {
    let body = match format {
        ReportFormat::Csv => reports_to_csv(reports)?,
        ReportFormat::Json => reports_to_json(reports)?,
    };
    write_file(path, body.as_bytes())
}

/// Write `bytes` to `path`, creating parent directories.
pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_table<I>(header: &[&str], rows: I) -> Result<String>
where
    I: IntoIterator<Item = Vec<String>>,
{
    let mut w = csv::Writer::from_writer(Vec::new());
    let to_err = |e: csv::Error| Error::Config(format!("csv encoding: {e}"));
    w.write_record(header).map_err(to_err)?;
    for row in rows {
        w.write_record(&row).map_err(to_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Config(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Median of finite values; `None` when there are none.
pub fn median(values: &[f64]) -> Option<f64> {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in &idx[i..=j] {
            r[*k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with average ranks for ties. `None` for fewer
/// than two points or a constant sample.
pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma).powi(2);
        vb += (y - mb).powi(2);
    }
    if va == 0.0 || vb == 0.0 {
        return None;
    }
    Some(cov / (va * vb).sqrt())
}

/// Median with range over the converged runs of one group.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    pub median: f64,
    pub min: f64,
    pub max: f64,
}

impl Spread {
    pub fn of(values: &[f64]) -> Option<Spread> {
        let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
        Some(Spread {
            median: median(&finite)?,
            min: finite.iter().copied().fold(f64::INFINITY, f64::min),
            max: finite.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        })
    }
}

/// Aggregate over all seeds of one `(task, strategy, variant)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub task: String,
    pub strategy: Strategy,
    pub variant: String,
    pub runs: usize,
    pub converged: usize,
    pub convergence_rate: f64,
    pub forward_error: Option<Spread>,
    pub backward_error: Option<Spread>,
    pub relative_ratio: Option<Spread>,
    pub improvement_vs_baseline: Option<Spread>,
    pub final_l_total: Option<Spread>,
}

fn spread_of(reports: &[&MetricsReport], f: impl Fn(&MetricsReport) -> Option<f64>) -> Option<Spread> {
    let v: Vec<f64> = reports.iter().filter(|r| !r.diverged).filter_map(|r| f(r)).collect();
    Spread::of(&v)
}

/// Group by `(task, strategy, variant)`; diverged runs count towards the
/// convergence rate only.
pub fn aggregate(reports: &[MetricsReport]) -> Vec<Summary> {
    let mut groups: BTreeMap<(String, Strategy, String), Vec<&MetricsReport>> = BTreeMap::new();
    for r in reports {
        groups.entry((r.task.clone(), r.strategy, r.variant.clone())).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|((task, strategy, variant), rs)| {
            let converged = rs.iter().filter(|r| !r.diverged).count();
            Summary {
                task,
                strategy,
                variant,
                runs: rs.len(),
                converged,
                convergence_rate: converged as f64 / rs.len() as f64,
                forward_error: spread_of(&rs, |r| r.forward_error),
                backward_error: spread_of(&rs, |r| r.backward_error),
                relative_ratio: spread_of(&rs, |r| r.relative_ratio.value()),
                improvement_vs_baseline: spread_of(&rs, |r| r.improvement_vs_baseline),
                final_l_total: spread_of(&rs, |r| r.final_l_total),
            }
        })
        .collect()
}

pub const SUMMARY_COLUMNS: [&str; 21] = [
    "task",
    "strategy",
    "variant",
    "runs",
    "converged",
    "convergence_rate",
    "forward_median",
    "forward_min",
    "forward_max",
    "backward_median",
    "backward_min",
    "backward_max",
    "ratio_median",
    "ratio_min",
    "ratio_max",
    "improvement_median",
    "improvement_min",
    "improvement_max",
    "l_total_median",
    "l_total_min",
    "l_total_max",
];

pub fn summaries_to_csv(summaries: &[Summary]) -> Result<String> {
    let spread = |s: Option<Spread>| match s {
        Some(s) => vec![s.median.to_string(), s.min.to_string(), s.max.to_string()],
        None => vec![String::new(); 3],
    };
    write_table(
        &SUMMARY_COLUMNS,
        summaries.iter().map(|s| {
            let mut row = vec![
                s.task.clone(),
                s.strategy.id().to_string(),
                s.variant.clone(),
                s.runs.to_string(),
                s.converged.to_string(),
                s.convergence_rate.to_string(),
            ];
            row.extend(spread(s.forward_error));
            row.extend(spread(s.backward_error));
            row.extend(spread(s.relative_ratio));
            row.extend(spread(s.improvement_vs_baseline));
            row.extend(spread(s.final_l_total));
            row
        }),
    )
}

/// Task × direction rows with one median-error column per strategy (and
/// variant, when a sweep has several) present.
pub fn comparison_table(summaries: &[Summary]) -> Result<String> {
    let mut columns: Vec<(Strategy, &str)> = summaries.iter().map(|s| (s.strategy, s.variant.as_str())).collect();
    columns.sort();
    columns.dedup();
    let mut variants: Vec<&str> = columns.iter().map(|c| c.1).collect();
    variants.sort();
    variants.dedup();
    let labels: Vec<String> = columns
        .iter()
        .map(|(st, v)| if variants.len() > 1 { format!("{} [{v}]", st.id()) } else { st.id().to_string() })
        .collect();
    let mut header = vec!["task", "direction"];
    header.extend(labels.iter().map(String::as_str));
    let mut tasks: Vec<&str> = summaries.iter().map(|s| s.task.as_str()).collect();
    tasks.dedup();
    let mut rows = Vec::new();
    for task in tasks {
        for (direction, pick) in [
            ("forward", (|s: &Summary| s.forward_error) as fn(&Summary) -> Option<Spread>),
            ("backward", |s: &Summary| s.backward_error),
        ] {
            let mut row = vec![task.to_string(), direction.to_string()];
            for (st, v) in &columns {
                let cell = summaries
                    .iter()
                    .find(|s| s.task == task && s.strategy == *st && s.variant == *v)
                    .and_then(pick)
                    .map(|s| s.median.to_string())
                    .unwrap_or_default();
                row.push(cell);
            }
            rows.push(row);
        }
    }
    write_table(&header, rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{Activation, MlpSpec};

    fn t(rows: usize, cols: usize, v: &[f64]) -> Tensor {
        Tensor::matrix(rows, cols, v.to_vec()).unwrap()
    }

    #[test]
    fn mae_examples() {
        assert_eq!(mae(&t(1, 2, &[1.0, 2.0]), &t(1, 2, &[1.0, 2.0])).unwrap(), 0.0);
        assert_eq!(mae(&t(1, 2, &[0.0, 0.0]), &t(1, 2, &[1.0, -1.0])).unwrap(), 1.0);
        assert!(mae(&t(1, 2, &[0.0, 0.0]), &t(2, 1, &[0.0, 0.0])).is_err());
    }

    fn identity_pair() -> ModelPair {
        let spec = |seed| MlpSpec::hidden(1, &[], 1, Activation::None, false, false, seed);
        let mut pair = ModelPair::new(spec(1), spec(2)).unwrap();
        for g in 0..2 {
            pair.model_mut(g).set_flat_params(&[1.0, 0.0]).unwrap();
        }
        pair
    }

    #[test]
    fn identity_pair_reconstructs_exactly() {
        let pair = identity_pair();
        let b = t(3, 1, &[0.1, 0.5, 0.9]);
        for dir in [CycleDirection::Forward, CycleDirection::Backward] {
            for metric in [CycleMetric::Mae, CycleMetric::Loss(LossKind::L2)] {
                assert_eq!(cycle_reconstruction_error(&pair, &b, dir, metric).unwrap(), 0.0);
            }
        }
        assert!(cycle_reconstruction_error(&pair, &t(1, 2, &[0.0, 0.0]), CycleDirection::Forward, CycleMetric::Mae).is_err());
    }

    #[test]
    fn cycle_error_ignores_row_order() {
        let mut pair = identity_pair();
        pair.phi.set_flat_params(&[2.0, 0.1]).unwrap();
        let a = t(3, 1, &[0.1, 0.5, 0.9]);
        let b = t(3, 1, &[0.9, 0.1, 0.5]);
        let ea = cycle_reconstruction_error(&pair, &a, CycleDirection::Forward, CycleMetric::Mae).unwrap();
        let eb = cycle_reconstruction_error(&pair, &b, CycleDirection::Forward, CycleMetric::Mae).unwrap();
        assert!((ea - eb).abs() < 1e-15);
    }

    #[test]
    fn ratio_examples() {
        assert!((ratio(0.0157, 0.0151).value().unwrap() - 1.0397).abs() < 1e-3);
        assert_eq!(ratio(0.3, 0.3), Ratio::Value(1.0));
        assert!((ratio(0.907, 0.00468).value().unwrap() - 193.8).abs() < 0.1);
        assert_eq!(ratio(0.5, 0.0), Ratio::UNDEFINED);
        assert_eq!(serde_json::to_string(&Ratio::UNDEFINED).unwrap(), "\"undefined\"");
        assert_eq!(serde_json::from_str::<Ratio>("2.5").unwrap(), Ratio::Value(2.5));
    }

    #[test]
    fn improvement_examples() {
        assert_eq!(improvement_vs_baseline(0.4, 0.4).unwrap(), 0.0);
        assert!((improvement_vs_baseline(0.7, 1.0).unwrap() - 30.0).abs() < 1e-12);
        assert!(improvement_vs_baseline(0.1, 0.0).is_err());
        assert!(improvement_vs_baseline(0.1, -1.0).is_err());
    }

    fn report(strategy: Strategy, seed: u64, fwd: f64, bwd: f64, diverged: bool) -> MetricsReport {
        MetricsReport {
            task: "x_squared".into(),
            strategy,
            variant: "v".into(),
            seed,
            config_digest: "abc".into(),
            diverged,
            forward_error: (!diverged).then_some(fwd),
            forward_metric: MetricKind::Direct,
            backward_error: (!diverged).then_some(bwd),
            backward_metric: MetricKind::CycleReconstruction,
            relative_ratio: ratio(bwd, fwd),
            improvement_vs_baseline: None,
            forward_direct: Some(fwd),
            forward_cycle: None,
            backward_direct: None,
            backward_cycle: Some(bwd),
            backward_truth: None,
            final_l_f: Some(0.1),
            final_l_b: Some(0.2),
            final_l_total: Some(0.15),
            epochs_run: 3,
            best_epoch: Some(2),
            batch_fraction: 0.02,
            large_batch_risk: false,
            lipschitz_cycle: None,
        }
    }

    #[test]
    fn empty_csv_is_header_only() {
        let csv = reports_to_csv(&[]).unwrap();
        assert_eq!(csv, format!("{}\n", REPORT_COLUMNS.join(",")));
    }

    #[test]
    fn csv_rows_follow_header() {
        let csv = reports_to_csv(&[report(Strategy::Ucm, 1, 0.01, 0.02, false)]).unwrap();
        let mut lines = csv.lines();
        let header: Vec<_> = lines.next().unwrap().split(',').collect();
        let row: Vec<_> = lines.next().unwrap().split(',').collect();
        assert_eq!(header.len(), row.len());
        assert_eq!(row[1], "ucm");
        assert_eq!(row[10], "2");
    }

    #[test]
    fn json_round_trip() {
        let rs = vec![
            report(Strategy::Baseline, 0, 0.003, 0.33, false),
            report(Strategy::Jcm, 1, 0.0, 0.1, true),
        ];
        let back = reports_from_json(&reports_to_json(&rs).unwrap()).unwrap();
        assert_eq!(back, rs);
    }

    #[test]
    fn median_and_spearman() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&[]), None);
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]), Some(1.0));
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), Some(-1.0));
        assert_eq!(spearman(&[1.0, 1.0], &[1.0, 2.0]), None);
    }

    #[test]
    fn aggregation_skips_diverged_errors() {
        let rs = vec![
            report(Strategy::Jcm, 0, 0.01, 0.02, false),
            report(Strategy::Jcm, 1, 0.03, 0.04, false),
            report(Strategy::Jcm, 2, 9.0, 9.0, true),
            report(Strategy::Ucm, 0, 0.01, 0.01, false),
        ];
        let s = aggregate(&rs);
        assert_eq!(s.len(), 2);
        let jcm = s.iter().find(|s| s.strategy == Strategy::Jcm).unwrap();
        assert_eq!((jcm.runs, jcm.converged), (3, 2));
        assert!((jcm.convergence_rate - 2.0 / 3.0).abs() < 1e-12);
        assert!((jcm.forward_error.unwrap().median - 0.02).abs() < 1e-12);
        assert_eq!(jcm.backward_error.unwrap().max, 0.04);

        let table = comparison_table(&s).unwrap();
        let lines: Vec<_> = table.lines().collect();
        assert_eq!(lines[0], "task,direction,ucm,jcm");
        assert_eq!(lines.len(), 3);
    }
}
