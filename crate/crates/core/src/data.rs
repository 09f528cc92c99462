//! Synthetic task generators, CSV ingestion, min-max normalization,
//! shuffled splits and pair decoupling.

use std::f64::consts::PI;
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Closed-form generators with an injective forward direction and a
/// multi-valued backward direction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    /// y = x²
    XSquared,
    /// y = sin x
    Sin,
    /// y = sin² x
    SinSquared,
    /// y = x² sin x
    X2Sin,
    /// y = exp(−x²)
    ExpNegX2,
    /// y = x² / (1 + x²)
    X2Rational,
    /// y = x³ sin x + x² cos x
    X3SinX2Cos,
    /// y = sin x + sin 2x + sin 3x
    SinHarmonics,
    /// y = x⁴ − 2x³ + 3x² − 4x + 5 + x
    Quartic,
    /// y = sin x + exp(−x) + x³
    SinExpCubic,
    /// y = exp(−x²) sin x + x³ cos x
    GaussSinCubic,
    /// f = √(k/m) / 2π, inputs (k, m)
    Spring,
}

impl Task {
    pub const ALL: [Task; 12] = [
        Task::XSquared,
        Task::Sin,
        Task::SinSquared,
        Task::X2Sin,
        Task::ExpNegX2,
        Task::X2Rational,
        Task::X3SinX2Cos,
        Task::SinHarmonics,
        Task::Quartic,
        Task::SinExpCubic,
        Task::GaussSinCubic,
        Task::Spring,
    ];

    pub fn id(self) -> &'static str {
        match self {
            Task::XSquared => "x_squared",
            Task::Sin => "sin",
            Task::SinSquared => "sin_squared",
            Task::X2Sin => "x2_sin",
            Task::ExpNegX2 => "exp_neg_x2",
            Task::X2Rational => "x2_rational",
            Task::X3SinX2Cos => "x3sin_x2cos",
            Task::SinHarmonics => "sin_harmonics",
            Task::Quartic => "quartic",
            Task::SinExpCubic => "sin_exp_cubic",
            Task::GaussSinCubic => "gauss_sin_cubic",
            Task::Spring => "spring",
        }
    }

    pub fn from_id(id: &str) -> Result<Self> {
        Task::ALL
            .into_iter()
            .find(|t| t.id() == id)
            .ok_or_else(|| Error::UnknownTask {
                given: id.to_string(),
                valid: Task::ALL.map(Task::id).join(", "),
            })
    }

    pub fn x_dim(self) -> usize {
        if self == Task::Spring {
            2
        } else {
            1
        }
    }

    pub fn y_dim(self) -> usize {
        1
    }

    pub fn x_names(self) -> Vec<String> {
        match self {
            Task::Spring => vec!["k".into(), "m".into()],
            _ => vec!["x".into()],
        }
    }

    pub fn y_names(self) -> Vec<String> {
        match self {
            Task::Spring => vec!["f".into()],
            _ => vec!["y".into()],
        }
    }

    pub fn default_ranges(self) -> Vec<(f64, f64)> {
        match self {
            Task::Spring => vec![(0.5, 5.0), (0.5, 5.0)],
            _ => vec![(-3.0, 3.0)],
        }
    }

    /// Exact target for one input row.
    pub fn evaluate(self, x: &[f64]) -> Vec<f64> {
        let v = x[0];
        let y = match self {
            Task::XSquared => v * v,
            Task::Sin => v.sin(),
            Task::SinSquared => v.sin().powi(2),
            Task::X2Sin => v * v * v.sin(),
            Task::ExpNegX2 => (-v * v).exp(),
            Task::X2Rational => v * v / (1.0 + v * v),
            Task::X3SinX2Cos => v.powi(3) * v.sin() + v * v * v.cos(),
            Task::SinHarmonics => v.sin() + (2.0 * v).sin() + (3.0 * v).sin(),
            Task::Quartic => v.powi(4) - 2.0 * v.powi(3) + 3.0 * v * v - 4.0 * v + 5.0 + v,
            Task::SinExpCubic => v.sin() + (-v).exp() + v.powi(3),
            Task::GaussSinCubic => (-v * v).exp() * v.sin() + v.powi(3) * v.cos(),
            Task::Spring => (x[0] / x[1]).sqrt() / (2.0 * PI),
        };
        vec![y]
    }

    pub fn check_ranges(self, ranges: &[(f64, f64)]) -> Result<()> {
        if ranges.len() != self.x_dim() {
            return Err(Error::Config(format!(
                "task {} needs {} input ranges, got {}",
                self.id(),
                self.x_dim(),
                ranges.len()
            )));
        }
        for &(lo, hi) in ranges {
            if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
                return Err(Error::Config(format!("invalid range [{lo}, {hi}]")));
            }
        }
        if self == Task::Spring && ranges[1].0 <= 0.0 {
            return Err(Error::Config(format!(
                "spring mass range [{}, {}] must stay above 0",
                ranges[1].0, ranges[1].1
            )));
        }
        Ok(())
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pairing {
    Paired,
    Decoupled,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub x: Tensor,
    pub y: Tensor,
    pub x_names: Vec<String>,
    pub y_names: Vec<String>,
    pub pairing: Pairing,
}

impl Dataset {
    pub fn new(x: Tensor, y: Tensor, x_names: Vec<String>, y_names: Vec<String>) -> Result<Self> {
        if x.rows() != y.rows() {
            return Err(Error::shape(
                "dataset",
                format!("{} x rows vs {} y rows", x.rows(), y.rows()),
            ));
        }
        if x_names.len() != x.cols() || y_names.len() != y.cols() {
            return Err(Error::shape("dataset", "column names do not match widths"));
        }
        Ok(Dataset {
            x,
            y,
            x_names,
            y_names,
            pairing: Pairing::Paired,
        })
    }

    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, idx: &[usize]) -> Dataset {
        Dataset {
            x: self.x.select_rows(idx),
            y: self.y.select_rows(idx),
            x_names: self.x_names.clone(),
            y_names: self.y_names.clone(),
            pairing: self.pairing,
        }
    }

    /// Write `x` then `y` columns with a header row. Values use Rust's
    /// shortest round-trip float formatting.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let csv_err = |source| Error::Csv {
            path: path.to_path_buf(),
            source,
        };
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        let header: Vec<&str> = self
            .x_names
            .iter()
            .chain(&self.y_names)
            .map(String::as_str)
            .collect();
        w.write_record(&header).map_err(csv_err)?;
        for r in 0..self.len() {
            let rec: Vec<String> = self
                .x
                .row(r)
                .iter()
                .chain(self.y.row(r))
                .map(|v| v.to_string())
                .collect();
            w.write_record(&rec).map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Uniform samples of a synthetic task. Pure in `(task, n, ranges, seed)`.
pub fn gen_synthetic(task: Task, n: usize, ranges: &[(f64, f64)], seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::Empty("synthetic dataset needs n >= 1".into()));
    }
    task.check_ranges(ranges)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dx = task.x_dim();
    let mut xs = Vec::with_capacity(n * dx);
    let mut ys = Vec::with_capacity(n * task.y_dim());
    for _ in 0..n {
        let row: Vec<f64> = ranges.iter().map(|&(lo, hi)| rng.random_range(lo..hi)).collect();
        ys.extend(task.evaluate(&row));
        xs.extend(row);
    }
    Dataset::new(
        Tensor::matrix(n, dx, xs)?,
        Tensor::matrix(n, task.y_dim(), ys)?,
        task.x_names(),
        task.y_names(),
    )
}

/// Read a headered CSV, taking the named columns as `x` and `y`.
pub fn load_csv(path: &Path, x_columns: &[String], y_columns: &[String]) -> Result<Dataset> {
    let csv_err = |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)
        .map_err(csv_err)?;
    let header = reader.headers().map_err(csv_err)?.clone();
    let locate = |name: &String| {
        header
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::MissingColumn(name.clone()))
    };
    let xi: Vec<usize> = x_columns.iter().map(locate).collect::<Result<_>>()?;
    let yi: Vec<usize> = y_columns.iter().map(locate).collect::<Result<_>>()?;
    if xi.is_empty() || yi.is_empty() {
        return Err(Error::Config("need at least one x and one y column".into()));
    }
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut rows = 0;
    for (r, record) in reader.records().enumerate() {
        let record = record.map_err(csv_err)?;
        // data rows are numbered from 1, after the header
        let row = r + 1;
        if record.len() != header.len() {
            return Err(Error::RaggedRow {
                row,
                expected: header.len(),
                found: record.len(),
            });
        }
        let parse = |c: usize| {
            let cell = record[c].trim();
            cell.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::ParseCell {
                    row,
                    column: header[c].to_string(),
                    value: cell.to_string(),
                })
        };
        for &c in &xi {
            xs.push(parse(c)?);
        }
        for &c in &yi {
            ys.push(parse(c)?);
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(Error::Empty(format!("{} has no data rows", path.display())));
    }
    Dataset::new(
        Tensor::matrix(rows, xi.len(), xs)?,
        Tensor::matrix(rows, yi.len(), ys)?,
        x_columns.to_vec(),
        y_columns.to_vec(),
    )
}

/// Per-column min/max of one side of a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColumnRange {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl ColumnRange {
    fn of(t: &Tensor) -> Self {
        let c = t.cols();
        let mut min = vec![f64::INFINITY; c];
        let mut max = vec![f64::NEG_INFINITY; c];
        for r in 0..t.rows() {
            for (j, &v) in t.row(r).iter().enumerate() {
                min[j] = min[j].min(v);
                max[j] = max[j].max(v);
            }
        }
        ColumnRange { min, max }
    }

    /// `(v − min) / (max − min)`, constant columns mapping to 0.
    pub fn normalize(&self, t: &Tensor) -> Tensor {
        self.columnwise(t, |v, lo, hi| if hi > lo { (v - lo) / (hi - lo) } else { 0.0 })
    }

    /// Inverse of [`ColumnRange::normalize`]; constant columns map back to
    /// their single value.
    pub fn denormalize(&self, t: &Tensor) -> Tensor {
        self.columnwise(t, |v, lo, hi| if hi > lo { v * (hi - lo) + lo } else { lo })
    }

    fn columnwise(&self, t: &Tensor, f: impl Fn(f64, f64, f64) -> f64) -> Tensor {
        let c = t.cols();
        let data = t
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let j = i % c;
                f(v, self.min[j], self.max[j])
            })
            .collect();
        Tensor::new(t.shape().to_vec(), data).expect("shape preserved")
    }
}

/// Min/max of every column, captured on the training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormalizationStats {
    pub x: ColumnRange,
    pub y: ColumnRange,
}

impl NormalizationStats {
    pub fn fit(d: &Dataset) -> Result<Self> {
        if d.is_empty() {
            return Err(Error::Empty("cannot normalize an empty dataset".into()));
        }
        Ok(NormalizationStats {
            x: ColumnRange::of(&d.x),
            y: ColumnRange::of(&d.y),
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Config(format!("normalization stats: {e}")))
    }
}

/// Min-max normalize. With `stats == None` the statistics are fitted on
/// `d` itself; supplied statistics are applied as-is and results are not
/// clipped to `[0, 1]`.
pub fn normalize(d: &Dataset, stats: Option<&NormalizationStats>) -> Result<(Dataset, NormalizationStats)> {
    if d.is_empty() {
        return Err(Error::Empty("cannot normalize an empty dataset".into()));
    }
    let stats = match stats {
        Some(s) => {
            if s.x.min.len() != d.x.cols() || s.y.min.len() != d.y.cols() {
                return Err(Error::shape(
                    "normalize",
                    format!(
                        "stats for {}+{} columns, dataset has {}+{}",
                        s.x.min.len(),
                        s.y.min.len(),
                        d.x.cols(),
                        d.y.cols()
                    ),
                ));
            }
            s.clone()
        }
        None => NormalizationStats::fit(d)?,
    };
    let out = Dataset {
        x: stats.x.normalize(&d.x),
        y: stats.y.normalize(&d.y),
        ..d.clone()
    };
    Ok((out, stats))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train: 0.8,
            validation: 0.1,
            test: 0.1,
            seed: 0,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.validation, self.test];
        if parts.iter().any(|f| !(*f > 0.0)) || ((parts.iter().sum::<f64>()) - 1.0).abs() > 1e-9 {
            return Err(Error::Split(format!(
                "fractions must be positive and sum to 1, got {parts:?}"
            )));
        }
        Ok(())
    }

    /// Row counts `(train, validation, test)`; test takes the remainder.
    pub fn sizes(&self, n: usize) -> Result<(usize, usize, usize)> {
        self.validate()?;
        let count = |f: f64| (n as f64 * f + 1e-9).floor() as usize;
        let train = count(self.train);
        let validation = count(self.validation);
        let test = n.saturating_sub(train + validation);
        for (name, size) in [("train", train), ("validation", validation), ("test", test)] {
            if size == 0 {
                return Err(Error::Split(format!("{name} split of {n} rows would be empty")));
            }
        }
        Ok((train, validation, test))
    }
}

pub struct Splits {
    pub train: Dataset,
    pub validation: Dataset,
    pub test: Dataset,
}

/// Seeded permutation, then contiguous train/validation/test blocks.
pub fn split_shuffle(d: &Dataset, spec: &SplitSpec) -> Result<Splits> {
    let (train, validation, _) = spec.sizes(d.len())?;
    let mut idx: Vec<usize> = (0..d.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    Ok(Splits {
        train: d.select(&idx[..train]),
        validation: d.select(&idx[train..train + validation]),
        test: d.select(&idx[train + validation..]),
    })
}

/// Permute `x` rows and `y` rows independently, breaking the pairing while
/// keeping both marginals.
pub fn decouple_pairs(d: &Dataset, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ix: Vec<usize> = (0..d.len()).collect();
    let mut iy = ix.clone();
    ix.shuffle(&mut rng);
    iy.shuffle(&mut rng);
    Dataset {
        x: d.x.select_rows(&ix),
        y: d.y.select_rows(&iy),
        x_names: d.x_names.clone(),
        y_names: d.y_names.clone(),
        pairing: Pairing::Decoupled,
    }
}
