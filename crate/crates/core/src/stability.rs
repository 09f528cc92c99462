//! Perturbed discrete dynamical systems `X_{t+1} = F(X_t) + δ_t` with a
//! contraction `F`, checked against the Lyapunov function
//! `V(X) = ‖X − X*‖²`.

use std::path::Path;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{write_file, write_table};
use crate::tensor::Tensor;

/// Relative slack for floating-point comparisons against analytic bounds.
pub const BOUND_SLACK: f64 = 1e-12;

pub type StateMap = Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;

/// `X ↦ A·X + c` with row-major `A`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineMap {
    pub dim: usize,
    pub a: Vec<f64>,
    pub c: Vec<f64>,
}

impl AffineMap {
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let n = self.dim;
        (0..n)
            .map(|i| {
                let row = &self.a[i * n..(i + 1) * n];
                row.iter().zip(x).map(|(a, x)| a * x).sum::<f64>() + self.c[i]
            })
            .collect()
    }

    /// Largest singular value of `A`.
    pub fn spectral_norm(&self) -> f64 {
        let m = DMatrix::from_row_slice(self.dim, self.dim, &self.a);
        m.singular_values().max()
    }

    /// Random `A = Q₁·diag(s)·Q₂ᵀ` with `max s = norm`, and `c` chosen so
    /// that `equilibrium` is a fixed point.
    pub fn random(dim: usize, norm: f64, equilibrium: &[f64], rng: &mut impl Rng) -> Self {
        let q1 = random_orthogonal(dim, rng);
        let q2 = random_orthogonal(dim, rng);
        let mut s: Vec<f64> = (0..dim).map(|_| rng.random::<f64>() * norm).collect();
        s[0] = norm;
        let a = q1 * DMatrix::from_diagonal(&nalgebra::DVector::from_vec(s)) * q2.transpose();
        let a: Vec<f64> = (0..dim).flat_map(|i| (0..dim).map(move |j| (i, j))).map(|(i, j)| a[(i, j)]).collect();
        let mut map = AffineMap {
            dim,
            a,
            c: vec![0.0; dim],
        };
        let ax = map.apply(equilibrium);
        map.c = equilibrium.iter().zip(&ax).map(|(x, ax)| x - ax).collect();
        map
    }
}

fn random_orthogonal(dim: usize, rng: &mut impl Rng) -> DMatrix<f64> {
    let g = DMatrix::from_fn(dim, dim, |_, _| rng.sample::<f64, _>(StandardNormal));
    g.qr().q()
}

/// A contraction with declared Lipschitz bound `lipschitz`, fixed point
/// `equilibrium` and perturbations bounded by `delta_max`.
#[derive(Clone)]
pub struct DynSystem {
    map: StateMap,
    pub lipschitz: f64,
    pub equilibrium: Vec<f64>,
    pub delta_max: f64,
    /// Widths of the `(x, b)` parts of the flat state.
    pub split: (usize, usize),
}

impl std::fmt::Debug for DynSystem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DynSystem")
            .field("lipschitz", &self.lipschitz)
            .field("equilibrium", &self.equilibrium)
            .field("delta_max", &self.delta_max)
            .field("split", &self.split)
            .finish_non_exhaustive()
    }
}

impl DynSystem {
    pub fn new(map: StateMap, lipschitz: f64, equilibrium: Vec<f64>, delta_max: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&lipschitz) {
            return Err(Error::Config(format!("Lipschitz bound must lie in [0, 1), got {lipschitz}")));
        }
        if !(delta_max >= 0.0 && delta_max.is_finite()) {
            return Err(Error::Config(format!("delta_max must be finite and >= 0, got {delta_max}")));
        }
        if equilibrium.is_empty() {
            return Err(Error::Empty("zero-dimensional state".into()));
        }
        let fx = map(&equilibrium);
        let drift = distance(&fx, &equilibrium);
        if fx.len() != equilibrium.len() || drift > 1e-9 * (1.0 + norm(&equilibrium)) {
            return Err(Error::Config(format!("equilibrium is not a fixed point (moved by {drift})")));
        }
        let dim = equilibrium.len();
        Ok(DynSystem {
            map,
            lipschitz,
            equilibrium,
            delta_max,
            split: (dim, 0),
        })
    }

    pub fn affine(map: AffineMap, lipschitz: f64, equilibrium: Vec<f64>, delta_max: f64) -> Result<Self> {
        DynSystem::new(Arc::new(move |x: &[f64]| map.apply(x)), lipschitz, equilibrium, delta_max)
    }

    /// Random affine contraction of spectral norm exactly `lipschitz` with an
    /// equilibrium drawn from `[-1, 1]^dim`.
    pub fn random_affine(dim: usize, lipschitz: f64, delta_max: f64, seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Empty("zero-dimensional state".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let eq: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let map = AffineMap::random(dim, lipschitz, &eq, &mut rng);
        DynSystem::affine(map, lipschitz, eq, delta_max)
    }

    pub fn with_split(mut self, x_dim: usize) -> Result<Self> {
        let dim = self.dim();
        if x_dim > dim {
            return Err(Error::Config(format!("split {x_dim} exceeds state dimension {dim}")));
        }
        self.split = (x_dim, dim - x_dim);
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.equilibrium.len()
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        (self.map)(x)
    }

    /// Largest `‖F(a) − F(b)‖ / ‖a − b‖` over random pairs in a box of
    /// half-width `radius` around the equilibrium. Exceeding the declared
    /// bound means `lipschitz` is not valid for `F`.
    pub fn spot_check(&self, pairs: usize, radius: f64, seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut best: f64 = 0.0;
        let point = |rng: &mut ChaCha8Rng| -> Vec<f64> {
            self.equilibrium.iter().map(|e| e + rng.random_range(-radius..radius)).collect()
        };
        for _ in 0..pairs {
            let a = point(&mut rng);
            let b = point(&mut rng);
            let d = distance(&a, &b);
            if d > 0.0 {
                best = best.max(distance(&self.apply(&a), &self.apply(&b)) / d);
            }
        }
        best
    }

    fn perturbation(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let n = self.dim();
        if self.delta_max == 0.0 {
            return vec![0.0; n];
        }
        let g: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let len = norm(&g);
        let r = self.delta_max * rng.random::<f64>().powf(1.0 / n as f64);
        g.iter().map(|v| v * r / len).collect()
    }
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// `V(X) = ‖X − X*‖²`.
pub fn lyapunov_v(x: &[f64], equilibrium: &[f64]) -> f64 {
    x.iter().zip(equilibrium).map(|(a, b)| (a - b).powi(2)).sum()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    /// `X_0 … X_T`.
    pub states: Vec<Vec<f64>>,
    /// `V(X_0) … V(X_T)`.
    pub v: Vec<f64>,
    /// `V(X_{t+1}) − V(X_t)` for `t < T`.
    pub delta_v: Vec<f64>,
    /// `‖δ_t‖`.
    pub delta_norm: Vec<f64>,
    /// Whether `0 < δ_max ≤ (1 − L)·‖X_t − X*‖` held at step `t`.
    pub condition: Vec<bool>,
}

impl TrajectoryRecord {
    pub fn steps(&self) -> usize {
        self.delta_v.len()
    }
}

pub fn simulate(system: &DynSystem, x0: &[f64], steps: usize, seed: u64) -> Result<TrajectoryRecord> {
    if steps == 0 {
        return Err(Error::Config("simulation needs at least one step".into()));
    }
    if x0.len() != system.dim() {
        return Err(Error::shape(
            "simulate",
            format!("initial state of width {} for a {}-dimensional system", x0.len(), system.dim()),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eq = &system.equilibrium;
    let mut rec = TrajectoryRecord {
        states: vec![x0.to_vec()],
        v: vec![lyapunov_v(x0, eq)],
        delta_v: Vec::with_capacity(steps),
        delta_norm: Vec::with_capacity(steps),
        condition: Vec::with_capacity(steps),
    };
    for t in 0..steps {
        let x = &rec.states[t];
        let d = distance(x, eq);
        let delta = system.perturbation(&mut rng);
        let next: Vec<f64> = system.apply(x).iter().zip(&delta).map(|(f, p)| f + p).collect();
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteState(t + 1));
        }
        let v_next = lyapunov_v(&next, eq);
        rec.condition
            .push(system.delta_max > 0.0 && system.delta_max <= (1.0 - system.lipschitz) * d);
        rec.delta_norm.push(norm(&delta));
        rec.delta_v.push(v_next - rec.v[t]);
        rec.v.push(v_next);
        rec.states.push(next);
    }
    Ok(rec)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Decrease,
    Violation,
    ConditionNotMet,
}

impl Verdict {
    fn id(self) -> &'static str {
        match self {
            Verdict::Decrease => "decrease",
            Verdict::Violation => "violation",
            Verdict::ConditionNotMet => "condition_not_met",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepVerdict {
    pub verdict: Verdict,
    /// `ΔV ≤ (L² − 1)‖X_t − X*‖² + 2L‖X_t − X*‖‖δ_t‖ + ‖δ_t‖²`.
    pub bound_holds: bool,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecreaseSummary {
    pub steps: usize,
    pub condition_met: usize,
    pub decreased: usize,
    pub violations: usize,
    pub bound_failures: usize,
}

impl DecreaseSummary {
    pub fn merge(&mut self, other: &DecreaseSummary) {
        self.steps += other.steps;
        self.condition_met += other.condition_met;
        self.decreased += other.decreased;
        self.violations += other.violations;
        self.bound_failures += other.bound_failures;
    }

    pub fn ok(&self) -> bool {
        self.violations == 0 && self.bound_failures == 0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecreaseReport {
    pub verdicts: Vec<StepVerdict>,
    pub summary: DecreaseSummary,
}

pub fn check_decrease(record: &TrajectoryRecord, system: &DynSystem) -> DecreaseReport {
    let l = system.lipschitz;
    let mut summary = DecreaseSummary::default();
    let verdicts = (0..record.steps())
        .map(|t| {
            let d = record.v[t].sqrt();
            let dn = record.delta_norm[t];
            let dv = record.delta_v[t];
            let bound = (l * l - 1.0) * d * d + 2.0 * l * d * dn + dn * dn;
            let bound_holds = dv <= bound + BOUND_SLACK * (1.0 + record.v[t]);
            let verdict = if !record.condition[t] {
                Verdict::ConditionNotMet
            } else if dv < 0.0 {
                Verdict::Decrease
            } else {
                Verdict::Violation
            };
            summary.steps += 1;
            match verdict {
                Verdict::Decrease => {
                    summary.condition_met += 1;
                    summary.decreased += 1;
                }
                Verdict::Violation => {
                    summary.condition_met += 1;
                    summary.violations += 1;
                }
                Verdict::ConditionNotMet => {}
            }
            if !bound_holds {
                summary.bound_failures += 1;
            }
            StepVerdict { verdict, bound_holds }
        })
        .collect();
    DecreaseReport { verdicts, summary }
}

/// Largest `t` at which `V(X_t) ≤ L^{2t}·V(X_0) + tol` fails, if any.
pub fn envelope_violation(record: &TrajectoryRecord, lipschitz: f64, tol: f64) -> Option<usize> {
    let v0 = record.v[0];
    record
        .v
        .iter()
        .enumerate()
        .find(|(t, v)| **v > lipschitz.powi(2 * *t as i32) * v0 + tol)
        .map(|(t, _)| t)
}

/// Empirical Lipschitz constant; always a lower bound on the true one.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LipschitzEstimate {
    pub value: f64,
    pub pairs: usize,
    pub lower_bound: bool,
}

/// Max of `‖f(a) − f(b)‖ / ‖a − b‖` over `pairs` random distinct rows of
/// `samples`. `map` is applied once to the whole batch.
pub fn estimate_lipschitz<F>(map: F, samples: &Tensor, pairs: usize, seed: u64) -> Result<LipschitzEstimate>
where
    F: FnOnce(&Tensor) -> Result<Tensor>,
{
    let n = samples.rows();
    if n < 2 {
        return Err(Error::Empty("Lipschitz estimate needs at least two samples".into()));
    }
    let out = map(samples)?;
    if out.rows() != n {
        return Err(Error::shape("estimate_lipschitz", format!("{} outputs for {n} samples", out.rows())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: f64 = 0.0;
    let mut used = 0;
    for _ in 0..pairs {
        let i = rng.random_range(0..n);
        let j = rng.random_range(0..n);
        let d = distance(samples.row(i), samples.row(j));
        if d == 0.0 {
            continue;
        }
        used += 1;
        best = best.max(distance(out.row(i), out.row(j)) / d);
    }
    if used == 0 {
        let distinct = (1..n).any(|i| samples.row(i) != samples.row(0));
        if !distinct {
            return Err(Error::Undefined("all samples are identical".into()));
        }
        return Err(Error::Undefined(format!("no distinct pair among {pairs} draws")));
    }
    Ok(LipschitzEstimate {
        value: best,
        pairs: used,
        lower_bound: true,
    })
}

/// `t, x_0…x_{n-1}, V, dV, condition, verdict, bound_holds` per state; the
/// final state has empty step columns.
pub fn trajectory_csv(record: &TrajectoryRecord, report: &DecreaseReport) -> Result<String> {
    let dim = record.states.first().map_or(0, Vec::len);
    let names: Vec<String> = (0..dim).map(|i| format!("x{i}")).collect();
    let mut header: Vec<&str> = vec!["t"];
    header.extend(names.iter().map(String::as_str));
    header.extend(["v", "delta_v", "condition", "verdict", "bound_holds"]);
    let rows = record.states.iter().enumerate().map(|(t, s)| {
        let mut row = vec![t.to_string()];
        row.extend(s.iter().map(f64::to_string));
        row.push(record.v[t].to_string());
        if t < record.steps() {
            let v = report.verdicts[t];
            row.push(record.delta_v[t].to_string());
            row.push(record.condition[t].to_string());
            row.push(v.verdict.id().to_string());
            row.push(v.bound_holds.to_string());
        } else {
            row.extend(std::iter::repeat_n(String::new(), 4));
        }
        row
    });
    write_table(&header, rows)
}

pub fn write_trajectory(path: &Path, record: &TrajectoryRecord, report: &DecreaseReport) -> Result<()> {
    write_file(path, trajectory_csv(record, report)?.as_bytes())
}

/// Settings for a batch of random-system runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StabilityConfig {
    pub systems: usize,
    pub dim: usize,
    /// Lipschitz bounds are drawn uniformly from this range.
    pub lipschitz: (f64, f64),
    /// Perturbation bound as a fraction of `(1 − L)·‖X_0 − X*‖`. Values at
    /// most 1 keep the early steps inside the decrease condition.
    pub delta_fraction: f64,
    /// Absolute perturbation bound; overrides `delta_fraction` when set.
    pub delta_max: Option<f64>,
    pub steps: usize,
    pub seed: u64,
}

impl Default for StabilityConfig {
    fn default() -> Self {
        StabilityConfig {
            systems: 1000,
            dim: 4,
            lipschitz: (0.1, 0.95),
            delta_fraction: 0.5,
            delta_max: None,
            steps: 50,
            seed: 0,
        }
    }
}

impl StabilityConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.lipschitz;
        if !(0.0 <= lo && lo <= hi && hi < 1.0) {
            return Err(Error::Config(format!("Lipschitz range ({lo}, {hi}) must lie in [0, 1)")));
        }
        if self.systems == 0 || self.dim == 0 || self.steps == 0 {
            return Err(Error::Config("systems, dim and steps must be positive".into()));
        }
        if !(self.delta_fraction >= 0.0 && self.delta_fraction.is_finite()) {
            return Err(Error::Config(format!("delta_fraction must be >= 0, got {}", self.delta_fraction)));
        }
        if let Some(d) = self.delta_max {
            if !(d >= 0.0 && d.is_finite()) {
                return Err(Error::Config(format!("delta_max must be >= 0, got {d}")));
            }
        }
        Ok(())
    }
}

/// One generated system and its trajectory.
pub struct SystemRun {
    pub index: usize,
    pub system: DynSystem,
    pub record: TrajectoryRecord,
    pub report: DecreaseReport,
}

/// Generate and simulate `config.systems` random affine contractions. The
/// initial state sits at distance 1 from the equilibrium.
pub fn run_random_systems(config: &StabilityConfig) -> Result<Vec<SystemRun>> {
    config.validate()?;
    let mut master = ChaCha8Rng::seed_from_u64(config.seed);
    (0..config.systems)
        .map(|index| {
            let sys_seed: u64 = master.random();
            let sim_seed: u64 = master.random();
            let mut rng = ChaCha8Rng::seed_from_u64(sys_seed);
            let (lo, hi) = config.lipschitz;
            let l = if hi > lo { rng.random_range(lo..hi) } else { lo };
            let delta_max = config.delta_max.unwrap_or(config.delta_fraction * (1.0 - l));
            let system = DynSystem::random_affine(config.dim, l, delta_max, rng.random())?;
            let g: Vec<f64> = (0..config.dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let len = norm(&g);
            let x0: Vec<f64> = system.equilibrium.iter().zip(&g).map(|(e, v)| e + v / len).collect();
            let record = simulate(&system, &x0, config.steps, sim_seed)?;
            let report = check_decrease(&record, &system);
            Ok(SystemRun {
                index,
                system,
                record,
                report,
            })
        })
        .collect()
}

pub const SYSTEM_COLUMNS: [&str; 8] = [
    "system",
    "lipschitz",
    "delta_max",
    "steps",
    "condition_met",
    "decreased",
    "violations",
    "bound_failures",
];

/// One row per simulated system.
pub fn systems_csv(runs: &[SystemRun]) -> Result<String> {
    write_table(
        &SYSTEM_COLUMNS,
        runs.iter().map(|r| {
            let s = &r.report.summary;
            vec![
                r.index.to_string(),
                r.system.lipschitz.to_string(),
                r.system.delta_max.to_string(),
                s.steps.to_string(),
                s.condition_met.to_string(),
                s.decreased.to_string(),
                s.violations.to_string(),
                s.bound_failures.to_string(),
            ]
        }),
    )
}

/// Totals over all runs.
pub fn total_summary(runs: &[SystemRun]) -> DecreaseSummary {
    let mut total = DecreaseSummary::default();
    for r in runs {
        total.merge(&r.report.summary);
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;

    fn halving() -> DynSystem {
        DynSystem::new(Arc::new(|x: &[f64]| x.iter().map(|v| 0.5 * v).collect()), 0.5, vec![0.0], 0.0).unwrap()
    }

    #[test]
    fn linear_contraction_closed_form() {
        let rec = simulate(&halving(), &[1.0], 10, 0).unwrap();
        for (t, s) in rec.states.iter().enumerate() {
            assert_eq!(s[0], 0.5f64.powi(t as i32));
        }
        assert_eq!(rec.delta_v[0], 0.25 - 1.0);
        assert!(rec.condition.iter().all(|c| !c));
        assert_eq!(envelope_violation(&rec, 0.5, 1e-12), None);
    }

    #[test]
    fn equilibrium_is_stationary() {
        let sys = DynSystem::new(Arc::new(|x: &[f64]| x.to_vec()), 0.0, vec![0.3, -0.2], 0.0);
        // Identity is not a contraction, but with L declared 0 the fixed
        // point check still passes and the trajectory stays put.
        let sys = sys.unwrap();
        let rec = simulate(&sys, &[0.3, -0.2], 5, 1).unwrap();
        assert!(rec.states.iter().all(|s| s == &vec![0.3, -0.2]));
        assert!(rec.delta_v.iter().all(|d| *d == 0.0));
    }

    #[test]
    fn same_seed_same_trajectory() {
        let sys = DynSystem::random_affine(3, 0.8, 0.05, 4).unwrap();
        let a = simulate(&sys, &[1.0, 0.0, 0.0], 20, 9).unwrap();
        let b = simulate(&sys, &[1.0, 0.0, 0.0], 20, 9).unwrap();
        assert_eq!(a, b);
        let c = simulate(&sys, &[1.0, 0.0, 0.0], 20, 10).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn lyapunov_examples() {
        assert_eq!(lyapunov_v(&[0.5, 0.5], &[0.5, 0.5]), 0.0);
        assert_eq!(lyapunov_v(&[1.0, 1.0], &[0.0, 0.0]), 2.0);
    }

    #[test]
    fn invalid_parameters() {
        let id: StateMap = Arc::new(|x: &[f64]| x.to_vec());
        assert!(DynSystem::new(id.clone(), 1.0, vec![0.0], 0.0).is_err());
        assert!(DynSystem::new(id.clone(), -0.1, vec![0.0], 0.0).is_err());
        assert!(DynSystem::new(id.clone(), 0.5, vec![0.0], -1.0).is_err());
        let shift: StateMap = Arc::new(|x: &[f64]| x.iter().map(|v| 0.5 * v + 1.0).collect());
        assert!(DynSystem::new(shift, 0.5, vec![0.0], 0.0).is_err());
        assert!(simulate(&halving(), &[1.0, 2.0], 3, 0).is_err());
        assert!(simulate(&halving(), &[1.0], 0, 0).is_err());
    }

    #[test]
    fn non_finite_state_aborts() {
        let sys = DynSystem::new(
            Arc::new(|x: &[f64]| x.iter().map(|v| if *v == 0.0 { 0.0 } else { f64::NAN }).collect()),
            0.5,
            vec![0.0],
            0.0,
        )
        .unwrap();
        assert!(matches!(simulate(&sys, &[1.0], 3, 0), Err(Error::NonFiniteState(1))));
    }

    #[test]
    fn random_affine_has_declared_norm_and_fixed_point() {
        let sys = DynSystem::random_affine(5, 0.7, 0.0, 11).unwrap();
        let fx = sys.apply(&sys.equilibrium);
        assert!(distance(&fx, &sys.equilibrium) < 1e-12);
        assert!(sys.spot_check(500, 2.0, 3) <= 0.7 + 1e-12);
        let map = AffineMap::random(5, 0.7, &[0.0; 5], &mut ChaCha8Rng::seed_from_u64(1));
        assert!((map.spectral_norm() - 0.7).abs() < 1e-12);
    }

    #[test]
    fn perturbations_stay_in_ball() {
        let sys = DynSystem::random_affine(3, 0.5, 0.2, 2).unwrap();
        let rec = simulate(&sys, &[2.0, 2.0, 2.0], 200, 5).unwrap();
        assert!(rec.delta_norm.iter().all(|d| *d <= 0.2 + 1e-15));
        assert!(rec.delta_norm.iter().any(|d| *d > 0.0));
    }

    #[test]
    fn condition_not_met_is_not_a_failure() {
        let sys = DynSystem::random_affine(2, 0.99, 5.0, 3).unwrap();
        let x0: Vec<f64> = sys.equilibrium.iter().map(|e| e + 1.0).collect();
        let rec = simulate(&sys, &x0, 50, 3).unwrap();
        let report = check_decrease(&rec, &sys);
        assert_eq!(report.summary.condition_met, 0);
        assert!(report.verdicts.iter().all(|v| v.verdict == Verdict::ConditionNotMet));
        assert!(report.summary.ok());
    }

    #[test]
    fn lipschitz_of_scaled_map() {
        let samples = Tensor::matrix(
            400,
            2,
            (0..800).map(|i| ((i * 7919) % 1000) as f64 / 1000.0).collect(),
        )
        .unwrap();
        // diag(2, 0.5): spectral norm 2, approached from below.
        let stretch = |t: &Tensor| {
            let d = t.data().chunks(2).flat_map(|r| [2.0 * r[0], 0.5 * r[1]]).collect();
            Tensor::matrix(t.rows(), 2, d)
        };
        let est = estimate_lipschitz(stretch, &samples, 5000, 0).unwrap();
        assert!(est.value <= 2.0 + 1e-12 && est.value > 1.95, "{}", est.value);
        assert!(est.lower_bound);

        let constant = |t: &Tensor| Ok(Tensor::full(&[t.rows(), 2], 0.3));
        assert_eq!(estimate_lipschitz(constant, &samples, 100, 0).unwrap().value, 0.0);

        let same = Tensor::full(&[5, 2], 1.0);
        assert!(estimate_lipschitz(|t: &Tensor| Ok(t.clone()), &same, 10, 0).is_err());
    }

    #[test]
    fn trajectory_csv_layout() {
        let sys = halving();
        let rec = simulate(&sys, &[1.0], 2, 0).unwrap();
        let report = check_decrease(&rec, &sys);
        let csv = trajectory_csv(&rec, &report).unwrap();
        let lines: Vec<_> = csv.lines().collect();
        assert_eq!(lines[0], "t,x0,v,delta_v,condition,verdict,bound_holds");
        assert_eq!(lines[1], "0,1,1,-0.75,false,condition_not_met,true");
        assert_eq!(lines.len(), 4);
    }
}
