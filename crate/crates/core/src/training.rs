//! Training strategies for a forward/backward model pair.
//!
//! | strategy     | Φ objective              | Ψ objective                                   |
//! |--------------|--------------------------|-----------------------------------------------|
//! | `Baseline`   | `L(y − Φ(x))`            | `L(x − Ψ(y))`                                 |
//! | `Ucm`        | `L(y − Φ(x))`            | `L(y − Φ(Ψ(y)))`, Φ frozen                    |
//! | `UcmHybrid`  | `L(y − Φ(x))`            | `½[L(y − Φ(Ψ(y))) + L(x − Ψ(y))]`, Φ frozen   |
//! | `Jcm`        | joint `½(L_f + L_b)` with cycle and twice-cycled terms, unpaired data |
//!
//! Only the model application that sees a real data batch runs batch norm on
//! batch statistics; a model fed another model's output normalizes with its
//! running statistics, so the composition trained is the one evaluated.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BatchMoments, Gradients, LossKind, Tape, Var};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::models::{ForwardMode, ModelPair, PHI_GROUP, PSI_GROUP};
use crate::optim::{clip_global_norm, OptimizerConfig, OptimizerState};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Baseline,
    Ucm,
    UcmHybrid,
    Jcm,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [
        Strategy::Baseline,
        Strategy::Ucm,
        Strategy::UcmHybrid,
        Strategy::Jcm,
    ];

    pub fn id(self) -> &'static str {
        match self {
            Strategy::Baseline => "baseline",
            Strategy::Ucm => "ucm",
            Strategy::UcmHybrid => "ucm_hybrid",
            Strategy::Jcm => "jcm",
        }
    }

    /// JCM trains on decoupled (unpaired) data.
    pub fn needs_decoupled_data(self) -> bool {
        self == Strategy::Jcm
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|v| v.id() == s)
            .ok_or_else(|| Error::Config(format!("unknown strategy `{s}` (baseline, ucm, ucm_hybrid, jcm)")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateMode {
    /// One backward pass and one optimizer step per batch.
    Simultaneous,
    /// Sequential per-batch steps: loss terms (UCM family) or models (JCM)
    /// are updated one after another.
    Stepwise,
}

impl UpdateMode {
    pub fn id(self) -> &'static str {
        match self {
            UpdateMode::Simultaneous => "simultaneous",
            UpdateMode::Stepwise => "stepwise",
        }
    }
}

impl std::str::FromStr for UpdateMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "simultaneous" => Ok(UpdateMode::Simultaneous),
            "stepwise" => Ok(UpdateMode::Stepwise),
            _ => Err(Error::Config(format!("unknown update mode `{s}` (simultaneous, stepwise)"))),
        }
    }
}

pub const BATCH_FRACTION_RANGE: (f64, f64) = (0.02, 0.50);
pub const ALPHA_RANGE: (f64, f64) = (1.0, 3.0);
pub const BETA_RANGE: (f64, f64) = (0.0, 1.0);
/// Batch fractions above this are flagged as a large-batch risk.
pub const LARGE_BATCH_RISK: f64 = 0.40;

fn default_clip() -> f64 {
    10.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingPlan {
    pub strategy: Strategy,
    pub loss: LossKind,
    /// Penalty of the twice-cycled mapping-consistency term; defaults to `loss`.
    #[serde(default)]
    pub mapping_loss: Option<LossKind>,
    pub optimizer: OptimizerConfig,
    pub batch_fraction: f64,
    pub epochs: usize,
    pub alpha_f: f64,
    pub alpha_b: f64,
    pub beta_f: f64,
    pub beta_b: f64,
    pub update_mode: UpdateMode,
    pub seed: u64,
    #[serde(default = "default_clip")]
    pub clip_norm: f64,
    #[serde(default)]
    pub weight_decay: f64,
    /// Restore the parameters of the epoch with the lowest validation
    /// objective when training ends.
    #[serde(default = "default_keep_best")]
    pub keep_best: bool,
}

fn default_keep_best() -> bool {
    true
}

impl Default for TrainingPlan {
    fn default() -> Self {
        TrainingPlan {
            strategy: Strategy::Ucm,
            loss: LossKind::L2,
            mapping_loss: None,
            optimizer: OptimizerConfig::default(),
            batch_fraction: 0.02,
            epochs: 500,
            alpha_f: 1.0,
            alpha_b: 1.0,
            beta_f: 0.5,
            beta_b: 0.5,
            update_mode: UpdateMode::Simultaneous,
            seed: 0,
            clip_norm: default_clip(),
            weight_decay: 0.0,
            keep_best: true,
        }
    }
}

fn within(name: &str, v: f64, (lo, hi): (f64, f64)) -> Result<()> {
    if !(lo..=hi).contains(&v) {
        return Err(Error::Config(format!("{name} = {v} outside [{lo}, {hi}]")));
    }
    Ok(())
}

impl TrainingPlan {
    pub fn validate(&self) -> Result<()> {
        within("batch_fraction", self.batch_fraction, BATCH_FRACTION_RANGE)?;
        within("alpha_f", self.alpha_f, ALPHA_RANGE)?;
        within("alpha_b", self.alpha_b, ALPHA_RANGE)?;
        within("beta_f", self.beta_f, BETA_RANGE)?;
        within("beta_b", self.beta_b, BETA_RANGE)?;
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Config(format!("clip_norm must be > 0, got {}", self.clip_norm)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "weight_decay must be >= 0, got {}",
                self.weight_decay
            )));
        }
        self.optimizer.validate()
    }

    pub fn mapping_kind(&self) -> LossKind {
        self.mapping_loss.unwrap_or(self.loss)
    }

    pub fn jcm_coefficients(&self) -> JcmCoefficients {
        JcmCoefficients {
            alpha_f: self.alpha_f,
            beta_f: self.beta_f,
            alpha_b: self.alpha_b,
            beta_b: self.beta_b,
        }
    }

    /// `round(fraction · n)`, at least 2 so batch variance is defined.
    pub fn batch_size(&self, n: usize) -> usize {
        ((self.batch_fraction * n as f64).round() as usize).max(2)
    }

    pub fn large_batch_risk(&self) -> bool {
        self.batch_fraction > LARGE_BATCH_RISK
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JcmCoefficients {
    pub alpha_f: f64,
    pub beta_f: f64,
    pub alpha_b: f64,
    pub beta_b: f64,
}

/// Loss nodes built by one of the strategy functions, plus the batch moments
/// of the primary (data-fed) applications.
pub struct StrategyLosses {
    pub l_f: Var,
    pub l_b: Var,
    /// `(L_f + L_b) / 2`.
    pub total: Var,
    pub phi_moments: Option<Vec<Option<BatchMoments>>>,
    pub psi_moments: Option<Vec<Option<BatchMoments>>>,
}

impl StrategyLosses {
    pub fn values(&self, tape: &Tape) -> (f64, f64, f64) {
        (
            tape.value(self.l_f).item(),
            tape.value(self.l_b).item(),
            tape.value(self.total).item(),
        )
    }
}

fn check_rows(x: &Tensor, y: &Tensor) -> Result<()> {
    if x.rows() != y.rows() {
        return Err(Error::shape(
            "loss",
            format!("x batch has {} rows, y batch {}", x.rows(), y.rows()),
        ));
    }
    if x.rows() == 0 {
        return Err(Error::Empty("empty batch".into()));
    }
    Ok(())
}

fn half_sum(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let s = tape.add(a, b)?;
    Ok(tape.scale(s, 0.5))
}

/// `L(y − Φ(x))` with Φ in `mode`.
fn direct_forward_term(
    tape: &mut Tape,
    pair: &ModelPair,
    x: Var,
    y: Var,
    kind: LossKind,
    mode: ForwardMode,
    rng: &mut dyn RngCore,
) -> Result<(Var, Vec<Option<BatchMoments>>)> {
    let f = pair.phi.forward(tape, x, mode, true, rng)?;
    Ok((tape.loss(kind, f.output, y)?, f.moments))
}

/// Backward-task terms sharing one Ψ(y) application:
/// `(L(x − Ψ(y)), L(y − Φ(Ψ(y))))`, each only when requested. Φ is frozen
/// in the cycle term.
#[allow(clippy::too_many_arguments)]
fn backward_terms(
    tape: &mut Tape,
    pair: &ModelPair,
    x: Option<Var>,
    y: Var,
    kind: LossKind,
    mode: ForwardMode,
    cycle: bool,
    rng: &mut dyn RngCore,
) -> Result<(Option<Var>, Option<Var>, Vec<Option<BatchMoments>>)> {
    let psi = pair.psi.forward(tape, y, mode, true, rng)?;
    let direct = match x {
        Some(x) => Some(tape.loss(kind, psi.output, x)?),
        None => None,
    };
    let cycle = if cycle {
        let outer = outer_mode(mode);
        let recon = pair.phi.forward(tape, psi.output, outer, false, rng)?;
        Some(tape.loss(kind, recon.output, y)?)
    } else {
        None
    };
    Ok((direct, cycle, psi.moments))
}

fn outer_mode(mode: ForwardMode) -> ForwardMode {
    match mode {
        ForwardMode::Inference => ForwardMode::Inference,
        _ => ForwardMode::TrainingFrozenStats,
    }
}

/// Independent direct losses: `L_f = L(y − Φ(x))`, `L_b = L(x − Ψ(y))`.
pub fn loss_baseline(
    tape: &mut Tape,
    pair: &ModelPair,
    x: &Tensor,
    y: &Tensor,
    kind: LossKind,
    mode: ForwardMode,
    rng: &mut dyn RngCore,
) -> Result<StrategyLosses> {
    check_rows(x, y)?;
    let xv = tape.constant(x.clone());
    let yv = tape.constant(y.clone());
    let (l_f, phi_m) = direct_forward_term(tape, pair, xv, yv, kind, mode, rng)?;
    let (l_b, _, psi_m) = backward_terms(tape, pair, Some(xv), yv, kind, mode, false, rng)?;
    let l_b = l_b.expect("direct term requested");
    let total = half_sum(tape, l_f, l_b)?;
    Ok(StrategyLosses {
        l_f,
        l_b,
        total,
        phi_moments: Some(phi_m),
        psi_moments: Some(psi_m),
    })
}

/// Unilateral cycle: `L_f = L(y − Φ(x))`, `L_b = L(y − Φ(Ψ(y)))`. The
/// cycle term's gradient passes through Φ but never reaches Φ's parameters.
pub fn loss_ucm(
    tape: &mut Tape,
    pair: &ModelPair,
    x: &Tensor,
    y: &Tensor,
    kind: LossKind,
    mode: ForwardMode,
    rng: &mut dyn RngCore,
) -> Result<StrategyLosses> {
    check_rows(x, y)?;
    let xv = tape.constant(x.clone());
    let yv = tape.constant(y.clone());
    let (l_f, phi_m) = direct_forward_term(tape, pair, xv, yv, kind, mode, rng)?;
    let (_, l_b, psi_m) = backward_terms(tape, pair, None, yv, kind, mode, true, rng)?;
    let l_b = l_b.expect("cycle term requested");
    let total = half_sum(tape, l_f, l_b)?;
    Ok(StrategyLosses {
        l_f,
        l_b,
        total,
        phi_moments: Some(phi_m),
        psi_moments: Some(psi_m),
    })
}

/// Hybrid unilateral cycle: `L_b = ½[L(y − Φ(Ψ(y))) + L(x − Ψ(y))]`.
pub fn loss_ucm_hybrid(
    tape: &mut Tape,
    pair: &ModelPair,
    x: &Tensor,
    y: &Tensor,
    kind: LossKind,
    mode: ForwardMode,
    rng: &mut dyn RngCore,
) -> Result<StrategyLosses> {
    check_rows(x, y)?;
    let xv = tape.constant(x.clone());
    let yv = tape.constant(y.clone());
    let (l_f, phi_m) = direct_forward_term(tape, pair, xv, yv, kind, mode, rng)?;
    let (direct, cycle, psi_m) = backward_terms(tape, pair, Some(xv), yv, kind, mode, true, rng)?;
    let l_b = half_sum(tape, cycle.expect("requested"), direct.expect("requested"))?;
    let total = half_sum(tape, l_f, l_b)?;
    Ok(StrategyLosses {
        l_f,
        l_b,
        total,
        phi_moments: Some(phi_m),
        psi_moments: Some(psi_m),
    })
}

/// Which JCM halves to build.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum JcmPart {
    Both,
    Forward,
    Backward,
}

struct JcmHalf {
    loss: Var,
    moments: Vec<Option<BatchMoments>>,
}

/// `α·L(s − G(F(s))) + β·ℓ(s − G(F(G(F(s)))))`, with `F` the inner model.
#[allow(clippy::too_many_arguments)]
fn jcm_half(
    tape: &mut Tape,
    pair: &ModelPair,
    batch: Var,
    forward: bool,
    kind: LossKind,
    mapping: LossKind,
    alpha: f64,
    beta: f64,
    mode: ForwardMode,
    rng: &mut dyn RngCore,
) -> Result<JcmHalf> {
    let (first, second) = if forward {
        (&pair.phi, &pair.psi)
    } else {
        (&pair.psi, &pair.phi)
    };
    let outer = outer_mode(mode);
    let inner = first.forward(tape, batch, mode, true, rng)?;
    let recon = second.forward(tape, inner.output, outer, true, rng)?;
    let cycle = tape.loss(kind, recon.output, batch)?;
    let mut loss = tape.scale(cycle, alpha);
    if beta != 0.0 {
        let again = first.forward(tape, recon.output, outer, true, rng)?;
        let twice = second.forward(tape, again.output, outer, true, rng)?;
        let mapped = tape.loss(mapping, twice.output, batch)?;
        let mapped = tape.scale(mapped, beta);
        loss = tape.add(loss, mapped)?;
    }
    Ok(JcmHalf {
        loss,
        moments: inner.moments,
    })
}

/// Joint cycle on unpaired batches:
/// `L_f = α_f·L(x − Ψ(Φ(x))) + β_f·ℓ(x − Ψ(Φ(Ψ(Φ(x)))))`,
/// `L_b = α_b·L(y − Φ(Ψ(y))) + β_b·ℓ(y − Φ(Ψ(Φ(Ψ(y)))))`,
/// `L_total = (L_f + L_b) / 2`.
#[allow(clippy::too_many_arguments)]
pub fn loss_jcm(
    tape: &mut Tape,
    pair: &ModelPair,
    x: &Tensor,
    y: &Tensor,
    kind: LossKind,
    mapping: LossKind,
    coeffs: JcmCoefficients,
    mode: ForwardMode,
    rng: &mut dyn RngCore,
) -> Result<StrategyLosses> {
    jcm_parts(tape, pair, x, y, kind, mapping, coeffs, mode, JcmPart::Both, rng)
}

#[allow(clippy::too_many_arguments)]
fn jcm_parts(
    tape: &mut Tape,
    pair: &ModelPair,
    x: &Tensor,
    y: &Tensor,
    kind: LossKind,
    mapping: LossKind,
    c: JcmCoefficients,
    mode: ForwardMode,
    part: JcmPart,
    rng: &mut dyn RngCore,
) -> Result<StrategyLosses> {
    if x.rows() == 0 || y.rows() == 0 {
        return Err(Error::Empty("empty batch".into()));
    }
    let xv = tape.constant(x.clone());
    let yv = tape.constant(y.clone());
    let zero = tape.constant(Tensor::scalar(0.0));
    let f = if part != JcmPart::Backward {
        Some(jcm_half(tape, pair, xv, true, kind, mapping, c.alpha_f, c.beta_f, mode, rng)?)
    } else {
        None
    };
    let b = if part != JcmPart::Forward {
        Some(jcm_half(tape, pair, yv, false, kind, mapping, c.alpha_b, c.beta_b, mode, rng)?)
    } else {
        None
    };
    let l_f = f.as_ref().map_or(zero, |h| h.loss);
    let l_b = b.as_ref().map_or(zero, |h| h.loss);
    let total = half_sum(tape, l_f, l_b)?;
    Ok(StrategyLosses {
        l_f,
        l_b,
        total,
        phi_moments: f.map(|h| h.moments),
        psi_moments: b.map(|h| h.moments),
    })
}

/// Mean losses over one epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub l_f: f64,
    pub l_b: f64,
    pub l_total: f64,
    /// Validation `L_total` in inference mode, when a validation set is given.
    pub val_total: Option<f64>,
    pub wall_ms: f64,
}

/// Where and why a run stopped on a non-finite quantity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Divergence {
    pub epoch: usize,
    pub batch: usize,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum RunStatus {
    Converged,
    Diverged(Divergence),
}

impl RunStatus {
    pub fn diverged(&self) -> bool {
        matches!(self, RunStatus::Diverged(_))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub history: Vec<EpochMetrics>,
    pub status: RunStatus,
    /// Epoch whose parameters were kept, if validation selection was active.
    pub best_epoch: Option<usize>,
}

impl TrainOutcome {
    pub fn final_metrics(&self) -> Option<&EpochMetrics> {
        self.history.last()
    }
}

/// Optimizer memories for both models plus the run's RNG (shuffling and
/// dropout masks).
pub struct TrainerState {
    pub phi: OptimizerState,
    pub psi: OptimizerState,
    rng: ChaCha8Rng,
}

impl TrainerState {
    pub fn new(plan: &TrainingPlan) -> Self {
        TrainerState {
            phi: OptimizerState::new(plan.optimizer),
            psi: OptimizerState::new(plan.optimizer),
            rng: ChaCha8Rng::seed_from_u64(plan.seed ^ 0x5eed_0f_c7c1e),
        }
    }
}

enum StepError {
    NonFinite(String),
    Fail(Error),
}

impl From<Error> for StepError {
    fn from(e: Error) -> Self {
        StepError::Fail(e)
    }
}

fn finite_or(values: (f64, f64, f64), what: &str) -> std::result::Result<(), StepError> {
    let (a, b, c) = values;
    if a.is_finite() && b.is_finite() && c.is_finite() {
        Ok(())
    } else {
        Err(StepError::NonFinite(format!("non-finite {what} ({a}, {b}, {c})")))
    }
}

fn subset(grads: &Gradients, group: usize) -> Gradients {
    grads
        .iter()
        .filter(|(id, _)| id.group == group)
        .map(|(id, g)| (*id, g.clone()))
        .collect()
}

/// Clip and apply one optimizer step to the listed models.
fn step_models(
    pair: &mut ModelPair,
    state: &mut TrainerState,
    plan: &TrainingPlan,
    grads: &Gradients,
    groups: &[usize],
) -> std::result::Result<(), StepError> {
    let mut g: Gradients = groups.iter().flat_map(|&k| subset(grads, k)).collect();
    let norm = clip_global_norm(&mut g, plan.clip_norm);
    if !norm.is_finite() {
        return Err(StepError::NonFinite(format!("non-finite gradient norm {norm}")));
    }
    for &k in groups {
        let opt = if k == PHI_GROUP {
            &mut state.phi
        } else {
            &mut state.psi
        };
        opt.apply(&g, pair.model_mut(k).params_mut(), plan.weight_decay)?;
    }
    Ok(())
}

fn absorb(pair: &mut ModelPair, l: &StrategyLosses) {
    if let Some(m) = &l.phi_moments {
        pair.phi.update_running_stats(m);
    }
    if let Some(m) = &l.psi_moments {
        pair.psi.update_running_stats(m);
    }
}

/// One batch update. Returns `(L_f, L_b, L_total)` as measured before the
/// parameters move.
fn train_batch(
    pair: &mut ModelPair,
    x: &Tensor,
    y: &Tensor,
    plan: &TrainingPlan,
    state: &mut TrainerState,
) -> std::result::Result<(f64, f64, f64), StepError> {
    let mode = ForwardMode::Training;
    let kind = plan.loss;
    let mut rng = state.rng.clone();
    let out = match (plan.strategy, plan.update_mode) {
        (Strategy::Jcm, UpdateMode::Simultaneous) => {
            let mut tape = Tape::new();
            let l = loss_jcm(
                &mut tape,
                pair,
                x,
                y,
                kind,
                plan.mapping_kind(),
                plan.jcm_coefficients(),
                mode,
                &mut rng,
            )?;
            let v = l.values(&tape);
            finite_or(v, "loss")?;
            let grads = tape.backward(l.total)?;
            step_models(pair, state, plan, &grads, &[PHI_GROUP, PSI_GROUP])?;
            absorb(pair, &l);
            v
        }
        (Strategy::Jcm, UpdateMode::Stepwise) => {
            // Φ steps on its own cycle objective, then Ψ on the other.
            let c = plan.jcm_coefficients();
            let mut tape = Tape::new();
            let l = jcm_parts(&mut tape, pair, x, y, kind, plan.mapping_kind(), c, mode, JcmPart::Forward, &mut rng)?;
            let l_f = tape.value(l.l_f).item();
            finite_or((l_f, l_f, l_f), "loss")?;
            let grads = tape.backward(l.l_f)?;
            step_models(pair, state, plan, &grads, &[PHI_GROUP])?;
            absorb(pair, &l);

            let mut tape = Tape::new();
            let l = jcm_parts(&mut tape, pair, x, y, kind, plan.mapping_kind(), c, mode, JcmPart::Backward, &mut rng)?;
            let l_b = tape.value(l.l_b).item();
            finite_or((l_b, l_b, l_b), "loss")?;
            let grads = tape.backward(l.l_b)?;
            step_models(pair, state, plan, &grads, &[PSI_GROUP])?;
            absorb(pair, &l);
            (l_f, l_b, 0.5 * (l_f + l_b))
        }
        (strategy, UpdateMode::Simultaneous) => {
            let mut tape = Tape::new();
            let l = match strategy {
                Strategy::Baseline => loss_baseline(&mut tape, pair, x, y, kind, mode, &mut rng)?,
                Strategy::Ucm => loss_ucm(&mut tape, pair, x, y, kind, mode, &mut rng)?,
                _ => loss_ucm_hybrid(&mut tape, pair, x, y, kind, mode, &mut rng)?,
            };
            let v = l.values(&tape);
            finite_or(v, "loss")?;
            // Each model follows its own objective at full scale.
            let objective = tape.add(l.l_f, l.l_b)?;
            let grads = tape.backward(objective)?;
            step_models(pair, state, plan, &grads, &[PHI_GROUP, PSI_GROUP])?;
            absorb(pair, &l);
            v
        }
        (strategy, UpdateMode::Stepwise) => {
            let xv_t = x.clone();
            let yv_t = y.clone();
            // Φ: direct loss.
            let mut tape = Tape::new();
            let xv = tape.constant(xv_t);
            let yv = tape.constant(yv_t);
            let (l_f, phi_m) = direct_forward_term(&mut tape, pair, xv, yv, kind, mode, &mut rng)?;
            let lf = tape.value(l_f).item();
            finite_or((lf, lf, lf), "loss")?;
            let grads = tape.backward(l_f)?;
            step_models(pair, state, plan, &grads, &[PHI_GROUP])?;
            pair.phi.update_running_stats(&phi_m);

            // Ψ: one step per loss term, direct before cycle.
            let terms: &[(bool, bool)] = match strategy {
                Strategy::Baseline => &[(true, false)],
                Strategy::Ucm => &[(false, true)],
                _ => &[(true, false), (false, true)],
            };
            let mut parts = Vec::new();
            for &(direct, cycle) in terms {
                let mut tape = Tape::new();
                let xv = tape.constant(x.clone());
                let yv = tape.constant(y.clone());
                let (d, c, psi_m) = backward_terms(
                    &mut tape,
                    pair,
                    direct.then_some(xv),
                    yv,
                    kind,
                    mode,
                    cycle,
                    &mut rng,
                )?;
                let term = d.or(c).expect("one term per step");
                let v = tape.value(term).item();
                finite_or((v, v, v), "loss")?;
                let grads = tape.backward(term)?;
                step_models(pair, state, plan, &grads, &[PSI_GROUP])?;
                pair.psi.update_running_stats(&psi_m);
                parts.push(v);
            }
            let lb = parts.iter().sum::<f64>() / parts.len() as f64;
            (lf, lb, 0.5 * (lf + lb))
        }
    };
    state.rng = rng;
    Ok(out)
}

/// One pass over shuffled mini-batches of `data`.
pub fn train_epoch(
    pair: &mut ModelPair,
    data: &Dataset,
    plan: &TrainingPlan,
    state: &mut TrainerState,
    epoch: usize,
) -> Result<std::result::Result<EpochMetrics, Divergence>> {
    if data.is_empty() {
        return Err(Error::Empty("training set has no rows".into()));
    }
    if data.x.cols() != pair.x_width() || data.y.cols() != pair.y_width() {
        return Err(Error::shape(
            "train",
            format!(
                "data widths {}→{} vs model pair {}→{}",
                data.x.cols(),
                data.y.cols(),
                pair.x_width(),
                pair.y_width()
            ),
        ));
    }
    let start = Instant::now();
    let n = data.len();
    let bs = plan.batch_size(n);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut state.rng);
    let mut sums = (0.0, 0.0, 0.0);
    let mut batches = 0usize;
    for (b, idx) in order.chunks(bs).enumerate() {
        if idx.len() < 2 {
            continue;
        }
        let x = data.x.select_rows(idx);
        let y = data.y.select_rows(idx);
        match train_batch(pair, &x, &y, plan, state) {
            Ok((f, bw, t)) => {
                sums.0 += f;
                sums.1 += bw;
                sums.2 += t;
                batches += 1;
            }
            Err(StepError::NonFinite(reason)) => {
                return Ok(Err(Divergence {
                    epoch,
                    batch: b,
                    reason,
                }))
            }
            Err(StepError::Fail(e)) => return Err(e),
        }
    }
    if batches == 0 {
        return Err(Error::Empty(format!("no batch of at least 2 rows in {n} rows")));
    }
    let k = batches as f64;
    Ok(Ok(EpochMetrics {
        epoch,
        l_f: sums.0 / k,
        l_b: sums.1 / k,
        l_total: sums.2 / k,
        val_total: None,
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
    }))
}

/// Strategy objective `(L_f, L_b, L_total)` over a whole dataset in
/// inference mode.
pub fn evaluate_objective(pair: &ModelPair, data: &Dataset, plan: &TrainingPlan) -> Result<(f64, f64, f64)> {
    let mut tape = Tape::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mode = ForwardMode::Inference;
    let (x, y, kind) = (&data.x, &data.y, plan.loss);
    let l = match plan.strategy {
        Strategy::Baseline => loss_baseline(&mut tape, pair, x, y, kind, mode, &mut rng)?,
        Strategy::Ucm => loss_ucm(&mut tape, pair, x, y, kind, mode, &mut rng)?,
        Strategy::UcmHybrid => loss_ucm_hybrid(&mut tape, pair, x, y, kind, mode, &mut rng)?,
        Strategy::Jcm => loss_jcm(
            &mut tape,
            pair,
            x,
            y,
            kind,
            plan.mapping_kind(),
            plan.jcm_coefficients(),
            mode,
            &mut rng,
        )?,
    };
    Ok(l.values(&tape))
}

/// Train for `plan.epochs`, stopping early with a [`RunStatus::Diverged`]
/// outcome on the first non-finite loss or gradient.
pub fn train(pair: &mut ModelPair, data: &Dataset, plan: &TrainingPlan) -> Result<TrainOutcome> {
    train_with(pair, data, None, plan, |_| {})
}

/// [`train`] with an optional validation set (per-epoch objective and
/// best-epoch selection) and a per-epoch callback.
pub fn train_with(
    pair: &mut ModelPair,
    data: &Dataset,
    validation: Option<&Dataset>,
    plan: &TrainingPlan,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainOutcome> {
    plan.validate()?;
    let mut state = TrainerState::new(plan);
    let mut history = Vec::with_capacity(plan.epochs);
    let mut best: Option<(f64, usize, ModelPair)> = None;
    for epoch in 0..plan.epochs {
        match train_epoch(pair, data, plan, &mut state, epoch)? {
            Ok(mut m) => {
                if let Some(v) = validation {
                    let total = evaluate_objective(pair, v, plan)?.2;
                    m.val_total = Some(total);
                    let better = best.as_ref().is_none_or(|(b, _, _)| total < *b);
                    if plan.keep_best && total.is_finite() && better {
                        best = Some((total, epoch, pair.clone()));
                    }
                }
                on_epoch(&m);
                history.push(m);
            }
            Err(d) => {
                return Ok(TrainOutcome {
                    history,
                    status: RunStatus::Diverged(d),
                    best_epoch: None,
                })
            }
        }
    }
    let best_epoch = best.map(|(_, epoch, kept)| {
        *pair = kept;
        epoch
    });
    let finite = [&pair.phi, &pair.psi]
        .iter()
        .all(|m| m.flat_params().iter().all(|v| v.is_finite()));
    let status = if finite {
        RunStatus::Converged
    } else {
        RunStatus::Diverged(Divergence {
            epoch: plan.epochs.saturating_sub(1),
            batch: 0,
            reason: "non-finite parameters after training".into(),
        })
    };
    Ok(TrainOutcome {
        history,
        status,
        best_epoch,
    })
}
