//! Forward (`Φ: X → Y`) and backward (`Ψ: Y → X`) regression models.
//!
//! Each model is a plain MLP whose layers run `linear → [batchnorm] →
//! activation → [dropout]`. The two models of a [`ModelPair`] own disjoint
//! parameter groups, so gradients for one can never land on the other.

use std::path::Path;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BatchMoments, Normalization, ParamId, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const DROPOUT_P: f64 = 0.1;

/// Parameter group of the forward model.
pub const PHI_GROUP: usize = 0;
/// Parameter group of the backward model.
pub const PSI_GROUP: usize = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
    None,
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            "none" => Ok(Activation::None),
            _ => Err(Error::Config(format!("unknown activation `{s}` (relu, tanh, none)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    pub input: usize,
    pub output: usize,
    pub activation: Activation,
    pub batchnorm: bool,
    pub dropout: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpSpec {
    pub layers: Vec<LayerSpec>,
    pub seed: u64,
}

impl MlpSpec {
    /// `input → hidden[0] → … → hidden[k-1] → output`, hidden layers sharing
    /// one activation/BN/dropout setting and a linear regression head.
    pub fn hidden(
        input: usize,
        hidden: &[usize],
        output: usize,
        activation: Activation,
        batchnorm: bool,
        dropout: bool,
        seed: u64,
    ) -> Self {
        let mut layers = Vec::with_capacity(hidden.len() + 1);
        let mut prev = input;
        for &w in hidden {
            layers.push(LayerSpec {
                input: prev,
                output: w,
                activation,
                batchnorm,
                dropout,
            });
            prev = w;
        }
        layers.push(LayerSpec {
            input: prev,
            output,
            activation: Activation::None,
            batchnorm: false,
            dropout: false,
        });
        MlpSpec { layers, seed }
    }

    pub fn validate(&self) -> Result<()> {
        let Some(last) = self.layers.last() else {
            return Err(Error::InvalidSpec("model has no layers".into()));
        };
        for (k, l) in self.layers.iter().enumerate() {
            if l.input == 0 || l.output == 0 {
                return Err(Error::InvalidSpec(format!("layer {k} has a zero width")));
            }
        }
        for (k, pair) in self.layers.windows(2).enumerate() {
            if pair[0].output != pair[1].input {
                return Err(Error::InvalidSpec(format!(
                    "layer {k} outputs {} but layer {} expects {}",
                    pair[0].output,
                    k + 1,
                    pair[1].input
                )));
            }
        }
        if last.activation != Activation::None || last.batchnorm || last.dropout {
            return Err(Error::InvalidSpec(
                "final layer must be a plain linear regression head".into(),
            ));
        }
        Ok(())
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].input
    }

    pub fn output_width(&self) -> usize {
        self.layers[self.layers.len() - 1].output
    }
}

/// Batch-norm affine parameters plus running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNormState {
    fn new(width: usize) -> Self {
        BatchNormState {
            gamma: Tensor::full(&[1, width], 1.0),
            beta: Tensor::zeros(&[1, width]),
            running_mean: vec![0.0; width],
            running_var: vec![1.0; width],
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
        }
    }

    /// Fold one batch's moments into the running statistics, using the
    /// unbiased variance estimate.
    fn absorb(&mut self, m: &BatchMoments) {
        let correction = if m.count > 1 {
            m.count as f64 / (m.count - 1) as f64
        } else {
            1.0
        };
        let mom = self.momentum;
        for j in 0..self.running_mean.len() {
            self.running_mean[j] = (1.0 - mom) * self.running_mean[j] + mom * m.mean[j];
            self.running_var[j] =
                ((1.0 - mom) * self.running_var[j] + mom * m.var[j] * correction).max(0.0);
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub spec: LayerSpec,
    pub weight: Tensor,
    pub bias: Tensor,
    pub bn: Option<BatchNormState>,
}

/// How a model application treats its stochastic and normalizing layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ForwardMode {
    /// Batch statistics (reported back for running-stat updates), dropout on.
    Training,
    /// Running statistics held constant, dropout on. Used when a model is fed
    /// another model's output inside a training step.
    TrainingFrozenStats,
    /// Running statistics, no dropout, deterministic.
    Inference,
}

/// Result of one model application on a tape.
pub struct MlpForward {
    pub output: Var,
    /// Batch moments per layer (`None` for layers without batch statistics).
    pub moments: Vec<Option<BatchMoments>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    spec: MlpSpec,
    group: usize,
    layers: Vec<Layer>,
}

impl Mlp {
    /// Glorot-uniform weights from the spec seed; zero biases, unit BN scale.
    pub fn build(spec: MlpSpec, group: usize) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let layers = spec
            .layers
            .iter()
            .map(|l| {
                let s = (6.0 / (l.input + l.output) as f64).sqrt();
                let w = (0..l.input * l.output)
                    .map(|_| rng.random_range(-s..=s))
                    .collect();
                Layer {
                    spec: l.clone(),
                    weight: Tensor::matrix(l.input, l.output, w).expect("sized by spec"),
                    bias: Tensor::zeros(&[1, l.output]),
                    bn: l.batchnorm.then(|| BatchNormState::new(l.output)),
                }
            })
            .collect();
        Ok(Mlp { spec, group, layers })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn group(&self) -> usize {
        self.group
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_width(&self) -> usize {
        self.spec.input_width()
    }

    pub fn output_width(&self) -> usize {
        self.spec.output_width()
    }

    /// Trainable tensors in canonical order: per layer weight, bias, then
    /// BN gamma and beta.
    pub fn params(&self) -> Vec<(ParamId, &Tensor)> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.push(&l.weight);
            out.push(&l.bias);
            if let Some(bn) = &l.bn {
                out.push(&bn.gamma);
                out.push(&bn.beta);
            }
        }
        out.into_iter()
            .enumerate()
            .map(|(index, t)| (ParamId { group: self.group, index }, t))
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<(ParamId, &mut Tensor)> {
        let group = self.group;
        let mut out = Vec::new();
        for l in &mut self.layers {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
            if let Some(bn) = &mut l.bn {
                out.push(&mut bn.gamma);
                out.push(&mut bn.beta);
            }
        }
        out.into_iter()
            .enumerate()
            .map(|(index, t)| (ParamId { group, index }, t))
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn flat_params(&self) -> Vec<f64> {
        self.params()
            .into_iter()
            .flat_map(|(_, t)| t.data().iter().copied())
            .collect()
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        let want = self.param_count();
        if flat.len() != want {
            return Err(Error::Checkpoint(format!(
                "expected {want} parameters, found {}",
                flat.len()
            )));
        }
        let mut offset = 0;
        for (_, t) in self.params_mut() {
            let n = t.numel();
            t.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// Apply the model to `input` on `tape`. With `trainable == false` the
    /// parameters enter as constants, so no gradient reaches them.
    pub fn forward(
        &self,
        tape: &mut Tape,
        input: Var,
        mode: ForwardMode,
        trainable: bool,
        rng: &mut dyn RngCore,
    ) -> Result<MlpForward> {
        let width = tape.value(input).cols();
        if tape.value(input).shape().len() != 2 || width != self.input_width() {
            return Err(Error::shape(
                "model_forward",
                format!(
                    "model expects {} input columns, batch has shape {:?}",
                    self.input_width(),
                    tape.value(input).shape()
                ),
            ));
        }
        let mut params = self.params().into_iter();
        let mut next = |tape: &mut Tape| {
            let (id, t) = params.next().expect("layer parameters in canonical order");
            if trainable {
                tape.param(id, t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        let mut h = input;
        let mut moments = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let w = next(tape);
            let b = next(tape);
            h = tape.matmul(h, w)?;
            h = tape.add_bias(h, b)?;
            let mut m = None;
            if let Some(bn) = &layer.bn {
                let gamma = next(tape);
                let beta = next(tape);
                let norm = match mode {
                    ForwardMode::Training => Normalization::Batch,
                    _ => Normalization::Fixed {
                        mean: &bn.running_mean,
                        var: &bn.running_var,
                    },
                };
                let (out, moments) = tape.batch_norm(h, gamma, beta, norm, bn.eps)?;
                h = out;
                m = moments;
            }
            h = match layer.spec.activation {
                Activation::Relu => tape.relu(h),
                Activation::Tanh => tape.tanh(h),
                Activation::None => h,
            };
            if layer.spec.dropout && mode != ForwardMode::Inference {
                h = tape.dropout(h, DROPOUT_P, rng);
            }
            moments.push(m);
        }
        Ok(MlpForward { output: h, moments })
    }

    /// Fold batch moments from a [`ForwardMode::Training`] application into
    /// the running statistics.
    pub fn update_running_stats(&mut self, moments: &[Option<BatchMoments>]) {
        for (layer, m) in self.layers.iter_mut().zip(moments) {
            if let (Some(bn), Some(m)) = (&mut layer.bn, m) {
                bn.absorb(m);
            }
        }
    }

    /// Deterministic inference on a `[rows, input]` batch.
    pub fn predict(&self, batch: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.constant(batch.clone());
        let mut rng = NoRng;
        let out = self.forward(&mut tape, x, ForwardMode::Inference, false, &mut rng)?;
        Ok(tape.value(out.output).clone())
    }
}

/// Placeholder RNG for inference, where dropout is never sampled.
struct NoRng;

impl RngCore for NoRng {
    fn next_u32(&mut self) -> u32 {
        unreachable!("inference never samples")
    }
    fn next_u64(&mut self) -> u64 {
        unreachable!("inference never samples")
    }
    fn fill_bytes(&mut self, _: &mut [u8]) {
        unreachable!("inference never samples")
    }
}

/// Which composition a cycle runs through.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CycleDirection {
    /// `x → Φ(x) → Ψ(Φ(x))`
    Forward,
    /// `y → Ψ(y) → Φ(Ψ(y))`
    Backward,
}

/// Output of [`ModelPair::cycle_forward`].
pub struct CycleForward {
    pub inner: Var,
    pub reconstruction: Var,
    /// Batch moments of the inner model (training mode only).
    pub inner_moments: Vec<Option<BatchMoments>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelPair {
    pub phi: Mlp,
    pub psi: Mlp,
}

impl ModelPair {
    pub fn new(phi_spec: MlpSpec, psi_spec: MlpSpec) -> Result<Self> {
        let phi = Mlp::build(phi_spec, PHI_GROUP)?;
        let psi = Mlp::build(psi_spec, PSI_GROUP)?;
        Self::from_models(phi, psi)
    }

    pub fn from_models(phi: Mlp, psi: Mlp) -> Result<Self> {
        if phi.group() == psi.group() {
            return Err(Error::InvalidSpec("Φ and Ψ share a parameter group".into()));
        }
        if phi.input_width() != psi.output_width() || phi.output_width() != psi.input_width() {
            return Err(Error::InvalidSpec(format!(
                "Φ maps {}→{} but Ψ maps {}→{}",
                phi.input_width(),
                phi.output_width(),
                psi.input_width(),
                psi.output_width()
            )));
        }
        Ok(ModelPair { phi, psi })
    }

    pub fn x_width(&self) -> usize {
        self.phi.input_width()
    }

    pub fn y_width(&self) -> usize {
        self.phi.output_width()
    }

    pub fn model(&self, group: usize) -> &Mlp {
        if group == PHI_GROUP {
            &self.phi
        } else {
            &self.psi
        }
    }

    pub fn model_mut(&mut self, group: usize) -> &mut Mlp {
        if group == PHI_GROUP {
            &mut self.phi
        } else {
            &mut self.psi
        }
    }

    /// Run one cycle on a single tape so gradients flow through both models.
    ///
    /// The inner model sees the data batch and runs in `mode`; the outer
    /// model sees the inner model's output and, in training, normalizes with
    /// its running statistics.
    pub fn cycle_forward(
        &self,
        tape: &mut Tape,
        batch: Var,
        direction: CycleDirection,
        mode: ForwardMode,
        rng: &mut dyn RngCore,
    ) -> Result<CycleForward> {
        let (first, second) = match direction {
            CycleDirection::Forward => (&self.phi, &self.psi),
            CycleDirection::Backward => (&self.psi, &self.phi),
        };
        let outer_mode = match mode {
            ForwardMode::Inference => ForwardMode::Inference,
            _ => ForwardMode::TrainingFrozenStats,
        };
        let inner = first.forward(tape, batch, mode, true, rng)?;
        let recon = second.forward(tape, inner.output, outer_mode, true, rng)?;
        Ok(CycleForward {
            inner: inner.output,
            reconstruction: recon.output,
            inner_moments: inner.moments,
        })
    }

    /// Inference-mode cycle on a concrete batch: `(inner, reconstruction)`.
    pub fn cycle(&self, batch: &Tensor, direction: CycleDirection) -> Result<(Tensor, Tensor)> {
        let (first, second) = match direction {
            CycleDirection::Forward => (&self.phi, &self.psi),
            CycleDirection::Backward => (&self.psi, &self.phi),
        };
        let inner = first.predict(batch)?;
        let recon = second.predict(&inner)?;
        Ok((inner, recon))
    }
}

pub const CHECKPOINT_FORMAT: &str = "cyclefit-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Serialized form of one model: spec, flat parameters, BN running stats.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpSnapshot {
    pub spec: MlpSpec,
    pub params: Vec<f64>,
    pub running_mean: Vec<Vec<f64>>,
    pub running_var: Vec<Vec<f64>>,
}

impl MlpSnapshot {
    pub fn capture(m: &Mlp) -> Self {
        let (running_mean, running_var) = m
            .layers
            .iter()
            .filter_map(|l| l.bn.as_ref())
            .map(|bn| (bn.running_mean.clone(), bn.running_var.clone()))
            .unzip();
        MlpSnapshot {
            spec: m.spec.clone(),
            params: m.flat_params(),
            running_mean,
            running_var,
        }
    }

    pub fn restore(&self, group: usize) -> Result<Mlp> {
        let mut m = Mlp::build(self.spec.clone(), group)?;
        m.set_flat_params(&self.params)?;
        let mut stats = self.running_mean.iter().zip(&self.running_var);
        for layer in &mut m.layers {
            if let Some(bn) = &mut layer.bn {
                let (mean, var) = stats
                    .next()
                    .ok_or_else(|| Error::Checkpoint("missing batch-norm statistics".into()))?;
                if mean.len() != bn.running_mean.len() || var.len() != bn.running_var.len() {
                    return Err(Error::Checkpoint("batch-norm statistics width mismatch".into()));
                }
                bn.running_mean.clone_from(mean);
                bn.running_var.clone_from(var);
            }
        }
        if stats.next().is_some() {
            return Err(Error::Checkpoint("extra batch-norm statistics".into()));
        }
        Ok(m)
    }
}

/// Versioned JSON container for a trained [`ModelPair`] plus caller-defined
/// metadata. Floats are written in shortest round-trip form and parsed back
/// exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint<M = serde_json::Value> {
    pub format: String,
    pub version: u32,
    pub phi: MlpSnapshot,
    pub psi: MlpSnapshot,
    pub metadata: M,
}

impl<M: Serialize + serde::de::DeserializeOwned> Checkpoint<M> {
    pub fn capture(pair: &ModelPair, metadata: M) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            phi: MlpSnapshot::capture(&pair.phi),
            psi: MlpSnapshot::capture(&pair.psi),
            metadata,
        }
    }

    pub fn restore(&self) -> Result<ModelPair> {
        ModelPair::from_models(self.phi.restore(PHI_GROUP)?, self.psi.restore(PSI_GROUP)?)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let ck: Self = serde_json::from_str(s).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("unknown format `{}`", ck.format)));
        }
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {}", ck.version)));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn linear(input: usize, output: usize, w: &[f64], b: &[f64], group: usize) -> Mlp {
        let spec = MlpSpec::hidden(input, &[], output, Activation::None, false, false, 0);
        let mut m = Mlp::build(spec, group).unwrap();
        let mut flat = w.to_vec();
        flat.extend_from_slice(b);
        m.set_flat_params(&flat).unwrap();
        m
    }

    fn identity_pair() -> ModelPair {
        ModelPair::from_models(
            linear(1, 1, &[1.0], &[0.0], PHI_GROUP),
            linear(1, 1, &[1.0], &[0.0], PSI_GROUP),
        )
        .unwrap()
    }

    #[test]
    fn same_seed_same_parameters() {
        let spec = MlpSpec::hidden(2, &[8, 8], 1, Activation::Tanh, true, false, 42);
        let a = Mlp::build(spec.clone(), 0).unwrap();
        let b = Mlp::build(spec, 0).unwrap();
        let bits = |m: &Mlp| m.flat_params().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn parameter_count_by_formula() {
        let spec = MlpSpec::hidden(1, &[16, 16], 1, Activation::Tanh, true, false, 1);
        let expected = (16 + 16) + 2 * 16 + (16 * 16 + 16) + 2 * 16 + (16 + 1);
        assert_eq!(expected, 385);
        assert_eq!(Mlp::build(spec, 0).unwrap().param_count(), expected);
    }

    #[test]
    fn broken_width_chain_is_rejected() {
        let spec = MlpSpec {
            layers: vec![
                LayerSpec {
                    input: 1,
                    output: 8,
                    activation: Activation::Tanh,
                    batchnorm: false,
                    dropout: false,
                },
                LayerSpec {
                    input: 4,
                    output: 1,
                    activation: Activation::None,
                    batchnorm: false,
                    dropout: false,
                },
            ],
            seed: 0,
        };
        assert!(matches!(Mlp::build(spec, 0), Err(Error::InvalidSpec(_))));
    }

    #[test]
    fn glorot_bounds_respected() {
        let spec = MlpSpec::hidden(3, &[5], 2, Activation::Relu, false, false, 9);
        let m = Mlp::build(spec, 0).unwrap();
        for l in m.layers() {
            let s = (6.0 / (l.spec.input + l.spec.output) as f64).sqrt();
            assert!(l.weight.data().iter().all(|w| w.abs() <= s));
        }
    }

    #[test]
    fn zero_model_gives_zero_output() {
        let spec = MlpSpec::hidden(2, &[4], 1, Activation::Tanh, false, false, 0);
        let mut m = Mlp::build(spec, 0).unwrap();
        let n = m.param_count();
        m.set_flat_params(&vec![0.0; n]).unwrap();
        let out = m.predict(&Tensor::matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        assert!(out.unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_affine_layer() {
        let m = linear(1, 1, &[2.0], &[1.0], 0);
        let out = m.predict(&Tensor::matrix(1, 1, vec![3.0]).unwrap()).unwrap();
        assert_eq!(out.data(), &[7.0]);
    }

    #[test]
    fn inference_is_repeatable_and_dropout_free() {
        let spec = MlpSpec::hidden(1, &[8, 8], 1, Activation::Tanh, true, true, 5);
        let m = Mlp::build(spec, 0).unwrap();
        let x = Tensor::matrix(4, 1, vec![0.1, 0.2, 0.7, 0.9]).unwrap();
        assert_eq!(m.predict(&x).unwrap(), m.predict(&x).unwrap());
    }

    #[test]
    fn width_mismatch_is_rejected() {
        let m = linear(2, 1, &[1.0, 1.0], &[0.0], 0);
        let err = m.predict(&Tensor::matrix(1, 3, vec![0.0; 3]).unwrap()).unwrap_err();
        assert!(err.to_string().contains("model_forward"));
    }

    #[test]
    fn identity_cycle_reconstructs_input() {
        let pair = identity_pair();
        let x = Tensor::matrix(3, 1, vec![0.1, 0.5, 0.9]).unwrap();
        for dir in [CycleDirection::Forward, CycleDirection::Backward] {
            let (_, recon) = pair.cycle(&x, dir).unwrap();
            assert_eq!(recon, x);
        }
    }

    #[test]
    fn cycle_keeps_batch_shape() {
        let phi = Mlp::build(MlpSpec::hidden(2, &[6], 3, Activation::Tanh, true, false, 1), PHI_GROUP);
        let psi = Mlp::build(MlpSpec::hidden(3, &[5], 2, Activation::Relu, true, false, 2), PSI_GROUP);
        let pair = ModelPair::from_models(phi.unwrap(), psi.unwrap()).unwrap();
        let x = Tensor::matrix(4, 2, (0..8).map(|v| v as f64 * 0.1).collect()).unwrap();
        let y = Tensor::matrix(4, 3, (0..12).map(|v| v as f64 * 0.05).collect()).unwrap();
        assert_eq!(pair.cycle(&x, CycleDirection::Forward).unwrap().1.shape(), x.shape());
        assert_eq!(pair.cycle(&y, CycleDirection::Backward).unwrap().1.shape(), y.shape());
        assert!(pair.cycle(&y, CycleDirection::Forward).is_err());
    }

    #[test]
    fn mismatched_pair_is_rejected() {
        let phi = linear(2, 1, &[1.0, 1.0], &[0.0], PHI_GROUP);
        let psi = linear(1, 1, &[1.0], &[0.0], PSI_GROUP);
        assert!(ModelPair::from_models(phi, psi).is_err());
    }

    #[test]
    fn checkpoint_round_trips_bit_exactly() {
        let spec = MlpSpec::hidden(1, &[7, 7], 1, Activation::Tanh, true, false, 77);
        let mut pair = ModelPair::new(spec.clone(), MlpSpec { seed: 78, ..spec }).unwrap();
        pair.phi.layers_mut()[0].bn.as_mut().unwrap().running_mean[3] = 0.1 + 0.2;
        pair.psi.layers_mut()[1].bn.as_mut().unwrap().running_var[0] = 1.0 / 3.0;
        let ck = Checkpoint::capture(&pair, serde_json::json!({"note": "x"}));
        let back: Checkpoint = Checkpoint::from_json(&ck.to_json().unwrap()).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.restore().unwrap(), pair);
    }

    #[test]
    fn checkpoint_rejects_wrong_version() {
        let pair = identity_pair();
        let mut ck = Checkpoint::capture(&pair, serde_json::Value::Null);
        ck.version = 99;
        assert!(Checkpoint::<serde_json::Value>::from_json(&ck.to_json().unwrap()).is_err());
    }
}
