//! SGD and Adam over [`Gradients`] maps, plus global-norm clipping.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, ParamId};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerConfig {
    Sgd {
        lr: f64,
    },
    Adam {
        lr: f64,
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_eps")]
        eps: f64,
    },
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl OptimizerConfig {
    pub fn adam(lr: f64) -> Self {
        OptimizerConfig::Adam {
            lr,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }

    pub fn sgd(lr: f64) -> Self {
        OptimizerConfig::Sgd { lr }
    }

    pub fn lr(&self) -> f64 {
        match *self {
            OptimizerConfig::Sgd { lr } | OptimizerConfig::Adam { lr, .. } => lr,
        }
    }

    pub fn with_lr(self, lr: f64) -> Self {
        match self {
            OptimizerConfig::Sgd { .. } => OptimizerConfig::Sgd { lr },
            OptimizerConfig::Adam { beta1, beta2, eps, .. } => OptimizerConfig::Adam { lr, beta1, beta2, eps },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let lr = self.lr();
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
        }
        if let OptimizerConfig::Adam { beta1, beta2, eps, .. } = *self {
            if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || !(eps > 0.0) {
                return Err(Error::Config(format!(
                    "adam needs betas in [0, 1) and eps > 0, got ({beta1}, {beta2}, {eps})"
                )));
            }
        }
        Ok(())
    }
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self::adam(1e-3)
    }
}

/// Per-parameter optimizer memory. SGD keeps only the step counter.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    config: OptimizerConfig,
    step: u64,
    moments: BTreeMap<ParamId, (Vec<f64>, Vec<f64>)>,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig) -> Self {
        OptimizerState {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn moments(&self, id: ParamId) -> Option<(&[f64], &[f64])> {
        self.moments.get(&id).map(|(m, v)| (m.as_slice(), v.as_slice()))
    }

    /// One update of `params` from `grads`. Every parameter passed in must
    /// have a gradient of the same shape. `weight_decay` adds `λ·p` to each
    /// gradient (the derivative of `λ/2 · ‖p‖²`).
    pub fn apply<'a>(
        &mut self,
        grads: &Gradients,
        params: impl IntoIterator<Item = (ParamId, &'a mut Tensor)>,
        weight_decay: f64,
    ) -> Result<()> {
        let params: Vec<_> = params.into_iter().collect();
        for (id, p) in &params {
            let g = grads
                .get(id)
                .ok_or_else(|| Error::shape("optimizer", format!("no gradient for {id:?}")))?;
            if g.shape() != p.shape() {
                return Err(Error::shape(
                    "optimizer",
                    format!("{id:?}: gradient {:?} vs parameter {:?}", g.shape(), p.shape()),
                ));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        for (id, p) in params {
            let g = &grads[&id];
            match self.config {
                OptimizerConfig::Sgd { lr } => {
                    for (w, gv) in p.data_mut().iter_mut().zip(g.data()) {
                        *w -= lr * (gv + weight_decay * *w);
                    }
                }
                OptimizerConfig::Adam {
                    lr,
                    beta1,
                    beta2,
                    eps,
                } => {
                    let n = p.numel();
                    let (m, v) = self
                        .moments
                        .entry(id)
                        .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
                    let bc1 = 1.0 - beta1.powi(t);
                    let bc2 = 1.0 - beta2.powi(t);
                    for (((w, gv), mi), vi) in p
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(m.iter_mut())
                        .zip(v.iter_mut())
                    {
                        let gi = gv + weight_decay * *w;
                        *mi = beta1 * *mi + (1.0 - beta1) * gi;
                        *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                        let mhat = *mi / bc1;
                        let vhat = *vi / bc2;
                        *w -= lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Euclidean norm over every entry of the map.
pub fn global_norm(grads: &Gradients) -> f64 {
    grads.values().map(Tensor::sum_sq).sum::<f64>().sqrt()
}

/// Rescale `grads` so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut Gradients, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn id(i: usize) -> ParamId {
        ParamId { group: 0, index: i }
    }

    fn single(g: f64) -> Gradients {
        Gradients::from([(id(0), Tensor::scalar(g))])
    }

    #[test]
    fn sgd_single_step() {
        let mut p = Tensor::scalar(1.0);
        let mut opt = OptimizerState::new(OptimizerConfig::sgd(0.1));
        opt.apply(&single(2.0), [(id(0), &mut p)], 0.0).unwrap();
        assert!((p.item() - 0.8).abs() < 1e-15);
        assert_eq!(opt.step(), 1);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = Tensor::scalar(0.0);
        let mut opt = OptimizerState::new(OptimizerConfig::adam(1e-3));
        opt.apply(&single(1.0), [(id(0), &mut p)], 0.0).unwrap();
        // m̂ = 1, v̂ = 1 → Δ = lr · 1 / (1 + 1e-8)
        assert!((p.item() + 1e-3 / (1.0 + 1e-8)).abs() < 1e-18);
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = Tensor::scalar(0.5);
        let mut sgd = OptimizerState::new(OptimizerConfig::sgd(0.1));
        sgd.apply(&single(0.0), [(id(0), &mut p)], 0.0).unwrap();
        assert_eq!(p.item(), 0.5);

        // Adam: a non-zero history keeps moving the parameter while the
        // moments decay.
        let mut adam = OptimizerState::new(OptimizerConfig::adam(1e-2));
        adam.apply(&single(1.0), [(id(0), &mut p)], 0.0).unwrap();
        let m1 = adam.moments(id(0)).unwrap().0[0];
        adam.apply(&single(0.0), [(id(0), &mut p)], 0.0).unwrap();
        let m2 = adam.moments(id(0)).unwrap().0[0];
        assert!((m2 - 0.9 * m1).abs() < 1e-15);

        let mut fresh = Tensor::scalar(0.5);
        let mut adam0 = OptimizerState::new(OptimizerConfig::adam(1e-2));
        adam0.apply(&single(0.0), [(id(0), &mut fresh)], 0.0).unwrap();
        assert_eq!(fresh.item(), 0.5);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut p = Tensor::zeros(&[2, 2]);
        let mut opt = OptimizerState::new(OptimizerConfig::sgd(0.1));
        assert!(opt.apply(&single(1.0), [(id(0), &mut p)], 0.0).is_err());
        assert!(opt.apply(&Gradients::new(), [(id(0), &mut p)], 0.0).is_err());
        assert_eq!(opt.step(), 0);
    }

    #[test]
    fn clipping_caps_global_norm() {
        let mut g = Gradients::from([
            (id(0), Tensor::scalar(30.0)),
            (id(1), Tensor::scalar(40.0)),
        ]);
        let before = clip_global_norm(&mut g, 10.0);
        assert_eq!(before, 50.0);
        assert!((global_norm(&g) - 10.0).abs() < 1e-12);
        assert!((g[&id(0)].item() - 6.0).abs() < 1e-12);
    }

    #[test]
    fn weight_decay_pulls_towards_zero() {
        let mut p = Tensor::scalar(2.0);
        let mut opt = OptimizerState::new(OptimizerConfig::sgd(0.1));
        opt.apply(&single(0.0), [(id(0), &mut p)], 0.5).unwrap();
        assert!((p.item() - 1.9).abs() < 1e-15);
    }
}
