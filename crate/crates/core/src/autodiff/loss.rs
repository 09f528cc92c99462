use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Threshold of the Smooth-L1 penalty on normalized data.
pub const SMOOTH_L1_BETA: f64 = 1.0;

/// Penalty family applied to a residual tensor and reduced by mean.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    L2,
    L1,
    SmoothL1,
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "l2" => Ok(LossKind::L2),
            "l1" => Ok(LossKind::L1),
            "smooth_l1" => Ok(LossKind::SmoothL1),
            _ => Err(Error::Config(format!("unknown loss `{s}` (l2, l1, smooth_l1)"))),
        }
    }
}

impl LossKind {
    pub fn id(self) -> &'static str {
        match self {
            LossKind::L2 => "l2",
            LossKind::L1 => "l1",
            LossKind::SmoothL1 => "smooth_l1",
        }
    }

    pub fn penalty(self, r: f64) -> f64 {
        match self {
            LossKind::L2 => r * r,
            LossKind::L1 => r.abs(),
            LossKind::SmoothL1 => {
                let a = r.abs();
                if a < SMOOTH_L1_BETA {
                    0.5 * r * r / SMOOTH_L1_BETA
                } else {
                    a - 0.5 * SMOOTH_L1_BETA
                }
            }
        }
    }

    /// d penalty / d r. The L1 subgradient at 0 is taken as 0.
    pub fn penalty_grad(self, r: f64) -> f64 {
        match self {
            LossKind::L2 => 2.0 * r,
            LossKind::L1 => sign(r),
            LossKind::SmoothL1 => {
                if r.abs() < SMOOTH_L1_BETA {
                    r / SMOOTH_L1_BETA
                } else {
                    sign(r)
                }
            }
        }
    }
}

fn sign(r: f64) -> f64 {
    if r > 0.0 {
        1.0
    } else if r < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Mean penalty of `target − prediction` over every element, off-tape.
pub fn loss_eval(kind: LossKind, prediction: &Tensor, target: &Tensor) -> Result<f64> {
    if prediction.shape() != target.shape() {
        return Err(Error::shape(
            "loss",
            format!("prediction {:?} vs target {:?}", prediction.shape(), target.shape()),
        ));
    }
    if prediction.numel() == 0 {
        return Err(Error::Empty("loss over empty tensors".into()));
    }
    let total: f64 = prediction
        .data()
        .iter()
        .zip(target.data())
        .map(|(p, t)| kind.penalty(t - p))
        .sum();
    Ok(total / prediction.numel() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(v: &[f64]) -> Tensor {
        Tensor::matrix(1, v.len(), v.to_vec()).unwrap()
    }

    #[test]
    fn zero_residual_is_zero_loss() {
        let t = row(&[0.3, -1.2, 4.0]);
        for kind in [LossKind::L2, LossKind::L1, LossKind::SmoothL1] {
            assert_eq!(loss_eval(kind, &t, &t).unwrap(), 0.0);
        }
    }

    #[test]
    fn l1_unit_residuals() {
        let l = loss_eval(LossKind::L1, &row(&[0.0, 0.0]), &row(&[1.0, -1.0])).unwrap();
        assert_eq!(l, 1.0);
    }

    #[test]
    fn smooth_l1_quadratic_branch() {
        // 0.5 * 0.5^2 / 1
        let l = loss_eval(LossKind::SmoothL1, &row(&[0.0]), &row(&[0.5])).unwrap();
        assert!((l - 0.125).abs() < 1e-15);
        // linear branch: |2| - 0.5
        let l = loss_eval(LossKind::SmoothL1, &row(&[0.0]), &row(&[-2.0])).unwrap();
        assert!((l - 1.5).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let err = loss_eval(LossKind::L2, &row(&[1.0]), &row(&[1.0, 2.0])).unwrap_err();
        assert!(err.to_string().contains("loss"));
    }

    #[test]
    fn penalties_are_non_negative() {
        for kind in [LossKind::L2, LossKind::L1, LossKind::SmoothL1] {
            for i in -50..=50 {
                assert!(kind.penalty(i as f64 * 0.13) >= 0.0);
            }
        }
    }
}
