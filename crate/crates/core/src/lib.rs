//! Cycle-consistency training for non-injective regression.
//!
//! A forward model `Φ: X → Y` and a backward model `Ψ: Y → X` are trained
//! jointly under one of four strategies (independent baseline, unilateral
//! cycle, hybrid unilateral cycle, joint cycle). The crate also carries the
//! data pipeline, the evaluation/report system, and a small Lyapunov
//! stability lab for perturbed contraction maps.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod models;
pub mod optim;
pub mod plot;
pub mod stability;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;
