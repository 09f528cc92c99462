//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every primitive evaluates eagerly, appends a node holding its output and
//! whatever it needs for the backward pass, and returns a [`Var`] handle.
//! Nodes only ever reference earlier nodes, so the tape is topologically
//! ordered by construction and [`Tape::backward`] is a single reverse sweep.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::kernels;
use super::loss::LossKind;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Identifies a trainable parameter across tapes: `group` names the owning
/// model, `index` the parameter within it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ParamId {
    pub group: usize,
    pub index: usize,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Which statistics a batch-norm node normalizes with.
#[derive(Clone, Copy, Debug)]
pub enum Normalization<'a> {
    /// Per-feature statistics of the current batch.
    Batch,
    /// Externally supplied statistics, treated as constants.
    Fixed { mean: &'a [f64], var: &'a [f64] },
}

/// Per-feature mean and biased variance observed by a batch-statistics node.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchMoments {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: usize,
}

/// Gradient of a scalar with respect to every parameter leaf on a tape.
pub type Gradients = BTreeMap<ParamId, Tensor>;

#[derive(Debug)]
enum Op {
    Leaf(Option<ParamId>),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Tanh(Var),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    Dropout(Var, Vec<f64>),
    Penalty(Var, LossKind),
    Mean(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf(None))
    }

    /// Trainable leaf. The same id may be registered more than once; its
    /// gradients accumulate.
    pub fn param(&mut self, id: ParamId, value: Tensor) -> Var {
        self.push(value, Op::Leaf(Some(id)))
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = self.value(v).shape();
        if s.len() != 2 {
            return Err(Error::shape(op, format!("expected rank-2 input, got {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("[{m}, {k}] · [{k2}, {n}]: inner dimensions differ"),
            ));
        }
        let out = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b)))
    }

    /// Row-broadcast addition of a `[1, n]` (or `[n]`) bias to `[m, n]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.dims2(x, "add_bias")?;
        let b = self.value(bias);
        if b.numel() != n {
            return Err(Error::shape(
                "add_bias",
                format!("input [{m}, {n}] with bias {:?}", b.shape()),
            ));
        }
        let b = b.data().to_vec();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_exact_mut(n) {
            for (o, bj) in row.iter_mut().zip(&b) {
                *o += bj;
            }
        }
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::AddBias(x, bias)))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let ta = self.value(a);
        let data = ta
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&p, &q)| f(p, q))
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data).expect("shape preserved");
        self.push(value, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        Ok(self.zip_with(a, b, Op::Add(a, b), |p, q| p + q))
    }

    /// `a − b`, elementwise.
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "subtract")?;
        Ok(self.zip_with(a, b, Op::Sub(a, b), |p, q| p - q))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let value = self.value(x).map(|v| v * factor);
        self.push(value, Op::Scale(x, factor))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        self.push(value, Op::Relu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::tanh);
        self.push(value, Op::Tanh(x))
    }

    /// Per-feature normalization of a `[m, n]` batch followed by the affine
    /// `gamma · x̂ + beta`. With [`Normalization::Batch`] the batch moments are
    /// returned so the caller can fold them into running statistics.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        norm: Normalization<'_>,
        eps: f64,
    ) -> Result<(Var, Option<BatchMoments>)> {
        let (m, n) = self.dims2(x, "batchnorm")?;
        for (name, p) in [("gamma", gamma), ("beta", beta)] {
            if self.value(p).numel() != n {
                return Err(Error::shape(
                    "batchnorm",
                    format!("{name} {:?} for {n} features", self.value(p).shape()),
                ));
            }
        }
        let xs = self.value(x).data();
        let (mean, var, moments) = match norm {
            Normalization::Batch => {
                let mut mean = vec![0.0; n];
                for row in xs.chunks_exact(n) {
                    for (acc, v) in mean.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                mean.iter_mut().for_each(|v| *v /= m as f64);
                let mut var = vec![0.0; n];
                for row in xs.chunks_exact(n) {
                    for j in 0..n {
                        let d = row[j] - mean[j];
                        var[j] += d * d;
                    }
                }
                var.iter_mut().for_each(|v| *v /= m as f64);
                let moments = BatchMoments {
                    mean: mean.clone(),
                    var: var.clone(),
                    count: m,
                };
                (mean, var, Some(moments))
            }
            Normalization::Fixed { mean, var } => {
                if mean.len() != n || var.len() != n {
                    return Err(Error::shape(
                        "batchnorm",
                        format!("running statistics of width {} for {n} features", mean.len()),
                    ));
                }
                (mean.to_vec(), var.to_vec(), None)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = Vec::with_capacity(m * n);
        for row in xs.chunks_exact(n) {
            for j in 0..n {
                xhat.push((row[j] - mean[j]) * inv_std[j]);
            }
        }
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut out = xhat.clone();
        for row in out.chunks_exact_mut(n) {
            for j in 0..n {
                row[j] = g[j] * row[j] + b[j];
            }
        }
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            batch_stats: moments.is_some(),
        };
        Ok((self.push(Tensor::matrix(m, n, out)?, op), moments))
    }

    /// Inverted dropout: zero each element with probability `p`, scale the
    /// survivors by `1 / (1 − p)`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Var {
        let keep = 1.0 / (1.0 - p);
        let xs = self.value(x);
        let mask: Vec<f64> = (0..xs.numel())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let data = xs.data().iter().zip(&mask).map(|(v, k)| v * k).collect();
        let value = Tensor::new(xs.shape().to_vec(), data).expect("shape preserved");
        self.push(value, Op::Dropout(x, mask))
    }

    /// Elementwise loss penalty of a residual tensor.
    pub fn penalty(&mut self, r: Var, kind: LossKind) -> Var {
        let value = self.value(r).map(|v| kind.penalty(v));
        self.push(value, Op::Penalty(r, kind))
    }

    /// Mean over all elements, as a `[1]` scalar.
    pub fn mean(&mut self, x: Var) -> Var {
        let xs = self.value(x);
        let m = xs.data().iter().sum::<f64>() / xs.numel() as f64;
        self.push(Tensor::scalar(m), Op::Mean(x))
    }

    /// `mean(penalty(target − prediction))`.
    pub fn loss(&mut self, kind: LossKind, prediction: Var, target: Var) -> Result<Var> {
        let r = self.sub(target, prediction)?;
        let p = self.penalty(r, kind);
        Ok(self.mean(p))
    }

    /// Reverse sweep from a scalar node. Returns the gradient for every
    /// parameter leaf on the tape; parameters the loss does not depend on get
    /// zero tensors.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf(_) => {
                    grads[i] = Some(g);
                }
                Op::MatMul(a, b) => {
                    let ta = self.value(*a);
                    let tb = self.value(*b);
                    let (m, k) = (ta.shape()[0], ta.shape()[1]);
                    let n = tb.shape()[1];
                    let ga = kernels::matmul_bt(&g, tb.data(), m, n, k);
                    let gb = kernels::matmul_at(ta.data(), &g, k, m, n);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::AddBias(x, bias) => {
                    let n = node.value.cols();
                    let mut gb = vec![0.0; n];
                    for row in g.chunks_exact(n) {
                        for (acc, v) in gb.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    accumulate(&mut grads, *bias, gb);
                    accumulate(&mut grads, *x, g);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    let neg = g.iter().map(|v| -v).collect();
                    accumulate(&mut grads, *a, g);
                    accumulate(&mut grads, *b, neg);
                }
                Op::Scale(x, f) => {
                    let gx = g.iter().map(|v| v * f).collect();
                    accumulate(&mut grads, *x, gx);
                }
                Op::Relu(x) => {
                    let xs = self.value(*x).data();
                    let gx = g
                        .iter()
                        .zip(xs)
                        .map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, *x, gx);
                }
                Op::Tanh(x) => {
                    let ys = node.value.data();
                    let gx = g.iter().zip(ys).map(|(gv, y)| gv * (1.0 - y * y)).collect();
                    accumulate(&mut grads, *x, gx);
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                    batch_stats,
                } => {
                    let n = node.value.cols();
                    let m = node.value.rows();
                    let gam = self.value(*gamma).data();
                    let mut sum_g = vec![0.0; n];
                    let mut sum_gx = vec![0.0; n];
                    for (grow, xrow) in g.chunks_exact(n).zip(xhat.chunks_exact(n)) {
                        for j in 0..n {
                            sum_g[j] += grow[j];
                            sum_gx[j] += grow[j] * xrow[j];
                        }
                    }
                    let mut gx = vec![0.0; m * n];
                    if *batch_stats {
                        let mf = m as f64;
                        for r in 0..m {
                            for j in 0..n {
                                let idx = r * n + j;
                                gx[idx] = gam[j] * inv_std[j] / mf
                                    * (mf * g[idx] - sum_g[j] - xhat[idx] * sum_gx[j]);
                            }
                        }
                    } else {
                        for r in 0..m {
                            for j in 0..n {
                                let idx = r * n + j;
                                gx[idx] = g[idx] * gam[j] * inv_std[j];
                            }
                        }
                    }
                    accumulate(&mut grads, *gamma, sum_gx);
                    accumulate(&mut grads, *beta, sum_g);
                    accumulate(&mut grads, *x, gx);
                }
                Op::Dropout(x, mask) => {
                    let gx = g.iter().zip(mask).map(|(gv, k)| gv * k).collect();
                    accumulate(&mut grads, *x, gx);
                }
                Op::Penalty(x, kind) => {
                    let xs = self.value(*x).data();
                    let gx = g
                        .iter()
                        .zip(xs)
                        .map(|(gv, r)| gv * kind.penalty_grad(*r))
                        .collect();
                    accumulate(&mut grads, *x, gx);
                }
                Op::Mean(x) => {
                    let numel = self.value(*x).numel();
                    accumulate(&mut grads, *x, vec![g[0] / numel as f64; numel]);
                }
            }
        }

        let mut out = Gradients::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf(Some(id)) = node.op {
                let shape = node.value.shape();
                let entry = out.entry(id).or_insert_with(|| Tensor::zeros(shape));
                if entry.shape() != shape {
                    return Err(Error::shape(
                        "backward",
                        format!("parameter {id:?} registered with shapes {:?} and {shape:?}", entry.shape()),
                    ));
                }
                if let Some(Some(g)) = grads.get(i) {
                    for (acc, v) in entry.data_mut().iter_mut().zip(g) {
                        *acc += v;
                    }
                }
            }
        }
        Ok(out)
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
    match &mut grads[v.0] {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn m(rows: usize, cols: usize, v: &[f64]) -> Tensor {
        Tensor::matrix(rows, cols, v.to_vec()).unwrap()
    }

    #[test]
    fn identity_matmul() {
        let mut t = Tape::new();
        let i = t.constant(m(2, 2, &[1.0, 0.0, 0.0, 1.0]));
        let x = t.constant(m(2, 1, &[3.0, 4.0]));
        let y = t.matmul(i, x).unwrap();
        assert_eq!(t.value(y).data(), &[3.0, 4.0]);
    }

    #[test]
    fn matmul_inner_dim_mismatch_names_shapes() {
        let mut t = Tape::new();
        let a = t.constant(m(2, 3, &[0.0; 6]));
        let b = t.constant(m(2, 2, &[0.0; 4]));
        let msg = t.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("matmul") && msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn relu_sign_cases() {
        let mut t = Tape::new();
        let x = t.constant(m(1, 3, &[-1.0, 0.0, 2.0]));
        let y = t.relu(x);
        assert_eq!(t.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn batchnorm_two_rows_normalizes_to_unit() {
        let mut t = Tape::new();
        let x = t.constant(m(2, 1, &[0.0, 2.0]));
        let g = t.constant(m(1, 1, &[1.0]));
        let b = t.constant(m(1, 1, &[0.0]));
        let (y, moments) = t.batch_norm(x, g, b, Normalization::Batch, 0.0).unwrap();
        assert_eq!(t.value(y).data(), &[-1.0, 1.0]);
        let moments = moments.unwrap();
        assert_eq!(moments.mean, vec![1.0]);
        assert_eq!(moments.var, vec![1.0]);
    }

    #[test]
    fn least_squares_hand_gradient() {
        // loss = mean((w·x − y)²), w=1, x=1, y=2 → dL/dw = 2(w x − y) x = −2
        let mut t = Tape::new();
        let id = ParamId { group: 0, index: 0 };
        let w = t.param(id, m(1, 1, &[1.0]));
        let x = t.constant(m(1, 1, &[1.0]));
        let y = t.constant(m(1, 1, &[2.0]));
        let p = t.matmul(x, w).unwrap();
        let l = t.loss(LossKind::L2, p, y).unwrap();
        let g = t.backward(l).unwrap();
        assert_eq!(g[&id].data(), &[-2.0]);
    }

    #[test]
    fn disconnected_parameter_gets_zero_gradient() {
        let mut t = Tape::new();
        let used = ParamId { group: 0, index: 0 };
        let unused = ParamId { group: 1, index: 0 };
        let w = t.param(used, m(1, 2, &[1.0, 2.0]));
        t.param(unused, m(2, 2, &[5.0; 4]));
        let sq = t.penalty(w, LossKind::L2);
        let l = t.mean(sq);
        let g = t.backward(l).unwrap();
        assert_eq!(g[&unused], Tensor::zeros(&[2, 2]));
        assert_eq!(g[&used].data(), &[1.0, 2.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut t = Tape::new();
        let x = t.constant(m(1, 2, &[1.0, 2.0]));
        assert!(matches!(t.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn repeated_registration_accumulates() {
        // loss = mean(w) + mean(w) with w scalar → grad 2
        let mut t = Tape::new();
        let id = ParamId { group: 0, index: 0 };
        let a = t.param(id, m(1, 1, &[3.0]));
        let b = t.param(id, m(1, 1, &[3.0]));
        let s = t.add(a, b).unwrap();
        let l = t.mean(s);
        assert_eq!(t.backward(l).unwrap()[&id].data(), &[2.0]);
    }

    #[test]
    fn dropout_mask_scales_survivors() {
        let mut t = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = t.constant(Tensor::full(&[20, 10], 1.0));
        let y = t.dropout(x, 0.5, &mut rng);
        for &v in t.value(y).data() {
            assert!(v == 0.0 || v == 2.0);
        }
    }
}
