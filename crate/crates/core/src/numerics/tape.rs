//! Define-by-run reverse-mode differentiation over `Matrix` values.
//!
//! A `Tape` records one forward computation; `backward` sweeps it in reverse
//! creation order and accumulates gradients deterministically. Tapes are
//! rebuilt per minibatch and confined to a single thread.

use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Sigmoid outputs are clamped into [EPS_CLIP, 1 - EPS_CLIP] so later logs
/// can never see exact 0 or 1.
pub const EPS_CLIP: f64 = 1e-7;

/// Handle to a node on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TapeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(TapeId, TapeId),
    Add(TapeId, TapeId),
    Sub(TapeId, TapeId),
    Mul(TapeId, TapeId),
    /// N x d plus a 1 x d bias row broadcast over rows.
    AddBias(TapeId, TapeId),
    Scale(TapeId, f64),
    AddScalar(TapeId),
    Log(TapeId),
    Exp(TapeId),
    Sqrt(TapeId),
    Relu(TapeId),
    Sigmoid(TapeId),
    Clamp(TapeId, f64, f64),
    Sum(TapeId),
    Mean(TapeId),
    RowLogSoftmax(TapeId),
    GatherRows(TapeId, Vec<usize>),
    Transpose(TapeId),
}

struct Node {
    op: Op,
    value: Matrix,
}

/// Gradients produced by one backward sweep, indexed by tape node.
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient of the swept loss w.r.t. the node, if any path reached it.
    pub fn get(&self, id: TapeId) -> Option<&Matrix> {
        self.grads[id.0].as_ref()
    }

    /// Gradient as an owned matrix, zeros when no path reached the node.
    pub fn take_or_zeros(&mut self, id: TapeId, rows: usize, cols: usize) -> Matrix {
        match self.grads[id.0].take() {
            Some(g) => g,
            None => Matrix::zeros(rows, cols),
        }
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: TapeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    pub fn scalar_value(&self, id: TapeId) -> Result<f64> {
        self.value(id).scalar_value()
    }

    fn push(&mut self, op: Op, value: Matrix) -> Result<TapeId> {
        if !value.all_finite() {
            return Err(Error::Numeric(format!(
                "non-finite value produced by {:?}",
                op_name(&op)
            )));
        }
        self.nodes.push(Node { op, value });
        Ok(TapeId(self.nodes.len() - 1))
    }

    /// Register an input. Leaves are where gradients are read back; parameters
    /// and constants are both leaves, the caller keeps track of which ids it
    /// cares about.
    pub fn leaf(&mut self, value: Matrix) -> Result<TapeId> {
        self.push(Op::Leaf, value)
    }

    /// Alias for `leaf` used for values that only carry data into the graph.
    pub fn constant(&mut self, value: Matrix) -> Result<TapeId> {
        self.leaf(value)
    }

    pub fn matmul(&mut self, a: TapeId, b: TapeId) -> Result<TapeId> {
        let value = self.value(a).matmul(self.value(b))?;
        self.push(Op::MatMul(a, b), value)
    }

    pub fn add(&mut self, a: TapeId, b: TapeId) -> Result<TapeId> {
        let value = self.value(a).add(self.value(b))?;
        self.push(Op::Add(a, b), value)
    }

    pub fn sub(&mut self, a: TapeId, b: TapeId) -> Result<TapeId> {
        let value = self.value(a).sub(self.value(b))?;
        self.push(Op::Sub(a, b), value)
    }

    pub fn mul(&mut self, a: TapeId, b: TapeId) -> Result<TapeId> {
        let value = self.value(a).hadamard(self.value(b))?;
        self.push(Op::Mul(a, b), value)
    }

    pub fn add_bias(&mut self, a: TapeId, bias: TapeId) -> Result<TapeId> {
        let (m, b) = (self.value(a), self.value(bias));
        if b.rows() != 1 || b.cols() != m.cols() {
            return Err(Error::dimension("add_bias", m.shape_string(), b.shape_string()));
        }
        let mut out = m.clone();
        for r in 0..out.rows() {
            for c in 0..out.cols() {
                out.set(r, c, out.get(r, c) + b.get(0, c));
            }
        }
        self.push(Op::AddBias(a, bias), out)
    }

    pub fn scale(&mut self, a: TapeId, c: f64) -> Result<TapeId> {
        let value = self.value(a).scale(c);
        self.push(Op::Scale(a, c), value)
    }

    pub fn add_scalar(&mut self, a: TapeId, c: f64) -> Result<TapeId> {
        let value = self.value(a).map(|v| v + c);
        self.push(Op::AddScalar(a), value)
    }

    /// Element-wise natural log. Inputs must be strictly positive.
    pub fn log(&mut self, a: TapeId) -> Result<TapeId> {
        if self.value(a).data().iter().any(|&v| v <= 0.0) {
            return Err(Error::Contract("log requires strictly positive entries".into()));
        }
        let value = self.value(a).map(f64::ln);
        self.push(Op::Log(a), value)
    }

    pub fn exp(&mut self, a: TapeId) -> Result<TapeId> {
        let value = self.value(a).map(f64::exp);
        self.push(Op::Exp(a), value)
    }

    /// Element-wise square root. Inputs must be strictly positive so the
    /// derivative stays finite; callers add a small offset when the argument
    /// can touch zero.
    pub fn sqrt(&mut self, a: TapeId) -> Result<TapeId> {
        if self.value(a).data().iter().any(|&v| v <= 0.0) {
            return Err(Error::Contract("sqrt requires strictly positive entries".into()));
        }
        let value = self.value(a).map(f64::sqrt);
        self.push(Op::Sqrt(a), value)
    }

    pub fn relu(&mut self, a: TapeId) -> Result<TapeId> {
        let value = self.value(a).map(|v| v.max(0.0));
        self.push(Op::Relu(a), value)
    }

    /// Element-wise logistic sigmoid, output clamped into
    /// [EPS_CLIP, 1 - EPS_CLIP].
    pub fn sigmoid(&mut self, a: TapeId) -> Result<TapeId> {
        let value = self.value(a).map(|v| {
            let s = if v >= 0.0 {
                1.0 / (1.0 + (-v).exp())
            } else {
                let e = v.exp();
                e / (1.0 + e)
            };
            s.clamp(EPS_CLIP, 1.0 - EPS_CLIP)
        });
        self.push(Op::Sigmoid(a), value)
    }

    /// Clamp into [lo, hi]; gradient passes through strictly inside the band.
    pub fn clamp(&mut self, a: TapeId, lo: f64, hi: f64) -> Result<TapeId> {
        let value = self.value(a).map(|v| v.clamp(lo, hi));
        self.push(Op::Clamp(a, lo, hi), value)
    }

    /// Sum of all entries, as a 1x1 node.
    pub fn sum(&mut self, a: TapeId) -> Result<TapeId> {
        let value = Matrix::scalar(self.value(a).sum());
        self.push(Op::Sum(a), value)
    }

    /// Mean of all entries, as a 1x1 node.
    pub fn mean(&mut self, a: TapeId) -> Result<TapeId> {
        let m = self.value(a);
        let value = Matrix::scalar(m.sum() / m.len() as f64);
        self.push(Op::Mean(a), value)
    }

    /// Numerically stable per-row log-softmax.
    pub fn row_log_softmax(&mut self, a: TapeId) -> Result<TapeId> {
        let m = self.value(a);
        let mut out = m.clone();
        for r in 0..m.rows() {
            let row_max = m.row(r).iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m.row(r).iter().map(|v| (v - row_max).exp()).sum::<f64>().ln() + row_max;
            for c in 0..m.cols() {
                out.set(r, c, m.get(r, c) - lse);
            }
        }
        self.push(Op::RowLogSoftmax(a), out)
    }

    /// Select rows by index; an index may appear more than once.
    pub fn gather_rows(&mut self, a: TapeId, indices: &[usize]) -> Result<TapeId> {
        let m = self.value(a);
        for &i in indices {
            if i >= m.rows() {
                return Err(Error::Contract(format!(
                    "gather_rows index {} out of range for {} rows",
                    i,
                    m.rows()
                )));
            }
        }
        let mut out = Matrix::zeros(indices.len(), m.cols());
        for (r, &i) in indices.iter().enumerate() {
            for c in 0..m.cols() {
                out.set(r, c, m.get(i, c));
            }
        }
        self.push(Op::GatherRows(a, indices.to_vec()), out)
    }

    pub fn transpose(&mut self, a: TapeId) -> Result<TapeId> {
        let value = self.value(a).transpose();
        self.push(Op::Transpose(a), value)
    }

    /// Reverse sweep from a scalar loss node. Each call starts from fresh
    /// accumulators, so repeated sweeps over the same tape are bitwise
    /// identical.
    pub fn backward(&self, loss: TapeId) -> Result<Gradients> {
        let loss_value = self.value(loss);
        if loss_value.shape() != (1, 1) {
            return Err(Error::Contract(format!(
                "backward seed must be scalar (1x1), found {}",
                loss_value.shape_string()
            )));
        }
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let g = match grads[idx].clone() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[idx];
            debug_assert_eq!(g.shape(), node.value.shape());
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let da = g.matmul(&self.value(*b).transpose())?;
                    let db = self.value(*a).transpose().matmul(&g)?;
                    accumulate(&mut grads, *a, da)?;
                    accumulate(&mut grads, *b, db)?;
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone())?;
                    accumulate(&mut grads, *b, g)?;
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, g.clone())?;
                    accumulate(&mut grads, *b, g.scale(-1.0))?;
                }
                Op::Mul(a, b) => {
                    let da = g.hadamard(self.value(*b))?;
                    let db = g.hadamard(self.value(*a))?;
                    accumulate(&mut grads, *a, da)?;
                    accumulate(&mut grads, *b, db)?;
                }
                Op::AddBias(a, bias) => {
                    let mut db = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for c in 0..g.cols() {
                            db.set(0, c, db.get(0, c) + g.get(r, c));
                        }
                    }
                    accumulate(&mut grads, *a, g)?;
                    accumulate(&mut grads, *bias, db)?;
                }
                Op::Scale(a, c) => accumulate(&mut grads, *a, g.scale(*c))?,
                Op::AddScalar(a) => accumulate(&mut grads, *a, g)?,
                Op::Log(a) => {
                    let da = g.zip_map("log-grad", self.value(*a), |gv, x| gv / x)?;
                    accumulate(&mut grads, *a, da)?;
                }
                Op::Exp(a) => {
                    let da = g.hadamard(&node.value)?;
                    accumulate(&mut grads, *a, da)?;
                }
                Op::Sqrt(a) => {
                    let da = g.zip_map("sqrt-grad", &node.value, |gv, y| gv * 0.5 / y)?;
                    accumulate(&mut grads, *a, da)?;
                }
                Op::Relu(a) => {
                    let da = g.zip_map("relu-grad", self.value(*a), |gv, x| if x > 0.0 { gv } else { 0.0 })?;
                    accumulate(&mut grads, *a, da)?;
                }
                Op::Sigmoid(a) => {
                    let da = g.zip_map("sigmoid-grad", &node.value, |gv, y| gv * y * (1.0 - y))?;
                    accumulate(&mut grads, *a, da)?;
                }
                Op::Clamp(a, lo, hi) => {
                    let da = g.zip_map("clamp-grad", self.value(*a), |gv, x| {
                        if x > *lo && x < *hi {
                            gv
                        } else {
                            0.0
                        }
                    })?;
                    accumulate(&mut grads, *a, da)?;
                }
                Op::Sum(a) => {
                    let src = self.value(*a);
                    let da = Matrix::filled(src.rows(), src.cols(), g.get(0, 0));
                    accumulate(&mut grads, *a, da)?;
                }
                Op::Mean(a) => {
                    let src = self.value(*a);
                    let da = Matrix::filled(src.rows(), src.cols(), g.get(0, 0) / src.len() as f64);
                    accumulate(&mut grads, *a, da)?;
                }
                Op::RowLogSoftmax(a) => {
                    // dX = G - softmax(x) * rowsum(G)
                    let y = &node.value;
                    let mut da = g.clone();
                    for r in 0..g.rows() {
                        let row_sum: f64 = g.row(r).iter().sum();
                        for c in 0..g.cols() {
                            let p = y.get(r, c).exp();
                            da.set(r, c, g.get(r, c) - p * row_sum);
                        }
                    }
                    accumulate(&mut grads, *a, da)?;
                }
                Op::GatherRows(a, indices) => {
                    let src = self.value(*a);
                    let mut da = Matrix::zeros(src.rows(), src.cols());
                    for (r, &i) in indices.iter().enumerate() {
                        for c in 0..g.cols() {
                            da.set(i, c, da.get(i, c) + g.get(r, c));
                        }
                    }
                    accumulate(&mut grads, *a, da)?;
                }
                Op::Transpose(a) => accumulate(&mut grads, *a, g.transpose())?,
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Matrix>], id: TapeId, delta: Matrix) -> Result<()> {
    match &mut grads[id.0] {
        Some(existing) => {
            *existing = existing.add(&delta)?;
        }
        slot @ None => *slot = Some(delta),
    }
    Ok(())
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::MatMul(..) => "matmul",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::AddBias(..) => "add_bias",
        Op::Scale(..) => "scale",
        Op::AddScalar(..) => "add_scalar",
        Op::Log(..) => "log",
        Op::Exp(..) => "exp",
        Op::Sqrt(..) => "sqrt",
        Op::Relu(..) => "relu",
        Op::Sigmoid(..) => "sigmoid",
        Op::Clamp(..) => "clamp",
        Op::Sum(..) => "sum",
        Op::Mean(..) => "mean",
        Op::RowLogSoftmax(..) => "row_log_softmax",
        Op::GatherRows(..) => "gather_rows",
        Op::Transpose(..) => "transpose",
    }
}
