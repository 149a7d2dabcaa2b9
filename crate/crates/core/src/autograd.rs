//! One-shot computation graphs with reverse-mode differentiation.
//!
//! A [`Graph`] is built fresh for every forward pass. Values are computed
//! eagerly as ops are recorded; [`Graph::backward`] consumes the graph and
//! returns the gradient of a scalar root with respect to every parameter
//! that was pulled into the graph.

use std::collections::HashMap;

use crate::error::{CssError, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{gemm, Tensor};

/// Floor applied to the argument of [`Graph::ln`].
pub const LN_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Param(ParamId),
    MatMul { a: Var, b: Var, trans_b: bool },
    BatchMatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Ln(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Sum(Var),
    Mean(Var),
    GroupWeightedSum { x: Var, group: usize, weights: Vec<f64> },
    RepeatRows { x: Var, times: usize },
    L2Normalize(Var),
    ConcatCols(Var, Var),
    GatherRows { table: Var, indices: Vec<usize> },
    Reshape(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::Param(_) => "param",
            Op::MatMul { .. } => "matmul",
            Op::BatchMatMul { .. } => "batch_matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::AddBias(..) => "add_bias",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Exp(_) => "exp",
            Op::Ln(_) => "ln",
            Op::Softmax(_) => "softmax",
            Op::LogSoftmax(_) => "log_softmax",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::GroupWeightedSum { .. } => "group_weighted_sum",
            Op::RepeatRows { .. } => "repeat_rows",
            Op::L2Normalize(_) => "l2_normalize",
            Op::ConcatCols(..) => "concat_cols",
            Op::GatherRows { .. } => "gather_rows",
            Op::Reshape(_) => "reshape",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients keyed by parameter, produced by [`Graph::backward`].
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    grads: HashMap<ParamId, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.grads.iter().map(|(k, v)| (*k, v))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

impl Graph {
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// Pulls a parameter into the graph; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Param(id), true);
        self.params.insert(id, v);
        v
    }

    /// `a @ b` (or `a @ b^T`) for 2-D operands.
    pub fn matmul_ext(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 {
            return Err(CssError::contract(format!("matmul needs 2-D operands, got {sa:?} and {sb:?}")));
        }
        let (m, k) = (sa[0], sa[1]);
        let (kb, n) = if trans_b { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != kb {
            return Err(CssError::contract(format!("matmul inner dims {sa:?} x {sb:?} (trans_b={trans_b})")));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), trans_b, 0.0, &mut out);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul { a, b, trans_b }, rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ext(a, b, false)
    }

    /// Per-group matrix product over 3-D operands `[g, m, k] @ [g, k, n]`.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(CssError::contract(format!("batch_matmul shapes {sa:?} x {sb:?}")));
        }
        let (g, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if k != kb {
            return Err(CssError::contract(format!("batch_matmul inner dims {sa:?} x {sb:?}")));
        }
        let mut out = vec![0.0; g * m * n];
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        for i in 0..g {
            gemm(
                m,
                k,
                n,
                &av[i * m * k..(i + 1) * m * k],
                false,
                &bv[i * k * n..(i + 1) * k * n],
                trans_b,
                0.0,
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![g, m, n], out)?, Op::BatchMatMul { a, b, trans_b }, rg))
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(CssError::contract(format!(
                "{op}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn zip_map(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(shape, data).expect("same shape"), op, rg)
    }

    fn map(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let data = self.value(x).data().iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push(Tensor::new(shape, data).expect("same shape"), op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        Ok(self.zip_map(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        Ok(self.zip_map(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        Ok(self.zip_map(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    /// Adds a `[n]` bias to every row of `x` (last axis `n`).
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let n = self.value(x).cols();
        if self.shape(bias) != [n] {
            return Err(CssError::contract(format!(
                "bias shape {:?} does not match last axis {n}",
                self.shape(bias)
            )));
        }
        let b = self.value(bias).data().to_vec();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(n) {
            row.iter_mut().zip(&b).for_each(|(v, bb)| *v += bb);
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(Tensor::new(shape, data)?, Op::AddBias(x, bias), rg))
    }

    /// `x @ w + b`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.map(x, Op::Scale(x, c), |v| v * c)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, Op::Relu(x), |v| if v > 0.0 { v } else { 0.0 })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, Op::Sigmoid(x), |v| {
            if v >= 0.0 {
                1.0 / (1.0 + (-v).exp())
            } else {
                let e = v.exp();
                e / (1.0 + e)
            }
        })
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.map(x, Op::Exp(x), f64::exp)
    }

    /// Natural log with the input clamped below at [`LN_FLOOR`].
    pub fn ln(&mut self, x: Var) -> Var {
        self.map(x, Op::Ln(x), |v| v.max(LN_FLOOR).ln())
    }

    fn last_axis_map(&mut self, x: Var, op: Op, log: bool) -> Var {
        let t = self.value(x);
        let n = t.cols();
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(n) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v -= max;
                sum += v.exp();
            }
            if log {
                let lse = sum.ln();
                row.iter_mut().for_each(|v| *v -= lse);
            } else {
                row.iter_mut().for_each(|v| *v = v.exp() / sum);
            }
        }
        let shape = t.shape().to_vec();
        let rg = self.rg(x);
        self.push(Tensor::new(shape, data).expect("same shape"), op, rg)
    }

    /// Softmax along the last axis (max-subtracted).
    pub fn softmax(&mut self, x: Var) -> Var {
        self.last_axis_map(x, Op::Softmax(x), false)
    }

    /// Log-softmax along the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Var {
        self.last_axis_map(x, Op::LogSoftmax(x), true)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s: f64 = t.data().iter().sum::<f64>() / t.numel() as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Rows of `x` are taken in consecutive groups of `group`; each output row
    /// is the weighted sum of its group with per-row `weights`.
    pub fn group_weighted_sum(&mut self, x: Var, group: usize, weights: Vec<f64>) -> Result<Var> {
        let t = self.value(x);
        let (rows, d) = (t.rows(), t.cols());
        if group == 0 || rows % group != 0 || weights.len() != rows {
            return Err(CssError::contract(format!(
                "group_weighted_sum: {rows} rows, group {group}, {} weights",
                weights.len()
            )));
        }
        let g = rows / group;
        let mut out = vec![0.0; g * d];
        for r in 0..rows {
            let w = weights[r];
            if w == 0.0 {
                continue;
            }
            let o = &mut out[(r / group) * d..(r / group + 1) * d];
            o.iter_mut().zip(t.row(r)).for_each(|(a, b)| *a += w * b);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![g, d], out)?, Op::GroupWeightedSum { x, group, weights }, rg))
    }

    /// Mean over consecutive groups of `group` rows.
    pub fn group_mean(&mut self, x: Var, group: usize) -> Result<Var> {
        let rows = self.value(x).rows();
        self.group_weighted_sum(x, group, vec![1.0 / group as f64; rows])
    }

    /// Repeats every row of a 2-D `x` `times` times consecutively.
    pub fn repeat_rows(&mut self, x: Var, times: usize) -> Result<Var> {
        let t = self.value(x);
        if t.shape().len() != 2 || times == 0 {
            return Err(CssError::contract("repeat_rows needs a 2-D input and times > 0"));
        }
        let (r, d) = (t.rows(), t.cols());
        let mut out = Vec::with_capacity(r * times * d);
        for i in 0..r {
            for _ in 0..times {
                out.extend_from_slice(t.row(i));
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![r * times, d], out)?, Op::RepeatRows { x, times }, rg))
    }

    /// Scales each row (last axis) to unit L2 norm.
    pub fn l2_normalize(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let n = t.cols();
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(n) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(LN_FLOOR);
            row.iter_mut().for_each(|v| *v /= norm);
        }
        let shape = t.shape().to_vec();
        let rg = self.rg(x);
        self.push(Tensor::new(shape, data).expect("same shape"), Op::L2Normalize(x), rg)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.rows() != tb.rows() {
            return Err(CssError::contract(format!(
                "concat_cols shapes {:?} and {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let (r, p, q) = (ta.rows(), ta.cols(), tb.cols());
        let mut out = Vec::with_capacity(r * (p + q));
        for i in 0..r {
            out.extend_from_slice(ta.row(i));
            out.extend_from_slice(tb.row(i));
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![r, p + q], out)?, Op::ConcatCols(a, b), rg))
    }

    /// Selects rows of a 2-D table.
    pub fn gather_rows(&mut self, table: Var, indices: Vec<usize>) -> Result<Var> {
        let t = self.value(table);
        if t.shape().len() != 2 {
            return Err(CssError::contract("gather_rows needs a 2-D table"));
        }
        let (v, d) = (t.rows(), t.cols());
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in &indices {
            if i >= v {
                return Err(CssError::contract(format!("gather index {i} out of {v} rows")));
            }
            out.extend_from_slice(t.row(i));
        }
        let rg = self.rg(table);
        Ok(self.push(Tensor::new(vec![indices.len(), d], out)?, Op::GatherRows { table, indices }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// Reverse pass from a scalar root. Consumes the graph.
    pub fn backward(self, root: Var) -> Result<Gradients> {
        if self.value(root).numel() != 1 {
            return Err(CssError::contract(format!(
                "backward root must be a scalar, got shape {:?}",
                self.shape(root)
            )));
        }
        for node in &self.nodes[..=root.0] {
            if !node.value.is_finite() {
                return Err(CssError::NumericFault {
                    op: node.op.name().to_string(),
                });
            }
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);
        let mut out = Gradients::default();

        for i in (0..=root.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if dy.iter().any(|v| !v.is_finite()) {
                return Err(CssError::NumericFault {
                    op: format!("{} (backward)", node.op.name()),
                });
            }
            let y = &node.value;
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => {
                    out.grads.insert(*id, Tensor::new(y.shape().to_vec(), dy)?);
                }
                Op::MatMul { a, b, trans_b } => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (m, k) = (ta.shape()[0], ta.shape()[1]);
                    let n = y.shape()[1];
                    if self.rg(*a) {
                        // dA = dY @ op(B)^T
                        let mut da = vec![0.0; m * k];
                        gemm(m, n, k, &dy, false, tb.data(), !trans_b, 0.0, &mut da);
                        accumulate(&mut grads, *a, da);
                    }
                    if self.rg(*b) {
                        let mut db = vec![0.0; k * n];
                        if *trans_b {
                            // B is [n, k]: dB = dY^T @ A
                            gemm(n, m, k, &dy, true, ta.data(), false, 0.0, &mut db);
                        } else {
                            gemm(k, m, n, ta.data(), true, &dy, false, 0.0, &mut db);
                        }
                        accumulate(&mut grads, *b, db);
                    }
                }
                Op::BatchMatMul { a, b, trans_b } => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (g, m, k) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
                    let n = y.shape()[2];
                    if self.rg(*a) {
                        let mut da = vec![0.0; g * m * k];
                        for s in 0..g {
                            gemm(
                                m,
                                n,
                                k,
                                &dy[s * m * n..(s + 1) * m * n],
                                false,
                                &tb.data()[s * k * n..(s + 1) * k * n],
                                !trans_b,
                                0.0,
                                &mut da[s * m * k..(s + 1) * m * k],
                            );
                        }
                        accumulate(&mut grads, *a, da);
                    }
                    if self.rg(*b) {
                        let mut db = vec![0.0; g * k * n];
                        for s in 0..g {
                            let dys = &dy[s * m * n..(s + 1) * m * n];
                            let as_ = &ta.data()[s * m * k..(s + 1) * m * k];
                            let dbs = &mut db[s * k * n..(s + 1) * k * n];
                            if *trans_b {
                                gemm(n, m, k, dys, true, as_, false, 0.0, dbs);
                            } else {
                                gemm(k, m, n, as_, true, dys, false, 0.0, dbs);
                            }
                        }
                        accumulate(&mut grads, *b, db);
                    }
                }
                Op::Add(a, b) => {
                    if self.rg(*a) {
                        accumulate(&mut grads, *a, dy.clone());
                    }
                    if self.rg(*b) {
                        accumulate(&mut grads, *b, dy);
                    }
                }
                Op::Sub(a, b) => {
                    if self.rg(*a) {
                        accumulate(&mut grads, *a, dy.clone());
                    }
                    if self.rg(*b) {
                        accumulate(&mut grads, *b, dy.iter().map(|v| -v).collect());
                    }
                }
                Op::AddBias(x, bias) => {
                    if self.rg(*bias) {
                        let n = y.cols();
                        let mut db = vec![0.0; n];
                        for row in dy.chunks(n) {
                            db.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                        }
                        accumulate(&mut grads, *bias, db);
                    }
                    if self.rg(*x) {
                        accumulate(&mut grads, *x, dy);
                    }
                }
                Op::Mul(a, b) => {
                    if self.rg(*a) {
                        let d = dy.iter().zip(self.value(*b).data()).map(|(g, v)| g * v).collect();
                        accumulate(&mut grads, *a, d);
                    }
                    if self.rg(*b) {
                        let d = dy.iter().zip(self.value(*a).data()).map(|(g, v)| g * v).collect();
                        accumulate(&mut grads, *b, d);
                    }
                }
                Op::Scale(x, c) => {
                    accumulate(&mut grads, *x, dy.iter().map(|g| g * c).collect());
                }
                Op::Relu(x) => {
                    let d = dy
                        .iter()
                        .zip(self.value(*x).data())
                        .map(|(g, v)| if *v > 0.0 { *g } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, *x, d);
                }
                Op::Sigmoid(x) => {
                    let d = dy.iter().zip(y.data()).map(|(g, s)| g * s * (1.0 - s)).collect();
                    accumulate(&mut grads, *x, d);
                }
                Op::Exp(x) => {
                    let d = dy.iter().zip(y.data()).map(|(g, e)| g * e).collect();
                    accumulate(&mut grads, *x, d);
                }
                Op::Ln(x) => {
                    let d = dy
                        .iter()
                        .zip(self.value(*x).data())
                        .map(|(g, v)| if *v > LN_FLOOR { g / v } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, *x, d);
                }
                Op::Softmax(x) => {
                    let n = y.cols();
                    let mut d = vec![0.0; dy.len()];
                    for ((dr, gr), yr) in d.chunks_mut(n).zip(dy.chunks(n)).zip(y.data().chunks(n)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(g, p)| g * p).sum();
                        for j in 0..n {
                            dr[j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    accumulate(&mut grads, *x, d);
                }
                Op::LogSoftmax(x) => {
                    let n = y.cols();
                    let mut d = vec![0.0; dy.len()];
                    for ((dr, gr), yr) in d.chunks_mut(n).zip(dy.chunks(n)).zip(y.data().chunks(n)) {
                        let total: f64 = gr.iter().sum();
                        for j in 0..n {
                            dr[j] = gr[j] - yr[j].exp() * total;
                        }
                    }
                    accumulate(&mut grads, *x, d);
                }
                Op::Sum(x) => {
                    let n = self.value(*x).numel();
                    accumulate(&mut grads, *x, vec![dy[0]; n]);
                }
                Op::Mean(x) => {
                    let n = self.value(*x).numel();
                    accumulate(&mut grads, *x, vec![dy[0] / n as f64; n]);
                }
                Op::GroupWeightedSum { x, group, weights } => {
                    let d = self.value(*x).cols();
                    let mut dx = vec![0.0; weights.len() * d];
                    for (r, w) in weights.iter().enumerate() {
                        let src = &dy[(r / group) * d..(r / group + 1) * d];
                        dx[r * d..(r + 1) * d].iter_mut().zip(src).for_each(|(a, b)| *a = w * b);
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::RepeatRows { x, times } => {
                    let d = y.cols();
                    let r = self.value(*x).rows();
                    let mut dx = vec![0.0; r * d];
                    for (row, src) in dy.chunks(d).enumerate() {
                        let i = row / times;
                        dx[i * d..(i + 1) * d].iter_mut().zip(src).for_each(|(a, b)| *a += b);
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::L2Normalize(x) => {
                    let n = y.cols();
                    let xv = self.value(*x).data();
                    let mut d = vec![0.0; dy.len()];
                    for (((dr, gr), yr), xr) in d
                        .chunks_mut(n)
                        .zip(dy.chunks(n))
                        .zip(y.data().chunks(n))
                        .zip(xv.chunks(n))
                    {
                        let norm = xr.iter().map(|v| v * v).sum::<f64>().sqrt().max(LN_FLOOR);
                        let dot: f64 = gr.iter().zip(yr).map(|(g, u)| g * u).sum();
                        for j in 0..n {
                            dr[j] = (gr[j] - yr[j] * dot) / norm;
                        }
                    }
                    accumulate(&mut grads, *x, d);
                }
                Op::ConcatCols(a, b) => {
                    let (p, q) = (self.value(*a).cols(), self.value(*b).cols());
                    let mut da = Vec::with_capacity(dy.len() / (p + q) * p);
                    let mut db = Vec::with_capacity(dy.len() / (p + q) * q);
                    for row in dy.chunks(p + q) {
                        da.extend_from_slice(&row[..p]);
                        db.extend_from_slice(&row[p..]);
                    }
                    if self.rg(*a) {
                        accumulate(&mut grads, *a, da);
                    }
                    if self.rg(*b) {
                        accumulate(&mut grads, *b, db);
                    }
                }
                Op::GatherRows { table, indices } => {
                    let t = self.value(*table);
                    let d = t.cols();
                    let mut dt = vec![0.0; t.numel()];
                    for (row, &i) in indices.iter().enumerate() {
                        dt[i * d..(i + 1) * d]
                            .iter_mut()
                            .zip(&dy[row * d..(row + 1) * d])
                            .for_each(|(a, b)| *a += b);
                    }
                    accumulate(&mut grads, *table, dt);
                }
                Op::Reshape(x) => {
                    accumulate(&mut grads, *x, dy);
                }
            }
        }
        Ok(out)
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, d: Vec<f64>) {
    match &mut grads[v.0] {
        Some(g) => g.iter_mut().zip(d).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(d),
    }
}
