//! Tape-based reverse-mode differentiation over a fixed kernel set.
//!
//! A [`Graph`] records every kernel application together with its output
//! value. [`Graph::backward`] walks the tape in reverse and accumulates
//! exact gradients into every node that depends on a trainable leaf.
//!
//! All kernels treat their operands as matrices whose column count is the
//! extent of the last axis (see [`Tensor::rows`] / [`Tensor::cols`]).

use super::params::{Gradients, ParamId, ParamStore};
use super::tensor::{gemm, transpose, Tensor};
use crate::error::{Error, Result};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    Same,
    Row,
    Col,
    Scalar,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul {
        a: Var,
        b: Var,
    },
    BatchMatMul {
        a: Var,
        b: Var,
        transpose_b: bool,
    },
    Add {
        a: Var,
        b: Var,
        bcast: Broadcast,
    },
    Sub {
        a: Var,
        b: Var,
        bcast: Broadcast,
    },
    Mul {
        a: Var,
        b: Var,
        bcast: Broadcast,
    },
    Scale {
        a: Var,
        factor: f64,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        mean: Vec<f64>,
        rstd: Vec<f64>,
    },
    Softmax {
        a: Var,
    },
    Gelu {
        a: Var,
    },
    GatherRows {
        table: Var,
        idx: Vec<usize>,
    },
    ScatterAddRows {
        src: Var,
        idx: Vec<usize>,
    },
    TopKRenorm {
        probs: Var,
        selected: Vec<Vec<usize>>,
    },
    Mse {
        pred: Var,
        target: Var,
    },
    Log {
        a: Var,
    },
    Exp {
        a: Var,
    },
    ConcatCols {
        parts: Vec<Var>,
    },
    SliceCols {
        a: Var,
        start: usize,
    },
    SumLast {
        a: Var,
    },
    SumRows {
        a: Var,
    },
    SumAll {
        a: Var,
    },
    L2Normalize {
        a: Var,
        eps: f64,
    },
    BalancePenalty {
        importance: Var,
        eps: f64,
    },
    Reshape {
        a: Var,
    },
}

impl Op {
    fn parents(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf | Param => vec![],
            MatMul { a, b } | BatchMatMul { a, b, .. } => vec![*a, *b],
            Add { a, b, .. } | Sub { a, b, .. } | Mul { a, b, .. } => vec![*a, *b],
            LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Mse { pred, target } => vec![*pred, *target],
            ConcatCols { parts } => parts.clone(),
            Scale { a, .. }
            | Softmax { a }
            | Gelu { a }
            | Log { a }
            | Exp { a }
            | SliceCols { a, .. }
            | SumLast { a }
            | SumRows { a }
            | SumAll { a }
            | L2Normalize { a, .. }
            | Reshape { a } => vec![*a],
            GatherRows { table, .. } => vec![*table],
            ScatterAddRows { src, .. } => vec![*src],
            TopKRenorm { probs, .. } => vec![*probs],
            BalancePenalty { importance, .. } => vec![*importance],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    /// Query length for a causally masked softmax.
    causal: Option<usize>,
}

/// Recording tape of kernel applications.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Graph leaves bound to every group of a [`ParamStore`], indexed by id.
pub struct Bindings {
    vars: Vec<Var>,
}

impl Bindings {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.index()]
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, kernel: &'static str, value: Tensor, op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::Numeric {
                kernel,
                context: String::new(),
            });
        }
        let needs_grad = op.parents().iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            causal: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A constant input; never receives a gradient.
    pub fn input(&mut self, value: Tensor) -> Result<Var> {
        self.push("input", value, Op::Leaf)
    }

    /// A leaf that receives a gradient when `trainable`.
    pub fn param(&mut self, value: Tensor, trainable: bool) -> Result<Var> {
        let v = self.push("param", value, Op::Param)?;
        self.nodes[v.0].needs_grad = trainable;
        Ok(v)
    }

    /// Binds every group of `store` as a leaf; frozen groups are constants.
    pub fn bind(&mut self, store: &ParamStore) -> Result<Bindings> {
        let mut vars = Vec::with_capacity(store.len());
        for (_, group) in store.iter() {
            vars.push(self.param(group.tensor.clone(), group.trainable)?);
        }
        Ok(Bindings { vars })
    }

    fn broadcast(&self, a: Var, b: Var) -> Result<Broadcast> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() {
            Ok(Broadcast::Same)
        } else if tb.len() == 1 {
            Ok(Broadcast::Scalar)
        } else if tb.cols() == ta.cols() && tb.len() == ta.cols() {
            Ok(Broadcast::Row)
        } else if tb.cols() == 1 && tb.len() == ta.rows() {
            Ok(Broadcast::Col)
        } else {
            Err(Error::Dimension(format!(
                "cannot broadcast {:?} against {:?}",
                tb.shape(),
                ta.shape()
            )))
        }
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<(Tensor, Broadcast)> {
        let bcast = self.broadcast(a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let cols = ta.cols();
        let bd = tb.data();
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bd[bcast_index(bcast, i, cols)]))
            .collect();
        Ok((Tensor::new(ta.shape().to_vec(), data)?, bcast))
    }

    /// Matrix product of `a` (flattened to `rows x k`) with a `k x n` matrix.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if tb.shape().len() != 2 || ta.cols() != tb.shape()[0] {
            return Err(Error::Dimension(format!("matmul {:?} x {:?}", ta.shape(), tb.shape())));
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), tb.data(), &mut out);
        let mut shape = ta.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        self.push("matmul", Tensor::new(shape, out)?, Op::MatMul { a, b })
    }

    /// Batched product of `[g, m, k]` with `[g, k, n]` (or `[g, n, k]` when
    /// `transpose_b`).
    pub fn batch_matmul(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(Error::Dimension(format!("batch_matmul {sa:?} x {sb:?}")));
        }
        let (g, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if transpose_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return Err(Error::Dimension(format!("batch_matmul {sa:?} x {sb:?}")));
        }
        let mut out = vec![0.0; g * m * n];
        for gi in 0..g {
            let a_g = &ta.data()[gi * m * k..(gi + 1) * m * k];
            let b_g = &tb.data()[gi * k * n..(gi + 1) * k * n];
            let o_g = &mut out[gi * m * n..(gi + 1) * m * n];
            if transpose_b {
                gemm(m, k, n, a_g, &transpose(n, k, b_g), o_g);
            } else {
                gemm(m, k, n, a_g, b_g, o_g);
            }
        }
        self.push(
            "batch_matmul",
            Tensor::new(vec![g, m, n], out)?,
            Op::BatchMatMul { a, b, transpose_b },
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (value, bcast) = self.binary(a, b, |x, y| x + y)?;
        self.push("add", value, Op::Add { a, b, bcast })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (value, bcast) = self.binary(a, b, |x, y| x - y)?;
        self.push("sub", value, Op::Sub { a, b, bcast })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (value, bcast) = self.binary(a, b, |x, y| x * y)?;
        self.push("mul", value, Op::Mul { a, b, bcast })
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let ta = self.value(a);
        let data = ta.data().iter().map(|x| x * factor).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        self.push("scale", value, Op::Scale { a, factor })
    }

    /// Layer normalization over the last axis.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let c = tx.cols();
        if tg.len() != c || tb.len() != c {
            return Err(Error::Dimension(format!(
                "layer_norm gain/bias {:?}/{:?} against {:?}",
                tg.shape(),
                tb.shape(),
                tx.shape()
            )));
        }
        let rows = tx.rows();
        let mut out = vec![0.0; tx.len()];
        let mut means = Vec::with_capacity(rows);
        let mut rstds = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = tx.row(r);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
            let rstd = 1.0 / (var + eps).sqrt();
            for j in 0..c {
                out[r * c + j] = tg.data()[j] * (row[j] - mean) * rstd + tb.data()[j];
            }
            means.push(mean);
            rstds.push(rstd);
        }
        let value = Tensor::new(tx.shape().to_vec(), out)?;
        self.push(
            "layer_norm",
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean: means,
                rstd: rstds,
            },
        )
    }

    /// Row-wise softmax over the last axis, stabilized by the row maximum.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.softmax_impl(a, None)
    }

    /// Softmax over attention scores `[.., t, t]` where row `r` (query
    /// position `r % t`) may only see columns `0..=r % t`.
    pub fn causal_softmax(&mut self, a: Var, t: usize) -> Result<Var> {
        if self.value(a).cols() != t {
            return Err(Error::Dimension(format!(
                "causal softmax over {:?} with length {t}",
                self.value(a).shape()
            )));
        }
        self.softmax_impl(a, Some(t))
    }

    fn softmax_impl(&mut self, a: Var, causal: Option<usize>) -> Result<Var> {
        let ta = self.value(a);
        let c = ta.cols();
        let mut out = vec![0.0; ta.len()];
        for r in 0..ta.rows() {
            let visible = causal.map_or(c, |t| r % t + 1);
            let row = &ta.row(r)[..visible];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let o = &mut out[r * c..r * c + visible];
            let mut sum = 0.0;
            for (o, &x) in o.iter_mut().zip(row) {
                *o = (x - max).exp();
                sum += *o;
            }
            for o in o.iter_mut() {
                *o /= sum;
            }
        }
        let value = Tensor::new(ta.shape().to_vec(), out)?;
        let v = self.push("softmax", value, Op::Softmax { a })?;
        self.nodes[v.0].causal = causal;
        Ok(v)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let data = ta
            .data()
            .iter()
            .map(|&x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()))
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        self.push("gelu", value, Op::Gelu { a })
    }

    /// Embedding lookup: rows of `table` selected by `idx`.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        let (rows, c) = (tt.rows(), tt.cols());
        if idx.is_empty() || idx.iter().any(|&i| i >= rows) {
            return Err(Error::Dimension(format!(
                "gather of {} rows from a table of {rows}",
                idx.len()
            )));
        }
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(tt.row(i));
        }
        let value = Tensor::new(vec![idx.len(), c], out)?;
        self.push(
            "gather_rows",
            value,
            Op::GatherRows {
                table,
                idx: idx.to_vec(),
            },
        )
    }

    /// Adjoint of [`Graph::gather_rows`]: `out[idx[r]] += src[r]`.
    pub fn scatter_add_rows(&mut self, src: Var, idx: &[usize], n_rows: usize) -> Result<Var> {
        let ts = self.value(src);
        let c = ts.cols();
        if idx.len() != ts.rows() || idx.iter().any(|&i| i >= n_rows) {
            return Err(Error::Dimension(format!(
                "scatter of {} rows into {n_rows} with {} indices",
                ts.rows(),
                idx.len()
            )));
        }
        let mut out = vec![0.0; n_rows * c];
        for (r, &i) in idx.iter().enumerate() {
            for (o, &s) in out[i * c..(i + 1) * c].iter_mut().zip(ts.row(r)) {
                *o += s;
            }
        }
        let value = Tensor::new(vec![n_rows, c], out)?;
        self.push("scatter_add_rows", value, Op::ScatterAddRows { src, idx: idx.to_vec() })
    }

    /// Keeps the probabilities of the `selected` columns of each row and
    /// renormalizes them to sum to one; every other entry becomes zero.
    pub fn topk_renorm(&mut self, probs: Var, selected: Vec<Vec<usize>>) -> Result<Var> {
        let tp = self.value(probs);
        let c = tp.cols();
        if selected.len() != tp.rows() || selected.iter().any(|s| s.is_empty()) {
            return Err(Error::Dimension("top-k selection does not cover every row".into()));
        }
        let mut out = vec![0.0; tp.len()];
        for (r, sel) in selected.iter().enumerate() {
            if sel.iter().any(|&j| j >= c) {
                return Err(Error::Dimension(format!("top-k index out of {c} columns")));
            }
            let row = tp.row(r);
            let s: f64 = sel.iter().map(|&j| row[j]).sum();
            for &j in sel {
                out[r * c + j] = row[j] / s;
            }
        }
        let value = Tensor::new(tp.shape().to_vec(), out)?;
        self.push("topk_renorm", value, Op::TopKRenorm { probs, selected })
    }

    /// Sum of squared errors over the last axis, averaged over rows.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (tp, tt) = (self.value(pred), self.value(target));
        if tp.shape() != tt.shape() {
            return Err(Error::Dimension(format!("mse {:?} vs {:?}", tp.shape(), tt.shape())));
        }
        let sq: f64 = tp.data().iter().zip(tt.data()).map(|(p, t)| (p - t) * (p - t)).sum();
        let value = Tensor::scalar(sq / tp.rows() as f64);
        self.push("mse", value, Op::Mse { pred, target })
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let data = ta.data().iter().map(|x| x.ln()).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        self.push("log", value, Op::Log { a })
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let data = ta.data().iter().map(|x| x.exp()).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        self.push("exp", value, Op::Exp { a })
    }

    /// Concatenates along the last axis; every part must have the same row count.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Dimension("concat of zero parts".into()))?;
        let rows = self.value(*first).rows();
        if parts.iter().any(|p| self.value(*p).rows() != rows) {
            return Err(Error::Dimension("concat parts differ in row count".into()));
        }
        let total: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                out.extend_from_slice(self.value(*p).row(r));
            }
        }
        let value = Tensor::new(vec![rows, total], out)?;
        self.push("concat_cols", value, Op::ConcatCols { parts: parts.to_vec() })
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ta = self.value(a);
        if len == 0 || start + len > ta.cols() {
            return Err(Error::Dimension(format!(
                "slice {start}..{} of {} columns",
                start + len,
                ta.cols()
            )));
        }
        let mut out = Vec::with_capacity(ta.rows() * len);
        for r in 0..ta.rows() {
            out.extend_from_slice(&ta.row(r)[start..start + len]);
        }
        let value = Tensor::new(vec![ta.rows(), len], out)?;
        self.push("slice_cols", value, Op::SliceCols { a, start })
    }

    /// Sum over the last axis: `[rows, 1]`.
    pub fn sum_last(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let out = (0..ta.rows()).map(|r| ta.row(r).iter().sum()).collect();
        let value = Tensor::new(vec![ta.rows(), 1], out)?;
        self.push("sum_last", value, Op::SumLast { a })
    }

    /// Sum over rows: `[1, cols]`.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let c = ta.cols();
        let mut out = vec![0.0; c];
        for r in 0..ta.rows() {
            for (o, v) in out.iter_mut().zip(ta.row(r)) {
                *o += v;
            }
        }
        let value = Tensor::new(vec![1, c], out)?;
        self.push("sum_rows", value, Op::SumRows { a })
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(a).data().iter().sum());
        self.push("sum_all", value, Op::SumAll { a })
    }

    /// Scales each row to unit Euclidean norm, `x / sqrt(|x|^2 + eps)`.
    pub fn l2_normalize(&mut self, a: Var, eps: f64) -> Result<Var> {
        let ta = self.value(a);
        let c = ta.cols();
        let mut out = vec![0.0; ta.len()];
        for r in 0..ta.rows() {
            let row = ta.row(r);
            let n = (row.iter().map(|x| x * x).sum::<f64>() + eps).sqrt();
            for j in 0..c {
                out[r * c + j] = row[j] / n;
            }
        }
        let value = Tensor::new(ta.shape().to_vec(), out)?;
        self.push("l2_normalize", value, Op::L2Normalize { a, eps })
    }

    /// Load-balancing penalty
    /// `0.5 * [ sum (c_i - c_mean)^2 / (c_mean^2 + eps) + sum (P_i - P_mean)^2 / (P_mean^2 + eps) ]`
    /// with constant loads `c` and differentiable importances `P`.
    pub fn balance_penalty(&mut self, importance: Var, loads: &[f64], eps: f64) -> Result<Var> {
        let tp = self.value(importance);
        if tp.len() != loads.len() {
            return Err(Error::Dimension(format!(
                "{} importances vs {} loads",
                tp.len(),
                loads.len()
            )));
        }
        let value = Tensor::scalar(0.5 * (cv_term(loads, eps) + cv_term(tp.data(), eps)));
        self.push("balance_penalty", value, Op::BalancePenalty { importance, eps })
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        self.push("reshape", value, Op::Reshape { a })
    }

    /// Reverse pass from the scalar `loss`. Returns the gradient of every node
    /// that requires one.
    pub fn backward(&self, loss: Var) -> Result<Vec<Option<Vec<f64>>>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Dimension(format!(
                "backward needs a scalar, got {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(grads)
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let val = |v: Var| self.value(v);
        let mut acc = |v: Var, contrib: Vec<f64>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => {
                    for (e, c) in existing.iter_mut().zip(contrib) {
                        *e += c;
                    }
                }
                slot @ None => *slot = Some(contrib),
            }
        };
        let y = &node.value;
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul { a, b } => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if self.nodes[a.0].needs_grad {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g, &transpose(k, n, tb.data()), &mut da);
                    acc(*a, da);
                }
                if self.nodes[b.0].needs_grad {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, &transpose(m, k, ta.data()), g, &mut db);
                    acc(*b, db);
                }
            }
            Op::BatchMatMul { a, b, transpose_b } => {
                let (ta, tb) = (val(*a), val(*b));
                let (gs, m, k) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
                let n = y.shape()[2];
                let mut da = vec![0.0; ta.len()];
                let mut db = vec![0.0; tb.len()];
                for gi in 0..gs {
                    let a_g = &ta.data()[gi * m * k..(gi + 1) * m * k];
                    let b_g = &tb.data()[gi * k * n..(gi + 1) * k * n];
                    let g_g = &g[gi * m * n..(gi + 1) * m * n];
                    let da_g = &mut da[gi * m * k..(gi + 1) * m * k];
                    let db_g = &mut db[gi * k * n..(gi + 1) * k * n];
                    if *transpose_b {
                        // b_g is [n, k]
                        gemm(m, n, k, g_g, b_g, da_g);
                        gemm(n, m, k, &transpose(m, n, g_g), a_g, db_g);
                    } else {
                        gemm(m, n, k, g_g, &transpose(k, n, b_g), da_g);
                        gemm(k, m, n, &transpose(m, k, a_g), g_g, db_g);
                    }
                }
                acc(*a, da);
                acc(*b, db);
            }
            Op::Add { a, b, bcast } => {
                acc(*a, g.to_vec());
                acc(*b, reduce_broadcast(*bcast, g, val(*b).len(), y.cols()));
            }
            Op::Sub { a, b, bcast } => {
                acc(*a, g.to_vec());
                let mut db = reduce_broadcast(*bcast, g, val(*b).len(), y.cols());
                db.iter_mut().for_each(|v| *v = -*v);
                acc(*b, db);
            }
            Op::Mul { a, b, bcast } => {
                let (ta, tb) = (val(*a), val(*b));
                let cols = y.cols();
                let da = g
                    .iter()
                    .enumerate()
                    .map(|(i, gi)| gi * tb.data()[bcast_index(*bcast, i, cols)])
                    .collect();
                acc(*a, da);
                let gb: Vec<f64> = g.iter().zip(ta.data()).map(|(gi, x)| gi * x).collect();
                acc(*b, reduce_broadcast(*bcast, &gb, tb.len(), cols));
            }
            Op::Scale { a, factor } => acc(*a, g.iter().map(|v| v * factor).collect()),
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean,
                rstd,
            } => {
                let (tx, tg) = (val(*x), val(*gain));
                let c = tx.cols();
                let mut dx = vec![0.0; tx.len()];
                let mut dg = vec![0.0; c];
                let mut dbias = vec![0.0; c];
                let mut xhat = vec![0.0; c];
                let mut dxhat = vec![0.0; c];
                for r in 0..tx.rows() {
                    let row = tx.row(r);
                    let gr = &g[r * c..(r + 1) * c];
                    for j in 0..c {
                        xhat[j] = (row[j] - mean[r]) * rstd[r];
                        dxhat[j] = gr[j] * tg.data()[j];
                        dg[j] += gr[j] * xhat[j];
                        dbias[j] += gr[j];
                    }
                    let m1 = dxhat.iter().sum::<f64>() / c as f64;
                    let m2 = dxhat.iter().zip(&xhat).map(|(d, h)| d * h).sum::<f64>() / c as f64;
                    for j in 0..c {
                        dx[r * c + j] = rstd[r] * (dxhat[j] - m1 - xhat[j] * m2);
                    }
                }
                acc(*x, dx);
                acc(*gain, dg);
                acc(*bias, dbias);
            }
            Op::Softmax { a } => {
                let c = y.cols();
                let mut da = vec![0.0; y.len()];
                for r in 0..y.rows() {
                    let visible = node.causal.map_or(c, |t| r % t + 1);
                    let yr = &y.row(r)[..visible];
                    let gr = &g[r * c..r * c + visible];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..visible {
                        da[r * c + j] = yr[j] * (gr[j] - dot);
                    }
                }
                acc(*a, da);
            }
            Op::Gelu { a } => {
                let da = val(*a)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&x, gi)| {
                        let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
                        let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                        gi * (0.5 * (1.0 + t) + 0.5 * x * dt)
                    })
                    .collect();
                acc(*a, da);
            }
            Op::GatherRows { table, idx } => {
                let tt = val(*table);
                let c = tt.cols();
                let mut dt = vec![0.0; tt.len()];
                for (r, &i) in idx.iter().enumerate() {
                    for (d, gi) in dt[i * c..(i + 1) * c].iter_mut().zip(&g[r * c..(r + 1) * c]) {
                        *d += gi;
                    }
                }
                acc(*table, dt);
            }
            Op::ScatterAddRows { src, idx } => {
                let c = y.cols();
                let mut ds = Vec::with_capacity(idx.len() * c);
                for &i in idx {
                    ds.extend_from_slice(&g[i * c..(i + 1) * c]);
                }
                acc(*src, ds);
            }
            Op::TopKRenorm { probs, selected } => {
                let tp = val(*probs);
                let c = tp.cols();
                let mut dp = vec![0.0; tp.len()];
                for (r, sel) in selected.iter().enumerate() {
                    let row = tp.row(r);
                    let s: f64 = sel.iter().map(|&j| row[j]).sum();
                    let gp: f64 = sel.iter().map(|&j| g[r * c + j] * row[j]).sum();
                    for &j in sel {
                        dp[r * c + j] = g[r * c + j] / s - gp / (s * s);
                    }
                }
                acc(*probs, dp);
            }
            Op::Mse { pred, target } => {
                let (tp, tt) = (val(*pred), val(*target));
                let scale = 2.0 * g[0] / tp.rows() as f64;
                let dp: Vec<f64> = tp.data().iter().zip(tt.data()).map(|(p, t)| scale * (p - t)).collect();
                acc(*target, dp.iter().map(|v| -v).collect());
                acc(*pred, dp);
            }
            Op::Log { a } => acc(*a, g.iter().zip(val(*a).data()).map(|(gi, x)| gi / x).collect()),
            Op::Exp { a } => acc(*a, g.iter().zip(y.data()).map(|(gi, e)| gi * e).collect()),
            Op::ConcatCols { parts } => {
                let total = y.cols();
                let mut offset = 0;
                for p in parts {
                    let pc = val(*p).cols();
                    let mut dp = Vec::with_capacity(y.rows() * pc);
                    for r in 0..y.rows() {
                        dp.extend_from_slice(&g[r * total + offset..r * total + offset + pc]);
                    }
                    acc(*p, dp);
                    offset += pc;
                }
            }
            Op::SliceCols { a, start } => {
                let ta = val(*a);
                let (c, len) = (ta.cols(), y.cols());
                let mut da = vec![0.0; ta.len()];
                for r in 0..ta.rows() {
                    da[r * c + start..r * c + start + len].copy_from_slice(&g[r * len..(r + 1) * len]);
                }
                acc(*a, da);
            }
            Op::SumLast { a } => {
                let ta = val(*a);
                let c = ta.cols();
                acc(*a, (0..ta.len()).map(|i| g[i / c]).collect());
            }
            Op::SumRows { a } => {
                let ta = val(*a);
                let c = ta.cols();
                acc(*a, (0..ta.len()).map(|i| g[i % c]).collect());
            }
            Op::SumAll { a } => acc(*a, vec![g[0]; val(*a).len()]),
            Op::L2Normalize { a, eps } => {
                let ta = val(*a);
                let c = ta.cols();
                let mut da = vec![0.0; ta.len()];
                for r in 0..ta.rows() {
                    let x = ta.row(r);
                    let gr = &g[r * c..(r + 1) * c];
                    let n = (x.iter().map(|v| v * v).sum::<f64>() + eps).sqrt();
                    let gx: f64 = gr.iter().zip(x).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        da[r * c + j] = gr[j] / n - x[j] * gx / (n * n * n);
                    }
                }
                acc(*a, da);
            }
            Op::BalancePenalty { importance, eps } => {
                let p = val(*importance).data();
                let n = p.len() as f64;
                let mean = p.iter().sum::<f64>() / n;
                let s: f64 = p.iter().map(|v| (v - mean).powi(2)).sum();
                let d = mean * mean + eps;
                let dp = p
                    .iter()
                    .map(|v| g[0] * 0.5 * (2.0 * (v - mean) * d - s * 2.0 * mean / n) / (d * d))
                    .collect();
                acc(*importance, dp);
            }
            Op::Reshape { a } => acc(*a, g.to_vec()),
        }
        Ok(())
    }
}

fn bcast_index(bcast: Broadcast, i: usize, cols: usize) -> usize {
    match bcast {
        Broadcast::Same => i,
        Broadcast::Row => i % cols,
        Broadcast::Col => i / cols,
        Broadcast::Scalar => 0,
    }
}

fn reduce_broadcast(bcast: Broadcast, g: &[f64], len: usize, cols: usize) -> Vec<f64> {
    if bcast == Broadcast::Same {
        return g.to_vec();
    }
    let mut out = vec![0.0; len];
    for (i, gi) in g.iter().enumerate() {
        out[bcast_index(bcast, i, cols)] += gi;
    }
    out
}

/// `sum (x_i - mean)^2 / (mean^2 + eps)`.
fn cv_term(x: &[f64], eps: f64) -> f64 {
    let mean = x.iter().sum::<f64>() / x.len() as f64;
    x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (mean * mean + eps)
}

/// Builds the computation over `store`, evaluates it and returns the scalar
/// value with the gradient of every trainable group. Frozen groups get no
/// gradient entry; trainable groups the computation never touched get zeros.
pub fn eval_with_gradients<F>(store: &ParamStore, build: F) -> Result<(f64, Gradients)>
where
    F: FnOnce(&mut Graph, &Bindings) -> Result<Var>,
{
    let mut graph = Graph::new();
    let bindings = graph.bind(store)?;
    let loss = build(&mut graph, &bindings)?;
    let value = graph.value(loss).item();
    let mut node_grads = graph.backward(loss)?;
    let mut grads = Gradients::empty(store.len());
    for (id, group) in store.iter() {
        if !group.trainable {
            continue;
        }
        let var = bindings.var(id);
        let g = node_grads[var.0]
            .take()
            .unwrap_or_else(|| vec![0.0; group.tensor.len()]);
        grads.set(id, Tensor::new(group.tensor.shape().to_vec(), g)?);
    }
    Ok((value, grads))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_fn(x0: f64) -> (f64, f64) {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::scalar(x0), true).unwrap();
        let (v, g) = eval_with_gradients(&store, |g, b| {
            let x = b.var(id);
            let y = g.mul(x, x)?;
            g.sum_all(y)
        })
        .unwrap();
        (v, g.get(id).unwrap().item())
    }

    #[test]
    fn square_at_three() {
        assert_eq!(scalar_fn(3.0), (9.0, 6.0));
    }

    #[test]
    fn mse_of_identical_vectors_is_zero() {
        let mut store = ParamStore::new();
        let v = Tensor::new(vec![2, 3], vec![0.5, -1.0, 2.0, 3.0, 0.0, 1.0]).unwrap();
        let a = store.add("a", v.clone(), true).unwrap();
        let b = store.add("b", v, true).unwrap();
        let (loss, grads) = eval_with_gradients(&store, |g, bind| g.mse(bind.var(a), bind.var(b))).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grads.get(a).unwrap().data().iter().all(|&x| x == 0.0));
        assert!(grads.get(b).unwrap().data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn frozen_groups_get_no_gradient() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::scalar(2.0), true).unwrap();
        let b = store.add("b", Tensor::scalar(5.0), false).unwrap();
        let (_, grads) = eval_with_gradients(&store, |g, bind| {
            let p = g.mul(bind.var(a), bind.var(b))?;
            g.sum_all(p)
        })
        .unwrap();
        assert_eq!(grads.get(a).unwrap().item(), 5.0);
        assert!(grads.get(b).is_none());
    }

    #[test]
    fn shape_mismatch_is_a_dimension_error() {
        let mut g = Graph::new();
        let a = g.input(Tensor::zeros(&[2, 3])).unwrap();
        let b = g.input(Tensor::zeros(&[2, 2])).unwrap();
        assert!(matches!(g.matmul(a, b), Err(Error::Dimension(_))));
        assert!(matches!(g.add(a, b), Err(Error::Dimension(_))));
    }

    #[test]
    fn non_finite_results_name_the_kernel() {
        let mut g = Graph::new();
        let a = g.input(Tensor::vector(vec![-1.0, 1.0])).unwrap();
        match g.log(a) {
            Err(Error::Numeric { kernel, .. }) => assert_eq!(kernel, "log"),
            other => panic!("expected numeric error, got {other:?}"),
        }
    }

    #[test]
    fn layer_norm_examples() {
        let mut g = Graph::new();
        let ones = g.input(Tensor::vector(vec![1.0; 4])).unwrap();
        let zeros = g.input(Tensor::vector(vec![0.0; 4])).unwrap();
        let x = g.input(Tensor::vector(vec![3.0; 4])).unwrap();
        let y = g.layer_norm(x, ones, zeros, 1e-5).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));

        let ones2 = g.input(Tensor::vector(vec![1.0; 2])).unwrap();
        let zeros2 = g.input(Tensor::vector(vec![0.0; 2])).unwrap();
        let x = g.input(Tensor::vector(vec![1.0, -1.0])).unwrap();
        let y = g.layer_norm(x, ones2, zeros2, 1e-12).unwrap();
        let d = g.value(y).data();
        assert!((d[0] - 1.0).abs() < 1e-9 && (d[1] + 1.0).abs() < 1e-9);

        let gain0 = g.input(Tensor::vector(vec![0.0; 2])).unwrap();
        let bias = g.input(Tensor::vector(vec![0.25, -0.5])).unwrap();
        let x = g.input(Tensor::vector(vec![7.0, -3.0])).unwrap();
        let y = g.layer_norm(x, gain0, bias, 1e-5).unwrap();
        assert_eq!(g.value(y).data(), &[0.25, -0.5]);
    }

    #[test]
    fn causal_softmax_masks_future_columns() {
        let mut g = Graph::new();
        let s = g
            .input(Tensor::new(vec![1, 3, 3], (0..9).map(f64::from).collect()).unwrap())
            .unwrap();
        let p = g.causal_softmax(s, 3).unwrap();
        let v = g.value(p);
        assert_eq!(v.row(0), &[1.0, 0.0, 0.0]);
        assert_eq!(v.row(1)[2], 0.0);
        for r in 0..3 {
            assert!((v.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn balance_penalty_reference_values() {
        let mut g = Graph::new();
        let p = g.input(Tensor::vector(vec![1.0, 0.0])).unwrap();
        let v = g.balance_penalty(p, &[2.0, 0.0], 1e-12).unwrap();
        assert!((g.value(v).item() - 2.0).abs() < 1e-9);
        let p = g.input(Tensor::vector(vec![0.25; 4])).unwrap();
        let v = g.balance_penalty(p, &[3.0; 4], 1e-9).unwrap();
        assert_eq!(g.value(v).item(), 0.0);
        let p = g.input(Tensor::vector(vec![0.7])).unwrap();
        let v = g.balance_penalty(p, &[5.0], 1e-9).unwrap();
        assert_eq!(g.value(v).item(), 0.0);
    }
}
