//! Reverse-mode differentiation over a linear recording of tensor operations.
//!
//! Every op appends a node whose inputs are earlier nodes, so the node list is
//! already in topological order and the backward sweep is a reverse scan.

use std::collections::BTreeMap;

use super::tensor::{
    layer_norm_in_place, matmul_nt_acc, matmul_tn_acc, Tensor,
};
use super::ParamSet;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Exp(Var),
    ConcatCols(Var, Var),
    RepeatRows(Var, usize),
    SoftmaxRows(Var),
    LayerNormRows(Var, f64),
    MeanRows(Var),
    SumAll(Var),
    MeanAll(Var),
    Nll { probs: Var, class: usize, floor: f64 },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::MulRow(..) => "mul_row",
            Op::Scale(..) => "scale",
            Op::Sigmoid(..) => "sigmoid",
            Op::Exp(..) => "exp",
            Op::ConcatCols(..) => "concat_cols",
            Op::RepeatRows(..) => "repeat_rows",
            Op::SoftmaxRows(..) => "softmax_rows",
            Op::LayerNormRows(..) => "layer_norm_rows",
            Op::MeanRows(..) => "mean_rows",
            Op::SumAll(..) => "sum",
            Op::MeanAll(..) => "mean",
            Op::Nll { .. } => "nll",
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
    /// Set for trainable leaves.
    param: Option<String>,
}

/// Recording of a forward computation.
///
/// A tape is single-owner; it is `Send` so it can move between threads but is
/// never shared during mutation.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to every node.
#[derive(Debug)]
pub struct Gradients {
    per_node: Vec<Option<Tensor>>,
    named: ParamSet,
}

impl Gradients {
    /// Gradient for `v`; zeros when `v` did not contribute to the loss.
    pub fn wrt(&self, tape: &Tape, v: Var) -> Tensor {
        self.per_node[v.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(tape.value(v).shape()))
    }

    /// Gradients of every trainable leaf keyed by its name.
    pub fn named(&self) -> &ParamSet {
        &self.named
    }

    pub fn into_named(self) -> ParamSet {
        self.named
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
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

    /// Records a named trainable leaf.
    pub fn param(&mut self, name: impl Into<String>, value: Tensor) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            param: Some(name.into()),
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a non-trainable leaf.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Registers every tensor of `params` as a trainable leaf.
    pub fn params(&mut self, params: &ParamSet) -> BTreeMap<String, Var> {
        params
            .iter()
            .map(|(name, t)| (name.clone(), self.param(name.clone(), t.clone())))
            .collect()
    }

    /// Trainable leaves in recording order.
    pub fn param_leaves(&self) -> Vec<(String, Var)> {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.param.clone().map(|name| (name, Var(i))))
            .collect()
    }

    /// Overwrites a leaf value; call [`Tape::replay`] to refresh dependents.
    pub fn set_leaf(&mut self, v: Var, value: Tensor) -> Result<()> {
        let node = &mut self.nodes[v.0];
        if !matches!(node.op, Op::Leaf) {
            return Err(Error::invalid("set_leaf on a non-leaf node"));
        }
        if node.value.shape() != value.shape() {
            return Err(Error::shape("set_leaf changes shape"));
        }
        node.value = value;
        Ok(())
    }

    /// Recomputes every non-leaf node from the current leaf values.
    pub fn replay(&mut self) -> Result<()> {
        for i in 0..self.nodes.len() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let op = self.nodes[i].op.clone();
            let value = self.compute(&op)?;
            self.nodes[i].value = value;
        }
        Ok(())
    }

    fn push(&mut self, op: Op) -> Result<Var> {
        let value = self.compute(&op)?;
        self.nodes.push(Node {
            op,
            value,
            param: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn compute(&self, op: &Op) -> Result<Tensor> {
        let v = |x: &Var| &self.nodes[x.0].value;
        let out = match op {
            Op::Leaf => unreachable!("leaves are not recomputed"),
            Op::MatMul(a, b) => v(a).matmul(v(b))?,
            Op::Transpose(a) => v(a).transpose()?,
            Op::Add(a, b) => v(a).add(v(b))?,
            Op::Sub(a, b) => v(a).sub(v(b))?,
            Op::Mul(a, b) => v(a).hadamard(v(b))?,
            Op::AddRow(a, r) => v(a).add_row(v(r))?,
            Op::MulRow(a, r) => {
                let (rows, c) = v(a).dims2()?;
                let (one, c2) = v(r).dims2()?;
                if one != 1 || c != c2 {
                    return Err(Error::shape("mul_row broadcast"));
                }
                let row = v(r).data();
                let mut out = v(a).data().to_vec();
                for chunk in out.chunks_mut(c) {
                    for (o, s) in chunk.iter_mut().zip(row) {
                        *o *= s;
                    }
                }
                Tensor::from_parts(vec![rows, c], out)
            }
            Op::Scale(a, c) => v(a).scale(*c),
            Op::Sigmoid(a) => v(a).map(sigmoid),
            Op::Exp(a) => v(a).map(f64::exp),
            Op::ConcatCols(a, b) => v(a).concat_cols(v(b))?,
            Op::RepeatRows(a, n) => {
                let (one, c) = v(a).dims2()?;
                if one != 1 || *n == 0 {
                    return Err(Error::shape("repeat_rows needs a single row"));
                }
                let mut out = Vec::with_capacity(n * c);
                for _ in 0..*n {
                    out.extend_from_slice(v(a).data());
                }
                Tensor::from_parts(vec![*n, c], out)
            }
            Op::SoftmaxRows(a) => v(a).softmax_rows()?,
            Op::LayerNormRows(a, eps) => {
                let (r, c) = v(a).dims2()?;
                if c < 2 {
                    return Err(Error::DegenerateShape("layer norm over < 2 features".into()));
                }
                let mut out = v(a).data().to_vec();
                for row in out.chunks_mut(c) {
                    layer_norm_in_place(row, *eps);
                }
                Tensor::from_parts(vec![r, c], out)
            }
            Op::MeanRows(a) => v(a).mean_rows()?,
            Op::SumAll(a) => Tensor::scalar(v(a).sum()),
            Op::MeanAll(a) => Tensor::scalar(v(a).mean()),
            Op::Nll {
                probs,
                class,
                floor,
            } => {
                let p = v(probs);
                let (one, c) = p.dims2()?;
                if one != 1 || *class >= c {
                    return Err(Error::shape(format!(
                        "nll over {:?} with class {class}",
                        p.shape()
                    )));
                }
                Tensor::scalar(-p.data()[*class].max(*floor).ln())
            }
        };
        if !out.is_finite() {
            return Err(Error::NonFinite(op.name().to_string()));
        }
        Ok(out)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::MatMul(a, b))
    }
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Transpose(a))
    }
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Add(a, b))
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Sub(a, b))
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Mul(a, b))
    }
    /// Adds a `1 x c` row (typically a bias) to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.push(Op::AddRow(a, row))
    }
    /// Scales every row of `a` elementwise by a `1 x c` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.push(Op::MulRow(a, row))
    }
    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.push(Op::Scale(a, c))
    }
    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Sigmoid(a))
    }
    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Exp(a))
    }
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::ConcatCols(a, b))
    }
    pub fn repeat_rows(&mut self, a: Var, n: usize) -> Result<Var> {
        self.push(Op::RepeatRows(a, n))
    }
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        self.push(Op::SoftmaxRows(a))
    }
    pub fn layer_norm_rows(&mut self, a: Var, eps: f64) -> Result<Var> {
        self.push(Op::LayerNormRows(a, eps))
    }
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        self.push(Op::MeanRows(a))
    }
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.push(Op::SumAll(a))
    }
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.push(Op::MeanAll(a))
    }
    /// `-ln(max(p[class], floor))` for a `1 x C` probability row.
    pub fn nll(&mut self, probs: Var, class: usize, floor: f64) -> Result<Var> {
        self.push(Op::Nll {
            probs,
            class,
            floor,
        })
    }

    /// `x W + b` for row-major activations.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add_row(xw, b)
    }

    /// Mean squared error between two equal-shaped nodes.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        self.mean(sq)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::NotScalar(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::from_parts(lv.shape().to_vec(), vec![1.0]));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            self.backprop_node(&node.op, &node.value, &g, &mut grads)?;
            grads[i] = Some(g);
        }

        let mut named = ParamSet::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Some(name) = &node.param {
                let g = grads
                    .get(i)
                    .and_then(|g| g.clone())
                    .unwrap_or_else(|| Tensor::zeros(node.value.shape()));
                match named.get_mut(name) {
                    // A name registered twice accumulates.
                    Some(existing) => existing.add_assign(&g),
                    None => {
                        named.insert(name.clone(), g);
                    }
                }
            }
        }
        grads.resize(self.nodes.len(), None);
        Ok(Gradients {
            per_node: grads,
            named,
        })
    }

    fn backprop_node(
        &self,
        op: &Op,
        out: &Tensor,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) -> Result<()> {
        let val = |x: &Var| &self.nodes[x.0].value;
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = val(a).dims2()?;
                let (_, n) = val(b).dims2()?;
                let mut da = vec![0.0; m * k];
                matmul_nt_acc(g.data(), val(b).data(), &mut da, m, n, k);
                let mut db = vec![0.0; k * n];
                matmul_tn_acc(val(a).data(), g.data(), &mut db, m, k, n);
                accumulate(grads, *a, val(a), da);
                accumulate(grads, *b, val(b), db);
            }
            Op::Transpose(a) => {
                accumulate(grads, *a, val(a), g.transpose()?.into_data());
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, val(a), g.data().to_vec());
                accumulate(grads, *b, val(b), g.data().to_vec());
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, val(a), g.data().to_vec());
                accumulate(grads, *b, val(b), g.data().iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let da = g.hadamard(val(b))?.into_data();
                let db = g.hadamard(val(a))?.into_data();
                accumulate(grads, *a, val(a), da);
                accumulate(grads, *b, val(b), db);
            }
            Op::AddRow(a, r) => {
                accumulate(grads, *a, val(a), g.data().to_vec());
                accumulate(grads, *r, val(r), column_sums(g)?);
            }
            Op::MulRow(a, r) => {
                let (_, c) = g.dims2()?;
                let row = val(r).data();
                let mut da = g.data().to_vec();
                let mut dr = vec![0.0; c];
                for (gi, (dai, ai)) in g
                    .data()
                    .chunks(c)
                    .zip(da.chunks_mut(c).zip(val(a).data().chunks(c)))
                {
                    for j in 0..c {
                        dai[j] = gi[j] * row[j];
                        dr[j] += gi[j] * ai[j];
                    }
                }
                accumulate(grads, *a, val(a), da);
                accumulate(grads, *r, val(r), dr);
            }
            Op::Scale(a, c) => {
                accumulate(grads, *a, val(a), g.data().iter().map(|v| v * c).collect());
            }
            Op::Sigmoid(a) => {
                let da = g
                    .data()
                    .iter()
                    .zip(out.data())
                    .map(|(gv, y)| gv * y * (1.0 - y))
                    .collect();
                accumulate(grads, *a, val(a), da);
            }
            Op::Exp(a) => {
                accumulate(grads, *a, val(a), g.hadamard(out)?.into_data());
            }
            Op::ConcatCols(a, b) => {
                let (r, ca) = val(a).dims2()?;
                let (_, cb) = val(b).dims2()?;
                let mut da = Vec::with_capacity(r * ca);
                let mut db = Vec::with_capacity(r * cb);
                for row in g.data().chunks(ca + cb) {
                    da.extend_from_slice(&row[..ca]);
                    db.extend_from_slice(&row[ca..]);
                }
                accumulate(grads, *a, val(a), da);
                accumulate(grads, *b, val(b), db);
            }
            Op::RepeatRows(a, n) => {
                debug_assert_eq!(g.dims2()?.0, *n);
                accumulate(grads, *a, val(a), column_sums(g)?);
            }
            Op::SoftmaxRows(a) => {
                let (_, c) = out.dims2()?;
                let mut da = Vec::with_capacity(out.numel());
                for (y, gy) in out.data().chunks(c).zip(g.data().chunks(c)) {
                    let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                    da.extend(y.iter().zip(gy).map(|(yi, gi)| yi * (gi - dot)));
                }
                accumulate(grads, *a, val(a), da);
            }
            Op::LayerNormRows(a, eps) => {
                let (_, c) = out.dims2()?;
                let n = c as f64;
                let mut da = Vec::with_capacity(out.numel());
                for (x, (y, gy)) in val(a)
                    .data()
                    .chunks(c)
                    .zip(out.data().chunks(c).zip(g.data().chunks(c)))
                {
                    let mean = x.iter().sum::<f64>() / n;
                    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                    let inv_std = 1.0 / (var + eps).sqrt();
                    let g_mean = gy.iter().sum::<f64>() / n;
                    let gy_mean = gy.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / n;
                    da.extend(
                        gy.iter()
                            .zip(y)
                            .map(|(gi, yi)| inv_std * (gi - g_mean - yi * gy_mean)),
                    );
                }
                accumulate(grads, *a, val(a), da);
            }
            Op::MeanRows(a) => {
                let (r, c) = val(a).dims2()?;
                let inv = 1.0 / r as f64;
                let mut da = Vec::with_capacity(r * c);
                for _ in 0..r {
                    da.extend(g.data().iter().map(|v| v * inv));
                }
                accumulate(grads, *a, val(a), da);
            }
            Op::SumAll(a) => {
                let gv = g.data()[0];
                accumulate(grads, *a, val(a), vec![gv; val(a).numel()]);
            }
            Op::MeanAll(a) => {
                let n = val(a).numel();
                let gv = g.data()[0] / n as f64;
                accumulate(grads, *a, val(a), vec![gv; n]);
            }
            Op::Nll {
                probs,
                class,
                floor,
            } => {
                let p = val(probs);
                let pc = p.data()[*class];
                let mut dp = vec![0.0; p.numel()];
                if pc > *floor {
                    dp[*class] = -g.data()[0] / pc;
                }
                accumulate(grads, *probs, p, dp);
            }
        }
        Ok(())
    }
}

fn column_sums(g: &Tensor) -> Result<Vec<f64>> {
    let (_, c) = g.dims2()?;
    let mut out = vec![0.0; c];
    for row in g.data().chunks(c) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    Ok(out)
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, like: &Tensor, delta: Vec<f64>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, d) in existing.data_mut().iter_mut().zip(delta) {
                *e += d;
            }
        }
        slot @ None => *slot = Some(Tensor::from_parts(like.shape().to_vec(), delta)),
    }
}
