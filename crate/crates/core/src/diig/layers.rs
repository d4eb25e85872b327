//! DIIG building blocks as tape operations.
//!
//! Activations are row-major: a graph with `N` nodes is an `N x k` matrix and
//! a dense layer computes `x W + b`.

use crate::error::{Error, Result};
use crate::numerics::{Tape, Var};

/// Floor applied to the true-class probability inside the loss.
pub const PROB_FLOOR: f64 = 1e-12;

/// Weight and bias of one dense layer.
#[derive(Clone, Copy, Debug)]
pub struct Dense {
    pub w: Var,
    pub b: Var,
}

impl Dense {
    pub fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        tape.dense(x, self.w, self.b)
    }
}

fn rows(tape: &Tape, v: Var) -> Result<usize> {
    Ok(tape.value(v).dims2()?.0)
}

/// Row-softmax of the bilinear scores `a_i^T W b_j`.
fn bilinear_softmax(tape: &mut Tape, a: Var, w: Var, b: Var) -> Result<Var> {
    let aw = tape.matmul(a, w)?;
    let bt = tape.transpose(b)?;
    let scores = tape.matmul(aw, bt)?;
    tape.softmax_rows(scores)
}

/// Dynamic spatial adjacency of one graph from its node features.
pub fn intra_correlation(tape: &mut Tape, x: Var, w_spa: Var) -> Result<Var> {
    bilinear_softmax(tape, x, w_spa, x)
}

/// Dynamic temporal adjacency between the nodes of graph `t` (rows) and
/// graph `t - 1` (columns).
pub fn inter_correlation(tape: &mut Tape, h_t: Var, h_prev: Var, w_tem: Var) -> Result<Var> {
    let (n, n_prev) = (rows(tape, h_t)?, rows(tape, h_prev)?);
    if n != n_prev {
        return Err(Error::shape(format!(
            "inter correlation between {n} and {n_prev} nodes"
        )));
    }
    bilinear_softmax(tape, h_t, w_tem, h_prev)
}

/// `sigmoid([H, (1/N) A H] W + b)`.
pub fn message_pass(tape: &mut Tape, a: Var, h: Var, agg: Dense) -> Result<Var> {
    let n = rows(tape, h)?;
    let ah = tape.matmul(a, h)?;
    let ah = tape.scale(ah, 1.0 / n as f64)?;
    let cat = tape.concat_cols(h, ah)?;
    let z = agg.apply(tape, cat)?;
    tape.sigmoid(z)
}

/// Mean over nodes of `h_i ⊕ x_i`, then the readout stack. Hidden layers use
/// sigmoid, the last layer is linear. Returns a `1 x graph_emb` row.
pub fn graph_readout(tape: &mut Tape, h: Var, x: Var, stack: &[Dense]) -> Result<Var> {
    let cat = tape.concat_cols(h, x)?;
    let mut g = tape.mean_rows(cat)?;
    for (i, layer) in stack.iter().enumerate() {
        g = layer.apply(tape, g)?;
        if i + 1 < stack.len() {
            g = tape.sigmoid(g)?;
        }
    }
    Ok(g)
}

/// Per node `LN(sigmoid([h_i, g] W + b))`.
pub fn fuse_embeddings(tape: &mut Tape, h: Var, g: Var, fuse: Dense, eps: f64) -> Result<Var> {
    let n = rows(tape, h)?;
    let rep = tape.repeat_rows(g, n)?;
    let cat = tape.concat_cols(h, rep)?;
    let z = fuse.apply(tape, cat)?;
    let s = tape.sigmoid(z)?;
    tape.layer_norm_rows(s, eps)
}

/// Recursive inter-graph propagation over fused embeddings, oldest first.
///
/// The running embedding starts at the oldest graph; each later graph
/// contributes an adjacency against it and one shared message-passing step.
/// A single-graph window returns its embedding untouched.
pub fn temporal_propagate(tape: &mut Tape, fused: &[Var], w_tem: Var, agg: Dense) -> Result<Var> {
    let (&first, rest) = fused
        .split_first()
        .ok_or(Error::Empty("temporal window"))?;
    let mut running = first;
    for &h in rest {
        let a = inter_correlation(tape, h, running, w_tem)?;
        running = message_pass(tape, a, running, agg)?;
    }
    Ok(running)
}

/// `sigmoid([H_spa, H_tem] W_o + b)`, an `N x C` matrix.
pub fn final_embedding(tape: &mut Tape, h_spa: Var, h_tem: Var, out: Dense) -> Result<Var> {
    let cat = tape.concat_cols(h_spa, h_tem)?;
    let z = out.apply(tape, cat)?;
    tape.sigmoid(z)
}

/// Softmax of the node-mean of the final embedding; a `1 x C` row.
pub fn predict_logits(tape: &mut Tape, emb: Var) -> Result<Var> {
    let m = tape.mean_rows(emb)?;
    tape.softmax_rows(m)
}

/// Categorical cross-entropy against class `label`.
pub fn classification_loss(tape: &mut Tape, probs: Var, label: usize) -> Result<Var> {
    let c = tape.value(probs).dims2()?.1;
    if label >= c {
        return Err(Error::InvalidLabel { label, classes: c });
    }
    tape.nll(probs, label, PROB_FLOOR)
}
