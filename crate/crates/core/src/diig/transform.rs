//! Per-channel feature transform: each channel's `D` raw samples at one step
//! go through a two-layer dense net (sigmoid hidden, linear output) to give a
//! `d`-dimensional node feature.

use super::layers::Dense;
use super::{Diig, Sample};
use crate::error::{Error, Result};
use crate::numerics::{xavier_uniform, Adam, AdamConfig, ParamSet, Tape, Tensor, Var};
use crate::rng::Rng;
use crate::synthdata::RawSequence;

pub const TRANSFORM_PREFIX: &str = "transform.";

pub fn transform_params(signal_dim: usize, hidden: usize, feature_dim: usize, rng: &mut Rng) -> Result<ParamSet> {
    let mut p = ParamSet::new();
    p.insert("transform.0.w", xavier_uniform(&[signal_dim, hidden], rng)?);
    p.insert("transform.0.b", Tensor::zeros(&[1, hidden]));
    p.insert("transform.1.w", xavier_uniform(&[hidden, feature_dim], rng)?);
    p.insert("transform.1.b", Tensor::zeros(&[1, feature_dim]));
    Ok(p)
}

fn bind(tape: &mut Tape, params: &ParamSet) -> Result<[Dense; 2]> {
    let mut layer = |i: usize| -> Result<Dense> {
        let w = format!("transform.{i}.w");
        let b = format!("transform.{i}.b");
        Ok(Dense {
            w: tape.param(w.clone(), params.require(&w)?.clone()),
            b: tape.param(b.clone(), params.require(&b)?.clone()),
        })
    };
    Ok([layer(0)?, layer(1)?])
}

/// Maps an `N x D` frame on the tape to `N x d` node features.
pub fn transform_frame(tape: &mut Tape, frame: Var, net: &[Dense; 2]) -> Result<Var> {
    let d_in = tape.value(net[0].w).dims2()?.0;
    let d = tape.value(frame).dims2()?.1;
    if d != d_in {
        return Err(Error::DimensionMismatch(format!(
            "transform expects {d_in} samples per channel, frame has {d}"
        )));
    }
    let h = net[0].apply(tape, frame)?;
    let h = tape.sigmoid(h)?;
    net[1].apply(tape, h)
}

/// Node features for every step of a `T x N x D` signal.
pub fn transform_features(values: &Tensor, params: &ParamSet) -> Result<Vec<Tensor>> {
    if values.rank() != 3 {
        return Err(Error::shape(format!(
            "transform needs a T x N x D signal, got {:?}",
            values.shape()
        )));
    }
    let mut tape = Tape::new();
    let net = bind(&mut tape, params)?;
    (0..values.shape()[0])
        .map(|t| {
            let frame = tape.constant(values.outer(t)?);
            let x = transform_frame(&mut tape, frame, &net)?;
            Ok(tape.value(x).clone())
        })
        .collect()
}

/// Trains the transform jointly with a throwaway DIIG head on `raw`, then
/// returns only the transform weights. The head is discarded so the shared
/// feature extractor carries no trained classifier into the federation.
pub fn pretrain_transform(
    model: &Diig,
    transform: ParamSet,
    head: ParamSet,
    raw: &[&RawSequence],
    epochs: usize,
    batch_size: usize,
    adam: AdamConfig,
    rng: &mut Rng,
) -> Result<ParamSet> {
    if raw.is_empty() {
        return Err(Error::Empty("pretraining set"));
    }
    let w = model.config.window;
    let refs: Vec<(usize, usize)> = raw
        .iter()
        .enumerate()
        .flat_map(|(i, s)| (0..s.steps().saturating_sub(w)).map(move |start| (i, start)))
        .collect();
    if refs.is_empty() {
        return Err(Error::invalid(format!("window {w} leaves no training windows")));
    }
    let mut params = head;
    params.extend(transform);
    let mut opt = Adam::new(adam);
    for _ in 0..epochs {
        for batch in super::shuffled_batches(&refs, batch_size, rng) {
            let mut tape = Tape::new();
            let net = bind(&mut tape, &params)?;
            let bound = model.bind(&mut tape, &params)?;
            let mut total = None;
            for &(i, start) in &batch {
                let seq = raw[i];
                let xs = (start..=start + w)
                    .map(|t| {
                        let frame = tape.constant(seq.frame(t)?);
                        transform_frame(&mut tape, frame, &net)
                    })
                    .collect::<Result<Vec<_>>>()?;
                let fwd = model.forward_sequence(&mut tape, &bound, &xs, None, seq.label, Some(rng))?;
                total = Some(match total {
                    None => fwd.loss,
                    Some(t) => tape.add(t, fwd.loss)?,
                });
            }
            let loss = tape.scale(total.expect("non-empty batch"), 1.0 / batch.len() as f64)?;
            let grads = tape.backward(loss)?;
            opt.step(&mut params, grads.named())?;
        }
    }
    Ok(params.with_prefix(TRANSFORM_PREFIX))
}

impl Sample {
    /// Builds a model-ready sample from a raw sequence.
    pub fn from_raw(model: &Diig, seq: &RawSequence, transform: &ParamSet) -> Result<Sample> {
        let features = transform_features(&seq.values, transform)?;
        let adjacency = match model.config.intra {
            super::IntraMode::Dynamic => None,
            _ => Some(
                features
                    .iter()
                    .enumerate()
                    .map(|(t, x)| {
                        let adj = super::static_adjacency(&model.config, &seq.frame(t)?, x)?;
                        Ok(adj.expect("static mode"))
                    })
                    .collect::<Result<Vec<_>>>()?,
            ),
        };
        Ok(Sample {
            features,
            adjacency,
            label: seq.label,
        })
    }
}
