use rand::seq::SliceRandom;

use super::{Diig, Sample};
use crate::error::{Error, Result};
use crate::numerics::{Adam, ParamSet, Tape, Tensor, Var};
use crate::rng::Rng;

/// One training example: the window of `w + 1` steps of `samples[sample]`
/// starting at `start`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowRef {
    pub sample: usize,
    pub start: usize,
}

/// Every window of every sample, in order.
pub fn window_refs(samples: &[Sample], w: usize) -> Vec<WindowRef> {
    samples
        .iter()
        .enumerate()
        .flat_map(|(i, s)| (0..s.windows(w)).map(move |start| WindowRef { sample: i, start }))
        .collect()
}

fn push_steps(tape: &mut Tape, features: &[Tensor]) -> Vec<Var> {
    features.iter().map(|x| tape.constant(x.clone())).collect()
}

/// Mean loss over a batch of windows and its gradient for every model
/// parameter. Dropout is active when `rng` is given.
pub fn batch_gradients(
    model: &Diig,
    params: &ParamSet,
    samples: &[Sample],
    batch: &[WindowRef],
    mut rng: Option<&mut Rng>,
) -> Result<(f64, ParamSet)> {
    if batch.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let w = model.config.window;
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, params)?;
    let mut total = None;
    for r in batch {
        let sample = samples
            .get(r.sample)
            .ok_or_else(|| Error::invalid(format!("no sample {}", r.sample)))?;
        let span = r.start..r.start + w + 1;
        if span.end > sample.features.len() {
            return Err(Error::invalid(format!("window at {} overruns the sequence", r.start)));
        }
        let xs = push_steps(&mut tape, &sample.features[span.clone()]);
        let adj = sample.adjacency.as_ref().map(|a| &a[span]);
        let fwd = model.forward_sequence(&mut tape, &bound, &xs, adj, sample.label, rng.as_deref_mut())?;
        total = Some(match total {
            None => fwd.loss,
            Some(t) => tape.add(t, fwd.loss)?,
        });
    }
    let loss = tape.scale(total.expect("non-empty batch"), 1.0 / batch.len() as f64)?;
    let grads = tape.backward(loss)?;
    Ok((tape.value(loss).data()[0], grads.into_named()))
}

/// Class probabilities for every window of `sample`, without dropout. The
/// spatial block runs once per step and is shared across windows.
pub fn predict(model: &Diig, params: &ParamSet, sample: &Sample) -> Result<Vec<Tensor>> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, params)?;
    let xs = push_steps(&mut tape, &sample.features);
    let fwd = model.forward_sequence(
        &mut tape,
        &bound,
        &xs,
        sample.adjacency.as_deref(),
        sample.label,
        None,
    )?;
    Ok(fwd.probs.iter().map(|&p| tape.value(p).clone()).collect())
}

/// Shuffled mini-batches over `items`; the last batch may be short.
pub fn shuffled_batches<T: Copy>(items: &[T], batch_size: usize, rng: &mut Rng) -> Vec<Vec<T>> {
    let mut order = items.to_vec();
    order.shuffle(rng);
    order.chunks(batch_size.max(1)).map(|c| c.to_vec()).collect()
}

/// One pass over every window of `samples` with Adam; returns the mean
/// batch loss.
pub fn train_epoch(
    model: &Diig,
    params: &mut ParamSet,
    adam: &mut Adam,
    samples: &[Sample],
    batch_size: usize,
    rng: &mut Rng,
) -> Result<f64> {
    let refs = window_refs(samples, model.config.window);
    if refs.is_empty() {
        return Err(Error::Empty("training set"));
    }
    let batches = shuffled_batches(&refs, batch_size, rng);
    let mut sum = 0.0;
    for batch in &batches {
        let (loss, grads) = batch_gradients(model, params, samples, batch, Some(rng))?;
        adam.step(params, &grads)?;
        sum += loss;
    }
    Ok(sum / batches.len() as f64)
}
