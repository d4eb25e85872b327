use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// `w + 1` consecutive spatial graphs feeding one classification.
#[derive(Clone, Debug, PartialEq)]
pub struct TemporalWindow {
    /// `(w + 1) x N x d` node features, oldest step first.
    pub features: Tensor,
    pub label: usize,
    pub window: usize,
    /// Index of the oldest step in the source sequence.
    pub start: usize,
}

impl TemporalWindow {
    /// Node features of the `i`-th graph in the window (`N x d`).
    pub fn graph(&self, i: usize) -> Result<Tensor> {
        self.features.outer(i)
    }
}

/// Slides a window of `w + 1` steps with stride 1 over a `T x N x d` tensor.
pub fn make_windows(x: &Tensor, label: usize, w: usize) -> Result<Vec<TemporalWindow>> {
    let shape = x.shape();
    if shape.len() != 3 {
        return Err(Error::shape(format!(
            "windowing needs a T x N x d tensor, got {shape:?}"
        )));
    }
    let t_len = shape[0];
    if w >= t_len {
        return Err(Error::invalid(format!(
            "window {w} needs more than {t_len} time steps"
        )));
    }
    let step = shape[1] * shape[2];
    (0..t_len - w)
        .map(|start| {
            let data = x.data()[start * step..(start + w + 1) * step].to_vec();
            Ok(TemporalWindow {
                features: Tensor::new(vec![w + 1, shape[1], shape[2]], data)?,
                label,
                window: w,
                start,
            })
        })
        .collect()
}
