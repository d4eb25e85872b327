//! Synthetic spatial-temporal sequences, non-IID partitioning and windowing.
//!
//! Each class owns a coupling matrix `M_c = I + kappa * P_c` where `P_c` is an
//! off-diagonal pattern with rows summing to one. A sequence of class `c` is a
//! first-order vector autoregression over `N` channels whose state at each of
//! the `T` steps is a frame of `D` samples:
//!
//! ```text
//! s(t) = b(t) + (M_c - I) s(t-1) + noise * eps(t)
//! ```
//!
//! where `b_n(t)` is channel `n`'s own sinusoid sampled over frame `t`.

mod container;
mod window;

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

pub use container::{decode_dataset, encode_dataset, load_dataset, save_dataset, DATASET_MAGIC};
pub use window::{make_windows, TemporalWindow};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::rng::{stream, Rng, Stream};

/// Generator settings. Defaults are the desk-scale benchmark.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    /// Number of labelled sequences.
    pub sequences: usize,
    /// Time steps `T` per sequence.
    pub steps: usize,
    /// Channels `N` (graph nodes).
    pub channels: usize,
    /// Raw samples `D` per channel per step.
    pub signal_dim: usize,
    /// Classes `C`.
    pub classes: usize,
    /// Standard deviation of the additive Gaussian noise.
    pub noise: f64,
    /// Cross-channel coupling strength `kappa`; 0 gives identity coupling.
    pub coupling: f64,
    /// Maximum per-sequence phase jitter in radians.
    pub phase_jitter: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            sequences: 400,
            steps: 8,
            channels: 6,
            signal_dim: 8,
            classes: 4,
            noise: 0.1,
            coupling: 0.8,
            phase_jitter: 0.5,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels < 2 {
            return Err(Error::invalid("generator needs at least 2 channels"));
        }
        if self.classes < 2 {
            return Err(Error::invalid("generator needs at least 2 classes"));
        }
        if self.steps < 8 {
            return Err(Error::invalid("generator needs at least 8 time steps"));
        }
        if self.signal_dim == 0 || self.sequences == 0 {
            return Err(Error::invalid("signal_dim and sequences must be positive"));
        }
        if !(0.0..1.0).contains(&self.coupling) {
            return Err(Error::invalid("coupling must lie in [0, 1)"));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) || !(self.phase_jitter >= 0.0) {
            return Err(Error::invalid("noise and phase_jitter must be non-negative"));
        }
        Ok(())
    }
}

/// One labelled `T x N x D` signal.
#[derive(Clone, Debug, PartialEq)]
pub struct RawSequence {
    pub values: Tensor,
    pub label: usize,
}

impl RawSequence {
    pub fn steps(&self) -> usize {
        self.values.shape()[0]
    }

    /// Frame `t` as an `N x D` matrix.
    pub fn frame(&self, t: usize) -> Result<Tensor> {
        self.values.outer(t)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub sequences: Vec<RawSequence>,
    pub steps: usize,
    pub channels: usize,
    pub signal_dim: usize,
    pub classes: usize,
    /// Generator seed; `None` for imported data.
    pub seed: Option<u64>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.sequences.iter().map(|s| s.label).collect()
    }

    pub fn validate(&self) -> Result<()> {
        for (i, s) in self.sequences.iter().enumerate() {
            if s.values.shape() != [self.steps, self.channels, self.signal_dim] {
                return Err(Error::DimensionMismatch(format!(
                    "sequence {i} has shape {:?}",
                    s.values.shape()
                )));
            }
            if s.label >= self.classes {
                return Err(Error::InvalidLabel {
                    label: s.label,
                    classes: self.classes,
                });
            }
        }
        Ok(())
    }
}

/// Class coupling matrices `M_c`, each `N x N`.
pub fn coupling_matrices(cfg: &GeneratorConfig, rng: &mut Rng) -> Result<Vec<Tensor>> {
    let n = cfg.channels;
    let mut out: Vec<Tensor> = Vec::with_capacity(cfg.classes);
    for c in 0..cfg.classes {
        let mut attempts = 0;
        let m = loop {
            let mut m = Tensor::identity(n).into_data();
            if c < n * (n / 2) {
                // Ring shift: channel i is driven by channel i + offset.
                // Offsets cycle through 1..=N/2, which excludes mirror
                // images of each other; each pass over them halves the
                // strength again.
                let offsets = n / 2;
                let offset = 1 + c % offsets;
                let strength = cfg.coupling / (1 + c / offsets) as f64;
                for i in 0..n {
                    m[i * n + (i + offset) % n] += strength;
                }
            } else {
                for i in 0..n {
                    let weights: Vec<f64> = (0..n)
                        .map(|j| if j == i { 0.0 } else { rng.random_range(0.05..1.0) })
                        .collect();
                    let total: f64 = weights.iter().sum();
                    let row_scale = cfg.coupling * rng.random_range(0.3..1.0);
                    for (j, w) in weights.iter().enumerate() {
                        m[i * n + j] += row_scale * w / total;
                    }
                }
            }
            let m = Tensor::matrix(n, n, m)?;
            let distinct = out
                .iter()
                .all(|prev| prev.sub(&m).map(|d| d.norm2() > 1e-9).unwrap_or(false));
            if distinct || cfg.coupling == 0.0 {
                break m;
            }
            attempts += 1;
            if attempts > 100 {
                return Err(Error::invalid("could not draw distinct coupling matrices"));
            }
        };
        out.push(m);
    }
    Ok(out)
}

/// Per-channel sinusoid frequency in cycles per sample, below Nyquist.
fn channel_frequency(_n: usize, _channels: usize, signal_dim: usize) -> f64 {
    1.0 / signal_dim as f64
}

/// Generates a labelled dataset. Labels cycle through the classes, so class
/// counts differ by at most one.
pub fn generate(cfg: &GeneratorConfig, seed: u64) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = stream(seed, Stream::Generator, 0);
    let couplings = coupling_matrices(cfg, &mut rng)?;
    let (t_len, n, d) = (cfg.steps, cfg.channels, cfg.signal_dim);
    let base_phase: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..2.0 * PI)).collect();

    let mut sequences = Vec::with_capacity(cfg.sequences);
    for idx in 0..cfg.sequences {
        let label = idx % cfg.classes;
        let coupling = couplings[label].data();
        let phase: Vec<f64> = base_phase
            .iter()
            .map(|p| {
                if cfg.phase_jitter > 0.0 {
                    p + rng.random_range(-cfg.phase_jitter..=cfg.phase_jitter)
                } else {
                    *p
                }
            })
            .collect();

        let mut values = vec![0.0; t_len * n * d];
        for t in 0..t_len {
            for ch in 0..n {
                let f = channel_frequency(ch, n, d);
                for k in 0..d {
                    let sample = (t * d + k) as f64;
                    let mut v = (2.0 * PI * f * sample + phase[ch]).sin();
                    if t > 0 {
                        for j in 0..n {
                            let w = coupling[ch * n + j] - if j == ch { 1.0 } else { 0.0 };
                            if w != 0.0 {
                                v += w * values[((t - 1) * n + j) * d + k];
                            }
                        }
                    }
                    if cfg.noise > 0.0 {
                        let e: f64 = StandardNormal.sample(&mut rng);
                        v += cfg.noise * e;
                    }
                    values[(t * n + ch) * d + k] = v;
                }
            }
        }
        sequences.push(RawSequence {
            values: Tensor::new(vec![t_len, n, d], values)?,
            label,
        });
    }

    Ok(Dataset {
        sequences,
        steps: t_len,
        channels: n,
        signal_dim: d,
        classes: cfg.classes,
        seed: Some(seed),
    })
}

/// Shuffled train/test index split; the training share is rounded.
pub fn train_test_split(len: usize, train_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::invalid("train fraction must lie in (0, 1)"));
    }
    let mut idx: Vec<usize> = (0..len).collect();
    idx.shuffle(&mut stream(seed, Stream::Split, 0));
    let n_train = ((len as f64) * train_fraction).round() as usize;
    if n_train == 0 || n_train == len {
        return Err(Error::invalid(format!(
            "{len} sequences cannot be split with fraction {train_fraction}"
        )));
    }
    let test = idx.split_off(n_train);
    Ok((idx, test))
}

/// Non-IID partition settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PartitionSpec {
    pub participants: usize,
    /// Dirichlet concentration; small values give strong label skew.
    pub alpha: f64,
    pub seed: u64,
}

const MAX_PARTITION_ATTEMPTS: usize = 1000;

fn dirichlet(alpha: f64, dim: usize, rng: &mut Rng) -> Result<Vec<f64>> {
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::invalid(format!("dirichlet: {e}")))?;
    loop {
        let draws: Vec<f64> = (0..dim).map(|_| gamma.sample(rng)).collect();
        let total: f64 = draws.iter().sum();
        if total > 0.0 && total.is_finite() {
            return Ok(draws.into_iter().map(|g| g / total).collect());
        }
    }
}

/// Splits `count` items by `weights` with largest-remainder rounding; ties go
/// to the lower index.
fn apportion(count: usize, weights: &[f64]) -> Vec<usize> {
    let total: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|w| count as f64 * w / total).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut left = count - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &k in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[k] += 1;
        left -= 1;
    }
    counts
}

/// Label-skewed partition of `pool` (indices into `ds`) across participants.
///
/// Each participant draws class proportions `q_k ~ Dirichlet(alpha)` over the
/// `C` classes; every class's members are then split across participants in
/// proportion to `q_k[c]`. Shards are disjoint and cover the pool. Draws are
/// repeated until every shard is non-empty.
pub fn partition_noniid(ds: &Dataset, pool: &[usize], spec: &PartitionSpec) -> Result<Vec<Vec<usize>>> {
    let k = spec.participants;
    if k == 0 {
        return Err(Error::invalid("at least one participant is required"));
    }
    if !(spec.alpha > 0.0 && spec.alpha.is_finite()) {
        return Err(Error::invalid("dirichlet alpha must be positive"));
    }
    if k > pool.len() {
        return Err(Error::invalid(format!(
            "cannot split {} sequences into {k} non-empty shards",
            pool.len()
        )));
    }
    if pool.iter().any(|&i| i >= ds.len()) {
        return Err(Error::invalid("pool index out of range"));
    }
    if k == 1 {
        return Ok(vec![pool.to_vec()]);
    }

    let mut rng = stream(spec.seed, Stream::Partition, 0);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.classes];
    for &i in pool {
        by_class[ds.sequences[i].label].push(i);
    }
    for members in &mut by_class {
        members.shuffle(&mut rng);
    }

    for _ in 0..MAX_PARTITION_ATTEMPTS {
        let proportions: Vec<Vec<f64>> = (0..k)
            .map(|_| dirichlet(spec.alpha, ds.classes, &mut rng))
            .collect::<Result<_>>()?;
        let mut shards: Vec<Vec<usize>> = vec![Vec::new(); k];
        for (c, members) in by_class.iter().enumerate() {
            if members.is_empty() {
                continue;
            }
            let weights: Vec<f64> = proportions.iter().map(|q| q[c]).collect();
            let counts = apportion(members.len(), &weights);
            let mut offset = 0;
            for (shard, n) in shards.iter_mut().zip(counts) {
                shard.extend_from_slice(&members[offset..offset + n]);
                offset += n;
            }
        }
        if shards.iter().all(|s| !s.is_empty()) {
            for s in &mut shards {
                s.sort_unstable();
            }
            return Ok(shards);
        }
    }
    Err(Error::invalid(format!(
        "no non-empty {k}-way split found after {MAX_PARTITION_ATTEMPTS} draws"
    )))
}

/// Class histogram of the given indices, normalised to frequencies.
pub fn class_frequencies(ds: &Dataset, indices: &[usize]) -> Vec<f64> {
    let mut hist = vec![0.0; ds.classes];
    for &i in indices {
        hist[ds.sequences[i].label] += 1.0;
    }
    let total = indices.len().max(1) as f64;
    hist.iter_mut().for_each(|h| *h /= total);
    hist
}
