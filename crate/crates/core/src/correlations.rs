//! Static node-correlation functions (K-NN, Pearson, phase locking value).
//!
//! These produce fixed adjacency matrices that can stand in for the learned
//! intra-graph correlation in the "intra only" ablation.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdjacencyKind {
    Knn,
    Pcc,
    Plv,
    DynamicSpatial,
    DynamicTemporal,
}

/// Non-negative square `N x N` node-correlation matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Adjacency {
    pub matrix: Tensor,
    pub kind: AdjacencyKind,
}

impl Adjacency {
    pub fn new(matrix: Tensor, kind: AdjacencyKind) -> Result<Self> {
        let (r, c) = matrix.dims2()?;
        if r != c || matrix.rank() != 2 {
            return Err(Error::shape(format!(
                "adjacency must be square, got {:?}",
                matrix.shape()
            )));
        }
        if matrix.data().iter().any(|&v| v < 0.0) {
            return Err(Error::invalid("adjacency entries must be non-negative"));
        }
        Ok(Adjacency { matrix, kind })
    }

    pub fn nodes(&self) -> usize {
        self.matrix.shape()[0]
    }

    /// Largest deviation of any row sum from 1.
    pub fn row_sum_error(&self) -> f64 {
        let n = self.nodes();
        (0..n)
            .map(|i| (self.matrix.row_slice(i).iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

fn rows(x: &Tensor) -> Result<(usize, usize)> {
    if x.rank() != 2 {
        return Err(Error::shape(format!("expected N x d rows, got {:?}", x.shape())));
    }
    x.dims2()
}

/// Binary directed K-NN graph: row `i` has ones at its `k` nearest other
/// nodes by Euclidean distance, ties broken towards the lower index.
pub fn knn_adjacency(x: &Tensor, k: usize) -> Result<Adjacency> {
    let (n, _) = rows(x)?;
    if k == 0 || k >= n {
        return Err(Error::invalid(format!("k must lie in [1, {}), got {k}", n)));
    }
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        let mut dist: Vec<(f64, usize)> = (0..n)
            .filter(|&j| j != i)
            .map(|j| {
                let d2: f64 = x
                    .row_slice(i)
                    .iter()
                    .zip(x.row_slice(j))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                (d2, j)
            })
            .collect();
        dist.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for &(_, j) in dist.iter().take(k) {
            out[i * n + j] = 1.0;
        }
    }
    Adjacency::new(Tensor::matrix(n, n, out)?, AdjacencyKind::Knn)
}

/// Absolute Pearson correlation between node feature rows.
pub fn pcc_adjacency(x: &Tensor) -> Result<Adjacency> {
    let (n, d) = rows(x)?;
    let mut centred = Vec::with_capacity(n);
    for i in 0..n {
        let row = x.row_slice(i);
        let mean = row.iter().sum::<f64>() / d as f64;
        let c: Vec<f64> = row.iter().map(|v| v - mean).collect();
        let ss: f64 = c.iter().map(|v| v * v).sum();
        if ss <= 0.0 {
            return Err(Error::ZeroVariance { row: i });
        }
        centred.push((c, ss.sqrt()));
    }
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        out[i * n + i] = 1.0;
        for j in 0..i {
            let (a, na) = &centred[i];
            let (b, nb) = &centred[j];
            let r: f64 = a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>() / (na * nb);
            let r = r.abs().min(1.0);
            out[i * n + j] = r;
            out[j * n + i] = r;
        }
    }
    Adjacency::new(Tensor::matrix(n, n, out)?, AdjacencyKind::Pcc)
}

/// Analytic signal by direct DFT: negative frequencies zeroed, positive ones
/// doubled, then inverse transformed.
fn analytic_signal(x: &[f64]) -> Vec<Complex64> {
    let d = x.len();
    let tau = 2.0 * std::f64::consts::PI / d as f64;
    let spectrum: Vec<Complex64> = (0..d)
        .map(|k| {
            x.iter()
                .enumerate()
                .map(|(n, &v)| v * Complex64::from_polar(1.0, -tau * (k * n % d) as f64))
                .sum()
        })
        .collect();
    let weight = |k: usize| -> f64 {
        if k == 0 || (d % 2 == 0 && k == d / 2) {
            1.0
        } else if k < d.div_ceil(2) {
            2.0
        } else {
            0.0
        }
    };
    (0..d)
        .map(|n| {
            spectrum
                .iter()
                .enumerate()
                .map(|(k, s)| s * weight(k) * Complex64::from_polar(1.0, tau * (k * n % d) as f64))
                .sum::<Complex64>()
                / d as f64
        })
        .collect()
}

/// Instantaneous phase of each sample of a real signal.
pub fn instantaneous_phase(x: &[f64]) -> Vec<f64> {
    analytic_signal(x).iter().map(|z| z.arg()).collect()
}

/// Phase locking value between raw signal rows (`N x D`, `D >= 4`).
pub fn plv_adjacency(s: &Tensor) -> Result<Adjacency> {
    let (n, d) = rows(s)?;
    if d < 4 {
        return Err(Error::invalid(format!("PLV needs at least 4 samples, got {d}")));
    }
    let mut phasors = Vec::with_capacity(n);
    for i in 0..n {
        let row = s.row_slice(i);
        let mean = row.iter().sum::<f64>() / d as f64;
        if row.iter().all(|v| (v - mean).abs() <= 1e-12 * mean.abs().max(1.0)) {
            return Err(Error::ConstantSignal { row: i });
        }
        let p: Vec<Complex64> = instantaneous_phase(row)
            .into_iter()
            .map(|phi| Complex64::from_polar(1.0, phi))
            .collect();
        phasors.push(p);
    }
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        out[i * n + i] = 1.0;
        for j in 0..i {
            let mean: Complex64 = phasors[i]
                .iter()
                .zip(&phasors[j])
                .map(|(a, b)| a * b.conj())
                .sum::<Complex64>()
                / d as f64;
            let v = mean.norm().min(1.0);
            out[i * n + j] = v;
            out[j * n + i] = v;
        }
    }
    Adjacency::new(Tensor::matrix(n, n, out)?, AdjacencyKind::Plv)
}
