//! The simulated federated protocol.
//!
//! Every round is synchronous: the server sends a [`Download`] to each active
//! participant, participants train locally (concurrently when enabled), and
//! their [`Upload`]s are aggregated in participant-id order. Each participant
//! owns its model copy, optimizers and RNG stream, so the result does not
//! depend on scheduling.

mod aggregate;
mod participant;

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::index::sample as sample_indices;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use aggregate::{aggregate_weights, fedatt_step, relevance_scores, softmax_scores, synthesize_global};
pub use participant::{DistributionState, LocalOutcome, Participant};

use crate::diig::{Diig, Sample};
use crate::error::{Error, Result};
use crate::harness::metrics::{evaluate, RoundMetrics};
use crate::numerics::{AdamConfig, ParamSet, Tensor, DEFAULT_LEARNING_RATE};
use crate::relevance::RelevanceConfig;
use crate::rng::{stream, Stream};

/// Largest tolerated deviation of the aggregation weights' sum from 1.
pub const WEIGHT_SUM_TOLERANCE: f64 = 1e-9;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Fedrel,
    Fedavg,
    Fedp,
    Fedatt,
    Central,
}

impl Mode {
    pub const ALL: [Mode; 5] = [Mode::Fedrel, Mode::Fedavg, Mode::Fedp, Mode::Fedatt, Mode::Central];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Fedrel => "fedrel",
            Mode::Fedavg => "fedavg",
            Mode::Fedp => "fedp",
            Mode::Fedatt => "fedatt",
            Mode::Central => "central",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Mode> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::UnknownMode(s.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FedConfig {
    /// Set from the experiment's top-level mode.
    #[serde(skip)]
    pub mode: Mode,
    /// Number of participants `K`.
    pub participants: usize,
    pub rounds: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Share of participants sampled each round in `fedp` mode.
    pub fedp_fraction: f64,
    /// Server step size in `fedatt` mode.
    pub fedatt_epsilon: f64,
    /// Run participants' local rounds on the rayon pool.
    pub parallel: bool,
    /// Give every participant the same RNG streams instead of one per id.
    pub shared_participant_seed: bool,
    /// Record each round's wall-clock time in the metrics.
    pub record_wall_clock: bool,
    pub relevance: RelevanceConfig,
    /// Run seed; set from the experiment seed.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for FedConfig {
    fn default() -> Self {
        FedConfig {
            mode: Mode::Fedrel,
            participants: 3,
            rounds: 150,
            local_epochs: 1,
            batch_size: 8,
            learning_rate: DEFAULT_LEARNING_RATE,
            fedp_fraction: 0.6,
            fedatt_epsilon: 1.5e-3,
            parallel: true,
            shared_participant_seed: false,
            record_wall_clock: false,
            relevance: RelevanceConfig::default(),
            seed: 0,
        }
    }
}

impl FedConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, message: &str| {
            Err(Error::Config {
                key: format!("federation.{key}"),
                message: message.into(),
            })
        };
        if self.participants == 0 {
            return bad("participants", "must be at least 1");
        }
        if self.rounds == 0 {
            return bad("rounds", "must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate", "must be positive");
        }
        if !(self.fedp_fraction > 0.0 && self.fedp_fraction <= 1.0) {
            return bad("fedp_fraction", "must lie in (0, 1]");
        }
        if !(self.fedatt_epsilon > 0.0 && self.fedatt_epsilon.is_finite()) {
            return bad("fedatt_epsilon", "must be positive");
        }
        self.relevance.validate()
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.learning_rate,
            ..AdamConfig::default()
        }
    }

    /// Participants drawn per round in `fedp` mode.
    pub fn fedp_count(&self) -> usize {
        ((self.fedp_fraction * self.participants as f64).ceil() as usize).clamp(1, self.participants)
    }
}

/// One participant's private data.
#[derive(Clone, Debug)]
pub struct Shard {
    pub samples: Vec<Sample>,
    /// Flattened frames (`P x ND`) for the distribution encoder.
    pub points: Tensor,
}

#[derive(Clone, Debug)]
pub struct FederatedData {
    pub model: Diig,
    pub shards: Vec<Shard>,
    /// Global test set, scored every round.
    pub test: Vec<Sample>,
}

/// Server-to-participant message.
#[derive(Clone, Debug)]
pub struct Download {
    pub round: usize,
    pub params: ParamSet,
    pub d_tilde: Option<Tensor>,
}

/// Participant-to-server message. `theta` is carried as the protocol
/// prescribes but the server never aggregates it.
#[derive(Clone, Debug)]
pub struct Upload {
    pub round: usize,
    pub participant: usize,
    pub params: ParamSet,
    pub theta: Option<ParamSet>,
    pub d_hat: Option<Tensor>,
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub metrics: Vec<RoundMetrics>,
    pub params: ParamSet,
}

impl RunResult {
    pub fn best_macro_f1(&self) -> f64 {
        self.metrics.iter().map(|m| m.global_macro_f1).fold(f64::NEG_INFINITY, f64::max)
    }
}

pub fn run_fedrel(cfg: &FedConfig, data: &FederatedData, sink: impl FnMut(&RoundMetrics) -> Result<()>) -> Result<RunResult> {
    run(&FedConfig { mode: Mode::Fedrel, ..cfg.clone() }, data, sink)
}

pub fn run_baseline(
    mode: &str,
    cfg: &FedConfig,
    data: &FederatedData,
    sink: impl FnMut(&RoundMetrics) -> Result<()>,
) -> Result<RunResult> {
    let mode: Mode = mode.parse()?;
    if mode == Mode::Fedrel {
        return Err(Error::UnknownMode("fedrel is not a baseline".into()));
    }
    run(&FedConfig { mode, ..cfg.clone() }, data, sink)
}

fn pooled(data: &FederatedData) -> Result<Shard> {
    let samples: Vec<Sample> = data.shards.iter().flat_map(|s| s.samples.iter().cloned()).collect();
    let parts: Vec<&Tensor> = data.shards.iter().map(|s| &s.points).collect();
    let width = parts.first().ok_or(Error::Empty("shards"))?.dims2()?.1;
    let rows: usize = parts.iter().map(|p| p.shape()[0]).sum();
    let values = parts.iter().flat_map(|p| p.data().iter().copied()).collect();
    Ok(Shard {
        samples,
        points: Tensor::matrix(rows, width, values)?,
    })
}

fn check_weights(r: &[f64]) -> Result<()> {
    let sum: f64 = r.iter().sum();
    if (sum - 1.0).abs() > WEIGHT_SUM_TOLERANCE || r.iter().any(|w| !(*w >= 0.0)) {
        return Err(Error::invalid(format!("aggregation weights {r:?} do not form a distribution")));
    }
    Ok(())
}

/// Runs `cfg.rounds` communication rounds in `cfg.mode`, passing each round's
/// metrics to `sink` as soon as they are known.
pub fn run(cfg: &FedConfig, data: &FederatedData, mut sink: impl FnMut(&RoundMetrics) -> Result<()>) -> Result<RunResult> {
    cfg.validate()?;
    if data.test.is_empty() {
        return Err(Error::Empty("test set"));
    }
    let central;
    let shards: Vec<&Shard> = if cfg.mode == Mode::Central {
        central = pooled(data)?;
        vec![&central]
    } else {
        if data.shards.len() != cfg.participants {
            return Err(Error::invalid(format!(
                "{} shards for {} participants",
                data.shards.len(),
                cfg.participants
            )));
        }
        data.shards.iter().collect()
    };
    if let Some(k) = shards.iter().position(|s| s.samples.is_empty()) {
        return Err(Error::invalid(format!("participant {k} has an empty shard")));
    }
    let model = &data.model;
    let mut global = model.init_params(&mut stream(cfg.seed, Stream::ModelInit, 0))?;

    let mut participants: Vec<Participant> = (0..shards.len())
        .map(|id| Participant::new(id, cfg, global.clone()))
        .collect();
    if cfg.mode == Mode::Fedrel {
        let setup = |p: &mut Participant| {
            p.init_distribution(cfg, &shards[p.id].points)
                .map_err(|e| participant_error(0, p.id, e))
        };
        if cfg.parallel {
            participants.par_iter_mut().try_for_each(setup)?;
        } else {
            participants.iter_mut().try_for_each(setup)?;
        }
    }

    let mut server_rng = stream(cfg.seed, Stream::Server, 0);
    let k = participants.len();
    let mut metrics = Vec::with_capacity(cfg.rounds);
    for round in 1..=cfg.rounds {
        let started = Instant::now();

        // Relevance is scored from the estimates held at the start of the
        // round; the same synthesis is sent down as the alignment target.
        let (d_tilde, fedrel_weights) = if cfg.mode == Mode::Fedrel {
            let d_hats = participants
                .iter()
                .map(|p| p.d_hat().cloned().ok_or(Error::Empty("distribution estimate")))
                .collect::<Result<Vec<_>>>()?;
            let d_tilde = synthesize_global(&d_hats)?;
            let r = relevance_scores(&d_hats, &d_tilde)?;
            (Some(d_tilde), Some(r))
        } else {
            (None, None)
        };

        let active: Vec<usize> = match cfg.mode {
            Mode::Fedp => {
                let mut picked = sample_indices(&mut server_rng, k, cfg.fedp_count()).into_vec();
                picked.sort_unstable();
                picked
            }
            _ => (0..k).collect(),
        };

        let download = Download {
            round,
            params: global.clone(),
            d_tilde,
        };
        let train = |p: &mut Participant| -> Result<Upload> {
            p.local_update(model, &shards[p.id].samples, &download, cfg)
                .map_err(|e| participant_error(round, p.id, e))?;
            Ok(p.upload(round))
        };
        let mut selected: Vec<&mut Participant> = participants
            .iter_mut()
            .filter(|p| active.binary_search(&p.id).is_ok())
            .collect();
        let uploads: Vec<Upload> = if cfg.parallel {
            selected.par_iter_mut().map(|p| train(p)).collect::<Result<_>>()?
        } else {
            selected.iter_mut().map(|p| train(p)).collect::<Result<_>>()?
        };
        let params: Vec<&ParamSet> = uploads.iter().map(|u| &u.params).collect();

        let relevance = match cfg.mode {
            Mode::Fedrel => {
                let r = fedrel_weights.expect("computed above");
                global = aggregate_weights(&params, &r)?;
                r
            }
            Mode::Fedavg | Mode::Central => {
                let r = vec![1.0 / k as f64; k];
                global = aggregate_weights(&params, &r)?;
                r
            }
            Mode::Fedp => {
                let share = 1.0 / active.len() as f64;
                global = aggregate_weights(&params, &vec![share; active.len()])?;
                let mut r = vec![0.0; k];
                for &i in &active {
                    r[i] = share;
                }
                r
            }
            Mode::Fedatt => {
                let (next, r) = fedatt_step(&global, &params, cfg.fedatt_epsilon)?;
                global = next;
                r
            }
        };
        check_weights(&relevance)?;

        let eval = evaluate(model, &global, &data.test)?;
        if !eval.loss.is_finite() {
            return Err(Error::NonFinite(format!("global test loss at round {round}")));
        }
        let m = RoundMetrics {
            round,
            mode: cfg.mode.to_string(),
            global_loss: eval.loss,
            global_acc: eval.accuracy,
            global_macro_f1: eval.macro_f1,
            relevance,
            wall_ms: cfg.record_wall_clock.then(|| started.elapsed().as_millis() as u64),
        };
        sink(&m)?;
        metrics.push(m);
    }
    Ok(RunResult { metrics, params: global })
}

fn participant_error(round: usize, participant: usize, source: Error) -> Error {
    Error::Participant {
        round,
        participant,
        source: Box::new(source),
    }
}
