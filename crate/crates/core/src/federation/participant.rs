use super::{Download, FedConfig, Upload};
use crate::diig::{batch_gradients, shuffled_batches, window_refs, Diig, Sample};
use crate::error::{Error, Result};
use crate::numerics::{Adam, ParamSet, Tensor};
use crate::relevance::{Estimator, Vae};
use crate::rng::{stream, Rng, Stream};

/// A participant's distribution summary and estimator.
#[derive(Clone, Debug)]
pub struct DistributionState {
    /// Frozen encoder weights.
    pub vae: ParamSet,
    pub d: Tensor,
    pub d_hat: Tensor,
    pub theta: ParamSet,
    estimator: Estimator,
    theta_adam: Adam,
}

#[derive(Clone, Debug)]
pub struct Participant {
    pub id: usize,
    pub params: ParamSet,
    pub adam: Adam,
    pub distribution: Option<DistributionState>,
    rng: Rng,
    stream_index: u64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LocalOutcome {
    /// Mean classification loss over the local batches.
    pub loss: f64,
    /// Alignment error `MSE(d_hat, d_tilde)` at the last batch.
    pub alignment: f64,
    pub batches: usize,
}

impl Participant {
    pub fn new(id: usize, cfg: &FedConfig, params: ParamSet) -> Self {
        let stream_index = if cfg.shared_participant_seed { 0 } else { id as u64 };
        Participant {
            id,
            params,
            adam: Adam::new(cfg.adam()),
            distribution: None,
            rng: stream(cfg.seed, Stream::ParticipantTrain, stream_index),
            stream_index,
        }
    }

    /// Pretrains the encoder on `points`, summarises the shard and
    /// initialises the estimator.
    pub fn init_distribution(&mut self, cfg: &FedConfig, points: &Tensor) -> Result<()> {
        let rc = &cfg.relevance;
        let vae = Vae::new(points.dims2()?.1, rc)?;
        let mut rng = stream(cfg.seed, Stream::ParticipantVae, self.stream_index);
        let phi = vae.init_params(&mut rng)?;
        let (phi, _) = vae.pretrain(phi, points, rc.vae_epochs, rc.vae_batch_size, cfg.adam(), &mut rng)?;
        let d = vae.local_distribution(&phi, points)?;
        let estimator = Estimator::new(rc)?;
        let theta = estimator.init_params(&mut stream(cfg.seed, Stream::ParticipantEstimator, self.stream_index))?;
        let d_hat = estimator.estimate_global(&d, &theta)?;
        self.distribution = Some(DistributionState {
            vae: phi,
            d,
            d_hat,
            theta,
            estimator,
            theta_adam: Adam::new(cfg.adam()),
        });
        Ok(())
    }

    pub fn d_hat(&self) -> Option<&Tensor> {
        self.distribution.as_ref().map(|s| &s.d_hat)
    }

    /// Starts from the downloaded model and trains on `samples` for
    /// `cfg.local_epochs` epochs. When the download carries a global
    /// representation, every batch also takes one Adam step of the estimator
    /// on `MSE(g_theta(d), d_tilde)`; that term does not depend on the model
    /// weights, so their gradient is the classification gradient alone.
    pub fn local_update(&mut self, model: &Diig, samples: &[Sample], download: &Download, cfg: &FedConfig) -> Result<LocalOutcome> {
        self.params = download.params.clone();
        let refs = window_refs(samples, model.config.window);
        if refs.is_empty() {
            return Err(Error::Empty("local training windows"));
        }
        let mut outcome = LocalOutcome::default();
        let mut loss_sum = 0.0;
        for _ in 0..cfg.local_epochs {
            for batch in shuffled_batches(&refs, cfg.batch_size, &mut self.rng) {
                let (loss, grads) = batch_gradients(model, &self.params, samples, &batch, Some(&mut self.rng))?;
                self.adam.step(&mut self.params, &grads)?;
                loss_sum += loss;
                outcome.batches += 1;
                if let (Some(state), Some(d_tilde)) = (self.distribution.as_mut(), download.d_tilde.as_ref()) {
                    let (mse, g) = state.estimator.alignment_gradients(&state.d, d_tilde, &state.theta)?;
                    state.theta_adam.step(&mut state.theta, &g)?;
                    outcome.alignment = mse;
                }
            }
        }
        if outcome.batches > 0 {
            outcome.loss = loss_sum / outcome.batches as f64;
        }
        if let Some(state) = self.distribution.as_mut() {
            state.d_hat = state.estimator.estimate_global(&state.d, &state.theta)?;
        }
        if !self.params.is_finite() {
            return Err(Error::NonFinite("local model update".into()));
        }
        Ok(outcome)
    }

    pub fn upload(&self, round: usize) -> Upload {
        Upload {
            round,
            participant: self.id,
            params: self.params.clone(),
            theta: self.distribution.as_ref().map(|s| s.theta.clone()),
            d_hat: self.d_hat().cloned(),
        }
    }
}
