//! Local data-distribution characterisation.
//!
//! Each participant pretrains a small Gaussian VAE on its own frames (an
//! `N x D` frame flattened to one `ND` point), summarises the shard as the
//! mean posterior mean `d`, and learns an estimator `g_theta` mapping `d` to
//! its guess `d_hat` of the global representation.

use serde::{Deserialize, Serialize};

use crate::diig::{shuffled_batches, Dense};
use crate::error::{Error, Result};
use crate::numerics::{xavier_uniform, Adam, AdamConfig, ParamSet, Tape, Tensor, Var};
use crate::rng::Rng;
use crate::synthdata::RawSequence;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RelevanceConfig {
    pub latent: usize,
    pub vae_hidden: usize,
    pub vae_epochs: usize,
    pub vae_batch_size: usize,
    pub estimator_hidden: usize,
}

impl Default for RelevanceConfig {
    fn default() -> Self {
        RelevanceConfig {
            latent: 8,
            vae_hidden: 32,
            vae_epochs: 30,
            vae_batch_size: 32,
            estimator_hidden: 16,
        }
    }
}

impl RelevanceConfig {
    pub fn validate(&self) -> Result<()> {
        for (key, v) in [
            ("latent", self.latent),
            ("vae_hidden", self.vae_hidden),
            ("vae_batch_size", self.vae_batch_size),
            ("estimator_hidden", self.estimator_hidden),
        ] {
            if v == 0 {
                return Err(Error::Config {
                    key: format!("relevance.{key}"),
                    message: "must be positive".into(),
                });
            }
        }
        Ok(())
    }
}

/// Every frame of every sequence as one row of a `P x ND` matrix.
pub fn shard_points(shard: &[&RawSequence]) -> Result<Tensor> {
    let first = shard.first().ok_or(Error::Empty("shard"))?;
    let shape = first.values.shape();
    let width = shape[1] * shape[2];
    let mut data = Vec::new();
    for s in shard {
        if s.values.shape()[1..] != shape[1..] {
            return Err(Error::DimensionMismatch(format!(
                "frame shape {:?} differs from {:?}",
                &s.values.shape()[1..],
                &shape[1..]
            )));
        }
        data.extend_from_slice(s.values.data());
    }
    Tensor::matrix(data.len() / width, width, data)
}

/// `KL(N(mu, exp(logvar)) || N(0, I))` for each row.
pub fn kl_divergence(mu: &Tensor, logvar: &Tensor) -> Result<Vec<f64>> {
    let (rows, cols) = mu.dims2()?;
    if logvar.shape() != mu.shape() {
        return Err(Error::shape("mu and logvar differ in shape"));
    }
    Ok((0..rows)
        .map(|r| {
            (0..cols)
                .map(|c| {
                    let (m, lv) = (mu.get(r, c), logvar.get(r, c));
                    -0.5 * (1.0 + lv - m * m - lv.exp())
                })
                .sum()
        })
        .collect())
}

fn dense_params(p: &mut ParamSet, name: &str, fan_in: usize, fan_out: usize, rng: &mut Rng) -> Result<()> {
    p.insert(format!("{name}.w"), xavier_uniform(&[fan_in, fan_out], rng)?);
    p.insert(format!("{name}.b"), Tensor::zeros(&[1, fan_out]));
    Ok(())
}

fn bind_dense(tape: &mut Tape, params: &ParamSet, name: &str) -> Result<Dense> {
    let w = format!("{name}.w");
    let b = format!("{name}.b");
    Ok(Dense {
        w: tape.param(w.clone(), params.require(&w)?.clone()),
        b: tape.param(b.clone(), params.require(&b)?.clone()),
    })
}

/// Gaussian VAE over flattened frames. Parameters live under `vae.`.
#[derive(Clone, Debug)]
pub struct Vae {
    pub input_dim: usize,
    pub latent: usize,
    pub hidden: usize,
}

struct VaeNet {
    enc: Dense,
    mu: Dense,
    logvar: Dense,
    dec: [Dense; 2],
}

impl Vae {
    pub fn new(input_dim: usize, cfg: &RelevanceConfig) -> Result<Self> {
        cfg.validate()?;
        if input_dim == 0 {
            return Err(Error::invalid("VAE input dimension must be positive"));
        }
        Ok(Vae {
            input_dim,
            latent: cfg.latent,
            hidden: cfg.vae_hidden,
        })
    }

    pub fn init_params(&self, rng: &mut Rng) -> Result<ParamSet> {
        let mut p = ParamSet::new();
        dense_params(&mut p, "vae.enc", self.input_dim, self.hidden, rng)?;
        dense_params(&mut p, "vae.mu", self.hidden, self.latent, rng)?;
        dense_params(&mut p, "vae.logvar", self.hidden, self.latent, rng)?;
        dense_params(&mut p, "vae.dec.0", self.latent, self.hidden, rng)?;
        dense_params(&mut p, "vae.dec.1", self.hidden, self.input_dim, rng)?;
        Ok(p)
    }

    fn bind(&self, tape: &mut Tape, params: &ParamSet) -> Result<VaeNet> {
        Ok(VaeNet {
            enc: bind_dense(tape, params, "vae.enc")?,
            mu: bind_dense(tape, params, "vae.mu")?,
            logvar: bind_dense(tape, params, "vae.logvar")?,
            dec: [
                bind_dense(tape, params, "vae.dec.0")?,
                bind_dense(tape, params, "vae.dec.1")?,
            ],
        })
    }

    fn check_input(&self, tape: &Tape, x: Var) -> Result<()> {
        let (_, d) = tape.value(x).dims2()?;
        if d != self.input_dim {
            return Err(Error::DimensionMismatch(format!(
                "VAE expects {}-dimensional points, got {d}",
                self.input_dim
            )));
        }
        Ok(())
    }

    fn encode_on(&self, tape: &mut Tape, net: &VaeNet, x: Var) -> Result<(Var, Var)> {
        self.check_input(tape, x)?;
        let h = net.enc.apply(tape, x)?;
        let h = tape.sigmoid(h)?;
        Ok((net.mu.apply(tape, h)?, net.logvar.apply(tape, h)?))
    }

    /// Negative ELBO of a batch: squared reconstruction error summed over each
    /// point plus the KL term, averaged over points. With `noise` the latent is
    /// sampled by reparameterisation; without it the decoder sees `mu`.
    fn loss_on(&self, tape: &mut Tape, net: &VaeNet, x: Var, noise: Option<Tensor>) -> Result<Var> {
        let (mu, logvar) = self.encode_on(tape, net, x)?;
        let z = match noise {
            Some(eps) => {
                let half = tape.scale(logvar, 0.5)?;
                let sd = tape.exp(half)?;
                let eps = tape.constant(eps);
                let spread = tape.mul(sd, eps)?;
                tape.add(mu, spread)?
            }
            None => mu,
        };
        let h = net.dec[0].apply(tape, z)?;
        let h = tape.sigmoid(h)?;
        let recon = net.dec[1].apply(tape, h)?;
        let diff = tape.sub(recon, x)?;
        let sq = tape.mul(diff, diff)?;
        let sq = tape.sum(sq)?;

        let (rows, cols) = tape.value(mu).dims2()?;
        let ones = tape.constant(Tensor::ones(&[rows, cols]));
        let mu_sq = tape.mul(mu, mu)?;
        let var = tape.exp(logvar)?;
        let kl = tape.add(ones, logvar)?;
        let kl = tape.sub(kl, mu_sq)?;
        let kl = tape.sub(kl, var)?;
        let kl = tape.sum(kl)?;
        let kl = tape.scale(kl, -0.5)?;

        let total = tape.add(sq, kl)?;
        tape.scale(total, 1.0 / rows as f64)
    }

    /// Negative ELBO of `points` using the posterior mean, for monitoring.
    pub fn loss(&self, params: &ParamSet, points: &Tensor) -> Result<f64> {
        let mut tape = Tape::new();
        let net = self.bind(&mut tape, params)?;
        let x = tape.constant(points.clone());
        let loss = self.loss_on(&mut tape, &net, x, None)?;
        Ok(tape.value(loss).data()[0])
    }

    /// Posterior means and log-variances, one row per point.
    pub fn encode(&self, params: &ParamSet, points: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let net = self.bind(&mut tape, params)?;
        let x = tape.constant(points.clone());
        let (mu, logvar) = self.encode_on(&mut tape, &net, x)?;
        Ok((tape.value(mu).clone(), tape.value(logvar).clone()))
    }

    /// Deterministic latent code of each point: the posterior mean.
    pub fn encode_latent(&self, params: &ParamSet, points: &Tensor) -> Result<Tensor> {
        Ok(self.encode(params, points)?.0)
    }

    /// Mean latent code over a shard's points, as a `1 x latent` row.
    pub fn local_distribution(&self, params: &ParamSet, points: &Tensor) -> Result<Tensor> {
        if points.dims2()?.0 == 0 {
            return Err(Error::Empty("shard"));
        }
        self.encode_latent(params, points)?.mean_rows()
    }

    /// Trains on `points` with Adam; returns the parameters and the mean
    /// training loss of each epoch.
    pub fn pretrain(
        &self,
        params: ParamSet,
        points: &Tensor,
        epochs: usize,
        batch_size: usize,
        adam: AdamConfig,
        rng: &mut Rng,
    ) -> Result<(ParamSet, Vec<f64>)> {
        let (rows, cols) = points.dims2()?;
        if rows == 0 {
            return Err(Error::Empty("shard"));
        }
        if cols != self.input_dim {
            return Err(Error::DimensionMismatch(format!(
                "VAE expects {}-dimensional points, got {cols}",
                self.input_dim
            )));
        }
        let mut params = params;
        let mut opt = Adam::new(adam);
        let order: Vec<usize> = (0..rows).collect();
        let mut history = Vec::with_capacity(epochs);
        for _ in 0..epochs {
            let batches = shuffled_batches(&order, batch_size, rng);
            let mut sum = 0.0;
            for batch in &batches {
                let rows_data: Vec<&[f64]> = batch.iter().map(|&r| points.row_slice(r)).collect();
                let x = Tensor::from_rows(&rows_data)?;
                let eps = standard_normal(batch.len(), self.latent, rng)?;
                let mut tape = Tape::new();
                let net = self.bind(&mut tape, &params)?;
                let x = tape.constant(x);
                let loss = self.loss_on(&mut tape, &net, x, Some(eps))?;
                sum += tape.value(loss).data()[0];
                let grads = tape.backward(loss)?;
                opt.step(&mut params, grads.named())?;
            }
            history.push(sum / batches.len() as f64);
        }
        Ok((params, history))
    }
}

fn standard_normal(rows: usize, cols: usize, rng: &mut Rng) -> Result<Tensor> {
    use rand_distr::{Distribution, StandardNormal};
    let data = (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::matrix(rows, cols, data)
}

/// Global-distribution estimator `g_theta`: dense, sigmoid, dense. Parameters
/// live under `est.`.
#[derive(Clone, Debug)]
pub struct Estimator {
    pub latent: usize,
    pub hidden: usize,
}

impl Estimator {
    pub fn new(cfg: &RelevanceConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Estimator {
            latent: cfg.latent,
            hidden: cfg.estimator_hidden,
        })
    }

    pub fn init_params(&self, rng: &mut Rng) -> Result<ParamSet> {
        let mut p = ParamSet::new();
        dense_params(&mut p, "est.0", self.latent, self.hidden, rng)?;
        dense_params(&mut p, "est.1", self.hidden, self.latent, rng)?;
        Ok(p)
    }

    fn forward_on(&self, tape: &mut Tape, theta: &ParamSet, d: &Tensor) -> Result<Var> {
        if d.shape() != [1, self.latent] {
            return Err(Error::DimensionMismatch(format!(
                "estimator expects a 1 x {} row, got {:?}",
                self.latent,
                d.shape()
            )));
        }
        let l0 = bind_dense(tape, theta, "est.0")?;
        let l1 = bind_dense(tape, theta, "est.1")?;
        let x = tape.constant(d.clone());
        let h = l0.apply(tape, x)?;
        let h = tape.sigmoid(h)?;
        l1.apply(tape, h)
    }

    /// `d_hat = g_theta(d)`.
    pub fn estimate_global(&self, d: &Tensor, theta: &ParamSet) -> Result<Tensor> {
        let mut tape = Tape::new();
        let out = self.forward_on(&mut tape, theta, d)?;
        Ok(tape.value(out).clone())
    }

    /// `MSE(g_theta(d), d_tilde)` and its gradient for every estimator weight.
    pub fn alignment_gradients(&self, d: &Tensor, d_tilde: &Tensor, theta: &ParamSet) -> Result<(f64, ParamSet)> {
        if d_tilde.shape() != [1, self.latent] {
            return Err(Error::DimensionMismatch(format!(
                "global representation has shape {:?}",
                d_tilde.shape()
            )));
        }
        let mut tape = Tape::new();
        let out = self.forward_on(&mut tape, theta, d)?;
        let target = tape.constant(d_tilde.clone());
        let loss = tape.mse(out, target)?;
        let grads = tape.backward(loss)?;
        Ok((tape.value(loss).data()[0], grads.into_named()))
    }
}

/// Finite-difference checks of the encoder, the full negative ELBO and the
/// estimator alignment loss on small random inputs.
pub fn gradient_checks(seed: u64) -> Result<Vec<(&'static str, crate::numerics::GradCheckReport)>> {
    use crate::numerics::check_tape;
    use rand::SeedableRng;
    let mut rng = Rng::seed_from_u64(seed);
    let cfg = RelevanceConfig {
        latent: 3,
        vae_hidden: 5,
        estimator_hidden: 4,
        ..RelevanceConfig::default()
    };
    let vae = Vae::new(4, &cfg)?;
    let phi = vae.init_params(&mut rng)?;
    let x = standard_normal(3, 4, &mut rng)?;
    let eps = standard_normal(3, 3, &mut rng)?;
    let target = standard_normal(3, 3, &mut rng)?;
    let mut out = Vec::new();

    let mut tape = Tape::new();
    let net = vae.bind(&mut tape, &phi)?;
    let xv = tape.constant(x.clone());
    let (mu, _) = vae.encode_on(&mut tape, &net, xv)?;
    let t = tape.constant(target);
    let loss = tape.mse(mu, t)?;
    out.push(("vae_encoder", check_tape(&mut tape, loss)?));

    let mut tape = Tape::new();
    let net = vae.bind(&mut tape, &phi)?;
    let xv = tape.constant(x);
    let loss = vae.loss_on(&mut tape, &net, xv, Some(eps))?;
    out.push(("vae_elbo", check_tape(&mut tape, loss)?));

    let est = Estimator::new(&cfg)?;
    let theta = est.init_params(&mut rng)?;
    let d = standard_normal(1, 3, &mut rng)?;
    let d_tilde = standard_normal(1, 3, &mut rng)?;
    let mut tape = Tape::new();
    let y = est.forward_on(&mut tape, &theta, &d)?;
    let t = tape.constant(d_tilde);
    let loss = tape.mse(y, t)?;
    out.push(("estimator", check_tape(&mut tape, loss)?));
    Ok(out)
}
