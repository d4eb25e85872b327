//! Experiment configuration, data preparation and orchestration.
//!
//! A config file is TOML. Only `seed` is required; every other key falls
//! back to the defaults below. Unknown keys are rejected.
//!
//! ```toml
//! seed = 7
//! mode = "fedrel"            # fedrel | fedavg | fedp | fedatt | central
//!
//! [data]
//! # path = "data.frds"       # load instead of generating
//! train_fraction = 0.8
//! dirichlet_alpha = 0.5
//! transform_epochs = 3
//! [data.generator]           # sequences = 400, steps = 8, channels = 6, ...
//!
//! [model]                    # window = 2, layers = 2, dropout = 0.3, ...
//! [federation]               # participants = 3, rounds = 150, batch_size = 8, learning_rate = 1.5e-3, ...
//! [federation.relevance]     # latent = 8, vae_hidden = 32, vae_epochs = 30, ...
//!
//! [output]
//! # metrics = "metrics.jsonl"
//! # checkpoint = "model.frpm"
//! ```

pub mod metrics;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use metrics::{
    classification_metrics, evaluate, read_metrics, Evaluation, MetricsHeader, MetricsWriter, RoundMetrics,
    METRICS_SCHEMA,
};

use crate::diig::{self, pretrain_transform, save_params, transform_params, Diig, ModelConfig, Sample};
use crate::error::{Error, Result};
use crate::federation::{self, FedConfig, FederatedData, Mode, RunResult, Shard};
use crate::numerics::{op_suite, GradCheckReport, ParamSet};
use crate::relevance::{self, shard_points};
use crate::rng::{stream, Stream};
use crate::synthdata::{generate, load_dataset, partition_noniid, train_test_split, Dataset, GeneratorConfig, PartitionSpec, RawSequence};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Dataset container to load; the generator settings are ignored when set.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    pub generator: GeneratorConfig,
    pub train_fraction: f64,
    pub dirichlet_alpha: f64,
    /// Epochs of feature-transform pretraining on the training pool.
    pub transform_epochs: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            path: None,
            generator: GeneratorConfig::default(),
            train_fraction: 0.8,
            dirichlet_alpha: 0.5,
            transform_epochs: 3,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metrics: Option<PathBuf>,
    /// Final global model plus the feature transform.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    #[serde(default)]
    pub mode: Mode,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub federation: FedConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

impl ExperimentConfig {
    pub fn new(seed: u64) -> Self {
        ExperimentConfig {
            seed,
            mode: Mode::default(),
            data: DataConfig::default(),
            model: ModelConfig::default(),
            federation: FedConfig::default(),
            output: OutputConfig::default(),
        }
    }

    /// Federation settings with the run's mode and seed filled in.
    pub fn fed_config(&self) -> FedConfig {
        FedConfig {
            mode: self.mode,
            seed: self.seed,
            ..self.federation.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.fed_config().validate()?;
        let bad = |key: &str, message: String| Err(Error::Config { key: key.into(), message });
        if let Some(path) = &self.data.path {
            if !path.is_file() {
                return bad("data.path", format!("{} does not exist", path.display()));
            }
        } else {
            self.data.generator.validate().map_err(|e| Error::Config {
                key: "data.generator".into(),
                message: e.to_string(),
            })?;
            if self.data.generator.classes != self.model.classes {
                return bad(
                    "model.classes",
                    format!("model has {} classes, generator {}", self.model.classes, self.data.generator.classes),
                );
            }
            if self.data.generator.steps <= self.model.window {
                return bad("model.window", format!("window must be shorter than {} steps", self.data.generator.steps));
            }
            let train = (self.data.generator.sequences as f64 * self.data.train_fraction) as usize;
            if train < self.federation.participants {
                return bad(
                    "data.generator.sequences",
                    format!("about {train} training sequences cannot cover {} participants", self.federation.participants),
                );
            }
        }
        if !(self.data.train_fraction > 0.0 && self.data.train_fraction < 1.0) {
            return bad("data.train_fraction", "must lie in (0, 1)".into());
        }
        if !(self.data.dirichlet_alpha > 0.0 && self.data.dirichlet_alpha.is_finite()) {
            return bad("data.dirichlet_alpha", "must be positive".into());
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::invalid(format!("serialising config: {e}")))
    }
}

fn config_error(err: serde_path_to_error::Error<toml::de::Error>) -> Error {
    let path = err.path().to_string();
    let inner = err.into_inner();
    let message = inner.message().to_string();
    // A missing field is reported at its parent table; name the key itself.
    let field = ["missing field `", "unknown field `"]
        .iter()
        .find_map(|p| message.strip_prefix(p))
        .and_then(|rest| rest.split('`').next());
    let key = match (path.as_str(), field) {
        (".", Some(f)) => f.to_string(),
        (p, Some(f)) if p != f && !p.ends_with(&format!(".{f}")) => format!("{p}.{f}"),
        (p, _) => p.to_string(),
    };
    Error::Config { key, message }
}

pub fn parse_config_str(text: &str) -> Result<ExperimentConfig> {
    let de = toml::Deserializer::parse(text).map_err(|e| Error::Config {
        key: String::new(),
        message: e.to_string(),
    })?;
    let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(config_error)?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config(path: impl AsRef<Path>) -> Result<ExperimentConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config_str(&text)
}

/// Everything a run needs, derived deterministically from the config.
#[derive(Clone, Debug)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub dataset: Dataset,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    /// Training-pool indices held by each participant.
    pub shards: Vec<Vec<usize>>,
    pub transform: ParamSet,
    pub data: FederatedData,
}

pub fn load_or_generate(cfg: &ExperimentConfig) -> Result<Dataset> {
    let ds = match &cfg.data.path {
        Some(path) => load_dataset(path)?,
        None => generate(&cfg.data.generator, cfg.seed)?,
    };
    if ds.classes != cfg.model.classes {
        return Err(Error::Config {
            key: "model.classes".into(),
            message: format!("dataset has {} classes, model {}", ds.classes, cfg.model.classes),
        });
    }
    Ok(ds)
}

/// Builds the dataset, split, partition and features. The feature transform
/// is pretrained on the training pool unless `transform` is given.
pub fn prepare(cfg: &ExperimentConfig, transform: Option<ParamSet>) -> Result<Experiment> {
    cfg.validate()?;
    let dataset = load_or_generate(cfg)?;
    let model = Diig::new(cfg.model.clone())?;
    let (train, test) = train_test_split(dataset.len(), cfg.data.train_fraction, cfg.seed)?;
    let shards = partition_noniid(
        &dataset,
        &train,
        &PartitionSpec {
            participants: cfg.federation.participants,
            alpha: cfg.data.dirichlet_alpha,
            seed: cfg.seed,
        },
    )?;
    let raw = |idx: &[usize]| -> Vec<&RawSequence> { idx.iter().map(|&i| &dataset.sequences[i]).collect() };

    let transform = match transform {
        Some(t) => t,
        None => {
            let mut rng = stream(cfg.seed, Stream::TransformPretrain, 0);
            let m = &cfg.model;
            let init = transform_params(dataset.signal_dim, m.transform_hidden, m.feature_dim, &mut rng)?;
            let head = model.init_params(&mut rng)?;
            pretrain_transform(
                &model,
                init,
                head,
                &raw(&train),
                cfg.data.transform_epochs,
                cfg.federation.batch_size,
                cfg.fed_config().adam(),
                &mut rng,
            )?
        }
    };
    let samples = |idx: &[usize]| -> Result<Vec<Sample>> {
        idx.iter()
            .map(|&i| Sample::from_raw(&model, &dataset.sequences[i], &transform))
            .collect()
    };
    let fed_shards = shards
        .iter()
        .map(|idx| {
            Ok(Shard {
                samples: samples(idx)?,
                points: shard_points(&raw(idx))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let data = FederatedData {
        model: model.clone(),
        shards: fed_shards,
        test: samples(&test)?,
    };
    Ok(Experiment {
        config: cfg.clone(),
        dataset,
        train,
        test,
        shards,
        transform,
        data,
    })
}

/// Runs the configured mode, streaming metrics to `output.metrics` and
/// saving `output.checkpoint` when set. `on_round` sees every round.
pub fn run_experiment(cfg: &ExperimentConfig, mut on_round: impl FnMut(&RoundMetrics)) -> Result<RunResult> {
    let exp = prepare(cfg, None)?;
    let mut writer = match &cfg.output.metrics {
        Some(path) => Some(MetricsWriter::create(path, &MetricsHeader::new(cfg.seed, cfg)?)?),
        None => None,
    };
    let result = federation::run(&cfg.fed_config(), &exp.data, |m| {
        on_round(m);
        match writer.as_mut() {
            Some(w) => w.append(m),
            None => Ok(()),
        }
    })?;
    if let Some(path) = &cfg.output.checkpoint {
        let mut all = result.params.clone();
        all.extend(exp.transform.clone());
        save_params(&all, path)?;
    }
    Ok(result)
}

/// Scores a checkpoint written by [`run_experiment`] on the config's test split.
pub fn evaluate_checkpoint(cfg: &ExperimentConfig, checkpoint: impl AsRef<Path>) -> Result<Evaluation> {
    let params = diig::load_params(checkpoint)?;
    let transform = params.with_prefix(diig::TRANSFORM_PREFIX);
    let exp = prepare(cfg, Some(transform))?;
    exp.data.model.check_params(&params)?;
    evaluate(&exp.data.model, &params, &exp.data.test)
}

/// The finite-difference suite: every tape operation, the feature transform
/// with a full DIIG forward pass, and the distribution encoder and estimator.
pub fn gradcheck_suite(seed: u64) -> Result<Vec<(String, GradCheckReport)>> {
    let mut out: Vec<(String, GradCheckReport)> = op_suite(seed)?
        .into_iter()
        .map(|(n, r)| (format!("op/{n}"), r))
        .collect();
    for (n, r) in diig::gradient_checks(seed)? {
        out.push((format!("model/{n}"), r));
    }
    for (n, r) in relevance::gradient_checks(seed)? {
        out.push((format!("relevance/{n}"), r));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub participants: usize,
    pub mode: String,
    pub best_macro_f1: f64,
    pub best_acc: f64,
    pub final_loss: f64,
    pub rounds: usize,
}

/// Runs every mode for each participant count on one dataset and seed.
pub fn compare(cfg: &ExperimentConfig, participant_counts: &[usize], mut progress: impl FnMut(&ComparisonRow)) -> Result<Vec<ComparisonRow>> {
    let mut rows = Vec::new();
    for &k in participant_counts {
        let mut c = cfg.clone();
        c.federation.participants = k;
        let exp = prepare(&c, None)?;
        for mode in Mode::ALL {
            let result = federation::run(&FedConfig { mode, ..c.fed_config() }, &exp.data, |_| Ok(()))?;
            let row = ComparisonRow {
                participants: k,
                mode: mode.to_string(),
                best_macro_f1: result.best_macro_f1(),
                best_acc: result.metrics.iter().map(|m| m.global_acc).fold(0.0, f64::max),
                final_loss: result.metrics.last().map_or(f64::NAN, |m| m.global_loss),
                rounds: result.metrics.len(),
            };
            progress(&row);
            rows.push(row);
        }
    }
    Ok(rows)
}

pub fn comparison_csv(rows: &[ComparisonRow]) -> String {
    let mut out = String::from("participants,mode,best_macro_f1,best_acc,final_loss,rounds\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{:.6},{:.6},{:.6},{}\n",
            r.participants, r.mode, r.best_macro_f1, r.best_acc, r.final_loss, r.rounds
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_takes_documented_defaults() {
        let cfg = parse_config_str("seed = 3\nmode = \"fedavg\"\n").unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.mode, Mode::Fedavg);
        assert_eq!(cfg.federation.learning_rate, 1.5e-3);
        assert_eq!(cfg.model.dropout, 0.3);
        assert_eq!(cfg.federation.rounds, 150);
        assert_eq!(cfg.model.layers, 2);
        assert_eq!(cfg.federation.batch_size, 8);
        assert_eq!(cfg.model.readout_hidden, vec![32, 64]);
        assert_eq!(cfg.model.node_emb, 32);
        assert_eq!(cfg.model.graph_emb, 64);
        assert_eq!(cfg.federation.fedp_fraction, 0.6);
        assert_eq!(cfg.federation.fedatt_epsilon, 1.5e-3);
    }

    fn key_of(text: &str) -> String {
        match parse_config_str(text) {
            Err(Error::Config { key, .. }) => key,
            other => panic!("expected a config error, got {other:?}"),
        }
    }

    #[test]
    fn errors_name_the_key() {
        assert_eq!(key_of("seed = 1\nfoo = 2\n"), "foo");
        assert_eq!(key_of("seed = 1\n[model]\nfoo = 2\n"), "model.foo");
        assert_eq!(key_of("mode = \"fedavg\"\n"), "seed");
        assert_eq!(key_of("seed = 1\n[model]\nwindow = \"two\"\n"), "model.window");
        assert_eq!(key_of("seed = 1\n[federation]\nrounds = 0\n"), "federation.rounds");
        assert_eq!(key_of("seed = 1\n[data]\npath = \"/nonexistent/x.frds\"\n"), "data.path");
        assert!(matches!(parse_config_str("seed = 1\nmode = \"fedx\"\n"), Err(Error::Config { .. })));
    }

    #[test]
    fn config_round_trips() {
        let mut cfg = parse_config_str("seed = 9\n[model]\nwindow = 3\n").unwrap();
        assert_eq!(cfg.model.window, 3);
        cfg.output.metrics = Some("m.jsonl".into());
        let text = cfg.to_toml().unwrap();
        assert_eq!(parse_config_str(&text).unwrap(), cfg);
    }

    #[test]
    fn comparison_csv_has_one_line_per_row() {
        let rows = vec![ComparisonRow {
            participants: 2,
            mode: "fedavg".into(),
            best_macro_f1: 0.5,
            best_acc: 0.6,
            final_loss: 1.0,
            rounds: 3,
        }];
        let csv = comparison_csv(&rows);
        assert_eq!(csv.lines().count(), 2);
        assert!(csv.lines().nth(1).unwrap().starts_with("2,fedavg,0.500000"));
    }
}
