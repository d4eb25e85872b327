//! The Dynamic Inter-Intra Graph classifier.
//!
//! Each time step is a spatial graph whose nodes are channels. Node features
//! come from a small per-channel transform net. Within a step, node embeddings
//! are refined by message passing over a learned adjacency and summarised by a
//! readout; fused embeddings of consecutive steps are then propagated through
//! learned temporal adjacencies over a window of `w` past steps.

mod checkpoint;
pub mod layers;
mod train;
mod transform;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

pub use checkpoint::{decode_params, encode_params, load_params, save_params};
pub use layers::{
    classification_loss, final_embedding, fuse_embeddings, graph_readout, inter_correlation,
    intra_correlation, message_pass, predict_logits, temporal_propagate, Dense, PROB_FLOOR,
};
pub use train::{batch_gradients, predict, shuffled_batches, train_epoch, window_refs, WindowRef};
pub use transform::{
    pretrain_transform, transform_features, transform_frame, transform_params, TRANSFORM_PREFIX,
};

use crate::correlations::{knn_adjacency, pcc_adjacency, plv_adjacency};
use crate::error::{Error, Result};
use crate::numerics::{xavier_uniform, ParamSet, Tape, Tensor, Var};
use crate::rng::Rng;

/// Source of the intra-graph adjacency.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IntraMode {
    /// Learned bilinear attention over node features.
    #[default]
    Dynamic,
    /// Static binary K-NN graph over node features.
    Knn,
    /// Static absolute Pearson correlation over node features.
    Pcc,
    /// Static phase locking value over the raw signal.
    Plv,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Node feature dimension `d` produced by the transform net.
    pub feature_dim: usize,
    /// Hidden width of the transform net.
    pub transform_hidden: usize,
    pub node_emb: usize,
    pub graph_emb: usize,
    /// Intra-graph message-passing depth `L`.
    pub layers: usize,
    /// Time window `w`.
    pub window: usize,
    pub classes: usize,
    /// Dropout after each intra-graph message-passing layer while training.
    pub dropout: f64,
    /// Hidden widths of the readout stack; the output layer maps to `graph_emb`.
    pub readout_hidden: Vec<usize>,
    pub layer_norm_eps: f64,
    pub intra: IntraMode,
    /// Neighbours per node when `intra = "knn"`.
    pub knn_k: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            feature_dim: 16,
            transform_hidden: 32,
            node_emb: 32,
            graph_emb: 64,
            layers: 2,
            window: 2,
            classes: 4,
            dropout: 0.3,
            readout_hidden: vec![32, 64],
            layer_norm_eps: 1e-5,
            intra: IntraMode::Dynamic,
            knn_k: 2,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, message: &str| {
            Err(Error::Config {
                key: format!("model.{key}"),
                message: message.to_string(),
            })
        };
        if self.layers == 0 {
            return bad("layers", "must be at least 1");
        }
        for (key, v) in [
            ("feature_dim", self.feature_dim),
            ("transform_hidden", self.transform_hidden),
            ("node_emb", self.node_emb),
            ("graph_emb", self.graph_emb),
        ] {
            if v == 0 {
                return bad(key, "must be positive");
            }
        }
        if self.node_emb < 2 {
            return bad("node_emb", "layer norm needs at least 2 features");
        }
        if self.classes < 2 {
            return bad("classes", "must be at least 2");
        }
        if self.readout_hidden.contains(&0) {
            return bad("readout_hidden", "widths must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout", "must lie in [0, 1)");
        }
        if !(self.layer_norm_eps > 0.0) {
            return bad("layer_norm_eps", "must be positive");
        }
        if self.intra == IntraMode::Knn && self.knn_k == 0 {
            return bad("knn_k", "must be positive");
        }
        Ok(())
    }
}

/// One labelled sequence ready for the model: node features per step and,
/// for static intra modes, a fixed adjacency per step.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub features: Vec<Tensor>,
    pub adjacency: Option<Vec<Tensor>>,
    pub label: usize,
}

impl Sample {
    pub fn windows(&self, w: usize) -> usize {
        self.features.len().saturating_sub(w)
    }
}

/// Static adjacency for one step, or `None` in dynamic mode.
pub fn static_adjacency(cfg: &ModelConfig, raw_frame: &Tensor, features: &Tensor) -> Result<Option<Tensor>> {
    let adj = match cfg.intra {
        IntraMode::Dynamic => return Ok(None),
        IntraMode::Knn => knn_adjacency(features, cfg.knn_k)?,
        IntraMode::Pcc => pcc_adjacency(features)?,
        IntraMode::Plv => plv_adjacency(raw_frame)?,
    };
    Ok(Some(adj.matrix))
}

/// Parameter leaves of one forward pass.
#[derive(Clone, Debug)]
pub struct Bound {
    pub w_spa: Var,
    pub intra: Vec<Dense>,
    pub readout: Vec<Dense>,
    pub fuse: Dense,
    pub w_tem: Var,
    pub tem_agg: Dense,
    pub out: Dense,
}

/// Tape handles produced by [`Diig::forward_sequence`].
#[derive(Clone, Debug)]
pub struct SequenceForward {
    /// `H_spa^L` per step.
    pub spatial: Vec<Var>,
    /// Graph embedding per step.
    pub graph: Vec<Var>,
    /// `H_fuse` per step.
    pub fused: Vec<Var>,
    /// `H_tem` per window, indexed by window end minus `w`.
    pub temporal: Vec<Var>,
    /// Class probabilities per window.
    pub probs: Vec<Var>,
    /// Mean cross-entropy over the windows.
    pub loss: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Diig {
    pub config: ModelConfig,
}

impl Diig {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(Diig { config })
    }

    /// Named parameter shapes in a stable order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let c = &self.config;
        let (d, e, g) = (c.feature_dim, c.node_emb, c.graph_emb);
        let mut out = vec![("spa.w".to_string(), vec![d, d])];
        let dense = |out: &mut Vec<(String, Vec<usize>)>, name: &str, i: usize, o: usize| {
            out.push((format!("{name}.w"), vec![i, o]));
            out.push((format!("{name}.b"), vec![1, o]));
        };
        for l in 0..c.layers {
            let fan_in = if l == 0 { d } else { e };
            dense(&mut out, &format!("intra.{l}"), 2 * fan_in, e);
        }
        let mut fan_in = e + d;
        for (i, &h) in c.readout_hidden.iter().enumerate() {
            dense(&mut out, &format!("readout.{i}"), fan_in, h);
            fan_in = h;
        }
        dense(&mut out, "readout.out", fan_in, g);
        dense(&mut out, "fuse", e + g, e);
        out.push(("tem.w".to_string(), vec![e, e]));
        dense(&mut out, "tem_agg", 2 * e, e);
        dense(&mut out, "out", 2 * e, c.classes);
        out
    }

    /// Xavier-uniform weights and zero biases.
    pub fn init_params(&self, rng: &mut Rng) -> Result<ParamSet> {
        let mut params = ParamSet::new();
        for (name, shape) in self.param_shapes() {
            let t = if name.ends_with(".b") {
                Tensor::zeros(&shape)
            } else {
                xavier_uniform(&shape, rng)?
            };
            params.insert(name, t);
        }
        Ok(params)
    }

    /// Checks that `params` has exactly the expected names and shapes.
    pub fn check_params(&self, params: &ParamSet) -> Result<()> {
        let expected: ParamSet = self
            .param_shapes()
            .into_iter()
            .map(|(n, s)| (n, Tensor::zeros(&s)))
            .collect();
        let model_params: ParamSet = params
            .iter()
            .filter(|(n, _)| !n.starts_with(TRANSFORM_PREFIX))
            .map(|(n, t)| (n.clone(), t.clone()))
            .collect();
        expected.ensure_compatible(&model_params)
    }

    /// Registers the model parameters on `tape`.
    pub fn bind(&self, tape: &mut Tape, params: &ParamSet) -> Result<Bound> {
        let mut leaf = |name: &str| -> Result<Var> {
            Ok(tape.param(name.to_string(), params.require(name)?.clone()))
        };
        let w_spa = leaf("spa.w")?;
        let mut dense = |name: &str| -> Result<Dense> {
            let w = tape.param(format!("{name}.w"), params.require(&format!("{name}.w"))?.clone());
            let b = tape.param(format!("{name}.b"), params.require(&format!("{name}.b"))?.clone());
            Ok(Dense { w, b })
        };
        let intra = (0..self.config.layers)
            .map(|l| dense(&format!("intra.{l}")))
            .collect::<Result<Vec<_>>>()?;
        let mut readout = (0..self.config.readout_hidden.len())
            .map(|i| dense(&format!("readout.{i}")))
            .collect::<Result<Vec<_>>>()?;
        readout.push(dense("readout.out")?);
        let fuse = dense("fuse")?;
        let tem_agg = dense("tem_agg")?;
        let out = dense("out")?;
        let w_tem = tape.param("tem.w", params.require("tem.w")?.clone());
        Ok(Bound {
            w_spa,
            intra,
            readout,
            fuse,
            w_tem,
            tem_agg,
            out,
        })
    }

    /// Intra-graph block for one step: adjacency, `L` message-passing layers
    /// (with dropout when `rng` is given), readout and fusion.
    /// Returns `(H_spa^L, h^G, H_fuse)`.
    pub fn spatial_step(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        x: Var,
        adjacency: Option<&Tensor>,
        mut rng: Option<&mut Rng>,
    ) -> Result<(Var, Var, Var)> {
        let a = match adjacency {
            Some(m) => tape.constant(m.clone()),
            None => intra_correlation(tape, x, bound.w_spa)?,
        };
        let mut h = x;
        for layer in &bound.intra {
            h = message_pass(tape, a, h, *layer)?;
            if let Some(rng) = rng.as_deref_mut() {
                h = self.dropout(tape, h, rng)?;
            }
        }
        let g = graph_readout(tape, h, x, &bound.readout)?;
        let fused = fuse_embeddings(tape, h, g, bound.fuse, self.config.layer_norm_eps)?;
        Ok((h, g, fused))
    }

    fn dropout(&self, tape: &mut Tape, h: Var, rng: &mut Rng) -> Result<Var> {
        let p = self.config.dropout;
        if p == 0.0 {
            return Ok(h);
        }
        let shape = tape.value(h).shape().to_vec();
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..shape.iter().product::<usize>())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let mask = tape.constant(Tensor::new(shape, mask)?);
        tape.mul(h, mask)
    }

    /// Full forward pass over one sequence of node features (one `N x d`
    /// node per step). Every window of `w + 1` consecutive steps yields one
    /// prediction; the spatial block runs once per step and is shared by all
    /// windows that contain it.
    pub fn forward_sequence(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        features: &[Var],
        adjacency: Option<&[Tensor]>,
        label: usize,
        mut rng: Option<&mut Rng>,
    ) -> Result<SequenceForward> {
        let w = self.config.window;
        if features.len() <= w {
            return Err(Error::invalid(format!(
                "window {w} needs more than {} steps",
                features.len()
            )));
        }
        if let Some(adj) = adjacency {
            if adj.len() != features.len() {
                return Err(Error::shape("one static adjacency per step is required"));
            }
        }
        let mut spatial = Vec::with_capacity(features.len());
        let mut graph = Vec::with_capacity(features.len());
        let mut fused = Vec::with_capacity(features.len());
        for (t, &x) in features.iter().enumerate() {
            let adj = adjacency.map(|a| &a[t]);
            let (h, g, f) = self.spatial_step(tape, bound, x, adj, rng.as_deref_mut())?;
            spatial.push(h);
            graph.push(g);
            fused.push(f);
        }
        let mut temporal = Vec::new();
        let mut probs = Vec::new();
        let mut losses = Vec::new();
        for end in w..features.len() {
            let h_tem = temporal_propagate(tape, &fused[end - w..=end], bound.w_tem, bound.tem_agg)?;
            let emb = final_embedding(tape, spatial[end], h_tem, bound.out)?;
            let p = predict_logits(tape, emb)?;
            losses.push(classification_loss(tape, p, label)?);
            temporal.push(h_tem);
            probs.push(p);
        }
        let mut total = losses[0];
        for &l in &losses[1..] {
            total = tape.add(total, l)?;
        }
        let loss = tape.scale(total, 1.0 / losses.len() as f64)?;
        Ok(SequenceForward {
            spatial,
            graph,
            fused,
            temporal,
            probs,
            loss,
        })
    }
}

/// Finite-difference checks of the feature transform and of a full forward
/// pass of a small model: 3 nodes, window 2, 2 classes, no dropout.
pub fn gradient_checks(seed: u64) -> Result<Vec<(&'static str, crate::numerics::GradCheckReport)>> {
    use crate::numerics::check_tape;
    use rand::SeedableRng;
    let mut rng = Rng::seed_from_u64(seed);
    let random = |rows: usize, cols: usize, rng: &mut Rng| {
        let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::matrix(rows, cols, data)
    };
    let cfg = ModelConfig {
        feature_dim: 3,
        transform_hidden: 4,
        node_emb: 4,
        graph_emb: 5,
        readout_hidden: vec![3, 4],
        classes: 2,
        window: 2,
        dropout: 0.0,
        ..ModelConfig::default()
    };
    let model = Diig::new(cfg)?;
    let params = model.init_params(&mut rng)?;
    let transform = transform_params(6, 4, 3, &mut rng)?;
    let frames = (0..3).map(|_| random(3, 6, &mut rng)).collect::<Result<Vec<_>>>()?;

    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, &params)?;
    let net = [0, 1].map(|i| {
        let w = format!("transform.{i}.w");
        let b = format!("transform.{i}.b");
        Dense {
            w: tape.param(w.clone(), transform[w.as_str()].clone()),
            b: tape.param(b.clone(), transform[b.as_str()].clone()),
        }
    });
    let xs = frames
        .iter()
        .map(|f| {
            let f = tape.constant(f.clone());
            transform_frame(&mut tape, f, &net)
        })
        .collect::<Result<Vec<_>>>()?;
    let fwd = model.forward_sequence(&mut tape, &bound, &xs, None, 1, None)?;
    Ok(vec![("diig_forward", check_tape(&mut tape, fwd.loss)?)])
}

#[cfg(test)]
mod tests;
