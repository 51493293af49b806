//! The point-cloud classifier: four EdgeConv layers, concatenation, a shared
//! 320→1024 linear, global max pool, and an MLP head with log-softmax.
//!
//! Trailing EdgeConv layers can be made static (`static_tail`): they skip the
//! kNN block and reuse the last graph built by a dynamic layer.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::formats::PointCloud;
use crate::knn::{knn_graph_with, knn_workspace_bytes, SharedGraph};
use crate::layers::{
    dropout_inference, edgeconv_from_gathered, global_max_pool, log_softmax, mlp_forward_with, BatchNorm,
    LayerParams, Linear, MlpSpec, DEFAULT_BN_EPS, DEFAULT_DROPOUT,
};
use crate::rng::Rng;
use crate::tensor::{gather_rows, Tensor, ThreadMode};

const F32: usize = std::mem::size_of::<f32>();
const U32: usize = std::mem::size_of::<u32>();

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub k: usize,
    pub num_points: usize,
    pub in_channels: usize,
    /// Output width of each EdgeConv layer.
    pub dec_channels: Vec<usize>,
    pub concat_dim: usize,
    pub embed_dim: usize,
    /// Hidden widths of the classifier head.
    pub head_channels: Vec<usize>,
    pub num_classes: usize,
    /// Number of trailing EdgeConv layers that reuse the previous graph.
    pub static_tail: usize,
    pub dropout: f32,
    pub bn_eps: f32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            k: 20,
            num_points: 1024,
            in_channels: 3,
            dec_channels: vec![64, 64, 64, 128],
            concat_dim: 320,
            embed_dim: 1024,
            head_channels: vec![512, 256],
            num_classes: 40,
            static_tail: 0,
            dropout: DEFAULT_DROPOUT,
            bn_eps: DEFAULT_BN_EPS,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let layers = self.dec_channels.len();
        if layers == 0 {
            return Err(Error::config("need at least one EdgeConv layer"));
        }
        if self.static_tail >= layers {
            return Err(Error::config(format!(
                "static_tail {} must be below the EdgeConv layer count {layers}: the first layer has no graph to reuse",
                self.static_tail
            )));
        }
        let sum: usize = self.dec_channels.iter().sum();
        if sum != self.concat_dim {
            return Err(Error::config(format!(
                "dec_channels sum to {sum}, concat_dim is {}",
                self.concat_dim
            )));
        }
        if self.k < 1 {
            return Err(Error::KTooSmall);
        }
        if self.num_points <= self.k {
            return Err(Error::config(format!("num_points {} must exceed k {}", self.num_points, self.k)));
        }
        let widths = [self.in_channels, self.embed_dim, self.num_classes];
        if widths.contains(&0) || self.dec_channels.contains(&0) || self.head_channels.contains(&0) {
            return Err(Error::config("all widths must be positive"));
        }
        if !(self.bn_eps >= 0.0) || !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("bn_eps must be >= 0 and dropout in [0, 1)"));
        }
        Ok(())
    }

    pub fn num_edge_layers(&self) -> usize {
        self.dec_channels.len()
    }

    pub fn num_dynamic(&self) -> usize {
        self.num_edge_layers() - self.static_tail
    }

    pub fn is_dynamic(&self, layer: usize) -> bool {
        layer < self.num_dynamic()
    }

    /// Input width of EdgeConv layer `layer`.
    pub fn edge_input_dim(&self, layer: usize) -> usize {
        if layer == 0 {
            self.in_channels
        } else {
            self.dec_channels[layer - 1]
        }
    }

    /// Single-layer MLP `{2c, a}` with batchnorm and ReLU.
    pub fn edge_spec(&self, layer: usize) -> MlpSpec {
        MlpSpec::uniform(&[2 * self.edge_input_dim(layer), self.dec_channels[layer]], true, true)
            .expect("validated config")
    }

    pub fn embed_spec(&self) -> MlpSpec {
        MlpSpec::uniform(&[self.concat_dim, self.embed_dim], true, true).expect("validated config")
    }

    /// `{embed_dim, hidden…, num_classes}`; ReLU + dropout on hidden layers, no batchnorm.
    pub fn head_spec(&self) -> MlpSpec {
        let mut channels = vec![self.embed_dim];
        channels.extend(&self.head_channels);
        channels.push(self.num_classes);
        let layers = channels.len() - 1;
        let relu = (0..layers).map(|l| l + 1 < layers).collect();
        MlpSpec::with_flags(&channels, vec![false; layers], relu, self.dropout).expect("validated config")
    }

    /// Weight-store prefix of EdgeConv layer `layer` (same for dynamic and static).
    pub fn edge_prefix(layer: usize) -> String {
        format!("dec{}", layer + 1)
    }

    /// Trace name: `decN` for dynamic layers, `ecN` for static ones.
    pub fn edge_layer_name(&self, layer: usize) -> String {
        if self.is_dynamic(layer) {
            format!("dec{}", layer + 1)
        } else {
            format!("ec{}", layer + 1)
        }
    }

    pub fn to_text(&self) -> String {
        let list = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(", ");
        let mut s = String::from("# edgeprof model configuration\n");
        let _ = writeln!(s, "k = {}", self.k);
        let _ = writeln!(s, "num_points = {}", self.num_points);
        let _ = writeln!(s, "in_channels = {}", self.in_channels);
        let _ = writeln!(s, "dec_channels = {}", list(&self.dec_channels));
        let _ = writeln!(s, "concat_dim = {}", self.concat_dim);
        let _ = writeln!(s, "embed_dim = {}", self.embed_dim);
        let _ = writeln!(s, "head_channels = {}", list(&self.head_channels));
        let _ = writeln!(s, "num_classes = {}", self.num_classes);
        let _ = writeln!(s, "static_tail = {}", self.static_tail);
        let _ = writeln!(s, "dropout = {}", self.dropout);
        let _ = writeln!(s, "bn_eps = {}", self.bn_eps);
        s
    }

    /// Parses `key = value` lines. Blank lines and `#` comments are skipped;
    /// missing keys keep their defaults, unknown keys are an error.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = ModelConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected `key = value`", lineno + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            let bad = |what: &str| Error::config(format!("line {}: bad {what} value {value:?}", lineno + 1));
            let num = || value.parse::<usize>().map_err(|_| bad(key));
            let list = || {
                value
                    .split(',')
                    .map(|v| v.trim().parse::<usize>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|_| bad(key))
            };
            match key {
                "k" => cfg.k = num()?,
                "num_points" => cfg.num_points = num()?,
                "in_channels" => cfg.in_channels = num()?,
                "dec_channels" => cfg.dec_channels = list()?,
                "concat_dim" => cfg.concat_dim = num()?,
                "embed_dim" => cfg.embed_dim = num()?,
                "head_channels" => cfg.head_channels = if value.is_empty() { vec![] } else { list()? },
                "num_classes" => cfg.num_classes = num()?,
                "static_tail" => cfg.static_tail = num()?,
                "dropout" => cfg.dropout = value.parse().map_err(|_| bad(key))?,
                "bn_eps" => cfg.bn_eps = value.parse().map_err(|_| bad(key))?,
                other => return Err(Error::config(format!("line {}: unknown key {other:?}", lineno + 1))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Named parameter tensors, e.g. `dec1.linear0.weight`, `embed.linear0.bn.gamma`,
/// `head.linear2.bias`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct WeightStore {
    tensors: BTreeMap<String, Tensor>,
}

impl WeightStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Option<Tensor> {
        self.tensors.insert(name.into(), t)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::config(format!("missing weight {name}")))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Every tensor name and shape the config requires, in a fixed order.
    pub fn expected_shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut mlp = |prefix: &str, spec: &MlpSpec| {
            for l in 0..spec.num_layers() {
                let (i, o) = (spec.channels()[l], spec.channels()[l + 1]);
                let base = format!("{prefix}.linear{l}");
                out.push((format!("{base}.weight"), vec![o, i]));
                out.push((format!("{base}.bias"), vec![o]));
                if spec.has_batchnorm(l) {
                    for field in ["gamma", "beta", "running_mean", "running_var"] {
                        out.push((format!("{base}.bn.{field}"), vec![o]));
                    }
                }
            }
        };
        for l in 0..cfg.num_edge_layers() {
            mlp(&ModelConfig::edge_prefix(l), &cfg.edge_spec(l));
        }
        mlp("embed", &cfg.embed_spec());
        mlp("head", &cfg.head_spec());
        out
    }

    /// Checks the name set is exactly what `cfg` demands and every shape matches.
    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        let expected = Self::expected_shapes(cfg);
        for (name, shape) in &expected {
            let t = self.get(name)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::config(format!("weight {name} has shape {:?}, expected {shape:?}", t.shape())));
            }
        }
        if self.tensors.len() != expected.len() {
            let extra: Vec<&str> = self
                .tensors
                .keys()
                .filter(|k| !expected.iter().any(|(n, _)| n == *k))
                .map(String::as_str)
                .collect();
            return Err(Error::config(format!("unexpected weights: {}", extra.join(", "))));
        }
        Ok(())
    }

    fn mlp_params(&self, prefix: &str, spec: &MlpSpec, eps: f32) -> Result<LayerParams> {
        let mut layers = Vec::with_capacity(spec.num_layers());
        for l in 0..spec.num_layers() {
            let base = format!("{prefix}.linear{l}");
            let field = |f: &str| self.get(&format!("{base}.{f}")).cloned();
            let bn = if spec.has_batchnorm(l) {
                Some(BatchNorm {
                    gamma: field("bn.gamma")?,
                    beta: field("bn.beta")?,
                    running_mean: field("bn.running_mean")?,
                    running_var: field("bn.running_var")?,
                    eps,
                })
            } else {
                None
            };
            layers.push(Linear {
                weight: field("weight")?,
                bias: field("bias")?,
                bn,
            });
        }
        let params = LayerParams { layers };
        params.validate(spec)?;
        Ok(params)
    }
}

/// Seeded initial weights: every linear weight and bias uniform in
/// `±1/sqrt(fan_in)`; batchnorm with mean 0, var 1, gamma 1, beta 0.
/// Tensors are drawn in `expected_shapes` order.
pub fn random_weights(cfg: &ModelConfig, rng: &mut Rng) -> Result<WeightStore> {
    cfg.validate()?;
    let mut store = WeightStore::new();
    for (name, shape) in WeightStore::expected_shapes(cfg) {
        let t = if name.ends_with(".weight") || name.ends_with(".bias") {
            let fan_in = if name.ends_with(".weight") {
                shape[1]
            } else {
                // bias shares its layer's fan-in
                let w = name.trim_end_matches(".bias").to_string() + ".weight";
                store.get(&w)?.dim(1)
            };
            let bound = 1.0 / (fan_in as f32).sqrt();
            Tensor::from_fn(&shape, |_| rng.uniform(-bound, bound))
        } else if name.ends_with("gamma") || name.ends_with("running_var") {
            Tensor::full(&shape, 1.0)
        } else {
            Tensor::zeros(&shape)
        };
        store.insert(name, t);
    }
    Ok(store)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    GraphConstruction,
    FeatureUpdate,
    Concat,
    Linear,
    Pool,
    Head,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::GraphConstruction => "graph_construction",
            Stage::FeatureUpdate => "feature_update",
            Stage::Concat => "concat",
            Stage::Linear => "linear",
            Stage::Pool => "pool",
            Stage::Head => "head",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageRecord {
    pub layer: String,
    pub stage: Stage,
    pub nanos: u64,
    pub bytes_persistent: usize,
    pub bytes_transient: usize,
    pub output_shape: Vec<usize>,
}

#[derive(Debug, Clone, Default)]
pub struct ForwardTrace {
    pub records: Vec<StageRecord>,
    /// Graphs built by dynamic layers, in construction order.
    pub graphs: Vec<SharedGraph>,
    /// For each EdgeConv layer, the graph it aggregated over.
    pub layer_graphs: Vec<SharedGraph>,
}

impl ForwardTrace {
    pub fn total_nanos(&self) -> u64 {
        self.records.iter().map(|r| r.nanos).sum()
    }
}

/// Number of kNN graph constructions recorded in a trace.
pub fn count_knn_invocations(trace: &ForwardTrace) -> usize {
    trace
        .records
        .iter()
        .filter(|r| r.stage == Stage::GraphConstruction)
        .count()
}

/// A config paired with validated, unpacked parameters, ready to run.
#[derive(Debug, Clone)]
pub struct Network {
    cfg: ModelConfig,
    edge: Vec<(MlpSpec, LayerParams)>,
    embed: (MlpSpec, LayerParams),
    head: (MlpSpec, LayerParams),
}

impl Network {
    pub fn new(cfg: &ModelConfig, weights: &WeightStore) -> Result<Self> {
        cfg.validate()?;
        weights.validate(cfg)?;
        let edge = (0..cfg.num_edge_layers())
            .map(|l| {
                let spec = cfg.edge_spec(l);
                let params = weights.mlp_params(&ModelConfig::edge_prefix(l), &spec, cfg.bn_eps)?;
                Ok((spec, params))
            })
            .collect::<Result<Vec<_>>>()?;
        let embed_spec = cfg.embed_spec();
        let embed = weights.mlp_params("embed", &embed_spec, cfg.bn_eps)?;
        let head_spec = cfg.head_spec();
        let head = weights.mlp_params("head", &head_spec, cfg.bn_eps)?;
        Ok(Network {
            cfg: cfg.clone(),
            edge,
            embed: (embed_spec, embed),
            head: (head_spec, head),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// Same network with every batchnorm folded into its linear layer.
    pub fn folded(&self) -> Network {
        let fold = |(spec, params): &(MlpSpec, LayerParams)| (spec.without_batchnorm(), params.folded());
        Network {
            cfg: self.cfg.clone(),
            edge: self.edge.iter().map(fold).collect(),
            embed: fold(&self.embed),
            head: fold(&self.head),
        }
    }

    /// Same weights under a different `k` / `static_tail`.
    pub fn with_schedule(&self, k: usize, static_tail: usize) -> Result<Network> {
        let cfg = ModelConfig {
            k,
            static_tail,
            ..self.cfg.clone()
        };
        cfg.validate()?;
        Ok(Network { cfg, ..self.clone() })
    }

    pub fn forward(&self, cloud: &PointCloud, mode: ThreadMode) -> Result<(Tensor, ForwardTrace)> {
        let cfg = &self.cfg;
        let x0 = &cloud.features;
        if x0.rank() != 2 || x0.dim(1) != cfg.in_channels {
            return Err(Error::config(format!(
                "cloud features {:?} do not match in_channels {}",
                x0.shape(),
                cfg.in_channels
            )));
        }
        let n = x0.dim(0);
        if n <= cfg.k {
            return Err(Error::config(format!("cloud has {n} points, need more than k = {}", cfg.k)));
        }

        let mut trace = ForwardTrace::default();
        let mut mark = Instant::now();
        let mut lap = || {
            let now = Instant::now();
            let d = now.duration_since(mark).as_nanos() as u64;
            mark = now;
            d
        };

        let k = cfg.k;
        let mut outputs: Vec<Tensor> = Vec::with_capacity(cfg.num_edge_layers());
        let mut graph: Option<SharedGraph> = None;
        for (l, (spec, params)) in self.edge.iter().enumerate() {
            let input = outputs.last().unwrap_or(x0);
            let c = input.dim(1);
            let name = cfg.edge_layer_name(l);
            let (gathered, g) = if cfg.is_dynamic(l) {
                let g = Arc::new(knn_graph_with(input, k, mode)?);
                let gathered = gather_rows(input, g.neighbors())?;
                trace.records.push(StageRecord {
                    layer: name.clone(),
                    stage: Stage::GraphConstruction,
                    nanos: lap(),
                    bytes_persistent: g.neighbors().byte_len() + gathered.byte_len(),
                    bytes_transient: knn_workspace_bytes(n),
                    output_shape: gathered.shape().to_vec(),
                });
                trace.graphs.push(Arc::clone(&g));
                graph = Some(Arc::clone(&g));
                (Some(gathered), g)
            } else {
                (None, Arc::clone(graph.as_ref().expect("first layer is always dynamic")))
            };
            let static_gather = gathered.is_none();
            let gathered = match gathered {
                Some(t) => t,
                None => gather_rows(input, g.neighbors())?,
            };
            let y = edgeconv_from_gathered(input, &gathered, spec, params, mode)?;
            let a = y.dim(1);
            let edges = n * k * 2 * c * F32;
            let messages = n * k * a * F32;
            trace.records.push(StageRecord {
                layer: name,
                stage: Stage::FeatureUpdate,
                nanos: lap(),
                bytes_persistent: y.byte_len(),
                bytes_transient: edges + messages + if static_gather { gathered.byte_len() } else { 0 },
                output_shape: y.shape().to_vec(),
            });
            trace.layer_graphs.push(g);
            outputs.push(y);
        }

        let mut cat = Vec::with_capacity(n * cfg.concat_dim);
        for i in 0..n {
            for y in &outputs {
                cat.extend_from_slice(y.row(i));
            }
        }
        let cat = Tensor::new(vec![n, cfg.concat_dim], cat)?;
        trace.records.push(StageRecord {
            layer: "concat".into(),
            stage: Stage::Concat,
            nanos: lap(),
            bytes_persistent: cat.byte_len(),
            bytes_transient: 0,
            output_shape: cat.shape().to_vec(),
        });

        let embedded = mlp_forward_with(&self.embed.0, &self.embed.1, &cat, mode)?;
        trace.records.push(StageRecord {
            layer: "embed".into(),
            stage: Stage::Linear,
            nanos: lap(),
            bytes_persistent: embedded.byte_len(),
            bytes_transient: 0,
            output_shape: embedded.shape().to_vec(),
        });

        let pooled = global_max_pool(&embedded)?;
        trace.records.push(StageRecord {
            layer: "pool".into(),
            stage: Stage::Pool,
            nanos: lap(),
            bytes_persistent: pooled.byte_len(),
            bytes_transient: 0,
            output_shape: pooled.shape().to_vec(),
        });

        let logits = mlp_forward_with(&self.head.0, &self.head.1, &pooled.reshape(&[1, cfg.embed_dim])?, mode)?;
        let logits = dropout_inference(logits).reshape(&[cfg.num_classes])?;
        let log_probs = log_softmax(&logits)?;
        trace.records.push(StageRecord {
            layer: "head".into(),
            stage: Stage::Head,
            nanos: lap(),
            bytes_persistent: log_probs.byte_len(),
            bytes_transient: head_hidden_bytes(cfg),
            output_shape: log_probs.shape().to_vec(),
        });

        Ok((log_probs, trace))
    }
}

pub(crate) fn head_hidden_bytes(cfg: &ModelConfig) -> usize {
    (cfg.head_channels.iter().sum::<usize>() + cfg.num_classes) * F32
}

pub(crate) fn index_bytes(n: usize, k: usize) -> usize {
    n * k * U32
}

/// Runs the full network on one cloud: log-probabilities over the classes plus a per-stage trace.
pub fn forward(cfg: &ModelConfig, weights: &WeightStore, cloud: &PointCloud) -> Result<(Tensor, ForwardTrace)> {
    Network::new(cfg, weights)?.forward(cloud, ThreadMode::Single)
}

/// Index of the largest log-probability.
pub fn predicted_class(log_probs: &Tensor) -> usize {
    log_probs
        .data()
        .iter()
        .enumerate()
        .fold((0, f32::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}
