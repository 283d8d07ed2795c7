//! Run configuration: a flat `key = value` text format with `#` comments.
//! Every tunable of the pipeline has a key; unknown keys are hard errors so
//! typos cannot silently fall back to defaults.

use std::fmt::Write as _;
use std::path::Path;

use crate::clustering::AlignmentPairs;
use crate::graph::{AugmentConfig, MaskGranularity};
use crate::nn::{Activation, Norm};
use crate::objective::LossWeights;
use crate::pse::SignNetArch;
use crate::relgraph::{ClusterSparsifier, Metric};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    Adam,
    AdamW,
}

impl OptimizerKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "adam" => Ok(OptimizerKind::Adam),
            "adamw" => Ok(OptimizerKind::AdamW),
            other => Err(Error::Config(format!("unknown optimizer '{other}'"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::Adam => "adam",
            OptimizerKind::AdamW => "adamw",
        }
    }
}

/// Whether a graph source is disabled, used raw, or filtered by the kNN
/// graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GraphMode {
    Off,
    Raw,
    Filtered,
}

impl GraphMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "off" => Ok(GraphMode::Off),
            "raw" => Ok(GraphMode::Raw),
            "filtered" => Ok(GraphMode::Filtered),
            other => Err(Error::Config(format!("unknown graph mode '{other}'"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            GraphMode::Off => "off",
            GraphMode::Raw => "raw",
            GraphMode::Filtered => "filtered",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub layers: usize,
    pub hidden: usize,
    pub dim: usize,
    pub activation: Activation,
    pub norm: Norm,
}

impl EncoderConfig {
    pub fn dims(&self, input_dim: usize) -> Vec<usize> {
        let mut dims = vec![input_dim];
        for _ in 0..self.layers.saturating_sub(1) {
            dims.push(self.hidden);
        }
        dims.push(self.dim);
        dims
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AggregatorConfig {
    pub enabled: bool,
    pub layers: usize,
    pub hidden_ratio: usize,
    pub stat_shift: f64,
    pub stat_scale: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RelGraphConfig {
    pub intra: bool,
    pub metric: Metric,
    pub use_aug: bool,
    pub standalone_knn: bool,
    pub knn_k: usize,
    pub adjacency: GraphMode,
    pub lappe_enabled: bool,
    pub lappe_k: usize,
    pub lappe_freq: usize,
    pub rwse_mode: GraphMode,
    pub rwse_k: usize,
    pub rwse_kernel: usize,
    pub signnet_enabled: bool,
    pub signnet_k: usize,
    pub signnet_freq: usize,
    pub signnet_arch: SignNetArch,
    pub signnet_phi_hidden: usize,
    pub signnet_phi_dim: usize,
    /// Ablation: drop the stop-gradient on the SignNet graph and train the
    /// encoder MLPs through the invariance term (cosine metric only).
    pub signnet_train: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClusterConfig {
    pub enabled: bool,
    /// Whether the cluster relation graph joins the mixture (the alignment
    /// loss runs whenever the module is enabled, graph or not).
    pub graph: bool,
    pub k: usize,
    pub tau: f64,
    pub epsilon: f64,
    pub sinkhorn_iters: usize,
    /// `K_g = kg_ratio * N` entries survive the global sparsifier.
    pub kg_ratio: usize,
    pub sparsify: ClusterSparsifier,
    pub pairs: AlignmentPairs,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeConfig {
    pub penalties: Vec<f64>,
    pub max_iters: usize,
    pub tol: f64,
    pub trials: usize,
    pub train_ratio: f64,
    pub val_ratio: f64,
    pub split_file: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub batch_size: usize,
    pub iterations: usize,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub checkpoint_interval: usize,
    pub weights: LossWeights,
    pub binary_g: bool,
    pub encoder: EncoderConfig,
    pub expander: EncoderConfig,
    pub aggregator: AggregatorConfig,
    pub augment1: AugmentConfig,
    pub augment2: AugmentConfig,
    pub mask_granularity: MaskGranularity,
    pub relgraph: RelGraphConfig,
    pub cluster: ClusterConfig,
    pub normalized_laplacian: bool,
    pub probe: ProbeConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            batch_size: 256,
            iterations: 1000,
            optimizer: OptimizerKind::Adam,
            learning_rate: 5e-4,
            weight_decay: 0.01,
            checkpoint_interval: 0,
            weights: LossWeights { alpha: 100.0, beta: 80.0, gamma: 5.0, alpha1: 0.2, alpha2: 0.5 },
            binary_g: false,
            encoder: EncoderConfig {
                layers: 2,
                hidden: 256,
                dim: 128,
                activation: Activation::Relu,
                norm: Norm::Batch,
            },
            expander: EncoderConfig {
                layers: 2,
                hidden: 256,
                dim: 256,
                activation: Activation::Elu,
                norm: Norm::Batch,
            },
            aggregator: AggregatorConfig {
                enabled: true,
                layers: 3,
                hidden_ratio: 2,
                stat_shift: 0.0,
                stat_scale: 0.01,
            },
            augment1: AugmentConfig { edge_drop_prob: 0.2, feature_mask_prob: 0.3 },
            augment2: AugmentConfig { edge_drop_prob: 0.4, feature_mask_prob: 0.4 },
            mask_granularity: MaskGranularity::PerDimension,
            relgraph: RelGraphConfig {
                intra: true,
                metric: Metric::Cosine,
                use_aug: true,
                standalone_knn: false,
                knn_k: 32,
                adjacency: GraphMode::Filtered,
                lappe_enabled: true,
                lappe_k: 8,
                lappe_freq: 32,
                rwse_mode: GraphMode::Raw,
                rwse_k: 80,
                rwse_kernel: 24,
                signnet_enabled: true,
                signnet_k: 4,
                signnet_freq: 10,
                signnet_arch: SignNetArch::DeepSet,
                signnet_phi_hidden: 16,
                signnet_phi_dim: 16,
                signnet_train: false,
            },
            cluster: ClusterConfig {
                enabled: true,
                graph: true,
                k: 64,
                tau: 0.1,
                epsilon: 0.05,
                sinkhorn_iters: 6,
                kg_ratio: 12,
                sparsify: ClusterSparsifier::Global,
                pairs: AlignmentPairs::SelfAndAug,
            },
            normalized_laplacian: true,
            probe: ProbeConfig {
                penalties: vec![1e-4, 1e-3, 1e-2, 1e-1, 1.0],
                max_iters: 500,
                tol: 1e-6,
                trials: 20,
                train_ratio: 0.1,
                val_ratio: 0.1,
                split_file: None,
            },
        }
    }
}

fn parse_f64(key: &str, v: &str) -> Result<f64> {
    v.parse().map_err(|_| Error::Config(format!("{key}: invalid number '{v}'")))
}

fn parse_usize(key: &str, v: &str) -> Result<usize> {
    v.parse().map_err(|_| Error::Config(format!("{key}: invalid integer '{v}'")))
}

fn parse_u64(key: &str, v: &str) -> Result<u64> {
    v.parse().map_err(|_| Error::Config(format!("{key}: invalid integer '{v}'")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        other => Err(Error::Config(format!("{key}: invalid boolean '{other}'"))),
    }
}

fn parse_f64_list(key: &str, v: &str) -> Result<Vec<f64>> {
    v.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| parse_f64(key, t))
        .collect()
}

impl TrainConfig {
    /// Apply one key/value assignment. Unknown keys are errors.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        let k = key;
        let v = value;
        match k {
            "train.seed" => self.seed = parse_u64(k, v)?,
            "train.batch_size" => self.batch_size = parse_usize(k, v)?,
            "train.iterations" => self.iterations = parse_usize(k, v)?,
            "train.optimizer" => self.optimizer = OptimizerKind::parse(v)?,
            "train.learning_rate" => self.learning_rate = parse_f64(k, v)?,
            "train.weight_decay" => self.weight_decay = parse_f64(k, v)?,
            "train.checkpoint_interval" => self.checkpoint_interval = parse_usize(k, v)?,

            "loss.alpha" => self.weights.alpha = parse_f64(k, v)?,
            "loss.beta" => self.weights.beta = parse_f64(k, v)?,
            "loss.gamma" => self.weights.gamma = parse_f64(k, v)?,
            "loss.alpha1" => self.weights.alpha1 = parse_f64(k, v)?,
            "loss.alpha2" => self.weights.alpha2 = parse_f64(k, v)?,
            "loss.binary_g" => self.binary_g = parse_bool(k, v)?,

            "encoder.layers" => self.encoder.layers = parse_usize(k, v)?,
            "encoder.hidden" => self.encoder.hidden = parse_usize(k, v)?,
            "encoder.dim" => self.encoder.dim = parse_usize(k, v)?,
            "encoder.activation" => self.encoder.activation = Activation::parse(v)?,
            "encoder.norm" => self.encoder.norm = Norm::parse(v)?,

            "expander.layers" => self.expander.layers = parse_usize(k, v)?,
            "expander.hidden" => self.expander.hidden = parse_usize(k, v)?,
            "expander.dim" => self.expander.dim = parse_usize(k, v)?,
            "expander.activation" => self.expander.activation = Activation::parse(v)?,
            "expander.norm" => self.expander.norm = Norm::parse(v)?,

            "aggregator.enabled" => self.aggregator.enabled = parse_bool(k, v)?,
            "aggregator.layers" => self.aggregator.layers = parse_usize(k, v)?,
            "aggregator.hidden_ratio" => self.aggregator.hidden_ratio = parse_usize(k, v)?,
            "aggregator.stat_shift" => self.aggregator.stat_shift = parse_f64(k, v)?,
            "aggregator.stat_scale" => self.aggregator.stat_scale = parse_f64(k, v)?,

            "augment.view1.edge_drop" => self.augment1.edge_drop_prob = parse_f64(k, v)?,
            "augment.view1.feature_mask" => self.augment1.feature_mask_prob = parse_f64(k, v)?,
            "augment.view2.edge_drop" => self.augment2.edge_drop_prob = parse_f64(k, v)?,
            "augment.view2.feature_mask" => self.augment2.feature_mask_prob = parse_f64(k, v)?,
            "augment.per_node_mask" => {
                self.mask_granularity = if parse_bool(k, v)? {
                    MaskGranularity::PerNode
                } else {
                    MaskGranularity::PerDimension
                }
            }

            "relgraph.intra" => self.relgraph.intra = parse_bool(k, v)?,
            "relgraph.metric" => self.relgraph.metric = Metric::parse(v)?,
            "relgraph.use_aug" => self.relgraph.use_aug = parse_bool(k, v)?,
            "relgraph.standalone_knn" => self.relgraph.standalone_knn = parse_bool(k, v)?,
            "relgraph.knn.k" => self.relgraph.knn_k = parse_usize(k, v)?,
            "relgraph.adjacency" => self.relgraph.adjacency = GraphMode::parse(v)?,
            "relgraph.lappe.enabled" => self.relgraph.lappe_enabled = parse_bool(k, v)?,
            "relgraph.lappe.k" => self.relgraph.lappe_k = parse_usize(k, v)?,
            "relgraph.lappe.freq" => self.relgraph.lappe_freq = parse_usize(k, v)?,
            "relgraph.rwse.mode" => self.relgraph.rwse_mode = GraphMode::parse(v)?,
            "relgraph.rwse.k" => self.relgraph.rwse_k = parse_usize(k, v)?,
            "relgraph.rwse.kernel" => self.relgraph.rwse_kernel = parse_usize(k, v)?,
            "relgraph.signnet.enabled" => self.relgraph.signnet_enabled = parse_bool(k, v)?,
            "relgraph.signnet.k" => self.relgraph.signnet_k = parse_usize(k, v)?,
            "relgraph.signnet.freq" => self.relgraph.signnet_freq = parse_usize(k, v)?,
            "relgraph.signnet.arch" => self.relgraph.signnet_arch = SignNetArch::parse(v)?,
            "relgraph.signnet.phi_hidden" => self.relgraph.signnet_phi_hidden = parse_usize(k, v)?,
            "relgraph.signnet.phi_dim" => self.relgraph.signnet_phi_dim = parse_usize(k, v)?,
            "relgraph.signnet.train" => self.relgraph.signnet_train = parse_bool(k, v)?,

            "cluster.enabled" => self.cluster.enabled = parse_bool(k, v)?,
            "cluster.graph" => self.cluster.graph = parse_bool(k, v)?,
            "cluster.k" => self.cluster.k = parse_usize(k, v)?,
            "cluster.tau" => self.cluster.tau = parse_f64(k, v)?,
            "cluster.epsilon" => self.cluster.epsilon = parse_f64(k, v)?,
            "cluster.sinkhorn_iters" => self.cluster.sinkhorn_iters = parse_usize(k, v)?,
            "cluster.kg_ratio" => self.cluster.kg_ratio = parse_usize(k, v)?,
            "cluster.sparsify" => {
                self.cluster.sparsify = match v {
                    "global" => ClusterSparsifier::Global,
                    "rowwise" => ClusterSparsifier::RowWise,
                    other => {
                        return Err(Error::Config(format!("cluster.sparsify: unknown '{other}'")))
                    }
                }
            }
            "cluster.pairs" => self.cluster.pairs = AlignmentPairs::parse(v)?,

            "pse.normalized_laplacian" => self.normalized_laplacian = parse_bool(k, v)?,

            "probe.penalties" => self.probe.penalties = parse_f64_list(k, v)?,
            "probe.max_iters" => self.probe.max_iters = parse_usize(k, v)?,
            "probe.tol" => self.probe.tol = parse_f64(k, v)?,
            "probe.trials" => self.probe.trials = parse_usize(k, v)?,
            "probe.train_ratio" => self.probe.train_ratio = parse_f64(k, v)?,
            "probe.val_ratio" => self.probe.val_ratio = parse_f64(k, v)?,
            "probe.split_file" => {
                self.probe.split_file = if v.is_empty() { None } else { Some(v.to_string()) }
            }

            other => return Err(Error::Config(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        cfg.merge_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::from_text(&text)
    }

    /// Apply assignments from config text over the current values.
    pub fn merge_text(&mut self, text: &str) -> Result<()> {
        for (line_no, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(pos) => &raw[..pos],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected 'key = value', got '{line}'", line_no + 1))
            })?;
            self.apply(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.batch_size % 2 != 0 {
            return Err(Error::Config(format!(
                "train.batch_size must be even and positive, got {}",
                self.batch_size
            )));
        }
        self.weights.validate().map_err(|e| Error::Config(e.to_string()))?;
        for (name, cfg) in [("encoder", &self.encoder), ("expander", &self.expander)] {
            if cfg.layers == 0 || cfg.dim == 0 || (cfg.layers > 1 && cfg.hidden == 0) {
                return Err(Error::Config(format!("{name} dimensions must be positive")));
            }
        }
        for (name, p) in [
            ("augment.view1.edge_drop", self.augment1.edge_drop_prob),
            ("augment.view1.feature_mask", self.augment1.feature_mask_prob),
            ("augment.view2.edge_drop", self.augment2.edge_drop_prob),
            ("augment.view2.feature_mask", self.augment2.feature_mask_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} = {p} outside [0,1]")));
            }
        }
        if self.cluster.enabled && (self.cluster.k < 2 || self.cluster.tau <= 0.0 || self.cluster.epsilon <= 0.0) {
            return Err(Error::Config(
                "cluster needs k >= 2 and positive tau/epsilon".into(),
            ));
        }
        if self.relgraph.signnet_train && self.relgraph.metric != Metric::Cosine {
            return Err(Error::Config(
                "relgraph.signnet.train requires the cosine metric".into(),
            ));
        }
        if self.probe.train_ratio + self.probe.val_ratio >= 1.0 {
            return Err(Error::Config("probe split ratios must leave room for a test set".into()));
        }
        if self.probe.penalties.iter().any(|&p| p <= 0.0) {
            return Err(Error::Config("probe penalties must be positive".into()));
        }
        Ok(())
    }

    /// Serialise every key deterministically (the manifest/checkpoint blob).
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("train.seed", self.seed.to_string());
        kv("train.batch_size", self.batch_size.to_string());
        kv("train.iterations", self.iterations.to_string());
        kv("train.optimizer", self.optimizer.name().to_string());
        kv("train.learning_rate", format!("{:e}", self.learning_rate));
        kv("train.weight_decay", format!("{:e}", self.weight_decay));
        kv("train.checkpoint_interval", self.checkpoint_interval.to_string());
        kv("loss.alpha", format!("{:e}", self.weights.alpha));
        kv("loss.beta", format!("{:e}", self.weights.beta));
        kv("loss.gamma", format!("{:e}", self.weights.gamma));
        kv("loss.alpha1", format!("{:e}", self.weights.alpha1));
        kv("loss.alpha2", format!("{:e}", self.weights.alpha2));
        kv("loss.binary_g", self.binary_g.to_string());
        kv("encoder.layers", self.encoder.layers.to_string());
        kv("encoder.hidden", self.encoder.hidden.to_string());
        kv("encoder.dim", self.encoder.dim.to_string());
        kv("encoder.activation", self.encoder.activation.name().to_string());
        kv("encoder.norm", self.encoder.norm.name().to_string());
        kv("expander.layers", self.expander.layers.to_string());
        kv("expander.hidden", self.expander.hidden.to_string());
        kv("expander.dim", self.expander.dim.to_string());
        kv("expander.activation", self.expander.activation.name().to_string());
        kv("expander.norm", self.expander.norm.name().to_string());
        kv("aggregator.enabled", self.aggregator.enabled.to_string());
        kv("aggregator.layers", self.aggregator.layers.to_string());
        kv("aggregator.hidden_ratio", self.aggregator.hidden_ratio.to_string());
        kv("aggregator.stat_shift", format!("{:e}", self.aggregator.stat_shift));
        kv("aggregator.stat_scale", format!("{:e}", self.aggregator.stat_scale));
        kv("augment.view1.edge_drop", format!("{:e}", self.augment1.edge_drop_prob));
        kv("augment.view1.feature_mask", format!("{:e}", self.augment1.feature_mask_prob));
        kv("augment.view2.edge_drop", format!("{:e}", self.augment2.edge_drop_prob));
        kv("augment.view2.feature_mask", format!("{:e}", self.augment2.feature_mask_prob));
        kv(
            "augment.per_node_mask",
            (self.mask_granularity == MaskGranularity::PerNode).to_string(),
        );
        kv("relgraph.intra", self.relgraph.intra.to_string());
        kv("relgraph.metric", self.relgraph.metric.name().to_string());
        kv("relgraph.use_aug", self.relgraph.use_aug.to_string());
        kv("relgraph.standalone_knn", self.relgraph.standalone_knn.to_string());
        kv("relgraph.knn.k", self.relgraph.knn_k.to_string());
        kv("relgraph.adjacency", self.relgraph.adjacency.name().to_string());
        kv("relgraph.lappe.enabled", self.relgraph.lappe_enabled.to_string());
        kv("relgraph.lappe.k", self.relgraph.lappe_k.to_string());
        kv("relgraph.lappe.freq", self.relgraph.lappe_freq.to_string());
        kv("relgraph.rwse.mode", self.relgraph.rwse_mode.name().to_string());
        kv("relgraph.rwse.k", self.relgraph.rwse_k.to_string());
        kv("relgraph.rwse.kernel", self.relgraph.rwse_kernel.to_string());
        kv("relgraph.signnet.enabled", self.relgraph.signnet_enabled.to_string());
        kv("relgraph.signnet.k", self.relgraph.signnet_k.to_string());
        kv("relgraph.signnet.freq", self.relgraph.signnet_freq.to_string());
        kv("relgraph.signnet.arch", self.relgraph.signnet_arch.name().to_string());
        kv("relgraph.signnet.phi_hidden", self.relgraph.signnet_phi_hidden.to_string());
        kv("relgraph.signnet.phi_dim", self.relgraph.signnet_phi_dim.to_string());
        kv("relgraph.signnet.train", self.relgraph.signnet_train.to_string());
        kv("cluster.enabled", self.cluster.enabled.to_string());
        kv("cluster.graph", self.cluster.graph.to_string());
        kv("cluster.k", self.cluster.k.to_string());
        kv("cluster.tau", format!("{:e}", self.cluster.tau));
        kv("cluster.epsilon", format!("{:e}", self.cluster.epsilon));
        kv("cluster.sinkhorn_iters", self.cluster.sinkhorn_iters.to_string());
        kv("cluster.kg_ratio", self.cluster.kg_ratio.to_string());
        kv(
            "cluster.sparsify",
            match self.cluster.sparsify {
                ClusterSparsifier::Global => "global".to_string(),
                ClusterSparsifier::RowWise => "rowwise".to_string(),
            },
        );
        kv("cluster.pairs", self.cluster.pairs.name().to_string());
        kv("pse.normalized_laplacian", self.normalized_laplacian.to_string());
        kv(
            "probe.penalties",
            self.probe
                .penalties
                .iter()
                .map(|p| format!("{p:e}"))
                .collect::<Vec<_>>()
                .join(","),
        );
        kv("probe.max_iters", self.probe.max_iters.to_string());
        kv("probe.tol", format!("{:e}", self.probe.tol));
        kv("probe.trials", self.probe.trials.to_string());
        kv("probe.train_ratio", format!("{:e}", self.probe.train_ratio));
        kv("probe.val_ratio", format!("{:e}", self.probe.val_ratio));
        kv("probe.split_file", self.probe.split_file.clone().unwrap_or_default());
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = TrainConfig::default();
        cfg.validate().unwrap();
        let text = cfg.to_text();
        let parsed = TrainConfig::from_text(&text).unwrap();
        assert_eq!(parsed, cfg);
    }

    #[test]
    fn unknown_key_is_hard_error() {
        let err = TrainConfig::from_text("train.batchsize = 8\n").unwrap_err();
        assert!(err.to_string().contains("unknown config key"));
    }

    #[test]
    fn comments_and_blanks_ignored() {
        let cfg = TrainConfig::from_text(
            "# a comment\n\ntrain.batch_size = 64   # trailing comment\nloss.alpha = 2\n",
        )
        .unwrap();
        assert_eq!(cfg.batch_size, 64);
        assert_eq!(cfg.weights.alpha, 2.0);
    }

    #[test]
    fn invalid_values_are_reported_with_key() {
        let err = TrainConfig::from_text("train.batch_size = many\n").unwrap_err();
        assert!(err.to_string().contains("train.batch_size"));
        let err = TrainConfig::from_text("train.batch_size = 7\n").unwrap_err();
        assert!(err.to_string().contains("even"));
    }

    #[test]
    fn encoder_dims_construction() {
        let enc = EncoderConfig {
            layers: 2,
            hidden: 256,
            dim: 128,
            activation: Activation::Relu,
            norm: Norm::Batch,
        };
        assert_eq!(enc.dims(1433), vec![1433, 256, 128]);
        let one = EncoderConfig { layers: 1, ..enc };
        assert_eq!(one.dims(10), vec![10, 128]);
    }
}
