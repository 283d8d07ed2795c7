//! End-to-end pre-training: the per-iteration E-step (build relation graphs
//! from detached values) fused with the M-step (one optimizer step on the
//! encoder, expander, prototypes, and aggregator) into a single gradient
//! update, plus Adam/AdamW, checkpointing, and the metrics trace.
//!
//! Determinism contract: every stochastic stage draws from a generator
//! derived from `(seed, stage-tag, iteration)`, so two runs with the same
//! config produce identical traces and a resumed run replays the exact
//! stream an uninterrupted one would have used.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::autodiff::{Tape, Var};
use crate::clustering::{assign_probabilities, sinkhorn_codes, PrototypeBank};
use crate::config::{GraphMode, OptimizerKind, TrainConfig};
use crate::dense::Mat;
use crate::graph::{build_views, sample_batch, BatchContext, SourceGraph};
use crate::nn::{
    encoder_forward, mlp_forward, normalize_adjacency, Encoder, Features, Mlp, StagedMlp,
};
use crate::clustering::ot_alignment_loss;
use crate::objective::{
    covariance_loss, invariance_loss, relation_regularizer, variance_loss, LossReport,
};
use crate::pse::{lappe, rwse, signnet_forward, Encoding, SignNetArch};
use crate::relgraph::{
    aggregate, binarize, f_k_rowwise_masked, g_adj, g_adj_filtered, g_aug, g_cluster, g_knn,
    g_pse, g_rwse_filtered, stats_f_s_dense, AggregatorNet, PairPolicy, RelationSource,
    SourceKind,
};
use crate::sparse::{CsrMatrix, SparseOperand};
use crate::{Error, Result};

/// All trainable (and frozen-but-checkpointed) modules.
#[derive(Clone, Debug)]
pub struct Model {
    pub encoder: Encoder,
    pub expander: Mlp,
    pub prototypes: Option<PrototypeBank>,
    pub aggregator: Option<AggregatorNet>,
    pub signnet_phi: Option<Mlp>,
    pub signnet_rho: Option<Mlp>,
}

impl Model {
    pub fn init(cfg: &TrainConfig, input_dim: usize) -> Result<Model> {
        let mut rng = crate::rng::seeded(cfg.seed, "init", 0);
        let encoder = Encoder::new(
            &cfg.encoder.dims(input_dim),
            cfg.encoder.activation,
            cfg.encoder.norm,
            &mut rng,
        );
        let expander = Mlp::new(
            &cfg.expander.dims(cfg.encoder.dim),
            cfg.expander.activation,
            cfg.expander.norm,
            true,
            &mut rng,
        )
        .without_output_bias();
        let prototypes = if cfg.cluster.enabled {
            Some(PrototypeBank::new(
                cfg.cluster.k,
                cfg.encoder.dim,
                cfg.cluster.tau,
                cfg.cluster.epsilon,
                cfg.cluster.sinkhorn_iters,
                &mut rng,
            )?)
        } else {
            None
        };
        let aggregator = cfg.aggregator.enabled.then(|| {
            AggregatorNet::new(
                cfg.aggregator.layers,
                cfg.aggregator.hidden_ratio,
                cfg.aggregator.stat_shift,
                cfg.aggregator.stat_scale,
                &mut rng,
            )
        });
        let (signnet_phi, signnet_rho) = if cfg.relgraph.signnet_enabled {
            let rc = &cfg.relgraph;
            let phi = Mlp::new(
                &[1, rc.signnet_phi_hidden, rc.signnet_phi_dim],
                crate::nn::Activation::Relu,
                crate::nn::Norm::None,
                true,
                &mut rng,
            );
            let rho_in = match rc.signnet_arch {
                SignNetArch::Mlp => rc.signnet_freq * rc.signnet_phi_dim,
                SignNetArch::DeepSet => rc.signnet_phi_dim,
            };
            let rho = Mlp::new(
                &[rho_in, rc.signnet_phi_hidden, rc.signnet_freq],
                crate::nn::Activation::Relu,
                crate::nn::Norm::None,
                true,
                &mut rng,
            );
            (Some(phi), Some(rho))
        } else {
            (None, None)
        };
        Ok(Model { encoder, expander, prototypes, aggregator, signnet_phi, signnet_rho })
    }

    pub fn input_dim(&self) -> usize {
        self.encoder.layers[0].weight.rows()
    }

    pub fn visit_params(&self, f: &mut dyn FnMut(String, &Mat)) {
        self.encoder.visit_params(f);
        self.expander.visit_params("expander", f);
        if let Some(bank) = &self.prototypes {
            f("prototypes".into(), &bank.prototypes);
        }
        if let Some(agg) = &self.aggregator {
            agg.net.visit_params("psi", f);
        }
        if let Some(phi) = &self.signnet_phi {
            phi.visit_params("signnet.phi", f);
        }
        if let Some(rho) = &self.signnet_rho {
            rho.visit_params("signnet.rho", f);
        }
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(String, &mut Mat)) {
        self.encoder.visit_params_mut(f);
        self.expander.visit_params_mut("expander", f);
        if let Some(bank) = &mut self.prototypes {
            f("prototypes".into(), &mut bank.prototypes);
        }
        if let Some(agg) = &mut self.aggregator {
            agg.net.visit_params_mut("psi", f);
        }
        if let Some(phi) = &mut self.signnet_phi {
            phi.visit_params_mut("signnet.phi", f);
        }
        if let Some(rho) = &mut self.signnet_rho {
            rho.visit_params_mut("signnet.rho", f);
        }
    }

    pub fn named_params(&self) -> Vec<(String, Mat)> {
        let mut out = Vec::new();
        self.visit_params(&mut |name, m| out.push((name, m.clone())));
        out
    }
}

// ---- optimizer -------------------------------------------------------------------

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Per-parameter first/second moments keyed by parameter name.
#[derive(Clone, Debug, Default)]
pub struct OptimizerState {
    pub first: BTreeMap<String, Mat>,
    pub second: BTreeMap<String, Mat>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new() -> Self {
        Self::default()
    }

    /// One bias-corrected Adam/AdamW update over the named parameters that
    /// have gradients. Parameters without a gradient entry are skipped by
    /// Adam; AdamW still applies its decoupled decay to them only if listed.
    pub fn apply(
        &mut self,
        kind: OptimizerKind,
        lr: f64,
        weight_decay: f64,
        model: &mut Model,
        grads: &BTreeMap<String, Mat>,
    ) -> Result<()> {
        for (name, grad) in grads {
            if !grad.all_finite() {
                return Err(Error::Numeric(format!("non-finite gradient for {name}")));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bias1 = 1.0 - ADAM_BETA1.powi(t);
        let bias2 = 1.0 - ADAM_BETA2.powi(t);
        let mut failure = None;
        model.visit_params_mut(&mut |name, value| {
            if failure.is_some() {
                return;
            }
            let Some(grad) = grads.get(&name) else { return };
            if grad.shape() != value.shape() {
                failure = Some(Error::Shape {
                    op: "optimizer_step",
                    detail: format!("{name}: grad {:?} vs param {:?}", grad.shape(), value.shape()),
                });
                return;
            }
            let m = self
                .first
                .entry(name.clone())
                .or_insert_with(|| Mat::zeros(value.rows(), value.cols()));
            let v = self
                .second
                .entry(name.clone())
                .or_insert_with(|| Mat::zeros(value.rows(), value.cols()));
            for ((p, g), (mi, vi)) in value
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
            {
                *mi = ADAM_BETA1 * *mi + (1.0 - ADAM_BETA1) * g;
                *vi = ADAM_BETA2 * *vi + (1.0 - ADAM_BETA2) * g * g;
                let m_hat = *mi / bias1;
                let v_hat = *vi / bias2;
                let mut update = m_hat / (v_hat.sqrt() + ADAM_EPS);
                if kind == OptimizerKind::AdamW {
                    update += weight_decay * *p;
                }
                *p -= lr * update;
            }
        });
        match failure {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }
}

// ---- staged model -------------------------------------------------------------------

struct StagedModel {
    encoder: crate::nn::StagedEncoder,
    expander: StagedMlp,
    prototypes: Option<Var>,
    psi: Option<StagedMlp>,
    signnet_phi: Option<StagedMlp>,
    signnet_rho: Option<StagedMlp>,
    /// (name, var) for every staged trainable parameter, in
    /// `visit_params` order.
    trainable: Vec<(String, Var)>,
}

/// Which parameter groups receive updates; `AggregatorOnly` exists for the
/// degenerate-pressure regression test.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainSubset {
    All,
    AggregatorOnly,
}

fn stage_model(model: &Model, cfg: &TrainConfig, subset: TrainSubset, tape: &mut Tape) -> StagedModel {
    let base_trainable = subset == TrainSubset::All;
    let mut trainable = Vec::new();

    let encoder = model.encoder.stage(tape, base_trainable);
    if base_trainable {
        let mut names = Vec::new();
        model.encoder.visit_params(&mut |n, _| names.push(n));
        trainable.extend(names.into_iter().zip(encoder.vars.iter().copied()));
    }

    let expander = model.expander.stage(tape, base_trainable);
    if base_trainable {
        let mut names = Vec::new();
        model.expander.visit_params("expander", &mut |n, _| names.push(n));
        trainable.extend(names.into_iter().zip(expander.vars.iter().copied()));
    }

    let prototypes = model.prototypes.as_ref().map(|bank| {
        let var = if base_trainable {
            let v = tape.parameter(bank.prototypes.clone());
            trainable.push(("prototypes".into(), v));
            v
        } else {
            tape.constant(bank.prototypes.clone())
        };
        var
    });

    let psi = model.aggregator.as_ref().map(|agg| {
        let staged = agg.net.stage(tape, true);
        let mut names = Vec::new();
        agg.net.visit_params("psi", &mut |n, _| names.push(n));
        trainable.extend(names.into_iter().zip(staged.vars.iter().copied()));
        staged
    });

    let signnet_trainable = base_trainable && cfg.relgraph.signnet_train;
    let signnet_phi = model.signnet_phi.as_ref().map(|phi| {
        let staged = phi.stage(tape, signnet_trainable);
        if signnet_trainable {
            let mut names = Vec::new();
            phi.visit_params("signnet.phi", &mut |n, _| names.push(n));
            trainable.extend(names.into_iter().zip(staged.vars.iter().copied()));
        }
        staged
    });
    let signnet_rho = model.signnet_rho.as_ref().map(|rho| {
        let staged = rho.stage(tape, signnet_trainable);
        if signnet_trainable {
            let mut names = Vec::new();
            rho.visit_params("signnet.rho", &mut |n, _| names.push(n));
            trainable.extend(names.into_iter().zip(staged.vars.iter().copied()));
        }
        staged
    });

    StagedModel { encoder, expander, prototypes, psi, signnet_phi, signnet_rho, trainable }
}

// ---- precomputed encodings ------------------------------------------------------------

/// Node encodings computed once on the source graph at session start; both
/// view rows of a source node share its encoding row.
#[derive(Clone, Debug)]
struct PseBundle {
    lappe: Option<Encoding>,
    rwse: Option<Encoding>,
    signnet: Option<Encoding>,
    /// Eigenvector inputs kept around when the SignNet MLPs train online.
    signnet_eigvecs: Option<Mat>,
}

fn compute_pses(g: &SourceGraph, cfg: &TrainConfig) -> Result<PseBundle> {
    let rc = &cfg.relgraph;
    let lappe_enc = if rc.lappe_enabled {
        Some(lappe(g, rc.lappe_freq, cfg.normalized_laplacian)?)
    } else {
        None
    };
    let rwse_enc = if rc.rwse_mode != GraphMode::Off {
        Some(rwse(g, rc.rwse_kernel)?)
    } else {
        None
    };
    let (signnet_enc, signnet_eigvecs) = if rc.signnet_enabled {
        let base = lappe(g, rc.signnet_freq, cfg.normalized_laplacian)?;
        (None::<Encoding>, Some(base.matrix))
    } else {
        (None, None)
    };
    Ok(PseBundle { lappe: lappe_enc, rwse: rwse_enc, signnet: signnet_enc, signnet_eigvecs })
}

// ---- session ---------------------------------------------------------------------------

pub struct TrainSession {
    pub cfg: TrainConfig,
    pub model: Model,
    pub optimizer: OptimizerState,
    pub iteration: usize,
    pub subset: TrainSubset,
    pse: PseBundle,
}

impl TrainSession {
    pub fn new(g: &SourceGraph, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = Model::init(&cfg, g.feature_dim())?;
        let pse = compute_pses(g, &cfg)?;
        Ok(TrainSession {
            cfg,
            model,
            optimizer: OptimizerState::new(),
            iteration: 0,
            subset: TrainSubset::All,
            pse,
        })
    }

    /// Run up to the configured iteration count, reporting each step.
    pub fn run(
        &mut self,
        g: &SourceGraph,
        mut on_report: impl FnMut(usize, &LossReport) -> Result<()>,
    ) -> Result<()> {
        while self.iteration < self.cfg.iterations {
            let index = self.iteration;
            let report = self.step(g)?;
            on_report(index, &report)?;
        }
        Ok(())
    }

    /// Frozen SignNet encoding of the source graph under the current MLPs
    /// (recomputed lazily for CLI inspection).
    pub fn signnet_encoding(&self, g: &SourceGraph) -> Result<Option<Encoding>> {
        let rc = &self.cfg.relgraph;
        if !rc.signnet_enabled {
            return Ok(None);
        }
        let (phi, rho) = (
            self.model.signnet_phi.as_ref().expect("signnet enabled"),
            self.model.signnet_rho.as_ref().expect("signnet enabled"),
        );
        crate::pse::signnet_encode(
            g,
            rc.signnet_freq,
            phi,
            rho,
            rc.signnet_arch,
            self.cfg.normalized_laplacian,
        )
        .map(Some)
    }

    /// One fused E-step/M-step iteration.
    pub fn step(&mut self, g: &SourceGraph) -> Result<LossReport> {
        let cfg = self.cfg.clone();
        let iter = self.iteration as u64;
        let rc = &cfg.relgraph;

        // (1) two augmented views
        let mut rng_aug = crate::rng::seeded(cfg.seed, "augment", iter);
        let pair = build_views(g, &cfg.augment1, &cfg.augment2, cfg.mask_granularity, &mut rng_aug);
        let norm_adj = normalize_adjacency(&pair.block_adjacency);
        let x_sparse = SparseOperand::new(CsrMatrix::from_dense(&pair.stacked_features));

        // (2) batch sampling
        let mut rng_batch = crate::rng::seeded(cfg.seed, "batch", iter);
        let batch = sample_batch(&pair, cfg.batch_size, &mut rng_batch)?;
        let ctx = BatchContext::new(&batch, g.num_nodes);
        let policy = PairPolicy::new(&ctx, rc.intra);

        // (3) full-graph forward, batch-row selection, expander
        let mut tape = Tape::new();
        let staged = stage_model(&self.model, &cfg, self.subset, &mut tape);
        let h_full = encoder_forward(
            &mut tape,
            &staged.encoder.layers,
            &norm_adj,
            Features::Sparse(&x_sparse),
        )?;
        let h_batch = tape.gather_rows(h_full, &ctx.rows)?;
        let z = mlp_forward(&mut tape, &staged.expander.layers, h_batch)?;

        // (4) E-step: relation graphs from detached values
        let h_detached = tape.value(h_batch).clone();
        let needs_knn = rc.standalone_knn
            || rc.adjacency == GraphMode::Filtered
            || rc.rwse_mode == GraphMode::Filtered;
        let knn = needs_knn.then(|| g_knn(&h_detached, rc.knn_k, rc.metric, &policy));

        let cluster_outputs = match (&self.model.prototypes, staged.prototypes) {
            (Some(bank), Some(c_var)) if cfg.cluster.enabled => {
                let p_var = assign_probabilities(&mut tape, h_batch, c_var, bank.tau)?;
                let q = sinkhorn_codes(&h_detached, bank)?;
                let p_detached = tape.value(p_var).clone();
                Some((p_var, q, p_detached))
            }
            _ => None,
        };

        let mut sources: Vec<RelationSource> = Vec::new();
        if rc.use_aug {
            sources.push(RelationSource::Detached(g_aug(&ctx)));
        }
        if rc.standalone_knn {
            sources.push(RelationSource::Detached(knn.clone().expect("knn computed")));
        }
        match rc.adjacency {
            GraphMode::Off => {}
            GraphMode::Raw => sources.push(RelationSource::Detached(g_adj(g, &ctx, &policy))),
            GraphMode::Filtered => {
                let adj = g_adj(g, &ctx, &policy);
                sources.push(RelationSource::Detached(g_adj_filtered(
                    &adj,
                    knn.as_ref().expect("knn computed"),
                )));
            }
        }
        if let Some(enc) = &self.pse.lappe {
            sources.push(RelationSource::Detached(g_pse(
                &enc.matrix,
                &ctx,
                rc.lappe_k,
                rc.metric,
                SourceKind::Lappe,
                &policy,
            )));
        }
        match rc.rwse_mode {
            GraphMode::Off => {}
            GraphMode::Raw => {
                let enc = self.pse.rwse.as_ref().expect("rwse computed");
                sources.push(RelationSource::Detached(g_pse(
                    &enc.matrix,
                    &ctx,
                    rc.rwse_k,
                    rc.metric,
                    SourceKind::Rwse,
                    &policy,
                )));
            }
            GraphMode::Filtered => {
                let enc = self.pse.rwse.as_ref().expect("rwse computed");
                let raw = g_pse(&enc.matrix, &ctx, rc.rwse_k, rc.metric, SourceKind::Rwse, &policy);
                sources.push(RelationSource::Detached(g_rwse_filtered(
                    &raw,
                    knn.as_ref().expect("knn computed"),
                )));
            }
        }
        if rc.signnet_enabled {
            if rc.signnet_train {
                let source = self.signnet_on_tape(&mut tape, &staged, &ctx, &policy)?;
                sources.push(source);
            } else {
                // frozen MLPs: encode once, cache, and treat like any PSE
                if self.pse.signnet.is_none() {
                    self.pse.signnet = self.signnet_encoding(g)?;
                }
                let enc = self.pse.signnet.as_ref().expect("signnet cached");
                sources.push(RelationSource::Detached(g_pse(
                    &enc.matrix,
                    &ctx,
                    rc.signnet_k,
                    rc.metric,
                    SourceKind::Signnet,
                    &policy,
                )));
            }
        }
        if cfg.cluster.enabled && cfg.cluster.graph {
            let (_, _, p_detached) = cluster_outputs.as_ref().expect("cluster enabled");
            let k_global = (cfg.cluster.kg_ratio * ctx.len()).max(1);
            sources.push(RelationSource::Detached(g_cluster(
                p_detached,
                k_global,
                cfg.cluster.sparsify,
                &policy,
            )));
        }
        if sources.is_empty() {
            return Err(Error::Config("no relation graphs enabled".into()));
        }

        // (4b) aggregate with the hypernetwork
        let net = match (&self.model.aggregator, &staged.psi) {
            (Some(agg), Some(psi)) => Some((agg, psi)),
            _ => None,
        };
        let aggregated = aggregate(&mut tape, &sources, net, ctx.len())?;
        let g_final = if cfg.binary_g {
            binarize(&mut tape, aggregated.g, 0.5)
        } else {
            aggregated.g
        };

        // (5) M-step: composite loss, backward, one optimizer step
        let l_v = variance_loss(&mut tape, z)?;
        let l_c = covariance_loss(&mut tape, z)?;
        let l_i = invariance_loss(&mut tape, z, g_final)?;
        let l_r = relation_regularizer(&mut tape, g_final)?;
        let l_o = match &cluster_outputs {
            Some((p_var, q, _)) => {
                let pairs = cfg.cluster.pairs.build(ctx.len(), &ctx.pairs);
                Some(ot_alignment_loss(&mut tape, *p_var, q, &pairs)?)
            }
            None => None,
        };

        let w = &cfg.weights;
        let mut total = tape.scalar_mul(l_v, w.alpha)?;
        for (term, weight) in [(l_c, w.beta), (l_i, w.gamma), (l_r, w.alpha2)] {
            let scaled = tape.scalar_mul(term, weight)?;
            total = tape.add(total, scaled)?;
        }
        if let Some(lo) = l_o {
            let scaled = tape.scalar_mul(lo, w.alpha1)?;
            total = tape.add(total, scaled)?;
        }

        let report = LossReport {
            variance: tape.value(l_v).scalar(),
            covariance: tape.value(l_c).scalar(),
            invariance: tape.value(l_i).scalar(),
            alignment: l_o.map_or(0.0, |v| tape.value(v).scalar()),
            regularizer: tape.value(l_r).scalar(),
            total: tape.value(total).scalar(),
            lambdas: tape.value(aggregated.lambdas).data().to_vec(),
        };
        if !report.total.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss at iteration {iter}: L_V={} L_C={} L_I'={} L_O={} L_R={}",
                report.variance,
                report.covariance,
                report.invariance,
                report.alignment,
                report.regularizer
            )));
        }

        tape.backward(total)?;
        let mut grads = BTreeMap::new();
        for (name, var) in &staged.trainable {
            if let Some(g) = tape.grad(*var) {
                grads.insert(name.clone(), g.clone());
            }
        }
        self.optimizer.apply(
            cfg.optimizer,
            cfg.learning_rate,
            cfg.weight_decay,
            &mut self.model,
            &grads,
        )?;

        // (6) keep prototype rows on the unit sphere
        if let Some(bank) = &mut self.model.prototypes {
            bank.renormalize();
        }

        self.iteration += 1;
        Ok(report)
    }

    /// On-tape SignNet relation graph for the ablation that trains the
    /// encoder MLPs through the invariance term: cosine similarities of the
    /// live encodings, masked to the detached top-k support, clamped at 0.
    fn signnet_on_tape(
        &self,
        tape: &mut Tape,
        staged: &StagedModel,
        ctx: &BatchContext,
        policy: &PairPolicy,
    ) -> Result<RelationSource> {
        let rc = &self.cfg.relgraph;
        let eigvecs = self.pse.signnet_eigvecs.as_ref().expect("signnet enabled");
        let mut rows = Mat::zeros(ctx.len(), eigvecs.cols());
        for (pos, &src) in ctx.sources.iter().enumerate() {
            rows.row_mut(pos).copy_from_slice(eigvecs.row(src));
        }
        let phi = staged.signnet_phi.as_ref().expect("signnet staged");
        let rho = staged.signnet_rho.as_ref().expect("signnet staged");
        let enc = signnet_forward(tape, phi, rho, &rows, rc.signnet_arch)?;

        let normalized = tape.l2_normalize_rows(enc)?;
        let transposed = tape.transpose(normalized)?;
        let sim = tape.matmul(normalized, transposed)?;
        let sim = tape.zero_diag(sim)?;

        // support from the detached values, weights from the live ones
        let sim_detached = {
            let mut m = tape.value(sim).clone();
            for i in 0..m.rows() {
                m.set(i, i, 0.0);
            }
            m
        };
        let kept = f_k_rowwise_masked(&sim_detached, rc.signnet_k, |i, j| policy.allows(i, j));
        let mut mask = Mat::zeros(ctx.len(), ctx.len());
        for &(i, j, _) in &kept {
            mask.set(i, j, 1.0);
        }
        let mask_var = tape.constant(mask);
        let masked = tape.elementwise_mul(sim, mask_var)?;
        let clamped = tape.relu(masked)?;
        let stats = stats_f_s_dense(tape.value(clamped));
        Ok(RelationSource::OnTape { kind: SourceKind::Signnet, values: clamped, stats })
    }
}

// ---- metrics trace ---------------------------------------------------------------------

pub fn metrics_csv_header(num_lambdas: usize) -> String {
    let mut s = String::from("iteration,L_V,L_C,L_Iprime,L_O,L_R,total");
    for i in 1..=num_lambdas {
        s.push_str(&format!(",lambda_{i}"));
    }
    s
}

pub fn metrics_csv_row(iteration: usize, report: &LossReport) -> String {
    let mut s = format!(
        "{},{:e},{:e},{:e},{:e},{:e},{:e}",
        iteration,
        report.variance,
        report.covariance,
        report.invariance,
        report.alignment,
        report.regularizer,
        report.total
    );
    for l in &report.lambdas {
        s.push_str(&format!(",{l:e}"));
    }
    s
}

// ---- checkpointing ----------------------------------------------------------------------

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"EXGRG01\0";

fn push_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

/// Serialise config text, iteration counter, and every named array (model
/// parameters plus optimizer moments and step counter) in a stable order.
pub fn save_checkpoint(
    path: &Path,
    model: &Model,
    optimizer: &OptimizerState,
    cfg: &TrainConfig,
    iteration: usize,
) -> Result<()> {
    let mut arrays: Vec<(String, Mat)> = model.named_params();
    for (name, m) in &optimizer.first {
        arrays.push((format!("opt.m.{name}"), m.clone()));
    }
    for (name, v) in &optimizer.second {
        arrays.push((format!("opt.v.{name}"), v.clone()));
    }
    arrays.push(("opt.step".into(), Mat::from_vec(1, 1, vec![optimizer.step as f64])));

    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    let cfg_text = cfg.to_text();
    push_u64(&mut buf, cfg_text.len() as u64);
    buf.extend_from_slice(cfg_text.as_bytes());
    push_u64(&mut buf, iteration as u64);
    push_u64(&mut buf, arrays.len() as u64);
    for (name, mat) in &arrays {
        push_u64(&mut buf, name.len() as u64);
        buf.extend_from_slice(name.as_bytes());
        push_u64(&mut buf, mat.rows() as u64);
        push_u64(&mut buf, mat.cols() as u64);
        for v in mat.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    file.write_all(&buf).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

#[derive(Debug)]
pub struct Checkpoint {
    pub cfg: TrainConfig,
    pub iteration: usize,
    pub arrays: BTreeMap<String, Mat>,
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut at = 0usize;
    let take = |at: &mut usize, n: usize| -> Result<&[u8]> {
        if *at + n > bytes.len() {
            return Err(Error::Checkpoint(format!(
                "truncated file: wanted {n} bytes at offset {at}, have {}",
                bytes.len()
            )));
        }
        let s = &bytes[*at..*at + n];
        *at += n;
        Ok(s)
    };
    let read_u64 = |at: &mut usize| -> Result<u64> {
        let s = take(at, 8)?;
        Ok(u64::from_le_bytes(s.try_into().unwrap()))
    };

    let magic = take(&mut at, 8)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic {:02x?}; expected {:02x?} (version mismatch or not a checkpoint)",
            magic, CHECKPOINT_MAGIC
        )));
    }
    let cfg_len = read_u64(&mut at)? as usize;
    let cfg_text = std::str::from_utf8(take(&mut at, cfg_len)?)
        .map_err(|e| Error::Checkpoint(format!("config blob is not UTF-8: {e}")))?
        .to_string();
    let cfg = TrainConfig::from_text(&cfg_text)?;
    let iteration = read_u64(&mut at)? as usize;
    let count = read_u64(&mut at)? as usize;
    let mut arrays = BTreeMap::new();
    for _ in 0..count {
        let name_len = read_u64(&mut at)? as usize;
        let name = std::str::from_utf8(take(&mut at, name_len)?)
            .map_err(|e| Error::Checkpoint(format!("parameter name is not UTF-8: {e}")))?
            .to_string();
        let rows = read_u64(&mut at)? as usize;
        let cols = read_u64(&mut at)? as usize;
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            let s = take(&mut at, 8)?;
            data.push(f64::from_le_bytes(s.try_into().unwrap()));
        }
        arrays.insert(name, Mat::from_vec(rows, cols, data));
    }
    if at != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - at)));
    }
    Ok(Checkpoint { cfg, iteration, arrays })
}

impl TrainSession {
    /// Rebuild a session from a checkpoint; encodings are recomputed from
    /// the (deterministic) source graph.
    pub fn from_checkpoint(g: &SourceGraph, ckpt: Checkpoint) -> Result<Self> {
        let Checkpoint { cfg, iteration, mut arrays } = ckpt;
        let mut model = Model::init(&cfg, g.feature_dim())?;
        let mut missing = Vec::new();
        model.visit_params_mut(&mut |name, value| {
            match arrays.remove(&name) {
                Some(stored) if stored.shape() == value.shape() => *value = stored,
                Some(stored) => missing.push(format!(
                    "{name}: stored {:?} vs expected {:?}",
                    stored.shape(),
                    value.shape()
                )),
                None => missing.push(format!("{name}: absent")),
            }
        });
        if !missing.is_empty() {
            return Err(Error::Checkpoint(format!("parameter mismatch: {}", missing.join("; "))));
        }
        let mut optimizer = OptimizerState::new();
        let step = arrays
            .remove("opt.step")
            .ok_or_else(|| Error::Checkpoint("missing opt.step".into()))?;
        optimizer.step = step.scalar() as u64;
        for (name, mat) in arrays {
            if let Some(pname) = name.strip_prefix("opt.m.") {
                optimizer.first.insert(pname.to_string(), mat);
            } else if let Some(pname) = name.strip_prefix("opt.v.") {
                optimizer.second.insert(pname.to_string(), mat);
            } else {
                return Err(Error::Checkpoint(format!("unexpected array '{name}'")));
            }
        }
        let pse = compute_pses(g, &cfg)?;
        Ok(TrainSession {
            cfg,
            model,
            optimizer,
            iteration,
            subset: TrainSubset::All,
            pse,
        })
    }
}

/// Recompute encoder representations of the un-augmented source graph with
/// frozen parameters (train-mode batch statistics over the full graph).
pub fn encode_source(model: &Model, g: &SourceGraph) -> Result<Mat> {
    let norm_adj = normalize_adjacency(&g.adjacency);
    let x_sparse = SparseOperand::new(CsrMatrix::from_dense(&g.features));
    let mut tape = Tape::new();
    let staged = model.encoder.stage(&mut tape, false);
    let h = encoder_forward(&mut tape, &staged.layers, &norm_adj, Features::Sparse(&x_sparse))?;
    Ok(tape.value(h).clone())
}

/// Expander embeddings of already-encoded representations.
pub fn expand_representations(model: &Model, h: &Mat) -> Result<Mat> {
    let mut tape = Tape::new();
    let staged = model.expander.stage(&mut tape, false);
    let hv = tape.constant(h.clone());
    let z = mlp_forward(&mut tape, &staged.layers, hv)?;
    Ok(tape.value(z).clone())
}
