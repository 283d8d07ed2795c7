//! Implementations behind the CLI subcommands.

use std::fmt::Write as _;
use std::path::Path;

use exgrg_core::autodiff::Tape;
use exgrg_core::clustering::{assign_probabilities, PrototypeBank};
use exgrg_core::config::{GraphMode, TrainConfig};
use exgrg_core::dense::Mat;
use exgrg_core::eval::{collapse_metrics, mean_std, run_probe_trials};
use exgrg_core::graph::{
    build_views, generate_sbm, load_graph, sample_batch, BatchContext, SourceGraph,
};
use exgrg_core::pse::{lappe, rwse, Encoding};
use exgrg_core::relgraph::{
    g_adj, g_adj_filtered, g_aug, g_cluster, g_knn, g_pse, g_rwse_filtered, PairPolicy,
    RelationGraph, SourceKind,
};
use exgrg_core::trainer::{
    encode_source, expand_representations, load_checkpoint, metrics_csv_header, metrics_csv_row,
    save_checkpoint, Model, TrainSession,
};
use exgrg_core::{Error, Result};

use crate::manifest::Manifest;

struct DataPaths {
    edges: std::path::PathBuf,
    features: std::path::PathBuf,
    labels: std::path::PathBuf,
    splits: std::path::PathBuf,
}

fn data_paths(dir: &Path) -> DataPaths {
    DataPaths {
        edges: dir.join("edges.txt"),
        features: dir.join("features.csv"),
        labels: dir.join("labels.txt"),
        splits: dir.join("splits.txt"),
    }
}

fn load_data(dir: &Path) -> Result<(SourceGraph, DataPaths)> {
    let paths = data_paths(dir);
    let labels = paths.labels.exists().then_some(paths.labels.as_path());
    let graph = load_graph(&paths.edges, &paths.features, labels)?;
    Ok((graph, paths))
}

fn write_file(path: &Path, content: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent.display().to_string(), e))?;
    }
    std::fs::write(path, content).map_err(|e| Error::io(path.display().to_string(), e))
}

fn resolve_config(config: Option<&Path>, seed: Option<u64>) -> Result<TrainConfig> {
    let mut cfg = match config {
        Some(path) => TrainConfig::from_file(path)?,
        None => TrainConfig::default(),
    };
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

// ---- pretrain -----------------------------------------------------------------

pub fn pretrain(config: Option<&Path>, data: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let cfg = resolve_config(config, seed)?;
    let (graph, paths) = load_data(data)?;

    let mut manifest = Manifest::new("pretrain", cfg.seed, out, &cfg);
    manifest
        .input("edges", &paths.edges)
        .input("features", &paths.features)
        .optional_input("labels", &paths.labels);
    manifest.write()?;

    let mut session = TrainSession::new(&graph, cfg.clone())?;
    let mut csv = String::new();
    let interval = cfg.checkpoint_interval;
    while session.iteration < cfg.iterations {
        let index = session.iteration;
        let report = session.step(&graph)?;
        if csv.is_empty() {
            csv.push_str(&metrics_csv_header(report.lambdas.len()));
            csv.push('\n');
        }
        csv.push_str(&metrics_csv_row(index, &report));
        csv.push('\n');
        let done = index + 1;
        if done % 100 == 0 {
            log::info!("iteration {}/{}: total loss {:.6}", done, cfg.iterations, report.total);
        }
        if interval > 0 && done % interval == 0 && done < cfg.iterations {
            save_checkpoint(
                &out.join(format!("checkpoint_{done}.bin")),
                &session.model,
                &session.optimizer,
                &session.cfg,
                session.iteration,
            )?;
        }
    }
    save_checkpoint(
        &out.join("checkpoint.bin"),
        &session.model,
        &session.optimizer,
        &session.cfg,
        session.iteration,
    )?;
    write_file(&out.join("metrics.csv"), &csv)?;
    println!("pretrained {} iterations; outputs in {}", session.iteration, out.display());
    Ok(())
}

// ---- probe --------------------------------------------------------------------

pub fn probe(
    checkpoint: &Path,
    data: &Path,
    trials: Option<usize>,
    out: &Path,
    seed: Option<u64>,
) -> Result<()> {
    let ckpt = load_checkpoint(checkpoint)?;
    let (graph, paths) = load_data(data)?;
    if graph.labels.is_none() {
        return Err(Error::io(
            paths.labels.display().to_string(),
            std::io::Error::new(std::io::ErrorKind::NotFound, "probe needs labels.txt"),
        ));
    }
    let mut cfg = ckpt.cfg.clone();
    if let Some(t) = trials {
        cfg.probe.trials = t;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if paths.splits.exists() && cfg.probe.split_file.is_none() {
        cfg.probe.split_file = Some(paths.splits.display().to_string());
    }

    let mut manifest = Manifest::new("probe", cfg.seed, out, &cfg);
    manifest
        .input("checkpoint", checkpoint)
        .input("edges", &paths.edges)
        .input("features", &paths.features)
        .input("labels", &paths.labels)
        .optional_input("splits", &paths.splits);
    manifest.write()?;

    let session = TrainSession::from_checkpoint(&graph, ckpt)?;
    let h = encode_source(&session.model, &graph)?;
    let labels = graph.labels.as_ref().expect("labels checked above");
    let accuracies = run_probe_trials(&h, labels, &cfg.probe, cfg.seed)?;
    let (mean, std) = mean_std(&accuracies);

    let mut csv = String::from("trial,accuracy\n");
    for (i, acc) in accuracies.iter().enumerate() {
        let _ = writeln!(csv, "{i},{acc:e}");
    }
    let _ = writeln!(csv, "summary,{mean:e} ± {std:e}");
    write_file(&out.join("probe.csv"), &csv)?;
    println!("probe accuracy over {} trials: {:.4} ± {:.4}", accuracies.len(), mean, std);
    Ok(())
}

// ---- pse ----------------------------------------------------------------------

fn encoding_csv(enc: &Encoding) -> String {
    let mut s = String::new();
    for i in 0..enc.matrix.rows() {
        let row: Vec<String> = enc.matrix.row(i).iter().map(|v| format!("{v:.16e}")).collect();
        s.push_str(&row.join(","));
        s.push('\n');
    }
    s
}

pub fn pse(
    data: &Path,
    kind: &str,
    freq: Option<usize>,
    kernel: Option<usize>,
    config: Option<&Path>,
    out: &Path,
    seed: Option<u64>,
) -> Result<()> {
    let cfg = resolve_config(config, seed)?;
    let (graph, paths) = load_data(data)?;

    let mut manifest = Manifest::new("pse", cfg.seed, out, &cfg);
    manifest.input("edges", &paths.edges).input("features", &paths.features);
    manifest.write()?;

    let enc = match kind {
        "lappe" => lappe(
            &graph,
            freq.unwrap_or(cfg.relgraph.lappe_freq),
            cfg.normalized_laplacian,
        )?,
        "rwse" => rwse(&graph, kernel.unwrap_or(cfg.relgraph.rwse_kernel))?,
        "signnet" => {
            let mut session_cfg = cfg.clone();
            if let Some(f) = freq {
                session_cfg.relgraph.signnet_freq = f;
            }
            session_cfg.relgraph.signnet_enabled = true;
            let model = Model::init(&session_cfg, graph.feature_dim())?;
            exgrg_core::pse::signnet_encode(
                &graph,
                session_cfg.relgraph.signnet_freq,
                model.signnet_phi.as_ref().expect("signnet enabled"),
                model.signnet_rho.as_ref().expect("signnet enabled"),
                session_cfg.relgraph.signnet_arch,
                session_cfg.normalized_laplacian,
            )?
        }
        other => return Err(Error::Config(format!("unknown encoding kind '{other}'"))),
    };
    write_file(&out.join(format!("pse_{kind}.csv")), &encoding_csv(&enc))?;
    println!(
        "wrote {} x {} {kind} encoding to {}",
        enc.matrix.rows(),
        enc.matrix.cols(),
        out.display()
    );
    Ok(())
}

// ---- relgraph -------------------------------------------------------------------

fn relation_triples(kind: &str, n: usize, entries: &[(usize, usize, f64)]) -> String {
    let mut s = format!("# {kind} {n} {}\n", entries.len());
    for &(i, j, w) in entries {
        let _ = writeln!(s, "{i} {j} {w:.16e}");
    }
    s
}

pub fn relgraph(
    data: &Path,
    kind: &str,
    checkpoint: Option<&Path>,
    config: Option<&Path>,
    k_override: Option<usize>,
    out: &Path,
    seed: Option<u64>,
) -> Result<()> {
    let (graph, paths) = load_data(data)?;
    let (cfg, model) = match checkpoint {
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            let mut cfg = ckpt.cfg.clone();
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let session = TrainSession::from_checkpoint(&graph, ckpt)?;
            (cfg, session.model)
        }
        None => {
            let cfg = resolve_config(config, seed)?;
            let model = Model::init(&cfg, graph.feature_dim())?;
            (cfg, model)
        }
    };

    let mut manifest = Manifest::new("relgraph", cfg.seed, out, &cfg);
    manifest.input("edges", &paths.edges).input("features", &paths.features);
    if let Some(c) = checkpoint {
        manifest.input("checkpoint", c);
    }
    manifest.write()?;

    // reproduce iteration 0 of the E-step
    let mut rng_aug = exgrg_core::rng::seeded(cfg.seed, "augment", 0);
    let pair = build_views(&graph, &cfg.augment1, &cfg.augment2, cfg.mask_granularity, &mut rng_aug);
    let mut rng_batch = exgrg_core::rng::seeded(cfg.seed, "batch", 0);
    let batch_size = cfg.batch_size.min(2 * graph.num_nodes);
    let batch_size = batch_size - batch_size % 2;
    let batch = sample_batch(&pair, batch_size, &mut rng_batch)?;
    let ctx = BatchContext::new(&batch, graph.num_nodes);
    let policy = PairPolicy::new(&ctx, cfg.relgraph.intra);
    let rc = &cfg.relgraph;

    let batch_h = || -> Result<Mat> {
        let h = encode_source_views(&model, &pair)?;
        let mut rows = Mat::zeros(ctx.len(), h.cols());
        for (pos, &r) in ctx.rows.iter().enumerate() {
            rows.row_mut(pos).copy_from_slice(h.row(r));
        }
        Ok(rows)
    };
    let knn_graph = |h: &Mat| g_knn(h, k_override.unwrap_or(rc.knn_k), rc.metric, &policy);

    let rg: RelationGraph = match kind {
        "aug" => g_aug(&ctx),
        "knn" => knn_graph(&batch_h()?),
        "adj" => g_adj(&graph, &ctx, &policy),
        "adj_filtered" => {
            let h = batch_h()?;
            g_adj_filtered(&g_adj(&graph, &ctx, &policy), &knn_graph(&h))
        }
        "lappe" => {
            let enc = lappe(&graph, rc.lappe_freq, cfg.normalized_laplacian)?;
            g_pse(&enc.matrix, &ctx, k_override.unwrap_or(rc.lappe_k), rc.metric, SourceKind::Lappe, &policy)
        }
        "rwse" => {
            let enc = rwse(&graph, rc.rwse_kernel)?;
            g_pse(&enc.matrix, &ctx, k_override.unwrap_or(rc.rwse_k), rc.metric, SourceKind::Rwse, &policy)
        }
        "rwse_filtered" => {
            let enc = rwse(&graph, rc.rwse_kernel)?;
            let raw = g_pse(&enc.matrix, &ctx, k_override.unwrap_or(rc.rwse_k), rc.metric, SourceKind::Rwse, &policy);
            g_rwse_filtered(&raw, &knn_graph(&batch_h()?))
        }
        "signnet" => {
            let enc = exgrg_core::pse::signnet_encode(
                &graph,
                rc.signnet_freq,
                model.signnet_phi.as_ref().ok_or_else(|| Error::Config("signnet disabled in config".into()))?,
                model.signnet_rho.as_ref().expect("phi implies rho"),
                rc.signnet_arch,
                cfg.normalized_laplacian,
            )?;
            g_pse(&enc.matrix, &ctx, k_override.unwrap_or(rc.signnet_k), rc.metric, SourceKind::Signnet, &policy)
        }
        "cluster" => {
            let bank: &PrototypeBank = model
                .prototypes
                .as_ref()
                .ok_or_else(|| Error::Config("clustering disabled in config".into()))?;
            let h = batch_h()?;
            let mut tape = Tape::new();
            let hv = tape.constant(h);
            let cv = tape.constant(bank.prototypes.clone());
            let p = assign_probabilities(&mut tape, hv, cv, bank.tau)?;
            let kg = (cfg.cluster.kg_ratio * ctx.len()).max(1);
            g_cluster(tape.value(p), kg, cfg.cluster.sparsify, &policy)
        }
        "aggregate" => {
            return aggregate_dump(&graph, &model, &cfg, &ctx, &pair, &policy, out);
        }
        other => return Err(Error::Config(format!("unknown relation graph kind '{other}'"))),
    };
    write_file(
        &out.join(format!("relgraph_{kind}.txt")),
        &relation_triples(kind, rg.n, rg.entries()),
    )?;
    println!("wrote {} entries of G[{kind}] over {} batch rows", rg.nnz(), rg.n);
    Ok(())
}

/// Forward the stacked two-view input through the encoder with frozen
/// parameters (the same computation the trainer performs per iteration).
fn encode_source_views(model: &Model, pair: &exgrg_core::graph::ViewPair) -> Result<Mat> {
    use exgrg_core::nn::{encoder_forward, normalize_adjacency, Features};
    use exgrg_core::sparse::{CsrMatrix, SparseOperand};
    let norm = normalize_adjacency(&pair.block_adjacency);
    let x = SparseOperand::new(CsrMatrix::from_dense(&pair.stacked_features));
    let mut tape = Tape::new();
    let staged = model.encoder.stage(&mut tape, false);
    let h = encoder_forward(&mut tape, &staged.layers, &norm, Features::Sparse(&x))?;
    Ok(tape.value(h).clone())
}

fn aggregate_dump(
    graph: &SourceGraph,
    model: &Model,
    cfg: &TrainConfig,
    ctx: &BatchContext,
    pair: &exgrg_core::graph::ViewPair,
    policy: &PairPolicy,
    out: &Path,
) -> Result<()> {
    use exgrg_core::relgraph::{aggregate, RelationSource};
    let rc = &cfg.relgraph;
    let h = {
        let full = encode_source_views(model, pair)?;
        let mut rows = Mat::zeros(ctx.len(), full.cols());
        for (pos, &r) in ctx.rows.iter().enumerate() {
            rows.row_mut(pos).copy_from_slice(full.row(r));
        }
        rows
    };
    let needs_knn = rc.standalone_knn
        || rc.adjacency == GraphMode::Filtered
        || rc.rwse_mode == GraphMode::Filtered;
    let knn = needs_knn.then(|| g_knn(&h, rc.knn_k, rc.metric, policy));
    let mut sources = Vec::new();
    if rc.use_aug {
        sources.push(RelationSource::Detached(g_aug(ctx)));
    }
    if rc.standalone_knn {
        sources.push(RelationSource::Detached(knn.clone().expect("knn")));
    }
    match rc.adjacency {
        GraphMode::Off => {}
        GraphMode::Raw => sources.push(RelationSource::Detached(g_adj(graph, ctx, policy))),
        GraphMode::Filtered => sources.push(RelationSource::Detached(g_adj_filtered(
            &g_adj(graph, ctx, policy),
            knn.as_ref().expect("knn"),
        ))),
    }
    if rc.lappe_enabled {
        let enc = lappe(graph, rc.lappe_freq, cfg.normalized_laplacian)?;
        sources.push(RelationSource::Detached(g_pse(
            &enc.matrix, ctx, rc.lappe_k, rc.metric, SourceKind::Lappe, policy,
        )));
    }
    if rc.rwse_mode != GraphMode::Off {
        let enc = rwse(graph, rc.rwse_kernel)?;
        let raw = g_pse(&enc.matrix, ctx, rc.rwse_k, rc.metric, SourceKind::Rwse, policy);
        sources.push(RelationSource::Detached(match rc.rwse_mode {
            GraphMode::Filtered => g_rwse_filtered(&raw, knn.as_ref().expect("knn")),
            _ => raw,
        }));
    }
    if rc.signnet_enabled {
        let enc = exgrg_core::pse::signnet_encode(
            graph,
            rc.signnet_freq,
            model.signnet_phi.as_ref().expect("signnet enabled"),
            model.signnet_rho.as_ref().expect("signnet enabled"),
            rc.signnet_arch,
            cfg.normalized_laplacian,
        )?;
        sources.push(RelationSource::Detached(g_pse(
            &enc.matrix, ctx, rc.signnet_k, rc.metric, SourceKind::Signnet, policy,
        )));
    }
    if cfg.cluster.enabled && cfg.cluster.graph {
        let bank = model.prototypes.as_ref().expect("cluster enabled");
        let mut tape = Tape::new();
        let hv = tape.constant(h.clone());
        let cv = tape.constant(bank.prototypes.clone());
        let p = assign_probabilities(&mut tape, hv, cv, bank.tau)?;
        let kg = (cfg.cluster.kg_ratio * ctx.len()).max(1);
        sources.push(RelationSource::Detached(g_cluster(
            tape.value(p),
            kg,
            cfg.cluster.sparsify,
            policy,
        )));
    }

    let mut tape = Tape::new();
    let staged = model.aggregator.as_ref().map(|agg| agg.net.stage(&mut tape, false));
    let net = match (&model.aggregator, &staged) {
        (Some(a), Some(s)) => Some((a, s)),
        _ => None,
    };
    let agg = aggregate(&mut tape, &sources, net, ctx.len())?;
    let dense = tape.value(agg.g);
    let mut entries = Vec::new();
    for i in 0..ctx.len() {
        for j in 0..ctx.len() {
            let w = dense.get(i, j);
            if w != 0.0 {
                entries.push((i, j, w));
            }
        }
    }
    write_file(
        &out.join("relgraph_aggregate.txt"),
        &relation_triples("aggregate", ctx.len(), &entries),
    )?;
    let lambdas = tape.value(agg.lambdas);
    let mut lam = String::from("kind,lambda\n");
    for (kind, i) in agg.kinds.iter().zip(0..) {
        let _ = writeln!(lam, "{},{:e}", kind.name(), lambdas.get(0, i));
    }
    write_file(&out.join("lambdas.csv"), &lam)?;
    println!("wrote aggregate graph ({} entries) and lambdas", entries.len());
    Ok(())
}

// ---- metrics ------------------------------------------------------------------

pub fn metrics(checkpoint: &Path, data: &Path, out: &Path) -> Result<()> {
    let ckpt = load_checkpoint(checkpoint)?;
    let (graph, paths) = load_data(data)?;
    let cfg = ckpt.cfg.clone();

    let mut manifest = Manifest::new("metrics", cfg.seed, out, &cfg);
    manifest
        .input("checkpoint", checkpoint)
        .input("edges", &paths.edges)
        .input("features", &paths.features);
    manifest.write()?;

    let session = TrainSession::from_checkpoint(&graph, ckpt)?;
    let h = encode_source(&session.model, &graph)?;
    let z = expand_representations(&session.model, &h)?;
    let (corr_h, std_h, nstd_h, rank_h) = collapse_metrics(&h)?;
    let (corr_z, std_z, _, rank_z) = collapse_metrics(&z)?;

    let mut csv = String::from("metric,value\n");
    let _ = writeln!(csv, "corr_H,{corr_h:e}");
    let _ = writeln!(csv, "corr_Z,{corr_z:e}");
    let _ = writeln!(csv, "std_H,{std_h:e}");
    let _ = writeln!(csv, "std_Z,{std_z:e}");
    let _ = writeln!(csv, "nstd_H,{nstd_h:e}");
    let _ = writeln!(csv, "rank_H,{rank_h}");
    let _ = writeln!(csv, "rank_Z,{rank_z}");
    write_file(&out.join("metrics_report.csv"), &csv)?;
    println!("rank_H {rank_h}, rank_Z {rank_z}, std_H {std_h:.4}, std_Z {std_z:.4}");
    Ok(())
}

// ---- gen-sbm ------------------------------------------------------------------

pub fn gen_sbm(
    blocks: usize,
    nodes_per_block: usize,
    p_in: f64,
    p_out: f64,
    feature_dim: usize,
    seed: u64,
    out: &Path,
) -> Result<()> {
    let mut cfg = TrainConfig::default();
    cfg.seed = seed;
    let manifest = Manifest::new("gen-sbm", seed, out, &cfg);
    manifest.write()?;

    let g = generate_sbm(blocks, nodes_per_block, p_in, p_out, feature_dim, seed)?;
    let mut edges = String::from("# generated stochastic block model\n");
    for (u, v) in g.undirected_edges() {
        let _ = writeln!(edges, "{u} {v}");
    }
    write_file(&out.join("edges.txt"), &edges)?;

    let mut features = String::new();
    for i in 0..g.num_nodes {
        let row: Vec<String> = g.features.row(i).iter().map(|v| format!("{v:.16e}")).collect();
        features.push_str(&row.join(","));
        features.push('\n');
    }
    write_file(&out.join("features.csv"), &features)?;

    let mut labels = String::new();
    for l in g.labels.as_ref().expect("sbm has labels") {
        let _ = writeln!(labels, "{l}");
    }
    write_file(&out.join("labels.txt"), &labels)?;
    println!(
        "generated sbm: {} nodes, {} undirected edges, {} blocks",
        g.num_nodes,
        g.undirected_edges().len(),
        blocks
    );
    Ok(())
}
