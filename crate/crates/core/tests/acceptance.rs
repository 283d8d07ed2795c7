//! Acceptance suite: one test per release criterion, each printing a
//! PASS/FAIL line. Run with `cargo test --test acceptance -- --nocapture`
//! to see every line; failures always surface the line.

use std::collections::BTreeMap;
use std::time::Instant;

use exgrg_core::autodiff::{finite_diff_check, Tape, Var};
use exgrg_core::clustering::{
    assign_probabilities, ot_alignment_loss, sinkhorn_codes, PrototypeBank,
};
use exgrg_core::config::{GraphMode, TrainConfig};
use exgrg_core::dense::Mat;
use exgrg_core::eval::{mean_std, metric_rank, metric_std, run_probe_trials, RANK_TOLERANCE};
use exgrg_core::graph::{
    build_views, generate_sbm, load_graph, sample_batch, AugmentConfig, BatchContext,
    MaskGranularity, SourceGraph,
};
use exgrg_core::nn::{
    encoder_forward, mlp_forward, normalize_adjacency, Activation, Encoder, Features, Mlp, Norm,
};
use exgrg_core::objective::{total_loss, LossWeights};
use exgrg_core::pse::{
    eigendecompose_symmetric, laplacian, laplacian_rank_diagnostic, lappe, rwse, signnet_forward,
};
use exgrg_core::relgraph::{
    aggregate, f_k_global, f_k_rowwise, g_aug, g_knn, AggregatorNet, Metric, PairPolicy,
    RelationSource,
};
use exgrg_core::sparse::CsrMatrix;
use exgrg_core::trainer::{
    encode_source, expand_representations, load_checkpoint, metrics_csv_row, save_checkpoint,
    TrainSession,
};

/// Effective-rank tolerance for collapse measurements: reported integer
/// ranks of the kind the regression mirrors come from single-precision
/// matrix-rank defaults, not from exact-degeneracy cutoffs. Initialisation
/// noise in directions the optimizer never touches keeps exact numerical
/// rank full forever, so collapse is measured as the count of singular
/// values carrying at least 1% of the dominant one.
const COLLAPSE_RANK_TOLERANCE: f64 = 1e-2;

fn verdict(number: usize, name: &str, ok: bool, detail: &str) {
    let status = if ok { "PASS" } else { "FAIL" };
    println!("acceptance criterion {number} ({name}): {status} - {detail}");
    assert!(ok, "criterion {number} ({name}) failed: {detail}");
}

// ---- shared mini end-to-end instance -------------------------------------------

/// Everything needed to evaluate the composite objective on a tiny fixed
/// instance: parameters for encoder, expander, prototypes, and aggregator,
/// with the E-step artifacts (relation graphs, Sinkhorn codes, batch) frozen.
struct MiniInstance {
    graph: SourceGraph,
    ctx: BatchContext,
    adjacency: CsrMatrix,
    stacked_features: Mat,
    encoder: Encoder,
    expander: Mlp,
    bank: PrototypeBank,
    aggregator: AggregatorNet,
    graphs: Vec<exgrg_core::relgraph::RelationGraph>,
    codes: Mat,
    pairs: Vec<(usize, usize)>,
    weights: LossWeights,
}

struct MiniGrads {
    loss: f64,
    encoder: Vec<Mat>,
    expander: Vec<Mat>,
    prototypes: Mat,
    psi: Vec<Mat>,
}

impl MiniInstance {
    /// N=8 batch rows, D_H=6, D_Z=8, K=4 prototypes, two relation graphs.
    fn build(seed: u64) -> Self {
        let graph = generate_sbm(2, 4, 0.7, 0.2, 5, seed).unwrap();
        let mut rng = exgrg_core::rng::seeded(seed, "mini", 0);
        let pair = build_views(
            &graph,
            &AugmentConfig::identity(),
            &AugmentConfig::identity(),
            MaskGranularity::PerDimension,
            &mut rng,
        );
        let batch = sample_batch(&pair, 8, &mut rng).unwrap();
        let ctx = BatchContext::new(&batch, graph.num_nodes);

        let encoder = Encoder::new(&[5, 6, 6], Activation::Elu, Norm::Batch, &mut rng);
        let expander =
            Mlp::new(&[6, 8, 8], Activation::Elu, Norm::Batch, true, &mut rng).without_output_bias();
        let bank = PrototypeBank::new(4, 6, 0.5, 0.25, 6, &mut rng).unwrap();
        // unit stat scale keeps the tiny instance's hypernetwork inputs O(1)
        let aggregator = AggregatorNet::new(2, 2, 0.0, 1.0, &mut rng);

        // E-step artifacts frozen outside the differentiable path: the
        // augmentation graph plus a kNN graph from the initial representations
        let h0 = {
            let norm = normalize_adjacency(&pair.block_adjacency);
            let mut tape = Tape::new();
            let staged = encoder.stage(&mut tape, false);
            let x = tape.constant(pair.stacked_features.clone());
            let h = encoder_forward(&mut tape, &staged.layers, &norm, Features::Dense(x)).unwrap();
            let hb = tape.gather_rows(h, &ctx.rows).unwrap();
            tape.value(hb).clone()
        };
        let policy = PairPolicy::new(&ctx, true);
        let graphs = vec![g_aug(&ctx), g_knn(&h0, 2, Metric::Cosine, &policy)];
        let codes = sinkhorn_codes(&h0, &bank).unwrap();
        let pairs = exgrg_core::clustering::AlignmentPairs::SelfAndAug.build(ctx.len(), &ctx.pairs);

        MiniInstance {
            adjacency: pair.block_adjacency.clone(),
            stacked_features: pair.stacked_features.clone(),
            graph,
            ctx,
            encoder,
            expander,
            bank,
            aggregator,
            graphs,
            codes,
            pairs,
            weights: LossWeights { alpha: 2.0, beta: 1.5, gamma: 1.0, alpha1: 0.8, alpha2: 0.6 },
        }
    }

    fn flatten_params(&self) -> Vec<Mat> {
        let mut out = Vec::new();
        self.encoder.visit_params(&mut |_, m| out.push(m.clone()));
        self.expander.visit_params("expander", &mut |_, m| out.push(m.clone()));
        out.push(self.bank.prototypes.clone());
        self.aggregator.net.visit_params("psi", &mut |_, m| out.push(m.clone()));
        out
    }

    fn with_params(&self, params: &[Mat]) -> (Encoder, Mlp, Mat, Mlp) {
        let mut k = 0usize;
        let mut encoder = self.encoder.clone();
        encoder.visit_params_mut(&mut |_, m| {
            *m = params[k].clone();
            k += 1;
        });
        let mut expander = self.expander.clone();
        expander.visit_params_mut("expander", &mut |_, m| {
            *m = params[k].clone();
            k += 1;
        });
        let prototypes = params[k].clone();
        k += 1;
        let mut psi = self.aggregator.net.clone();
        psi.visit_params_mut("psi", &mut |_, m| {
            *m = params[k].clone();
            k += 1;
        });
        assert_eq!(k, params.len());
        (encoder, expander, prototypes, psi)
    }

    /// Evaluate the composite objective (all five terms) and, after one
    /// backward pass, read parameter gradients in `flatten_params` order.
    fn evaluate(&self, params: &[Mat], weights: &LossWeights) -> exgrg_core::Result<MiniGrads> {
        let (encoder, expander, prototypes, psi) = self.with_params(params);
        let norm = normalize_adjacency(&self.adjacency);
        let mut tape = Tape::new();
        let staged_enc = encoder.stage(&mut tape, true);
        let staged_exp = expander.stage(&mut tape, true);
        let c_var = tape.parameter(prototypes);
        let staged_psi = psi.stage(&mut tape, true);

        let x = tape.constant(self.stacked_features.clone());
        let h_full = encoder_forward(&mut tape, &staged_enc.layers, &norm, Features::Dense(x))?;
        let h_batch = tape.gather_rows(h_full, &self.ctx.rows)?;
        let z = mlp_forward(&mut tape, &staged_exp.layers, h_batch)?;
        let p = assign_probabilities(&mut tape, h_batch, c_var, self.bank.tau)?;

        let net_cfg = AggregatorNet {
            net: psi.clone(),
            stat_shift: self.aggregator.stat_shift,
            stat_scale: self.aggregator.stat_scale,
        };
        let sources: Vec<RelationSource> =
            self.graphs.iter().cloned().map(RelationSource::Detached).collect();
        let agg = aggregate(&mut tape, &sources, Some((&net_cfg, &staged_psi)), self.ctx.len())?;

        let terms = total_loss(&mut tape, z, agg.g, p, &self.codes, &self.pairs, weights)?;
        tape.backward(terms.total)?;

        let grad_of = |tape: &Tape, v: Var| {
            tape.grad(v).cloned().unwrap_or_else(|| {
                let (r, c) = tape.value(v).shape();
                Mat::zeros(r, c)
            })
        };
        Ok(MiniGrads {
            loss: tape.value(terms.total).scalar(),
            encoder: staged_enc.vars.iter().map(|&v| grad_of(&tape, v)).collect(),
            expander: staged_exp.vars.iter().map(|&v| grad_of(&tape, v)).collect(),
            prototypes: grad_of(&tape, c_var),
            psi: staged_psi.vars.iter().map(|&v| grad_of(&tape, v)).collect(),
        })
    }

    fn flat_grads(&self, params: &[Mat], weights: &LossWeights) -> exgrg_core::Result<Vec<Mat>> {
        let g = self.evaluate(params, weights)?;
        let mut out = g.encoder;
        out.extend(g.expander);
        out.push(g.prototypes);
        out.extend(g.psi);
        Ok(out)
    }
}

// ---- criterion 1: gradient oracle ------------------------------------------------

#[test]
fn criterion_01_gradient_oracle() {
    let started = Instant::now();
    let mini = MiniInstance::build(5);
    let weights = mini.weights;
    let mut params = mini.flatten_params();
    let err = finite_diff_check(
        |ps| mini.evaluate(ps, &weights).map(|g| g.loss),
        |ps| mini.flat_grads(ps, &weights),
        &mut params,
        1e-5,
    )
    .unwrap();
    let elapsed = started.elapsed();
    let ok = err < 1e-4 && elapsed.as_secs_f64() < 10.0;
    verdict(
        1,
        "gradient oracle",
        ok,
        &format!("max relative error {err:.3e} over {} coordinates in {elapsed:.2?}",
            params.iter().map(Mat::len).sum::<usize>()),
    );
}

// ---- criterion 2: gradient routing -------------------------------------------------

#[test]
fn criterion_02_gradient_routing() {
    let mini = MiniInstance::build(6);
    let params = mini.flatten_params();
    let norm = |mats: &[Mat]| mats.iter().map(Mat::frobenius_norm).sum::<f64>();

    // only gamma: prototypes silent, encoder live
    let only_gamma = LossWeights { alpha: 0.0, beta: 0.0, gamma: 1.0, alpha1: 0.0, alpha2: 0.0 };
    let g = mini.evaluate(&params, &only_gamma).unwrap();
    let gamma_ok = g.prototypes.frobenius_norm() == 0.0 && norm(&g.encoder) > 0.0;

    // only alpha1: aggregator silent, prototypes live
    let only_a1 = LossWeights { alpha: 0.0, beta: 0.0, gamma: 0.0, alpha1: 1.0, alpha2: 0.0 };
    let a1 = mini.evaluate(&params, &only_a1).unwrap();
    let a1_ok = norm(&a1.psi) == 0.0 && a1.prototypes.frobenius_norm() > 0.0;

    // only alpha2: nothing but the aggregator moves
    let only_a2 = LossWeights { alpha: 0.0, beta: 0.0, gamma: 0.0, alpha1: 0.0, alpha2: 1.0 };
    let a2 = mini.evaluate(&params, &only_a2).unwrap();
    let a2_ok = norm(&a2.encoder) == 0.0
        && norm(&a2.expander) == 0.0
        && a2.prototypes.frobenius_norm() == 0.0
        && norm(&a2.psi) > 0.0;

    verdict(
        2,
        "gradient routing",
        gamma_ok && a1_ok && a2_ok,
        &format!(
            "gamma: dC={:.1e} dTheta={:.3e}; alpha1: dPsi={:.1e} dC={:.3e}; alpha2: dTheta={:.1e} dPsi={:.3e}",
            g.prototypes.frobenius_norm(),
            norm(&g.encoder),
            norm(&a1.psi),
            a1.prototypes.frobenius_norm(),
            norm(&a2.encoder),
            norm(&a2.psi)
        ),
    );
}

// ---- criterion 3: sinkhorn ---------------------------------------------------------

#[test]
fn criterion_03_sinkhorn_marginals() {
    let mut rng = exgrg_core::rng::seeded(3, "acceptance", 0);
    let bank = PrototypeBank::new(16, 12, 0.1, 0.05, 6, &mut rng).unwrap();
    // random well-scaled scores: spread comparable to epsilon
    let mut h = exgrg_core::nn::glorot_uniform(64, 12, &mut rng);
    h.scale(0.2);
    let q = sinkhorn_codes(&h, &bank).unwrap();

    let mut worst_row = 0.0f64;
    for i in 0..64 {
        let sum: f64 = q.row(i).iter().sum();
        worst_row = worst_row.max((sum - 1.0 / 64.0).abs());
    }
    let mut worst_col = 0.0f64;
    for j in 0..16 {
        let sum: f64 = (0..64).map(|i| q.get(i, j)).sum();
        worst_col = worst_col.max((sum - 1.0 / 16.0).abs());
    }

    let uniform = sinkhorn_codes(&Mat::zeros(64, 12), &bank).unwrap();
    let worst_uniform = uniform
        .data()
        .iter()
        .fold(0.0f64, |m, &v| m.max((v - 1.0 / (64.0 * 16.0)).abs()));

    let ok = worst_row < 1e-12 && worst_col < 1e-6 && worst_uniform < 1e-12;
    verdict(
        3,
        "sinkhorn",
        ok,
        &format!(
            "row deviation {worst_row:.2e}, column deviation {worst_col:.2e}, uniform deviation {worst_uniform:.2e}"
        ),
    );
}

// ---- criterion 4: spectral ----------------------------------------------------------

#[test]
fn criterion_04_spectral() {
    // P3 normalized Laplacian spectrum {0, 1, 2}
    let p3 = {
        let adj = CsrMatrix::from_coo(
            3,
            3,
            &[(0, 1, 1.0), (1, 0, 1.0), (1, 2, 1.0), (2, 1, 1.0)],
        );
        SourceGraph::new(adj, Mat::zeros(3, 1), None).unwrap()
    };
    let l = laplacian(&p3, true);
    let spec = eigendecompose_symmetric(&l).unwrap();
    let eig_ok = spec
        .eigenvalues
        .iter()
        .zip([0.0, 1.0, 2.0])
        .all(|(got, want)| (got - want).abs() < 1e-10);

    // residuals on P3 and random symmetric matrices
    let mut rng = exgrg_core::rng::seeded(4, "acceptance", 0);
    let mut residual_ok = true;
    let mut worst_residual = 0.0f64;
    let mut check = |m: &Mat| {
        let spec = eigendecompose_symmetric(m).unwrap();
        let n = m.rows();
        for (i, &ev) in spec.eigenvalues.iter().enumerate() {
            let mut res = 0.0f64;
            for r in 0..n {
                let mut acc = 0.0;
                for c in 0..n {
                    acc += m.get(r, c) * spec.eigenvectors.get(c, i);
                }
                let d = acc - ev * spec.eigenvectors.get(r, i);
                res += d * d;
            }
            let res = res.sqrt();
            worst_residual = worst_residual.max(res / ev.abs().max(1.0));
            residual_ok &= res <= 1e-8 * ev.abs().max(1.0);
        }
    };
    check(&l);
    for n in [5usize, 9, 16] {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let v = exgrg_core::nn::glorot_uniform(1, 1, &mut rng).scalar();
                m.set(i, j, v);
                m.set(j, i, v);
            }
        }
        check(&m);
    }

    // LapPE skips exactly one zero mode on a connected graph
    let enc = lappe(&p3, 2, true).unwrap();
    let skip_ok = enc.matrix.cols() == 2 && lappe(&p3, 3, true).is_err();

    // two disjoint triangles: 6 nodes, 2 zero modes, so freq 5 must error
    let mut entries = Vec::new();
    for base in [0usize, 3] {
        for (a, b) in [(0, 1), (0, 2), (1, 2)] {
            entries.push((base + a, base + b, 1.0));
            entries.push((base + b, base + a, 1.0));
        }
    }
    let triangles =
        SourceGraph::new(CsrMatrix::from_coo(6, 6, &entries), Mat::zeros(6, 1), None).unwrap();
    let overflow_err = lappe(&triangles, 5, true).is_err() && lappe(&triangles, 4, true).is_ok();

    let ok = eig_ok && residual_ok && skip_ok && overflow_err;
    verdict(
        4,
        "spectral",
        ok,
        &format!(
            "P3 eigenvalues ok={eig_ok}, worst relative residual {worst_residual:.2e}, zero-mode skip ok={skip_ok}, overflow error ok={overflow_err}"
        ),
    );
}

// ---- criterion 5: rwse exactness ----------------------------------------------------

#[test]
fn criterion_05_rwse() {
    let k2 = SourceGraph::new(
        CsrMatrix::from_coo(2, 2, &[(0, 1, 1.0), (1, 0, 1.0)]),
        Mat::zeros(2, 1),
        None,
    )
    .unwrap();
    let enc = rwse(&k2, 6).unwrap();
    let mut k2_ok = true;
    for node in 0..2 {
        for (step, want) in [0.0, 1.0, 0.0, 1.0, 0.0, 1.0].iter().enumerate() {
            k2_ok &= enc.matrix.get(node, step) == *want;
        }
    }

    let k3 = {
        let mut entries = Vec::new();
        for (a, b) in [(0, 1), (0, 2), (1, 2)] {
            entries.push((a, b, 1.0));
            entries.push((b, a, 1.0));
        }
        SourceGraph::new(CsrMatrix::from_coo(3, 3, &entries), Mat::zeros(3, 1), None).unwrap()
    };
    let enc = rwse(&k3, 3).unwrap();
    let mut k3_ok = true;
    for node in 0..3 {
        k3_ok &= enc.matrix.get(node, 0) == 0.0
            && enc.matrix.get(node, 1) == 0.5
            && enc.matrix.get(node, 2) == 0.25;
    }

    // exact permutation equivariance on 50 random graphs
    use rand::Rng;
    let mut rng = exgrg_core::rng::seeded(5, "acceptance", 0);
    let mut perm_ok = true;
    for trial in 0..50u64 {
        let g = generate_sbm(3, 5, 0.5, 0.2, 3, 1000 + trial).unwrap();
        let n = g.num_nodes;
        let mut perm: Vec<usize> = (0..n).collect();
        for i in 0..n - 1 {
            let j = rng.gen_range(i..n);
            perm.swap(i, j);
        }
        let mut entries = Vec::new();
        for (r, c, v) in g.adjacency.iter_entries() {
            entries.push((perm[r], perm[c], v));
        }
        let pg =
            SourceGraph::new(CsrMatrix::from_coo(n, n, &entries), Mat::zeros(n, 1), None).unwrap();
        let e = rwse(&g, 5).unwrap();
        let pe = rwse(&pg, 5).unwrap();
        for i in 0..n {
            for k in 0..5 {
                perm_ok &= e.matrix.get(i, k).to_bits() == pe.matrix.get(perm[i], k).to_bits();
            }
        }
    }

    verdict(
        5,
        "rwse exactness",
        k2_ok && k3_ok && perm_ok,
        &format!("K2 ok={k2_ok}, K3 ok={k3_ok}, 50-graph permutation equivariance ok={perm_ok}"),
    );
}

// ---- criterion 6: signnet invariance -------------------------------------------------

#[test]
fn criterion_06_signnet_invariance() {
    use rand::Rng;
    let g = generate_sbm(3, 6, 0.6, 0.15, 4, 77).unwrap();
    let mut rng = exgrg_core::rng::seeded(6, "acceptance", 0);
    let phi = Mlp::new(&[1, 8, 4], Activation::Relu, Norm::None, true, &mut rng);
    let rho = Mlp::new(&[4, 8, 3], Activation::Relu, Norm::None, true, &mut rng);
    let base = lappe(&g, 3, true).unwrap();

    let run = |eigvecs: &Mat| {
        let mut tape = Tape::new();
        let sp = phi.stage(&mut tape, false);
        let sr = rho.stage(&mut tape, false);
        let out = signnet_forward(
            &mut tape,
            &sp,
            &sr,
            eigvecs,
            exgrg_core::pse::SignNetArch::DeepSet,
        )
        .unwrap();
        tape.value(out).clone()
    };
    let reference = run(&base.matrix);
    let mut ok = true;
    for _ in 0..100 {
        let mut flipped = base.matrix.clone();
        for j in 0..flipped.cols() {
            if rng.gen::<bool>() {
                for r in 0..flipped.rows() {
                    flipped.set(r, j, -flipped.get(r, j));
                }
            }
        }
        let out = run(&flipped);
        ok &= reference
            .data()
            .iter()
            .zip(out.data())
            .all(|(a, b)| a.to_bits() == b.to_bits());
    }
    verdict(6, "signnet invariance", ok, "100 random sign patterns, bitwise equality");
}

// ---- criterion 7: top-k oracles -------------------------------------------------------

#[test]
fn criterion_07_topk_oracles() {
    use rand::Rng;
    let mut rng = exgrg_core::rng::seeded(7, "acceptance", 0);
    let n = 200;
    let mut s = Mat::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            // coarse value grid engineers plenty of exact ties
            s.set(i, j, rng.gen_range(0..32) as f64 / 32.0);
        }
    }

    let k = 7;
    let fast = f_k_rowwise(&s, k);
    let mut slow = Vec::new();
    for i in 0..n {
        let mut row: Vec<(usize, f64)> = (0..n).map(|j| (j, s.get(i, j))).collect();
        row.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        for &(j, v) in row.iter().take(k) {
            slow.push((i, j, v));
        }
    }
    slow.sort_unstable_by_key(|&(r, c, _)| (r, c));
    let rowwise_ok = fast == slow;

    let kg = 1234;
    let fast = f_k_global(&s, kg);
    let mut all: Vec<(usize, usize, f64)> = (0..n)
        .flat_map(|i| (0..n).map(move |j| (i, j)))
        .map(|(i, j)| (i, j, s.get(i, j)))
        .collect();
    all.sort_by(|a, b| b.2.total_cmp(&a.2).then((a.0 * n + a.1).cmp(&(b.0 * n + b.1))));
    let mut slow: Vec<(usize, usize, f64)> = all.into_iter().take(kg).collect();
    slow.sort_unstable_by_key(|&(r, c, _)| (r, c));
    let global_ok = fast == slow;

    verdict(
        7,
        "top-k oracles",
        rowwise_ok && global_ok,
        &format!("row-wise support equal={rowwise_ok}, global support equal={global_ok} on 200x200 with ties"),
    );
}

// ---- criterion 8: rank-deficiency diagnostic -------------------------------------------

#[test]
fn criterion_08_rank_deficiency() {
    let mut ok = true;
    let mut detail = String::new();
    for (m, batch_n) in [(8usize, 8usize), (30, 16), (50, 24)] {
        let g = generate_sbm(2, m / 2, 0.5, 0.2, 3, m as u64).unwrap();
        let mut rng = exgrg_core::rng::seeded(8, "acceptance", m as u64);
        let pair = build_views(
            &g,
            &AugmentConfig::identity(),
            &AugmentConfig::identity(),
            MaskGranularity::PerDimension,
            &mut rng,
        );
        let batch = sample_batch(&pair, batch_n, &mut rng).unwrap();
        let ctx = BatchContext::new(&batch, g.num_nodes);
        let aug = g_aug(&ctx);
        let (zeros, components) = laplacian_rank_diagnostic(&aug).unwrap();
        ok &= zeros == batch_n / 2 && components == batch_n / 2;
        detail.push_str(&format!("N={batch_n}: zeros={zeros} components={components}; "));
    }
    verdict(8, "rank-deficiency diagnostic", ok, detail.trim_end_matches("; "));
}

// ---- criteria 9 and 11: collapse regression + determinism -------------------------------

/// Desk-scale configuration for the collapse regression: a seeded 4-block
/// SBM with D_H=64, D_Z=128 and a relation-graph mixture whose aggregation
/// coefficients respond quickly to the per-graph statistics.
fn collapse_config(alpha2: f64) -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.seed = 99;
    cfg.batch_size = 256;
    cfg.iterations = 1500;
    cfg.learning_rate = 2e-3;
    cfg.encoder.hidden = 64;
    cfg.encoder.dim = 64;
    cfg.expander.hidden = 128;
    cfg.expander.dim = 128;
    cfg.relgraph.knn_k = 4;
    cfg.relgraph.lappe_k = 4;
    cfg.relgraph.lappe_freq = 8;
    cfg.relgraph.rwse_k = 4;
    cfg.relgraph.rwse_kernel = 8;
    cfg.relgraph.signnet_k = 4;
    cfg.relgraph.signnet_freq = 4;
    cfg.cluster.k = 8;
    cfg.cluster.kg_ratio = 4;
    cfg.aggregator.layers = 2;
    cfg.aggregator.stat_scale = 2e-3;
    cfg.augment1 = AugmentConfig { edge_drop_prob: 0.3, feature_mask_prob: 0.3 };
    cfg.augment2 = AugmentConfig { edge_drop_prob: 0.3, feature_mask_prob: 0.3 };
    cfg.weights = LossWeights { alpha: 100.0, beta: 50.0, gamma: 2.0, alpha1: 2.0, alpha2 };
    cfg
}

fn collapse_graph() -> SourceGraph {
    generate_sbm(4, 100, 0.1, 0.01, 16, 2024).unwrap()
}

struct CollapseRun {
    rank_z_default: usize,
    rank_h_collapse: usize,
    final_mass: f64,
    csv: Vec<String>,
}

fn run_collapse(cfg: TrainConfig, g: &SourceGraph) -> CollapseRun {
    let mut session = TrainSession::new(g, cfg).unwrap();
    let mut csv = Vec::new();
    let mut final_mass = 0.0;
    session
        .run(g, |i, r| {
            csv.push(metrics_csv_row(i, r));
            final_mass = -r.regularizer; // sum of squared mixture entries
            Ok(())
        })
        .unwrap();
    let h = encode_source(&session.model, g).unwrap();
    let z = expand_representations(&session.model, &h).unwrap();
    CollapseRun {
        rank_z_default: metric_rank(&z, RANK_TOLERANCE).unwrap(),
        rank_h_collapse: metric_rank(&h, COLLAPSE_RANK_TOLERANCE).unwrap(),
        final_mass,
        csv,
    }
}

#[test]
fn criterion_09_collapse_regression_and_11_determinism() {
    let started = Instant::now();
    let g = collapse_graph();
    let full = run_collapse(collapse_config(5.0), &g);
    let ablation = run_collapse(collapse_config(0.0), &g);
    let elapsed = started.elapsed();

    let rank_z_ok = full.rank_z_default as f64 >= 0.9 * 128.0;
    let rank_h_ok = ablation.rank_h_collapse as f64 <= 0.25 * 64.0;
    // the degenerate pressure itself: without the regularizer the mixture's
    // mass decays; with it the mass is held up
    let mass_ok = ablation.final_mass < 0.75 * full.final_mass;
    let time_ok = elapsed.as_secs_f64() < 600.0;
    verdict(
        9,
        "collapse regression",
        rank_z_ok && rank_h_ok && mass_ok && time_ok,
        &format!(
            "full rank_Z={}/128 (tol {RANK_TOLERANCE:.0e}), ablation rank_H={}/64 (tol {COLLAPSE_RANK_TOLERANCE:.0e}), mixture mass {} vs {} (full), {elapsed:.1?}",
            full.rank_z_default,
            ablation.rank_h_collapse,
            ablation.final_mass.round(),
            full.final_mass.round()
        ),
    );

    // criterion 11: identical seed, identical trace
    let repeat = run_collapse(collapse_config(5.0), &g);
    let identical = repeat.csv == full.csv;
    verdict(
        11,
        "determinism",
        identical,
        &format!("two full runs produced {} identical metric rows", full.csv.len()),
    );
}

// ---- criterion 10: desk-scale real-data run ----------------------------------------------

fn cora_dir() -> Option<std::path::PathBuf> {
    if let Ok(dir) = std::env::var("EXGRG_CORA_DIR") {
        let p = std::path::PathBuf::from(dir);
        if p.join("edges.txt").exists() {
            return Some(p);
        }
    }
    // repo-relative fallback: crates/core/tests -> workspace root
    let p = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/cora");
    p.join("edges.txt").exists().then_some(p)
}

#[test]
fn criterion_10_desk_scale_real_data() {
    let Some(dir) = cora_dir() else {
        println!(
            "acceptance criterion 10 (desk-scale run): SKIP - no dataset at ./data/cora or \
             $EXGRG_CORA_DIR (edges.txt, features.csv, labels.txt); this environment has no \
             network access to fetch it"
        );
        return;
    };
    let started = Instant::now();
    let g = load_graph(
        &dir.join("edges.txt"),
        &dir.join("features.csv"),
        Some(&dir.join("labels.txt")),
    )
    .unwrap();

    let mut cfg = TrainConfig::default();
    cfg.seed = 7;
    cfg.batch_size = 512;
    cfg.iterations = 1000;
    cfg.learning_rate = 5e-4;
    cfg.encoder.hidden = 256;
    cfg.encoder.dim = 128;
    cfg.expander.hidden = 256;
    cfg.expander.dim = 256;
    // loss weights from the published per-dataset table
    cfg.weights = LossWeights { alpha: 100.0, beta: 80.0, gamma: 5.0, alpha1: 0.2, alpha2: 0.5 };
    cfg.relgraph.knn_k = 32;
    cfg.relgraph.lappe_k = 8;
    cfg.relgraph.lappe_freq = 32;
    cfg.relgraph.rwse_k = 80;
    cfg.relgraph.rwse_kernel = 24;
    cfg.relgraph.rwse_mode = GraphMode::Raw;
    cfg.relgraph.signnet_k = 4;
    cfg.relgraph.signnet_freq = 10;
    cfg.cluster.k = 64;
    cfg.cluster.kg_ratio = 12;
    cfg.probe.trials = 5;

    let mut session = TrainSession::new(&g, cfg.clone()).unwrap();
    // trailing 500-iteration windows: snapshot the embedding spread at each
    // window boundary
    let mut window_stds = Vec::new();
    while session.iteration < cfg.iterations {
        session.step(&g).unwrap();
        if session.iteration % 500 == 0 {
            let h = encode_source(&session.model, &g).unwrap();
            let z = expand_representations(&session.model, &h).unwrap();
            window_stds.push(metric_std(&z).unwrap());
        }
    }
    let h = encode_source(&session.model, &g).unwrap();
    let labels = g.labels.as_ref().unwrap();
    let trained = run_probe_trials(&h, labels, &cfg.probe, cfg.seed).unwrap();
    let baseline = run_probe_trials(&g.features, labels, &cfg.probe, cfg.seed).unwrap();
    let (trained_mean, trained_std) = mean_std(&trained);
    let (baseline_mean, baseline_std) = mean_std(&baseline);
    let elapsed = started.elapsed();

    let margin_ok = trained_mean >= baseline_mean + 0.10;
    let monotone_ok = window_stds.windows(2).all(|w| w[1] > w[0]);
    let time_ok = elapsed.as_secs_f64() < 1800.0;
    verdict(
        10,
        "desk-scale run",
        margin_ok && monotone_ok && time_ok,
        &format!(
            "probe {:.4}±{:.4} vs raw-feature baseline {:.4}±{:.4} over 5 trials; window stds {:?}; {elapsed:.1?}",
            trained_mean, trained_std, baseline_mean, baseline_std, window_stds
        ),
    );
}

// ---- criterion 12: checkpoint round-trip ---------------------------------------------------

#[test]
fn criterion_12_checkpoint_round_trip() {
    let g = generate_sbm(3, 10, 0.5, 0.1, 6, 31).unwrap();
    let mut cfg = TrainConfig::default();
    cfg.seed = 13;
    cfg.batch_size = 16;
    cfg.iterations = 6;
    cfg.encoder.hidden = 8;
    cfg.encoder.dim = 6;
    cfg.expander.hidden = 8;
    cfg.expander.dim = 8;
    cfg.relgraph.knn_k = 3;
    cfg.relgraph.lappe_k = 3;
    cfg.relgraph.lappe_freq = 4;
    cfg.relgraph.rwse_k = 3;
    cfg.relgraph.rwse_kernel = 4;
    cfg.relgraph.signnet_k = 3;
    cfg.relgraph.signnet_freq = 3;
    cfg.relgraph.signnet_phi_hidden = 4;
    cfg.relgraph.signnet_phi_dim = 4;
    cfg.cluster.k = 4;
    cfg.cluster.kg_ratio = 2;

    // uninterrupted trace
    let mut full = TrainSession::new(&g, cfg.clone()).unwrap();
    let mut full_rows = Vec::new();
    full.run(&g, |i, r| {
        full_rows.push(metrics_csv_row(i, r));
        Ok(())
    })
    .unwrap();

    // interrupted at 3, checkpointed, restored, resumed
    let mut first = TrainSession::new(&g, cfg).unwrap();
    let mut rows = Vec::new();
    for _ in 0..3 {
        let idx = first.iteration;
        let r = first.step(&g).unwrap();
        rows.push(metrics_csv_row(idx, &r));
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.bin");
    save_checkpoint(&path, &first.model, &first.optimizer, &first.cfg, first.iteration).unwrap();
    let restored = load_checkpoint(&path).unwrap();

    // bitwise parameter equality
    let mut resumed = TrainSession::from_checkpoint(&g, restored).unwrap();
    let mut bitwise = true;
    let before: BTreeMap<String, Mat> = first.model.named_params().into_iter().collect();
    resumed.model.visit_params(&mut |name, m| {
        let b = &before[&name];
        bitwise &= b.data().iter().zip(m.data()).all(|(x, y)| x.to_bits() == y.to_bits());
    });

    resumed
        .run(&g, |i, r| {
            rows.push(metrics_csv_row(i, r));
            Ok(())
        })
        .unwrap();
    let trajectory = rows == full_rows;

    verdict(
        12,
        "checkpoint round-trip",
        bitwise && trajectory,
        &format!("bitwise parameters={bitwise}, resumed trajectory matches={trajectory}"),
    );
}

// ---- alignment pair audit used by the mini instance ----------------------------------------

#[test]
fn mini_instance_alignment_is_consistent() {
    // sanity net on the shared fixture: the alignment loss over the frozen
    // codes is finite and the mixture coefficients stay normalised
    let mini = MiniInstance::build(17);
    let params = mini.flatten_params();
    let g = mini.evaluate(&params, &mini.weights).unwrap();
    assert!(g.loss.is_finite());
    let mut tape = Tape::new();
    let p = tape.constant(Mat::filled(8, 4, 0.25));
    let loss = ot_alignment_loss(&mut tape, p, &mini.codes, &mini.pairs).unwrap();
    assert!(tape.value(loss).scalar().is_finite());
}
