//! Relation graphs over a mini-batch: sparse nonnegative matrices whose
//! entries say how strongly two batch rows should share a representation.
//! One generator per information source (augmentation pairs, kNN in
//! representation space, source adjacency, node encodings, cluster
//! assignments), primitive filters for sparsification and normalisation,
//! and the learnable aggregation that mixes everything into the matrix the
//! invariance loss consumes.

use crate::autodiff::{Tape, Var};
use crate::dense::{self, Mat};
use crate::graph::{BatchContext, SourceGraph};
use crate::nn::{mlp_forward, Mlp, StagedMlp};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SourceKind {
    Aug,
    Knn,
    Adj,
    AdjFiltered,
    Lappe,
    Rwse,
    RwseFiltered,
    Signnet,
    Cluster,
}

impl SourceKind {
    pub fn name(self) -> &'static str {
        match self {
            SourceKind::Aug => "aug",
            SourceKind::Knn => "knn",
            SourceKind::Adj => "adj",
            SourceKind::AdjFiltered => "adj_filtered",
            SourceKind::Lappe => "lappe",
            SourceKind::Rwse => "rwse",
            SourceKind::RwseFiltered => "rwse_filtered",
            SourceKind::Signnet => "signnet",
            SourceKind::Cluster => "cluster",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "aug" => SourceKind::Aug,
            "knn" => SourceKind::Knn,
            "adj" => SourceKind::Adj,
            "adj_filtered" => SourceKind::AdjFiltered,
            "lappe" => SourceKind::Lappe,
            "rwse" => SourceKind::Rwse,
            "rwse_filtered" => SourceKind::RwseFiltered,
            "signnet" => SourceKind::Signnet,
            "cluster" => SourceKind::Cluster,
            other => return Err(Error::Config(format!("unknown relation graph kind '{other}'"))),
        })
    }
}

/// Sparse nonnegative relation matrix over `n` batch rows. Entries are kept
/// sorted row-major; the diagonal is always empty. Entries may carry weight
/// zero when a normalisation stage maps a kept position to the bottom of its
/// range; they still count as structural nonzeros.
#[derive(Clone, Debug, PartialEq)]
pub struct RelationGraph {
    pub n: usize,
    pub kind: SourceKind,
    entries: Vec<(usize, usize, f64)>,
}

impl RelationGraph {
    pub fn from_entries(n: usize, kind: SourceKind, mut entries: Vec<(usize, usize, f64)>) -> Self {
        entries.sort_unstable_by_key(|&(r, c, _)| (r, c));
        debug_assert!(entries.iter().all(|&(r, c, w)| r != c && r < n && c < n && w >= 0.0));
        RelationGraph { n, kind, entries }
    }

    pub fn empty(n: usize, kind: SourceKind) -> Self {
        RelationGraph { n, kind, entries: Vec::new() }
    }

    pub fn entries(&self) -> &[(usize, usize, f64)] {
        &self.entries
    }

    /// Structural nonzero count.
    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    pub fn weight_sum(&self) -> f64 {
        let mut acc = 0.0;
        for &(_, _, w) in &self.entries {
            acc += w;
        }
        acc
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries
            .binary_search_by_key(&(i, j), |&(r, c, _)| (r, c))
            .map(|pos| self.entries[pos].2)
            .unwrap_or(0.0)
    }

    pub fn has_entry(&self, i: usize, j: usize) -> bool {
        self.entries.binary_search_by_key(&(i, j), |&(r, c, _)| (r, c)).is_ok()
    }

    pub fn max_row_nnz(&self) -> usize {
        let mut counts = vec![0usize; self.n];
        for &(r, _, _) in &self.entries {
            counts[r] += 1;
        }
        counts.into_iter().max().unwrap_or(0)
    }

    pub fn to_dense(&self) -> Mat {
        let mut m = Mat::zeros(self.n, self.n);
        for &(r, c, w) in &self.entries {
            m.set(r, c, w);
        }
        m
    }
}

/// Which batch-row pairs a generator may relate. Inter-view pairs are always
/// allowed; intra-view pairs only when enabled.
#[derive(Clone, Debug)]
pub struct PairPolicy {
    pub intra: bool,
    views: Vec<u8>,
}

impl PairPolicy {
    pub fn new(batch: &BatchContext, intra: bool) -> Self {
        PairPolicy { intra, views: batch.views.clone() }
    }

    /// Policy over `n` rows that admits every off-diagonal pair.
    pub fn permissive(n: usize) -> Self {
        PairPolicy { intra: true, views: vec![0; n] }
    }

    #[inline]
    pub fn allows(&self, i: usize, j: usize) -> bool {
        i != j && (self.intra || self.views[i] != self.views[j])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    Cosine,
    NegEuclidean,
}

impl Metric {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(Metric::Cosine),
            "neg_euclidean" => Ok(Metric::NegEuclidean),
            other => Err(Error::Config(format!("unknown similarity metric '{other}'"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Metric::Cosine => "cosine",
            Metric::NegEuclidean => "neg_euclidean",
        }
    }
}

/// Dense pairwise similarities between rows, diagonal zeroed. Cosine maps
/// zero rows to zero similarity; `neg_euclidean` is the negated distance.
pub fn similarity_matrix(rows: &Mat, metric: Metric) -> Mat {
    let n = rows.rows();
    let mut s = match metric {
        Metric::Cosine => {
            let mut normalized = rows.clone();
            for i in 0..n {
                let norm = normalized.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm > 1e-12 {
                    for v in normalized.row_mut(i) {
                        *v /= norm;
                    }
                } else {
                    normalized.row_mut(i).fill(0.0);
                }
            }
            let mut out = Mat::zeros(n, n);
            dense::gram_into(&mut out, &normalized, &normalized);
            out
        }
        Metric::NegEuclidean => dense::pairwise_sqdist(rows).map(|d| -d.sqrt()),
    };
    for i in 0..n {
        s.set(i, i, 0.0);
    }
    s
}

/// Keep the `k` largest entries of each row (ties toward the lower column
/// index), zero the rest. Returns the surviving entries with raw values.
pub fn f_k_rowwise(s: &Mat, k: usize) -> Vec<(usize, usize, f64)> {
    f_k_rowwise_masked(s, k, |_, _| true)
}

/// Row-wise top-k restricted to positions the mask admits.
pub fn f_k_rowwise_masked(
    s: &Mat,
    k: usize,
    allowed: impl Fn(usize, usize) -> bool,
) -> Vec<(usize, usize, f64)> {
    assert!(k >= 1, "f_k needs k >= 1");
    let (rows, cols) = s.shape();
    let mut out = Vec::new();
    let mut candidates: Vec<(usize, f64)> = Vec::with_capacity(cols);
    for i in 0..rows {
        candidates.clear();
        for (j, &v) in s.row(i).iter().enumerate() {
            if allowed(i, j) {
                candidates.push((j, v));
            }
        }
        candidates.sort_unstable_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        for &(j, v) in candidates.iter().take(k) {
            out.push((i, j, v));
        }
    }
    out.sort_unstable_by_key(|&(r, c, _)| (r, c));
    out
}

/// Keep the `k_global` largest entries of the whole matrix (ties toward the
/// lower flattened index), zero the rest.
pub fn f_k_global(s: &Mat, k_global: usize) -> Vec<(usize, usize, f64)> {
    f_k_global_masked(s, k_global, |_, _| true)
}

pub fn f_k_global_masked(
    s: &Mat,
    k_global: usize,
    allowed: impl Fn(usize, usize) -> bool,
) -> Vec<(usize, usize, f64)> {
    assert!(k_global >= 1, "f_K needs K_g >= 1");
    let (rows, cols) = s.shape();
    let mut candidates: Vec<(usize, f64)> = Vec::new();
    for i in 0..rows {
        for (j, &v) in s.row(i).iter().enumerate() {
            if allowed(i, j) {
                candidates.push((i * cols + j, v));
            }
        }
    }
    candidates.sort_unstable_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut out: Vec<(usize, usize, f64)> = candidates
        .into_iter()
        .take(k_global)
        .map(|(flat, v)| (flat / cols, flat % cols, v))
        .collect();
    out.sort_unstable_by_key(|&(r, c, _)| (r, c));
    out
}

/// Min-max normalisation to [0, 1] over all entries; a constant matrix maps
/// to all zeros.
pub fn f_n_normalize(s: &Mat) -> Mat {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in s.data() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if hi <= lo {
        return Mat::zeros(s.rows(), s.cols());
    }
    let span = hi - lo;
    s.map(|v| (v - lo) / span)
}

/// Map top-k survivor values to the nonnegative weights the relation graph
/// stores: cosine similarities clamp at zero; negated distances are min-max
/// scaled per row into [0, 1] (a row whose kept values are all equal maps to
/// weight 1 so its neighbors are not erased).
fn survivor_weights(entries: Vec<(usize, usize, f64)>, metric: Metric, n: usize) -> Vec<(usize, usize, f64)> {
    match metric {
        Metric::Cosine => entries
            .into_iter()
            .map(|(r, c, v)| (r, c, v.max(0.0)))
            .collect(),
        Metric::NegEuclidean => {
            let mut lo = vec![f64::INFINITY; n];
            let mut hi = vec![f64::NEG_INFINITY; n];
            for &(r, _, v) in &entries {
                lo[r] = lo[r].min(v);
                hi[r] = hi[r].max(v);
            }
            entries
                .into_iter()
                .map(|(r, c, v)| {
                    let w = if hi[r] > lo[r] { (v - lo[r]) / (hi[r] - lo[r]) } else { 1.0 };
                    (r, c, w)
                })
                .collect()
        }
    }
}

// ---- generators ----------------------------------------------------------------

/// Augmentation relation graph: weight 1 between the two view rows of every
/// sampled source node, in both directions.
pub fn g_aug(batch: &BatchContext) -> RelationGraph {
    let mut entries = Vec::with_capacity(batch.pairs.len() * 2);
    for &(i, j) in &batch.pairs {
        entries.push((i, j, 1.0));
        entries.push((j, i, 1.0));
    }
    RelationGraph::from_entries(batch.len(), SourceKind::Aug, entries)
}

/// kNN relation graph over detached batch representations.
pub fn g_knn(h_batch: &Mat, k: usize, metric: Metric, policy: &PairPolicy) -> RelationGraph {
    let n = h_batch.rows();
    let sim = similarity_matrix(h_batch, metric);
    let kept = f_k_rowwise_masked(&sim, k, |i, j| policy.allows(i, j));
    RelationGraph::from_entries(n, SourceKind::Knn, survivor_weights(kept, metric, n))
}

/// Source-adjacency relation graph: batch rows relate when their source
/// nodes are adjacent. Adjacency is a source-level property, so all four
/// view combinations of an edge are honored (intra-view ones only when the
/// policy admits them).
pub fn g_adj(g: &SourceGraph, batch: &BatchContext, policy: &PairPolicy) -> RelationGraph {
    let n = batch.len();
    let mut entries = Vec::new();
    for i in 0..n {
        for j in 0..n {
            if policy.allows(i, j)
                && batch.sources[i] != batch.sources[j]
                && g.adjacency.has_entry(batch.sources[i], batch.sources[j])
            {
                entries.push((i, j, 1.0));
            }
        }
    }
    RelationGraph::from_entries(n, SourceKind::Adj, entries)
}

/// Elementwise product of two relation graphs over their common support.
fn elementwise_product(a: &RelationGraph, b: &RelationGraph, kind: SourceKind) -> RelationGraph {
    debug_assert_eq!(a.n, b.n);
    let entries = a
        .entries()
        .iter()
        .filter_map(|&(r, c, va)| {
            b.has_entry(r, c).then(|| (r, c, va * b.get(r, c)))
        })
        .collect();
    RelationGraph::from_entries(a.n, kind, entries)
}

/// Filtered adjacency `G^A (.) G^k`: retains the kNN soft weights on pairs
/// that are also source-adjacent.
pub fn g_adj_filtered(adj: &RelationGraph, knn: &RelationGraph) -> RelationGraph {
    elementwise_product(adj, knn, SourceKind::AdjFiltered)
}

/// Relation graph from a node encoding: batch rows are compared through the
/// encoding rows of their source nodes.
pub fn g_pse(
    encoding: &Mat,
    batch: &BatchContext,
    k: usize,
    metric: Metric,
    kind: SourceKind,
    policy: &PairPolicy,
) -> RelationGraph {
    let n = batch.len();
    let mut rows = Mat::zeros(n, encoding.cols());
    for (pos, &src) in batch.sources.iter().enumerate() {
        rows.row_mut(pos).copy_from_slice(encoding.row(src));
    }
    let sim = similarity_matrix(&rows, metric);
    let kept = f_k_rowwise_masked(&sim, k, |i, j| policy.allows(i, j));
    RelationGraph::from_entries(n, kind, survivor_weights(kept, metric, n))
}

/// Filtered RWSE graph `G^R (.) G^k`.
pub fn g_rwse_filtered(rwse: &RelationGraph, knn: &RelationGraph) -> RelationGraph {
    elementwise_product(rwse, knn, SourceKind::RwseFiltered)
}

/// How the cluster relation graph is sparsified.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClusterSparsifier {
    /// Top `K_g` entries over the whole matrix (the default).
    Global,
    /// Row-wise top-k with `k = max(1, K_g / N)`.
    RowWise,
}

/// Cluster-assignment relation graph: negative cross-entropy between
/// assignment rows, min-max normalised, then sparsified to `k_global`
/// entries. `p` must be detached and row-stochastic.
pub fn g_cluster(
    p: &Mat,
    k_global: usize,
    sparsifier: ClusterSparsifier,
    policy: &PairPolicy,
) -> RelationGraph {
    let n = p.rows();
    let kc = p.cols();
    let log_p: Mat = p.map(f64::ln);
    // G^P[i][j] = sum_k P[i][k] * log P[j][k], diagonal excluded
    let mut gp = Mat::zeros(n, n);
    dense::gram_into(&mut gp, p, &log_p);
    let _ = kc;

    // min-max over admitted off-diagonal entries only
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for i in 0..n {
        for j in 0..n {
            if policy.allows(i, j) {
                let v = gp.get(i, j);
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
    }
    let normalized = if hi > lo {
        let span = hi - lo;
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                if policy.allows(i, j) {
                    m.set(i, j, (gp.get(i, j) - lo) / span);
                }
            }
        }
        m
    } else {
        Mat::zeros(n, n)
    };
    let kept = match sparsifier {
        ClusterSparsifier::Global => {
            f_k_global_masked(&normalized, k_global, |i, j| policy.allows(i, j))
        }
        ClusterSparsifier::RowWise => {
            let k = (k_global / n).max(1);
            f_k_rowwise_masked(&normalized, k, |i, j| policy.allows(i, j))
        }
    };
    RelationGraph::from_entries(n, SourceKind::Cluster, kept)
}

// ---- statistics and aggregation ---------------------------------------------------

/// Raw per-graph statistics fed to the aggregator: total entry weight and
/// structural nonzero count.
pub fn stats_f_s(rg: &RelationGraph) -> (f64, f64) {
    (rg.weight_sum(), rg.nnz() as f64)
}

/// Dense-matrix variant: sum of entries and count of nonzero entries.
pub fn stats_f_s_dense(m: &Mat) -> (f64, f64) {
    let mut sum = 0.0;
    let mut count = 0usize;
    for &v in m.data() {
        sum += v;
        if v != 0.0 {
            count += 1;
        }
    }
    (sum, count as f64)
}

/// The hypernetwork that maps per-graph statistics to a mixing logit.
/// Input is the two scaled statistics; output one logit per graph.
#[derive(Clone, Debug)]
pub struct AggregatorNet {
    pub net: Mlp,
    /// Statistics are divided by N^2, shifted, and scaled before the MLP.
    pub stat_shift: f64,
    pub stat_scale: f64,
}

impl AggregatorNet {
    pub fn new(
        num_layers: usize,
        hidden_ratio: usize,
        stat_shift: f64,
        stat_scale: f64,
        rng: &mut rand_chacha::ChaCha8Rng,
    ) -> Self {
        assert!(num_layers >= 1);
        let hidden = 2 * hidden_ratio.max(1);
        let mut dims = vec![2];
        for _ in 0..num_layers.saturating_sub(1) {
            dims.push(hidden);
        }
        dims.push(1);
        // ELU keeps every hidden unit differentiable-alive on the two-point
        // statistics input; biases cancel in the softmax over graphs
        AggregatorNet {
            net: Mlp::new(&dims, crate::nn::Activation::Elu, crate::nn::Norm::None, true, rng)
                .without_biases(),
            stat_shift,
            stat_scale,
        }
    }

    pub fn scaled_stats(&self, raw: (f64, f64), n: usize) -> (f64, f64) {
        let denom = (n * n) as f64;
        (
            (raw.0 / denom - self.stat_shift) / self.stat_scale,
            (raw.1 / denom - self.stat_shift) / self.stat_scale,
        )
    }
}

/// One input to the aggregation step. Generators run on detached values; the
/// on-tape variant exists for the ablation that trains the SignNet encoder
/// through the invariance term.
pub enum RelationSource {
    Detached(RelationGraph),
    OnTape { kind: SourceKind, values: Var, stats: (f64, f64) },
}

impl RelationSource {
    pub fn kind(&self) -> SourceKind {
        match self {
            RelationSource::Detached(rg) => rg.kind,
            RelationSource::OnTape { kind, .. } => *kind,
        }
    }

    fn raw_stats(&self) -> (f64, f64) {
        match self {
            RelationSource::Detached(rg) => stats_f_s(rg),
            RelationSource::OnTape { stats, .. } => *stats,
        }
    }
}

/// Result of mixing the relation graphs on the tape.
pub struct Aggregated {
    /// Dense N x N mixture, on-tape through the coefficients.
    pub g: Var,
    /// 1 x n_graphs softmax-normalised coefficients.
    pub lambdas: Var,
    pub kinds: Vec<SourceKind>,
}

/// Mix relation graphs with softmax-normalised coefficients from the
/// hypernetwork: `G = sum_i lambda_i G^(i)`. Statistics enter as constants,
/// so gradients reach only the hypernetwork parameters (and, through the
/// matrix values, any on-tape source). With no hypernetwork staged the
/// coefficients are fixed and uniform.
pub fn aggregate(
    tape: &mut Tape,
    sources: &[RelationSource],
    net: Option<(&AggregatorNet, &StagedMlp)>,
    n: usize,
) -> Result<Aggregated> {
    if sources.is_empty() {
        return Err(Error::InvalidInput("aggregate needs at least one relation graph".into()));
    }
    let lambdas = match net {
        Some((cfg, staged)) => {
            let mut logits = Vec::with_capacity(sources.len());
            for source in sources {
                let (s1, s2) = cfg.scaled_stats(source.raw_stats(), n);
                let input = tape.constant(Mat::from_vec(1, 2, vec![s1, s2]));
                let logit = mlp_forward(tape, &staged.layers, input)?;
                logits.push(logit);
            }
            let packed = tape.concat_scalars(&logits)?;
            tape.row_softmax(packed, 1.0)?
        }
        None => {
            let uniform = 1.0 / sources.len() as f64;
            tape.constant(Mat::filled(1, sources.len(), uniform))
        }
    };

    let mut mixed: Option<Var> = None;
    for (i, source) in sources.iter().enumerate() {
        let dense_var = match source {
            RelationSource::Detached(rg) => tape.constant(rg.to_dense()),
            RelationSource::OnTape { values, .. } => *values,
        };
        let coeff = tape.entry(lambdas, 0, i)?;
        let term = tape.scalar_tensor_mul(coeff, dense_var)?;
        mixed = Some(match mixed {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }

    Ok(Aggregated {
        g: mixed.expect("non-empty sources"),
        lambdas,
        kinds: sources.iter().map(RelationSource::kind).collect(),
    })
}

/// Threshold an aggregated relation matrix into a constant 0/1 matrix (the
/// binary-G ablation). The result is off-tape: a hard threshold has zero
/// derivative almost everywhere, so no gradient path survives it.
pub fn binarize(tape: &mut Tape, g: Var, threshold: f64) -> Var {
    let values = tape.value(g).map(|v| if v >= threshold { 1.0 } else { 0.0 });
    tape.constant(values)
}
