//! Graph data model: dataset ingestion, synthetic generation, stochastic
//! augmentation, and assembly of the two-view mini-batch structure the
//! trainer consumes.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::dense::Mat;
use crate::sparse::CsrMatrix;
use crate::{Error, Result};

/// An undirected attributed graph: symmetric 0/1 adjacency without
/// self-loops, dense node features, optional integer labels.
#[derive(Clone, Debug)]
pub struct SourceGraph {
    pub num_nodes: usize,
    pub adjacency: CsrMatrix,
    pub features: Mat,
    pub labels: Option<Vec<usize>>,
    pub num_classes: Option<usize>,
}

impl SourceGraph {
    pub fn new(adjacency: CsrMatrix, features: Mat, labels: Option<Vec<usize>>) -> Result<Self> {
        let num_nodes = features.rows();
        if adjacency.rows() != num_nodes || adjacency.cols() != num_nodes {
            return Err(Error::InvalidInput(format!(
                "adjacency is {}x{} but there are {} feature rows",
                adjacency.rows(),
                adjacency.cols(),
                num_nodes
            )));
        }
        let num_classes = match &labels {
            Some(l) => {
                if l.len() != num_nodes {
                    return Err(Error::InvalidInput(format!(
                        "{} labels for {} nodes",
                        l.len(),
                        num_nodes
                    )));
                }
                Some(l.iter().copied().max().map_or(0, |m| m + 1))
            }
            None => None,
        };
        debug_assert!(adjacency.is_symmetric());
        debug_assert!((0..num_nodes).all(|i| !adjacency.has_entry(i, i)));
        Ok(SourceGraph { num_nodes, adjacency, features, labels, num_classes })
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    /// Undirected edges as (u, v) with u < v.
    pub fn undirected_edges(&self) -> Vec<(usize, usize)> {
        self.adjacency
            .iter_entries()
            .filter(|&(u, v, _)| u < v)
            .map(|(u, v, _)| (u, v))
            .collect()
    }
}

/// Per-view augmentation probabilities.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentConfig {
    /// Probability of dropping each undirected edge.
    pub edge_drop_prob: f64,
    /// Probability of zeroing a feature column (or a node's feature row when
    /// `mask_per_node` is set on the trainer config).
    pub feature_mask_prob: f64,
}

impl AugmentConfig {
    pub fn new(edge_drop_prob: f64, feature_mask_prob: f64) -> Result<Self> {
        for (name, p) in [("edge_drop_prob", edge_drop_prob), ("feature_mask_prob", feature_mask_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidInput(format!("{name} = {p} outside [0,1]")));
            }
        }
        Ok(AugmentConfig { edge_drop_prob, feature_mask_prob })
    }

    pub fn identity() -> Self {
        AugmentConfig { edge_drop_prob: 0.0, feature_mask_prob: 0.0 }
    }
}

/// How feature masking is applied.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskGranularity {
    /// Zero whole feature dimensions across all nodes (the default).
    PerDimension,
    /// Zero whole node rows.
    PerNode,
}

/// Two augmented views stacked into one 2M-node block graph.
#[derive(Clone, Debug)]
pub struct ViewPair {
    pub view1: SourceGraph,
    pub view2: SourceGraph,
    /// Block-diagonal adjacency over the stacked 2M nodes; no cross-view edges.
    pub block_adjacency: CsrMatrix,
    /// Rows 0..M from view1, rows M..2M from view2.
    pub stacked_features: Mat,
}

impl ViewPair {
    pub fn source_nodes(&self) -> usize {
        self.view1.num_nodes
    }

    pub fn stacked_nodes(&self) -> usize {
        2 * self.view1.num_nodes
    }
}

/// A sampled mini-batch over the stacked rows of a [`ViewPair`].
#[derive(Clone, Debug)]
pub struct MiniBatchIndex {
    /// Distinct row indices into the stacked 2M rows.
    pub batch_nodes: Vec<usize>,
    /// Positions (i, j) into `batch_nodes`, i < j, pairing the two view rows
    /// of each sampled source node.
    pub augment_pairs: Vec<(usize, usize)>,
}

impl MiniBatchIndex {
    pub fn len(&self) -> usize {
        self.batch_nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.batch_nodes.is_empty()
    }
}

// ---- ingestion -------------------------------------------------------------

fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))
}

fn parse_edge_list(path: &Path) -> Result<Vec<(usize, usize)>> {
    let text = read_to_string(path)?;
    let mut edges = Vec::new();
    for (line_no, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut it = line.split_whitespace();
        let parse = |tok: Option<&str>, what: &str| -> Result<usize> {
            let tok = tok.ok_or_else(|| Error::Parse {
                path: path.display().to_string(),
                line: line_no + 1,
                msg: format!("missing {what} node id"),
            })?;
            tok.parse().map_err(|_| Error::Parse {
                path: path.display().to_string(),
                line: line_no + 1,
                msg: format!("invalid {what} node id '{tok}'"),
            })
        };
        let u = parse(it.next(), "source")?;
        let v = parse(it.next(), "target")?;
        if it.next().is_some() {
            return Err(Error::Parse {
                path: path.display().to_string(),
                line: line_no + 1,
                msg: "more than two fields on edge line".into(),
            });
        }
        edges.push((u, v));
    }
    Ok(edges)
}

fn parse_feature_csv(path: &Path) -> Result<Mat> {
    let text = read_to_string(path)?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut width = None;
    for (line_no, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut row = Vec::new();
        for (col_no, tok) in line.split(',').enumerate() {
            let v: f64 = tok.trim().parse().map_err(|_| Error::Parse {
                path: path.display().to_string(),
                line: line_no + 1,
                msg: format!("column {}: invalid number '{}'", col_no + 1, tok.trim()),
            })?;
            row.push(v);
        }
        match width {
            None => width = Some(row.len()),
            Some(w) if w != row.len() => {
                return Err(Error::Parse {
                    path: path.display().to_string(),
                    line: line_no + 1,
                    msg: format!("expected {w} columns, found {}", row.len()),
                })
            }
            _ => {}
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Parse {
            path: path.display().to_string(),
            line: 1,
            msg: "no feature rows".into(),
        });
    }
    Ok(Mat::from_rows(&rows))
}

fn parse_labels(path: &Path, expected: usize) -> Result<Vec<usize>> {
    let text = read_to_string(path)?;
    let mut labels = Vec::new();
    for (line_no, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let v: usize = line.parse().map_err(|_| Error::Parse {
            path: path.display().to_string(),
            line: line_no + 1,
            msg: format!("invalid label '{line}'"),
        })?;
        labels.push(v);
    }
    if labels.len() != expected {
        return Err(Error::Parse {
            path: path.display().to_string(),
            line: labels.len(),
            msg: format!("{} labels for {} nodes", labels.len(), expected),
        });
    }
    Ok(labels)
}

/// Build the canonical symmetric, deduplicated, self-loop-free adjacency.
fn symmetrize(num_nodes: usize, edges: &[(usize, usize)]) -> CsrMatrix {
    let mut entries = Vec::with_capacity(edges.len() * 2);
    for &(u, v) in edges {
        if u == v {
            continue;
        }
        entries.push((u, v, 1.0));
        entries.push((v, u, 1.0));
    }
    let mut csr = CsrMatrix::from_coo(num_nodes, num_nodes, &entries);
    // duplicate edges summed during assembly; force weights back to 1
    let ones: Vec<(usize, usize, f64)> =
        csr.iter_entries().map(|(r, c, _)| (r, c, 1.0)).collect();
    csr = CsrMatrix::from_coo(num_nodes, num_nodes, &ones);
    csr
}

/// Load a graph from an edge-list file, a feature CSV (M rows, no header),
/// and an optional label file (one integer per line). The node count is the
/// number of feature rows; edges are symmetrised, deduplicated, and stripped
/// of self-loops.
pub fn load_graph(
    edge_list_path: &Path,
    features_path: &Path,
    labels_path: Option<&Path>,
) -> Result<SourceGraph> {
    let features = parse_feature_csv(features_path)?;
    let num_nodes = features.rows();
    let edges = parse_edge_list(edge_list_path)?;
    for &(u, v) in &edges {
        if u >= num_nodes || v >= num_nodes {
            return Err(Error::InvalidInput(format!(
                "edge ({u}, {v}) references a node >= {num_nodes}"
            )));
        }
    }
    let adjacency = symmetrize(num_nodes, &edges);
    let labels = labels_path.map(|p| parse_labels(p, num_nodes)).transpose()?;
    SourceGraph::new(adjacency, features, labels)
}

/// Stochastic-block-model graph: `blocks * nodes_per_block` nodes, intra-block
/// edge probability `p_in`, inter-block `p_out`. Features are a one-hot block
/// signal plus seeded Gaussian-ish noise; labels are the block ids.
pub fn generate_sbm(
    blocks: usize,
    nodes_per_block: usize,
    p_in: f64,
    p_out: f64,
    feature_dim: usize,
    seed: u64,
) -> Result<SourceGraph> {
    if blocks == 0 || nodes_per_block == 0 {
        return Err(Error::InvalidInput("sbm needs at least one node".into()));
    }
    if feature_dim == 0 {
        return Err(Error::InvalidInput("sbm feature_dim must be positive".into()));
    }
    for (name, p) in [("p_in", p_in), ("p_out", p_out)] {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::InvalidInput(format!("{name} = {p} outside [0,1]")));
        }
    }
    let n = blocks * nodes_per_block;
    let block_of = |i: usize| i / nodes_per_block;
    let mut rng = crate::rng::seeded(seed, "sbm", 0);
    let mut edges = Vec::new();
    for u in 0..n {
        for v in (u + 1)..n {
            let p = if block_of(u) == block_of(v) { p_in } else { p_out };
            if p > 0.0 && rng.gen::<f64>() < p {
                edges.push((u, v));
            }
        }
    }
    let adjacency = symmetrize(n, &edges);

    const NOISE_STD: f64 = 0.1;
    let mut features = Mat::zeros(n, feature_dim);
    for i in 0..n {
        let hot = block_of(i) % feature_dim;
        for (j, x) in features.row_mut(i).iter_mut().enumerate() {
            // sum of uniforms approximates a Gaussian well enough for a testbed
            let noise: f64 = (0..4).map(|_| rng.gen_range(-0.5..0.5)).sum::<f64>() * NOISE_STD;
            *x = noise + if j == hot { 1.0 } else { 0.0 };
        }
    }
    let labels = (0..n).map(block_of).collect();
    SourceGraph::new(adjacency, features, Some(labels))
}

/// One augmented view: every undirected edge dropped independently with
/// probability `p^e`, feature columns (default) or rows zeroed with
/// probability `p^n`. The node set never changes.
pub fn augment(
    g: &SourceGraph,
    cfg: &AugmentConfig,
    granularity: MaskGranularity,
    rng: &mut ChaCha8Rng,
) -> SourceGraph {
    let kept: Vec<(usize, usize)> = g
        .undirected_edges()
        .into_iter()
        .filter(|_| cfg.edge_drop_prob < 1.0 && rng.gen::<f64>() >= cfg.edge_drop_prob)
        .collect();
    let adjacency = symmetrize(g.num_nodes, &kept);

    let mut features = g.features.clone();
    match granularity {
        MaskGranularity::PerDimension => {
            for j in 0..features.cols() {
                if cfg.feature_mask_prob > 0.0 && rng.gen::<f64>() < cfg.feature_mask_prob {
                    for i in 0..features.rows() {
                        features.set(i, j, 0.0);
                    }
                }
            }
        }
        MaskGranularity::PerNode => {
            for i in 0..features.rows() {
                if cfg.feature_mask_prob > 0.0 && rng.gen::<f64>() < cfg.feature_mask_prob {
                    features.row_mut(i).fill(0.0);
                }
            }
        }
    }

    SourceGraph {
        num_nodes: g.num_nodes,
        adjacency,
        features,
        labels: None,
        num_classes: None,
    }
}

/// Two independent augmentations assembled into the stacked two-view input:
/// block-diagonal adjacency and features with view-1 rows first.
pub fn build_views(
    g: &SourceGraph,
    cfg1: &AugmentConfig,
    cfg2: &AugmentConfig,
    granularity: MaskGranularity,
    rng: &mut ChaCha8Rng,
) -> ViewPair {
    let view1 = augment(g, cfg1, granularity, rng);
    let view2 = augment(g, cfg2, granularity, rng);
    let m = g.num_nodes;

    let mut entries = Vec::with_capacity(view1.adjacency.nnz() + view2.adjacency.nnz());
    for (r, c, v) in view1.adjacency.iter_entries() {
        entries.push((r, c, v));
    }
    for (r, c, v) in view2.adjacency.iter_entries() {
        entries.push((r + m, c + m, v));
    }
    let block_adjacency = CsrMatrix::from_coo(2 * m, 2 * m, &entries);

    let d = g.feature_dim();
    let mut stacked = Mat::zeros(2 * m, d);
    for i in 0..m {
        stacked.row_mut(i).copy_from_slice(view1.features.row(i));
        stacked.row_mut(i + m).copy_from_slice(view2.features.row(i));
    }

    ViewPair { view1, view2, block_adjacency, stacked_features: stacked }
}

/// Sample `batch_size / 2` source nodes without replacement and include both
/// view rows of each, so every batch row belongs to exactly one augment pair.
pub fn sample_batch(
    pair: &ViewPair,
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<MiniBatchIndex> {
    let m = pair.source_nodes();
    if batch_size == 0 || batch_size % 2 != 0 {
        return Err(Error::InvalidInput(format!(
            "batch size must be even and positive, got {batch_size}"
        )));
    }
    if batch_size > 2 * m {
        return Err(Error::InvalidInput(format!(
            "batch size {batch_size} exceeds {} stacked rows",
            2 * m
        )));
    }
    let picks = batch_size / 2;
    // partial Fisher-Yates over the source nodes
    let mut nodes: Vec<usize> = (0..m).collect();
    for i in 0..picks {
        let j = rng.gen_range(i..m);
        nodes.swap(i, j);
    }
    let mut batch_nodes = Vec::with_capacity(batch_size);
    let mut augment_pairs = Vec::with_capacity(picks);
    for (t, &s) in nodes[..picks].iter().enumerate() {
        batch_nodes.push(s);
        batch_nodes.push(s + m);
        augment_pairs.push((2 * t, 2 * t + 1));
    }
    Ok(MiniBatchIndex { batch_nodes, augment_pairs })
}

/// Batch rows resolved against the stacked layout: which view and which
/// source node each position refers to.
#[derive(Clone, Debug)]
pub struct BatchContext {
    pub rows: Vec<usize>,
    pub views: Vec<u8>,
    pub sources: Vec<usize>,
    pub pairs: Vec<(usize, usize)>,
}

impl BatchContext {
    pub fn new(batch: &MiniBatchIndex, source_nodes: usize) -> Self {
        let views = batch
            .batch_nodes
            .iter()
            .map(|&r| u8::from(r >= source_nodes))
            .collect();
        let sources = batch
            .batch_nodes
            .iter()
            .map(|&r| if r >= source_nodes { r - source_nodes } else { r })
            .collect();
        BatchContext {
            rows: batch.batch_nodes.clone(),
            views,
            sources,
            pairs: batch.augment_pairs.clone(),
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// Train/validation/test node-id splits.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Splits {
    /// Random disjoint splits by ratio (remainder goes to test).
    pub fn random(num_nodes: usize, train_ratio: f64, val_ratio: f64, rng: &mut ChaCha8Rng) -> Self {
        let mut order: Vec<usize> = (0..num_nodes).collect();
        for i in 0..num_nodes.saturating_sub(1) {
            let j = rng.gen_range(i..num_nodes);
            order.swap(i, j);
        }
        let n_train = ((num_nodes as f64) * train_ratio).round() as usize;
        let n_val = ((num_nodes as f64) * val_ratio).round() as usize;
        let n_train = n_train.min(num_nodes);
        let n_val = n_val.min(num_nodes - n_train);
        Splits {
            train: order[..n_train].to_vec(),
            val: order[n_train..n_train + n_val].to_vec(),
            test: order[n_train + n_val..].to_vec(),
        }
    }

    /// Parse the three-section split file ("train:", "val:", "test:" lines,
    /// each followed by comma-separated node ids on the same line).
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = read_to_string(path)?;
        let mut train = None;
        let mut val = None;
        let mut test = None;
        for (line_no, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (section, rest) = line.split_once(':').ok_or_else(|| Error::Parse {
                path: path.display().to_string(),
                line: line_no + 1,
                msg: "expected 'train:', 'val:' or 'test:'".into(),
            })?;
            let ids: Vec<usize> = rest
                .split(',')
                .map(str::trim)
                .filter(|t| !t.is_empty())
                .map(|t| {
                    t.parse().map_err(|_| Error::Parse {
                        path: path.display().to_string(),
                        line: line_no + 1,
                        msg: format!("invalid node id '{t}'"),
                    })
                })
                .collect::<Result<_>>()?;
            match section.trim() {
                "train" => train = Some(ids),
                "val" => val = Some(ids),
                "test" => test = Some(ids),
                other => {
                    return Err(Error::Parse {
                        path: path.display().to_string(),
                        line: line_no + 1,
                        msg: format!("unknown split section '{other}'"),
                    })
                }
            }
        }
        match (train, val, test) {
            (Some(train), Some(val), Some(test)) => Ok(Splits { train, val, test }),
            _ => Err(Error::Parse {
                path: path.display().to_string(),
                line: 0,
                msg: "split file must contain train:, val: and test: lines".into(),
            }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::io::Write;

    fn write_tmp(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn load_graph_symmetrizes() {
        let edges = write_tmp("0 1\n");
        let feats = write_tmp("1.0\n2.0\n");
        let g = load_graph(edges.path(), feats.path(), None).unwrap();
        assert_eq!(g.num_nodes, 2);
        assert!(g.adjacency.has_entry(0, 1));
        assert!(g.adjacency.has_entry(1, 0));
        assert_eq!(g.adjacency.nnz(), 2);
    }

    #[test]
    fn load_graph_drops_self_loops_and_dupes() {
        let edges = write_tmp("# comment\n0 1\n1 0\n2 2\n");
        let feats = write_tmp("1\n1\n1\n");
        let g = load_graph(edges.path(), feats.path(), None).unwrap();
        assert_eq!(g.undirected_edges(), vec![(0, 1)]);
        assert_eq!(g.adjacency.get(0, 1), 1.0);
        assert!(!g.adjacency.has_entry(2, 2));
    }

    #[test]
    fn load_graph_reports_parse_position() {
        let edges = write_tmp("0 x\n");
        let feats = write_tmp("1\n1\n");
        let err = load_graph(edges.path(), feats.path(), None).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains(":1:"), "missing line number in {msg}");
    }

    #[test]
    fn load_graph_rejects_out_of_range_endpoint() {
        let edges = write_tmp("0 5\n");
        let feats = write_tmp("1\n1\n");
        assert!(load_graph(edges.path(), feats.path(), None).is_err());
    }

    #[test]
    fn load_graph_rejects_wrong_label_count() {
        let edges = write_tmp("0 1\n");
        let feats = write_tmp("1\n1\n");
        let labels = write_tmp("0\n1\n0\n");
        assert!(load_graph(edges.path(), feats.path(), Some(labels.path())).is_err());
    }

    #[test]
    fn sbm_extremes() {
        // p_in=1, p_out=0: two disjoint triangles
        let g = generate_sbm(2, 3, 1.0, 0.0, 4, 9).unwrap();
        assert_eq!(g.undirected_edges().len(), 6);
        for (u, v) in g.undirected_edges() {
            assert_eq!(u / 3, v / 3, "unexpected cross-block edge ({u},{v})");
        }
        // p_in=0, p_out=0: empty adjacency
        let empty = generate_sbm(2, 3, 0.0, 0.0, 4, 9).unwrap();
        assert_eq!(empty.adjacency.nnz(), 0);
        assert_eq!(empty.labels.as_ref().unwrap()[5], 1);
        // determinism
        let a = generate_sbm(3, 5, 0.6, 0.1, 8, 1234).unwrap();
        let b = generate_sbm(3, 5, 0.6, 0.1, 8, 1234).unwrap();
        assert_eq!(a.adjacency, b.adjacency);
        assert_eq!(a.features, b.features);
    }

    #[test]
    fn sbm_zero_nodes_errors() {
        assert!(generate_sbm(0, 3, 0.5, 0.5, 4, 0).is_err());
        assert!(generate_sbm(3, 0, 0.5, 0.5, 4, 0).is_err());
    }

    #[test]
    fn augment_identity_and_extremes() {
        let g = generate_sbm(2, 4, 0.8, 0.2, 6, 3).unwrap();
        let mut rng = crate::rng::seeded(5, "aug", 0);
        let same = augment(&g, &AugmentConfig::identity(), MaskGranularity::PerDimension, &mut rng);
        assert_eq!(same.adjacency, g.adjacency);
        assert_eq!(same.features, g.features);

        let all_masked = augment(
            &g,
            &AugmentConfig::new(0.0, 1.0).unwrap(),
            MaskGranularity::PerDimension,
            &mut rng,
        );
        assert!(all_masked.features.data().iter().all(|&v| v == 0.0));
        assert_eq!(all_masked.adjacency, g.adjacency);

        let no_edges = augment(
            &g,
            &AugmentConfig::new(1.0, 0.0).unwrap(),
            MaskGranularity::PerDimension,
            &mut rng,
        );
        assert_eq!(no_edges.adjacency.nnz(), 0);
        assert_eq!(no_edges.features, g.features);
    }

    #[test]
    fn build_views_block_structure() {
        let g = generate_sbm(2, 2, 1.0, 0.0, 3, 1).unwrap();
        let mut rng = crate::rng::seeded(2, "views", 0);
        let pair = build_views(
            &g,
            &AugmentConfig::identity(),
            &AugmentConfig::identity(),
            MaskGranularity::PerDimension,
            &mut rng,
        );
        assert_eq!(pair.stacked_nodes(), 2 * g.num_nodes);
        // no cross-view edges
        let m = g.num_nodes;
        for (r, c, _) in pair.block_adjacency.iter_entries() {
            assert_eq!(r < m, c < m, "cross-view edge ({r},{c})");
        }
        // zero-prob views equal the source
        assert_eq!(pair.view1.adjacency, g.adjacency);
        assert_eq!(pair.view2.features, g.features);
        for i in 0..m {
            assert_eq!(pair.stacked_features.row(i), g.features.row(i));
            assert_eq!(pair.stacked_features.row(i + m), g.features.row(i));
        }
    }

    #[test]
    fn distinct_seeds_give_distinct_views() {
        let g = generate_sbm(2, 10, 0.9, 0.3, 6, 7).unwrap();
        let cfg = AugmentConfig::new(0.5, 0.5).unwrap();
        let mut r1 = crate::rng::seeded(100, "views", 0);
        let mut r2 = crate::rng::seeded(200, "views", 0);
        let p1 = build_views(&g, &cfg, &cfg, MaskGranularity::PerDimension, &mut r1);
        let p2 = build_views(&g, &cfg, &cfg, MaskGranularity::PerDimension, &mut r2);
        assert!(
            p1.view1.adjacency != p2.view1.adjacency || p1.view1.features != p2.view1.features
        );
    }

    #[test]
    fn sample_batch_edges_cases() {
        let g = generate_sbm(2, 3, 0.5, 0.5, 4, 0).unwrap();
        let mut rng = crate::rng::seeded(0, "batch", 0);
        let pair = build_views(
            &g,
            &AugmentConfig::identity(),
            &AugmentConfig::identity(),
            MaskGranularity::PerDimension,
            &mut rng,
        );
        // N = 2M covers every row
        let full = sample_batch(&pair, 2 * g.num_nodes, &mut rng).unwrap();
        assert_eq!(full.augment_pairs.len(), g.num_nodes);
        let mut sorted = full.batch_nodes.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..2 * g.num_nodes).collect::<Vec<_>>());
        // N = 2 gives one pair
        let tiny = sample_batch(&pair, 2, &mut rng).unwrap();
        assert_eq!(tiny.augment_pairs, vec![(0, 1)]);
        // errors
        assert!(sample_batch(&pair, 3, &mut rng).is_err());
        assert!(sample_batch(&pair, 2 * g.num_nodes + 2, &mut rng).is_err());
    }

    proptest! {
        /// Structural batch contract over many seeds: distinct rows, each row
        /// in exactly one pair, every pair spans the two views.
        #[test]
        fn batch_structure_holds(seed in 0u64..1000) {
            let g = generate_sbm(4, 25, 0.3, 0.05, 8, 42).unwrap();
            let mut rng = crate::rng::seeded(seed, "batch", 0);
            let pair = build_views(
                &g,
                &AugmentConfig::identity(),
                &AugmentConfig::identity(),
                MaskGranularity::PerDimension,
                &mut rng,
            );
            let batch = sample_batch(&pair, 40, &mut rng).unwrap();
            prop_assert_eq!(batch.batch_nodes.len(), 40);
            prop_assert_eq!(batch.augment_pairs.len(), 20);
            let mut seen = std::collections::HashSet::new();
            for &r in &batch.batch_nodes {
                prop_assert!(seen.insert(r), "duplicate row {}", r);
            }
            let mut used = vec![0usize; batch.batch_nodes.len()];
            let m = g.num_nodes;
            for &(i, j) in &batch.augment_pairs {
                prop_assert!(i < j);
                used[i] += 1;
                used[j] += 1;
                let (a, b) = (batch.batch_nodes[i], batch.batch_nodes[j]);
                prop_assert!(a < m && b >= m, "pair rows ({},{}) do not span views", a, b);
                prop_assert_eq!(a, b - m, "pair rows come from different sources");
            }
            prop_assert!(used.iter().all(|&u| u == 1));
        }
    }

    #[test]
    fn splits_parse_and_random() {
        let f = write_tmp("train: 0, 1\nval: 2\ntest: 3,4\n");
        let s = Splits::from_file(f.path()).unwrap();
        assert_eq!(s.train, vec![0, 1]);
        assert_eq!(s.val, vec![2]);
        assert_eq!(s.test, vec![3, 4]);

        let mut rng = crate::rng::seeded(3, "split", 0);
        let r = Splits::random(100, 0.1, 0.1, &mut rng);
        assert_eq!(r.train.len(), 10);
        assert_eq!(r.val.len(), 10);
        assert_eq!(r.test.len(), 80);
        let mut all: Vec<usize> =
            r.train.iter().chain(&r.val).chain(&r.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
    }
}
