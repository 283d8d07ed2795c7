//! Positional and structural node encodings computed once on the source
//! graph: Laplacian eigenvector positional encodings (LapPE), random-walk
//! return probabilities (RWSE), and the sign-invariant SignNet encoder.
//! Also hosts the dense symmetric eigensolver and the relation-graph
//! rank-deficiency diagnostic.
//!
//! The eigensolver is the classic two-stage dense routine: Householder
//! reduction to tridiagonal form followed by implicit-shift QL iteration
//! with accumulated transformations. It is O(n^3) and deterministic.

use crate::autodiff::{Tape, Var};
use crate::dense::Mat;
use crate::graph::SourceGraph;
use crate::nn::{mlp_forward, Mlp, StagedMlp};
use crate::relgraph::RelationGraph;
use crate::sparse::CsrMatrix;
use crate::{Error, Result};

/// Eigenvalues below this are treated as zero modes of a Laplacian.
pub const ZERO_EIGENVALUE_THRESHOLD: f64 = 1e-8;

/// Exact RWSE switches to Monte-Carlo estimation above this node count.
pub const RWSE_EXACT_MAX_NODES: usize = 5000;

/// Walks per node for the Monte-Carlo RWSE fallback.
pub const RWSE_MC_WALKS: usize = 1000;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EncodingKind {
    Lappe,
    Rwse,
    Signnet,
}

/// A per-node encoding matrix; one row per source node.
#[derive(Clone, Debug)]
pub struct Encoding {
    pub matrix: Mat,
    pub kind: EncodingKind,
    /// Frequency count (LapPE/SignNet) or kernel step count (RWSE).
    pub params: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SignNetArch {
    Mlp,
    DeepSet,
}

impl SignNetArch {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mlp" => Ok(SignNetArch::Mlp),
            "deepset" => Ok(SignNetArch::DeepSet),
            other => Err(Error::Config(format!("unknown signnet arch '{other}'"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SignNetArch::Mlp => "mlp",
            SignNetArch::DeepSet => "deepset",
        }
    }
}

// ---- Laplacians -------------------------------------------------------------

/// Unnormalized `L = D - A` or symmetric normalized
/// `L = I - D^{-1/2} A D^{-1/2}` (isolated nodes keep an identity row).
pub fn laplacian(g: &SourceGraph, normalized: bool) -> Mat {
    laplacian_of_adjacency(&g.adjacency, normalized)
}

pub fn laplacian_of_adjacency(adjacency: &CsrMatrix, normalized: bool) -> Mat {
    let n = adjacency.rows();
    let degrees = adjacency.row_sums();
    let mut l = Mat::zeros(n, n);
    if normalized {
        let inv_sqrt: Vec<f64> = degrees
            .iter()
            .map(|&d| if d > 0.0 { 1.0 / d.sqrt() } else { 0.0 })
            .collect();
        for i in 0..n {
            l.set(i, i, 1.0);
        }
        for (r, c, v) in adjacency.iter_entries() {
            l.set(r, c, l.get(r, c) - v * inv_sqrt[r] * inv_sqrt[c]);
        }
    } else {
        for i in 0..n {
            l.set(i, i, degrees[i]);
        }
        for (r, c, v) in adjacency.iter_entries() {
            l.set(r, c, l.get(r, c) - v);
        }
    }
    l
}

// ---- dense symmetric eigensolver ---------------------------------------------

/// Full spectrum of a symmetric matrix: ascending eigenvalues with
/// column-orthonormal, sign-canonicalized eigenvectors.
#[derive(Clone, Debug)]
pub struct SpectralDecomposition {
    pub eigenvalues: Vec<f64>,
    /// Column `i` is the eigenvector of `eigenvalues[i]`.
    pub eigenvectors: Mat,
}

const QL_MAX_ITERS_PER_EIGENVALUE: usize = 50;

pub fn eigendecompose_symmetric(matrix: &Mat) -> Result<SpectralDecomposition> {
    let n = matrix.rows();
    if matrix.cols() != n {
        return Err(Error::Shape {
            op: "eigendecompose_symmetric",
            detail: format!("{}x{} not square", n, matrix.cols()),
        });
    }
    if n == 0 {
        return Ok(SpectralDecomposition { eigenvalues: Vec::new(), eigenvectors: Mat::zeros(0, 0) });
    }
    let mut v = matrix.clone();
    let mut d = vec![0.0; n];
    let mut e = vec![0.0; n];
    tred2(&mut v, &mut d, &mut e);
    tql2(&mut v, &mut d, &mut e)?;
    sort_and_canonicalize(&mut v, &mut d);
    Ok(SpectralDecomposition { eigenvalues: d, eigenvectors: v })
}

/// Householder reduction of `v` (symmetric, overwritten with the accumulated
/// orthogonal transform) to tridiagonal form in `d` (diagonal) and `e`
/// (subdiagonal).
fn tred2(v: &mut Mat, d: &mut [f64], e: &mut [f64]) {
    let n = d.len();
    for (j, dj) in d.iter_mut().enumerate() {
        *dj = v.get(n - 1, j);
    }

    for i in (1..n).rev() {
        let mut scale = 0.0;
        let mut h = 0.0;
        for dk in d.iter().take(i) {
            scale += dk.abs();
        }
        if scale == 0.0 {
            e[i] = d[i - 1];
            for j in 0..i {
                d[j] = v.get(i - 1, j);
                v.set(i, j, 0.0);
                v.set(j, i, 0.0);
            }
        } else {
            for dk in d.iter_mut().take(i) {
                *dk /= scale;
                h += *dk * *dk;
            }
            let mut f = d[i - 1];
            let mut g = h.sqrt();
            if f > 0.0 {
                g = -g;
            }
            e[i] = scale * g;
            h -= f * g;
            d[i - 1] = f - g;
            for ej in e.iter_mut().take(i) {
                *ej = 0.0;
            }
            for j in 0..i {
                f = d[j];
                v.set(j, i, f);
                g = e[j] + v.get(j, j) * f;
                for k in (j + 1)..i {
                    g += v.get(k, j) * d[k];
                    e[k] += v.get(k, j) * f;
                }
                e[j] = g;
            }
            f = 0.0;
            for j in 0..i {
                e[j] /= h;
                f += e[j] * d[j];
            }
            let hh = f / (h + h);
            for j in 0..i {
                e[j] -= hh * d[j];
            }
            for j in 0..i {
                f = d[j];
                g = e[j];
                for k in j..i {
                    let val = v.get(k, j) - (f * e[k] + g * d[k]);
                    v.set(k, j, val);
                }
                d[j] = v.get(i - 1, j);
                v.set(i, j, 0.0);
            }
        }
        d[i] = h;
    }

    // accumulate the Householder transformations
    for i in 0..n.saturating_sub(1) {
        v.set(n - 1, i, v.get(i, i));
        v.set(i, i, 1.0);
        let h = d[i + 1];
        if h != 0.0 {
            for (k, dk) in d.iter_mut().enumerate().take(i + 1) {
                *dk = v.get(k, i + 1) / h;
            }
            for j in 0..=i {
                let mut g = 0.0;
                for k in 0..=i {
                    g += v.get(k, i + 1) * v.get(k, j);
                }
                for (k, dk) in d.iter().enumerate().take(i + 1) {
                    let val = v.get(k, j) - g * dk;
                    v.set(k, j, val);
                }
            }
        }
        for k in 0..=i {
            v.set(k, i + 1, 0.0);
        }
    }
    for (j, dj) in d.iter_mut().enumerate() {
        *dj = v.get(n - 1, j);
        v.set(n - 1, j, 0.0);
    }
    v.set(n - 1, n - 1, 1.0);
    e[0] = 0.0;
}

/// Implicit-shift QL iteration on the tridiagonal form, accumulating rotations
/// into `v`.
fn tql2(v: &mut Mat, d: &mut [f64], e: &mut [f64]) -> Result<()> {
    let n = d.len();
    for i in 1..n {
        e[i - 1] = e[i];
    }
    e[n - 1] = 0.0;

    let mut f = 0.0f64;
    let mut tst1 = 0.0f64;
    let eps = f64::EPSILON;
    for l in 0..n {
        tst1 = tst1.max(d[l].abs() + e[l].abs());
        let mut m = l;
        while m < n {
            if e[m].abs() <= eps * tst1 {
                break;
            }
            m += 1;
        }
        if m > l {
            let mut iter = 0;
            loop {
                iter += 1;
                if iter > QL_MAX_ITERS_PER_EIGENVALUE {
                    return Err(Error::EigenConvergence { residual: e[l].abs(), iters: iter });
                }
                let g = d[l];
                let mut p = (d[l + 1] - g) / (2.0 * e[l]);
                let mut r = p.hypot(1.0);
                if p < 0.0 {
                    r = -r;
                }
                d[l] = e[l] / (p + r);
                d[l + 1] = e[l] * (p + r);
                let dl1 = d[l + 1];
                let mut h = g - d[l];
                for di in d.iter_mut().take(n).skip(l + 2) {
                    *di -= h;
                }
                f += h;

                p = d[m];
                let mut c = 1.0;
                let mut c2 = c;
                let mut c3 = c;
                let el1 = e[l + 1];
                let mut s = 0.0;
                let mut s2 = 0.0;
                for i in (l..m).rev() {
                    c3 = c2;
                    c2 = c;
                    s2 = s;
                    let gg = c * e[i];
                    h = c * p;
                    r = p.hypot(e[i]);
                    e[i + 1] = s * r;
                    s = e[i] / r;
                    c = p / r;
                    p = c * d[i] - s * gg;
                    d[i + 1] = h + s * (c * gg + s * d[i]);
                    for k in 0..n {
                        h = v.get(k, i + 1);
                        v.set(k, i + 1, s * v.get(k, i) + c * h);
                        v.set(k, i, c * v.get(k, i) - s * h);
                    }
                }
                p = -s * s2 * c3 * el1 * e[l] / dl1;
                e[l] = s * p;
                d[l] = c * p;
                if e[l].abs() <= eps * tst1 {
                    break;
                }
            }
        }
        d[l] += f;
        e[l] = 0.0;
    }
    Ok(())
}

/// Ascending eigenvalue order; each eigenvector's largest-magnitude entry is
/// made positive (ties resolved toward the lowest row index).
fn sort_and_canonicalize(v: &mut Mat, d: &mut [f64]) {
    let n = d.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| d[a].total_cmp(&d[b]));
    let old_v = v.clone();
    let old_d = d.to_vec();
    for (new_col, &old_col) in order.iter().enumerate() {
        d[new_col] = old_d[old_col];
        let mut best = 0;
        let mut best_abs = -1.0;
        for r in 0..n {
            let a = old_v.get(r, old_col).abs();
            if a > best_abs {
                best_abs = a;
                best = r;
            }
        }
        let flip = if old_v.get(best, old_col) < 0.0 { -1.0 } else { 1.0 };
        for r in 0..n {
            v.set(r, new_col, flip * old_v.get(r, old_col));
        }
    }
}

// ---- LapPE -------------------------------------------------------------------

/// Columns of the decomposition that sit strictly above the zero threshold;
/// returns their indices in ascending eigenvalue order.
fn nonzero_mode_indices(spectrum: &SpectralDecomposition) -> Vec<usize> {
    spectrum
        .eigenvalues
        .iter()
        .enumerate()
        .filter(|(_, &ev)| ev > ZERO_EIGENVALUE_THRESHOLD)
        .map(|(i, _)| i)
        .collect()
}

/// Eigenvectors of the `freq` lowest non-zero Laplacian eigenvalues; one zero
/// mode is skipped per connected component.
pub fn lappe(g: &SourceGraph, freq: usize, normalized: bool) -> Result<Encoding> {
    let spectrum = eigendecompose_symmetric(&laplacian(g, normalized))?;
    let available = nonzero_mode_indices(&spectrum);
    if freq > available.len() {
        return Err(Error::InsufficientSpectrum { requested: freq, available: available.len() });
    }
    let n = g.num_nodes;
    let mut matrix = Mat::zeros(n, freq);
    for (out_col, &col) in available.iter().take(freq).enumerate() {
        for r in 0..n {
            matrix.set(r, out_col, spectrum.eigenvectors.get(r, col));
        }
    }
    Ok(Encoding { matrix, kind: EncodingKind::Lappe, params: freq })
}

// ---- RWSE --------------------------------------------------------------------

/// Sum `values` in a label-independent order (ascending by magnitude pattern)
/// so that relabeling graph nodes cannot change the floating-point result.
fn canonical_sum(values: &mut [f64]) -> f64 {
    values.sort_unstable_by(f64::total_cmp);
    let mut acc = 0.0;
    for v in values {
        acc += *v;
    }
    acc
}

/// `E[i][k] = ((D^{-1} A)^{k+1})_{ii}` for `k = 0..kernel-1`. Exact dense
/// propagation up to [`RWSE_EXACT_MAX_NODES`] nodes, seeded Monte-Carlo
/// estimation beyond. Isolated nodes get all-zero rows (and a warning).
pub fn rwse(g: &SourceGraph, kernel: usize) -> Result<Encoding> {
    if kernel == 0 {
        return Err(Error::InvalidInput("rwse kernel must be positive".into()));
    }
    let n = g.num_nodes;
    let degrees = g.adjacency.row_sums();
    if let Some(i) = degrees.iter().position(|&d| d == 0.0) {
        log::warn!("rwse: node {i} is isolated; its encoding row is zero");
    }
    let matrix = if n <= RWSE_EXACT_MAX_NODES {
        rwse_exact(g, kernel, &degrees)
    } else {
        rwse_monte_carlo(g, kernel, &degrees)
    };
    Ok(Encoding { matrix, kind: EncodingKind::Rwse, params: kernel })
}

fn rwse_exact(g: &SourceGraph, kernel: usize, degrees: &[f64]) -> Mat {
    let n = g.num_nodes;
    // walk matrix W = D^{-1} A as adjacency rows with weight 1/deg
    let neighbors: Vec<Vec<usize>> = (0..n)
        .map(|r| g.adjacency.row_entries(r).map(|(c, _)| c).collect())
        .collect();
    let mut out = Mat::zeros(n, kernel);
    // t holds W^(step) densely; updated as t <- W * t with canonical sums
    let mut t = Mat::zeros(n, n);
    for r in 0..n {
        if degrees[r] > 0.0 {
            let w = 1.0 / degrees[r];
            for &c in &neighbors[r] {
                t.set(r, c, w);
            }
        }
    }
    let mut buf: Vec<f64> = Vec::new();
    for step in 0..kernel {
        for i in 0..n {
            out.set(i, step, t.get(i, i));
        }
        if step + 1 == kernel {
            break;
        }
        let mut next = Mat::zeros(n, n);
        for r in 0..n {
            if degrees[r] == 0.0 {
                continue;
            }
            let w = 1.0 / degrees[r];
            for c in 0..n {
                buf.clear();
                for &nb in &neighbors[r] {
                    let v = t.get(nb, c);
                    if v != 0.0 {
                        buf.push(w * v);
                    }
                }
                if !buf.is_empty() {
                    next.set(r, c, canonical_sum(&mut buf));
                }
            }
        }
        t = next;
    }
    out
}

fn rwse_monte_carlo(g: &SourceGraph, kernel: usize, degrees: &[f64]) -> Mat {
    use rand::Rng;
    let n = g.num_nodes;
    let neighbors: Vec<Vec<usize>> = (0..n)
        .map(|r| g.adjacency.row_entries(r).map(|(c, _)| c).collect())
        .collect();
    let mut out = Mat::zeros(n, kernel);
    // fixed internal seed: the estimate is part of the deterministic pipeline
    let mut rng = crate::rng::seeded(0x5257_5345, "rwse-mc", n as u64);
    for start in 0..n {
        if degrees[start] == 0.0 {
            continue;
        }
        let mut counts = vec![0usize; kernel];
        for _ in 0..RWSE_MC_WALKS {
            let mut at = start;
            for (step, count) in counts.iter_mut().enumerate() {
                let nbrs = &neighbors[at];
                if nbrs.is_empty() {
                    break;
                }
                at = nbrs[rng.gen_range(0..nbrs.len())];
                if at == start {
                    *count += 1;
                }
                let _ = step;
            }
        }
        for (k, &c) in counts.iter().enumerate() {
            out.set(start, k, c as f64 / RWSE_MC_WALKS as f64);
        }
    }
    out
}

// ---- SignNet -----------------------------------------------------------------

/// Forward pass of the sign-invariant encoder on the tape: per eigenvector
/// column `u`, compute `phi(u) + phi(-u)`, then combine the per-frequency
/// blocks (concatenation for the MLP arch, summation for DeepSet) and apply
/// `rho`.
pub fn signnet_forward(
    tape: &mut Tape,
    phi: &StagedMlp,
    rho: &StagedMlp,
    eigvec_rows: &Mat,
    arch: SignNetArch,
) -> Result<Var> {
    let freq = eigvec_rows.cols();
    if freq == 0 {
        return Err(Error::InvalidInput("signnet needs at least one eigenvector".into()));
    }
    let rows = eigvec_rows.rows();
    let mut blocks = Vec::with_capacity(freq);
    for j in 0..freq {
        let col: Vec<f64> = (0..rows).map(|r| eigvec_rows.get(r, j)).collect();
        let pos = tape.constant(Mat::from_vec(rows, 1, col.clone()));
        let neg = tape.constant(Mat::from_vec(rows, 1, col.iter().map(|v| -v).collect()));
        let a = mlp_forward(tape, &phi.layers, pos)?;
        let b = mlp_forward(tape, &phi.layers, neg)?;
        blocks.push(tape.add(a, b)?);
    }
    let combined = match arch {
        SignNetArch::Mlp => tape.concat_cols(&blocks)?,
        SignNetArch::DeepSet => {
            let mut acc = blocks[0];
            for &b in &blocks[1..] {
                acc = tape.add(acc, b)?;
            }
            acc
        }
    };
    mlp_forward(tape, &rho.layers, combined)
}

/// Compute the SignNet encoding of a source graph from the `freq` lowest
/// non-zero Laplacian eigenvectors (same selection rule as LapPE).
pub fn signnet_encode(
    g: &SourceGraph,
    freq: usize,
    phi: &Mlp,
    rho: &Mlp,
    arch: SignNetArch,
    normalized: bool,
) -> Result<Encoding> {
    let base = lappe(g, freq, normalized)?;
    let expected_rho_in = match arch {
        SignNetArch::Mlp => freq * phi.output_dim(),
        SignNetArch::DeepSet => phi.output_dim(),
    };
    if rho.input_dim() != expected_rho_in {
        return Err(Error::Shape {
            op: "signnet_encode",
            detail: format!(
                "rho expects input dim {}, needs {} for {} arch with freq {}",
                rho.input_dim(),
                expected_rho_in,
                arch.name(),
                freq
            ),
        });
    }
    let mut tape = Tape::new();
    let phi_staged = phi.stage(&mut tape, false);
    let rho_staged = rho.stage(&mut tape, false);
    let out = signnet_forward(&mut tape, &phi_staged, &rho_staged, &base.matrix, arch)?;
    Ok(Encoding {
        matrix: tape.value(out).clone(),
        kind: EncodingKind::Signnet,
        params: freq,
    })
}

// ---- rank diagnostic -----------------------------------------------------------

/// Zero-eigenvalue count of the weighted Laplacian of a (symmetrized)
/// relation graph, together with the connected-component count of its
/// support. The two agree for any exactly-degenerate Laplacian.
pub fn laplacian_rank_diagnostic(rg: &RelationGraph) -> Result<(usize, usize)> {
    let n = rg.n;
    // symmetrize weights: w = (g + g^T) / 2
    let mut w = Mat::zeros(n, n);
    for &(i, j, v) in rg.entries() {
        w.set(i, j, w.get(i, j) + 0.5 * v);
        w.set(j, i, w.get(j, i) + 0.5 * v);
    }
    let mut l = Mat::zeros(n, n);
    for i in 0..n {
        let mut deg = 0.0;
        for j in 0..n {
            deg += w.get(i, j);
        }
        l.set(i, i, deg);
        for j in 0..n {
            if i != j {
                l.set(i, j, -w.get(i, j));
            }
        }
    }
    let spectrum = eigendecompose_symmetric(&l)?;
    let zeros = spectrum
        .eigenvalues
        .iter()
        .filter(|&&ev| ev.abs() < ZERO_EIGENVALUE_THRESHOLD)
        .count();

    // connected components of the structural support (weights ignored)
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut Vec<usize>, mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for &(i, j, _) in rg.entries() {
        let (a, b) = (find(&mut parent, i), find(&mut parent, j));
        if a != b {
            parent[a] = b;
        }
    }
    let mut roots: Vec<usize> = (0..n).map(|i| find(&mut parent, i)).collect();
    roots.sort_unstable();
    roots.dedup();
    Ok((zeros, roots.len()))
}
