//! Loss terms and their weighted composition.
//!
//! Gradient routing falls out of how the terms are wired: the variance,
//! covariance, and invariance terms read the embeddings; the alignment term
//! reads the assignment probabilities (reaching both the encoder path and
//! the prototypes); the invariance and regularization terms read the mixed
//! relation matrix, which is on-tape only through the aggregation
//! coefficients. Relation-graph generators run on detached values, so no
//! loss can push their source parameters through the invariance path.

use crate::autodiff::{Tape, Var};
use crate::clustering::ot_alignment_loss;
use crate::dense::Mat;
use crate::{Error, Result};

/// Epsilon inside the variance hinge's square root.
pub const VARIANCE_EPS: f64 = 1e-4;

/// Coefficients of the composite objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    /// Variance term.
    pub alpha: f64,
    /// Covariance term.
    pub beta: f64,
    /// Relation-graph invariance term.
    pub gamma: f64,
    /// Optimal-transport alignment term.
    pub alpha1: f64,
    /// Relation-matrix regularization term.
    pub alpha2: f64,
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("alpha1", self.alpha1),
            ("alpha2", self.alpha2),
        ] {
            if !w.is_finite() || w < 0.0 {
                return Err(Error::InvalidInput(format!(
                    "loss weight {name} must be finite and nonnegative, got {w}"
                )));
            }
        }
        Ok(())
    }
}

/// The five terms on the tape plus the weighted total.
pub struct LossTerms {
    pub variance: Var,
    pub covariance: Var,
    pub invariance: Var,
    pub alignment: Var,
    pub regularizer: Var,
    pub total: Var,
}

/// Per-iteration record of the evaluated terms.
#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    pub variance: f64,
    pub covariance: f64,
    pub invariance: f64,
    pub alignment: f64,
    pub regularizer: f64,
    pub total: f64,
    pub lambdas: Vec<f64>,
}

impl LossReport {
    /// The total must equal the weighted sum of the recorded terms.
    pub fn consistent_with(&self, w: &LossWeights) -> bool {
        let recomputed = w.alpha * self.variance
            + w.beta * self.covariance
            + w.gamma * self.invariance
            + w.alpha1 * self.alignment
            + w.alpha2 * self.regularizer;
        (recomputed - self.total).abs() <= 1e-9 * self.total.abs().max(1.0)
    }
}

/// Covariance matrix of the embedding columns with 1/(N-1) normalisation.
fn covariance(tape: &mut Tape, z: Var) -> Result<Var> {
    let n = tape.value(z).rows();
    if n < 2 {
        return Err(Error::InvalidInput("covariance needs at least 2 rows".into()));
    }
    let centered = tape.col_center(z)?;
    let ct = tape.transpose(centered)?;
    let prod = tape.matmul(ct, centered)?;
    tape.scalar_mul(prod, 1.0 / (n as f64 - 1.0))
}

/// Hinge on the per-dimension standard deviation:
/// `sum_k max(0, 1 - sqrt(Cov_kk + 1e-4))`.
pub fn variance_loss(tape: &mut Tape, z: Var) -> Result<Var> {
    let cov = covariance(tape, z)?;
    variance_from_cov(tape, cov)
}

fn variance_from_cov(tape: &mut Tape, cov: Var) -> Result<Var> {
    let diag = tape.diag_part(cov)?;
    let std = tape.sqrt_eps(diag, VARIANCE_EPS)?;
    let hinged = tape.hinge(std, 1.0)?;
    tape.sum(hinged)
}

/// Decorrelation penalty: `sum_{k != j} Cov_kj^2`.
pub fn covariance_loss(tape: &mut Tape, z: Var) -> Result<Var> {
    let cov = covariance(tape, z)?;
    covariance_from_cov(tape, cov)
}

fn covariance_from_cov(tape: &mut Tape, cov: Var) -> Result<Var> {
    let off = tape.zero_diag(cov)?;
    let sq = tape.square(off)?;
    tape.sum(sq)
}

/// Relation-weighted invariance over ordered pairs:
/// `sum_{ij} G_ij ||Z_i - Z_j||^2`. With the symmetric augmentation graph
/// this is exactly twice the plain augmentation-pair loss, a factor absorbed
/// by the gamma coefficient.
pub fn invariance_loss(tape: &mut Tape, z: Var, g: Var) -> Result<Var> {
    let (zr, _) = tape.value(z).shape();
    let (gr, gc) = tape.value(g).shape();
    if gr != zr || gc != zr {
        return Err(Error::Shape {
            op: "invariance_loss",
            detail: format!("G is {gr}x{gc} for {zr} embedding rows"),
        });
    }
    let dists = tape.pairwise_sqdist(z)?;
    let weighted = tape.elementwise_mul(g, dists)?;
    tape.sum(weighted)
}

/// Mass regularizer `-sum_ij G_ij^2` fighting the all-zero degenerate
/// mixture.
pub fn relation_regularizer(tape: &mut Tape, g: Var) -> Result<Var> {
    let sq = tape.square(g)?;
    let total = tape.sum(sq)?;
    tape.scalar_mul(total, -1.0)
}

/// Assemble the composite objective. `q` is the constant Sinkhorn target and
/// `pairs` the alignment pair set. All five terms are always evaluated (a
/// zero weight contributes an exact zero gradient), so the report is
/// complete regardless of the active subset.
pub fn total_loss(
    tape: &mut Tape,
    z: Var,
    g: Var,
    p: Var,
    q: &Mat,
    pairs: &[(usize, usize)],
    weights: &LossWeights,
) -> Result<LossTerms> {
    weights.validate()?;
    let cov = covariance(tape, z)?;
    let variance = variance_from_cov(tape, cov)?;
    let covariance = covariance_from_cov(tape, cov)?;
    let invariance = invariance_loss(tape, z, g)?;
    let alignment = ot_alignment_loss(tape, p, q, pairs)?;
    let regularizer = relation_regularizer(tape, g)?;

    let mut total = tape.scalar_mul(variance, weights.alpha)?;
    for (term, w) in [
        (covariance, weights.beta),
        (invariance, weights.gamma),
        (alignment, weights.alpha1),
        (regularizer, weights.alpha2),
    ] {
        let scaled = tape.scalar_mul(term, w)?;
        total = tape.add(total, scaled)?;
    }
    Ok(LossTerms { variance, covariance, invariance, alignment, regularizer, total })
}
