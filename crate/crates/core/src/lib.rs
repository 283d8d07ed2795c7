//! Self-supervised graph representation learning with an explicitly
//! generated compositional relation graph.
//!
//! The pipeline pre-trains a GCN encoder and MLP expander without labels.
//! Instead of pulling together only augmentation pairs, the invariance loss
//! is guided by a learnable mixture of relation graphs built from kNN
//! neighborhoods in representation space, source adjacency, spectral and
//! random-walk node encodings, and an optimal-transport clustering module.
//! Training is one joint gradient update per iteration: relation graphs are
//! generated from detached values (E-step), then the encoder, expander,
//! prototypes, and aggregator weights take a single optimizer step (M-step).
//!
//! Module map:
//!
//! | module        | contents                                                   |
//! |---------------|------------------------------------------------------------|
//! | [`dense`]     | row-major matrices, sequential + rayon kernels             |
//! | [`sparse`]    | CSR matrices for adjacency and sparse features             |
//! | [`autodiff`]  | reverse-mode tape over dense matrices, stop-gradient       |
//! | [`graph`]     | datasets, SBM generator, augmentation, view/batch assembly |
//! | [`nn`]        | GCN encoder, MLP expander, parameter init                  |
//! | [`pse`]       | LapPE / RWSE / SignNet encodings, eigensolver, rank probe  |
//! | [`clustering`]| prototype assignments, Sinkhorn-Knopp codes, alignment loss|
//! | [`relgraph`]  | relation-graph generators, filters, learnable aggregation  |
//! | [`objective`] | loss terms and their weighted composition                  |
//! | [`trainer`]   | training loop, Adam/AdamW, checkpoints                     |
//! | [`eval`]      | linear probe and collapse metrics                          |
//! | [`config`]    | flat key=value run configuration                           |
//!
//! All floating-point reductions run in a fixed sequential order; the
//! `parallel` feature (on by default) only parallelises across independent
//! output rows, so results are bitwise identical with and without it.

pub mod autodiff;
pub mod clustering;
pub mod config;
pub mod dense;
pub mod eval;
pub mod graph;
pub mod nn;
pub mod objective;
pub mod pse;
pub mod relgraph;
pub mod rng;
pub mod sparse;
pub mod trainer;

use thiserror::Error as ThisError;

#[derive(Debug, ThisError)]
pub enum Error {
    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite values produced by {op}")]
    NonFinite { op: &'static str },

    #[error("eigensolver did not converge: off-diagonal residual {residual:.3e} after {iters} iterations")]
    EigenConvergence { residual: f64, iters: usize },

    #[error("insufficient non-zero eigenvalues: requested {requested}, available {available}")]
    InsufficientSpectrum { requested: usize, available: usize },

    #[error("sinkhorn column {index} underflowed to zero; increase epsilon (currently {epsilon})")]
    SinkhornUnderflow { index: usize, epsilon: f64 },

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("numeric abort: {0}")]
    Numeric(String),
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
