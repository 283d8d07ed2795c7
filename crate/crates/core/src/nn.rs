//! Encoder and expander building blocks: symmetric adjacency normalisation,
//! GCN layers, small MLPs, and parameter initialisation.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::dense::Mat;
use crate::sparse::{CsrMatrix, SparseOperand};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
    Prelu,
    Elu,
}

impl Activation {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "identity" | "none" => Ok(Activation::Identity),
            "relu" => Ok(Activation::Relu),
            "prelu" => Ok(Activation::Prelu),
            "elu" => Ok(Activation::Elu),
            other => Err(Error::Config(format!("unknown activation '{other}'"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Identity => "identity",
            Activation::Relu => "relu",
            Activation::Prelu => "prelu",
            Activation::Elu => "elu",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Norm {
    None,
    Batch,
}

impl Norm {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Norm::None),
            "batch" | "bn" => Ok(Norm::Batch),
            other => Err(Error::Config(format!("unknown normalization '{other}'"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Norm::None => "none",
            Norm::Batch => "batch",
        }
    }
}

/// `D^{-1/2} (A + I) D^{-1/2}` for one view, rebuilt per iteration because
/// augmentation changes the adjacency.
#[derive(Clone, Debug)]
pub struct NormalizedAdjacency {
    pub operand: SparseOperand,
}

impl NormalizedAdjacency {
    pub fn nodes(&self) -> usize {
        self.operand.mat.rows()
    }

    pub fn to_dense(&self) -> Mat {
        self.operand.mat.to_dense()
    }
}

/// Add self-loops and scale symmetrically by the resulting degrees. Isolated
/// nodes end up with degree 1, so no division by zero can occur.
pub fn normalize_adjacency(adjacency: &CsrMatrix) -> NormalizedAdjacency {
    let n = adjacency.rows();
    debug_assert_eq!(adjacency.cols(), n);
    let mut degrees = adjacency.row_sums();
    for d in &mut degrees {
        *d += 1.0; // self-loop
    }
    let inv_sqrt: Vec<f64> = degrees.iter().map(|d| 1.0 / d.sqrt()).collect();
    let mut entries: Vec<(usize, usize, f64)> = adjacency
        .iter_entries()
        .map(|(r, c, v)| (r, c, v * inv_sqrt[r] * inv_sqrt[c]))
        .collect();
    for i in 0..n {
        entries.push((i, i, inv_sqrt[i] * inv_sqrt[i]));
    }
    NormalizedAdjacency {
        operand: SparseOperand::symmetric(CsrMatrix::from_coo(n, n, &entries)),
    }
}

/// One graph-convolution layer; the optional slope is the learnable PReLU
/// parameter (one scalar per layer).
#[derive(Clone, Debug)]
pub struct GcnLayer {
    pub weight: Mat,
    pub prelu_slope: Option<Mat>,
    pub activation: Activation,
    pub norm: Norm,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub layers: Vec<GcnLayer>,
}

/// One dense layer of an MLP. Layers normalised by batch norm carry no
/// bias: the mean subtraction would cancel it exactly, leaving a dead
/// parameter.
#[derive(Clone, Debug)]
pub struct MlpLayer {
    pub weight: Mat,
    pub bias: Option<Mat>,
    pub prelu_slope: Option<Mat>,
    pub activation: Activation,
    pub norm: Norm,
}

#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<MlpLayer>,
}

pub const PRELU_INIT_SLOPE: f64 = 0.25;

/// Glorot-uniform weights: entries uniform in +-sqrt(6 / (fan_in + fan_out)).
pub fn glorot_uniform(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Mat {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Mat::from_vec(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect(),
    )
}

impl Encoder {
    /// `dims` runs input -> hidden... -> output. Hidden layers apply the
    /// given normalisation then activation; the output layer keeps the
    /// activation but is never normalised, so the representation scale and
    /// correlation structure stay measurable.
    pub fn new(dims: &[usize], activation: Activation, norm: Norm, rng: &mut ChaCha8Rng) -> Self {
        assert!(dims.len() >= 2, "encoder needs at least one layer");
        let last = dims.len() - 2;
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| GcnLayer {
                weight: glorot_uniform(w[0], w[1], rng),
                prelu_slope: (activation == Activation::Prelu)
                    .then(|| Mat::from_vec(1, 1, vec![PRELU_INIT_SLOPE])),
                activation,
                norm: if i == last { Norm::None } else { norm },
            })
            .collect();
        Encoder { layers }
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").weight.cols()
    }

    pub fn visit_params(&self, f: &mut dyn FnMut(String, &Mat)) {
        for (i, layer) in self.layers.iter().enumerate() {
            f(format!("encoder.{i}.weight"), &layer.weight);
            if let Some(s) = &layer.prelu_slope {
                f(format!("encoder.{i}.prelu"), s);
            }
        }
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(String, &mut Mat)) {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            f(format!("encoder.{i}.weight"), &mut layer.weight);
            if let Some(s) = &mut layer.prelu_slope {
                f(format!("encoder.{i}.prelu"), s);
            }
        }
    }

    /// Put this encoder's parameters on a tape. `vars` lists them in the
    /// same order as [`Encoder::visit_params`].
    pub fn stage(&self, tape: &mut Tape, trainable: bool) -> StagedEncoder {
        let mut vars = Vec::new();
        let layers = self
            .layers
            .iter()
            .map(|layer| {
                let weight = stage_mat(tape, &layer.weight, trainable);
                vars.push(weight);
                let slope = layer.prelu_slope.as_ref().map(|s| {
                    let v = stage_mat(tape, s, trainable);
                    vars.push(v);
                    v
                });
                StagedGcnLayer {
                    weight,
                    prelu_slope: slope,
                    activation: layer.activation,
                    norm: layer.norm,
                }
            })
            .collect();
        StagedEncoder { layers, vars }
    }
}

impl Mlp {
    /// `dims` runs input -> hidden... -> output. Hidden layers get the given
    /// normalisation and activation; when `plain_output` is set the final
    /// layer is a bare affine map.
    pub fn new(
        dims: &[usize],
        activation: Activation,
        norm: Norm,
        plain_output: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        assert!(dims.len() >= 2, "mlp needs at least one layer");
        let last = dims.len() - 2;
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let (act, nrm) = if plain_output && i == last {
                    (Activation::Identity, Norm::None)
                } else {
                    (activation, norm)
                };
                MlpLayer {
                    weight: glorot_uniform(w[0], w[1], rng),
                    bias: (nrm == Norm::None).then(|| Mat::zeros(1, w[1])),
                    prelu_slope: (act == Activation::Prelu)
                        .then(|| Mat::from_vec(1, 1, vec![PRELU_INIT_SLOPE])),
                    activation: act,
                    norm: nrm,
                }
            })
            .collect();
        Mlp { layers }
    }

    /// Drop the final layer's bias. Used where every downstream consumer is
    /// invariant to a constant output shift (the embedding losses, a softmax
    /// over logits), which makes the parameter unidentifiable.
    pub fn without_output_bias(mut self) -> Self {
        if let Some(last) = self.layers.last_mut() {
            last.bias = None;
        }
        self
    }

    /// Drop every bias. For a network applied to each relation graph and
    /// read through a softmax, parameters that shift all outputs uniformly
    /// cancel exactly; biases act uniformly whenever their unit stays on one
    /// activation branch across the graphs.
    pub fn without_biases(mut self) -> Self {
        for layer in &mut self.layers {
            layer.bias = None;
        }
        self
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().expect("non-empty").weight.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").weight.cols()
    }

    pub fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Mat)) {
        for (i, layer) in self.layers.iter().enumerate() {
            f(format!("{prefix}.{i}.weight"), &layer.weight);
            if let Some(b) = &layer.bias {
                f(format!("{prefix}.{i}.bias"), b);
            }
            if let Some(s) = &layer.prelu_slope {
                f(format!("{prefix}.{i}.prelu"), s);
            }
        }
    }

    pub fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Mat)) {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            f(format!("{prefix}.{i}.weight"), &mut layer.weight);
            if let Some(b) = &mut layer.bias {
                f(format!("{prefix}.{i}.bias"), b);
            }
            if let Some(s) = &mut layer.prelu_slope {
                f(format!("{prefix}.{i}.prelu"), s);
            }
        }
    }

    pub fn stage(&self, tape: &mut Tape, trainable: bool) -> StagedMlp {
        let mut vars = Vec::new();
        let layers = self
            .layers
            .iter()
            .map(|layer| {
                let weight = stage_mat(tape, &layer.weight, trainable);
                vars.push(weight);
                let bias = layer.bias.as_ref().map(|b| {
                    let v = stage_mat(tape, b, trainable);
                    vars.push(v);
                    v
                });
                let slope = layer.prelu_slope.as_ref().map(|s| {
                    let v = stage_mat(tape, s, trainable);
                    vars.push(v);
                    v
                });
                StagedMlpLayer {
                    weight,
                    bias,
                    prelu_slope: slope,
                    activation: layer.activation,
                    norm: layer.norm,
                }
            })
            .collect();
        StagedMlp { layers, vars }
    }
}

fn stage_mat(tape: &mut Tape, m: &Mat, trainable: bool) -> Var {
    if trainable {
        tape.parameter(m.clone())
    } else {
        tape.constant(m.clone())
    }
}

pub struct StagedGcnLayer {
    pub weight: Var,
    pub prelu_slope: Option<Var>,
    pub activation: Activation,
    pub norm: Norm,
}

pub struct StagedEncoder {
    pub layers: Vec<StagedGcnLayer>,
    /// Parameter vars in `visit_params` order.
    pub vars: Vec<Var>,
}

pub struct StagedMlpLayer {
    pub weight: Var,
    pub bias: Option<Var>,
    pub prelu_slope: Option<Var>,
    pub activation: Activation,
    pub norm: Norm,
}

pub struct StagedMlp {
    pub layers: Vec<StagedMlpLayer>,
    pub vars: Vec<Var>,
}

/// Node features entering the first encoder layer. The sparse form keeps the
/// per-iteration cost proportional to the number of nonzero features.
pub enum Features<'a> {
    Dense(Var),
    Sparse(&'a SparseOperand),
}

fn apply_norm(tape: &mut Tape, x: Var, norm: Norm) -> Result<Var> {
    match norm {
        Norm::None => Ok(x),
        Norm::Batch => tape.batch_norm(x),
    }
}

fn apply_activation(
    tape: &mut Tape,
    x: Var,
    activation: Activation,
    slope: Option<Var>,
) -> Result<Var> {
    match activation {
        Activation::Identity => Ok(x),
        Activation::Relu => tape.relu(x),
        Activation::Elu => tape.elu(x),
        Activation::Prelu => {
            let slope = slope.ok_or_else(|| Error::InvalidInput("prelu layer without slope".into()))?;
            tape.prelu(x, slope)
        }
    }
}

/// Stacked GCN forward: each layer computes
/// `activation(norm(norm_adj * (input * W)))`, in that evaluation order.
pub fn encoder_forward(
    tape: &mut Tape,
    layers: &[StagedGcnLayer],
    norm_adj: &NormalizedAdjacency,
    features: Features<'_>,
) -> Result<Var> {
    let mut current: Option<Var> = None;
    for layer in layers {
        let projected = match (&features, current) {
            (_, Some(h)) => tape.matmul(h, layer.weight)?,
            (Features::Dense(x), None) => tape.matmul(*x, layer.weight)?,
            (Features::Sparse(s), None) => tape.sparse_dense_matmul(s, layer.weight)?,
        };
        let mixed = tape.sparse_dense_matmul(&norm_adj.operand, projected)?;
        let normed = apply_norm(tape, mixed, layer.norm)?;
        let activated = apply_activation(tape, normed, layer.activation, layer.prelu_slope)?;
        current = Some(activated);
    }
    current.ok_or_else(|| Error::InvalidInput("encoder has no layers".into()))
}

/// Standard MLP forward on the tape.
pub fn mlp_forward(tape: &mut Tape, layers: &[StagedMlpLayer], input: Var) -> Result<Var> {
    let mut h = input;
    for layer in layers {
        let projected = tape.matmul(h, layer.weight)?;
        let shifted = match layer.bias {
            Some(bias) => tape.add_bias(projected, bias)?,
            None => projected,
        };
        let normed = apply_norm(tape, shifted, layer.norm)?;
        h = apply_activation(tape, normed, layer.activation, layer.prelu_slope)?;
    }
    Ok(h)
}
