//! Downstream evaluation: an L2-regularized multinomial logistic probe on
//! frozen representations, and the collapse metrics (corr, std, nstd, rank).

use rand_chacha::ChaCha8Rng;

use crate::config::ProbeConfig;
use crate::dense::{self, Mat};
use crate::graph::Splits;
use crate::pse::eigendecompose_symmetric;
use crate::{Error, Result};

/// Tolerance factor on singular values for the rank metric.
pub const RANK_TOLERANCE: f64 = 1e-7;

// ---- collapse metrics ------------------------------------------------------------

fn column_means(m: &Mat) -> Vec<f64> {
    let (r, c) = m.shape();
    let mut means = vec![0.0; c];
    for i in 0..r {
        for (acc, &v) in means.iter_mut().zip(m.row(i)) {
            *acc += v;
        }
    }
    for acc in &mut means {
        *acc /= r as f64;
    }
    means
}

fn covariance_matrix(m: &Mat) -> Result<Mat> {
    let (r, c) = m.shape();
    if r < 2 {
        return Err(Error::InvalidInput("metrics need at least 2 rows".into()));
    }
    let means = column_means(m);
    let mut centered = m.clone();
    for i in 0..r {
        for (j, v) in centered.row_mut(i).iter_mut().enumerate() {
            *v -= means[j];
        }
    }
    let mut cov = Mat::zeros(c, c);
    let ct = centered.transpose();
    dense::matmul_into(&mut cov, &ct, &centered);
    cov.scale(1.0 / (r as f64 - 1.0));
    Ok(cov)
}

/// Mean of the squared off-diagonal covariance entries.
pub fn metric_corr(m: &Mat) -> Result<f64> {
    let cov = covariance_matrix(m)?;
    let d = cov.rows();
    if d < 2 {
        return Ok(0.0);
    }
    let mut acc = 0.0;
    for i in 0..d {
        for j in 0..d {
            if i != j {
                let v = cov.get(i, j);
                acc += v * v;
            }
        }
    }
    Ok(acc / (d * (d - 1)) as f64)
}

/// Mean per-column standard deviation (1/(N-1) variance).
pub fn metric_std(m: &Mat) -> Result<f64> {
    let cov = covariance_matrix(m)?;
    let d = cov.rows();
    let mut acc = 0.0;
    for i in 0..d {
        acc += cov.get(i, i).max(0.0).sqrt();
    }
    Ok(acc / d as f64)
}

/// `metric_std` after L2-normalizing every row (zero rows stay zero).
pub fn metric_nstd(m: &Mat) -> Result<f64> {
    let mut normalized = m.clone();
    for i in 0..normalized.rows() {
        let norm = normalized.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 1e-12 {
            for v in normalized.row_mut(i) {
                *v /= norm;
            }
        } else {
            normalized.row_mut(i).fill(0.0);
        }
    }
    metric_std(&normalized)
}

/// Number of singular values above `tol * sigma_max`, computed through the
/// spectrum of the smaller Gram matrix.
pub fn metric_rank(m: &Mat, tol: f64) -> Result<usize> {
    let (r, c) = m.shape();
    if r == 0 || c == 0 {
        return Err(Error::InvalidInput("rank of an empty matrix".into()));
    }
    let gram = if c <= r {
        let mt = m.transpose();
        let mut g = Mat::zeros(c, c);
        dense::matmul_into(&mut g, &mt, m);
        g
    } else {
        let mut g = Mat::zeros(r, r);
        dense::gram_into(&mut g, m, m);
        g
    };
    let spectrum = eigendecompose_symmetric(&gram)?;
    let max_ev = spectrum.eigenvalues.iter().cloned().fold(0.0f64, f64::max);
    if max_ev <= 0.0 {
        return Ok(0);
    }
    let sigma_max = max_ev.sqrt();
    let cutoff = tol * sigma_max;
    Ok(spectrum
        .eigenvalues
        .iter()
        .filter(|&&ev| ev.max(0.0).sqrt() > cutoff)
        .count())
}

/// The four collapse metrics of one representation matrix.
pub fn collapse_metrics(m: &Mat) -> Result<(f64, f64, f64, usize)> {
    Ok((
        metric_corr(m)?,
        metric_std(m)?,
        metric_nstd(m)?,
        metric_rank(m, RANK_TOLERANCE)?,
    ))
}

// ---- linear probe ------------------------------------------------------------------

fn softmax_rows(scores: &mut Mat) {
    for i in 0..scores.rows() {
        let row = scores.row_mut(i);
        let mx = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            z += *v;
        }
        for v in row {
            *v /= z;
        }
    }
}

fn gather_rows(m: &Mat, idx: &[usize]) -> Mat {
    let mut out = Mat::zeros(idx.len(), m.cols());
    for (k, &i) in idx.iter().enumerate() {
        out.row_mut(k).copy_from_slice(m.row(i));
    }
    out
}

/// Largest squared singular value of `x`, by power iteration on the Gram
/// matrix with a deterministic start vector.
fn spectral_norm_sq(x: &Mat) -> f64 {
    let (r, c) = x.shape();
    if r == 0 || c == 0 {
        return 0.0;
    }
    let mut v = vec![1.0 / (c as f64).sqrt(); c];
    let mut estimate = 0.0;
    for _ in 0..50 {
        // w = X v; u = X^T w
        let mut w = vec![0.0; r];
        for i in 0..r {
            let mut acc = 0.0;
            for (a, b) in x.row(i).iter().zip(&v) {
                acc += a * b;
            }
            w[i] = acc;
        }
        let mut u = vec![0.0; c];
        for i in 0..r {
            let wi = w[i];
            for (uj, &xij) in u.iter_mut().zip(x.row(i)) {
                *uj += wi * xij;
            }
        }
        let norm = u.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        estimate = norm;
        for (vi, ui) in v.iter_mut().zip(&u) {
            *vi = ui / norm;
        }
    }
    estimate
}

struct ProbeModel {
    weights: Mat,
    bias: Mat,
}

/// Full-batch gradient descent on the multinomial cross-entropy with L2
/// penalty on the weights, constant step size from a curvature bound.
fn fit_logistic(
    x: &Mat,
    labels: &[usize],
    num_classes: usize,
    penalty: f64,
    max_iters: usize,
    tol: f64,
) -> ProbeModel {
    let n = x.rows();
    let d = x.cols();
    let mut w = Mat::zeros(d, num_classes);
    let mut b = Mat::zeros(1, num_classes);
    let lipschitz = 0.5 * spectral_norm_sq(x) / n as f64 + penalty + 1e-12;
    let lr = 1.0 / lipschitz;
    let mut onehot = Mat::zeros(n, num_classes);
    for (i, &y) in labels.iter().enumerate() {
        onehot.set(i, y, 1.0);
    }
    for _ in 0..max_iters {
        let mut scores = Mat::zeros(n, num_classes);
        dense::matmul_into(&mut scores, x, &w);
        for i in 0..n {
            for (s, &bj) in scores.row_mut(i).iter_mut().zip(b.row(0)) {
                *s += bj;
            }
        }
        softmax_rows(&mut scores);
        // residual = P - Y
        let mut residual = scores;
        residual.scaled_add_assign(-1.0, &onehot);
        let xt = x.transpose();
        let mut grad_w = Mat::zeros(d, num_classes);
        dense::matmul_into(&mut grad_w, &xt, &residual);
        grad_w.scale(1.0 / n as f64);
        grad_w.scaled_add_assign(penalty, &w);
        let mut grad_b = Mat::zeros(1, num_classes);
        for i in 0..n {
            for (g, &v) in grad_b.row_mut(0).iter_mut().zip(residual.row(i)) {
                *g += v;
            }
        }
        grad_b.scale(1.0 / n as f64);

        let sup = grad_w.max_abs().max(grad_b.max_abs());
        w.scaled_add_assign(-lr, &grad_w);
        b.scaled_add_assign(-lr, &grad_b);
        if sup < tol {
            break;
        }
    }
    ProbeModel { weights: w, bias: b }
}

fn accuracy(model: &ProbeModel, x: &Mat, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let mut scores = Mat::zeros(x.rows(), model.weights.cols());
    dense::matmul_into(&mut scores, x, &model.weights);
    let mut hits = 0usize;
    for (i, &y) in labels.iter().enumerate() {
        let mut best = 0usize;
        let mut best_v = f64::NEG_INFINITY;
        for (j, &v) in scores.row(i).iter().enumerate() {
            let v = v + model.bias.get(0, j);
            if v > best_v {
                best_v = v;
                best = j;
            }
        }
        if best == y {
            hits += 1;
        }
    }
    hits as f64 / labels.len() as f64
}

/// One probe trial: train on the train split for every penalty in the grid,
/// pick the penalty with the best validation accuracy (first on ties), and
/// report test accuracy.
pub fn linear_probe(
    h_frozen: &Mat,
    labels: &[usize],
    splits: &Splits,
    cfg: &ProbeConfig,
) -> Result<f64> {
    if labels.len() != h_frozen.rows() {
        return Err(Error::InvalidInput(format!(
            "{} labels for {} representation rows",
            labels.len(),
            h_frozen.rows()
        )));
    }
    let num_classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    if num_classes < 2 {
        return Err(Error::InvalidInput("probe needs at least two classes".into()));
    }
    let gather_labels = |idx: &[usize]| -> Vec<usize> { idx.iter().map(|&i| labels[i]).collect() };
    let x_train = gather_rows(h_frozen, &splits.train);
    let y_train = gather_labels(&splits.train);
    let x_val = gather_rows(h_frozen, &splits.val);
    let y_val = gather_labels(&splits.val);
    let x_test = gather_rows(h_frozen, &splits.test);
    let y_test = gather_labels(&splits.test);

    let mut best: Option<(f64, ProbeModel)> = None;
    for &penalty in &cfg.penalties {
        let model = fit_logistic(&x_train, &y_train, num_classes, penalty, cfg.max_iters, cfg.tol);
        let val_acc = accuracy(&model, &x_val, &y_val);
        let better = match &best {
            Some((acc, _)) => val_acc > *acc,
            None => true,
        };
        if better {
            best = Some((val_acc, model));
        }
    }
    let (_, model) = best.ok_or_else(|| Error::InvalidInput("empty penalty grid".into()))?;
    Ok(accuracy(&model, &x_test, &y_test))
}

/// Draw a split whose train and val sections cover every class, re-drawing
/// (with a warning) when a class is missing.
fn draw_covering_split(
    labels: &[usize],
    num_classes: usize,
    train_ratio: f64,
    val_ratio: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Splits> {
    for attempt in 0..100 {
        let splits = Splits::random(labels.len(), train_ratio, val_ratio, rng);
        let covers = |idx: &[usize]| {
            let mut seen = vec![false; num_classes];
            for &i in idx {
                seen[labels[i]] = true;
            }
            seen.iter().all(|&s| s)
        };
        if covers(&splits.train) {
            return Ok(splits);
        }
        log::warn!("probe split attempt {attempt} missed a class in train; re-drawing");
    }
    Err(Error::InvalidInput(
        "could not draw a train split covering every class in 100 attempts".into(),
    ))
}

/// Repeated probe trials with fresh random splits (or the fixed file-given
/// split); returns one test accuracy per trial.
pub fn run_probe_trials(
    h_frozen: &Mat,
    labels: &[usize],
    cfg: &ProbeConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    let num_classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    let fixed = cfg
        .split_file
        .as_ref()
        .map(|p| Splits::from_file(std::path::Path::new(p)))
        .transpose()?;
    let mut out = Vec::with_capacity(cfg.trials);
    for trial in 0..cfg.trials {
        let splits = match &fixed {
            Some(s) => s.clone(),
            None => {
                let mut rng = crate::rng::seeded(seed, "probe-split", trial as u64);
                draw_covering_split(labels, num_classes, cfg.train_ratio, cfg.val_ratio, &mut rng)?
            }
        };
        out.push(linear_probe(h_frozen, labels, &splits, cfg)?);
    }
    Ok(out)
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
        / (values.len() as f64 - 1.0);
    (mean, var.sqrt())
}
