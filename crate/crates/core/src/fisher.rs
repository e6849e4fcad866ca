//! Fisher information of the model distribution `p_w(y|x)` and its relation to
//! the loss Hessian.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{Head, LabeledDataset, ModelSpec};
use crate::ndcore::{
    backward, check_cap, chunked_sum, class_scores, forward_pass, hessian_fd, Matrix, Objective, Tensor,
    WeightVector,
};
use crate::rng::Seed;

/// Classes up to which the expectation over `y` is summed exactly.
pub const EXACT_CLASS_LIMIT: usize = 32;

/// Rows of the score matrix processed per block when forming `A^T A`.
const ROW_BLOCK: usize = 2048;

#[derive(Clone, Debug, PartialEq)]
pub enum FisherValues {
    Full(Matrix),
    Diagonal(Vec<f64>),
    Trace(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FisherMethod {
    ExactExpectation,
    McSampled,
}

/// A Fisher matrix, or its diagonal or trace, with how it was obtained.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "FisherJson", try_from = "FisherJson")]
pub struct FisherEstimate {
    pub values: FisherValues,
    pub method: FisherMethod,
    /// Label samples per input; 0 for exact expectations.
    pub mc_samples: usize,
    pub damping: f64,
    pub k: usize,
}

impl FisherEstimate {
    /// Wrap a user-supplied full matrix.
    pub fn from_matrix(f: Matrix) -> Result<Self> {
        if !f.is_square() || f.nrows() == 0 {
            return Err(Error::arg("Fisher matrix must be square and nonempty"));
        }
        crate::ndcore::check_finite(f.as_slice())?;
        let k = f.nrows();
        Ok(FisherEstimate {
            values: FisherValues::Full(f),
            method: FisherMethod::ExactExpectation,
            mc_samples: 0,
            damping: 0.0,
            k,
        })
    }

    pub fn form(&self) -> &'static str {
        match self.values {
            FisherValues::Full(_) => "full",
            FisherValues::Diagonal(_) => "diagonal",
            FisherValues::Trace(_) => "trace",
        }
    }

    pub fn trace(&self) -> f64 {
        match &self.values {
            FisherValues::Full(m) => m.trace(),
            FisherValues::Diagonal(d) => d.iter().sum(),
            FisherValues::Trace(t) => *t,
        }
    }

    pub fn full(&self) -> Result<&Matrix> {
        match &self.values {
            FisherValues::Full(m) => Ok(m),
            _ => Err(Error::Form { expected: "full", got: self.form() }),
        }
    }

    pub fn diagonal(&self) -> Result<Vec<f64>> {
        match &self.values {
            FisherValues::Full(m) => Ok(m.diagonal().iter().copied().collect()),
            FisherValues::Diagonal(d) => Ok(d.clone()),
            FisherValues::Trace(_) => Err(Error::Form { expected: "diagonal", got: "trace" }),
        }
    }

    /// Default log-det damping `1e-8 * tr(F) / k`.
    pub fn default_damping(&self) -> f64 {
        1e-8 * self.trace() / self.k as f64
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

#[derive(Serialize, Deserialize)]
struct FisherJson {
    form: String,
    k: usize,
    method: FisherMethod,
    mc_samples: usize,
    damping: f64,
    values: Vec<f64>,
}

impl From<FisherEstimate> for FisherJson {
    fn from(f: FisherEstimate) -> Self {
        let form = f.form().to_string();
        let values = match f.values {
            FisherValues::Full(m) => m.transpose().as_slice().to_vec(),
            FisherValues::Diagonal(d) => d,
            FisherValues::Trace(t) => vec![t],
        };
        FisherJson { form, k: f.k, method: f.method, mc_samples: f.mc_samples, damping: f.damping, values }
    }
}

impl TryFrom<FisherJson> for FisherEstimate {
    type Error = String;

    fn try_from(j: FisherJson) -> std::result::Result<Self, String> {
        let values = match (j.form.as_str(), j.values.len()) {
            ("full", n) if n == j.k * j.k => FisherValues::Full(Matrix::from_row_slice(j.k, j.k, &j.values)),
            ("diagonal", n) if n == j.k => FisherValues::Diagonal(j.values),
            ("trace", 1) => FisherValues::Trace(j.values[0]),
            (form, n) => return Err(format!("{form} Fisher with k={} cannot hold {n} values", j.k)),
        };
        Ok(FisherEstimate { values, method: j.method, mc_samples: j.mc_samples, damping: j.damping, k: j.k })
    }
}

fn check_inputs(spec: &ModelSpec, w: &WeightVector, inputs: &Tensor) -> Result<()> {
    spec.check_weights(w)?;
    if inputs.cols() != spec.input_dim() {
        return Err(Error::Shape {
            expected: format!("rows of width {}", spec.input_dim()),
            got: format!("{:?}", inputs.shape()),
        });
    }
    Ok(())
}

/// `sum_r a_r a_r^T / n` over score rows produced per input, in fixed block
/// order. `rows_for(i, out)` writes the weighted score rows of input `i`.
fn outer_product_mean<F>(n: usize, k: usize, rows_per: usize, rows_for: F) -> Matrix
where
    F: Fn(usize, &mut [f64]) + Sync,
{
    let mut f = Matrix::zeros(k, k);
    let inputs_per_block = (ROW_BLOCK / rows_per).max(1);
    let mut start = 0;
    while start < n {
        let end = (start + inputs_per_block).min(n);
        let mut buf = vec![0.0; (end - start) * rows_per * k];
        buf.par_chunks_mut(rows_per * k).enumerate().for_each(|(j, out)| rows_for(start + j, out));
        // Row-major (rows × k) buffer viewed as a column-major k × rows matrix.
        let at = Matrix::from_vec(k, (end - start) * rows_per, buf);
        f.gemm(1.0, &at, &at.transpose(), 1.0);
        start = end;
    }
    f /= n as f64;
    (&f + f.transpose()) * 0.5
}

/// Exact Fisher, expectation over classes summed in closed form. Depends only
/// on the inputs.
pub fn fisher_exact(spec: &ModelSpec, w: &WeightVector, inputs: &Tensor) -> Result<FisherEstimate> {
    check_inputs(spec, w, inputs)?;
    if spec.head() != Head::SoftmaxXent {
        return Err(Error::RegressorHead);
    }
    let k = spec.num_params();
    check_cap(k)?;
    let c = spec.output_dim();
    let f = outer_product_mean(inputs.rows(), k, c, |i, out| {
        let p = class_scores(spec, w.values(), inputs.row(i), out);
        for (row, pc) in out.chunks_mut(k).zip(p) {
            let s = pc.sqrt();
            row.iter_mut().for_each(|v| *v *= s);
        }
    });
    Ok(FisherEstimate { values: FisherValues::Full(f), method: FisherMethod::ExactExpectation, mc_samples: 0, damping: 0.0, k })
}

/// Fisher of a scalar regressor read as `y ~ N(f_w(x), 1/2)`: `2 J^T J` per input.
pub fn fisher_gaussian(spec: &ModelSpec, w: &WeightVector, inputs: &Tensor) -> Result<FisherEstimate> {
    check_inputs(spec, w, inputs)?;
    if spec.head() != Head::SquaredError || spec.output_dim() != 1 {
        return Err(Error::arg("the Gaussian-likelihood Fisher needs a scalar regressor"));
    }
    let k = spec.num_params();
    check_cap(k)?;
    let f = outer_product_mean(inputs.rows(), k, 1, |i, out| {
        let pass = forward_pass(spec, w.values(), inputs.row(i));
        backward(spec, w.values(), &pass, spec.depth() - 1, &[2f64.sqrt()], Some((out, 1.0)), false);
    });
    Ok(FisherEstimate { values: FisherValues::Full(f), method: FisherMethod::ExactExpectation, mc_samples: 0, damping: 0.0, k })
}

/// Sample `m` labels per input from `p`, returning class counts.
fn sample_counts(p: &[f64], m: usize, seed: Seed) -> Vec<usize> {
    let mut rng = seed.rng();
    let mut counts = vec![0; p.len()];
    for _ in 0..m {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut c = p.len() - 1;
        for (j, pj) in p.iter().enumerate() {
            acc += pj;
            if u < acc {
                c = j;
                break;
            }
        }
        counts[c] += 1;
    }
    counts
}

/// Monte-Carlo Fisher with `m` labels drawn from the model per input. The
/// label stream of input `i` is `seed.derive(i)`.
pub fn fisher_mc(spec: &ModelSpec, w: &WeightVector, inputs: &Tensor, m: usize, seed: Seed) -> Result<FisherEstimate> {
    check_inputs(spec, w, inputs)?;
    if m == 0 {
        return Err(Error::arg("fisher_mc needs m >= 1"));
    }
    if spec.head() != Head::SoftmaxXent {
        return Err(Error::RegressorHead);
    }
    let k = spec.num_params();
    check_cap(k)?;
    let c = spec.output_dim();
    let f = outer_product_mean(inputs.rows(), k, c, |i, out| {
        let p = class_scores(spec, w.values(), inputs.row(i), out);
        let counts = sample_counts(&p, m, seed.derive(i as u64));
        for (row, n) in out.chunks_mut(k).zip(counts) {
            let s = (n as f64 / m as f64).sqrt();
            row.iter_mut().for_each(|v| *v *= s);
        }
    });
    Ok(FisherEstimate { values: FisherValues::Full(f), method: FisherMethod::McSampled, mc_samples: m, damping: 0.0, k })
}

/// Diagonal of the Fisher for any `k`. Exact class sums when the class count
/// is at most [`EXACT_CLASS_LIMIT`], otherwise `m` sampled labels per input.
pub fn fisher_trace_diag(
    spec: &ModelSpec,
    w: &WeightVector,
    inputs: &Tensor,
    m: usize,
    seed: Seed,
) -> Result<FisherEstimate> {
    check_inputs(spec, w, inputs)?;
    let k = spec.num_params();
    let n = inputs.rows();
    if spec.head() == Head::SquaredError {
        let d = chunked_sum(n, k, |range, acc| {
            let mut g = vec![0.0; k];
            for i in range {
                g.fill(0.0);
                let pass = forward_pass(spec, w.values(), inputs.row(i));
                backward(spec, w.values(), &pass, spec.depth() - 1, &[1.0], Some((&mut g, 1.0)), false);
                acc.iter_mut().zip(&g).for_each(|(a, v)| *a += 2.0 * v * v);
            }
        });
        let d = d.into_iter().map(|v| v / n as f64).collect();
        return Ok(FisherEstimate { values: FisherValues::Diagonal(d), method: FisherMethod::ExactExpectation, mc_samples: 0, damping: 0.0, k });
    }
    let c = spec.output_dim();
    let exact = c <= EXACT_CLASS_LIMIT;
    if !exact && m == 0 {
        return Err(Error::arg("sampling the diagonal needs m >= 1"));
    }
    let d = chunked_sum(n, k, |range, acc| {
        let mut scores = vec![0.0; c * k];
        for i in range {
            let p = class_scores(spec, w.values(), inputs.row(i), &mut scores);
            let weights: Vec<f64> = if exact {
                p
            } else {
                sample_counts(&p, m, seed.derive(i as u64)).into_iter().map(|n| n as f64 / m as f64).collect()
            };
            for (row, wc) in scores.chunks(k).zip(weights) {
                if wc == 0.0 {
                    continue;
                }
                acc.iter_mut().zip(row).for_each(|(a, v)| *a += wc * v * v);
            }
        }
    });
    let d = d.into_iter().map(|v| v / n as f64).collect();
    let (method, mc_samples) = if exact { (FisherMethod::ExactExpectation, 0) } else { (FisherMethod::McSampled, m) };
    Ok(FisherEstimate { values: FisherValues::Diagonal(d), method, mc_samples, damping: 0.0, k })
}

/// `log|F + eps I|` with the damping that was applied.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogDet {
    pub value: f64,
    pub damping: f64,
}

/// Smallest damping used when the caller asks for none.
pub const MIN_DAMPING: f64 = 1e-12;

/// `log|F + eps I|` by Cholesky. `eps = 0` is raised to [`MIN_DAMPING`].
pub fn logdet_damped(f: &FisherEstimate, eps: f64) -> Result<LogDet> {
    if eps < 0.0 || !eps.is_finite() {
        return Err(Error::arg("damping must be non-negative"));
    }
    let m = f.full()?;
    let eps = eps.max(MIN_DAMPING);
    Ok(LogDet { value: logdet_spd(m, eps)?, damping: eps })
}

/// `log|A + eps I|` for symmetric `A` by Cholesky.
pub(crate) fn logdet_spd(a: &Matrix, eps: f64) -> Result<f64> {
    let mut s = a.clone();
    for i in 0..s.nrows() {
        s[(i, i)] += eps;
    }
    let ch = s
        .cholesky()
        .ok_or_else(|| Error::NotPositiveDefinite(format!("{}×{} matrix with damping {eps:e}", a.nrows(), a.nrows())))?;
    Ok(2.0 * ch.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>())
}

/// Fisher of the model distribution on the inputs of `data`, by head.
pub fn model_fisher(spec: &ModelSpec, w: &WeightVector, inputs: &Tensor) -> Result<FisherEstimate> {
    match spec.head() {
        Head::SoftmaxXent => fisher_exact(spec, w, inputs),
        Head::SquaredError => fisher_gaussian(spec, w, inputs),
    }
}

/// `H - F` and `|H - F|_F / |H|_F`. The Fisher uses the inputs of `data`
/// only; regressors use the Gaussian-likelihood Fisher.
pub fn hessian_fisher_residual(spec: &ModelSpec, w: &WeightVector, data: &LabeledDataset) -> Result<(Matrix, f64)> {
    check_cap(spec.num_params())?;
    spec.check(data)?;
    let h = hessian_fd(spec, w, data)?;
    let f = model_fisher(spec, w, data.inputs())?;
    let r = &h - f.full()?;
    let hn = h.norm();
    let rel = if hn > 0.0 { r.norm() / hn } else { r.norm() };
    Ok((r, rel))
}
