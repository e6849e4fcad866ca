//! Effective information in the activations: how much a representation still
//! says about its input when the weights are perturbed along the
//! task-preserving Gaussian `N(0, beta F^{-1})`.

use std::f64::consts::{E, PI};

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fisher::{FisherEstimate, MIN_DAMPING};
use crate::models::ModelSpec;
use crate::ndcore::{backward, forward_pass, LayerId, Matrix, Tensor, WeightVector};
use crate::rng::Seed;

/// Diagonal loading applied before inverting a covariance or Fisher.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Damping {
    /// `1e-8 * tr(A) / dim`, never below [`MIN_DAMPING`].
    Auto,
    /// A fixed amount; zero disables damping.
    Fixed(f64),
}

impl Damping {
    fn amount(self, a: &Matrix) -> Result<f64> {
        match self {
            Damping::Auto => Ok((1e-8 * a.trace() / a.nrows() as f64).max(MIN_DAMPING)),
            Damping::Fixed(e) if e >= 0.0 && e.is_finite() => Ok(e),
            Damping::Fixed(e) => Err(Error::arg(format!("damping {e} must be non-negative"))),
        }
    }
}

fn single_input<'a>(spec: &ModelSpec, x: &'a Tensor) -> Result<&'a [f64]> {
    if x.rows() != 1 || x.cols() != spec.input_dim() || x.shape().len() > 2 {
        return Err(Error::Shape {
            expected: format!("one input of width {}", spec.input_dim()),
            got: format!("{:?}", x.shape()),
        });
    }
    Ok(x.row(0))
}

/// Representation `z = f_w(x)` at `layer`: hidden post-activations, or the
/// final affine output (logits for classifiers).
pub fn activation_at(spec: &ModelSpec, w: &WeightVector, x: &Tensor, layer: LayerId) -> Result<Vec<f64>> {
    spec.check_weights(w)?;
    let li = layer.resolve(spec)?;
    let pass = forward_pass(spec, w.values(), single_input(spec, x)?);
    Ok(pass.acts[li + 1].clone())
}

/// `dz/dw`, dim z × k, one reverse pass per coordinate of `z`.
pub fn weight_jacobian(spec: &ModelSpec, w: &WeightVector, x: &Tensor, layer: LayerId) -> Result<Matrix> {
    spec.check_weights(w)?;
    let li = layer.resolve(spec)?;
    let pass = forward_pass(spec, w.values(), single_input(spec, x)?);
    let m = spec.sizes()[li + 1];
    let k = w.dim();
    let mut j = Matrix::zeros(m, k);
    let mut row = vec![0.0; k];
    let mut up = vec![0.0; m];
    for o in 0..m {
        row.fill(0.0);
        up.fill(0.0);
        up[o] = 1.0;
        backward(spec, w.values(), &pass, li, &up, Some((&mut row, 1.0)), false);
        j.row_mut(o).copy_from(&nalgebra::RowDVector::from_row_slice(&row));
    }
    Ok(j)
}

/// `dz/dx`, dim z × dim x.
pub fn input_jacobian(spec: &ModelSpec, w: &WeightVector, x: &Tensor, layer: LayerId) -> Result<Matrix> {
    spec.check_weights(w)?;
    let li = layer.resolve(spec)?;
    let pass = forward_pass(spec, w.values(), single_input(spec, x)?);
    let m = spec.sizes()[li + 1];
    let d = spec.input_dim();
    let mut j = Matrix::zeros(m, d);
    let mut up = vec![0.0; m];
    for o in 0..m {
        up.fill(0.0);
        up[o] = 1.0;
        let g = backward(spec, w.values(), &pass, li, &up, None, true).expect("input gradient requested");
        j.row_mut(o).copy_from(&nalgebra::RowDVector::from_row_slice(&g));
    }
    Ok(j)
}

/// Cholesky factor `C` of `F + eps I` with the damping used.
fn damped_factor(f: &FisherEstimate, k: usize, damping: Damping) -> Result<(nalgebra::Cholesky<f64, nalgebra::Dyn>, f64)> {
    let m = f.full()?;
    if m.nrows() != k {
        return Err(Error::Shape { expected: format!("{k}×{k} Fisher"), got: format!("{}×{}", m.nrows(), m.ncols()) });
    }
    let eps = damping.amount(m)?;
    let mut a = m.clone();
    for i in 0..k {
        a[(i, i)] += eps;
    }
    let ch = a
        .cholesky()
        .ok_or_else(|| Error::NotPositiveDefinite(format!("Fisher with damping {eps:e}; raise the damping")))?;
    Ok((ch, eps))
}

fn check_beta(beta: f64) -> Result<()> {
    if beta >= 0.0 && beta.is_finite() {
        Ok(())
    } else {
        Err(Error::arg(format!("beta {beta} must be non-negative")))
    }
}

/// `m` draws of `f_{w+n}(x)` at `layer` with `n ~ N(0, beta (F + eps I)^{-1})`.
#[allow(clippy::too_many_arguments)]
pub fn perturbed_activations(
    spec: &ModelSpec,
    w: &WeightVector,
    f: &FisherEstimate,
    beta: f64,
    x: &Tensor,
    layer: LayerId,
    m: usize,
    seed: Seed,
    damping: Damping,
) -> Result<Vec<Tensor>> {
    check_beta(beta)?;
    spec.check_weights(w)?;
    let li = layer.resolve(spec)?;
    let input = single_input(spec, x)?;
    let k = w.dim();
    let (ch, _) = damped_factor(f, k, damping)?;
    let lt = ch.l().transpose();
    let mut rng = seed.rng();
    let scale = beta.sqrt();
    let mut out = Vec::with_capacity(m);
    for _ in 0..m {
        let z = nalgebra::DVector::from_fn(k, |_, _| {
            let v: f64 = StandardNormal.sample(&mut rng);
            v
        });
        // C^T n = z gives Cov(n) = (C C^T)^{-1}.
        let n = lt.solve_upper_triangular(&z).expect("Cholesky factor is nonsingular");
        let wn: Vec<f64> = w.values().iter().zip(n.iter()).map(|(a, b)| a + scale * b).collect();
        let pass = forward_pass(spec, &wn, input);
        out.push(Tensor::vector(pass.acts[li + 1].clone())?);
    }
    Ok(out)
}

/// `J_f Sigma J_f^T` with `Sigma = beta (F + eps I)^{-1}`: the linearized
/// covariance of the perturbed activations.
pub fn linearized_covariance(
    spec: &ModelSpec,
    w: &WeightVector,
    f: &FisherEstimate,
    beta: f64,
    x: &Tensor,
    layer: LayerId,
    damping: Damping,
) -> Result<Matrix> {
    check_beta(beta)?;
    let j = weight_jacobian(spec, w, x, layer)?;
    let (ch, _) = damped_factor(f, w.dim(), damping)?;
    Ok(covariance_from(&j, &ch, beta))
}

fn covariance_from(j: &Matrix, ch: &nalgebra::Cholesky<f64, nalgebra::Dyn>, beta: f64) -> Matrix {
    // J (C C^T)^{-1} J^T = (C^{-1} J^T)^T (C^{-1} J^T).
    let a = ch.l().solve_lower_triangular(&j.transpose()).expect("Cholesky factor is nonsingular");
    let m = a.transpose() * a * beta;
    (&m + m.transpose()) * 0.5
}

/// Conditional Fisher of the activations with the damping that produced it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionalFisher {
    pub matrix: Matrix,
    /// Added to `F_w` before inversion.
    pub weight_damping: f64,
    /// Added to `J_f Sigma J_f^T` before inversion.
    pub activation_damping: f64,
}

/// `F_{z|x} = (dz/dx)^T (J_f Sigma J_f^T + eps I)^{-1} (dz/dx)`, the Fisher
/// about `x` of the Gaussian `N(f_w(x), J_f Sigma J_f^T)`.
pub fn fisher_z_given_x(
    spec: &ModelSpec,
    w: &WeightVector,
    f: &FisherEstimate,
    beta: f64,
    x: &Tensor,
    layer: LayerId,
    damping: Damping,
) -> Result<ConditionalFisher> {
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::arg(format!("beta {beta} must be positive")));
    }
    let (ch, weight_damping) = damped_factor(f, w.dim(), damping)?;
    conditional(spec, w, &ch, weight_damping, beta, x, layer, damping)
}

#[allow(clippy::too_many_arguments)]
fn conditional(
    spec: &ModelSpec,
    w: &WeightVector,
    ch: &nalgebra::Cholesky<f64, nalgebra::Dyn>,
    weight_damping: f64,
    beta: f64,
    x: &Tensor,
    layer: LayerId,
    damping: Damping,
) -> Result<ConditionalFisher> {
    let j = weight_jacobian(spec, w, x, layer)?;
    let g = input_jacobian(spec, w, x, layer)?;
    let mut cov = covariance_from(&j, ch, beta);
    let activation_damping = damping.amount(&cov)?;
    for i in 0..cov.nrows() {
        cov[(i, i)] += activation_damping;
    }
    let cc = cov.cholesky().ok_or_else(|| {
        Error::NotPositiveDefinite(format!("activation covariance with damping {activation_damping:e}"))
    })?;
    let m = g.transpose() * cc.solve(&g);
    Ok(ConditionalFisher { matrix: (&m + m.transpose()) * 0.5, weight_damping, activation_damping })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EffectiveInfoReport {
    pub beta: f64,
    pub layer: LayerId,
    /// `log|F_{z|x}|` per probe; `-inf` when singular.
    pub logdets: Vec<f64>,
    /// `-E_x[1/2 log((2 pi e)^d / |F_{z|x}|)]`, `d = dim x`.
    pub delta_i: f64,
    pub entropy_x: Option<f64>,
    /// `entropy_x + delta_i`, clamped at zero.
    pub i_eff: Option<f64>,
    pub clamped: bool,
    pub weight_damping: f64,
    /// Largest activation damping over the probes.
    pub activation_damping: f64,
}

impl EffectiveInfoReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    /// `probe,logdet`.
    pub fn probes_csv(&self) -> Result<String> {
        let mut wtr = csv::Writer::from_writer(Vec::new());
        wtr.write_record(["probe", "logdet"])?;
        for (i, v) in self.logdets.iter().enumerate() {
            wtr.write_record([i.to_string(), v.to_string()])?;
        }
        let bytes = wtr.into_inner().map_err(|e| Error::Parse(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

/// Effective information of `layer` about the input, averaged over `probes`.
/// Without an input entropy only the entropy-free part `delta_i` is reported.
#[allow(clippy::too_many_arguments)]
pub fn effective_mi(
    spec: &ModelSpec,
    w: &WeightVector,
    f: &FisherEstimate,
    beta: f64,
    probes: &[Tensor],
    layer: LayerId,
    entropy_x: Option<f64>,
    damping: Damping,
) -> Result<EffectiveInfoReport> {
    if probes.is_empty() {
        return Err(Error::arg("need at least one probe input"));
    }
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::arg(format!("beta {beta} must be positive")));
    }
    let (ch, weight_damping) = damped_factor(f, w.dim(), damping)?;
    let per: Vec<ConditionalFisher> = probes
        .par_iter()
        .map(|x| conditional(spec, w, &ch, weight_damping, beta, x, layer, damping))
        .collect::<Result<_>>()?;
    let d = spec.input_dim() as f64;
    let logdets: Vec<f64> = per.iter().map(|c| psd_logdet(&c.matrix)).collect();
    let delta_i = logdets.iter().map(|ld| 0.5 * ld - 0.5 * d * (2.0 * PI * E).ln()).sum::<f64>() / logdets.len() as f64;
    let raw = entropy_x.map(|h| h + delta_i);
    let clamped = raw.is_some_and(|v| !(v >= 0.0));
    Ok(EffectiveInfoReport {
        beta,
        layer,
        logdets,
        delta_i,
        entropy_x,
        i_eff: raw.map(|v| if v >= 0.0 { v } else { 0.0 }),
        clamped,
        weight_damping,
        activation_damping: per.iter().map(|c| c.activation_damping).fold(0.0, f64::max),
    })
}

fn psd_logdet(m: &Matrix) -> f64 {
    m.clone().symmetric_eigenvalues().iter().map(|&l| if l > 0.0 { l.ln() } else { f64::NEG_INFINITY }).sum()
}
