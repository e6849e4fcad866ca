//! Information in the weights: the complexity trade-off between expected loss
//! and KL to a pre-distribution, its Gaussian optimum, PAC-Bayes bounds, the
//! adapted-prior (Shannon) information and its Fisher-based approximations.
//!
//! Curvature convention: the quadratic surrogate of the expected loss is
//! `E_Q[L] ~ L(w*) + tr(H Sigma)`, so `H` here is the curvature of
//! `L(w) ~ L(w*) + (w - w*)^T H (w - w*)`. All quantities are in nats.

use std::f64::consts::{E, PI};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fisher::logdet_spd;
use crate::models::LabeledDataset;
use crate::ndcore::{check_finite, Matrix, Objective};
use crate::rng::Seed;

/// Default prior variance `lambda^2`.
pub const DEFAULT_LAMBDA2: f64 = 10.0;

/// Default Monte-Carlo budget per mixture component.
pub const DEFAULT_MIXTURE_SAMPLES: usize = 10_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Covariance {
    Isotropic(f64),
    Diagonal(Vec<f64>),
    Full(Matrix),
}

/// Gaussian over weights. Full covariances must be symmetric positive definite.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GaussianSpec {
    mean: Vec<f64>,
    cov: Covariance,
    #[serde(skip)]
    chol: Option<Matrix>,
}

impl GaussianSpec {
    pub fn new(mean: Vec<f64>, cov: Covariance) -> Result<Self> {
        if mean.is_empty() {
            return Err(Error::arg("Gaussian must have dimension k > 0"));
        }
        check_finite(&mean)?;
        let k = mean.len();
        let chol = match &cov {
            Covariance::Isotropic(s) if *s > 0.0 && s.is_finite() => None,
            Covariance::Isotropic(s) => return Err(Error::arg(format!("variance {s} must be positive"))),
            Covariance::Diagonal(d) if d.len() != k => {
                return Err(Error::Shape { expected: format!("{k} variances"), got: d.len().to_string() })
            }
            Covariance::Diagonal(d) => {
                if let Some(v) = d.iter().find(|v| !(**v > 0.0 && v.is_finite())) {
                    return Err(Error::arg(format!("variance {v} must be positive")));
                }
                None
            }
            Covariance::Full(m) => {
                if m.nrows() != k || m.ncols() != k {
                    return Err(Error::Shape { expected: format!("{k}×{k} covariance"), got: format!("{}×{}", m.nrows(), m.ncols()) });
                }
                let asym = (m - m.transpose()).norm();
                if asym > 1e-10 * m.norm().max(1e-300) {
                    return Err(Error::arg("covariance is not symmetric"));
                }
                let sym = (m + m.transpose()) * 0.5;
                let l = sym.cholesky().ok_or_else(|| Error::arg("covariance is not positive definite"))?;
                Some(l.l())
            }
        };
        Ok(GaussianSpec { mean, cov, chol })
    }

    pub fn isotropic(mean: Vec<f64>, var: f64) -> Result<Self> {
        GaussianSpec::new(mean, Covariance::Isotropic(var))
    }

    pub fn diagonal(mean: Vec<f64>, var: Vec<f64>) -> Result<Self> {
        GaussianSpec::new(mean, Covariance::Diagonal(var))
    }

    pub fn full(mean: Vec<f64>, cov: Matrix) -> Result<Self> {
        GaussianSpec::new(mean, Covariance::Full(cov))
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn cov(&self) -> &Covariance {
        &self.cov
    }

    pub fn cov_matrix(&self) -> Matrix {
        let k = self.dim();
        match &self.cov {
            Covariance::Isotropic(s) => Matrix::identity(k, k) * *s,
            Covariance::Diagonal(d) => Matrix::from_diagonal(&nalgebra::DVector::from_column_slice(d)),
            Covariance::Full(m) => (m + m.transpose()) * 0.5,
        }
    }

    /// Lower Cholesky factor of a full covariance (recomputed after deserializing).
    fn factor(&self) -> std::borrow::Cow<'_, Matrix> {
        match &self.chol {
            Some(l) => std::borrow::Cow::Borrowed(l),
            None => std::borrow::Cow::Owned(self.cov_matrix().cholesky().expect("validated at construction").l()),
        }
    }

    pub fn logdet_cov(&self) -> f64 {
        match &self.cov {
            Covariance::Isotropic(s) => self.dim() as f64 * s.ln(),
            Covariance::Diagonal(d) => d.iter().map(|v| v.ln()).sum(),
            Covariance::Full(_) => 2.0 * self.factor().diagonal().iter().map(|v| v.ln()).sum::<f64>(),
        }
    }

    /// `mean + L z` for a standard-normal vector `z`.
    pub fn transform(&self, z: &[f64]) -> Vec<f64> {
        match &self.cov {
            Covariance::Isotropic(s) => {
                let sd = s.sqrt();
                self.mean.iter().zip(z).map(|(m, v)| m + sd * v).collect()
            }
            Covariance::Diagonal(d) => self.mean.iter().zip(z).zip(d).map(|((m, v), s)| m + s.sqrt() * v).collect(),
            Covariance::Full(_) => {
                let lz = self.factor().as_ref() * nalgebra::DVector::from_column_slice(z);
                self.mean.iter().zip(lz.iter()).map(|(m, v)| m + v).collect()
            }
        }
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        let z: Vec<f64> = (0..self.dim()).map(|_| StandardNormal.sample(rng)).collect();
        self.transform(&z)
    }

    pub fn log_density(&self, w: &[f64]) -> f64 {
        let k = self.dim() as f64;
        let quad = match &self.cov {
            Covariance::Isotropic(s) => self.mean.iter().zip(w).map(|(m, x)| (x - m).powi(2)).sum::<f64>() / s,
            Covariance::Diagonal(d) => self.mean.iter().zip(w).zip(d).map(|((m, x), s)| (x - m).powi(2) / s).sum(),
            Covariance::Full(_) => {
                let diff = nalgebra::DVector::from_iterator(self.dim(), w.iter().zip(&self.mean).map(|(x, m)| x - m));
                let y = self.factor().solve_lower_triangular(&diff).expect("nonsingular factor");
                y.norm_squared()
            }
        };
        -0.5 * (quad + self.logdet_cov() + k * (2.0 * PI).ln())
    }
}

impl PartialEq for GaussianSpec {
    fn eq(&self, other: &Self) -> bool {
        self.mean == other.mean && self.cov == other.cov
    }
}

fn check_dims(q: &GaussianSpec, p: &GaussianSpec) -> Result<()> {
    if q.dim() != p.dim() {
        return Err(Error::Shape { expected: format!("dimension {}", p.dim()), got: q.dim().to_string() });
    }
    Ok(())
}

/// `KL(q || p)` in nats, closed form.
pub fn kl_gaussians(q: &GaussianSpec, p: &GaussianSpec) -> Result<f64> {
    check_dims(q, p)?;
    let k = q.dim() as f64;
    let diff: Vec<f64> = q.mean.iter().zip(&p.mean).map(|(a, b)| a - b).collect();
    let (trace_term, maha) = match &p.cov {
        Covariance::Isotropic(l2) => {
            let tr = match &q.cov {
                Covariance::Isotropic(s) => k * s,
                Covariance::Diagonal(d) => d.iter().sum(),
                Covariance::Full(m) => m.trace(),
            };
            (tr / l2, diff.iter().map(|v| v * v).sum::<f64>() / l2)
        }
        Covariance::Diagonal(pd) => {
            let qd: Vec<f64> = match &q.cov {
                Covariance::Isotropic(s) => vec![*s; q.dim()],
                Covariance::Diagonal(d) => d.clone(),
                Covariance::Full(m) => m.diagonal().iter().copied().collect(),
            };
            (
                qd.iter().zip(pd).map(|(a, b)| a / b).sum(),
                diff.iter().zip(pd).map(|(v, b)| v * v / b).sum(),
            )
        }
        Covariance::Full(_) => {
            let pc = p.cov_matrix().cholesky().ok_or_else(|| Error::arg("covariance is not positive definite"))?;
            let tr = pc.solve(&q.cov_matrix()).trace();
            let d = nalgebra::DVector::from_vec(diff);
            (tr, d.dot(&pc.solve(&d)))
        }
    };
    Ok(0.5 * (trace_term + maha - k + p.logdet_cov() - q.logdet_cov()))
}

/// How `E_{w~Q}[L(w)]` is evaluated.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExpectationRule {
    /// `m` samples in antithetic pairs.
    MonteCarlo { m: usize, seed: Seed },
    /// The `2k` points `mean +- sqrt(k) L e_i`; exact for polynomials of degree <= 3.
    SigmaPoints,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComplexityReport {
    pub beta: f64,
    pub expected_loss: f64,
    pub kl_nats: f64,
    pub c_beta: f64,
    pub mc_samples: usize,
}

/// Expected loss under `q`, evaluated by `rule`.
pub fn expected_loss<O: Objective + ?Sized>(
    obj: &O,
    data: &LabeledDataset,
    q: &GaussianSpec,
    rule: ExpectationRule,
) -> Result<(f64, usize)> {
    if q.dim() != obj.dim() {
        return Err(Error::Shape { expected: format!("{} weights", obj.dim()), got: q.dim().to_string() });
    }
    obj.check(data)?;
    let k = q.dim();
    let points: Vec<Vec<f64>> = match rule {
        ExpectationRule::MonteCarlo { m, seed } => {
            if m == 0 {
                return Err(Error::arg("need at least one Monte-Carlo sample"));
            }
            let mut rng = seed.rng();
            let mut pts = Vec::with_capacity(m);
            while pts.len() < m {
                let z: Vec<f64> = (0..k).map(|_| StandardNormal.sample(&mut rng)).collect();
                pts.push(q.transform(&z));
                if pts.len() < m {
                    let neg: Vec<f64> = z.iter().map(|v| -v).collect();
                    pts.push(q.transform(&neg));
                }
            }
            pts
        }
        ExpectationRule::SigmaPoints => {
            let r = (k as f64).sqrt();
            (0..2 * k)
                .map(|j| {
                    let mut z = vec![0.0; k];
                    z[j / 2] = if j % 2 == 0 { r } else { -r };
                    q.transform(&z)
                })
                .collect()
        }
    };
    let losses: Vec<f64> = points.par_iter().map(|w| obj.loss(w, data, None)).collect::<Result<_>>()?;
    let n = losses.len();
    Ok((losses.iter().sum::<f64>() / n as f64, n))
}

/// `C_beta = E_Q[L] + beta KL(Q || P)` with `m` Monte-Carlo weight samples.
pub fn complexity<O: Objective + ?Sized>(
    obj: &O,
    data: &LabeledDataset,
    q: &GaussianSpec,
    p: &GaussianSpec,
    beta: f64,
    m: usize,
    seed: Seed,
) -> Result<ComplexityReport> {
    complexity_with(obj, data, q, p, beta, ExpectationRule::MonteCarlo { m, seed })
}

pub fn complexity_with<O: Objective + ?Sized>(
    obj: &O,
    data: &LabeledDataset,
    q: &GaussianSpec,
    p: &GaussianSpec,
    beta: f64,
    rule: ExpectationRule,
) -> Result<ComplexityReport> {
    if !(beta >= 0.0 && beta.is_finite()) {
        return Err(Error::arg("beta must be non-negative"));
    }
    let kl = kl_gaussians(q, p)?;
    let (el, n) = expected_loss(obj, data, q, rule)?;
    let mc_samples = if matches!(rule, ExpectationRule::MonteCarlo { .. }) { n } else { 0 };
    Ok(ComplexityReport { beta, expected_loss: el, kl_nats: kl, c_beta: el + beta * kl, mc_samples })
}

fn shifted(h: &Matrix, beta: f64, lambda2: f64) -> Result<Matrix> {
    if !h.is_square() || h.nrows() == 0 {
        return Err(Error::arg("curvature must be a nonempty square matrix"));
    }
    if !(beta > 0.0 && lambda2 > 0.0) {
        return Err(Error::arg("beta and lambda^2 must be positive"));
    }
    let mut s = (h + h.transpose()) * 0.5;
    let shift = beta / (2.0 * lambda2);
    for i in 0..s.nrows() {
        s[(i, i)] += shift;
    }
    Ok(s)
}

fn not_pd() -> Error {
    Error::NotPositiveDefinite(
        "H + beta/(2 lambda^2) I is indefinite; evaluate with the Fisher, a positive semi-definite stand-in for the Hessian"
            .into(),
    )
}

/// `Sigma* = (beta/2) (H + beta/(2 lambda^2) I)^{-1}`.
pub fn optimal_sigma(h: &Matrix, beta: f64, lambda2: f64) -> Result<Matrix> {
    let s = shifted(h, beta, lambda2)?;
    let inv = s.cholesky().ok_or_else(not_pd)?.inverse();
    Ok(inv * (beta / 2.0))
}

/// Quadratic surrogate `tr(H Sigma) + beta KL(N(w*, Sigma) || N(0, lambda^2 I))`
/// of `C_beta - L(w*)`.
pub fn quadratic_surrogate(h: &Matrix, w_star: &[f64], sigma: &Matrix, beta: f64, lambda2: f64) -> Result<f64> {
    let q = GaussianSpec::full(w_star.to_vec(), sigma.clone())?;
    let p = GaussianSpec::isotropic(vec![0.0; w_star.len()], lambda2)?;
    Ok((h * sigma).trace() + beta * kl_gaussians(&q, &p)?)
}

/// Information in the weights at the optimal Gaussian post-distribution:
/// `KL(N(w*, Sigma*) || N(0, lambda^2 I))`
/// `= 1/2 log|H + beta/(2 lambda^2)| + k/2 log(2 lambda^2 / beta) - k/2
///    + (|w*|^2 + tr Sigma*) / (2 lambda^2)`.
pub fn fisher_iw(h: &Matrix, w_star: &[f64], beta: f64, lambda2: f64) -> Result<f64> {
    fisher_iw_with_offset(h, w_star, beta, lambda2, 0.5)
}

/// The same expression with a constant of `-k` instead of `-k/2`. It sits
/// exactly `k/2` below [`fisher_iw`], so a flat direction scores `-1/2`.
pub fn fisher_iw_unit_offset(h: &Matrix, w_star: &[f64], beta: f64, lambda2: f64) -> Result<f64> {
    fisher_iw_with_offset(h, w_star, beta, lambda2, 1.0)
}

fn fisher_iw_with_offset(h: &Matrix, w_star: &[f64], beta: f64, lambda2: f64, per_dim: f64) -> Result<f64> {
    if w_star.len() != h.nrows() {
        return Err(Error::Shape { expected: format!("{} weights", h.nrows()), got: w_star.len().to_string() });
    }
    let s = shifted(h, beta, lambda2)?;
    let ch = s.cholesky().ok_or_else(not_pd)?;
    let k = h.nrows() as f64;
    let logdet = 2.0 * ch.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let tr_sigma = ch.inverse().trace() * beta / 2.0;
    let w2: f64 = w_star.iter().map(|v| v * v).sum();
    Ok(0.5 * logdet + 0.5 * k * (2.0 * lambda2 / beta).ln() - per_dim * k + (w2 + tr_sigma) / (2.0 * lambda2))
}

/// Improper-prior reporting mode: `1/2 log|F + eps I|`, the only term that
/// survives `lambda -> infinity` up to constants. Never a PAC-Bayes input.
pub fn iw_logdet_only(f: &Matrix, eps: f64) -> Result<f64> {
    Ok(0.5 * logdet_spd(f, eps)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PacBayesReport {
    pub train_loss: f64,
    pub kl_nats: f64,
    pub n: usize,
    pub beta: f64,
    pub delta: f64,
    pub bound: f64,
    pub expectation_form: bool,
}

fn pac_bayes_value(train_loss: f64, kl: f64, n: usize, beta: f64, delta: f64, expectation_form: bool) -> f64 {
    let conf = if expectation_form { 0.0 } else { (1.0 / delta).ln() };
    (train_loss + beta / n as f64 * (kl + conf)) / (1.0 - 1.0 / (2.0 * beta))
}

fn check_pac_inputs(train_loss: f64, kl: f64, n: usize, delta: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&train_loss) {
        return Err(Error::arg(format!("train loss {train_loss} outside [0, 1]")));
    }
    if !kl.is_finite() {
        return Err(Error::arg("KL must be finite"));
    }
    if n == 0 {
        return Err(Error::arg("need N >= 1"));
    }
    if !(delta > 0.0 && delta <= 1.0) {
        return Err(Error::arg(format!("delta {delta} outside (0, 1]")));
    }
    Ok(())
}

/// `(1 - 1/(2 beta))^{-1} [L + beta/N (KL + log 1/delta)]`; the expectation
/// form drops the `log 1/delta` term.
pub fn pac_bayes_bound(
    train_loss: f64,
    kl_nats: f64,
    n: usize,
    beta: f64,
    delta: f64,
    expectation_form: bool,
) -> Result<PacBayesReport> {
    check_pac_inputs(train_loss, kl_nats, n, delta)?;
    if !(beta > 0.5 && beta.is_finite()) {
        return Err(Error::arg(format!("beta {beta} must exceed 1/2")));
    }
    let bound = pac_bayes_value(train_loss, kl_nats, n, beta, delta, expectation_form);
    Ok(PacBayesReport { train_loss, kl_nats, n, beta, delta, bound, expectation_form })
}

/// Bound-minimizing `beta` by golden-section search. With a zero complexity
/// term the bound decreases towards `train_loss` as `beta -> infinity`, which
/// is reported as `beta = inf`.
pub fn optimal_beta(
    train_loss: f64,
    kl_nats: f64,
    n: usize,
    delta: f64,
    expectation_form: bool,
) -> Result<PacBayesReport> {
    check_pac_inputs(train_loss, kl_nats, n, delta)?;
    let conf = if expectation_form { 0.0 } else { (1.0 / delta).ln() };
    if kl_nats + conf <= 0.0 {
        return Ok(PacBayesReport {
            train_loss,
            kl_nats,
            n,
            beta: f64::INFINITY,
            delta,
            bound: train_loss,
            expectation_form,
        });
    }
    let f = |b: f64| pac_bayes_value(train_loss, kl_nats, n, b, delta, expectation_form);
    let mut hi = 1.0;
    while f(2.0 * hi) < f(hi) {
        hi *= 2.0;
    }
    let beta = golden_section(f, 0.5 + 1e-12, 2.0 * hi, 1e-12);
    pac_bayes_bound(train_loss, kl_nats, n, beta, delta, expectation_form)
}

/// Minimizer of a unimodal `f` on `[a, b]`.
pub fn golden_section(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64, rel_tol: f64) -> f64 {
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..300 {
        if (b - a).abs() <= rel_tol * (a.abs() + b.abs()) {
            break;
        }
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = f(d);
        }
    }
    0.5 * (a + b)
}

/// Equal-weight-or-weighted mixture of Gaussians.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianMixture {
    pub components: Vec<(f64, GaussianSpec)>,
}

impl GaussianMixture {
    pub fn single(g: GaussianSpec) -> Self {
        GaussianMixture { components: vec![(1.0, g)] }
    }

    pub fn equal(gs: Vec<GaussianSpec>) -> Result<Self> {
        if gs.is_empty() {
            return Err(Error::arg("a mixture needs at least one component"));
        }
        let w = 1.0 / gs.len() as f64;
        Ok(GaussianMixture { components: gs.into_iter().map(|g| (w, g)).collect() })
    }

    pub fn dim(&self) -> usize {
        self.components[0].1.dim()
    }

    pub fn log_density(&self, w: &[f64]) -> f64 {
        log_sum_exp(self.components.iter().map(|(p, g)| p.ln() + g.log_density(w)))
    }
}

fn log_sum_exp(it: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = it.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + it.map(|v| (v - m).exp()).sum::<f64>().ln()
}

fn check_weights(weights: &[f64], n: usize) -> Result<()> {
    if weights.len() != n {
        return Err(Error::arg("one weight per post-distribution"));
    }
    if weights.iter().any(|w| !(*w >= 0.0)) || (weights.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::arg("dataset weights must be a probability vector"));
    }
    Ok(())
}

/// Monte-Carlo mutual information with its budget.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiEstimate {
    pub nats: f64,
    pub samples_per_component: usize,
}

/// `I(w; D) = E_D[KL(Q(w|D) || Qbar)]` with `Qbar = sum_D p(D) Q(w|D)`.
pub fn adapted_prior_mi(posts: &[GaussianSpec], weights: &[f64], samples: usize, seed: Seed) -> Result<MiEstimate> {
    let mixtures: Vec<GaussianMixture> = posts.iter().cloned().map(GaussianMixture::single).collect();
    adapted_prior_mi_mixtures(&mixtures, weights, samples, seed)
}

/// [`adapted_prior_mi`] when each `Q(w|D)` is itself a mixture (several runs
/// per dataset). Draws for post `j` come from `seed.derive(j)`, so two calls
/// with equal seeds share their standard-normal draws.
pub fn adapted_prior_mi_mixtures(
    posts: &[GaussianMixture],
    weights: &[f64],
    samples: usize,
    seed: Seed,
) -> Result<MiEstimate> {
    check_weights(weights, posts.len())?;
    if samples == 0 {
        return Err(Error::arg("need at least one sample per component"));
    }
    if posts.len() < 2 {
        return Ok(MiEstimate { nats: 0.0, samples_per_component: samples });
    }
    let k = posts[0].dim();
    if posts.iter().any(|p| p.dim() != k) {
        return Err(Error::arg("post-distributions differ in dimension"));
    }
    let marginal = GaussianMixture {
        components: posts
            .iter()
            .zip(weights)
            .flat_map(|(p, &pw)| p.components.iter().map(move |(cw, g)| (pw * cw, g.clone())))
            .filter(|(w, _)| *w > 0.0)
            .collect(),
    };
    let terms: Vec<f64> = posts
        .par_iter()
        .enumerate()
        .map(|(j, q)| {
            if weights[j] == 0.0 {
                return 0.0;
            }
            let mut rng = seed.derive(j as u64).rng();
            let mut acc = 0.0;
            for _ in 0..samples {
                let u: f64 = rng.random();
                let mut c = 0;
                let mut cum = 0.0;
                for (i, (cw, _)) in q.components.iter().enumerate() {
                    cum += cw;
                    c = i;
                    if u < cum {
                        break;
                    }
                }
                let w = q.components[c].1.sample(&mut rng);
                acc += q.log_density(&w) - marginal.log_density(&w);
            }
            weights[j] * acc / samples as f64
        })
        .collect();
    Ok(MiEstimate { nats: terms.iter().sum(), samples_per_component: samples })
}

/// `E_D[KL(Q(w|D) || P)]` for a Gaussian `P`, in closed form.
pub fn expected_kl_to(posts: &[GaussianSpec], weights: &[f64], p: &GaussianSpec) -> Result<f64> {
    check_weights(weights, posts.len())?;
    let mut s = 0.0;
    for (q, w) in posts.iter().zip(weights) {
        s += w * kl_gaussians(q, p)?;
    }
    Ok(s)
}

/// A Fisher-based mutual-information approximation with its regime flags.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiApprox {
    /// Reported value, `max(raw, 0)`.
    pub nats: f64,
    /// Unclamped value; `-inf` when some Fisher is singular.
    pub raw: f64,
    /// The raw value was negative and clamped to zero.
    pub clamped: bool,
    /// A rank-deficient matrix was damped before taking its log-determinant.
    pub damped: bool,
}

impl MiApprox {
    fn from_raw(raw: f64, damped: bool) -> Self {
        let clamped = !(raw >= 0.0);
        MiApprox { nats: if clamped { 0.0 } else { raw }, raw, clamped, damped }
    }
}

/// `log|F|` of a symmetric PSD matrix through its eigenvalues; `-inf` when singular.
fn psd_logdet(f: &Matrix) -> Result<f64> {
    if !f.is_square() || f.nrows() == 0 {
        return Err(Error::arg("Fisher must be a nonempty square matrix"));
    }
    check_finite(f.as_slice())?;
    let sym = (f + f.transpose()) * 0.5;
    let eig = sym.symmetric_eigenvalues();
    let scale = eig.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if eig.iter().any(|&l| l < -1e-8 * scale) {
        return Err(Error::arg("Fisher matrix is not positive semi-definite"));
    }
    Ok(eig.iter().map(|&l| if l > 0.0 { l.ln() } else { f64::NEG_INFINITY }).sum())
}

/// `H(x) - E_x[1/2 log((2 pi e)^k / |F_{y|x}|)]`, clamped at 0.
pub fn brunel_nadal_mi(entropy_x: f64, fishers: &[Matrix]) -> Result<MiApprox> {
    if fishers.is_empty() {
        return Err(Error::arg("need at least one conditional Fisher"));
    }
    let mut acc = 0.0;
    for f in fishers {
        let k = f.nrows() as f64;
        acc += 0.5 * psd_logdet(f)? - 0.5 * k * (2.0 * PI * E).ln();
    }
    Ok(MiApprox::from_raw(entropy_x + acc / fishers.len() as f64, false))
}

/// Fisher of `N(mu(theta), Sigma(theta))`:
/// `F_mn = dmu_m^T Sigma^{-1} dmu_n + 1/2 tr(Sigma^{-1} dSigma_m Sigma^{-1} dSigma_n)`.
/// `dmu` holds one column per parameter; the second term is skipped when
/// `dsigma` is `None`.
pub fn gaussian_param_fisher(dmu: &Matrix, sigma: &Matrix, dsigma: Option<&[Matrix]>) -> Result<Matrix> {
    let n = sigma.nrows();
    if !sigma.is_square() || dmu.nrows() != n {
        return Err(Error::Shape { expected: format!("{n} rows in dmu and a square Sigma"), got: format!("{}×{}", dmu.nrows(), dmu.ncols()) });
    }
    let ch = ((sigma + sigma.transpose()) * 0.5)
        .cholesky()
        .ok_or_else(|| Error::arg("Sigma must be positive definite"))?;
    let mut f = dmu.transpose() * ch.solve(dmu);
    if let Some(ds) = dsigma {
        if ds.len() != dmu.ncols() {
            return Err(Error::arg("one dSigma per parameter"));
        }
        let a: Vec<Matrix> = ds.iter().map(|d| ch.solve(d)).collect();
        for m in 0..a.len() {
            for j in 0..a.len() {
                f[(m, j)] += 0.5 * (&a[m] * &a[j]).trace();
            }
        }
    }
    Ok(f)
}

/// Shannon information in the weights from stability and curvature:
/// `H(D) - E_D[1/2 log(beta^p (2 pi e)^p / |J^T F J|)]`, `p` the dimension of
/// the dataset parametrization and `J = dw*/dD` (k × p), one `(J, F)` pair per
/// dataset. Equal to [`brunel_nadal_mi`] with the Gaussian-family Fisher of
/// `N(w*(D), beta F^{-1})`, formed without inverting `F`. Rank-deficient
/// `J^T F J` is damped by `1e-8 tr / p` and flagged.
pub fn shannon_fisher_approx(entropy_d: f64, cases: &[(Matrix, Matrix)], beta: f64) -> Result<MiApprox> {
    if cases.is_empty() {
        return Err(Error::arg("need at least one dataset"));
    }
    if !(beta > 0.0) {
        return Err(Error::arg("beta must be positive"));
    }
    let mut damped = false;
    let mut acc = 0.0;
    for (j, f) in cases {
        if f.nrows() != j.nrows() || !f.is_square() {
            return Err(Error::Shape { expected: format!("{}×{} Fisher", j.nrows(), j.nrows()), got: format!("{}×{}", f.nrows(), f.ncols()) });
        }
        psd_logdet(f).map(|_| ())?;
        let m = j.transpose() * f * j / beta;
        let p = m.nrows() as f64;
        let ld = match logdet_spd(&m, 0.0) {
            Ok(v) if v.is_finite() => v,
            _ => {
                let eps = 1e-8 * m.trace() / p;
                if eps > 0.0 {
                    damped = true;
                    logdet_spd(&m, eps).unwrap_or(f64::NEG_INFINITY)
                } else {
                    f64::NEG_INFINITY
                }
            }
        };
        acc += 0.5 * ld - 0.5 * p * (2.0 * PI * E).ln();
    }
    Ok(MiApprox::from_raw(entropy_d + acc / cases.len() as f64, damped))
}

/// Scalars gathered by an experiment run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct InfoReport {
    pub complexity: Option<ComplexityReport>,
    pub pac_bayes: Option<PacBayesReport>,
    pub shannon_mi_nats: Option<f64>,
    pub fisher_iw_nats: Option<f64>,
    pub mean_escape_time: Option<f64>,
}
