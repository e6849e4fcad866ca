use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::stability::CONVERGENCE_TOL;
use super::train::{sgd_train, NoiseMode, TrainConfig};
use crate::error::{Error, Result};
use crate::infoweights::{adapted_prior_mi_mixtures, fisher_iw, shannon_fisher_approx, GaussianMixture, GaussianSpec};
use crate::models::{make_toy_dataset, toy_fisher, toy_phi, LabeledDataset, ToyModel, ToyModelConfig};
use crate::ndcore::{Matrix, WeightVector};
use crate::rng::Seed;

/// Settings of the mean-regression information experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyPipelineConfig {
    pub model: ToyModelConfig,
    pub batch_sizes: Vec<usize>,
    pub datasets: usize,
    /// Independent SGD runs per dataset; with more than one, `Q(theta|D)` is
    /// the equal mixture of the per-run Gaussians.
    pub runs_per: usize,
    /// Template for every run; `batch_size` and `seed` are set per trial.
    pub train: TrainConfig,
    pub seed: Seed,
    /// Initial `theta` is uniform on `[-init_range, init_range]`.
    pub init_range: f64,
    /// Safeguarded Newton iterations on the full loss after SGD.
    pub polish_iters: usize,
    /// Total Monte-Carlo budget of the mixture MI estimate.
    pub mixture_samples: usize,
    /// Prior variances searched for the best proper Gaussian prior.
    pub lambda2_grid: Vec<f64>,
    /// Shift used for the finite-difference stability Jacobian; `None` skips it.
    pub jacobian_delta: Option<f64>,
}

impl Default for ToyPipelineConfig {
    fn default() -> Self {
        ToyPipelineConfig {
            model: ToyModelConfig::default(),
            batch_sizes: vec![100, 25, 10, 5],
            datasets: 200,
            runs_per: 1,
            train: TrainConfig::sgd(0.2, 100, 50_000, Seed(0)),
            seed: Seed(0),
            init_range: 20.0,
            polish_iters: 200,
            mixture_samples: 10_000,
            lambda2_grid: (0..=160).map(|i| 10f64.powf(-2.0 + i as f64 * 0.05)).collect(),
            jacobian_delta: Some(1e-5),
        }
    }
}

impl ToyPipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch_sizes.is_empty() || self.batch_sizes.iter().any(|&b| b < 1 || b > self.model.n) {
            return Err(Error::arg(format!("batch sizes must lie in [1, {}]", self.model.n)));
        }
        if self.datasets < 2 || self.runs_per < 1 {
            return Err(Error::arg("need at least two datasets and one run per dataset"));
        }
        if !(self.init_range > 0.0) || self.mixture_samples == 0 || self.lambda2_grid.is_empty() {
            return Err(Error::arg("init range, mixture budget and lambda^2 grid must be positive"));
        }
        if self.lambda2_grid.iter().any(|l| !(*l > 0.0)) {
            return Err(Error::arg("prior variances must be positive"));
        }
        if self.train.noise != NoiseMode::MinibatchOnly {
            return Err(Error::arg("the toy pipeline studies minibatch noise only"));
        }
        Ok(())
    }

    /// Lower bound on the Fisher used for `Q(theta|D)`: `1e-8` of the largest
    /// attainable value `2 N c^2`.
    pub fn fisher_floor(&self) -> f64 {
        1e-8 * 2.0 * self.model.n as f64 * self.model.c * self.model.c
    }

    /// `|theta|` beyond which a minimum lies outside the sharpest band, the
    /// half-period of `phi` nearest the origin: `sinh(pi / c)`.
    pub fn flat_threshold(&self) -> f64 {
        (std::f64::consts::PI / self.model.c).sinh()
    }
}

/// One converged end point.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Endpoint {
    pub dataset: usize,
    pub run: usize,
    pub theta: f64,
    /// Closed-form Fisher `2 N phi'(theta)^2`, unfloored.
    pub fisher: f64,
    pub grad_norm: f64,
    /// `d theta* / d shift` by central differences, when requested.
    pub jacobian: Option<f64>,
    /// The sample mean lies outside the range of `phi`, so the minimizer sits
    /// on an extremum of `phi` and does not move with the data.
    pub pinned: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyBatchResult {
    pub batch_size: usize,
    pub shannon_mi_nats: f64,
    pub gaussian_iw_nats: f64,
    pub best_lambda2: f64,
    /// Stability-based approximation of the Shannon MI over the datasets
    /// that are not pinned, when Jacobians were computed.
    pub shannon_fisher_nats: Option<f64>,
    pub pinned: usize,
    pub mean_abs_theta: f64,
    pub flat_fraction: f64,
    pub mean_fisher: f64,
    /// Half-width of the normal 95% interval of `mean_fisher`.
    pub fisher_ci95: f64,
    pub unconverged: usize,
    pub endpoints: Vec<Endpoint>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyReport {
    pub config: ToyPipelineConfig,
    /// Differential entropy of the sample mean, the dataset statistic.
    pub entropy_d: f64,
    pub flat_threshold: f64,
    pub fisher_floor: f64,
    pub rows: Vec<ToyBatchResult>,
}

impl ToyReport {
    /// One row per batch size.
    pub fn to_csv(&self) -> Result<String> {
        let mut wtr = csv::Writer::from_writer(Vec::new());
        wtr.write_record([
            "batch_size",
            "shannon_mi_nats",
            "gaussian_iw_nats",
            "mean_abs_theta",
            "best_lambda2",
            "shannon_fisher_nats",
            "flat_fraction",
            "mean_fisher",
            "fisher_ci95",
            "unconverged",
            "pinned",
        ])?;
        for r in &self.rows {
            wtr.write_record([
                r.batch_size.to_string(),
                r.shannon_mi_nats.to_string(),
                r.gaussian_iw_nats.to_string(),
                r.mean_abs_theta.to_string(),
                r.best_lambda2.to_string(),
                r.shannon_fisher_nats.map_or(String::new(), |v| v.to_string()),
                r.flat_fraction.to_string(),
                r.mean_fisher.to_string(),
                r.fisher_ci95.to_string(),
                r.unconverged.to_string(),
                r.pinned.to_string(),
            ])?;
        }
        finish(wtr)
    }

    /// Every end point: `batch_size,dataset,run,theta,fisher,jacobian`.
    pub fn endpoints_csv(&self) -> Result<String> {
        let mut wtr = csv::Writer::from_writer(Vec::new());
        wtr.write_record(["batch_size", "dataset", "run", "theta", "fisher", "jacobian"])?;
        for r in &self.rows {
            for e in &r.endpoints {
                wtr.write_record([
                    r.batch_size.to_string(),
                    e.dataset.to_string(),
                    e.run.to_string(),
                    e.theta.to_string(),
                    e.fisher.to_string(),
                    e.jacobian.map_or(String::new(), |v| v.to_string()),
                ])?;
            }
        }
        finish(wtr)
    }

    /// Histogram of end points on `bins` equal cells of `[-range, range]`:
    /// `batch_size,lo,hi,count` (points outside are dropped).
    pub fn histogram_csv(&self, bins: usize, range: f64) -> Result<String> {
        let mut wtr = csv::Writer::from_writer(Vec::new());
        wtr.write_record(["batch_size", "lo", "hi", "count"])?;
        let width = 2.0 * range / bins as f64;
        for r in &self.rows {
            let mut counts = vec![0usize; bins];
            for e in &r.endpoints {
                let i = ((e.theta + range) / width).floor();
                if i >= 0.0 && (i as usize) < bins {
                    counts[i as usize] += 1;
                }
            }
            for (i, c) in counts.iter().enumerate() {
                let lo = -range + i as f64 * width;
                wtr.write_record([r.batch_size.to_string(), lo.to_string(), (lo + width).to_string(), c.to_string()])?;
            }
        }
        finish(wtr)
    }
}

pub(crate) fn finish(wtr: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = wtr.into_inner().map_err(|e| Error::Parse(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// `phi''(theta)`.
fn phi_second(theta: f64, c: f64) -> f64 {
    let s2 = 1.0 + theta * theta;
    let u = c * theta.asinh();
    -c * c * u.sin() / s2 - c * u.cos() * theta / (s2 * s2.sqrt())
}

/// Safeguarded Newton descent of `(mean - phi(theta))^2` from `theta`: Newton
/// where the curvature is positive, otherwise a downhill step, every step
/// capped at a quarter radian of the phase `c asinh(theta)`. Returns the end
/// point and `|L'|`.
pub fn toy_polish(theta: f64, mean: f64, c: f64, iters: usize) -> (f64, f64) {
    let mut t = theta;
    let grad = |t: f64| {
        let (p, d) = toy_phi(t, c);
        -2.0 * (mean - p) * d
    };
    let mut g = grad(t);
    for _ in 0..iters {
        if g == 0.0 {
            break;
        }
        let (p, d) = toy_phi(t, c);
        let h = 2.0 * d * d - 2.0 * (mean - p) * phi_second(t, c);
        let cap = 0.25 * (1.0 + t * t).sqrt() / c;
        let step = if h > 0.0 { (-g / h).clamp(-cap, cap) } else { -g.signum() * cap };
        let next = t + step;
        let gn = grad(next);
        if (next - t).abs() <= 1e-16 * t.abs().max(1.0) {
            t = next;
            g = gn;
            break;
        }
        t = next;
        g = gn;
    }
    (t, g.abs())
}

/// SGD on the toy loss from `theta0`, then [`toy_polish`] on the full loss.
pub fn toy_train(
    model: &ToyModelConfig,
    data: &LabeledDataset,
    cfg: &TrainConfig,
    theta0: f64,
    polish_iters: usize,
) -> Result<(f64, f64)> {
    let obj = ToyModel { c: model.c };
    let trace = sgd_train(&obj, data, cfg, &WeightVector::flat(vec![theta0])?)?;
    let theta = trace.final_weights().values()[0];
    let xs = data.scalars();
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    Ok(toy_polish(theta, mean, model.c, polish_iters))
}

/// Differential entropy of `mean ~ Unif[-1, 1] + N(0, 1/N)` by Simpson's
/// rule on its closed-form density.
pub fn sample_mean_entropy(n: usize) -> f64 {
    let s = 1.0 / (n as f64).sqrt();
    let phi = |z: f64| 0.5 * libm::erfc(-z / std::f64::consts::SQRT_2);
    let density = |y: f64| 0.5 * (phi((y + 1.0) / s) - phi((y - 1.0) / s));
    let (a, b) = (-1.0 - 12.0 * s, 1.0 + 12.0 * s);
    let m = 40_000;
    let h = (b - a) / m as f64;
    let f = |y: f64| {
        let p = density(y);
        if p > 0.0 {
            -p * p.ln()
        } else {
            0.0
        }
    };
    let mut acc = f(a) + f(b);
    for i in 1..m {
        acc += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    acc * h / 3.0
}

/// Trains on `datasets` sampled toy datasets for every batch size and
/// measures the information the end points carry about the data: the Shannon
/// MI of `N(theta*, F^{-1})` against the cross-dataset mixture, the best
/// proper-prior Gaussian IW and, with Jacobians, the stability-based estimate.
///
/// Dataset `j`, its initial points and its SGD seeds are shared by every
/// batch size, as are the mixture draws.
pub fn toy_pipeline(cfg: &ToyPipelineConfig) -> Result<ToyReport> {
    cfg.validate()?;
    let floor = cfg.fisher_floor();
    let threshold = cfg.flat_threshold();
    let entropy_d = sample_mean_entropy(cfg.model.n);
    let datasets: Vec<LabeledDataset> = (0..cfg.datasets)
        .map(|j| make_toy_dataset(&cfg.model, cfg.seed.derive(j as u64).derive(0)).map(|(_, d)| d))
        .collect::<Result<_>>()?;
    let mut rows = Vec::with_capacity(cfg.batch_sizes.len());
    for &b in &cfg.batch_sizes {
        let trials: Vec<(usize, usize)> = (0..cfg.datasets).flat_map(|j| (0..cfg.runs_per).map(move |r| (j, r))).collect();
        let endpoints: Vec<Endpoint> = trials
            .par_iter()
            .map(|&(j, r)| {
                let ds = cfg.seed.derive(j as u64);
                let theta0 = ds.derive(1 + r as u64).rng().random_range(-cfg.init_range..=cfg.init_range);
                let mut train = cfg.train.clone();
                train.batch_size = b;
                train.seed = ds.derive(1_000_000 + r as u64);
                train.snapshot_stride = 0;
                let data = &datasets[j];
                let mean = data.scalars().iter().sum::<f64>() / data.len() as f64;
                let (theta, grad_norm) = toy_train(&cfg.model, data, &train, theta0, cfg.polish_iters)?;
                let jacobian = match cfg.jacobian_delta {
                    Some(delta) => {
                        let up = toy_train(&cfg.model, &data.perturb_input(None, 0, delta)?, &train, theta0, cfg.polish_iters)?.0;
                        let down =
                            toy_train(&cfg.model, &data.perturb_input(None, 0, -delta)?, &train, theta0, cfg.polish_iters)?.0;
                        Some((up - down) / (2.0 * delta))
                    }
                    None => None,
                };
                Ok(Endpoint { dataset: j, run: r, theta, fisher: toy_fisher(theta, cfg.model.n, cfg.model.c), grad_norm, jacobian, pinned: mean.abs() >= 1.0 })
            })
            .collect::<Result<_>>()?;
        rows.push(summarize(cfg, b, endpoints, floor, threshold, entropy_d)?);
    }
    Ok(ToyReport { config: cfg.clone(), entropy_d, flat_threshold: threshold, fisher_floor: floor, rows })
}

fn summarize(
    cfg: &ToyPipelineConfig,
    b: usize,
    endpoints: Vec<Endpoint>,
    floor: f64,
    threshold: f64,
    entropy_d: f64,
) -> Result<ToyBatchResult> {
    let n = endpoints.len() as f64;
    let posts: Vec<GaussianMixture> = endpoints
        .chunks(cfg.runs_per)
        .map(|runs| {
            let gs = runs
                .iter()
                .map(|e| GaussianSpec::isotropic(vec![e.theta], 1.0 / e.fisher.max(floor)))
                .collect::<Result<Vec<_>>>()?;
            GaussianMixture::equal(gs)
        })
        .collect::<Result<_>>()?;
    let weights = vec![1.0 / posts.len() as f64; posts.len()];
    let per_component = cfg.mixture_samples.div_ceil(posts.len());
    let mi = adapted_prior_mi_mixtures(&posts, &weights, per_component, cfg.seed.derive(u64::MAX))?;

    // Optimal Gaussian with H = F/2 and beta = 1, i.e. Sigma* = (F + 1/lambda^2)^{-1}.
    let mut best = (f64::INFINITY, f64::NAN);
    for &l2 in &cfg.lambda2_grid {
        let mut s = 0.0;
        for e in &endpoints {
            s += fisher_iw(&Matrix::from_element(1, 1, 0.5 * e.fisher.max(floor)), &[e.theta], 1.0, l2)?;
        }
        let v = s / n;
        if v < best.0 {
            best = (v, l2);
        }
    }

    let shannon_fisher_nats = if endpoints.iter().all(|e| e.jacobian.is_some()) {
        let cases: Vec<(Matrix, Matrix)> = endpoints
            .iter()
            .filter(|e| !e.pinned)
            .map(|e| (Matrix::from_element(1, 1, e.jacobian.unwrap()), Matrix::from_element(1, 1, e.fisher.max(floor))))
            .collect();
        if cases.is_empty() {
            None
        } else {
            Some(shannon_fisher_approx(entropy_d, &cases, 1.0)?.nats)
        }
    } else {
        None
    };
    let mean_fisher = endpoints.iter().map(|e| e.fisher).sum::<f64>() / n;
    let var = endpoints.iter().map(|e| (e.fisher - mean_fisher).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    Ok(ToyBatchResult {
        batch_size: b,
        shannon_mi_nats: mi.nats,
        gaussian_iw_nats: best.0,
        best_lambda2: best.1,
        shannon_fisher_nats,
        mean_abs_theta: endpoints.iter().map(|e| e.theta.abs()).sum::<f64>() / n,
        flat_fraction: endpoints.iter().filter(|e| e.theta.abs() > threshold).count() as f64 / n,
        mean_fisher,
        fisher_ci95: 1.96 * (var / n).sqrt(),
        pinned: endpoints.iter().filter(|e| e.pinned).count(),
        unconverged: endpoints.iter().filter(|e| !(e.grad_norm <= CONVERGENCE_TOL)).count(),
        endpoints,
    })
}
