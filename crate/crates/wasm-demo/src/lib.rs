//! Browser demo: the toy loss and free-energy landscape, Langevin escape
//! times on the double well, and the PAC-Bayes bound against `beta`.
//!
//! Each export takes plain numbers and returns a JSON string; the plain
//! functions behind them are usable natively.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use iw_core::dynamics::{escape_time_mc, linear_fit, toy_free_energy, DoubleWell, Region};
use iw_core::infoweights::{optimal_beta, pac_bayes_bound};
use iw_core::models::{make_toy_dataset, toy_fisher, toy_loss, ToyModelConfig};
use iw_core::Seed;
use serde::Serialize;
use wasm_bindgen::prelude::*;

/// Step cap per run, so a cold temperature cannot hang the page.
pub const MAX_STEPS: usize = 2_000_000;

#[derive(Debug, Serialize)]
pub struct Landscape {
    pub mu: f64,
    pub sample_mean: f64,
    pub theta: Vec<f64>,
    pub loss: Vec<f64>,
    /// Tends to `-inf` where `phi'` vanishes; non-finite values serialize as `null`.
    pub free_energy: Vec<f64>,
    pub fisher: Vec<f64>,
}

pub fn landscape(n: usize, c: f64, temperature: f64, seed: u64, half_width: f64, points: usize) -> iw_core::Result<Landscape> {
    if points < 2 || !(half_width > 0.0) {
        return Err(iw_core::Error::Argument("need two or more points on a positive range".into()));
    }
    let cfg = ToyModelConfig { n, c };
    let (mu, data) = make_toy_dataset(&cfg, Seed(seed))?;
    let xs = data.scalars();
    let sample_mean = xs.iter().sum::<f64>() / xs.len() as f64;
    let theta: Vec<f64> = (0..points).map(|i| -half_width + 2.0 * half_width * i as f64 / (points - 1) as f64).collect();
    let loss = theta.iter().map(|&t| toy_loss(t, &data, c)).collect();
    let free_energy = theta.iter().map(|&t| toy_free_energy(t, &data, c, temperature)).collect::<iw_core::Result<_>>()?;
    let fisher = theta.iter().map(|&t| toy_fisher(t, n, c)).collect();
    Ok(Landscape { mu, sample_mean, theta, loss, free_energy, fisher })
}

#[derive(Debug, Serialize)]
pub struct EscapeRow {
    pub temperature: f64,
    /// `NaN` (`null`) when every run was censored.
    pub mean_time: f64,
    pub predicted: f64,
    pub censored: usize,
}

#[derive(Debug, Serialize)]
pub struct Escape {
    pub barrier: f64,
    pub rows: Vec<EscapeRow>,
    /// Fitted slope of `log mean_time` on `1/T` over uncensored temperatures.
    pub slope: f64,
}

pub fn escape(height: f64, temperatures: &[f64], runs: usize, eta: f64, seed: u64) -> iw_core::Result<Escape> {
    let well = DoubleWell { height };
    let basin = Region::Interval { lo: 0.0, hi: f64::INFINITY };
    let mut rows = Vec::new();
    let mut barrier = f64::NAN;
    for (i, &t) in temperatures.iter().enumerate() {
        let s = escape_time_mc(&well, &[1.0], &basin, t, eta, runs, MAX_STEPS, Seed(seed).derive(i as u64))?;
        barrier = s.barrier;
        rows.push(EscapeRow { temperature: t, mean_time: s.mean_time, predicted: s.predicted_kramers, censored: s.censored });
    }
    let (x, y): (Vec<f64>, Vec<f64>) =
        rows.iter().filter(|r| r.censored == 0).map(|r| (1.0 / r.temperature, r.mean_time.ln())).unzip();
    let slope = if x.len() >= 2 { linear_fit(&x, &y).0 } else { f64::NAN };
    Ok(Escape { barrier, rows, slope })
}

#[derive(Debug, Serialize)]
pub struct PacBayesCurve {
    pub beta: Vec<f64>,
    pub bound: Vec<f64>,
    pub optimal_beta: f64,
    pub optimal_bound: f64,
}

/// Bound on a log-spaced `beta` grid over `(1/2, beta_max]`.
pub fn pac_curve(train_loss: f64, kl: f64, n: usize, delta: f64, beta_max: f64, points: usize) -> iw_core::Result<PacBayesCurve> {
    if points < 2 || !(beta_max > 0.5) {
        return Err(iw_core::Error::Argument("need two or more points and beta_max > 1/2".into()));
    }
    // Offsets above 1/2, log-spaced so the blow-up near 1/2 is resolved.
    let (lo, hi) = (1e-3f64.ln(), (beta_max - 0.5).ln());
    let beta: Vec<f64> = (0..points).map(|i| 0.5 + (lo + (hi - lo) * i as f64 / (points - 1) as f64).exp()).collect();
    let bound =
        beta.iter().map(|&b| pac_bayes_bound(train_loss, kl, n, b, delta, false).map(|r| r.bound)).collect::<iw_core::Result<_>>()?;
    let opt = optimal_beta(train_loss, kl, n, delta, false)?;
    Ok(PacBayesCurve { beta, bound, optimal_beta: opt.beta, optimal_bound: opt.bound })
}

fn json<T: Serialize>(r: iw_core::Result<T>) -> Result<String, JsError> {
    let v = r.map_err(|e| JsError::new(&e.to_string()))?;
    serde_json::to_string(&v).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen]
pub fn toy_landscape(n: usize, c: f64, temperature: f64, seed: u64, half_width: f64, points: usize) -> Result<String, JsError> {
    json(landscape(n, c, temperature, seed, half_width, points))
}

#[wasm_bindgen]
pub fn escape_times(height: f64, temperatures: Vec<f64>, runs: usize, eta: f64, seed: u64) -> Result<String, JsError> {
    json(escape(height, &temperatures, runs, eta, seed))
}

#[wasm_bindgen]
pub fn pac_bayes_curve(train_loss: f64, kl: f64, n: usize, delta: f64, beta_max: f64, points: usize) -> Result<String, JsError> {
    json(pac_curve(train_loss, kl, n, delta, beta_max, points))
}
