use std::f64::consts::PI;

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fisher::{logdet_damped, model_fisher};
use crate::models::{toy_fisher, toy_loss, LabeledDataset, ModelSpec};
use crate::ndcore::{hessian_fd_with, loss, Matrix, WeightVector};
use crate::rng::Seed;

/// `L_D(w) + (T/2) log|F(w) + eps I|` with the model Fisher on the training
/// inputs and the default relative damping.
pub fn free_energy(spec: &ModelSpec, w: &WeightVector, data: &LabeledDataset, t: f64) -> Result<f64> {
    check_temperature(t)?;
    let l = loss(spec, w, data)?;
    if t == 0.0 {
        return Ok(l);
    }
    let f = model_fisher(spec, w, data.inputs())?;
    let ld = logdet_damped(&f, f.default_damping())?;
    Ok(l + 0.5 * t * ld.value)
}

/// Toy-model free energy with the closed-form Fisher `2 N phi'(theta)^2`.
/// Infinite where `phi'` vanishes.
pub fn toy_free_energy(theta: f64, data: &LabeledDataset, c: f64, t: f64) -> Result<f64> {
    check_temperature(t)?;
    let l = toy_loss(theta, data, c);
    if t == 0.0 {
        return Ok(l);
    }
    Ok(l + 0.5 * t * toy_fisher(theta, data.len(), c).ln())
}

fn check_temperature(t: f64) -> Result<()> {
    if t >= 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(Error::arg(format!("temperature {t} must be non-negative")))
    }
}

/// Smooth loss on a low-dimensional weight space.
pub trait ScalarLoss: Sync {
    fn dim(&self) -> usize;
    fn value(&self, w: &[f64]) -> f64;
    fn grad(&self, w: &[f64], g: &mut [f64]);
}

/// `height * (w^2 - 1)^2`: minima at `+-1`, barrier `height` at 0. The
/// default 0.25 gives `(w^2 - 1)^2 / 4`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DoubleWell {
    pub height: f64,
}

impl Default for DoubleWell {
    fn default() -> Self {
        DoubleWell { height: 0.25 }
    }
}

impl ScalarLoss for DoubleWell {
    fn dim(&self) -> usize {
        1
    }

    fn value(&self, w: &[f64]) -> f64 {
        self.height * (w[0] * w[0] - 1.0).powi(2)
    }

    fn grad(&self, w: &[f64], g: &mut [f64]) {
        g[0] = 4.0 * self.height * w[0] * (w[0] * w[0] - 1.0);
    }
}

/// Double well in `x` plus a harmonic valley `stiffness * y^2 / 2` bent along
/// `y = bend * (1 - x^2)`, so the minimum energy path is curved.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BentDoubleWell {
    pub height: f64,
    pub stiffness: f64,
    pub bend: f64,
}

impl ScalarLoss for BentDoubleWell {
    fn dim(&self) -> usize {
        2
    }

    fn value(&self, w: &[f64]) -> f64 {
        let (x, y) = (w[0], w[1]);
        let r = y - self.bend * (1.0 - x * x);
        self.height * (x * x - 1.0).powi(2) + 0.5 * self.stiffness * r * r
    }

    fn grad(&self, w: &[f64], g: &mut [f64]) {
        let (x, y) = (w[0], w[1]);
        let r = y - self.bend * (1.0 - x * x);
        g[0] = 4.0 * self.height * x * (x * x - 1.0) + self.stiffness * r * 2.0 * self.bend * x;
        g[1] = self.stiffness * r;
    }
}

/// Periodic loss `-(depth / 2) cos(2 pi w)`: minima at integers, saddles at
/// half-integers, barrier `depth`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Washboard {
    pub depth: f64,
}

impl ScalarLoss for Washboard {
    fn dim(&self) -> usize {
        1
    }

    fn value(&self, w: &[f64]) -> f64 {
        -0.5 * self.depth * (2.0 * PI * w[0]).cos()
    }

    fn grad(&self, w: &[f64], g: &mut [f64]) {
        g[0] = PI * self.depth * (2.0 * PI * w[0]).sin();
    }
}

/// Basin of attraction used as the escape criterion.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Region {
    /// `lo < w[0] < hi`; bounds may be infinite.
    Interval { lo: f64, hi: f64 },
    /// `normal . w < offset`.
    HalfSpace { normal: Vec<f64>, offset: f64 },
    /// `|w - center| < radius`.
    Ball { center: Vec<f64>, radius: f64 },
}

impl Region {
    pub fn contains(&self, w: &[f64]) -> bool {
        match self {
            Region::Interval { lo, hi } => *lo < w[0] && w[0] < *hi,
            Region::HalfSpace { normal, offset } => normal.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() < *offset,
            Region::Ball { center, radius } => {
                center.iter().zip(w).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() < radius * radius
            }
        }
    }
}

/// Index-1 saddle of a landscape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Saddle {
    pub point: Vec<f64>,
    pub value: f64,
    /// The single negative Hessian eigenvalue.
    pub neg_eigenvalue: f64,
    /// `log |det H|` at the saddle.
    pub log_abs_det: f64,
}

fn hessian_of(l: &dyn ScalarLoss, w: &[f64]) -> Result<Matrix> {
    hessian_fd_with(w, |x, g| {
        l.grad(x, g);
        Ok(())
    })
}

fn saddle_at(l: &dyn ScalarLoss, w: Vec<f64>) -> Result<Saddle> {
    let h = hessian_of(l, &w)?;
    let eig = h.symmetric_eigen().eigenvalues;
    let neg = eig.iter().copied().fold(f64::INFINITY, f64::min);
    if neg >= 0.0 || eig.iter().filter(|&&e| e < 0.0).count() != 1 {
        return Err(Error::arg("stationary point found is not an index-1 saddle"));
    }
    let log_abs_det = eig.iter().map(|e| e.abs().ln()).sum();
    Ok(Saddle { value: l.value(&w), point: w, neg_eigenvalue: neg, log_abs_det })
}

const SCAN_SPAN: f64 = 10.0;
const SCAN_POINTS: usize = 20_000;

/// Lowest saddle on either side of the 1-D minimizer `w_star`: scans the
/// gradient on a grid out to the basin edge (or 10 units) for the first
/// + to - sign change, then bisects.
pub fn find_saddle_1d(l: &dyn ScalarLoss, w_star: f64, basin: &Region) -> Result<Saddle> {
    if l.dim() != 1 {
        return Err(Error::arg("1-D saddle search needs a scalar landscape"));
    }
    let (lo, hi) = match basin {
        Region::Interval { lo, hi } => (*lo, *hi),
        _ => (f64::NEG_INFINITY, f64::INFINITY),
    };
    let grad = |x: f64| {
        let mut g = [0.0];
        l.grad(&[x], &mut g);
        g[0]
    };
    let mut best: Option<f64> = None;
    for (dir, edge) in [(1.0, hi), (-1.0, lo)] {
        let span = if edge.is_finite() { (edge - w_star).abs() * 1.5 } else { SCAN_SPAN };
        let h = span / SCAN_POINTS as f64;
        // Slope along the scan direction: positive climbing out of the well.
        let climb = |s: f64| dir * grad(w_star + dir * s);
        let mut prev = h;
        for i in 2..=SCAN_POINTS {
            let s = i as f64 * h;
            if climb(prev) > 0.0 && climb(s) <= 0.0 {
                let (mut a, mut b) = (prev, s);
                for _ in 0..200 {
                    let m = 0.5 * (a + b);
                    if climb(m) > 0.0 {
                        a = m;
                    } else {
                        b = m;
                    }
                }
                let x = w_star + dir * 0.5 * (a + b);
                if best.is_none_or(|bx| l.value(&[x]) < l.value(&[bx])) {
                    best = Some(x);
                }
                break;
            }
            prev = s;
        }
    }
    let x = best.ok_or_else(|| Error::arg("no barrier found around the minimizer"))?;
    saddle_at(l, vec![x])
}

/// Local minimum by backtracking gradient descent.
pub fn descend(l: &dyn ScalarLoss, start: &[f64], tol: f64, max_iter: usize) -> Vec<f64> {
    let d = start.len();
    let mut w = start.to_vec();
    let mut g = vec![0.0; d];
    let mut step = 0.1;
    for _ in 0..max_iter {
        l.grad(&w, &mut g);
        let gn: f64 = g.iter().map(|v| v * v).sum::<f64>();
        if gn.sqrt() < tol {
            break;
        }
        let f0 = l.value(&w);
        loop {
            let trial: Vec<f64> = w.iter().zip(&g).map(|(a, b)| a - step * b).collect();
            if l.value(&trial) <= f0 - 0.5 * step * gn || step < 1e-14 {
                w = trial;
                step *= 2.0;
                break;
            }
            step *= 0.5;
        }
    }
    w
}

/// Minimum energy path between two minima by the string method: nodes descend
/// the gradient and are redistributed at equal arc length after every step.
/// The highest node is then refined to the saddle by Newton on the gradient.
pub fn find_saddle_string(l: &dyn ScalarLoss, a: &[f64], b: &[f64], nodes: usize) -> Result<Saddle> {
    let d = l.dim();
    if a.len() != d || b.len() != d || nodes < 3 {
        return Err(Error::arg("string endpoints must match the landscape and nodes >= 3"));
    }
    let mut path: Vec<Vec<f64>> = (0..nodes)
        .map(|i| {
            let t = i as f64 / (nodes - 1) as f64;
            a.iter().zip(b).map(|(x, y)| x + t * (y - x)).collect()
        })
        .collect();
    let mut g = vec![0.0; d];
    let dt = 1e-2;
    for _ in 0..20_000 {
        let mut moved = 0.0f64;
        for node in path.iter_mut().take(nodes - 1).skip(1) {
            l.grad(node, &mut g);
            for (x, gi) in node.iter_mut().zip(&g) {
                *x -= dt * gi;
                moved = moved.max((dt * gi).abs());
            }
        }
        path = reparametrize(&path);
        if moved < 1e-10 {
            break;
        }
    }
    let top = (1..nodes - 1)
        .max_by(|&i, &j| l.value(&path[i]).total_cmp(&l.value(&path[j])))
        .expect("interior nodes");
    let mut w = path[top].clone();
    for _ in 0..100 {
        l.grad(&w, &mut g);
        if g.iter().map(|v| v * v).sum::<f64>().sqrt() < 1e-12 {
            break;
        }
        let h = hessian_of(l, &w)?;
        let Some(step) = h.lu().solve(&nalgebra::DVector::from_column_slice(&g)) else {
            break;
        };
        let norm = step.norm();
        let cap = 0.1 / norm.max(0.1);
        for (x, s) in w.iter_mut().zip(step.iter()) {
            *x -= s * cap.min(1.0);
        }
    }
    saddle_at(l, w)
}

fn reparametrize(path: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = path.len();
    let mut arc = vec![0.0; n];
    for i in 1..n {
        let seg: f64 = path[i].iter().zip(&path[i - 1]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        arc[i] = arc[i - 1] + seg;
    }
    let total = arc[n - 1];
    let mut out = Vec::with_capacity(n);
    let mut j = 0;
    for i in 0..n {
        let s = total * i as f64 / (n - 1) as f64;
        while j + 2 < n && arc[j + 1] < s {
            j += 1;
        }
        let span = arc[j + 1] - arc[j];
        let t = if span > 0.0 { ((s - arc[j]) / span).clamp(0.0, 1.0) } else { 0.0 };
        out.push(path[j].iter().zip(&path[j + 1]).map(|(a, b)| a + t * (b - a)).collect());
    }
    out[0] = path[0].clone();
    out[n - 1] = path[n - 1].clone();
    out
}

/// String-method nodes used for landscapes of dimension >= 2.
pub const STRING_NODES: usize = 64;

/// Relevant saddle for escaping `basin` from `w_star`: grid search in 1-D,
/// otherwise the string method toward the minimum found by descending from
/// the mirror image of `w_star` across the nearest basin boundary.
pub fn find_saddle(l: &dyn ScalarLoss, w_star: &[f64], basin: &Region) -> Result<Saddle> {
    if l.dim() == 1 {
        return find_saddle_1d(l, w_star[0], basin);
    }
    let mirror: Vec<f64> = match basin {
        Region::HalfSpace { normal, offset } => {
            let nn: f64 = normal.iter().map(|v| v * v).sum();
            let s = (normal.iter().zip(w_star).map(|(a, b)| a * b).sum::<f64>() - offset) / nn;
            w_star.iter().zip(normal).map(|(w, n)| w - 2.0 * s * n).collect()
        }
        Region::Ball { center, radius } => {
            let h = hessian_of(l, w_star)?;
            let eig = h.symmetric_eigen();
            let i = eig.eigenvalues.imin();
            center.iter().zip(eig.eigenvectors.column(i).iter()).map(|(c, v)| c + 2.0 * radius * v).collect()
        }
        Region::Interval { lo, hi } => {
            let edge = if (w_star[0] - lo).abs() < (hi - w_star[0]).abs() { *lo } else { *hi };
            let mut m = w_star.to_vec();
            m[0] = 2.0 * edge - w_star[0];
            m
        }
    };
    let other = descend(l, &mirror, 1e-10, 100_000);
    if basin.contains(&other) {
        return Err(Error::arg("no neighbouring minimum outside the basin"));
    }
    find_saddle_string(l, w_star, &other, STRING_NODES)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EscapeTimeStats {
    /// Steps until first exit for every run that left the basin.
    pub first_exit_steps: Vec<usize>,
    /// Where each uncensored run was when it first left the basin.
    pub exit_points: Vec<Vec<f64>>,
    pub mean_steps: f64,
    /// Mean exit time in continuous time, `steps * eta`.
    pub mean_time: f64,
    /// `(2 pi / |lambda_1|) exp((F(w_s) - F(w*)) / T)` with
    /// `F = L + (T/2) log|det H|`.
    pub predicted_kramers: f64,
    pub temperature: f64,
    /// `L(w_s) - L(w*)`.
    pub barrier: f64,
    pub neg_eigenvalue: f64,
    /// Runs that hit the step cap; their partial times are excluded.
    pub censored: usize,
}

/// Langevin first-exit times from `basin` starting at `w_star`:
/// `w <- w - eta grad L + sqrt(2 eta T) xi` until `w` leaves the basin or
/// `max_steps` is reached. Runs use streams `seed.derive(run)`.
#[allow(clippy::too_many_arguments)]
pub fn escape_time_mc(
    l: &dyn ScalarLoss,
    w_star: &[f64],
    basin: &Region,
    t: f64,
    eta: f64,
    runs: usize,
    max_steps: usize,
    seed: Seed,
) -> Result<EscapeTimeStats> {
    if !(t > 0.0 && t.is_finite()) || !(eta > 0.0 && eta.is_finite()) {
        return Err(Error::arg("temperature and step size must be positive"));
    }
    if runs == 0 || w_star.len() != l.dim() {
        return Err(Error::arg("need at least one run and a minimizer of the landscape's dimension"));
    }
    if !basin.contains(w_star) {
        return Err(Error::arg("the minimizer must lie inside the basin"));
    }
    let saddle = find_saddle(l, w_star, basin)?;
    let hmin = hessian_of(l, w_star)?;
    let eig = hmin.symmetric_eigen().eigenvalues;
    if eig.iter().any(|&e| e <= 0.0) {
        return Err(Error::arg("w_star is not a strict local minimizer"));
    }
    let logdet_min: f64 = eig.iter().map(|e| e.ln()).sum();
    let barrier = saddle.value - l.value(w_star);
    let df = barrier + 0.5 * t * (saddle.log_abs_det - logdet_min);
    let predicted = 2.0 * PI / saddle.neg_eigenvalue.abs() * (df / t).exp();

    let noise = (2.0 * eta * t).sqrt();
    let d = l.dim();
    let outcomes: Vec<Option<(usize, Vec<f64>)>> = (0..runs)
        .into_par_iter()
        .map(|r| {
            let mut rng = seed.derive(r as u64).rng();
            let mut w = w_star.to_vec();
            let mut g = vec![0.0; d];
            for step in 1..=max_steps {
                l.grad(&w, &mut g);
                for (wi, gi) in w.iter_mut().zip(&g) {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    *wi += -eta * gi + noise * z;
                }
                if !basin.contains(&w) {
                    return Some((step, w));
                }
            }
            None
        })
        .collect();
    let censored = outcomes.iter().filter(|o| o.is_none()).count();
    let (first_exit_steps, exit_points): (Vec<usize>, Vec<Vec<f64>>) = outcomes.into_iter().flatten().unzip();
    let mean_steps = if first_exit_steps.is_empty() {
        f64::NAN
    } else {
        first_exit_steps.iter().sum::<usize>() as f64 / first_exit_steps.len() as f64
    };
    Ok(EscapeTimeStats {
        first_exit_steps,
        exit_points,
        mean_steps,
        mean_time: mean_steps * eta,
        predicted_kramers: predicted,
        temperature: t,
        barrier,
        neg_eigenvalue: saddle.neg_eigenvalue,
        censored,
    })
}

/// Least-squares slope and intercept of `y` on `x`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}
