use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::toy::finish;
use super::train::{sgd_train, TrainConfig, TrainTrace};
use crate::error::{Error, Result};
use crate::models::LabeledDataset;
use crate::ndcore::{norm, Matrix, Objective, WeightVector};

/// Gradient norm below which a training run counts as converged.
pub const CONVERGENCE_TOL: f64 = 1e-6;

/// How the training set is varied when differentiating the end point.
#[derive(Clone, Debug, PartialEq)]
pub enum PerturbationScheme {
    /// For each `(target, source)`, replace sample `target` by sample `source`
    /// of `pool`; the column is the raw difference of end points.
    SampleSwap { pool: LabeledDataset, swaps: Vec<(usize, usize)> },
    /// Central differences in input coordinate `coord` of each listed sample.
    InputPerturb { samples: Vec<usize>, coord: usize, delta: f64 },
    /// Central differences in a common shift of coordinate `coord` of every
    /// sample.
    Shift { coord: usize, delta: f64 },
}

/// End point of training on `data` and its full-data gradient norm.
pub type Trainer<'a> = dyn Fn(&LabeledDataset) -> Result<(Vec<f64>, f64)> + Sync + 'a;

/// Finite-difference Jacobian of the trained weights with respect to the
/// dataset, one column per perturbation. Every run reuses `cfg.seed`, so
/// only the data differ between runs.
pub fn dataset_jacobian<O: Objective + ?Sized>(
    obj: &O,
    data: &LabeledDataset,
    cfg: &TrainConfig,
    w0: &WeightVector,
    scheme: &PerturbationScheme,
) -> Result<Matrix> {
    let trainer = |d: &LabeledDataset| -> Result<(Vec<f64>, f64)> {
        let trace = sgd_train(obj, d, cfg, w0)?;
        let w = trace.final_weights().into_values();
        let mut g = vec![0.0; w.len()];
        obj.loss_grad(&w, d, None, &mut g)?;
        Ok((w, norm(&g)))
    };
    dataset_jacobian_with(data, scheme, CONVERGENCE_TOL, &trainer)
}

/// [`dataset_jacobian`] with an arbitrary training procedure and tolerance.
pub fn dataset_jacobian_with(
    data: &LabeledDataset,
    scheme: &PerturbationScheme,
    tol: f64,
    train: &Trainer<'_>,
) -> Result<Matrix> {
    let run = |d: &LabeledDataset| -> Result<Vec<f64>> {
        let (w, gn) = train(d)?;
        if !(gn <= tol) {
            return Err(Error::StabilityUndefined { grad_norm: gn, tol });
        }
        Ok(w)
    };
    let columns: Vec<Vec<f64>> = match scheme {
        PerturbationScheme::SampleSwap { pool, swaps } => {
            if swaps.is_empty() {
                return Err(Error::arg("no swaps requested"));
            }
            let base = run(data)?;
            swaps
                .par_iter()
                .map(|&(t, s)| {
                    let w = run(&data.swap_in(t, pool, s)?)?;
                    Ok(w.iter().zip(&base).map(|(a, b)| a - b).collect())
                })
                .collect::<Result<_>>()?
        }
        PerturbationScheme::InputPerturb { samples, coord, delta } => {
            check_delta(*delta)?;
            if samples.is_empty() {
                return Err(Error::arg("no samples to perturb"));
            }
            samples
                .par_iter()
                .map(|&i| central(&run, data, Some(i), *coord, *delta))
                .collect::<Result<_>>()?
        }
        PerturbationScheme::Shift { coord, delta } => {
            check_delta(*delta)?;
            vec![central(&run, data, None, *coord, *delta)?]
        }
    };
    let k = columns[0].len();
    Ok(Matrix::from_fn(k, columns.len(), |r, c| columns[c][r]))
}

fn check_delta(delta: f64) -> Result<()> {
    if delta > 0.0 && delta.is_finite() {
        Ok(())
    } else {
        Err(Error::arg(format!("perturbation size {delta} must be positive")))
    }
}

fn central<F>(run: &F, data: &LabeledDataset, sample: Option<usize>, coord: usize, delta: f64) -> Result<Vec<f64>>
where
    F: Fn(&LabeledDataset) -> Result<Vec<f64>>,
{
    let up = run(&data.perturb_input(sample, coord, delta)?)?;
    let down = run(&data.perturb_input(sample, coord, -delta)?)?;
    Ok(up.iter().zip(&down).map(|(a, b)| (a - b) / (2.0 * delta)).collect())
}

/// Semi-axis of the ellipse `x^T F x = 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EllipseAxis {
    pub length: f64,
    pub direction: [f64; 2],
}

/// Two training paths seen in the plane through the shared start and both
/// end points.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlaneReport {
    pub basis: [Vec<f64>; 2],
    pub path_a: Vec<(usize, [f64; 2])>,
    pub path_b: Vec<(usize, [f64; 2])>,
    /// `B^T diag(F) B` for the orthonormal basis `B`.
    pub fisher: [[f64; 2]; 2],
    pub ellipse_axes: [EllipseAxis; 2],
    pub endpoint_distance: f64,
    /// The second basis vector was completed from a coordinate axis because
    /// both end points coincide.
    pub completed_basis: bool,
}

impl PlaneReport {
    /// Columns `run,step,x,y`.
    pub fn paths_csv(&self) -> Result<String> {
        let mut wtr = csv::Writer::from_writer(Vec::new());
        wtr.write_record(["run", "step", "x", "y"])?;
        for (name, path) in [("a", &self.path_a), ("b", &self.path_b)] {
            for (step, [x, y]) in path {
                wtr.write_record([name.to_string(), step.to_string(), x.to_string(), y.to_string()])?;
            }
        }
        finish(wtr)
    }
}

/// Smallest angle between spanning vectors accepted as a plane.
pub const MIN_PLANE_ANGLE: f64 = 1e-6;

/// Projects both traces onto the Gram-Schmidt basis of
/// `{final_a - w0, final_b - w0}`. Identical end points span only a line; the
/// basis is then completed with the coordinate axis least aligned with it.
pub fn plane_projection(w0: &WeightVector, a: &TrainTrace, b: &TrainTrace, f_diag: &[f64]) -> Result<PlaneReport> {
    let k = w0.dim();
    let fa = a.final_weights().into_values();
    let fb = b.final_weights().into_values();
    if fa.len() != k || fb.len() != k || f_diag.len() != k {
        return Err(Error::Shape { expected: format!("{k} weights"), got: "mismatched traces or Fisher".into() });
    }
    if k < 2 {
        return Err(Error::DegeneratePlane("a plane needs at least two weights".into()));
    }
    let sub = |x: &[f64]| -> Vec<f64> { x.iter().zip(w0.values()).map(|(p, q)| p - q).collect() };
    let (da, db) = (sub(&fa), sub(&fb));
    let identical = fa == fb;
    let (na, nb) = (norm(&da), norm(&db));
    let unit = |v: &[f64], n: f64| -> Vec<f64> { v.iter().map(|x| x / n).collect() };
    let (u1, u2, completed) = if na > 0.0 {
        let u1 = unit(&da, na);
        let p: f64 = u1.iter().zip(&db).map(|(x, y)| x * y).sum();
        let r: Vec<f64> = db.iter().zip(&u1).map(|(y, x)| y - p * x).collect();
        let nr = norm(&r);
        if !identical && nr > MIN_PLANE_ANGLE.sin() * nb {
            (u1.clone(), unit(&r, nr), false)
        } else if identical {
            let u2 = complete(&u1);
            (u1, u2, true)
        } else {
            return Err(Error::DegeneratePlane(format!(
                "end-point directions are collinear (angle {:.3e} rad)",
                (nr / nb).asin()
            )));
        }
    } else if identical {
        let mut u1 = vec![0.0; k];
        u1[0] = 1.0;
        let u2 = complete(&u1);
        (u1, u2, true)
    } else {
        return Err(Error::DegeneratePlane("run A ended at the starting point".into()));
    };
    let project = |w: &[f64]| -> [f64; 2] {
        let d = sub(w);
        [u1.iter().zip(&d).map(|(x, y)| x * y).sum(), u2.iter().zip(&d).map(|(x, y)| x * y).sum()]
    };
    let path = |t: &TrainTrace| t.snapshots.iter().map(|s| (s.step, project(&s.weights))).collect::<Vec<_>>();
    let quad = |p: &[f64], q: &[f64]| -> f64 { p.iter().zip(q).zip(f_diag).map(|((x, y), f)| x * f * y).sum() };
    let f = Matrix::from_row_slice(2, 2, &[quad(&u1, &u1), quad(&u1, &u2), quad(&u2, &u1), quad(&u2, &u2)]);
    let eig = f.clone().symmetric_eigen();
    let axis = |i: usize| EllipseAxis {
        length: 1.0 / eig.eigenvalues[i].max(0.0).sqrt(),
        direction: [eig.eigenvectors[(0, i)], eig.eigenvectors[(1, i)]],
    };
    let endpoint_distance = norm(&fa.iter().zip(&fb).map(|(x, y)| x - y).collect::<Vec<_>>());
    Ok(PlaneReport {
        path_a: path(a),
        path_b: path(b),
        fisher: [[f[(0, 0)], f[(0, 1)]], [f[(1, 0)], f[(1, 1)]]],
        ellipse_axes: [axis(0), axis(1)],
        endpoint_distance,
        completed_basis: completed,
        basis: [u1, u2],
    })
}

/// Unit vector orthogonal to `u1`, from the coordinate axis least aligned
/// with it (lowest index on ties).
fn complete(u1: &[f64]) -> Vec<f64> {
    let j = (0..u1.len()).fold(0, |best, i| if u1[i].abs() < u1[best].abs() { i } else { best });
    let mut e: Vec<f64> = u1.iter().map(|x| -u1[j] * x).collect();
    e[j] += 1.0;
    let n = norm(&e);
    e.iter().map(|x| x / n).collect()
}
