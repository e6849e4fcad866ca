//! Central finite-difference Hessians.

use crate::error::{Error, Result};
use crate::models::{LabeledDataset, ModelSpec};
use crate::ndcore::{Matrix, Objective, WeightVector};

/// Largest parameter count for which dense k×k matrices are built.
pub const DENSE_CAP: usize = 2000;

pub(crate) fn check_cap(k: usize) -> Result<()> {
    if k > DENSE_CAP {
        return Err(Error::Capacity { k, cap: DENSE_CAP });
    }
    Ok(())
}

/// Per-coordinate step `1e-5 * max(1, |w_i|)`.
pub fn fd_step(wi: f64) -> f64 {
    1e-5 * wi.abs().max(1.0)
}

/// Column `i` is the central difference of `grad` along `e_i`. Not symmetrized.
pub fn hessian_fd_raw<G>(w: &[f64], mut grad: G) -> Result<Matrix>
where
    G: FnMut(&[f64], &mut [f64]) -> Result<()>,
{
    let k = w.len();
    check_cap(k)?;
    let mut h = Matrix::zeros(k, k);
    let mut wp = w.to_vec();
    let (mut gp, mut gm) = (vec![0.0; k], vec![0.0; k]);
    for i in 0..k {
        let step = fd_step(w[i]);
        wp[i] = w[i] + step;
        grad(&wp, &mut gp)?;
        wp[i] = w[i] - step;
        grad(&wp, &mut gm)?;
        wp[i] = w[i];
        let inv = 1.0 / (2.0 * step);
        for j in 0..k {
            h[(j, i)] = (gp[j] - gm[j]) * inv;
        }
    }
    Ok(h)
}

/// Symmetrized finite-difference Hessian of an arbitrary gradient oracle.
pub fn hessian_fd_with<G>(w: &[f64], grad: G) -> Result<Matrix>
where
    G: FnMut(&[f64], &mut [f64]) -> Result<()>,
{
    let h = hessian_fd_raw(w, grad)?;
    Ok((&h + h.transpose()) * 0.5)
}

/// Hessian of the mean training loss, `(H + H^T) / 2`.
pub fn hessian_fd(spec: &ModelSpec, w: &WeightVector, data: &LabeledDataset) -> Result<Matrix> {
    spec.check_weights(w)?;
    spec.check(data)?;
    objective_hessian(spec, w.values(), data)
}

pub fn objective_hessian<O: Objective + ?Sized>(obj: &O, w: &[f64], data: &LabeledDataset) -> Result<Matrix> {
    hessian_fd_with(w, |v, g| obj.loss_grad(v, data, None, g).map(|_| ()))
}
