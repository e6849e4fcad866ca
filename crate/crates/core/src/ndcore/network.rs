//! Forward and reverse passes for the supported fully connected family.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{Head, Label, LabeledDataset, ModelSpec, Targets, ToyModel, toy_phi};
use crate::ndcore::{Tensor, WeightVector};

/// Which representation a Jacobian is taken of.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayerId {
    /// Post-activation output of hidden layer `i` (0-based).
    Hidden(usize),
    /// Final affine output: logits for classifiers, predictions for regressors.
    Output,
}

impl LayerId {
    /// Index of the affine layer producing this representation.
    pub(crate) fn resolve(self, spec: &ModelSpec) -> Result<usize> {
        match self {
            LayerId::Output => Ok(spec.depth() - 1),
            LayerId::Hidden(i) if i + 1 < spec.depth() => Ok(i),
            LayerId::Hidden(i) => Err(Error::arg(format!(
                "hidden layer {i} does not exist; the model has {} hidden layers",
                spec.depth() - 1
            ))),
        }
    }
}

/// Cached activations of one forward pass. `acts[0]` is the input and
/// `acts[l + 1]` the output of affine layer `l` after its nonlinearity (the
/// last layer has none).
pub(crate) struct Pass {
    pub pre: Vec<Vec<f64>>,
    pub acts: Vec<Vec<f64>>,
}

impl Pass {
    pub fn output(&self) -> &[f64] {
        self.acts.last().unwrap()
    }
}

fn layer_offsets(spec: &ModelSpec) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
    let mut off = 0;
    spec.sizes().windows(2).map(move |p| {
        let start = off;
        off += p[0] * p[1] + p[1];
        (start, p[0], p[1])
    })
}

pub(crate) fn forward_pass(spec: &ModelSpec, w: &[f64], x: &[f64]) -> Pass {
    let depth = spec.depth();
    let mut pre = Vec::with_capacity(depth);
    let mut acts = Vec::with_capacity(depth + 1);
    acts.push(x.to_vec());
    for (l, (off, n_in, n_out)) in layer_offsets(spec).enumerate() {
        let input = &acts[l];
        let (wm, b) = w[off..off + n_in * n_out + n_out].split_at(n_in * n_out);
        let a: Vec<f64> = (0..n_out)
            .map(|o| b[o] + wm[o * n_in..(o + 1) * n_in].iter().zip(input).map(|(p, q)| p * q).sum::<f64>())
            .collect();
        let h = if l + 1 < depth { a.iter().map(|&v| spec.activation().apply(v)).collect() } else { a.clone() };
        pre.push(a);
        acts.push(h);
    }
    Pass { pre, acts }
}

/// Reverse pass starting from the output of layer `from`, with `upstream` the
/// gradient with respect to that output. Accumulates `scale * dz/dw` into
/// `grad_w` and returns the gradient with respect to the input if requested.
pub(crate) fn backward(
    spec: &ModelSpec,
    w: &[f64],
    pass: &Pass,
    from: usize,
    upstream: &[f64],
    mut grad_w: Option<(&mut [f64], f64)>,
    want_input: bool,
) -> Option<Vec<f64>> {
    let offsets: Vec<_> = layer_offsets(spec).collect();
    let depth = spec.depth();
    let mut delta: Vec<f64> = if from + 1 < depth {
        upstream
            .iter()
            .zip(&pass.pre[from])
            .zip(&pass.acts[from + 1])
            .map(|((g, &a), &h)| g * spec.activation().derivative(a, h))
            .collect()
    } else {
        upstream.to_vec()
    };
    for l in (0..=from).rev() {
        let (off, n_in, n_out) = offsets[l];
        let input = &pass.acts[l];
        if let Some((g, scale)) = grad_w.as_mut() {
            let (gw, gb) = g[off..off + n_in * n_out + n_out].split_at_mut(n_in * n_out);
            for o in 0..n_out {
                let d = *scale * delta[o];
                if d == 0.0 {
                    continue;
                }
                for (gi, xi) in gw[o * n_in..(o + 1) * n_in].iter_mut().zip(input) {
                    *gi += d * xi;
                }
                gb[o] += d;
            }
        }
        if l == 0 && !want_input {
            return None;
        }
        let wm = &w[off..off + n_in * n_out];
        let mut back = vec![0.0; n_in];
        for o in 0..n_out {
            let d = delta[o];
            if d == 0.0 {
                continue;
            }
            for (bi, wi) in back.iter_mut().zip(&wm[o * n_in..(o + 1) * n_in]) {
                *bi += d * wi;
            }
        }
        if l == 0 {
            return Some(back);
        }
        delta = back
            .iter()
            .zip(&pass.pre[l - 1])
            .zip(&pass.acts[l])
            .map(|((g, &a), &h)| g * spec.activation().derivative(a, h))
            .collect();
    }
    None
}

pub(crate) fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Per-sample loss and its gradient with respect to the network output.
fn sample_loss(spec: &ModelSpec, z: &[f64], y: Label) -> Result<(f64, Vec<f64>)> {
    match (spec.head(), y) {
        (Head::SoftmaxXent, Label::Class(c)) if c < z.len() => {
            let mut g = softmax(z);
            g[c] -= 1.0;
            Ok((log_sum_exp(z) - z[c], g))
        }
        (Head::SoftmaxXent, Label::Class(c)) => {
            Err(Error::arg(format!("label {c} outside [0, {})", z.len())))
        }
        (Head::SquaredError, Label::Real(t)) if z.len() == 1 => {
            let r = z[0] - t;
            Ok((r * r, vec![2.0 * r]))
        }
        _ => Err(Error::arg("label kind does not match the model head")),
    }
}

fn check_input(spec: &ModelSpec, x: &Tensor) -> Result<()> {
    if x.cols() != spec.input_dim() || x.shape().len() > 2 {
        return Err(Error::Shape {
            expected: format!("rows of width {}", spec.input_dim()),
            got: format!("{:?}", x.shape()),
        });
    }
    Ok(())
}

fn check_data(spec: &ModelSpec, data: &LabeledDataset) -> Result<()> {
    if data.input_dim() != spec.input_dim() {
        return Err(Error::Shape {
            expected: format!("{} input features", spec.input_dim()),
            got: format!("{}", data.input_dim()),
        });
    }
    match (spec.head(), data.targets()) {
        (Head::SoftmaxXent, Targets::Classes { num_classes, .. }) if *num_classes <= spec.output_dim() => Ok(()),
        (Head::SquaredError, Targets::Reals(_)) if spec.output_dim() == 1 => Ok(()),
        _ => Err(Error::arg("dataset targets do not match the model head")),
    }
}

/// Class probabilities (classifiers) or predictions (regressors), one row per
/// input row.
pub fn forward(spec: &ModelSpec, w: &WeightVector, x: &Tensor) -> Result<Tensor> {
    spec.check_weights(w)?;
    check_input(spec, x)?;
    let out = spec.output_dim();
    let mut data = Vec::with_capacity(x.rows() * out);
    for row in x.iter_rows() {
        let pass = forward_pass(spec, w.values(), row);
        match spec.head() {
            Head::SoftmaxXent => data.extend(softmax(pass.output())),
            Head::SquaredError => data.extend_from_slice(pass.output()),
        }
    }
    let shape = if x.shape().len() == 1 { vec![out] } else { vec![x.rows(), out] };
    Tensor::new(data, shape)
}

/// Samples per reduction chunk. Chunk boundaries depend only on the sample
/// count, so sums are bitwise independent of the thread count.
pub(crate) const CHUNK: usize = 64;
const PAR_THRESHOLD: usize = 4 * CHUNK;

/// Sum of per-chunk vectors of length `k`, reduced in chunk order.
pub(crate) fn chunked_sum<F>(n: usize, k: usize, f: F) -> Vec<f64>
where
    F: Fn(std::ops::Range<usize>, &mut [f64]) + Sync,
{
    let chunks = n.div_ceil(CHUNK);
    let run = |c: usize| {
        let mut acc = vec![0.0; k];
        f(c * CHUNK..((c + 1) * CHUNK).min(n), &mut acc);
        acc
    };
    let parts: Vec<Vec<f64>> =
        if n >= PAR_THRESHOLD { (0..chunks).into_par_iter().map(run).collect() } else { (0..chunks).map(run).collect() };
    let mut total = vec![0.0; k];
    for p in parts {
        for (t, v) in total.iter_mut().zip(p) {
            *t += v;
        }
    }
    total
}

/// Objective evaluated on a dataset or a minibatch of it.
pub trait Objective: Sync {
    fn dim(&self) -> usize;

    /// Mean loss over `batch` (every sample when `None`); writes the gradient
    /// of that mean into `grad`.
    fn loss_grad(&self, w: &[f64], data: &LabeledDataset, batch: Option<&[usize]>, grad: &mut [f64]) -> Result<f64>;

    fn loss(&self, w: &[f64], data: &LabeledDataset, batch: Option<&[usize]>) -> Result<f64> {
        let mut g = vec![0.0; self.dim()];
        self.loss_grad(w, data, batch, &mut g)
    }

    fn check(&self, data: &LabeledDataset) -> Result<()>;
}

impl Objective for ModelSpec {
    fn dim(&self) -> usize {
        self.num_params()
    }

    fn check(&self, data: &LabeledDataset) -> Result<()> {
        check_data(self, data)
    }

    fn loss_grad(&self, w: &[f64], data: &LabeledDataset, batch: Option<&[usize]>, grad: &mut [f64]) -> Result<f64> {
        let n = batch.map_or(data.len(), <[usize]>::len);
        if n == 0 {
            return Err(Error::arg("empty dataset"));
        }
        let k = self.num_params();
        let idx = |j: usize| batch.map_or(j, |b| b[j]);
        let failed = std::sync::atomic::AtomicBool::new(false);
        // Slot k carries the loss so one reduction covers both.
        let total = chunked_sum(n, k + 1, |range, acc| {
            for j in range {
                let i = idx(j);
                let pass = forward_pass(self, w, data.input(i));
                let Ok((l, up)) = sample_loss(self, pass.output(), data.label(i).expect("labelled")) else {
                    failed.store(true, std::sync::atomic::Ordering::Relaxed);
                    return;
                };
                acc[k] += l;
                backward(self, w, &pass, self.depth() - 1, &up, Some((&mut acc[..k], 1.0)), false);
            }
        });
        if failed.into_inner() {
            return Err(Error::arg("dataset targets do not match the model head"));
        }
        let inv = 1.0 / n as f64;
        for (g, t) in grad.iter_mut().zip(&total[..k]) {
            *g = t * inv;
        }
        Ok(total[k] * inv)
    }
}

impl Objective for ToyModel {
    fn dim(&self) -> usize {
        1
    }

    fn check(&self, data: &LabeledDataset) -> Result<()> {
        if data.input_dim() != 1 {
            return Err(Error::arg("toy model needs scalar observations"));
        }
        Ok(())
    }

    fn loss_grad(&self, w: &[f64], data: &LabeledDataset, batch: Option<&[usize]>, grad: &mut [f64]) -> Result<f64> {
        let xs = data.scalars();
        let (phi, dphi) = toy_phi(w[0], self.c);
        let (mut l, mut r) = (0.0, 0.0);
        let n = match batch {
            Some(b) => {
                for &i in b {
                    let d = xs[i] - phi;
                    l += d * d;
                    r += d;
                }
                b.len()
            }
            None => {
                for &x in xs {
                    let d = x - phi;
                    l += d * d;
                    r += d;
                }
                xs.len()
            }
        };
        if n == 0 {
            return Err(Error::arg("empty dataset"));
        }
        grad[0] = -2.0 * r * dphi / n as f64;
        Ok(l / n as f64)
    }
}

/// Gradient of the mean training loss (cross-entropy or squared error).
pub fn grad_loss(spec: &ModelSpec, w: &WeightVector, data: &LabeledDataset) -> Result<WeightVector> {
    spec.check_weights(w)?;
    check_data(spec, data)?;
    let mut g = vec![0.0; w.dim()];
    spec.loss_grad(w.values(), data, None, &mut g)?;
    w.with_values(g)
}

/// Mean training loss.
pub fn loss(spec: &ModelSpec, w: &WeightVector, data: &LabeledDataset) -> Result<f64> {
    spec.check_weights(w)?;
    check_data(spec, data)?;
    spec.loss(w.values(), data, None)
}

/// Fraction of samples whose arg-max class matches the label.
pub fn accuracy(spec: &ModelSpec, w: &WeightVector, data: &LabeledDataset) -> Result<f64> {
    spec.check_weights(w)?;
    check_data(spec, data)?;
    let Targets::Classes { labels, .. } = data.targets() else {
        return Err(Error::arg("accuracy needs class labels"));
    };
    let hits = (0..data.len())
        .filter(|&i| {
            let pass = forward_pass(spec, w.values(), data.input(i));
            argmax(pass.output()) == labels[i]
        })
        .count();
    Ok(hits as f64 / data.len() as f64)
}

pub(crate) fn argmax(z: &[f64]) -> usize {
    z.iter().enumerate().fold(0, |best, (i, v)| if *v > z[best] { i } else { best })
}

/// Score vector `d log p_w(y|x) / dw` for one input.
pub fn per_sample_loglik_grad(spec: &ModelSpec, w: &WeightVector, x: &Tensor, y: Label) -> Result<WeightVector> {
    spec.check_weights(w)?;
    check_input(spec, x)?;
    if x.rows() != 1 {
        return Err(Error::Shape { expected: "a single input".into(), got: format!("{:?}", x.shape()) });
    }
    let pass = forward_pass(spec, w.values(), x.row(0));
    let (_, up) = sample_loss(spec, pass.output(), y)?;
    let mut g = vec![0.0; w.dim()];
    // log p = -loss up to constants, hence the sign.
    backward(spec, w.values(), &pass, spec.depth() - 1, &up, Some((&mut g, -1.0)), false);
    w.with_values(g)
}

/// Softmax probabilities and per-class score vectors at one input, written as
/// rows of `scores` (C×k, row-major).
pub(crate) fn class_scores(spec: &ModelSpec, w: &[f64], x: &[f64], scores: &mut [f64]) -> Vec<f64> {
    let k = spec.num_params();
    let pass = forward_pass(spec, w, x);
    let p = softmax(pass.output());
    for (c, row) in scores.chunks_mut(k).enumerate() {
        row.fill(0.0);
        let up: Vec<f64> = p.iter().enumerate().map(|(j, &pj)| if j == c { 1.0 - pj } else { -pj }).collect();
        backward(spec, w, &pass, spec.depth() - 1, &up, Some((row, 1.0)), false);
    }
    p
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::Activation;
    use crate::rng::Seed;

    #[test]
    fn zero_weights_give_uniform_probabilities() {
        let spec = ModelSpec::classifier(vec![3, 4, 2], Activation::Tanh).unwrap();
        let x = Tensor::vector(vec![0.3, -2.0, 5.0]).unwrap();
        let p = forward(&spec, &spec.zero_weights(), &x).unwrap();
        assert_eq!(p.data(), &[0.5, 0.5]);
    }

    #[test]
    fn identity_linear_regressor() {
        let spec = ModelSpec::regressor(vec![1, 1], Activation::Tanh).unwrap();
        let w = WeightVector::new(vec![1.0, 0.0], spec.layout()).unwrap();
        let out = forward(&spec, &w, &Tensor::vector(vec![1.0]).unwrap()).unwrap();
        assert_eq!(out.data(), &[1.0]);
    }

    #[test]
    fn input_shape_is_checked() {
        let spec = ModelSpec::classifier(vec![2, 2], Activation::Relu).unwrap();
        let x = Tensor::vector(vec![1.0, 2.0, 3.0]).unwrap();
        assert!(matches!(forward(&spec, &spec.zero_weights(), &x), Err(Error::Shape { .. })));
    }

    #[test]
    fn chunked_sum_ignores_parallelism() {
        let f = |r: std::ops::Range<usize>, acc: &mut [f64]| {
            for i in r {
                acc[0] += (i as f64).sin() * 1e-3;
            }
        };
        let a = chunked_sum(1000, 1, f);
        let b = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap().install(|| chunked_sum(1000, 1, f));
        assert_eq!(a[0].to_bits(), b[0].to_bits());
    }

    #[test]
    fn labels_must_match_head() {
        let spec = ModelSpec::classifier(vec![1, 2], Activation::Tanh).unwrap();
        let w = spec.init_weights(Seed(0));
        let x = Tensor::vector(vec![1.0]).unwrap();
        assert!(per_sample_loglik_grad(&spec, &w, &x, Label::Class(2)).is_err());
        assert!(per_sample_loglik_grad(&spec, &w, &x, Label::Real(0.0)).is_err());
    }
}
