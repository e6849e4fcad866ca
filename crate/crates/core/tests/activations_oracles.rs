use iw_core::activations::{
    activation_at, effective_mi, fisher_z_given_x, input_jacobian, linearized_covariance, perturbed_activations,
    weight_jacobian, Damping,
};
use iw_core::fisher::{fisher_exact, FisherEstimate};
use iw_core::models::{make_dataset_2d_binary, Activation, ModelSpec};
use iw_core::ndcore::{LayerId, Matrix, Tensor, WeightVector};
use iw_core::{Error, Seed};
use proptest::prelude::*;
use rand_distr::{Distribution, StandardNormal};

fn random_weights(spec: &ModelSpec, seed: u64, scale: f64) -> WeightVector {
    let mut rng = Seed(seed).rng();
    let v = (0..spec.num_params())
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            scale * z
        })
        .collect();
    spec.zero_weights().with_values(v).unwrap()
}

fn random_spd(k: usize, seed: u64) -> Matrix {
    let mut rng = Seed(seed).rng();
    let a = Matrix::from_fn(k, k, |_, _| {
        let z: f64 = StandardNormal.sample(&mut rng);
        z
    });
    &a * a.transpose() + Matrix::identity(k, k) * 0.5
}

fn point(x: &[f64]) -> Tensor {
    Tensor::vector(x.to_vec()).unwrap()
}

fn rel_err(a: &Matrix, b: &Matrix) -> f64 {
    (a - b).norm() / b.norm().max(1e-300)
}

#[test]
fn linear_scalar_model_jacobians() {
    // f(x) = w x + b.
    let spec = ModelSpec::regressor(vec![1, 1], Activation::Tanh).unwrap();
    let w = WeightVector::flat(vec![1.7, -0.4]).unwrap();
    let w = spec.zero_weights().with_values(w.into_values()).unwrap();
    let x = point(&[2.5]);
    let jw = weight_jacobian(&spec, &w, &x, LayerId::Output).unwrap();
    assert_eq!(jw, Matrix::from_row_slice(1, 2, &[2.5, 1.0]));
    let jx = input_jacobian(&spec, &w, &x, LayerId::Output).unwrap();
    assert_eq!(jx, Matrix::from_row_slice(1, 1, &[1.7]));
}

#[test]
fn linear_map_input_jacobian_is_the_matrix() {
    let spec = ModelSpec::regressor(vec![3, 2], Activation::Tanh).unwrap();
    let w = random_weights(&spec, 1, 1.0);
    let wm = Matrix::from_row_slice(2, 3, &w.values()[..6]);
    let jx = input_jacobian(&spec, &w, &point(&[0.3, -1.0, 2.0]), LayerId::Output).unwrap();
    assert!(rel_err(&jx, &wm) < 1e-15);
}

#[test]
fn two_layer_linear_composition() {
    // ReLU with positive pre-activations is the identity on the hidden layer.
    let spec = ModelSpec::regressor(vec![2, 3, 2], Activation::Relu).unwrap();
    let mut v = random_weights(&spec, 2, 0.3).into_values();
    for b in &mut v[6..9] {
        *b = 10.0;
    }
    let w = spec.zero_weights().with_values(v.clone()).unwrap();
    let w1 = Matrix::from_row_slice(3, 2, &v[..6]);
    let w2 = Matrix::from_row_slice(2, 3, &v[9..15]);
    let jx = input_jacobian(&spec, &w, &point(&[0.4, -0.2]), LayerId::Output).unwrap();
    assert!(rel_err(&jx, &(&w2 * &w1)) < 1e-14);
    let jh = input_jacobian(&spec, &w, &point(&[0.4, -0.2]), LayerId::Hidden(0)).unwrap();
    assert!(rel_err(&jh, &w1) < 1e-15);
}

fn fd_check(spec: &ModelSpec, w: &WeightVector, x: &[f64], layer: LayerId) {
    let h = 1e-6;
    let jw = weight_jacobian(spec, w, &point(x), layer).unwrap();
    let jx = input_jacobian(spec, w, &point(x), layer).unwrap();
    let mut fdw = Matrix::zeros(jw.nrows(), jw.ncols());
    for i in 0..w.dim() {
        let mut p = w.values().to_vec();
        let mut m = p.clone();
        p[i] += h;
        m[i] -= h;
        let zp = activation_at(spec, &w.with_values(p).unwrap(), &point(x), layer).unwrap();
        let zm = activation_at(spec, &w.with_values(m).unwrap(), &point(x), layer).unwrap();
        for o in 0..zp.len() {
            fdw[(o, i)] = (zp[o] - zm[o]) / (2.0 * h);
        }
    }
    let mut fdx = Matrix::zeros(jx.nrows(), jx.ncols());
    for i in 0..x.len() {
        let mut p = x.to_vec();
        let mut m = p.clone();
        p[i] += h;
        m[i] -= h;
        let zp = activation_at(spec, w, &point(&p), layer).unwrap();
        let zm = activation_at(spec, w, &point(&m), layer).unwrap();
        for o in 0..zp.len() {
            fdx[(o, i)] = (zp[o] - zm[o]) / (2.0 * h);
        }
    }
    assert!(rel_err(&jw, &fdw) < 1e-5, "weight Jacobian {}", rel_err(&jw, &fdw));
    assert!(rel_err(&jx, &fdx) < 1e-5, "input Jacobian {}", rel_err(&jx, &fdx));
}

#[test]
fn jacobians_match_finite_differences() {
    let tanh = ModelSpec::classifier(vec![3, 5, 4, 3], Activation::Tanh).unwrap();
    for s in 0..10 {
        let w = random_weights(&tanh, s, 0.8);
        let x = [0.3 * s as f64 - 1.0, 0.5, -0.7];
        for layer in [LayerId::Hidden(0), LayerId::Hidden(1), LayerId::Output] {
            fd_check(&tanh, &w, &x, layer);
        }
    }
    // ReLU away from kinks: FD steps never cross zero pre-activation.
    let relu = ModelSpec::regressor(vec![2, 6, 2], Activation::Relu).unwrap();
    for s in 0..10 {
        let w = random_weights(&relu, 100 + s, 0.8);
        fd_check(&relu, &w, &[0.61, -0.37], LayerId::Output);
    }
}

#[test]
fn dead_relu_unit_has_zero_rows_and_columns() {
    let spec = ModelSpec::regressor(vec![2, 3, 1], Activation::Relu).unwrap();
    let mut v = random_weights(&spec, 3, 0.5).into_values();
    // Unit 1 of the hidden layer: bias -100 keeps it off.
    v[6 + 1] = -100.0;
    let w = spec.zero_weights().with_values(v).unwrap();
    let x = point(&[0.2, 0.9]);
    let jh = weight_jacobian(&spec, &w, &x, LayerId::Hidden(0)).unwrap();
    assert!(jh.row(1).iter().all(|&a| a == 0.0));
    assert!(input_jacobian(&spec, &w, &x, LayerId::Hidden(0)).unwrap().row(1).iter().all(|&a| a == 0.0));
    let jo = weight_jacobian(&spec, &w, &x, LayerId::Output).unwrap();
    // Incoming weights (2, 3), bias (7) and outgoing weight (10) of unit 1.
    for c in [2, 3, 7, 10] {
        assert_eq!(jo[(0, c)], 0.0, "column {c}");
    }
}

#[test]
fn invalid_layer_and_input_are_rejected() {
    let spec = ModelSpec::classifier(vec![2, 4, 2], Activation::Tanh).unwrap();
    let w = random_weights(&spec, 1, 1.0);
    assert!(matches!(weight_jacobian(&spec, &w, &point(&[0.0, 0.0]), LayerId::Hidden(1)), Err(Error::Argument(_))));
    assert!(input_jacobian(&spec, &w, &point(&[0.0, 0.0, 1.0]), LayerId::Output).is_err());
}

fn small_net() -> (ModelSpec, WeightVector, FisherEstimate) {
    let spec = ModelSpec::classifier(vec![2, 4, 2], Activation::Tanh).unwrap();
    let w = random_weights(&spec, 5, 0.8);
    let data = make_dataset_2d_binary(200, Seed(6)).unwrap();
    let f = fisher_exact(&spec, &w, data.inputs()).unwrap();
    (spec, w, f)
}

#[test]
fn zero_beta_leaves_activations_fixed() {
    let (spec, w, f) = small_net();
    let x = point(&[0.3, -0.4]);
    let z = activation_at(&spec, &w, &x, LayerId::Hidden(0)).unwrap();
    let samples = perturbed_activations(&spec, &w, &f, 0.0, &x, LayerId::Hidden(0), 20, Seed(1), Damping::Auto).unwrap();
    for s in samples {
        for (a, b) in s.data().iter().zip(&z) {
            assert!((a - b).abs() < 1e-9);
        }
    }
}

#[test]
fn perturbed_activations_are_deterministic() {
    let (spec, w, f) = small_net();
    let x = point(&[0.3, -0.4]);
    let a = perturbed_activations(&spec, &w, &f, 0.01, &x, LayerId::Output, 10, Seed(2), Damping::Auto).unwrap();
    let b = perturbed_activations(&spec, &w, &f, 0.01, &x, LayerId::Output, 10, Seed(2), Damping::Auto).unwrap();
    assert_eq!(a, b);
    let c = perturbed_activations(&spec, &w, &f, 0.01, &x, LayerId::Output, 10, Seed(3), Damping::Auto).unwrap();
    assert_ne!(a, c);
}

/// Sample covariance of perturbed activations against `J Sigma J^T`,
/// relative Frobenius error.
fn mc_covariance_error(beta: f64, m: usize) -> f64 {
    let (spec, w, f) = small_net();
    let x = point(&[0.3, -0.4]);
    let layer = LayerId::Hidden(0);
    let samples = perturbed_activations(&spec, &w, &f, beta, &x, layer, m, Seed(7), Damping::Fixed(1e-3)).unwrap();
    let d = samples[0].data().len();
    let mean: Vec<f64> =
        (0..d).map(|i| samples.iter().map(|s| s.data()[i]).sum::<f64>() / m as f64).collect();
    let emp = Matrix::from_fn(d, d, |i, j| {
        samples.iter().map(|s| (s.data()[i] - mean[i]) * (s.data()[j] - mean[j])).sum::<f64>() / (m - 1) as f64
    });
    let lin = linearized_covariance(&spec, &w, &f, beta, &x, layer, Damping::Fixed(1e-3)).unwrap();
    rel_err(&emp, &lin)
}

#[test]
fn monte_carlo_covariance_matches_linearization() {
    let err = mc_covariance_error(1e-4, 10_000);
    assert!(err < 0.1, "relative error {err}");
}

#[test]
fn one_dimensional_hand_formula() {
    // f = w x + b: grad_x f = w, J_f = [x, 1],
    // F_{z|x} = w^2 / (beta [x, 1] F^{-1} [x, 1]^T).
    let spec = ModelSpec::regressor(vec![1, 1], Activation::Tanh).unwrap();
    for s in 0..20u64 {
        let mut rng = Seed(s).rng();
        let mut g = || -> f64 { StandardNormal.sample(&mut rng) };
        let (wv, bv, x, beta) = (g(), g(), 2.0 * g(), 0.1 + g().abs());
        let w = spec.zero_weights().with_values(vec![wv, bv]).unwrap();
        let fm = random_spd(2, 1000 + s);
        let f = FisherEstimate::from_matrix(fm.clone()).unwrap();
        let inv = fm.try_inverse().unwrap();
        let q = x * x * inv[(0, 0)] + 2.0 * x * inv[(0, 1)] + inv[(1, 1)];
        let hand = wv * wv / (beta * q);
        let got = fisher_z_given_x(&spec, &w, &f, beta, &point(&[x]), LayerId::Output, Damping::Fixed(0.0)).unwrap();
        assert!((got.matrix[(0, 0)] - hand).abs() <= 1e-9 * hand.abs(), "{} vs {hand}", got.matrix[(0, 0)]);
        assert_eq!(got.weight_damping, 0.0);
        let rep = effective_mi(&spec, &w, &f, beta, &[point(&[x])], LayerId::Output, None, Damping::Fixed(0.0)).unwrap();
        let di = 0.5 * hand.ln() - 0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E).ln();
        assert!((rep.delta_i - di).abs() < 1e-9 * di.abs().max(1.0));
    }
}

#[test]
fn hand_formula_agrees_with_gaussian_curvature() {
    // F_{z|x} is the curvature in x of the KL between N(f(x), s2) and
    // N(f(x'), s2) with s2 the linearized variance at x held fixed.
    let spec = ModelSpec::regressor(vec![1, 1], Activation::Tanh).unwrap();
    let w = spec.zero_weights().with_values(vec![0.8, 0.3]).unwrap();
    let f = FisherEstimate::from_matrix(random_spd(2, 9)).unwrap();
    let (x, beta) = (0.7, 0.5);
    let s2 = linearized_covariance(&spec, &w, &f, beta, &point(&[x]), LayerId::Output, Damping::Fixed(0.0)).unwrap()[(0, 0)];
    let mean = |x: f64| activation_at(&spec, &w, &point(&[x]), LayerId::Output).unwrap()[0];
    let kl = |xp: f64| (mean(x) - mean(xp)).powi(2) / (2.0 * s2);
    let h = 1e-4;
    let curv = (kl(x + h) - 2.0 * kl(x) + kl(x - h)) / (h * h);
    let got = fisher_z_given_x(&spec, &w, &f, beta, &point(&[x]), LayerId::Output, Damping::Fixed(0.0)).unwrap();
    assert!((curv / got.matrix[(0, 0)] - 1.0).abs() < 1e-5);
}

#[test]
fn beta_scaling_is_inverse() {
    let (spec, w, f) = small_net();
    let x = point(&[0.5, 0.1]);
    // Auto damping of the activation covariance scales with beta, so the
    // identity stays exact for this singular Fisher.
    let a = fisher_z_given_x(&spec, &w, &f, 0.2, &x, LayerId::Hidden(0), Damping::Auto).unwrap();
    let b = fisher_z_given_x(&spec, &w, &f, 0.2 * 7.0, &x, LayerId::Hidden(0), Damping::Auto).unwrap();
    assert!(rel_err(&(&b.matrix * 7.0), &a.matrix) < 1e-9);
}

#[test]
fn vanishing_weight_fisher_kills_activation_fisher() {
    let spec = ModelSpec::regressor(vec![2, 3, 1], Activation::Tanh).unwrap();
    let w = random_weights(&spec, 4, 0.7);
    let base = random_spd(spec.num_params(), 8);
    let x = point(&[0.2, -0.6]);
    let traces: Vec<f64> = [1.0, 1e-2, 1e-4, 1e-6]
        .iter()
        .map(|&s| {
            let f = FisherEstimate::from_matrix(&base * s).unwrap();
            fisher_z_given_x(&spec, &w, &f, 1.0, &x, LayerId::Output, Damping::Fixed(0.0)).unwrap().matrix.trace()
        })
        .collect();
    for p in traces.windows(2) {
        assert!(p[1] < p[0]);
    }
    assert!(traces[3] < 1e-5 * traces[0]);
}

#[test]
fn lipschitz_rescaling_shifts_the_log_determinant() {
    // Hidden ReLU layer with positive pre-activations: scaling the input
    // weights by c scales grad_x f by c and leaves J_f unchanged.
    let spec = ModelSpec::regressor(vec![2, 3, 1], Activation::Relu).unwrap();
    let mut v = random_weights(&spec, 10, 0.3).into_values();
    for b in &mut v[6..9] {
        *b = 5.0;
    }
    let f = FisherEstimate::from_matrix(random_spd(spec.num_params(), 11)).unwrap();
    let probes = vec![point(&[0.3, -0.2]), point(&[-0.5, 0.7])];
    let at = |c: f64| {
        let mut u = v.clone();
        for a in &mut u[..6] {
            *a *= c;
        }
        let w = spec.zero_weights().with_values(u).unwrap();
        effective_mi(&spec, &w, &f, 0.3, &probes, LayerId::Hidden(0), None, Damping::Fixed(0.0)).unwrap()
    };
    let base = at(1.0);
    for c in [0.5, 2.0, 3.0] {
        let r = at(c);
        for (a, b) in r.logdets.iter().zip(&base.logdets) {
            assert!((a - b - 2.0 * 2.0 * c.ln()).abs() < 1e-9, "c {c}: {a} vs {b}");
        }
    }
}

#[test]
fn delta_i_decreases_with_beta() {
    let (spec, w, f) = small_net();
    let probes: Vec<Tensor> = make_dataset_2d_binary(16, Seed(40)).unwrap().inputs().iter_rows().map(point).collect();
    let d: Vec<f64> = [0.01, 0.1, 1.0, 10.0]
        .iter()
        .map(|&b| effective_mi(&spec, &w, &f, b, &probes, LayerId::Hidden(0), None, Damping::Auto).unwrap().delta_i)
        .collect();
    for p in d.windows(2) {
        assert!(p[1] < p[0], "{d:?}");
    }
}

#[test]
fn effective_mi_report_fields() {
    let (spec, w, f) = small_net();
    let x = point(&[0.1, 0.2]);
    let rep = effective_mi(&spec, &w, &f, 0.5, &[x.clone(), x.clone(), x], LayerId::Output, None, Damping::Auto).unwrap();
    assert!(rep.logdets.iter().all(|&l| l == rep.logdets[0]));
    assert!(rep.i_eff.is_none() && !rep.clamped);
    assert!(rep.weight_damping > 0.0);
    let with_h = effective_mi(&spec, &w, &f, 0.5, &[point(&[0.1, 0.2])], LayerId::Output, Some(3.0), Damping::Auto).unwrap();
    assert_eq!(with_h.i_eff, Some((3.0 + with_h.delta_i).max(0.0)));
    let low = effective_mi(&spec, &w, &f, 0.5, &[point(&[0.1, 0.2])], LayerId::Output, Some(-1e6), Damping::Auto).unwrap();
    assert_eq!(low.i_eff, Some(0.0));
    assert!(low.clamped);
    let csv = rep.probes_csv().unwrap();
    assert!(csv.starts_with("probe,logdet\n"));
    assert_eq!(csv.lines().count(), 4);
    let json = rep.to_json().unwrap();
    assert!(json.contains("\"delta_i\""));
    assert!(effective_mi(&spec, &w, &f, 0.5, &[], LayerId::Output, None, Damping::Auto).is_err());
    assert!(effective_mi(&spec, &w, &f, 0.0, &[point(&[0.0, 0.0])], LayerId::Output, None, Damping::Auto).is_err());
}

#[test]
fn singular_fisher_needs_damping() {
    let spec = ModelSpec::regressor(vec![1, 1], Activation::Tanh).unwrap();
    let w = spec.zero_weights().with_values(vec![1.0, 0.0]).unwrap();
    let f = FisherEstimate::from_matrix(Matrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0])).unwrap();
    let x = point(&[0.5]);
    let err = fisher_z_given_x(&spec, &w, &f, 1.0, &x, LayerId::Output, Damping::Fixed(0.0));
    assert!(matches!(err, Err(Error::NotPositiveDefinite(_))), "{err:?}");
    let ok = fisher_z_given_x(&spec, &w, &f, 1.0, &x, LayerId::Output, Damping::Auto).unwrap();
    assert!(ok.weight_damping > 0.0 && ok.matrix[(0, 0)].is_finite());
    assert!(fisher_z_given_x(&spec, &w, &f, 1.0, &x, LayerId::Output, Damping::Fixed(-1.0)).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn conditional_fisher_is_symmetric_psd(seed in 0u64..1000, beta in 0.01f64..10.0, x0 in -2.0f64..2.0, x1 in -2.0f64..2.0) {
        let spec = ModelSpec::classifier(vec![2, 5, 3], Activation::Tanh).unwrap();
        let w = random_weights(&spec, seed, 0.8);
        let f = FisherEstimate::from_matrix(random_spd(spec.num_params(), seed + 1)).unwrap();
        for layer in [LayerId::Hidden(0), LayerId::Output] {
            let m = fisher_z_given_x(&spec, &w, &f, beta, &point(&[x0, x1]), layer, Damping::Auto).unwrap().matrix;
            prop_assert!((&m - m.transpose()).norm() <= 1e-12 * m.norm().max(1e-300));
            let eig = m.symmetric_eigenvalues();
            prop_assert!(eig.iter().all(|&l| l >= -1e-10 * eig.amax().max(1e-300)));
        }
    }
}
