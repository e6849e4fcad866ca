//! Acceptance run: one PASS/FAIL line per criterion at full tolerance.
//!
//! Experiments run through the `iwlab` binary with default configs and are
//! judged by the same checks as `iwlab report`. Criteria listed in
//! `KNOWN_GAPS` are reported as FAIL but do not fail the process; the gap
//! analysis lives with the project notes.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use iw_core::activations::{effective_mi, fisher_z_given_x, Damping};
use iw_core::dynamics::{sgd_train, TrainConfig};
use iw_core::fisher::{hessian_fisher_residual, FisherEstimate};
use iw_core::infoweights::{
    golden_section, kl_gaussians, optimal_beta, optimal_sigma, pac_bayes_bound, quadratic_surrogate, fisher_iw,
    GaussianSpec,
};
use iw_core::models::{make_dataset_2d_binary, Activation, Head, LabeledDataset, ModelSpec};
use iw_core::ndcore::{accuracy, forward, grad_loss, loss, LayerId, Matrix, Tensor};
use iw_core::Seed;
use iwlab::report::{evaluate, Check};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

const KNOWN_GAPS: &[&str] = &["6b"];

struct Outcome {
    id: &'static str,
    pass: bool,
    detail: String,
    elapsed: Duration,
    limit: Option<Duration>,
}

fn normal(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn minutes(m: u64) -> Option<Duration> {
    Some(Duration::from_secs(60 * m))
}

fn timed(id: &'static str, limit: Option<Duration>, f: impl FnOnce() -> (bool, String)) -> Outcome {
    let t = Instant::now();
    let (pass, detail) = f();
    Outcome { id, pass, detail, elapsed: t.elapsed(), limit }
}

// ---------------------------------------------------------------- 1

fn random_case(rng: &mut impl Rng, act: Activation, classifier: bool) -> (ModelSpec, Vec<f64>, LabeledDataset) {
    let d = rng.random_range(1..4);
    let (h1, h2) = (rng.random_range(2..6), rng.random_range(2..6));
    let out = if classifier { rng.random_range(2..5) } else { 1 };
    let head = if classifier { Head::SoftmaxXent } else { Head::SquaredError };
    let spec = ModelSpec::new(vec![d, h1, h2, out], act, head).unwrap();
    let w: Vec<f64> = (0..spec.num_params()).map(|_| normal(rng)).collect();
    let n = rng.random_range(1..6);
    let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| normal(rng)).collect()).collect();
    let data = if classifier {
        let labels = (0..n).map(|_| rng.random_range(0..out)).collect();
        LabeledDataset::classification(&rows, labels, out).unwrap()
    } else {
        LabeledDataset::regression(&rows, (0..n).map(|_| normal(rng)).collect()).unwrap()
    };
    (spec, w, data)
}

/// Smallest absolute hidden pre-activation, via the forward pass of a copy
/// of the network truncated before each hidden nonlinearity.
fn min_preactivation(spec: &ModelSpec, w: &[f64], data: &LabeledDataset) -> f64 {
    let mut min = f64::INFINITY;
    for l in 0..spec.depth() - 1 {
        let sizes = spec.sizes()[..l + 2].to_vec();
        let trunc = ModelSpec::new(sizes, spec.activation(), Head::SquaredError).unwrap();
        // Layer segments come first in the layout, so the prefix is the truncated net.
        let wt = trunc.zero_weights().with_values(w[..trunc.num_params()].to_vec()).unwrap();
        let out = forward(&trunc, &wt, data.inputs()).unwrap();
        min = out.data().iter().fold(min, |m, v| m.min(v.abs()));
    }
    min
}

fn criterion_1() -> (bool, String) {
    let mut rng = Seed(101).rng();
    let mut worst: f64 = 0.0;
    let mut counts = Vec::new();
    for act in [Activation::Tanh, Activation::Relu] {
        for classifier in [true, false] {
            let mut done = 0;
            while done < 100 {
                let (spec, w, data) = random_case(&mut rng, act, classifier);
                // Central differences straddling a ReLU kink are not derivatives.
                if act == Activation::Relu && min_preactivation(&spec, &w, &data) < 1e-4 {
                    continue;
                }
                let wv = spec.zero_weights().with_values(w.clone()).unwrap();
                let g = grad_loss(&spec, &wv, &data).unwrap();
                let mut v = w.clone();
                for i in 0..w.len() {
                    let h = 1e-5 * w[i].abs().max(1.0);
                    v[i] = w[i] + h;
                    let p = loss(&spec, &wv.with_values(v.clone()).unwrap(), &data).unwrap();
                    v[i] = w[i] - h;
                    let m = loss(&spec, &wv.with_values(v.clone()).unwrap(), &data).unwrap();
                    v[i] = w[i];
                    let fd = (p - m) / (2.0 * h);
                    let a = g.values()[i];
                    worst = worst.max((a - fd).abs() / a.abs().max(fd.abs()).max(1e-4));
                }
                done += 1;
            }
            counts.push(done);
        }
    }
    (worst < 1e-5, format!("4 families x {} cases, worst relative error {worst:.2e}", counts[0]))
}

// ---------------------------------------------------------------- 2

fn criterion_2() -> (bool, String) {
    let mut rng = Seed(202).rng();
    let mut worst_kl: f64 = 0.0;
    for case in 0..50 {
        let k = 1 + case % 5;
        let b = Matrix::from_fn(k, k, |_, _| normal(&mut rng));
        let h = &b * b.transpose() * 0.5;
        let w: Vec<f64> = (0..k).map(|_| normal(&mut rng)).collect();
        let beta = rng.random_range(0.05..3.0);
        let lambda2 = rng.random_range(0.5..20.0);
        let sigma = optimal_sigma(&h, beta, lambda2).unwrap();
        let q = GaussianSpec::full(w.clone(), (&sigma + sigma.transpose()) * 0.5).unwrap();
        let p = GaussianSpec::isotropic(vec![0.0; k], lambda2).unwrap();
        let kl = kl_gaussians(&q, &p).unwrap();
        let iw = fisher_iw(&h, &w, beta, lambda2).unwrap();
        worst_kl = worst_kl.max((iw - kl).abs() / kl.abs().max(1e-300));
    }
    // Coordinate-wise minimization of the surrogate over log-variances in
    // an eigenbasis of H, where the optimum is diagonal.
    let mut worst_sigma: f64 = 0.0;
    for case in 0..10 {
        let k = 1 + case % 3;
        let diag: Vec<f64> = (0..k).map(|_| rng.random_range(0.1..10.0)).collect();
        let h = diagonal(&diag);
        let w: Vec<f64> = (0..k).map(|_| normal(&mut rng)).collect();
        let (beta, lambda2) = (rng.random_range(0.05..3.0), rng.random_range(0.5..20.0));
        let want = optimal_sigma(&h, beta, lambda2).unwrap();
        let mut logs = vec![0.0; k];
        for _ in 0..2 {
            for i in 0..k {
                let base = logs.clone();
                logs[i] = golden_section(
                    |x| {
                        let mut t = base.clone();
                        t[i] = x;
                        let s = diagonal(&t.iter().map(|v| v.exp()).collect::<Vec<_>>());
                        quadratic_surrogate(&h, &w, &s, beta, lambda2).unwrap()
                    },
                    -25.0,
                    10.0,
                    1e-14,
                );
            }
        }
        for i in 0..k {
            worst_sigma = worst_sigma.max((logs[i].exp() / want[(i, i)] - 1.0).abs());
        }
    }
    (
        worst_kl < 1e-9 && worst_sigma < 1e-4,
        format!("fisher_iw vs KL worst {worst_kl:.2e} on 50 cases; optimal_sigma vs search worst {worst_sigma:.2e}"),
    )
}

fn diagonal(v: &[f64]) -> Matrix {
    Matrix::from_fn(v.len(), v.len(), |i, j| if i == j { v[i] } else { 0.0 })
}

// ---------------------------------------------------------------- 3

fn criterion_3() -> (bool, String) {
    let spec = ModelSpec::classifier(vec![2, 8, 2], Activation::Tanh).unwrap();
    let data = make_dataset_2d_binary(200, Seed(1)).unwrap();
    let mut w = spec.init_weights(Seed(2));
    let mut rels = Vec::new();
    let mut accs = Vec::new();
    for c in 0..3 {
        w = sgd_train(&spec, &data, &TrainConfig::sgd(0.5, 200, 2000, Seed(c)), &w).unwrap().final_weights();
        rels.push(hessian_fisher_residual(&spec, &w, &data).unwrap().1);
        accs.push(accuracy(&spec, &w, &data).unwrap());
    }
    let final_loss = loss(&spec, &w, &data).unwrap();
    let pass = accs.iter().all(|&a| a > 0.99) && rels.iter().all(|&r| r < 0.1) && rels.windows(2).all(|p| p[1] < p[0]);
    (pass, format!("accuracy {accs:?}, loss {final_loss:.2e}, |H-F|/|H| {rels:.4?}"))
}

// ---------------------------------------------------------- 4 to 9, 11

struct Runs {
    root: tempfile::TempDir,
    checks: BTreeMap<&'static str, Vec<Check>>,
    times: BTreeMap<&'static str, Duration>,
}

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_iwlab")
}

fn run_bin(config: &Path, out: &Path) -> bool {
    let st = Command::new(bin()).arg("run").arg(config).arg("--out").arg(out).output().unwrap();
    if !st.status.success() {
        eprintln!("{}", String::from_utf8_lossy(&st.stderr));
    }
    st.status.success()
}

const EXPERIMENTS: [&str; 6] =
    ["fig1-fisher-growth", "fig2-stability", "fig3-toy-mi", "fig4-sweeps", "kramers", "effective-info"];

fn run_experiments() -> Runs {
    let root = tempfile::tempdir().unwrap();
    let mut checks = BTreeMap::new();
    let mut times = BTreeMap::new();
    for name in EXPERIMENTS {
        let cfg = root.path().join(format!("{name}.toml"));
        std::fs::write(&cfg, format!("experiment = \"{name}\"\n")).unwrap();
        let t = Instant::now();
        let ok = run_bin(&cfg, &root.path().join(name));
        times.insert(name, t.elapsed());
        let c = if ok { evaluate(&root.path().join(name)).map(|(_, c)| c).unwrap_or_default() } else { Vec::new() };
        checks.insert(name, c);
    }
    Runs { root, checks, times }
}

fn from_checks(runs: &Runs, exp: &'static str, ids: &[&str]) -> (bool, String) {
    let all = &runs.checks[exp];
    let picked: Vec<&Check> = ids.iter().filter_map(|id| all.iter().find(|c| c.id == *id)).collect();
    if picked.len() != ids.len() {
        return (false, format!("{exp} did not produce checks {ids:?}"));
    }
    let detail = picked.iter().map(|c| format!("{}: {}", c.name, c.detail)).collect::<Vec<_>>().join("; ");
    (picked.iter().all(|c| c.pass), detail)
}

fn experiment_outcome(runs: &Runs, id: &'static str, exp: &'static str, ids: &[&str], limit: Option<Duration>) -> Outcome {
    let (pass, detail) = from_checks(runs, exp, ids);
    Outcome { id, pass, detail, elapsed: runs.times[exp], limit }
}

fn criterion_9c() -> (bool, String) {
    let spec = ModelSpec::regressor(vec![1, 1], Activation::Tanh).unwrap();
    let mut worst: f64 = 0.0;
    for s in 0..20u64 {
        let mut rng = Seed(900 + s).rng();
        let (wv, bv, x, beta) = (normal(&mut rng), normal(&mut rng), 2.0 * normal(&mut rng), 0.1 + normal(&mut rng).abs());
        let w = spec.zero_weights().with_values(vec![wv, bv]).unwrap();
        let b = Matrix::from_fn(2, 2, |_, _| normal(&mut rng));
        let fm = &b * b.transpose() + Matrix::identity(2, 2) * 0.1;
        let (a, c, d) = (fm[(0, 0)], fm[(0, 1)], fm[(1, 1)]);
        let det = a * d - c * c;
        // [x, 1] F^{-1} [x, 1]^T through the explicit 2x2 inverse.
        let q = (x * x * d - 2.0 * x * c + a) / det;
        let hand = wv * wv / (beta * q);
        let f = FisherEstimate::from_matrix(fm).unwrap();
        let px = Tensor::vector(vec![x]).unwrap();
        let got = fisher_z_given_x(&spec, &w, &f, beta, &px, LayerId::Output, Damping::Fixed(0.0)).unwrap().matrix[(0, 0)];
        worst = worst.max((got - hand).abs() / hand.abs());
        let rep = effective_mi(&spec, &w, &f, beta, &[px], LayerId::Output, None, Damping::Fixed(0.0)).unwrap();
        let di = 0.5 * (hand / (2.0 * std::f64::consts::PI * std::f64::consts::E)).ln();
        worst = worst.max((rep.delta_i - di).abs() / di.abs().max(1.0));
    }
    (worst < 1e-9, format!("20 random linear models, worst relative error {worst:.2e}"))
}

fn criterion_11(runs: &Runs) -> (bool, String) {
    let mut bad = Vec::new();
    for name in EXPERIMENTS {
        let first = runs.root.path().join(name);
        let again = runs.root.path().join(format!("{name}-rerun"));
        if !run_bin(&first.join("manifest.json"), &again) || !same_tree(&first, &again) {
            bad.push(name);
        }
    }
    (bad.is_empty(), if bad.is_empty() { "6 experiments re-run from manifest.json, byte-identical".into() } else { format!("differs: {bad:?}") })
}

fn same_tree(a: &Path, b: &Path) -> bool {
    let list = |d: &Path| -> Vec<PathBuf> {
        let mut v: Vec<PathBuf> = std::fs::read_dir(d).unwrap().map(|e| e.unwrap().path()).collect();
        v.sort();
        v
    };
    let (la, lb) = (list(a), list(b));
    la.len() == lb.len()
        && la.iter().zip(&lb).all(|(x, y)| x.file_name() == y.file_name() && std::fs::read(x).unwrap() == std::fs::read(y).unwrap())
}

// ---------------------------------------------------------------- 10

fn criterion_10() -> (bool, String) {
    let mut rng = Seed(1010).rng();
    let mut worst: f64 = 0.0;
    let mut monotone = true;
    for _ in 0..20 {
        let l = rng.random_range(0.0..0.9);
        let kl = rng.random_range(0.0..500.0);
        let n = rng.random_range(10..100_000usize);
        let beta = rng.random_range(0.55..50.0);
        let delta = rng.random_range(0.001..0.5);
        for exp_form in [false, true] {
            let got = pac_bayes_bound(l, kl, n, beta, delta, exp_form).unwrap().bound;
            let conf = if exp_form { 0.0 } else { -delta.ln() };
            let hand = (l + beta * (kl + conf) / n as f64) * (2.0 * beta) / (2.0 * beta - 1.0);
            worst = worst.max((got - hand).abs() / hand.abs().max(1e-300));
        }
        let b = |l: f64, kl: f64, n: usize, d: f64| pac_bayes_bound(l, kl, n, beta, d, false).unwrap().bound;
        let base = b(l, kl, n, delta);
        monotone &= b(l + 0.05, kl, n, delta) > base;
        monotone &= b(l, kl + 1.0, n, delta) > base;
        monotone &= b(l, kl, 2 * n, delta) < base;
        monotone &= b(l, kl, n, delta / 2.0) > base;
        // The optimized bound sits at or below a fine grid over beta.
        let opt = optimal_beta(l, kl, n, delta, false).unwrap().bound;
        let grid = (1..4000).map(|i| 0.5 + 1e-3 * 1.005f64.powi(i)).map(|bt| pac_bayes_bound(l, kl, n, bt, delta, false).unwrap().bound);
        monotone &= opt <= grid.fold(f64::INFINITY, f64::min) * (1.0 + 1e-12);
    }
    (worst < 1e-12 && monotone, format!("20 tuples x 2 forms, worst relative error {worst:.2e}; monotonicity {monotone}"))
}

fn main() {
    let mut outcomes = vec![
        timed("1", minutes(1), criterion_1),
        timed("2", minutes(1), criterion_2),
        timed("3", minutes(5), criterion_3),
    ];
    let runs = run_experiments();
    outcomes.push(experiment_outcome(&runs, "4", "fig1-fisher-growth", &["checkpoints", "logdet-final-above-initial", "logdet-trend"], minutes(10)));
    outcomes.push(experiment_outcome(&runs, "5", "kramers", &["uncensored", "kramers-slope"], minutes(10)));
    outcomes.push(experiment_outcome(&runs, "6a", "fig3-toy-mi", &["mi-monotone"], minutes(30)));
    outcomes.push(experiment_outcome(&runs, "6b", "fig3-toy-mi", &["mi-order", "giw-order"], minutes(30)));
    outcomes.push(experiment_outcome(&runs, "6c", "fig3-toy-mi", &["flat-mass"], minutes(30)));
    outcomes.push(experiment_outcome(&runs, "7", "fig3-toy-mi", &["stability-factor-2"], minutes(30)));
    outcomes.push(experiment_outcome(&runs, "8", "fig4-sweeps", &["trace-vs-classes", "trace-vs-batch"], minutes(30)));
    outcomes.push(experiment_outcome(&runs, "9a", "effective-info", &["mc-covariance"], minutes(5)));
    outcomes.push(experiment_outcome(&runs, "9b", "effective-info", &["delta-i-vs-beta"], minutes(5)));
    outcomes.push(timed("9c", minutes(5), criterion_9c));
    outcomes.push(timed("10", Some(Duration::from_secs(1)), criterion_10));
    outcomes.push(timed("11", None, || criterion_11(&runs)));

    let mut unexpected = 0;
    for o in &outcomes {
        let in_time = o.limit.is_none_or(|l| o.elapsed <= l);
        let pass = o.pass && in_time;
        let note = match (pass, KNOWN_GAPS.contains(&o.id)) {
            (false, true) => " [known gap]",
            (true, true) => " [known gap now passes]",
            _ => "",
        };
        if !pass && !KNOWN_GAPS.contains(&o.id) {
            unexpected += 1;
        }
        let time = if in_time { String::new() } else { " over time limit".into() };
        println!(
            "criterion {:<3} {}  {:>8.2}s{time}  {}{note}",
            o.id,
            if pass { "PASS" } else { "FAIL" },
            o.elapsed.as_secs_f64(),
            o.detail
        );
    }
    println!("{} unexpected failures", unexpected);
    if unexpected > 0 {
        std::process::exit(1);
    }
}
