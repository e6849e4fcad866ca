//! The six experiments. Each writes its result files through [`Outputs`] and
//! returns the lines of the human-readable summary. Trial seeds are derived
//! from the master seed and the trial index only.

use iw_core::activations::{effective_mi, linearized_covariance, perturbed_activations, Damping};
use iw_core::dynamics::{
    escape_time_mc, linear_fit, plane_projection, sgd_train, toy_pipeline, BentDoubleWell, DoubleWell, Region,
    ScalarLoss, ToyPipelineConfig, TrainConfig,
};
use iw_core::fisher::{fisher_trace_diag, logdet_damped, model_fisher};
use iw_core::models::{make_dataset_2d_binary, make_dataset_kclass, Activation, ModelSpec, ToyModelConfig};
use iw_core::ndcore::{accuracy, loss, LayerId, Matrix, Tensor};
use iw_core::Seed;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{Config, Experiment, Landscape};
use crate::output::{csv_string, Outputs};
use crate::stats::{mean_ci95, spearman};
use crate::CliError;

pub fn run_experiment(cfg: &Config, out: &mut Outputs) -> Result<Vec<String>, CliError> {
    match cfg.experiment {
        Experiment::Fig1FisherGrowth => fig1(cfg, out),
        Experiment::Fig2Stability => fig2(cfg, out),
        Experiment::Fig3ToyMi => fig3(cfg, out),
        Experiment::Fig4Sweeps => fig4(cfg, out),
        Experiment::Kramers => kramers(cfg, out),
        Experiment::EffectiveInfo => effective_info(cfg, out),
    }
}

fn bad(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

fn fig1(cfg: &Config, out: &mut Outputs) -> Result<Vec<String>, CliError> {
    let c = &cfg.fig1;
    if c.checkpoints == 0 || c.checkpoints > c.steps {
        return Err(bad("fig1.checkpoints must lie in [1, steps]"));
    }
    let seed = Seed(cfg.seed);
    let spec = ModelSpec::classifier(c.sizes.clone(), Activation::Tanh)?;
    let data = make_dataset_2d_binary(c.n, seed.derive(0))?;
    let w0 = spec.init_weights(seed.derive(1));
    let mut t = TrainConfig::sgd(c.eta, c.batch_size, c.steps, seed.derive(2));
    t.snapshot_stride = c.steps / c.checkpoints;
    let trace = sgd_train(&spec, &data, &t, &w0)?;
    let rows: Vec<(usize, f64, f64, f64)> = (0..trace.snapshots.len())
        .into_par_iter()
        .map(|i| {
            let w = trace.snapshot_weights(i);
            let f = model_fisher(&spec, &w, data.inputs())?;
            let ld = logdet_damped(&f, c.damping)?.value;
            Ok((trace.snapshots[i].step, loss(&spec, &w, &data)?, accuracy(&spec, &w, &data)?, ld))
        })
        .collect::<iw_core::Result<_>>()?;
    out.write(
        "fisher_logdet.csv",
        csv_string(
            &["step", "train_loss", "train_acc", "logdet_F"],
            rows.iter().map(|r| vec![r.0.to_string(), r.1.to_string(), r.2.to_string(), r.3.to_string()]),
        )?,
    )?;
    let steps: Vec<f64> = rows.iter().map(|r| r.0 as f64).collect();
    let lds: Vec<f64> = rows.iter().map(|r| r.3).collect();
    let (first, last) = (rows[0], rows[rows.len() - 1]);
    Ok(vec![
        format!("network {:?}, {} parameters, {} samples", c.sizes, spec.num_params(), c.n),
        format!("log|F + {:e} I|: {:.3} at step 0, {:.3} at step {}", c.damping, first.3, last.3, last.0),
        format!("train accuracy {:.3} -> {:.3}", first.2, last.2),
        format!("Spearman(step, logdet) = {:.4} over {} checkpoints", spearman(&steps, &lds), rows.len()),
    ])
}

#[derive(Serialize)]
struct PlaneSummary<'a> {
    fisher: [[f64; 2]; 2],
    ellipse_axes: &'a [iw_core::dynamics::EllipseAxis; 2],
    endpoint_distance: f64,
    /// `sqrt(d^T F d)` for the projected end-point difference `d`.
    fisher_distance: f64,
    completed_basis: bool,
    train_acc: [f64; 2],
}

fn fig2(cfg: &Config, out: &mut Outputs) -> Result<Vec<String>, CliError> {
    let c = &cfg.fig2;
    let seed = Seed(cfg.seed);
    let spec = ModelSpec::classifier(c.sizes.clone(), Activation::Tanh)?;
    let data_a = make_dataset_2d_binary(c.n, seed.derive(0))?;
    let pool = make_dataset_2d_binary(c.n, seed.derive(3))?;
    let data_b = data_a.swap_in(c.swap_index, &pool, 0)?;
    let w0 = spec.init_weights(seed.derive(1));
    let mut t = TrainConfig::sgd(c.eta, c.batch_size, c.steps, seed.derive(2));
    t.snapshot_stride = c.snapshot_stride;
    let (a, b) = rayon::join(|| sgd_train(&spec, &data_a, &t, &w0), || sgd_train(&spec, &data_b, &t, &w0));
    let (a, b) = (a?, b?);
    let (wa, wb) = (a.final_weights(), b.final_weights());
    let f_diag = fisher_trace_diag(&spec, &wa, data_a.inputs(), 0, seed.derive(4))?.diagonal()?;
    let plane = plane_projection(&w0, &a, &b, &f_diag)?;
    out.write("plane_paths.csv", plane.paths_csv()?)?;
    let ea = plane.path_a.last().expect("path holds the end point").1;
    let eb = plane.path_b.last().expect("path holds the end point").1;
    let d = [eb[0] - ea[0], eb[1] - ea[1]];
    let f = plane.fisher;
    let fisher_distance = (d[0] * (f[0][0] * d[0] + f[0][1] * d[1]) + d[1] * (f[1][0] * d[0] + f[1][1] * d[1])).sqrt();
    let acc = [accuracy(&spec, &wa, &data_a)?, accuracy(&spec, &wb, &data_b)?];
    let summary = PlaneSummary {
        fisher: plane.fisher,
        ellipse_axes: &plane.ellipse_axes,
        endpoint_distance: plane.endpoint_distance,
        fisher_distance,
        completed_basis: plane.completed_basis,
        train_acc: acc,
    };
    out.write("plane.json", serde_json::to_string_pretty(&summary).map_err(iw_core::Error::from)? + "\n")?;
    Ok(vec![
        format!("sample {} replaced; shared start and SGD seed", c.swap_index),
        format!("end-point distance {:.4e}, Fisher-metric distance {:.4e}", plane.endpoint_distance, fisher_distance),
        format!(
            "ellipse semi-axes {:.4e}, {:.4e}",
            plane.ellipse_axes[0].length, plane.ellipse_axes[1].length
        ),
        format!("train accuracy {:.3} / {:.3}", acc[0], acc[1]),
    ])
}

pub fn toy_pipeline_config(cfg: &Config) -> Result<ToyPipelineConfig, CliError> {
    let c = &cfg.toy;
    if c.lambda2_points < 1 {
        return Err(bad("toy.lambda2_points must be positive"));
    }
    let [lo, hi] = c.lambda2_log10_range;
    let grid = (0..c.lambda2_points)
        .map(|i| {
            let t = if c.lambda2_points == 1 { 0.0 } else { i as f64 / (c.lambda2_points - 1) as f64 };
            10f64.powf(lo + (hi - lo) * t)
        })
        .collect();
    Ok(ToyPipelineConfig {
        model: ToyModelConfig { n: c.n, c: c.c },
        batch_sizes: c.batch_sizes.clone(),
        datasets: c.datasets,
        runs_per: c.runs_per,
        train: TrainConfig::sgd(c.eta, c.n, c.steps, Seed(0)),
        seed: Seed(cfg.seed),
        init_range: c.init_range,
        polish_iters: c.polish_iters,
        mixture_samples: c.mixture_samples,
        lambda2_grid: grid,
        jacobian_delta: (c.jacobian_delta > 0.0).then_some(c.jacobian_delta),
    })
}

fn fig3(cfg: &Config, out: &mut Outputs) -> Result<Vec<String>, CliError> {
    let report = toy_pipeline(&toy_pipeline_config(cfg)?)?;
    out.write("toy_mi.csv", report.to_csv()?)?;
    out.write("toy_endpoints.csv", report.endpoints_csv()?)?;
    out.write("toy_histogram.csv", report.histogram_csv(cfg.toy.histogram_bins, cfg.toy.histogram_range)?)?;
    let mut lean = report.clone();
    lean.rows.iter_mut().for_each(|r| r.endpoints.clear());
    out.write("toy_report.json", serde_json::to_string_pretty(&lean).map_err(iw_core::Error::from)? + "\n")?;
    let mut lines = vec![format!(
        "H(D) = {:.4} nats, flat threshold |theta| > {:.4}, {} datasets per batch size",
        report.entropy_d, report.flat_threshold, cfg.toy.datasets
    )];
    for r in &report.rows {
        lines.push(format!(
            "B = {:>4}: Shannon MI {:.4}, Gaussian IW {:.4}, stability {}, flat {:.3}, mean F {:.4}",
            r.batch_size,
            r.shannon_mi_nats,
            r.gaussian_iw_nats,
            r.shannon_fisher_nats.map_or("n/a".to_string(), |v| format!("{v:.4}")),
            r.flat_fraction,
            r.mean_fisher
        ));
    }
    Ok(lines)
}

fn fig4(cfg: &Config, out: &mut Outputs) -> Result<Vec<String>, CliError> {
    let c = &cfg.sweeps;
    let kmax = c.classes.iter().copied().chain([c.batch_classes]).max().unwrap_or(0);
    if c.seeds < 2 || c.classes.is_empty() || c.batch_sizes.is_empty() {
        return Err(bad("sweeps need at least two seeds, one class count and one batch size"));
    }
    let seed = Seed(cfg.seed);
    // Seed `s` fixes the data, the start and the minibatch order across the
    // values of a sweep.
    let trial = |k: usize, b: usize, s: usize| -> iw_core::Result<(f64, f64)> {
        let data = make_dataset_kclass(c.n, kmax, c.input_dim, seed.derive(s as u64))?.restrict_classes(k)?;
        let mut sizes = vec![c.input_dim];
        sizes.extend(&c.hidden);
        sizes.push(k);
        let spec = ModelSpec::classifier(sizes, Activation::Tanh)?;
        let w0 = spec.init_weights(seed.derive(1000 + s as u64));
        let t = TrainConfig::sgd(c.eta, b, c.steps, seed.derive(2000 + s as u64));
        let w = sgd_train(&spec, &data, &t, &w0)?.final_weights();
        let tr = fisher_trace_diag(&spec, &w, data.inputs(), 0, Seed(0))?.trace();
        Ok((tr, accuracy(&spec, &w, &data)?))
    };
    let sweep = |values: &[usize], by_class: bool| -> iw_core::Result<Vec<(usize, usize, f64, f64)>> {
        let jobs: Vec<(usize, usize)> = values.iter().flat_map(|&v| (0..c.seeds).map(move |s| (v, s))).collect();
        jobs.par_iter()
            .map(|&(v, s)| {
                let (k, b) = if by_class { (v, c.class_batch_size) } else { (c.batch_classes, v) };
                trial(k, b, s).map(|(tr, acc)| (v, s, tr, acc))
            })
            .collect()
    };
    let classes = sweep(&c.classes, true)?;
    let batches = sweep(&c.batch_sizes, false)?;
    let table = |name: &str, rows: &[(usize, usize, f64, f64)]| {
        csv_string(
            &[name, "seed", "fisher_trace", "train_acc"],
            rows.iter().map(|r| vec![r.0.to_string(), r.1.to_string(), r.2.to_string(), r.3.to_string()]),
        )
    };
    out.write("sweep_classes.csv", table("classes", &classes)?)?;
    out.write("sweep_batch.csv", table("batch_size", &batches)?)?;
    let mut lines = vec![format!("{} seeds, {} steps at eta {}", c.seeds, c.steps, c.eta)];
    for (label, values, rows) in [("classes", &c.classes, &classes), ("batch size", &c.batch_sizes, &batches)] {
        for v in values {
            let tr: Vec<f64> = rows.iter().filter(|r| r.0 == *v).map(|r| r.2).collect();
            let (m, ci) = mean_ci95(&tr);
            lines.push(format!("{label} {v:>4}: Fisher trace {m:.4} +- {ci:.4}"));
        }
    }
    Ok(lines)
}

#[derive(Serialize)]
struct KramersSummary {
    barrier: f64,
    neg_eigenvalue: f64,
    slope: f64,
    intercept: f64,
}

fn kramers(cfg: &Config, out: &mut Outputs) -> Result<Vec<String>, CliError> {
    let c = &cfg.kramers;
    if c.temperatures.len() < 2 {
        return Err(bad("kramers needs at least two temperatures"));
    }
    let dw = DoubleWell { height: c.height };
    let bent = BentDoubleWell { height: c.height, stiffness: c.stiffness, bend: c.bend };
    let (l, w_star, basin): (&dyn ScalarLoss, Vec<f64>, Region) = match c.landscape {
        Landscape::DoubleWell => (&dw, vec![1.0], Region::Interval { lo: 0.0, hi: f64::INFINITY }),
        Landscape::BentDoubleWell => {
            (&bent, vec![1.0, 0.0], Region::HalfSpace { normal: vec![-1.0, 0.0], offset: 0.0 })
        }
    };
    let seed = Seed(cfg.seed);
    let stats = c
        .temperatures
        .iter()
        .enumerate()
        .map(|(i, &t)| escape_time_mc(l, &w_star, &basin, t, c.eta, c.runs, c.max_steps, seed.derive(i as u64)))
        .collect::<iw_core::Result<Vec<_>>>()?;
    out.write(
        "kramers.csv",
        csv_string(
            &["temperature", "inv_temperature", "runs", "censored", "mean_steps", "mean_time", "log_mean_time", "predicted_time"],
            stats.iter().map(|s| {
                vec![
                    s.temperature.to_string(),
                    (1.0 / s.temperature).to_string(),
                    c.runs.to_string(),
                    s.censored.to_string(),
                    s.mean_steps.to_string(),
                    s.mean_time.to_string(),
                    s.mean_time.ln().to_string(),
                    s.predicted_kramers.to_string(),
                ]
            }),
        )?,
    )?;
    let x: Vec<f64> = stats.iter().map(|s| 1.0 / s.temperature).collect();
    let y: Vec<f64> = stats.iter().map(|s| s.mean_time.ln()).collect();
    let (slope, intercept) = linear_fit(&x, &y);
    let s = KramersSummary { barrier: stats[0].barrier, neg_eigenvalue: stats[0].neg_eigenvalue, slope, intercept };
    out.write("kramers.json", serde_json::to_string_pretty(&s).map_err(iw_core::Error::from)? + "\n")?;
    let mut lines = vec![format!("barrier {:.6}, saddle eigenvalue {:.6}", s.barrier, s.neg_eigenvalue)];
    for st in &stats {
        lines.push(format!(
            "T = {}: mean exit time {:.4} ({} censored), Kramers {:.4}",
            st.temperature, st.mean_time, st.censored, st.predicted_kramers
        ));
    }
    lines.push(format!("slope of log time against 1/T: {slope:.5} (barrier {:.5})", s.barrier));
    Ok(lines)
}

pub fn parse_layer(s: &str) -> Result<LayerId, CliError> {
    if s == "output" {
        return Ok(LayerId::Output);
    }
    s.strip_prefix("hidden-")
        .and_then(|i| i.parse().ok())
        .map(LayerId::Hidden)
        .ok_or_else(|| bad(format!("layer `{s}`: expected `hidden-<i>` or `output`")))
}

fn effective_info(cfg: &Config, out: &mut Outputs) -> Result<Vec<String>, CliError> {
    let c = &cfg.effective_info;
    if c.betas.is_empty() || c.probes == 0 || c.mc_samples < 2 || !(c.mc_damping > 0.0) {
        return Err(bad("effective_info needs betas, probes, at least two MC samples and a positive mc_damping"));
    }
    let layers = c.layers.iter().map(|s| parse_layer(s).map(|l| (s.as_str(), l))).collect::<Result<Vec<_>, _>>()?;
    let damping = c.damping.map_or(Damping::Auto, Damping::Fixed);
    let seed = Seed(cfg.seed);
    let spec = ModelSpec::classifier(c.sizes.clone(), Activation::Tanh)?;
    let data = make_dataset_2d_binary(c.n, seed.derive(0))?;
    let w0 = spec.init_weights(seed.derive(1));
    let w = sgd_train(&spec, &data, &TrainConfig::sgd(c.eta, c.batch_size, c.steps, seed.derive(2)), &w0)?.final_weights();
    let f = model_fisher(&spec, &w, data.inputs())?;
    let probes: Vec<Tensor> = make_dataset_2d_binary(c.probes.max(2), seed.derive(3))?
        .inputs()
        .iter_rows()
        .take(c.probes)
        .map(|r| Tensor::vector(r.to_vec()))
        .collect::<iw_core::Result<_>>()?;
    let mut info = Vec::new();
    let mut per_probe = Vec::new();
    let mut mc = Vec::new();
    let mut lines = vec![format!("train accuracy {:.3}; {} probes", accuracy(&spec, &w, &data)?, probes.len())];
    for &(name, layer) in &layers {
        for &beta in &c.betas {
            let r = effective_mi(&spec, &w, &f, beta, &probes, layer, c.entropy_x, damping)?;
            info.push(vec![
                name.to_string(),
                beta.to_string(),
                r.delta_i.to_string(),
                r.i_eff.map_or(String::new(), |v| v.to_string()),
                r.clamped.to_string(),
                r.weight_damping.to_string(),
                r.activation_damping.to_string(),
            ]);
            for (i, ld) in r.logdets.iter().enumerate() {
                per_probe.push(vec![name.to_string(), beta.to_string(), i.to_string(), ld.to_string()]);
            }
            lines.push(format!("{name:>9} beta {beta:<6}: delta-I {:.4}", r.delta_i));
        }
        let x = &probes[0];
        let mc_damping = Damping::Fixed(c.mc_damping);
        let samples =
            perturbed_activations(&spec, &w, &f, c.mc_beta, x, layer, c.mc_samples, seed.derive(4), mc_damping)?;
        let lin = linearized_covariance(&spec, &w, &f, c.mc_beta, x, layer, mc_damping)?;
        let err = relative_cov_error(&samples, &lin);
        mc.push(vec![name.to_string(), c.mc_beta.to_string(), c.mc_samples.to_string(), err.to_string()]);
        lines.push(format!("{name:>9}: MC covariance relative error {err:.4} at beta {}", c.mc_beta));
    }
    let header = ["layer", "beta", "delta_i", "i_eff", "clamped", "weight_damping", "activation_damping"];
    out.write("effective_info.csv", csv_string(&header, info)?)?;
    out.write("effective_probes.csv", csv_string(&["layer", "beta", "probe", "logdet"], per_probe)?)?;
    out.write("effective_mc.csv", csv_string(&["layer", "beta", "samples", "rel_error"], mc)?)?;
    Ok(lines)
}

/// `|C_emp - C_lin|_F / |C_lin|_F` for the unbiased sample covariance.
pub fn relative_cov_error(samples: &[Tensor], lin: &Matrix) -> f64 {
    let m = samples.len();
    let d = lin.nrows();
    let mean: Vec<f64> = (0..d).map(|i| samples.iter().map(|s| s.data()[i]).sum::<f64>() / m as f64).collect();
    let emp = Matrix::from_fn(d, d, |i, j| {
        samples.iter().map(|s| (s.data()[i] - mean[i]) * (s.data()[j] - mean[j])).sum::<f64>() / (m - 1) as f64
    });
    (emp - lin).norm() / lin.norm()
}
