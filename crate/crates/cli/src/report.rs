//! Trend checks evaluated on stored results. Only the CSV and JSON result
//! files are read, so edited results are judged as they stand.

use std::path::Path;

use serde::Deserialize;

use crate::config::Experiment;
use crate::stats::{increasing_up_to_one_inversion, mean_ci95, spearman};
use crate::CliError;

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    /// Stable key, e.g. `mi-monotone`.
    pub id: &'static str,
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

impl Check {
    fn new(id: &'static str, name: &str, pass: bool, detail: String) -> Self {
        Check { id, name: name.to_string(), pass, detail }
    }

    pub fn line(&self) -> String {
        format!("{}  {} ({})", if self.pass { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

/// Column-addressable CSV file.
pub struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    pub fn read(dir: &Path, name: &str) -> Result<Self, CliError> {
        let path = dir.join(name);
        let text = std::fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
        let mut rdr = csv::Reader::from_reader(text.as_bytes());
        let bad = |e: csv::Error| CliError::Config(format!("{}: {e}", path.display()));
        let header = rdr.headers().map_err(bad)?.iter().map(str::to_string).collect();
        let rows = rdr
            .records()
            .map(|r| r.map(|r| r.iter().map(str::to_string).collect()))
            .collect::<Result<_, _>>()
            .map_err(bad)?;
        Ok(Table { header, rows })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    fn index(&self, col: &str) -> Result<usize, CliError> {
        self.header.iter().position(|h| h == col).ok_or_else(|| CliError::Config(format!("missing column `{col}`")))
    }

    pub fn strings(&self, col: &str) -> Result<Vec<String>, CliError> {
        let i = self.index(col)?;
        Ok(self.rows.iter().map(|r| r[i].clone()).collect())
    }

    /// Column as reals; empty cells read as NaN.
    pub fn reals(&self, col: &str) -> Result<Vec<f64>, CliError> {
        self.strings(col)?
            .iter()
            .map(|s| {
                if s.is_empty() {
                    Ok(f64::NAN)
                } else {
                    s.parse().map_err(|_| CliError::Config(format!("column `{col}`: `{s}` is not a number")))
                }
            })
            .collect()
    }
}

#[derive(Deserialize)]
struct ManifestHead {
    experiment: Experiment,
}

/// Runs every check that applies to the experiment recorded in `dir`.
pub fn evaluate(dir: &Path) -> Result<(Experiment, Vec<Check>), CliError> {
    let path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
    let head: ManifestHead =
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let checks = match head.experiment {
        Experiment::Fig1FisherGrowth => fig1(dir)?,
        Experiment::Fig2Stability => fig2(dir)?,
        Experiment::Fig3ToyMi => fig3(dir)?,
        Experiment::Fig4Sweeps => fig4(dir)?,
        Experiment::Kramers => kramers(dir)?,
        Experiment::EffectiveInfo => effective_info(dir)?,
    };
    Ok((head.experiment, checks))
}

fn fig1(dir: &Path) -> Result<Vec<Check>, CliError> {
    let t = Table::read(dir, "fisher_logdet.csv")?;
    let steps = t.reals("step")?;
    let ld = t.reals("logdet_F")?;
    if ld.is_empty() {
        return Err(CliError::Config("fisher_logdet.csv has no rows".into()));
    }
    let rho = spearman(&steps, &ld);
    let (first, last) = (ld[0], ld[ld.len() - 1]);
    Ok(vec![
        Check::new("checkpoints", "at least 20 checkpoints after the start", ld.len() > 20, format!("{} rows", ld.len())),
        Check::new(
            "logdet-final-above-initial",
            "log-det at the final checkpoint exceeds its initial value",
            last > first,
            format!("{first:.4} -> {last:.4}"),
        ),
        Check::new("logdet-trend", "log-det increases with step (Spearman > 0.8)", rho > 0.8, format!("rho {rho:.4}")),
    ])
}

#[derive(Deserialize)]
struct PlaneFile {
    endpoint_distance: f64,
}

fn fig2(dir: &Path) -> Result<Vec<Check>, CliError> {
    let t = Table::read(dir, "plane_paths.csv")?;
    let run = t.strings("run")?;
    let (x, y) = (t.reals("x")?, t.reals("y")?);
    let first = |r: &str| run.iter().position(|v| v == r);
    let last = |r: &str| run.iter().rposition(|v| v == r);
    let starts = [first("a"), first("b")].iter().all(|i| i.is_some_and(|i| x[i] == 0.0 && y[i] == 0.0));
    let on_axis = last("a").is_some_and(|i| y[i].abs() <= 1e-9 * x[i].abs().max(1e-300));
    let path = dir.join("plane.json");
    let text = std::fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
    let plane: PlaneFile = serde_json::from_str(&text).map_err(|e| CliError::Config(e.to_string()))?;
    Ok(vec![
        Check::new("shared-start", "both paths start at the shared initial point", starts, "origin of the plane".into()),
        Check::new("axis-a", "run A ends on the first plane axis", on_axis, "Gram-Schmidt basis".into()),
        Check::new(
            "swap-moves-endpoint",
            "one replaced sample moves the end point",
            plane.endpoint_distance > 0.0,
            format!("distance {:.4e}", plane.endpoint_distance),
        ),
    ])
}

fn fig3(dir: &Path) -> Result<Vec<Check>, CliError> {
    let t = Table::read(dir, "toy_mi.csv")?;
    if t.is_empty() {
        return Err(CliError::Config("toy_mi.csv has no rows".into()));
    }
    let b = t.reals("batch_size")?;
    let mut order: Vec<usize> = (0..t.len()).collect();
    // Largest batch first: the direction in which B decreases.
    order.sort_by(|&i, &j| b[j].total_cmp(&b[i]));
    let pick = |col: &str| -> Result<Vec<f64>, CliError> {
        let v = t.reals(col)?;
        Ok(order.iter().map(|&i| v[i]).collect())
    };
    let (mi, giw, flat) = (pick("shannon_mi_nats")?, pick("gaussian_iw_nats")?, pick("flat_fraction")?);
    let (fisher, fci, sf) = (pick("mean_fisher")?, pick("fisher_ci95")?, pick("shannon_fisher_nats")?);
    let bs: Vec<f64> = order.iter().map(|&i| b[i]).collect();
    let mi_ok = mi.windows(2).all(|p| p[1] <= p[0]) && mi.iter().all(|&v| v <= mi[0]);
    let small_mi = mi[mi.len() - 1];
    let small_giw = giw[giw.len() - 1];
    let neg: Vec<f64> = fisher.iter().map(|f| -f).collect();
    let ratios: Vec<f64> = mi.iter().zip(&sf).map(|(m, s)| s / m).collect();
    Ok(vec![
        Check::new(
            "mi-monotone",
            "Shannon MI non-increasing as B decreases, largest at the largest B",
            mi_ok,
            format!("B {bs:?}: MI {}", fmt(&mi)),
        ),
        Check::new(
            "mi-order",
            "small-batch Shannon MI of order 1-10 nats",
            (0.1..=100.0).contains(&small_mi),
            format!("{small_mi:.4} nats"),
        ),
        Check::new(
            "giw-order",
            "small-batch Gaussian IW of order 1e3-1e4 nats (one order tolerance)",
            (100.0..=1e5).contains(&small_giw),
            format!("{small_giw:.4} nats"),
        ),
        Check::new(
            "flat-mass",
            "end-point mass in flat regions increases as B decreases",
            flat.windows(2).all(|p| p[1] >= p[0]) && flat[flat.len() - 1] > flat[0],
            format!("flat fraction {}", fmt(&flat)),
        ),
        Check::new(
            "fisher-trend",
            "mean Fisher non-increasing as B decreases",
            increasing_up_to_one_inversion(&neg, &fci),
            format!("mean F {}", fmt(&fisher)),
        ),
        Check::new(
            "stability-factor-2",
            "stability estimate within a factor 2 of the mixture MI",
            ratios.iter().all(|r| (0.5..=2.0).contains(r)),
            format!("ratio {}", fmt(&ratios)),
        ),
    ])
}

fn fmt(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.4}")).collect();
    format!("[{}]", parts.join(", "))
}

fn sweep_check(dir: &Path, file: &str, col: &str, id: &'static str, name: &str) -> Result<Check, CliError> {
    let t = Table::read(dir, file)?;
    let v = t.reals(col)?;
    let tr = t.reals("fisher_trace")?;
    let mut keys: Vec<f64> = v.clone();
    keys.sort_by(f64::total_cmp);
    keys.dedup();
    let (means, cis): (Vec<f64>, Vec<f64>) = keys
        .iter()
        .map(|k| {
            let xs: Vec<f64> = v.iter().zip(&tr).filter(|(a, _)| *a == k).map(|(_, b)| *b).collect();
            mean_ci95(&xs)
        })
        .unzip();
    Ok(Check::new(
        id,
        name,
        keys.len() >= 2 && increasing_up_to_one_inversion(&means, &cis),
        format!("{col} {keys:?}: mean trace {}", fmt(&means)),
    ))
}

fn fig4(dir: &Path) -> Result<Vec<Check>, CliError> {
    Ok(vec![
        sweep_check(dir, "sweep_classes.csv", "classes", "trace-vs-classes", "Fisher trace increases with class count")?,
        sweep_check(dir, "sweep_batch.csv", "batch_size", "trace-vs-batch", "Fisher trace increases with batch size")?,
    ])
}

#[derive(Deserialize)]
struct KramersFile {
    barrier: f64,
}

fn kramers(dir: &Path) -> Result<Vec<Check>, CliError> {
    let t = Table::read(dir, "kramers.csv")?;
    let x = t.reals("inv_temperature")?;
    let y = t.reals("log_mean_time")?;
    let censored: f64 = t.reals("censored")?.iter().sum();
    let path = dir.join("kramers.json");
    let text = std::fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
    let k: KramersFile = serde_json::from_str(&text).map_err(|e| CliError::Config(e.to_string()))?;
    let (slope, _) = iw_core::dynamics::linear_fit(&x, &y);
    let rel = (slope / k.barrier - 1.0).abs();
    Ok(vec![
        Check::new("uncensored", "every run left the basin", censored == 0.0, format!("{censored} censored")),
        Check::new(
            "kramers-slope",
            "log mean exit time against 1/T has slope = barrier within 10%",
            x.len() >= 2 && rel < 0.1,
            format!("slope {slope:.5}, barrier {:.5}, rel. error {rel:.4}", k.barrier),
        ),
    ])
}

fn effective_info(dir: &Path) -> Result<Vec<Check>, CliError> {
    let t = Table::read(dir, "effective_info.csv")?;
    let layer = t.strings("layer")?;
    let beta = t.reals("beta")?;
    let di = t.reals("delta_i")?;
    let mut names: Vec<String> = layer.clone();
    names.dedup();
    let mut worst = Vec::new();
    let monotone = names.iter().all(|n| {
        let mut pts: Vec<(f64, f64)> =
            layer.iter().zip(beta.iter().zip(&di)).filter(|(l, _)| *l == n).map(|(_, (b, d))| (*b, *d)).collect();
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        let ok = pts.len() >= 2 && pts.windows(2).all(|p| p[1].1 < p[0].1);
        if !ok {
            worst.push(n.clone());
        }
        ok
    });
    let mc = Table::read(dir, "effective_mc.csv")?;
    let errs = mc.reals("rel_error")?;
    Ok(vec![
        Check::new(
            "delta-i-vs-beta",
            "delta-I strictly decreases as beta increases",
            monotone,
            if worst.is_empty() { format!("{} layers", names.len()) } else { format!("fails for {worst:?}") },
        ),
        Check::new(
            "mc-covariance",
            "perturbed-activation covariance matches the linearization within 10%",
            !errs.is_empty() && errs.iter().all(|&e| e < 0.1),
            format!("relative errors {}", fmt(&errs)),
        ),
    ])
}
