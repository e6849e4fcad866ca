//! Experiment configuration. Every section has defaults, so a config file
//! needs only `experiment = "..."`; unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    Fig1FisherGrowth,
    Fig2Stability,
    Fig3ToyMi,
    Fig4Sweeps,
    Kramers,
    EffectiveInfo,
}

impl Experiment {
    pub fn name(self) -> &'static str {
        match self {
            Experiment::Fig1FisherGrowth => "fig1-fisher-growth",
            Experiment::Fig2Stability => "fig2-stability",
            Experiment::Fig3ToyMi => "fig3-toy-mi",
            Experiment::Fig4Sweeps => "fig4-sweeps",
            Experiment::Kramers => "kramers",
            Experiment::EffectiveInfo => "effective-info",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub experiment: Experiment,
    #[serde(default)]
    pub seed: u64,
    /// Output directory; `--out` overrides it. Never echoed in the manifest.
    #[serde(default, skip_serializing)]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub fig1: Fig1Config,
    #[serde(default)]
    pub fig2: Fig2Config,
    #[serde(default)]
    pub toy: ToyConfig,
    #[serde(default)]
    pub sweeps: SweepConfig,
    #[serde(default)]
    pub kramers: KramersConfig,
    #[serde(default)]
    pub effective_info: EffectiveInfoConfig,
}

impl Config {
    pub fn new(experiment: Experiment) -> Self {
        Config {
            experiment,
            seed: 0,
            out: None,
            fig1: Fig1Config::default(),
            fig2: Fig2Config::default(),
            toy: ToyConfig::default(),
            sweeps: SweepConfig::default(),
            kramers: KramersConfig::default(),
            effective_info: EffectiveInfoConfig::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    /// Reads a TOML config, or the `config` echoed in a `manifest.json`.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        if path.extension().is_some_and(|e| e == "json") {
            let v: serde_json::Value = serde_json::from_str(&text).map_err(|e| CliError::Config(e.to_string()))?;
            let cfg = v.get("config").ok_or_else(|| CliError::Config(format!("{}: no `config` entry", path.display())))?;
            serde_json::from_value(cfg.clone()).map_err(|e| CliError::Config(e.to_string()))
        } else {
            Self::from_toml(&text)
        }
    }
}

/// Fisher log-determinant along training of an MLP on the two-moons task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Fig1Config {
    pub sizes: Vec<usize>,
    pub n: usize,
    pub eta: f64,
    pub batch_size: usize,
    pub steps: usize,
    /// Evenly spaced checkpoints after the initial one.
    pub checkpoints: usize,
    /// Fixed absolute damping of the log-determinant, shared by every checkpoint.
    pub damping: f64,
}

impl Default for Fig1Config {
    fn default() -> Self {
        Fig1Config { sizes: vec![2, 16, 16, 2], n: 500, eta: 0.02, batch_size: 32, steps: 2000, checkpoints: 20, damping: 1e-4 }
    }
}

/// Two runs from a shared start on datasets differing in one sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Fig2Config {
    pub sizes: Vec<usize>,
    pub n: usize,
    pub eta: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub snapshot_stride: usize,
    /// Index of the sample replaced in the second dataset.
    pub swap_index: usize,
}

impl Default for Fig2Config {
    fn default() -> Self {
        Fig2Config { sizes: vec![2, 16, 16, 2], n: 200, eta: 0.05, batch_size: 20, steps: 3000, snapshot_stride: 50, swap_index: 0 }
    }
}

/// Mean-regression information pipeline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyConfig {
    pub n: usize,
    pub c: f64,
    pub batch_sizes: Vec<usize>,
    pub datasets: usize,
    pub runs_per: usize,
    pub eta: f64,
    pub steps: usize,
    pub init_range: f64,
    pub polish_iters: usize,
    pub mixture_samples: usize,
    /// `log10` of the smallest and largest prior variance and the grid size.
    pub lambda2_log10_range: [f64; 2],
    pub lambda2_points: usize,
    /// Finite-difference shift for the stability estimate; 0 skips it.
    pub jacobian_delta: f64,
    pub histogram_bins: usize,
    pub histogram_range: f64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            n: 100,
            c: 3.0,
            batch_sizes: vec![100, 25, 10, 5],
            datasets: 200,
            runs_per: 1,
            eta: 0.2,
            steps: 50_000,
            init_range: 20.0,
            polish_iters: 200,
            mixture_samples: 10_000,
            lambda2_log10_range: [-2.0, 6.0],
            lambda2_points: 161,
            jacobian_delta: 1e-5,
            histogram_bins: 80,
            histogram_range: 20.0,
        }
    }
}

/// Fisher trace against class count and batch size on Gaussian blobs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub hidden: Vec<usize>,
    /// Samples of the 10-class generation; fewer classes keep their share.
    pub n: usize,
    pub input_dim: usize,
    pub eta: f64,
    pub steps: usize,
    pub seeds: usize,
    pub classes: Vec<usize>,
    pub class_batch_size: usize,
    pub batch_sizes: Vec<usize>,
    pub batch_classes: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            hidden: vec![32],
            n: 1000,
            input_dim: 2,
            eta: 0.3,
            steps: 2000,
            seeds: 10,
            classes: vec![2, 4, 6, 8, 10],
            class_batch_size: 32,
            batch_sizes: vec![8, 32, 128],
            batch_classes: 4,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Landscape {
    DoubleWell,
    BentDoubleWell,
}

/// Langevin exit times against temperature.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KramersConfig {
    pub landscape: Landscape,
    pub height: f64,
    /// Bent well only.
    pub stiffness: f64,
    pub bend: f64,
    pub temperatures: Vec<f64>,
    pub runs: usize,
    pub eta: f64,
    pub max_steps: usize,
}

impl Default for KramersConfig {
    fn default() -> Self {
        KramersConfig {
            landscape: Landscape::DoubleWell,
            height: 0.25,
            stiffness: 4.0,
            bend: 0.5,
            temperatures: vec![0.05, 0.04, 0.03],
            runs: 500,
            eta: 0.01,
            max_steps: 200_000_000,
        }
    }
}

/// Effective information of trained representations about the input.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EffectiveInfoConfig {
    pub sizes: Vec<usize>,
    pub n: usize,
    pub eta: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub betas: Vec<f64>,
    pub probes: usize,
    /// `"hidden-<i>"` or `"output"`.
    pub layers: Vec<String>,
    pub entropy_x: Option<f64>,
    /// Fixed damping; omitted means automatic.
    pub damping: Option<f64>,
    pub mc_samples: usize,
    pub mc_beta: f64,
    /// Fixed damping of the Monte-Carlo check, which keeps the weight
    /// perturbation inside the linear regime.
    pub mc_damping: f64,
}

impl Default for EffectiveInfoConfig {
    fn default() -> Self {
        EffectiveInfoConfig {
            sizes: vec![2, 16, 16, 2],
            n: 500,
            eta: 0.02,
            batch_size: 32,
            steps: 2000,
            betas: vec![0.01, 0.1, 1.0, 10.0],
            probes: 64,
            layers: vec!["hidden-0".into(), "hidden-1".into(), "output".into()],
            entropy_x: None,
            damping: None,
            mc_samples: 10_000,
            mc_beta: 1e-6,
            mc_damping: 1e-3,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_takes_defaults() {
        let c = Config::from_toml("experiment = \"fig3-toy-mi\"\n").unwrap();
        assert_eq!(c, Config::new(Experiment::Fig3ToyMi));
    }

    #[test]
    fn sections_override_fields() {
        let c = Config::from_toml("experiment = \"kramers\"\nseed = 4\n[kramers]\nruns = 10\nlandscape = \"bent-double-well\"\n")
            .unwrap();
        assert_eq!(c.seed, 4);
        assert_eq!(c.kramers.runs, 10);
        assert_eq!(c.kramers.landscape, Landscape::BentDoubleWell);
        assert_eq!(c.kramers.eta, KramersConfig::default().eta);
    }

    #[test]
    fn unknown_keys_and_experiments_are_errors() {
        assert!(Config::from_toml("experiment = \"fig9\"").is_err());
        assert!(Config::from_toml("experiment = \"kramers\"\n[kramers]\nrunz = 3\n").is_err());
        assert!(Config::from_toml("experiment = \"kramers\"\ncolour = 1\n").is_err());
        assert!(Config::from_toml("seed = 1").is_err());
    }

    #[test]
    fn json_echo_round_trips() {
        let mut c = Config::new(Experiment::Fig4Sweeps);
        c.out = Some("x".into());
        let v = serde_json::to_value(&c).unwrap();
        assert!(v.get("out").is_none());
        let back: Config = serde_json::from_value(v).unwrap();
        assert_eq!(back, Config { out: None, ..c });
    }
}
