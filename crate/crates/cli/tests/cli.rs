use std::path::Path;
use std::process::{Command, Output};

use iwlab::config::{Config, Experiment};
use iwlab::report::{evaluate, Table};
use proptest::prelude::*;

fn iwlab(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_iwlab")).args(args).current_dir(cwd).output().unwrap()
}

fn write_config(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

const SMALL_TOY: &str = "experiment = \"fig3-toy-mi\"\n[toy]\nbatch_sizes = [100, 10]\ndatasets = 100\nsteps = 5000\nmixture_samples = 1000\n";
const SMALL_KRAMERS: &str = "experiment = \"kramers\"\n[kramers]\ntemperatures = [0.1, 0.08, 0.065]\nruns = 200\n";

fn read(p: impl AsRef<Path>) -> String {
    std::fs::read_to_string(p).unwrap()
}

#[test]
fn toy_run_writes_one_row_per_batch_size() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "toy.toml", SMALL_TOY);
    let out = iwlab(&["run", &cfg, "--out", "toy"], tmp.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let t = Table::read(&tmp.path().join("toy"), "toy_mi.csv").unwrap();
    assert_eq!(t.len(), 2);
    assert_eq!(t.reals("batch_size").unwrap(), vec![100.0, 10.0]);
    for col in ["shannon_mi_nats", "gaussian_iw_nats", "flat_fraction", "mean_fisher", "shannon_fisher_nats"] {
        assert!(t.reals(col).unwrap().iter().all(|v| v.is_finite()), "{col}");
    }
    let ends = Table::read(&tmp.path().join("toy"), "toy_endpoints.csv").unwrap();
    assert_eq!(ends.len(), 200);
    let manifest: serde_json::Value = serde_json::from_str(&read(tmp.path().join("toy/manifest.json"))).unwrap();
    assert_eq!(manifest["experiment"], "fig3-toy-mi");
    let files: Vec<&str> = manifest["files"].as_array().unwrap().iter().map(|v| v.as_str().unwrap()).collect();
    assert_eq!(
        files,
        ["manifest.json", "summary.txt", "toy_endpoints.csv", "toy_histogram.csv", "toy_mi.csv", "toy_report.json"]
    );
}

fn same_files(a: &Path, b: &Path) {
    let mut names: Vec<_> = std::fs::read_dir(a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    let mut other: Vec<_> = std::fs::read_dir(b).unwrap().map(|e| e.unwrap().file_name()).collect();
    other.sort();
    assert_eq!(names, other);
    for n in names {
        assert!(std::fs::read(a.join(&n)).unwrap() == std::fs::read(b.join(&n)).unwrap(), "{n:?} differs");
    }
}

#[test]
fn runs_are_byte_identical_across_thread_counts_and_manifest_reruns() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "k.toml", SMALL_KRAMERS);
    assert!(iwlab(&["run", &cfg, "--out", "a", "--jobs", "1"], tmp.path()).status.success());
    assert!(iwlab(&["run", &cfg, "--out", "b", "--jobs", "3"], tmp.path()).status.success());
    assert!(iwlab(&["run", "a/manifest.json", "--out", "c"], tmp.path()).status.success());
    same_files(&tmp.path().join("a"), &tmp.path().join("b"));
    same_files(&tmp.path().join("a"), &tmp.path().join("c"));
}

#[test]
fn seed_flag_overrides_config_and_names_default_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "k.toml", "experiment = \"kramers\"\nseed = 1\n[kramers]\ntemperatures = [0.1, 0.08]\nruns = 20\n");
    assert!(iwlab(&["run", &cfg, "--seed", "7"], tmp.path()).status.success());
    let dir = tmp.path().join("results/kramers-seed7");
    let manifest: serde_json::Value = serde_json::from_str(&read(dir.join("manifest.json"))).unwrap();
    assert_eq!(manifest["seed"], 7);
    assert_eq!(manifest["config"]["seed"], 7);
    assert!(manifest["config"].get("out").is_none());
}

#[test]
fn fisher_growth_schema() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "f.toml", "experiment = \"fig1-fisher-growth\"\n[fig1]\nsteps = 200\ncheckpoints = 4\n");
    assert!(iwlab(&["run", &cfg, "--out", "f"], tmp.path()).status.success());
    let t = Table::read(&tmp.path().join("f"), "fisher_logdet.csv").unwrap();
    assert_eq!(t.reals("step").unwrap(), vec![0.0, 50.0, 100.0, 150.0, 200.0]);
    for col in ["train_loss", "train_acc", "logdet_F"] {
        assert!(t.reals(col).unwrap().iter().all(|v| v.is_finite()));
    }
}

#[test]
fn report_passes_fails_on_tampering_and_rejects_missing_results() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "k.toml", SMALL_KRAMERS);
    assert!(iwlab(&["run", &cfg, "--out", "k"], tmp.path()).status.success());
    let ok = iwlab(&["report", "k"], tmp.path());
    let text = String::from_utf8_lossy(&ok.stdout).into_owned();
    assert_eq!(ok.status.code(), Some(0), "{text}");
    assert!(text.contains("PASS") && !text.contains("FAIL"));

    // Doubling every log time doubles the fitted slope.
    let path = tmp.path().join("k/kramers.csv");
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut r = csv::Reader::from_path(&path).unwrap();
    let header = r.headers().unwrap().clone();
    let col = header.iter().position(|h| h == "log_mean_time").unwrap();
    w.write_record(&header).unwrap();
    for rec in r.records() {
        let rec = rec.unwrap();
        let row: Vec<String> = rec
            .iter()
            .enumerate()
            .map(|(i, v)| if i == col { (2.0 * v.parse::<f64>().unwrap()).to_string() } else { v.to_string() })
            .collect();
        w.write_record(&row).unwrap();
    }
    std::fs::write(&path, w.into_inner().unwrap()).unwrap();
    let bad = iwlab(&["report", "k"], tmp.path());
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad.stdout).contains("FAIL  log mean exit time"));

    std::fs::create_dir(tmp.path().join("empty")).unwrap();
    assert_eq!(iwlab(&["report", "empty"], tmp.path()).status.code(), Some(2));
    std::fs::remove_file(tmp.path().join("k/kramers.json")).unwrap();
    assert_eq!(iwlab(&["report", "k"], tmp.path()).status.code(), Some(2));
}

#[test]
fn config_errors_exit_with_2() {
    let tmp = tempfile::tempdir().unwrap();
    let typo = write_config(tmp.path(), "t.toml", "experiment = \"kramers\"\n[kramers]\nrunz = 3\n");
    let out = iwlab(&["run", &typo], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("runz"));
    assert_eq!(iwlab(&["run", "missing.toml"], tmp.path()).status.code(), Some(2));
    let layer = write_config(tmp.path(), "l.toml", "experiment = \"effective-info\"\n[effective_info]\nlayers = [\"middle\"]\n");
    assert_eq!(iwlab(&["run", &layer, "--out", "l"], tmp.path()).status.code(), Some(2));
    assert_eq!(iwlab(&["frobnicate"], tmp.path()).status.code(), Some(2));
}

#[test]
fn numerical_failure_exits_with_3_and_records_the_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "d.toml", "experiment = \"fig1-fisher-growth\"\n[fig1]\neta = 1e8\nsteps = 50\n");
    let out = iwlab(&["run", &cfg, "--out", "d"], tmp.path());
    assert_eq!(out.status.code(), Some(3));
    let err: serde_json::Value = serde_json::from_str(&read(tmp.path().join("d/error.json"))).unwrap();
    assert_eq!(err["kind"], "Divergence");
    assert_eq!(err["exit_code"], 3);
    assert!(!tmp.path().join("d/manifest.json").exists());
}

#[test]
fn in_process_run_matches_report_expectations() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = Config::new(Experiment::Fig2Stability);
    cfg.fig2.steps = 200;
    let lines = iwlab::run_to_dir(&cfg, tmp.path()).unwrap();
    assert!(lines.iter().any(|l| l.contains("end-point distance")));
    let (exp, checks) = evaluate(tmp.path()).unwrap();
    assert_eq!(exp, Experiment::Fig2Stability);
    assert!(checks.iter().all(|c| c.pass), "{checks:?}");
}

#[test]
fn layer_names_parse() {
    assert!(iwlab::parse_layer("hidden-0").is_ok());
    assert!(iwlab::parse_layer("output").is_ok());
    for bad in ["hidden", "hidden-x", "Output", ""] {
        assert!(iwlab::parse_layer(bad).is_err(), "{bad}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn prop_config_round_trips_through_json(seed in any::<u64>(), runs in 1usize..1000, eta in 1e-4f64..1.0) {
        let mut cfg = Config::new(Experiment::Kramers);
        cfg.seed = seed;
        cfg.kramers.runs = runs;
        cfg.kramers.eta = eta;
        let text = serde_json::to_string(&serde_json::json!({ "config": cfg })).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("manifest.json");
        std::fs::write(&p, text).unwrap();
        prop_assert_eq!(Config::load(&p).unwrap(), cfg);
    }
}

#[test]
fn shipped_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        Config::load(&p).unwrap_or_else(|err| panic!("{}: {err}", p.display()));
        n += 1;
    }
    assert_eq!(n, 7);
}
