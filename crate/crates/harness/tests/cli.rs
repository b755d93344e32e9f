use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use allo_core::metrics::MetricsLog;
use allo_core::trainer::metrics_header;
use allo_harness::aggregate::{AGGREGATE_COLUMNS, COMPARISON_COLUMNS};

fn allo(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_allo")).current_dir(dir).args(args).output().expect("binary runs")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

const SMALL_TRAIN: &str = "samples = 2000\n\n[train]\nd = 3\nhidden = [8]\nsteps = 60\neval_every = 20\n";

#[test]
fn oracle_writes_corridor_spectrum() {
    let dir = tempfile::tempdir().unwrap();
    let out = allo(dir.path(), &["oracle", "--map", "corridor-2", "--out", "eig.csv", "--quiet"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let log = MetricsLog::read_csv(dir.path().join("eig.csv")).unwrap();
    assert_eq!(log.header(), ["index", "eigenvalue"]);
    assert_eq!(log.column("eigenvalue").unwrap(), vec![0.0, 0.5]);
    let vectors = MetricsLog::read_csv(dir.path().join("eig-eigenvectors.csv")).unwrap();
    let e2 = vectors.column("e_2").unwrap();
    assert!(e2[0] * e2[1] < 0.0);
}

#[test]
fn usage_errors_exit_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let missing = allo(dir.path(), &["train", "--config", "missing.toml"]);
    assert_eq!(missing.status.code(), Some(2));
    assert!(stderr(&missing).contains("missing.toml"));
    assert_eq!(allo(dir.path(), &["oracle", "--map", "corridor-2", "--bogus"]).status.code(), Some(2));
    assert_eq!(allo(dir.path(), &["frobnicate"]).status.code(), Some(2));
    assert_eq!(allo(dir.path(), &["reproduce", "not-an-experiment"]).status.code(), Some(2));

    fs::write(dir.path().join("bad.toml"), "[train]\nsteps = \"lots\"\n").unwrap();
    let bad = allo(dir.path(), &["train", "--config", "bad.toml"]);
    assert_eq!(bad.status.code(), Some(2));
    assert!(stderr(&bad).contains("bad.toml"));

    fs::write(dir.path().join("mismatch.toml"), "id = \"ablation\"\n").unwrap();
    let mismatch = allo(dir.path(), &["reproduce", "equilibria", "--config", "mismatch.toml"]);
    assert_eq!(mismatch.status.code(), Some(2));
}

#[test]
fn bad_maps_exit_with_data_code() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("split.txt"), "#####\n#.#.#\n#####\n").unwrap();
    assert_eq!(allo(dir.path(), &["oracle", "--map", "split.txt"]).status.code(), Some(3));
    assert_eq!(allo(dir.path(), &["oracle", "--map", "nowhere.txt"]).status.code(), Some(3));
}

#[test]
fn divergent_training_exits_with_numeric_code() {
    let dir = tempfile::tempdir().unwrap();
    let config = format!("{SMALL_TRAIN}learning_rate = 1e12\n");
    fs::write(dir.path().join("hot.toml"), config).unwrap();
    let out = allo(dir.path(), &["train", "--map", "corridor-5", "--config", "hot.toml", "--quiet"]);
    assert_eq!(out.status.code(), Some(4), "{}", stderr(&out));
}

#[test]
fn dataset_round_trip_through_train() {
    let dir = tempfile::tempdir().unwrap();
    let gen = allo(dir.path(), &["gen-data", "--map", "corridor-5", "--samples", "500", "--seed", "3", "--out", "data/t.csv"]);
    assert!(gen.status.success(), "{}", stderr(&gen));
    let meta = fs::read_to_string(dir.path().join("data/t.csv.meta")).unwrap();
    assert!(meta.contains("seed = 3") && meta.contains("n = 500") && meta.contains("corridor-5"));

    fs::write(dir.path().join("small.toml"), SMALL_TRAIN).unwrap();
    let args = ["train", "--map", "corridor-5", "--config", "small.toml", "--data", "data/t.csv", "--quiet"];
    let train = allo(dir.path(), &[&args[..], &["--out", "run"]].concat());
    assert!(train.status.success(), "{}", stderr(&train));
    let log = MetricsLog::read_csv(dir.path().join("run/metrics.csv")).unwrap();
    assert_eq!(log.header(), metrics_header(3).as_slice());
    assert_eq!(log.len(), 4);
    assert!(dir.path().join("run/params.bin").exists());
    let summary = fs::read_to_string(dir.path().join("run/summary.txt")).unwrap();
    assert!(summary.contains("final_avg_cos_sim = "));
}

#[test]
fn aggregate_groups_runs_by_objective() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("small.toml"), SMALL_TRAIN).unwrap();
    let mut inputs = Vec::new();
    for objective in ["allo", "ggdo"] {
        for seed in ["1", "2"] {
            let out = format!("{objective}-{seed}");
            let args = [
                "train", "--map", "corridor-5", "--config", "small.toml", "--objective", objective, "--seed", seed,
                "--out", &out, "--quiet",
            ];
            assert!(allo(dir.path(), &args).status.success());
            inputs.push(format!("{out}/metrics.csv"));
        }
    }
    let mut args: Vec<&str> = vec!["aggregate", "--out", "agg.csv"];
    args.extend(inputs.iter().map(String::as_str));
    let out = allo(dir.path(), &args);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(String::from_utf8_lossy(&out.stdout).contains("allo vs ggdo"));
    let agg = MetricsLog::read_csv(dir.path().join("agg.csv")).unwrap();
    assert_eq!(agg.header(), AGGREGATE_COLUMNS);
    assert_eq!(agg.len(), 2 * 4);
    assert!(agg.column("n").unwrap().iter().all(|&n| n == 2.0));
    let cmp = MetricsLog::read_csv(dir.path().join("agg-comparisons.csv")).unwrap();
    assert_eq!(cmp.header(), COMPARISON_COLUMNS);

    // runs with different checkpoint grids cannot be aggregated
    fs::write(dir.path().join("other.toml"), SMALL_TRAIN.replace("eval_every = 20", "eval_every = 30")).unwrap();
    let args = ["train", "--map", "corridor-5", "--config", "other.toml", "--out", "odd", "--quiet"];
    assert!(allo(dir.path(), &args).status.success());
    let out = allo(dir.path(), &["aggregate", "--out", "bad.csv", &inputs[0], "odd/metrics.csv"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn reproduce_is_byte_identical_across_invocations() {
    let dir = tempfile::tempdir().unwrap();
    let config = format!("maps = [\"corridor-5\"]\nseeds = [0]\n{SMALL_TRAIN}");
    fs::write(dir.path().join("suite.toml"), config).unwrap();
    for out in ["a", "b"] {
        let args = ["reproduce", "env-suite", "--config", "suite.toml", "--seed", "4", "--seeds", "2", "--out", out, "--quiet"];
        let run = allo(dir.path(), &args);
        assert!(run.status.success(), "{}", stderr(&run));
    }
    for file in ["aggregate.csv", "comparisons.csv", "summary.txt", "runs/corridor-5/allo/seed-5.csv"] {
        let a = fs::read(dir.path().join("a").join(file)).unwrap();
        let b = fs::read(dir.path().join("b").join(file)).unwrap();
        assert_eq!(a, b, "{file}");
    }
    let summary = fs::read_to_string(dir.path().join("a/summary.txt")).unwrap();
    assert!(summary.contains("seeds = 2"));
}

#[test]
fn reproduce_equilibria_and_verify_succeed() {
    let dir = tempfile::tempdir().unwrap();
    let out = allo(dir.path(), &["reproduce", "equilibria", "--out", "eq", "--quiet"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let summary = fs::read_to_string(dir.path().join("eq/summary.txt")).unwrap();
    assert!(summary.contains("max_residual = "));

    let out = allo(dir.path(), &["verify", "--map", "ring-8", "--d", "3", "--out", "v"]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(fs::read_to_string(dir.path().join("v/summary.txt")).unwrap().contains("passed = true"));
}

#[test]
fn dynamics_writes_trajectory() {
    let dir = tempfile::tempdir().unwrap();
    let out = allo(dir.path(), &["dynamics", "--map", "corridor-2", "--d", "2", "--out", "dyn", "--quiet"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let log = MetricsLog::read_csv(dir.path().join("dyn/trajectory.csv")).unwrap();
    assert_eq!(&log.header()[..4], ["iteration", "primal_residual_inf", "dual_residual_inf", "avg_cos_sim"]);
    assert!(fs::read_to_string(dir.path().join("dyn/summary.txt")).unwrap().contains("converged = true"));
}
