use std::fs;

use allo_core::metrics::MetricsLog;
use allo_core::trainer::{metrics_header, TrainConfig};
use allo_harness::aggregate::{AGGREGATE_COLUMNS, COMPARISON_COLUMNS};
use allo_harness::experiments::{run_experiment_with, RunOptions, EIGENVALUE_ERROR};
use allo_harness::{run_experiment, ExperimentId, ExperimentSpec, HarnessError, RunCache};

fn small(id: ExperimentId, out: &std::path::Path) -> ExperimentSpec {
    let mut spec = ExperimentSpec::preset(id);
    spec.maps = vec!["corridor-5".into()];
    spec.seeds = vec![0, 1];
    spec.samples = 2000;
    spec.out = out.to_path_buf();
    spec.train = TrainConfig { d: 3, hidden: vec![8], steps: 60, eval_every: 20, ..spec.train };
    spec
}

#[test]
fn equilibria_summary_reports_tiny_residuals() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = ExperimentSpec::preset(ExperimentId::Equilibria);
    spec.out = dir.path().to_path_buf();
    let report = run_experiment(&spec).unwrap();
    assert!(report.summary.get_f64("max_residual").unwrap() < 1e-8);
    assert_eq!(report.summary.get("selections_checked"), Some("394"));
    let table = MetricsLog::read_csv(dir.path().join("equilibria.csv")).unwrap();
    assert_eq!(table.len(), 394);
    for name in ["corridor-2", "ring-8"] {
        assert!(dir.path().join(format!("maps/{name}.txt")).exists());
        let states = MetricsLog::read_csv(dir.path().join(format!("oracle/{name}-states.csv"))).unwrap();
        assert_eq!(states.header(), ["state", "x", "y"]);
    }
}

#[test]
fn stability_certifies_every_unsorted_selection() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = ExperimentSpec::preset(ExperimentId::Stability);
    spec.out = dir.path().to_path_buf();
    spec.seeds = vec![0, 1, 2];
    let report = run_experiment_with(&spec, &RunOptions { quiet: true, cache: None }).unwrap();
    let s = &report.summary;
    assert_eq!(s.get("unsorted_selections"), s.get("certified_unstable"));
    assert_eq!(s.get("sorted_with_negative_witness"), Some("0"));
    assert!(s.get_f64("max_witness_residual").unwrap() < 1e-8);
    assert_eq!(s.get("perturbed_identity_stayed"), Some("15/15"));
    assert_eq!(s.get("basin.ring-8.d3"), Some("3/3"));
    let traj = MetricsLog::read_csv(dir.path().join("runs/ring-8/d3/seed-2.csv")).unwrap();
    assert_eq!(traj.header()[0], "iteration");
}

#[test]
fn neural_experiments_write_figure_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let cache = RunCache::new();
    let options = RunOptions { quiet: true, cache: Some(&cache) };

    let suite = run_experiment_with(&small(ExperimentId::EnvSuite, &dir.path().join("suite")), &options).unwrap();
    assert_eq!(cache.len(), 4);
    assert_eq!(suite.comparisons.len(), 1);
    let agg = MetricsLog::read_csv(dir.path().join("suite/aggregate.csv")).unwrap();
    assert_eq!(agg.header(), AGGREGATE_COLUMNS);
    assert_eq!(agg.len(), 2 * 4);
    let cmp = MetricsLog::read_csv(dir.path().join("suite/comparisons.csv")).unwrap();
    assert_eq!(cmp.header(), COMPARISON_COLUMNS);
    let run = MetricsLog::read_csv(dir.path().join("suite/runs/corridor-5/ggdo/seed-1.csv")).unwrap();
    assert_eq!(run.header(), metrics_header(3).as_slice());

    // The eigenvalue experiment reuses both arms and adds its error column.
    let eig = small(ExperimentId::EigenvalueAccuracy, &dir.path().join("eig"));
    let report = run_experiment_with(&eig, &options).unwrap();
    assert_eq!(cache.len(), 4);
    assert_eq!(report.comparisons[0].metric, EIGENVALUE_ERROR);
    let agg = MetricsLog::read_csv(dir.path().join("eig/aggregate.csv")).unwrap();
    assert!(agg.rows().iter().any(|r| r[2] == EIGENVALUE_ERROR.into()));
    let allo = report.arm("corridor-5", "allo").unwrap();
    assert!(allo.final_values(EIGENVALUE_ERROR).iter().all(|v| v.is_finite() && *v >= 0.0));

    let sweep = run_experiment_with(&small(ExperimentId::BarrierSweep, &dir.path().join("sweep")), &options).unwrap();
    assert_eq!(sweep.arms.len(), 3);
    assert!(sweep.summary.get_f64("spread.corridor-5").unwrap() >= 0.0);
    // b0 = 2 is the default arm already trained above
    assert_eq!(cache.len(), 4 + 4);
}

#[test]
fn permutation_experiment_tabulates_events() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = small(ExperimentId::Permutation, dir.path());
    spec.train.permute_every = 20;
    spec.train.eval_every = 10;
    let report = run_experiment_with(&spec, &RunOptions { quiet: true, cache: None }).unwrap();
    let events = report.table("permutation_events").unwrap();
    // steps 60, events at 20 and 40, two seeds
    assert_eq!(events.len(), 4);
    assert!(dir.path().join("permutation_events.csv").exists());
    assert!(report.summary.get("recovered_seeds.corridor-5").is_some());
}

#[test]
fn failures_are_recorded_and_total_failure_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = small(ExperimentId::EnvSuite, dir.path());
    spec.train.learning_rate = 1e12;
    let err = run_experiment_with(&spec, &RunOptions { quiet: true, cache: None }).unwrap_err();
    assert!(matches!(err, HarnessError::AllRunsFailed(4)));
    assert_eq!(err.exit_code(), 4);

    // Only the ALLO arm diverges when the baseline barrier is small and the
    // ALLO barrier is huge.
    let dir = tempfile::tempdir().unwrap();
    let mut spec = small(ExperimentId::EnvSuite, dir.path());
    spec.train.learning_rate = 0.01;
    spec.train.b0 = 1e9;
    spec.train.b_max = 1e9;
    spec.sweep.baseline_b = 0.1;
    let report = run_experiment_with(&spec, &RunOptions { quiet: true, cache: None }).unwrap();
    assert!(!report.failures.is_empty());
    assert!(report.failures.iter().all(|f| f.arm == "allo"), "{:?}", report.failures);
    let failures = fs::read_to_string(dir.path().join("failures.csv")).unwrap();
    assert!(failures.starts_with("map,arm,seed,message"));
    assert_eq!(report.summary.get("failed_runs"), Some(report.failures.len().to_string().as_str()));
}

#[test]
fn invalid_specs_are_rejected_before_running() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = small(ExperimentId::EnvSuite, dir.path());
    spec.seeds.clear();
    assert_eq!(run_experiment(&spec).unwrap_err().exit_code(), 2);
    let mut spec = small(ExperimentId::EnvSuite, dir.path());
    spec.maps = vec!["no-such-map".into()];
    assert_eq!(run_experiment(&spec).unwrap_err().exit_code(), 3);
    let mut spec = small(ExperimentId::EnvSuite, dir.path());
    spec.train.d = 50;
    assert_eq!(run_experiment(&spec).unwrap_err().exit_code(), 2);
}
