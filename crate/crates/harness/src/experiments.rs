//! Running experiments end to end: per-run jobs, on-disk artifacts and the
//! aggregate report.

use std::collections::HashMap;
use std::fmt::Display;
use std::fs;
use std::path::Path;
use std::sync::{Arc, Mutex, OnceLock};

use allo_core::dynamics::{
    all_witnesses, dual_block_witnesses, perturbation_stability_test, run_ascent_descent, verify_equilibrium,
    DynamicsConfig,
};
use allo_core::gridworld::{bundled_map, resolve_map, sample_transitions_from, BUNDLED_MAPS};
use allo_core::metrics::{Cell, MetricsLog};
use allo_core::trainer::{train, Objective, TrainConfig};
use allo_core::{build_transition_model, eigendecompose, EigenSystem, GridWorld, TransitionModel};
use rayon::prelude::*;

use crate::aggregate::{aggregate, comparison_log, push_curve, Comparison, Stats, AGGREGATE_COLUMNS};
use crate::config::{ExperimentId, ExperimentSpec};
use crate::error::HarnessError;

/// Similarity a permuted run must regain within one period.
pub const RECOVERY_THRESHOLD: f64 = 0.9;

/// An environment with its exact spectrum.
#[derive(Debug, Clone)]
pub struct MapContext {
    pub label: String,
    pub world: GridWorld,
    pub model: TransitionModel,
    pub sys: EigenSystem,
}

impl MapContext {
    pub fn load(name_or_path: &str) -> Result<Self, HarnessError> {
        let world = resolve_map(name_or_path)?;
        let label = if BUNDLED_MAPS.iter().any(|(n, _)| *n == name_or_path) {
            name_or_path.to_string()
        } else {
            let stem = Path::new(name_or_path).file_stem().map(|s| s.to_string_lossy().into_owned());
            sanitize(&stem.unwrap_or_else(|| name_or_path.to_string()))
        };
        Self::from_world(label, world)
    }

    pub fn bundled(name: &str) -> Result<Self, HarnessError> {
        Self::from_world(name.to_string(), bundled_map(name)?)
    }

    fn from_world(label: String, world: GridWorld) -> Result<Self, HarnessError> {
        let model = build_transition_model(&world);
        let sys = eigendecompose(model.laplacian().view())?;
        Ok(MapContext { label, world, model, sys })
    }

    /// Map text, eigenvalues, eigenvectors and state coordinates.
    pub fn write_artifacts(&self, out: &Path) -> Result<(), HarnessError> {
        let maps = out.join("maps");
        let oracle = out.join("oracle");
        create_dir(&maps)?;
        create_dir(&oracle)?;
        let map_path = maps.join(format!("{}.txt", self.label));
        fs::write(&map_path, self.world.to_map_string()).map_err(|e| HarnessError::io(&map_path, e))?;
        self.sys.write_eigenvalues_csv(oracle.join(format!("{}-eigenvalues.csv", self.label)))?;
        self.sys.write_eigenvectors_csv(oracle.join(format!("{}-eigenvectors.csv", self.label)))?;
        let mut states = MetricsLog::new(["state", "x", "y"]);
        for (s, &(x, y)) in self.world.all_coords().iter().enumerate() {
            states.push(vec![s.into(), x.into(), y.into()])?;
        }
        states.write_csv(oracle.join(format!("{}-states.csv", self.label)))?;
        Ok(())
    }
}

fn sanitize(s: &str) -> String {
    s.chars().map(|c| if c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.') { c } else { '_' }).collect()
}

fn create_dir(path: &Path) -> Result<(), HarnessError> {
    fs::create_dir_all(path).map_err(|e| HarnessError::io(path, e))
}

/// Memoized training runs keyed by map, sample count and full config.
///
/// Experiments that share an arm (the default ALLO arm appears in several)
/// reuse a single run when they share a cache.
#[derive(Debug, Default)]
pub struct RunCache {
    entries: Mutex<HashMap<String, Arc<OnceLock<Result<Arc<MetricsLog>, String>>>>>,
}

impl RunCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.lock().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn get_or_run(
        &self,
        key: String,
        run: impl FnOnce() -> Result<MetricsLog, HarnessError>,
    ) -> Result<Arc<MetricsLog>, String> {
        let cell = self.entries.lock().expect("cache lock").entry(key).or_default().clone();
        cell.get_or_init(|| run().map(Arc::new).map_err(|e| e.to_string())).clone()
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions<'a> {
    pub quiet: bool,
    pub cache: Option<&'a RunCache>,
}

/// Ordered `key = value` lines.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Summary {
    entries: Vec<(String, String)>,
}

impl Summary {
    pub fn push(&mut self, key: impl Into<String>, value: impl Display) {
        self.entries.push((key.into(), value.to_string()));
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn get_f64(&self, key: &str) -> Option<f64> {
        self.get(key)?.parse().ok()
    }

    pub fn entries(&self) -> &[(String, String)] {
        &self.entries
    }

    pub fn to_text(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn parse(text: &str) -> Self {
        let entries = text
            .lines()
            .filter_map(|l| l.split_once(" = "))
            .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
            .collect();
        Summary { entries }
    }
}

/// All seeds of one training configuration on one map.
#[derive(Debug, Clone)]
pub struct ArmRecord {
    pub map: String,
    pub arm: String,
    pub config: TrainConfig,
    /// Seeds that finished, aligned with `logs`.
    pub seeds: Vec<u64>,
    pub logs: Vec<Arc<MetricsLog>>,
}

impl ArmRecord {
    /// Value of `column` at the last checkpoint of every finished seed.
    pub fn final_values(&self, column: &str) -> Vec<f64> {
        self.logs.iter().filter_map(|l| l.last(column)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunFailure {
    pub map: String,
    pub arm: String,
    pub seed: u64,
    pub message: String,
}

#[derive(Debug, Clone)]
pub struct AggregateReport {
    pub id: ExperimentId,
    pub arms: Vec<ArmRecord>,
    pub comparisons: Vec<Comparison>,
    /// Experiment-specific tables, written as `<name>.csv`.
    pub tables: Vec<(String, MetricsLog)>,
    pub summary: Summary,
    pub failures: Vec<RunFailure>,
    pub runs: usize,
}

impl AggregateReport {
    pub fn arm(&self, map: &str, arm: &str) -> Option<&ArmRecord> {
        self.arms.iter().find(|a| a.map == map && a.arm == arm)
    }

    pub fn table(&self, name: &str) -> Option<&MetricsLog> {
        self.tables.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Across-seed curves of `avg_cos_sim` (and any extra metrics) per arm.
    pub fn aggregate_log(&self, metrics: &[&str]) -> Result<MetricsLog, HarnessError> {
        let mut log = MetricsLog::new(AGGREGATE_COLUMNS);
        for arm in &self.arms {
            let logs: Vec<&MetricsLog> = arm.logs.iter().map(AsRef::as_ref).collect();
            for metric in metrics {
                if logs.first().is_some_and(|l| l.column_index(metric).is_some()) {
                    push_curve(&mut log, &arm.map, &arm.arm, metric, &aggregate(&logs, metric)?);
                }
            }
        }
        Ok(log)
    }
}

pub fn run_experiment(spec: &ExperimentSpec) -> Result<AggregateReport, HarnessError> {
    run_experiment_with(spec, &RunOptions::default())
}

/// Run `spec`, writing every artifact below `spec.out`.
pub fn run_experiment_with(spec: &ExperimentSpec, options: &RunOptions) -> Result<AggregateReport, HarnessError> {
    spec.validate()?;
    let maps = spec.maps.iter().map(|m| MapContext::load(m)).collect::<Result<Vec<_>, _>>()?;
    create_dir(&spec.out)?;
    for ctx in &maps {
        ctx.write_artifacts(&spec.out)?;
    }
    let spec_path = spec.out.join("spec.toml");
    fs::write(&spec_path, spec.to_toml_string()).map_err(|e| HarnessError::io(&spec_path, e))?;

    let report = match spec.id {
        ExperimentId::Equilibria => equilibria(spec, &maps)?,
        ExperimentId::Stability => stability(spec, &maps, options)?,
        _ => neural(spec, &maps, options)?,
    };
    if report.runs > 0 && report.failures.len() == report.runs {
        return Err(HarnessError::AllRunsFailed(report.runs));
    }
    write_report(&report, &spec.out)?;
    Ok(report)
}

fn write_report(report: &AggregateReport, out: &Path) -> Result<(), HarnessError> {
    if !report.arms.is_empty() {
        let mut metrics = vec!["avg_cos_sim"];
        if report.id == ExperimentId::EigenvalueAccuracy {
            metrics.push(EIGENVALUE_ERROR);
        }
        report.aggregate_log(&metrics)?.write_csv(out.join("aggregate.csv"))?;
    }
    if !report.comparisons.is_empty() {
        comparison_log(&report.comparisons).write_csv(out.join("comparisons.csv"))?;
    }
    for (name, table) in &report.tables {
        table.write_csv(out.join(format!("{name}.csv")))?;
    }
    if !report.failures.is_empty() {
        let mut log = MetricsLog::new(["map", "arm", "seed", "message"]);
        for f in &report.failures {
            let message = f.message.replace([',', '\n'], ";");
            log.push(vec![f.map.clone().into(), f.arm.clone().into(), (f.seed as usize).into(), message.into()])?;
        }
        log.write_csv(out.join("failures.csv"))?;
    }
    let path = out.join("summary.txt");
    fs::write(&path, report.summary.to_text()).map_err(|e| HarnessError::io(&path, e))
}

/// All injective maps from `0..d` into `0..n`, in lexicographic order.
pub fn selections(n: usize, d: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut current = Vec::with_capacity(d);
    fn extend(n: usize, d: usize, current: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if current.len() == d {
            out.push(current.clone());
            return;
        }
        for k in 0..n {
            if !current.contains(&k) {
                current.push(k);
                extend(n, d, current, out);
                current.pop();
            }
        }
    }
    if d <= n {
        extend(n, d, &mut current, &mut out);
    }
    out
}

/// True when the selected eigenvalues equal the sorted ones position by
/// position, so the selection is the identity up to rotations within
/// eigenspaces.
pub fn is_sorted_equivalent(sys: &EigenSystem, selection: &[usize]) -> bool {
    let lam = sys.eigenvalues();
    selection.iter().enumerate().all(|(i, &p)| (lam[p] - lam[i]).abs() < 1e-6)
}

fn selection_label(selection: &[usize]) -> String {
    selection.iter().map(|s| (s + 1).to_string()).collect::<Vec<_>>().join("-")
}

fn equilibria(spec: &ExperimentSpec, maps: &[MapContext]) -> Result<AggregateReport, HarnessError> {
    let mut table = MetricsLog::new(["map", "d", "selection", "primal_residual", "dual_residual"]);
    let mut summary = Summary::default();
    summary.push("experiment", spec.id);
    let (mut checked, mut max_primal, mut max_dual) = (0usize, 0.0f64, 0.0f64);
    for ctx in maps {
        let l = ctx.model.laplacian().view();
        for &d in &spec.sweep.dims {
            let rows: Vec<_> = selections(ctx.sys.dim(), d)
                .into_par_iter()
                .map(|sel| verify_equilibrium(l, &ctx.sys, &sel, spec.dynamics.b0).map(|r| (sel, r)))
                .collect::<Result<_, _>>()?;
            for (sel, r) in rows {
                checked += 1;
                max_primal = max_primal.max(r.primal_inf);
                max_dual = max_dual.max(r.dual_inf);
                table.push(vec![
                    ctx.label.as_str().into(),
                    d.into(),
                    selection_label(&sel).into(),
                    r.primal_inf.into(),
                    r.dual_inf.into(),
                ])?;
            }
        }
    }
    summary.push("selections_checked", checked);
    summary.push("max_primal_residual", max_primal);
    summary.push("max_dual_residual", max_dual);
    summary.push("max_residual", max_primal.max(max_dual));
    Ok(AggregateReport {
        id: spec.id,
        arms: Vec::new(),
        comparisons: Vec::new(),
        tables: vec![("equilibria".into(), table)],
        summary,
        failures: Vec::new(),
        runs: 0,
    })
}

fn stability(spec: &ExperimentSpec, maps: &[MapContext], options: &RunOptions) -> Result<AggregateReport, HarnessError> {
    let b = spec.dynamics.b0;
    let mut witnesses = MetricsLog::new([
        "map",
        "d",
        "selection",
        "sorted_equivalent",
        "witnesses",
        "negative",
        "min_eta",
        "max_residual",
        "certifies_instability",
    ]);
    let mut perturbation = MetricsLog::new([
        "map",
        "d",
        "selection",
        "seed",
        "sorted_equivalent",
        "target_similarity",
        "sorted_similarity",
        "stayed",
        "departed",
    ]);
    let mut basin = MetricsLog::new(["map", "d", "seed", "converged", "iterations", "avg_cos_sim", "max_eig_error"]);
    let mut summary = Summary::default();
    summary.push("experiment", spec.id);
    summary.push("b", b);
    let mut failures = Vec::new();
    let mut runs = 0;
    let (mut unsorted, mut certified, mut sorted_negative, mut max_residual) = (0usize, 0usize, 0usize, 0.0f64);
    let (mut identity_runs, mut identity_stayed, mut unsorted_runs, mut unsorted_departed) = (0, 0, 0, 0);

    for ctx in maps {
        let l = ctx.model.laplacian().view();
        for &d in &spec.sweep.dims {
            if d > ctx.sys.dim() {
                continue;
            }
            // Witnesses for every selection of d eigenvectors.
            let rows: Vec<_> = selections(ctx.sys.dim(), d)
                .into_par_iter()
                .map(|sel| all_witnesses(l, &ctx.sys, &sel, b).map(|w| (sel, w)))
                .collect::<Result<_, _>>()?;
            for (sel, ws) in rows {
                let sorted = is_sorted_equivalent(&ctx.sys, &sel);
                let negative = ws.iter().filter(|w| w.certifies_instability()).count();
                let min_eta = ws.iter().filter(|w| w.conclusive).map(|w| w.eta).fold(f64::INFINITY, f64::min);
                let residual = ws.iter().map(|w| w.residual).fold(0.0f64, f64::max);
                max_residual = max_residual.max(residual);
                if sorted {
                    sorted_negative += (negative > 0) as usize;
                } else {
                    unsorted += 1;
                    certified += (negative > 0) as usize;
                }
                witnesses.push(vec![
                    ctx.label.as_str().into(),
                    d.into(),
                    selection_label(&sel).into(),
                    (sorted as usize).into(),
                    ws.len().into(),
                    negative.into(),
                    min_eta.into(),
                    residual.into(),
                    ((negative > 0) as usize).into(),
                ])?;
            }
            for i in 0..d {
                let identity: Vec<usize> = (0..d).collect();
                for w in dual_block_witnesses(l, &ctx.sys, &identity, i, b)? {
                    max_residual = max_residual.max(w.residual);
                }
            }

            // Perturbed equilibria: every ordering of the first d eigenvectors.
            let jobs: Vec<(Vec<usize>, u64)> = selections(d, d)
                .into_iter()
                .flat_map(|sel| spec.seeds.iter().map(move |&s| (sel.clone(), s)))
                .collect();
            let base = DynamicsConfig { d, ..spec.dynamics.clone() };
            let outcomes: Vec<_> = jobs
                .into_par_iter()
                .map(|(sel, seed)| {
                    let out = perturbation_stability_test(
                        l,
                        &ctx.sys,
                        &sel,
                        b,
                        spec.sweep.noise,
                        spec.sweep.perturb_steps,
                        seed,
                        &base,
                    );
                    (sel, seed, out)
                })
                .collect();
            for (sel, seed, out) in outcomes {
                runs += 1;
                let sorted = is_sorted_equivalent(&ctx.sys, &sel);
                let out = match out {
                    Ok(o) => o,
                    Err(e) => {
                        failures.push(RunFailure {
                            map: ctx.label.clone(),
                            arm: format!("perturb-d{d}-{}", selection_label(&sel)),
                            seed,
                            message: e.to_string(),
                        });
                        continue;
                    }
                };
                if sorted {
                    identity_runs += 1;
                    identity_stayed += out.stayed as usize;
                } else {
                    unsorted_runs += 1;
                    unsorted_departed += out.departed as usize;
                }
                perturbation.push(vec![
                    ctx.label.as_str().into(),
                    d.into(),
                    selection_label(&sel).into(),
                    (seed as usize).into(),
                    (sorted as usize).into(),
                    out.target_similarity.into(),
                    out.sorted_similarity.into(),
                    (out.stayed as usize).into(),
                    (out.departed as usize).into(),
                ])?;
            }

            // Random initializations.
            let dir = spec.out.join("runs").join(&ctx.label).join(format!("d{d}"));
            create_dir(&dir)?;
            let trajectories: Vec<_> = spec
                .seeds
                .par_iter()
                .map(|&seed| {
                    let config = DynamicsConfig { d, seed, ..spec.dynamics.clone() };
                    let traj = run_ascent_descent(l, &config);
                    if let Ok(t) = &traj {
                        t.write_csv(dir.join(format!("seed-{seed}.csv")))?;
                    }
                    if !options.quiet {
                        eprintln!("[{}] {} d={d} seed {seed} done", spec.id, ctx.label);
                    }
                    Ok::<_, HarnessError>((seed, traj))
                })
                .collect::<Result<_, _>>()?;
            let mut converged = 0;
            for (seed, traj) in trajectories {
                runs += 1;
                let traj = match traj {
                    Ok(t) => t,
                    Err(e) => {
                        failures.push(RunFailure {
                            map: ctx.label.clone(),
                            arm: format!("basin-d{d}"),
                            seed,
                            message: e.to_string(),
                        });
                        continue;
                    }
                };
                let last = traj.last();
                let errors =
                    allo_core::eigenvalue_errors(&last.state.duals.eigenvalue_estimates(), &ctx.sys).unwrap_or_default();
                let max_err = errors.iter().copied().fold(0.0f64, f64::max);
                let ok = traj.converged && last.avg_similarity >= 0.999;
                converged += ok as usize;
                basin.push(vec![
                    ctx.label.as_str().into(),
                    d.into(),
                    (seed as usize).into(),
                    (traj.converged as usize).into(),
                    traj.iterations.into(),
                    last.avg_similarity.into(),
                    max_err.into(),
                ])?;
            }
            summary.push(format!("basin.{}.d{d}", ctx.label), format!("{converged}/{}", spec.seeds.len()));
        }
    }
    summary.push("unsorted_selections", unsorted);
    summary.push("certified_unstable", certified);
    summary.push("sorted_with_negative_witness", sorted_negative);
    summary.push("max_witness_residual", max_residual);
    summary.push("perturbed_identity_stayed", format!("{identity_stayed}/{identity_runs}"));
    summary.push("perturbed_unsorted_departed", format!("{unsorted_departed}/{unsorted_runs}"));
    summary.push("failed_runs", failures.len());
    Ok(AggregateReport {
        id: spec.id,
        arms: Vec::new(),
        comparisons: Vec::new(),
        tables: vec![("witnesses".into(), witnesses), ("perturbation".into(), perturbation), ("basin".into(), basin)],
        summary,
        failures,
        runs,
    })
}

/// Column added to eigenvalue-accuracy logs: mean relative error of the
/// eigenvalue estimates over components 2..d.
pub const EIGENVALUE_ERROR: &str = "avg_rel_eig_error";

/// Named training configurations run by a neural experiment.
pub fn arms(spec: &ExperimentSpec) -> Vec<(String, TrainConfig)> {
    let base = &spec.train;
    let baseline = TrainConfig {
        objective: Objective::Ggdo,
        b0: spec.sweep.baseline_b,
        alpha_barrier: 0.0,
        b_max: base.b_max.max(spec.sweep.baseline_b),
        ..base.clone()
    };
    match spec.id {
        ExperimentId::BarrierSweep => spec
            .sweep
            .b0
            .iter()
            .map(|&b0| {
                let config = TrainConfig { objective: Objective::Allo, b0, b_max: base.b_max.max(b0), ..base.clone() };
                (format!("allo-b0-{b0}"), config)
            })
            .collect(),
        ExperimentId::EnvSuite | ExperimentId::EigenvalueAccuracy => {
            vec![("allo".into(), TrainConfig { objective: Objective::Allo, ..base.clone() }), ("ggdo".into(), baseline)]
        }
        ExperimentId::Ablation => {
            let mut out = Vec::new();
            for &objective in &spec.sweep.objectives {
                if objective.updates_barrier() {
                    for &alpha in &spec.sweep.alpha_barrier {
                        let config = TrainConfig { objective, alpha_barrier: alpha, ..base.clone() };
                        out.push((format!("{}-ab-{alpha}", objective.name()), config));
                    }
                } else {
                    out.push((objective.name().to_string(), TrainConfig { objective, alpha_barrier: 0.0, ..base.clone() }));
                }
            }
            out
        }
        ExperimentId::Permutation => {
            vec![("allo-permuted".into(), TrainConfig { objective: Objective::Allo, ..base.clone() })]
        }
        ExperimentId::Equilibria | ExperimentId::Stability => Vec::new(),
    }
}

/// Train one seed of one arm.
pub fn run_arm_seed(ctx: &MapContext, config: &TrainConfig, samples: usize, seed: u64) -> Result<MetricsLog, HarnessError> {
    let data = sample_transitions_from(&ctx.model, samples, seed, &ctx.label);
    let config = TrainConfig { seed, ..config.clone() };
    Ok(train(&ctx.world, &data, &config, &ctx.sys)?.log)
}

fn with_eigenvalue_error(log: &MetricsLog, sys: &EigenSystem, d: usize) -> MetricsLog {
    let mut header = log.header().to_vec();
    header.push(EIGENVALUE_ERROR.into());
    let mut out = MetricsLog::new(header);
    let objective = log.column_index("objective");
    let lam = sys.eigenvalues();
    for row in log.rows() {
        let uses_duals = objective.is_some_and(|i| row[i] == Cell::from(Objective::Allo.name()));
        let errors: Vec<f64> = (1..d)
            .filter(|&i| lam[i] > 0.0)
            .map(|i| {
                let estimate = if uses_duals {
                    -0.5 * cell(log, row, &format!("beta_{}", i + 1))
                } else {
                    cell(log, row, &format!("mc_eig_{}", i + 1))
                };
                (estimate - lam[i]).abs() / lam[i]
            })
            .collect();
        let mean = if errors.is_empty() { f64::NAN } else { errors.iter().sum::<f64>() / errors.len() as f64 };
        let mut row = row.clone();
        row.push(mean.into());
        out.push(row).expect("row matches header");
    }
    out
}

fn cell(log: &MetricsLog, row: &[Cell], name: &str) -> f64 {
    log.column_index(name).and_then(|i| row[i].as_f64()).unwrap_or(f64::NAN)
}

fn neural(spec: &ExperimentSpec, maps: &[MapContext], options: &RunOptions) -> Result<AggregateReport, HarnessError> {
    let arms = arms(spec);
    let local_cache = RunCache::new();
    let cache = options.cache.unwrap_or(&local_cache);

    let mut jobs = Vec::new();
    for (m, ctx) in maps.iter().enumerate() {
        for (a, (label, config)) in arms.iter().enumerate() {
            let dir = spec.out.join("runs").join(&ctx.label).join(label);
            create_dir(&dir)?;
            for &seed in &spec.seeds {
                jobs.push((m, a, seed, dir.clone()));
            }
            config.validate(ctx.world.num_states())?;
        }
    }
    let results: Vec<_> = jobs
        .par_iter()
        .map(|&(m, a, seed, ref dir)| {
            let ctx = &maps[m];
            let (label, config) = &arms[a];
            let key = cache_key(ctx, config, spec.samples, seed);
            let result = cache.get_or_run(key, || run_arm_seed(ctx, config, spec.samples, seed));
            let result = result.and_then(|log| {
                let log = if spec.id == ExperimentId::EigenvalueAccuracy {
                    Arc::new(with_eigenvalue_error(&log, &ctx.sys, config.d))
                } else {
                    log
                };
                log.write_csv(dir.join(format!("seed-{seed}.csv"))).map_err(|e| e.to_string())?;
                Ok(log)
            });
            if !options.quiet {
                let status = match &result {
                    Ok(log) => format!("avg_cos_sim {:.4}", log.last("avg_cos_sim").unwrap_or(f64::NAN)),
                    Err(e) => format!("failed: {e}"),
                };
                eprintln!("[{}] {} {label} seed {seed}: {status}", spec.id, ctx.label);
            }
            (m, a, seed, result)
        })
        .collect();

    let mut records: Vec<ArmRecord> = Vec::new();
    let mut failures = Vec::new();
    for ctx in maps {
        for (label, config) in &arms {
            records.push(ArmRecord {
                map: ctx.label.clone(),
                arm: label.clone(),
                config: config.clone(),
                seeds: Vec::new(),
                logs: Vec::new(),
            });
        }
    }
    for (m, a, seed, result) in results {
        match result {
            Ok(log) => {
                let rec = &mut records[m * arms.len() + a];
                rec.seeds.push(seed);
                rec.logs.push(log);
            }
            Err(message) => failures.push(RunFailure {
                map: maps[m].label.clone(),
                arm: arms[a].0.clone(),
                seed,
                message,
            }),
        }
    }

    let mut summary = Summary::default();
    summary.push("experiment", spec.id);
    summary.push("seeds", spec.seeds.len());
    summary.push("steps", spec.train.steps);
    summary.push("failed_runs", failures.len());
    for rec in &records {
        let finals = Stats::of(&rec.final_values("avg_cos_sim"));
        let key = format!("final_avg_cos_sim.{}.{}", rec.map, rec.arm);
        summary.push(format!("{key}.n"), finals.n);
        summary.push(format!("{key}.mean"), finals.mean);
        summary.push(format!("{key}.std"), finals.std);
    }

    let mut comparisons = Vec::new();
    let mut tables = Vec::new();
    match spec.id {
        ExperimentId::EnvSuite | ExperimentId::EigenvalueAccuracy => {
            let metric = if spec.id == ExperimentId::EnvSuite { "avg_cos_sim" } else { EIGENVALUE_ERROR };
            for ctx in maps {
                comparisons.push(compare(&records, &ctx.label, metric, "allo", "ggdo"));
            }
        }
        ExperimentId::Ablation => {
            let baseline = Objective::Ggdo.name();
            for ctx in maps {
                if records.iter().any(|r| r.map == ctx.label && r.arm == baseline) {
                    for (label, _) in arms.iter().filter(|(l, _)| l != baseline) {
                        comparisons.push(compare(&records, &ctx.label, "avg_cos_sim", label, baseline));
                    }
                }
            }
        }
        ExperimentId::BarrierSweep => {
            for ctx in maps {
                let means: Vec<f64> = records
                    .iter()
                    .filter(|r| r.map == ctx.label && !r.logs.is_empty())
                    .map(|r| Stats::of(&r.final_values("avg_cos_sim")).mean)
                    .collect();
                let spread = means.iter().copied().fold(f64::NEG_INFINITY, f64::max)
                    - means.iter().copied().fold(f64::INFINITY, f64::min);
                summary.push(format!("spread.{}", ctx.label), spread);
            }
        }
        ExperimentId::Permutation => {
            let (table, recovered) = permutation_events(&records, spec.train.permute_every)?;
            for (map, k, n) in recovered {
                summary.push(format!("recovered_seeds.{map}"), format!("{k}/{n}"));
            }
            tables.push(("permutation_events".to_string(), table));
        }
        ExperimentId::Equilibria | ExperimentId::Stability => unreachable!("tabular experiments"),
    }
    for c in &comparisons {
        if let Some(w) = c.test {
            let key = format!("welch.{}.{}.{}_vs_{}", c.map, c.metric, c.arm_a, c.arm_b);
            summary.push(format!("{key}.t"), w.t);
            summary.push(format!("{key}.p"), w.p);
            summary.push(format!("{key}.significant"), w.significant());
        }
    }
    Ok(AggregateReport { id: spec.id, arms: records, comparisons, tables, summary, failures, runs: jobs.len() })
}

fn cache_key(ctx: &MapContext, config: &TrainConfig, samples: usize, seed: u64) -> String {
    let config = TrainConfig { seed, ..config.clone() };
    let config = toml::to_string(&config).expect("train config is representable");
    format!("{}\n{}\n{samples}\n{config}", ctx.label, ctx.world.to_map_string())
}

fn compare(records: &[ArmRecord], map: &str, metric: &str, a: &str, b: &str) -> Comparison {
    let values = |arm: &str| {
        records.iter().find(|r| r.map == map && r.arm == arm).map(|r| r.final_values(metric)).unwrap_or_default()
    };
    let (va, vb) = (values(a), values(b));
    Comparison::new(map, metric, (a, &va), (b, &vb))
}

/// Per event: similarity before the permutation, the lowest and highest
/// logged similarity over the following period, and whether it regained
/// [`RECOVERY_THRESHOLD`].
fn permutation_events(
    records: &[ArmRecord],
    every: usize,
) -> Result<(MetricsLog, Vec<(String, usize, usize)>), HarnessError> {
    let mut table = MetricsLog::new([
        "map",
        "arm",
        "seed",
        "event",
        "step",
        "pre_similarity",
        "min_similarity",
        "max_similarity",
        "recovered",
    ]);
    let mut recovered_counts = Vec::new();
    for rec in records {
        let mut recovered_seeds = 0;
        for (seed, log) in rec.seeds.iter().zip(&rec.logs) {
            let outcome = recovery_after_events(log, every);
            for (k, ev) in outcome.iter().enumerate() {
                table.push(vec![
                    rec.map.as_str().into(),
                    rec.arm.as_str().into(),
                    (*seed as usize).into(),
                    (k + 1).into(),
                    ev.step.into(),
                    ev.pre.into(),
                    ev.min.into(),
                    ev.max.into(),
                    (ev.recovered as usize).into(),
                ])?;
            }
            recovered_seeds += (!outcome.is_empty() && outcome.iter().all(|e| e.recovered)) as usize;
        }
        recovered_counts.push((rec.map.clone(), recovered_seeds, rec.logs.len()));
    }
    Ok((table, recovered_counts))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PermutationEvent {
    pub step: usize,
    pub pre: f64,
    pub min: f64,
    pub max: f64,
    pub recovered: bool,
}

/// Evaluate every permutation event in a training log. The event at step
/// `k * every` is followed by the checkpoints in `(k * every, (k + 1) * every]`.
pub fn recovery_after_events(log: &MetricsLog, every: usize) -> Vec<PermutationEvent> {
    let (Some(steps), Some(sim)) = (log.column("step"), log.column("avg_cos_sim")) else {
        return Vec::new();
    };
    let last = steps.last().copied().unwrap_or(0.0) as usize;
    let mut events = Vec::new();
    if every == 0 {
        return events;
    }
    let mut event = every;
    while event < last {
        let pre = steps.iter().zip(&sim).filter(|(s, _)| **s as usize <= event).map(|(_, v)| *v).next_back();
        let window: Vec<f64> = steps
            .iter()
            .zip(&sim)
            .filter(|(s, _)| (**s as usize) > event && (**s as usize) <= event + every)
            .map(|(_, v)| *v)
            .collect();
        let min = window.iter().copied().fold(f64::INFINITY, f64::min);
        let max = window.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        events.push(PermutationEvent {
            step: event,
            pre: pre.unwrap_or(f64::NAN),
            min,
            max,
            recovered: max >= RECOVERY_THRESHOLD,
        });
        event += every;
    }
    events
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn selections_count_injections() {
        assert_eq!(selections(2, 2), vec![vec![0, 1], vec![1, 0]]);
        assert_eq!(selections(8, 3).len(), 8 * 7 * 6);
        assert!(selections(2, 3).is_empty());
    }

    #[test]
    fn summary_round_trips_through_text() {
        let mut s = Summary::default();
        s.push("a", 1.5);
        s.push("b.c", "x/y");
        let back = Summary::parse(&s.to_text());
        assert_eq!(back, s);
        assert_eq!(back.get_f64("a"), Some(1.5));
    }

    #[test]
    fn recovery_windows_follow_the_period() {
        let mut log = MetricsLog::new(["step", "avg_cos_sim"]);
        for (s, v) in [(0, 0.1), (10, 0.95), (20, 0.96), (30, 0.3), (40, 0.92), (50, 0.2), (60, 0.5)] {
            log.push(vec![(s as usize).into(), v.into()]).unwrap();
        }
        let events = recovery_after_events(&log, 20);
        assert_eq!(events.len(), 2);
        assert_eq!((events[0].step, events[0].pre, events[0].min, events[0].max), (20, 0.96, 0.3, 0.92));
        assert!(events[0].recovered);
        assert_eq!((events[1].step, events[1].min, events[1].max), (40, 0.2, 0.5));
        assert!(!events[1].recovered);
    }

    #[test]
    fn ablation_arms_share_the_fixed_baseline() {
        let spec = ExperimentSpec::preset(ExperimentId::Ablation);
        let labels: Vec<String> = arms(&spec).into_iter().map(|(l, _)| l).collect();
        assert_eq!(labels.iter().filter(|l| l.as_str() == "ggdo").count(), 1);
        assert_eq!(labels.len(), 3 * 3 + 1);
        assert!(labels.contains(&"allo-ab-0.01".to_string()));
    }

    #[test]
    fn cache_runs_each_key_once() {
        let cache = RunCache::new();
        let mut calls = 0;
        for _ in 0..3 {
            let log = cache
                .get_or_run("k".into(), || {
                    calls += 1;
                    Ok(MetricsLog::new(["step"]))
                })
                .unwrap();
            assert!(log.is_empty());
        }
        assert_eq!(calls, 1);
        assert_eq!(cache.len(), 1);
    }
}
