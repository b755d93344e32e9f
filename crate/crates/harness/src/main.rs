use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use allo_core::dynamics::{run_ascent_descent, DynamicsConfig};
use allo_core::gridworld::sample_transitions_from;
use allo_core::metrics::MetricsLog;
use allo_core::trainer::{train, Objective, TrainConfig};
use allo_harness::aggregate::{aggregate, comparison_log, push_curve, Comparison, AGGREGATE_COLUMNS};
use allo_harness::experiments::{run_experiment_with, MapContext, RunOptions, Summary};
use allo_harness::verify::verify_map;
use allo_harness::{ExperimentId, ExperimentSpec, HarnessError};
use clap::{Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "allo", version, about = "Learn Laplacian representations of gridworlds")]
struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for sampling and initialization (first seed for `reproduce`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output file or directory, depending on the command.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Suppress progress output.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Sample transitions under the uniform random policy.
    GenData {
        #[arg(long)]
        map: String,
        #[arg(long, default_value_t = 200_000)]
        samples: usize,
    },
    /// Exact Laplacian spectrum of a map.
    Oracle {
        #[arg(long)]
        map: String,
    },
    /// Train a network on sampled transitions.
    Train {
        #[arg(long)]
        map: Option<String>,
        #[arg(long, value_parser = parse_objective)]
        objective: Option<Objective>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        d: Option<usize>,
        #[arg(long)]
        samples: Option<usize>,
        /// Load transitions from a dataset CSV instead of sampling.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Full-gradient ascent-descent on a tabular representation.
    Dynamics {
        #[arg(long)]
        map: Option<String>,
        #[arg(long)]
        d: Option<usize>,
        #[arg(long)]
        b0: Option<f64>,
        #[arg(long)]
        max_iters: Option<usize>,
    },
    /// Check equilibria, instability witnesses and the Jacobian on a map.
    Verify {
        #[arg(long, default_value = "corridor-2")]
        map: String,
        #[arg(long, default_value_t = 2)]
        d: usize,
        #[arg(long, default_value_t = 3.0)]
        b: f64,
    },
    /// Run one experiment end to end.
    Reproduce {
        #[arg(value_parser = parse_experiment)]
        experiment: ExperimentId,
        /// Number of consecutive seeds, starting at `--seed`.
        #[arg(long)]
        seeds: Option<usize>,
    },
    /// Across-run statistics of metric CSVs sharing a checkpoint grid.
    Aggregate {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long, default_value = "avg_cos_sim")]
        column: String,
    },
}

fn parse_objective(s: &str) -> Result<Objective, String> {
    [Objective::Allo, Objective::AlloNoDuals, Objective::Ggdo, Objective::GgdoIncreasingB]
        .into_iter()
        .find(|o| o.name() == s)
        .ok_or_else(|| format!("unknown objective `{s}`"))
}

fn parse_experiment(s: &str) -> Result<ExperimentId, String> {
    s.parse().map_err(|e: HarnessError| e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    let quiet = cli.quiet;
    let say = |msg: String| {
        if !quiet {
            println!("{msg}");
        }
    };
    match cli.command {
        Command::GenData { ref map, samples } => {
            let ctx = MapContext::load(map)?;
            let seed = cli.seed.unwrap_or(0);
            let data = sample_transitions_from(&ctx.model, samples, seed, &ctx.label);
            let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("transitions.csv"));
            ensure_parent(&out)?;
            data.write_csv(&out)?;
            say(format!("wrote {samples} transitions to {}", out.display()));
        }
        Command::Oracle { ref map } => {
            let ctx = MapContext::load(map)?;
            let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("eigenvalues.csv"));
            ensure_parent(&out)?;
            ctx.sys.write_eigenvalues_csv(&out)?;
            let vectors = sibling(&out, "eigenvectors");
            ctx.sys.write_eigenvectors_csv(&vectors)?;
            say(format!("{} states; eigenvalues in {}, eigenvectors in {}", ctx.sys.dim(), out.display(), vectors.display()));
        }
        Command::Train { ref map, objective, steps, d, samples, ref data } => {
            let spec = load_spec(&cli, ExperimentId::EnvSuite)?;
            let map = map.clone().unwrap_or_else(|| spec.maps[0].clone());
            let ctx = MapContext::load(&map)?;
            let mut config = TrainConfig { seed: cli.seed.unwrap_or(spec.train.seed), ..spec.train.clone() };
            config.objective = objective.unwrap_or(config.objective);
            config.steps = steps.unwrap_or(config.steps);
            config.d = d.unwrap_or(config.d);
            let dataset = match data {
                Some(path) => allo_core::TransitionDataset::read_csv(path)?,
                None => sample_transitions_from(&ctx.model, samples.unwrap_or(spec.samples), config.seed, &ctx.label),
            };
            let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("runs").join("train"));
            create_dir(&out)?;
            let run = train(&ctx.world, &dataset, &config, &ctx.sys)?;
            run.log.write_csv(out.join("metrics.csv"))?;
            run.params.save(out.join("params.bin"))?;
            let mut summary = Summary::default();
            summary.push("map", &ctx.label);
            summary.push("objective", config.objective.name());
            summary.push("steps", config.steps);
            summary.push("seed", config.seed);
            summary.push("final_avg_cos_sim", run.log.last("avg_cos_sim").unwrap_or(f64::NAN));
            summary.push("final_b", run.b);
            for (i, v) in run.duals.eigenvalue_estimates().iter().enumerate() {
                summary.push(format!("eigenvalue_estimate_{}", i + 1), v);
            }
            write_summary(&out, &summary)?;
            say(summary.to_text());
        }
        Command::Dynamics { ref map, d, b0, max_iters } => {
            let spec = load_spec(&cli, ExperimentId::Stability)?;
            let map = map.clone().unwrap_or_else(|| spec.maps[0].clone());
            let ctx = MapContext::load(&map)?;
            let mut config = DynamicsConfig { seed: cli.seed.unwrap_or(spec.dynamics.seed), ..spec.dynamics.clone() };
            config.d = d.unwrap_or(config.d);
            config.b0 = b0.unwrap_or(config.b0);
            config.max_iters = max_iters.unwrap_or(config.max_iters);
            let traj = run_ascent_descent(ctx.model.laplacian().view(), &config)?;
            let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("runs").join("dynamics"));
            create_dir(&out)?;
            traj.write_csv(out.join("trajectory.csv"))?;
            let last = traj.last();
            let mut summary = Summary::default();
            summary.push("map", &ctx.label);
            summary.push("d", config.d);
            summary.push("converged", traj.converged);
            summary.push("iterations", traj.iterations);
            summary.push("avg_cos_sim", last.avg_similarity);
            summary.push("primal_residual_inf", last.residuals.primal_inf);
            summary.push("dual_residual_inf", last.residuals.dual_inf);
            for (i, v) in last.state.duals.eigenvalue_estimates().iter().enumerate() {
                summary.push(format!("eigenvalue_estimate_{}", i + 1), v);
            }
            write_summary(&out, &summary)?;
            say(summary.to_text());
        }
        Command::Verify { ref map, d, b } => {
            let ctx = MapContext::load(map)?;
            let v = verify_map(&ctx, d, b)?;
            if let Some(out) = &cli.out {
                create_dir(out)?;
                write_summary(out, &v.summary)?;
            }
            say(v.summary.to_text());
            if !v.passed {
                return Err(HarnessError::Verification(format!("{} with d = {d}", ctx.label)));
            }
        }
        Command::Reproduce { experiment, seeds } => {
            let mut spec = load_spec(&cli, experiment)?;
            if spec.id != experiment {
                return Err(HarnessError::Config(format!("config is for `{}`, not `{experiment}`", spec.id)));
            }
            if cli.seed.is_some() || seeds.is_some() {
                let first = cli.seed.unwrap_or(spec.seeds[0]);
                let count = seeds.unwrap_or(spec.seeds.len()) as u64;
                spec.seeds = (first..first + count).collect();
            }
            if let Some(out) = &cli.out {
                spec.out = out.clone();
            }
            let report = run_experiment_with(&spec, &RunOptions { quiet, cache: None })?;
            say(report.summary.to_text());
            say(format!("artifacts in {}", spec.out.display()));
        }
        Command::Aggregate { ref inputs, ref column } => {
            let logs = inputs
                .iter()
                .map(|p| {
                    MetricsLog::read_csv(p).map_err(|e| HarnessError::Input { path: p.clone(), message: e.to_string() })
                })
                .collect::<Result<Vec<_>, _>>()?;
            let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("aggregate.csv"));
            ensure_parent(&out)?;
            // Runs are grouped by their `objective` column when present.
            let mut groups: Vec<(String, Vec<&MetricsLog>)> = Vec::new();
            for log in &logs {
                let arm = log
                    .column_index("objective")
                    .and_then(|i| log.rows().first().map(|r| r[i].to_string()))
                    .unwrap_or_else(|| "all".to_string());
                match groups.iter_mut().find(|(a, _)| *a == arm) {
                    Some((_, g)) => g.push(log),
                    None => groups.push((arm, vec![log])),
                }
            }
            let mut agg = MetricsLog::new(AGGREGATE_COLUMNS);
            for (arm, group) in &groups {
                push_curve(&mut agg, "", arm, column, &aggregate(group, column)?);
            }
            agg.write_csv(&out)?;
            if let [(a, la), (b, lb)] = groups.as_slice() {
                let finals = |g: &[&MetricsLog]| g.iter().filter_map(|l| l.last(column)).collect::<Vec<_>>();
                let c = Comparison::new("", column, (a, &finals(la)), (b, &finals(lb)));
                let path = sibling(&out, "comparisons");
                comparison_log(std::slice::from_ref(&c)).write_csv(&path)?;
                if let Some(w) = c.test {
                    say(format!("{a} vs {b}: t = {:.4}, df = {:.2}, p = {:.3e}", w.t, w.df, w.p));
                }
            }
            say(format!("aggregated {} runs into {}", logs.len(), out.display()));
        }
    }
    Ok(())
}

fn load_spec(cli: &Cli, id: ExperimentId) -> Result<ExperimentSpec, HarnessError> {
    match &cli.config {
        Some(path) => ExperimentSpec::load(path, Some(id)),
        None => Ok(ExperimentSpec::preset(id)),
    }
}

/// `dir/stem.csv` becomes `dir/stem-<suffix>.csv`.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}-{suffix}.csv"))
}

fn create_dir(path: &Path) -> Result<(), HarnessError> {
    fs::create_dir_all(path).map_err(|e| HarnessError::io(path, e))
}

fn ensure_parent(path: &Path) -> Result<(), HarnessError> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => create_dir(p),
        _ => Ok(()),
    }
}

fn write_summary(dir: &Path, summary: &Summary) -> Result<(), HarnessError> {
    let path = dir.join("summary.txt");
    fs::write(&path, summary.to_text()).map_err(|e| HarnessError::io(&path, e))
}
