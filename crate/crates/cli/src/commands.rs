//! The subcommand pipelines and their result files.
//!
//! Every command writes `summary.json` (outcome numbers, wall time, and the
//! resolved config echo) into the output directory and prints a one-line
//! human summary; the run-specific artifacts are `trajectory.csv` /
//! `schedule.csv` (solve), `iterations.csv` + `schedule.csv` (optimize),
//! `gap.json` (gap), `chatter.csv` (chatter), and `certificate.json`
//! (verify).

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use bsdeopt::bsde::SolveConfig;
use bsdeopt::chattering::write_comparison_csv;
use bsdeopt::optimizer::{write_iterations_csv, OptimizerOptions};
use bsdeopt::rng::derive_seed;
use bsdeopt::{
    builtin_problems, check_necessary, check_sufficient_hypotheses, evaluate_cost, hamiltonian_gap,
    optimize, solve_adjoint, solve_bsde, value_equality_check, CostEstimate, ProblemSpec,
};

use crate::config::{as_relaxed, build_problem, parse_control, CommonArgs, RunConfig};
use crate::CliError;

/// Stream tag separating convexity-probe draws from the Brownian panel.
const PROBE_STREAM: u64 = 1001;

/// Default optimizer stopping tolerance on the total Hamiltonian gap.
const DEFAULT_GAP_TOL: f64 = 0.01;

#[derive(Serialize)]
struct Summary<'a> {
    command: &'a str,
    problem: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    cost: Option<CostEstimate>,
    #[serde(skip_serializing_if = "Option::is_none")]
    gap: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    gap_std_error: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    converged: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    iterations: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    verdict: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    abs_gap: Option<f64>,
    /// Path-mean of the regressed volatility at the first time node.
    #[serde(skip_serializing_if = "Option::is_none")]
    z0: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    worst_condition: Option<f64>,
    wall_time_ms: f64,
    config: &'a RunConfig,
}

impl<'a> Summary<'a> {
    fn new(command: &'a str, config: &'a RunConfig, started: Instant) -> Self {
        Self {
            command,
            problem: config
                .problem
                .clone()
                .unwrap_or_else(|| "inline".to_string()),
            cost: None,
            gap: None,
            gap_std_error: None,
            converged: None,
            iterations: None,
            verdict: None,
            abs_gap: None,
            z0: None,
            worst_condition: None,
            wall_time_ms: started.elapsed().as_secs_f64() * 1e3,
            config,
        }
    }
}

struct Run {
    config: RunConfig,
    spec: ProblemSpec,
    out: PathBuf,
    started: Instant,
}

/// Shared front half of every computing subcommand: resolve the config,
/// cap the thread pool, build the problem, prepare the output directory.
fn prepare(args: &CommonArgs) -> Result<Run, CliError> {
    let started = Instant::now();
    let config = args.resolve()?;
    if let Some(workers) = config.workers {
        if workers == 0 {
            return Err(CliError::config("--workers must be at least 1".to_string()));
        }
        // Ignore the error from configuring twice (e.g. in-process reuse):
        // the pool size then stays as first configured, which is still
        // deterministic output-wise.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build_global();
    }
    let spec = build_problem(&config)?;
    let out = args.out.clone().unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&out).map_err(|e| {
        CliError::config(format!(
            "cannot create output directory {}: {e}",
            out.display()
        ))
    })?;
    Ok(Run {
        config,
        spec,
        out,
        started,
    })
}

fn solve_params(config: &RunConfig) -> SolveConfig {
    SolveConfig {
        n_paths: config.paths,
        seed: config.seed,
        basis_degree: config.basis_degree,
    }
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<(), CliError> {
    let path = dir.join(name);
    let file = File::create(&path)
        .map_err(|e| CliError::io(format!("cannot write {}: {e}", path.display())))?;
    let mut out = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut out, value)
        .map_err(|e| CliError::io(format!("cannot write {}: {e}", path.display())))?;
    out.write_all(b"\n")
        .map_err(|e| CliError::io(format!("{}: {e}", path.display())))?;
    Ok(())
}

fn write_with<F>(dir: &Path, name: &str, f: F) -> Result<(), CliError>
where
    F: FnOnce(&mut BufWriter<File>) -> std::io::Result<()>,
{
    let path = dir.join(name);
    let file = File::create(&path)
        .map_err(|e| CliError::io(format!("cannot write {}: {e}", path.display())))?;
    let mut out = BufWriter::new(file);
    f(&mut out).map_err(|e| CliError::io(format!("cannot write {}: {e}", path.display())))
}

pub fn cmd_solve(args: &CommonArgs) -> Result<i32, CliError> {
    let run = prepare(args)?;
    let params = solve_params(&run.config);
    let control = parse_control(&run.spec, &run.config.control)?;
    let mu = as_relaxed(&run.spec, &control)?;

    let paths = params.draw_paths(&run.spec).map_err(CliError::solver)?;
    let basis = params.basis().map_err(CliError::from_config_phase)?;
    let traj = solve_bsde(&run.spec, &mu, &paths, &basis).map_err(CliError::solver)?;
    let cost = evaluate_cost(&run.spec, &mu, &traj).map_err(CliError::solver)?;

    let nd = run.spec.vol_len();
    let mut z0 = vec![0.0; nd];
    for p in 0..paths.n_paths() {
        for (acc, &v) in z0.iter_mut().zip(traj.z(0, p)) {
            *acc += v;
        }
    }
    z0.iter_mut().for_each(|v| *v /= paths.n_paths() as f64);

    write_with(&run.out, "trajectory.csv", |out| traj.write_csv(out))?;
    write_with(&run.out, "schedule.csv", |out| mu.to_csv(out))?;
    let mut summary = Summary::new("solve", &run.config, run.started);
    summary.cost = Some(cost);
    summary.z0 = Some(z0.clone());
    summary.worst_condition = Some(traj.worst_condition());
    write_json(&run.out, "summary.json", &summary)?;
    println!(
        "solved {}: cost {:.6} +/- {:.6}, z0 {:?} ({} paths, {} steps, {:.0} ms)",
        summary.problem,
        cost.mean,
        cost.std_error,
        z0,
        run.config.paths,
        run.config.steps,
        summary.wall_time_ms
    );
    Ok(0)
}

pub fn cmd_optimize(args: &CommonArgs) -> Result<i32, CliError> {
    let run = prepare(args)?;
    let params = solve_params(&run.config);
    let control = parse_control(&run.spec, &run.config.control)?;
    let initial = as_relaxed(&run.spec, &control)?;

    let opts = OptimizerOptions {
        max_iters: run.config.max_iters,
        gap_tol: run.config.gap_tol.unwrap_or(DEFAULT_GAP_TOL),
        step_rule: run.config.step_rule,
        ..Default::default()
    };
    let paths = params.draw_paths(&run.spec).map_err(CliError::solver)?;
    let basis = params.basis().map_err(CliError::from_config_phase)?;
    let result = optimize(&run.spec, &initial, &paths, &basis, &opts).map_err(CliError::solver)?;

    write_with(&run.out, "iterations.csv", |out| {
        write_iterations_csv(&result.iterations, out)
    })?;
    write_with(&run.out, "schedule.csv", |out| result.schedule.to_csv(out))?;
    let final_iter = result.iterations.last().map(|r| r.iter).unwrap_or(0);
    let mut summary = Summary::new("optimize", &run.config, run.started);
    summary.cost = Some(result.final_cost);
    summary.gap = Some(result.final_gap.total_gap);
    summary.gap_std_error = Some(result.final_gap.std_error);
    summary.converged = Some(result.converged);
    summary.iterations = Some(final_iter);
    write_json(&run.out, "summary.json", &summary)?;
    println!(
        "optimized {}: cost {:.6} +/- {:.6}, gap {:.3e}, {} after {} iteration(s) ({:.0} ms)",
        summary.problem,
        result.final_cost.mean,
        result.final_cost.std_error,
        result.final_gap.total_gap,
        if result.converged {
            "converged"
        } else {
            "not converged"
        },
        final_iter,
        summary.wall_time_ms
    );
    Ok(0)
}

pub fn cmd_gap(args: &CommonArgs) -> Result<i32, CliError> {
    let run = prepare(args)?;
    let params = solve_params(&run.config);
    let control = parse_control(&run.spec, &run.config.control)?;
    let mu = as_relaxed(&run.spec, &control)?;

    let paths = params.draw_paths(&run.spec).map_err(CliError::solver)?;
    let basis = params.basis().map_err(CliError::from_config_phase)?;
    let traj = solve_bsde(&run.spec, &mu, &paths, &basis).map_err(CliError::solver)?;
    let adj = solve_adjoint(&run.spec, &mu, &traj, &paths).map_err(CliError::solver)?;
    let report = hamiltonian_gap(&run.spec, &traj, &adj, &mu).map_err(CliError::solver)?;

    write_json(&run.out, "gap.json", &report)?;
    let mut summary = Summary::new("gap", &run.config, run.started);
    summary.gap = Some(report.total_gap);
    summary.gap_std_error = Some(report.std_error);
    write_json(&run.out, "summary.json", &summary)?;
    println!(
        "gap for {}: {:.6} +/- {:.6} ({:.0} ms)",
        summary.problem, report.total_gap, report.std_error, summary.wall_time_ms
    );
    Ok(0)
}

pub fn cmd_chatter(args: &CommonArgs) -> Result<i32, CliError> {
    let run = prepare(args)?;
    let params = solve_params(&run.config);
    let control = parse_control(&run.spec, &run.config.control)?;
    let mu = as_relaxed(&run.spec, &control)?;

    let comparisons = value_equality_check(&run.spec, &mu, &run.config.refinements, &params)
        .map_err(CliError::solver)?;
    write_with(&run.out, "chatter.csv", |out| {
        write_comparison_csv(&comparisons, out)
    })?;

    let last = comparisons.last().expect("at least one refinement");
    let mut summary = Summary::new("chatter", &run.config, run.started);
    summary.abs_gap = Some(last.abs_gap);
    summary.cost = Some(last.strict);
    write_json(&run.out, "summary.json", &summary)?;
    println!(
        "chattering {}: |J_strict - J_relaxed| = {:.6} at refinement {} ({:.0} ms)",
        summary.problem, last.abs_gap, last.refinement, summary.wall_time_ms
    );
    Ok(0)
}

#[derive(Serialize)]
struct CertificateFile<'a> {
    necessary: &'a bsdeopt::Certificate,
    #[serde(rename = "sufficient-hypotheses")]
    sufficient_hypotheses: &'a bsdeopt::ConvexityReport,
}

pub fn cmd_verify(args: &CommonArgs) -> Result<i32, CliError> {
    let run = prepare(args)?;
    let params = solve_params(&run.config);
    let control = parse_control(&run.spec, &run.config.control)?;

    let certificate = check_necessary(&run.spec, &control, &params, run.config.gap_tol)
        .map_err(CliError::solver)?;
    let convexity = check_sufficient_hypotheses(
        &run.spec,
        &params,
        derive_seed(run.config.seed, PROBE_STREAM),
    )
    .map_err(CliError::solver)?;

    write_json(
        &run.out,
        "certificate.json",
        &CertificateFile {
            necessary: &certificate,
            sufficient_hypotheses: &convexity,
        },
    )?;
    let mut summary = Summary::new("verify", &run.config, run.started);
    summary.gap = Some(certificate.total_gap);
    summary.gap_std_error = Some(certificate.gap_std_error);
    summary.verdict = Some(certificate.verdict.clone());
    write_json(&run.out, "summary.json", &summary)?;
    println!(
        "verify {}: {} (gap {:.6} vs tolerance {:.6}; sufficiency hypotheses {}) ({:.0} ms)",
        summary.problem,
        certificate.verdict,
        certificate.total_gap,
        certificate.tolerance,
        convexity.verdict,
        summary.wall_time_ms
    );
    Ok(if certificate.passed() { 0 } else { 3 })
}

pub fn cmd_list_problems() -> i32 {
    for entry in builtin_problems() {
        println!("{}", entry.name);
        println!("    {}", entry.summary);
        println!("    reference: {}", entry.reference);
        let points: Vec<String> = entry
            .problem
            .grid
            .iter()
            .map(|p| {
                if p.len() == 1 {
                    p[0].to_string()
                } else {
                    format!("{p:?}")
                }
            })
            .collect();
        println!("    grid: [{}]", points.join(", "));
    }
    0
}
