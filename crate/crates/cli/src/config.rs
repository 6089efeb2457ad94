//! Run configuration: defaults, JSON config file, flag overrides (flags
//! win), and the parsers for grid and control specifications.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use bsdeopt::builtin::InlineProblem;
use bsdeopt::optimizer::StepRule;
use bsdeopt::problem::{ControlGrid, RelaxedControlSchedule, StrictControlSchedule};
use bsdeopt::verify::ControlInput;
use bsdeopt::ProblemSpec;

use crate::CliError;

/// The fully resolved configuration of one run. This is what gets echoed
/// into `summary.json`, and it re-parses to an identical value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct RunConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub problem: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub inline: Option<InlineProblem>,
    pub seed: u64,
    pub paths: usize,
    pub steps: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grid: Option<String>,
    pub basis_degree: usize,
    pub max_iters: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gap_tol: Option<f64>,
    pub step_rule: StepRule,
    pub refinements: Vec<usize>,
    pub control: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            problem: None,
            inline: None,
            seed: 7,
            paths: 16384,
            steps: 64,
            grid: None,
            basis_degree: 2,
            max_iters: 50,
            gap_tol: None,
            step_rule: StepRule::Backtracking,
            refinements: vec![1, 2, 4, 8, 16],
            control: "uniform".to_string(),
            workers: None,
        }
    }
}

/// What a `--config` JSON file may contain: any subset of [`RunConfig`].
#[derive(Debug, Default, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct FileConfig {
    pub problem: Option<String>,
    pub inline: Option<InlineProblem>,
    pub seed: Option<u64>,
    pub paths: Option<usize>,
    pub steps: Option<usize>,
    pub grid: Option<String>,
    pub basis_degree: Option<usize>,
    pub max_iters: Option<usize>,
    pub gap_tol: Option<f64>,
    pub step_rule: Option<StepRule>,
    pub refinements: Option<Vec<usize>>,
    pub control: Option<String>,
    pub workers: Option<usize>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::config(format!("bad config {}: {e}", path.display())))
    }
}

/// The flag values as given on the command line (all optional).
#[derive(Clone, Debug, Default, clap::Args)]
pub struct CommonArgs {
    /// Registered problem name (see `list-problems`).
    #[arg(long)]
    pub problem: Option<String>,
    /// JSON config file; explicit flags override its entries.
    #[arg(long)]
    pub config: Option<std::path::PathBuf>,
    /// Seed for the Brownian panel and all derived randomness.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of Monte Carlo paths.
    #[arg(long)]
    pub paths: Option<usize>,
    /// Number of time steps.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Control grid override: comma-separated scalars `a,b,c` or
    /// `lattice:lo:hi:count`.
    #[arg(long)]
    pub grid: Option<String>,
    /// Total degree of the regression polynomial basis.
    #[arg(long = "basis-degree")]
    pub basis_degree: Option<usize>,
    /// Iteration budget for `optimize`.
    #[arg(long = "max-iters")]
    pub max_iters: Option<usize>,
    /// Gap tolerance: stopping rule for `optimize`, pass threshold for
    /// `verify` (default for `verify`: 3 standard errors + 0.01).
    #[arg(long = "gap-tol")]
    pub gap_tol: Option<f64>,
    /// Step-size rule for `optimize`: `backtracking` or `harmonic`.
    #[arg(long = "step-rule")]
    pub step_rule: Option<String>,
    /// Comma-separated chattering refinement factors, e.g. `1,2,4,8,16`.
    #[arg(long, value_delimiter = ',')]
    pub refinements: Option<Vec<usize>>,
    /// Control schedule: `uniform`, `constant:<value>`, `index:<j>`, or
    /// `file:<schedule.csv>`.
    #[arg(long)]
    pub control: Option<String>,
    /// Output directory for result files.
    #[arg(long)]
    pub out: Option<std::path::PathBuf>,
    /// Thread cap; results are identical for any value.
    #[arg(long)]
    pub workers: Option<usize>,
}

impl CommonArgs {
    /// Resolves defaults <- config file <- flags, flags winning.
    pub fn resolve(&self) -> Result<RunConfig, CliError> {
        let file = match &self.config {
            Some(path) => FileConfig::load(path)?,
            None => FileConfig::default(),
        };
        let defaults = RunConfig::default();
        let step_rule = match self.step_rule.as_deref() {
            Some(s) => Some(parse_step_rule(s)?),
            None => None,
        };
        Ok(RunConfig {
            problem: self.problem.clone().or(file.problem),
            inline: file.inline,
            seed: self.seed.or(file.seed).unwrap_or(defaults.seed),
            paths: self.paths.or(file.paths).unwrap_or(defaults.paths),
            steps: self.steps.or(file.steps).unwrap_or(defaults.steps),
            grid: self.grid.clone().or(file.grid),
            basis_degree: self
                .basis_degree
                .or(file.basis_degree)
                .unwrap_or(defaults.basis_degree),
            max_iters: self
                .max_iters
                .or(file.max_iters)
                .unwrap_or(defaults.max_iters),
            gap_tol: self.gap_tol.or(file.gap_tol),
            step_rule: step_rule.or(file.step_rule).unwrap_or(defaults.step_rule),
            refinements: self
                .refinements
                .clone()
                .or(file.refinements)
                .unwrap_or(defaults.refinements),
            control: self
                .control
                .clone()
                .or(file.control)
                .unwrap_or(defaults.control),
            workers: self.workers.or(file.workers),
        })
    }
}

pub fn parse_step_rule(s: &str) -> Result<StepRule, CliError> {
    match s {
        "backtracking" => Ok(StepRule::Backtracking),
        "harmonic" => Ok(StepRule::Harmonic),
        other => Err(CliError::config(format!(
            "unknown step rule `{other}` (expected `backtracking` or `harmonic`)"
        ))),
    }
}

/// Parses `a,b,c` (scalar points) or `lattice:lo:hi:count`.
pub fn parse_grid(spec: &str) -> Result<ControlGrid, CliError> {
    if let Some(rest) = spec.strip_prefix("lattice:") {
        let parts: Vec<&str> = rest.split(':').collect();
        if parts.len() != 3 {
            return Err(CliError::config(format!(
                "bad lattice spec `{spec}` (expected lattice:lo:hi:count)"
            )));
        }
        let lo: f64 = parts[0]
            .parse()
            .map_err(|_| CliError::config(format!("bad lattice bound `{}`", parts[0])))?;
        let hi: f64 = parts[1]
            .parse()
            .map_err(|_| CliError::config(format!("bad lattice bound `{}`", parts[1])))?;
        let count: usize = parts[2]
            .parse()
            .map_err(|_| CliError::config(format!("bad lattice count `{}`", parts[2])))?;
        return ControlGrid::lattice(lo, hi, count).map_err(CliError::from_config_phase);
    }
    let mut points = Vec::new();
    for piece in spec.split(',') {
        let v: f64 = piece
            .trim()
            .parse()
            .map_err(|_| CliError::config(format!("bad grid point `{piece}`")))?;
        points.push(v);
    }
    ControlGrid::scalar(&points).map_err(CliError::from_config_phase)
}

/// Builds the problem named or inlined by the config, on its time grid,
/// applying any `--grid` override.
pub fn build_problem(config: &RunConfig) -> Result<ProblemSpec, CliError> {
    let grid_override = match &config.grid {
        Some(spec) => Some(parse_grid(spec)?),
        None => None,
    };
    if let Some(name) = &config.problem {
        return bsdeopt::build_builtin(name, config.steps, grid_override)
            .map_err(CliError::from_config_phase);
    }
    if let Some(inline) = &config.inline {
        let built = match grid_override {
            Some(grid) => inline.build_with_grid(config.steps, grid),
            None => inline.build(config.steps),
        };
        return built.map_err(CliError::from_config_phase);
    }
    Err(CliError::config(format!(
        "no problem specified; pass --problem <name> ({}) or an `inline` \
         problem in --config",
        bsdeopt::builtin_names().join(", ")
    )))
}

/// Parses the `--control` specification against a built problem.
pub fn parse_control(spec: &ProblemSpec, control: &str) -> Result<ControlInput, CliError> {
    let steps = spec.time().steps();
    let m = spec.grid().len();
    if control == "uniform" {
        let mu = RelaxedControlSchedule::uniform(steps, m).map_err(CliError::from_config_phase)?;
        return Ok(ControlInput::Relaxed(mu));
    }
    if let Some(value) = control.strip_prefix("constant:") {
        let v: f64 = value
            .parse()
            .map_err(|_| CliError::config(format!("bad control value `{value}`")))?;
        if spec.grid().dim() != 1 {
            return Err(CliError::config(
                "constant:<value> requires a one-dimensional control grid; use index:<j>"
                    .to_string(),
            ));
        }
        let j = (0..m)
            .find(|&j| (spec.grid().point(j)[0] - v).abs() <= 1e-12)
            .ok_or_else(|| {
                let pts: Vec<String> = (0..m)
                    .map(|j| spec.grid().point(j)[0].to_string())
                    .collect();
                CliError::config(format!(
                    "control value {v} is not a grid point (grid: {})",
                    pts.join(", ")
                ))
            })?;
        let strict =
            StrictControlSchedule::constant(steps, j, m).map_err(CliError::from_config_phase)?;
        return Ok(ControlInput::Strict(strict));
    }
    if let Some(index) = control.strip_prefix("index:") {
        let j: usize = index
            .parse()
            .map_err(|_| CliError::config(format!("bad control index `{index}`")))?;
        let strict =
            StrictControlSchedule::constant(steps, j, m).map_err(CliError::from_config_phase)?;
        return Ok(ControlInput::Strict(strict));
    }
    if let Some(path) = control.strip_prefix("file:") {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("cannot read control file {path}: {e}")))?;
        let header = text.lines().next().unwrap_or("");
        let parsed = if header.trim() == "index" {
            StrictControlSchedule::from_csv(text.as_bytes(), m).map(ControlInput::Strict)
        } else {
            RelaxedControlSchedule::from_csv(text.as_bytes()).map(ControlInput::Relaxed)
        };
        let parsed = parsed.map_err(CliError::from_config_phase)?;
        let (got_steps, got_m) = match &parsed {
            ControlInput::Strict(s) => (s.steps(), s.grid_len()),
            ControlInput::Relaxed(r) => (r.steps(), r.grid_len()),
        };
        if got_steps != steps || got_m != m {
            return Err(CliError::config(format!(
                "control file {path} has {got_steps} step(s) over {got_m} grid point(s), \
                 but the run uses {steps} step(s) over {m}"
            )));
        }
        return Ok(parsed);
    }
    Err(CliError::config(format!(
        "bad control spec `{control}` (expected uniform, constant:<value>, index:<j>, \
         or file:<path>)"
    )))
}

/// The control as a relaxed schedule (strict inputs get Dirac-embedded).
pub fn as_relaxed(
    spec: &ProblemSpec,
    control: &ControlInput,
) -> Result<RelaxedControlSchedule, CliError> {
    match control {
        ControlInput::Relaxed(mu) => Ok(mu.clone()),
        ControlInput::Strict(s) => {
            bsdeopt::dirac_embed(s, spec.grid()).map_err(CliError::from_config_phase)
        }
    }
}
