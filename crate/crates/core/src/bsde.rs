//! Backward solver for the controlled state equation and its linearization.
//!
//! The dynamics `dy = b(t, y, z, v) dt + z dW`, `y_T = xi(W)` are discretized
//! on the problem's uniform grid and solved by backward regression:
//!
//! * `y_K` is the terminal condition, exactly;
//! * `z_k` regresses `y_{k+1} dW_k^T / dt` on polynomial features of the node
//!   `W_{t_k}`;
//! * `y_k = E_k[y_{k+1}] - b_bar(t_k, E_k[y_{k+1}], z_k, q_k) dt`, where
//!   `E_k` is the fitted conditional expectation and `b_bar` the
//!   weight-averaged drift under the relaxed schedule row `q_k`.
//!
//! Both regressions at a step share one normal system (same features,
//! stacked targets), so each step reports a single condition estimate.
//! All reductions run over fixed-size path chunks combined in chunk order;
//! results are bit-identical for any worker count.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::parallel::{for_path_chunks_mut, map_path_chunks, map_path_chunks_mut2};
use crate::paths::{generate_paths, PathBundle, MAX_BUNDLE_LEN};
use crate::problem::{ProblemSpec, RelaxedControlSchedule};
use crate::regression::{solve_normal_equations, BasisEval, RegressionBasis, SolvedRegression};

/// Monte Carlo / regression knobs shared by the high-level entry points.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SolveConfig {
    pub n_paths: usize,
    pub seed: u64,
    pub basis_degree: usize,
}

impl Default for SolveConfig {
    fn default() -> Self {
        Self {
            n_paths: 16384,
            seed: 7,
            basis_degree: 2,
        }
    }
}

impl SolveConfig {
    pub fn basis(&self) -> Result<RegressionBasis> {
        RegressionBasis::new(self.basis_degree)
    }

    /// Draws the path bundle this configuration describes.
    pub fn draw_paths(&self, spec: &ProblemSpec) -> Result<PathBundle> {
        generate_paths(self.seed, self.n_paths, spec.time(), spec.noise_dim())
    }
}

/// Per-step regression health: the condition estimate of the retained
/// spectrum and the RMS residual of the continuation fit.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct StepDiagnostics {
    pub condition: f64,
    pub residual_rms: f64,
}

/// Solved state `(y, z)` for every path and step, step-major:
/// `y[k * N * n + p * n + i]`, `z[k * N * n * d + p * n * d + (l * d + j)]`.
#[derive(Debug)]
pub struct TrajectoryBundle {
    y: Vec<f64>,
    z: Vec<f64>,
    diagnostics: Vec<StepDiagnostics>,
    n_paths: usize,
    steps: usize,
    state_dim: usize,
    noise_dim: usize,
}

impl TrajectoryBundle {
    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn noise_dim(&self) -> usize {
        self.noise_dim
    }

    /// State at node `k` (0..=steps) on path `p`.
    pub fn y(&self, k: usize, p: usize) -> &[f64] {
        let n = self.state_dim;
        let base = (k * self.n_paths + p) * n;
        &self.y[base..base + n]
    }

    /// Volatility on `[t_k, t_{k+1})` (k in 0..steps) on path `p`, row-major
    /// `n x d`.
    pub fn z(&self, k: usize, p: usize) -> &[f64] {
        let nd = self.state_dim * self.noise_dim;
        let base = (k * self.n_paths + p) * nd;
        &self.z[base..base + nd]
    }

    pub fn diagnostics(&self) -> &[StepDiagnostics] {
        &self.diagnostics
    }

    /// Worst condition estimate across steps.
    pub fn worst_condition(&self) -> f64 {
        self.diagnostics
            .iter()
            .map(|d| d.condition)
            .fold(1.0, f64::max)
    }

    /// CSV with header `path,step,y_0,...,z_0_0,...`; the volatility cells
    /// are empty on the terminal row of each path.
    pub fn write_csv<W: std::io::Write>(&self, out: &mut W) -> std::io::Result<()> {
        let n = self.state_dim;
        let d = self.noise_dim;
        let mut header = String::from("path,step");
        for i in 0..n {
            header.push_str(&format!(",y_{i}"));
        }
        for l in 0..n {
            for j in 0..d {
                header.push_str(&format!(",z_{l}_{j}"));
            }
        }
        writeln!(out, "{header}")?;
        for p in 0..self.n_paths {
            for k in 0..=self.steps {
                let mut row = format!("{p},{k}");
                for v in self.y(k, p) {
                    row.push_str(&format!(",{v}"));
                }
                if k < self.steps {
                    for v in self.z(k, p) {
                        row.push_str(&format!(",{v}"));
                    }
                } else {
                    for _ in 0..n * d {
                        row.push(',');
                    }
                }
                writeln!(out, "{row}")?;
            }
        }
        Ok(())
    }
}

/// Monte Carlo estimate with its standard error (Bessel-corrected).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostEstimate {
    pub mean: f64,
    pub std_error: f64,
}

/// Linearized state response to a change of schedule, same layout as
/// [`TrajectoryBundle`] (terminal block identically zero).
#[derive(Debug)]
pub struct VariationalBundle {
    y: Vec<f64>,
    z: Vec<f64>,
    n_paths: usize,
    steps: usize,
    state_dim: usize,
    noise_dim: usize,
}

impl VariationalBundle {
    pub fn y(&self, k: usize, p: usize) -> &[f64] {
        let n = self.state_dim;
        let base = (k * self.n_paths + p) * n;
        &self.y[base..base + n]
    }

    pub fn z(&self, k: usize, p: usize) -> &[f64] {
        let nd = self.state_dim * self.noise_dim;
        let base = (k * self.n_paths + p) * nd;
        &self.z[base..base + nd]
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn steps(&self) -> usize {
        self.steps
    }
}

fn alloc_guarded(len: Option<usize>, what: &str) -> Result<Vec<f64>> {
    let len = len.filter(|&v| v <= MAX_BUNDLE_LEN).ok_or_else(|| {
        Error::Resource(format!(
            "{what} buffer exceeds the {MAX_BUNDLE_LEN}-value limit"
        ))
    })?;
    Ok(vec![0.0; len])
}

fn check_shapes(
    spec: &ProblemSpec,
    schedule: &RelaxedControlSchedule,
    paths: &PathBundle,
) -> Result<()> {
    let steps = spec.time().steps();
    if paths.steps() != steps || paths.noise_dim() != spec.noise_dim() {
        return Err(Error::Shape(format!(
            "paths are {} steps x {} components, problem wants {} x {}",
            paths.steps(),
            paths.noise_dim(),
            steps,
            spec.noise_dim()
        )));
    }
    if schedule.steps() != steps || schedule.grid_len() != spec.grid().len() {
        return Err(Error::Shape(format!(
            "schedule is {} steps x {} weights, problem wants {} x {}",
            schedule.steps(),
            schedule.grid_len(),
            steps,
            spec.grid().len()
        )));
    }
    Ok(())
}

/// Brownian nodes per path, path-major `[p * steps * d + k * d + j]`,
/// with node 0 exactly zero.
fn brownian_nodes(paths: &PathBundle) -> Result<Vec<f64>> {
    let steps = paths.steps();
    let d = paths.noise_dim();
    let mut nodes = alloc_guarded(
        paths
            .n_paths()
            .checked_mul(steps)
            .and_then(|v| v.checked_mul(d)),
        "node",
    )?;
    for_path_chunks_mut(&mut nodes, steps * d, |first, rows| {
        for (i, row) in rows.chunks_mut(steps * d).enumerate() {
            let p = first + i;
            for k in 1..steps {
                let dw = paths.increment(p, k - 1);
                let (prev, cur) = row.split_at_mut(k * d);
                let last = &prev[(k - 1) * d..];
                for j in 0..d {
                    cur[j] = last[j] + dw[j];
                }
            }
        }
    });
    Ok(nodes)
}

fn gather_node(nodes: &[f64], k: usize, steps: usize, d: usize, out: &mut [f64]) {
    for (p, slot) in out.chunks_mut(d).enumerate() {
        let base = (p * steps + k) * d;
        slot.copy_from_slice(&nodes[base..base + d]);
    }
}

/// Accumulates and solves one step's normal system. `target_row` fills the
/// stacked target vector for a path; chunk partial sums are combined in
/// chunk order so the result is worker-count independent.
fn fit_step<F>(
    eval: &BasisEval,
    node_k: &[f64],
    d: usize,
    n_paths: usize,
    n_targets: usize,
    k: usize,
    target_row: F,
) -> Result<SolvedRegression>
where
    F: Fn(usize, &mut [f64]) + Sync,
{
    let n_feat = eval.n_features();
    let partials = map_path_chunks(n_paths, |range| {
        let mut ev = eval.clone();
        let mut phi = vec![0.0; n_feat];
        let mut tgt = vec![0.0; n_targets];
        let mut gram = vec![0.0; n_feat * n_feat];
        let mut rhs = vec![0.0; n_feat * n_targets];
        for p in range {
            ev.eval_into(&node_k[p * d..(p + 1) * d], &mut phi);
            target_row(p, &mut tgt);
            for f in 0..n_feat {
                let pf = phi[f];
                for (g, &p2) in gram[f * n_feat..(f + 1) * n_feat].iter_mut().zip(&phi) {
                    *g += pf * p2;
                }
                for (r, &t) in rhs[f * n_targets..(f + 1) * n_targets].iter_mut().zip(&tgt) {
                    *r += pf * t;
                }
            }
        }
        (gram, rhs)
    });
    let mut gram = vec![0.0; n_feat * n_feat];
    let mut rhs = vec![0.0; n_feat * n_targets];
    for (g, r) in partials {
        for (a, b) in gram.iter_mut().zip(&g) {
            *a += b;
        }
        for (a, b) in rhs.iter_mut().zip(&r) {
            *a += b;
        }
    }
    solve_normal_equations(
        DMatrix::from_row_slice(n_feat, n_feat, &gram),
        DMatrix::from_row_slice(n_feat, n_targets, &rhs),
        k,
    )
}

/// Runs the backward sweep under the relaxed schedule `schedule` on the
/// given paths.
pub fn solve_bsde(
    spec: &ProblemSpec,
    schedule: &RelaxedControlSchedule,
    paths: &PathBundle,
    basis: &RegressionBasis,
) -> Result<TrajectoryBundle> {
    check_shapes(spec, schedule, paths)?;
    let n = spec.state_dim();
    let d = spec.noise_dim();
    let nd = n * d;
    let steps = spec.time().steps();
    let n_paths = paths.n_paths();
    let dt = spec.time().dt();

    let mut y = alloc_guarded(
        (steps + 1)
            .checked_mul(n_paths)
            .and_then(|v| v.checked_mul(n)),
        "state",
    )?;
    let mut z = alloc_guarded(
        steps.checked_mul(n_paths).and_then(|v| v.checked_mul(nd)),
        "volatility",
    )?;

    // Terminal condition, exact.
    {
        let term = &mut y[steps * n_paths * n..];
        for_path_chunks_mut(term, n, |first, rows| {
            for (i, row) in rows.chunks_mut(n).enumerate() {
                spec.terminal_condition_into(&paths.view(first + i), row);
            }
        });
        if let Some(bad) = term.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteAt {
                what: "terminal condition",
                path: bad / n,
                step: steps,
            });
        }
    }

    let nodes = brownian_nodes(paths)?;
    let eval = basis.evaluator(d);
    let n_feat = eval.n_features();
    let n_targets = nd + n; // volatility block then continuation block
    let mut node_k = vec![0.0; n_paths * d];
    let mut diagnostics = vec![
        StepDiagnostics {
            condition: 0.0,
            residual_rms: 0.0
        };
        steps
    ];

    for k in (0..steps).rev() {
        gather_node(&nodes, k, steps, d, &mut node_k);
        let (y_lo, y_hi) = y.split_at_mut((k + 1) * n_paths * n);
        let y_next = &y_hi[..n_paths * n];
        let y_k = &mut y_lo[k * n_paths * n..];
        let z_k = &mut z[k * n_paths * nd..(k + 1) * n_paths * nd];
        let row_k = schedule.row(k);
        let t_k = spec.time().node(k);

        let solved = fit_step(&eval, &node_k, d, n_paths, n_targets, k, |p, tgt| {
            let yn = &y_next[p * n..(p + 1) * n];
            let dw = paths.increment(p, k);
            for l in 0..n {
                for j in 0..d {
                    tgt[l * d + j] = yn[l] * dw[j] / dt;
                }
            }
            tgt[nd..].copy_from_slice(yn);
        })?;
        let coeffs = &solved.coeffs;

        let residuals = map_path_chunks_mut2(y_k, n, z_k, nd, |first, yk, zk| -> Result<f64> {
            let mut ev = eval.clone();
            let mut phi = vec![0.0; n_feat];
            let mut drift = vec![0.0; n];
            let mut scratch = vec![0.0; n];
            let mut resid = 0.0;
            for (i, (yrow, zrow)) in yk.chunks_mut(n).zip(zk.chunks_mut(nd)).enumerate() {
                let p = first + i;
                ev.eval_into(&node_k[p * d..(p + 1) * d], &mut phi);
                for (c, slot) in zrow.iter_mut().enumerate() {
                    let mut v = 0.0;
                    for (f, &pf) in phi.iter().enumerate() {
                        v += pf * coeffs[(f, c)];
                    }
                    *slot = v;
                }
                if zrow.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFiniteAt {
                        what: "volatility estimate",
                        path: p,
                        step: k,
                    });
                }
                for (c, slot) in yrow.iter_mut().enumerate() {
                    let mut v = 0.0;
                    for (f, &pf) in phi.iter().enumerate() {
                        v += pf * coeffs[(f, nd + c)];
                    }
                    *slot = v;
                }
                let yn = &y_next[p * n..(p + 1) * n];
                for (a, b) in yn.iter().zip(yrow.iter()) {
                    resid += (a - b) * (a - b);
                }
                spec.drift_avg_into(t_k, yrow, zrow, row_k, &mut drift, &mut scratch);
                for (slot, &b) in yrow.iter_mut().zip(&drift) {
                    *slot -= b * dt;
                }
                if yrow.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFiniteAt {
                        what: "state estimate",
                        path: p,
                        step: k,
                    });
                }
            }
            Ok(resid)
        });
        let mut resid_total = 0.0;
        for r in residuals {
            resid_total += r?;
        }
        diagnostics[k] = StepDiagnostics {
            condition: solved.condition,
            residual_rms: (resid_total / (n_paths * n) as f64).sqrt(),
        };
    }

    Ok(TrajectoryBundle {
        y,
        z,
        diagnostics,
        n_paths,
        steps,
        state_dim: n,
        noise_dim: d,
    })
}

/// Sample mean and standard error of
/// `g(y_0) + sum_k h_bar(t_k, y_k, z_k, q_k) dt` over paths.
pub fn evaluate_cost(
    spec: &ProblemSpec,
    schedule: &RelaxedControlSchedule,
    traj: &TrajectoryBundle,
) -> Result<CostEstimate> {
    if traj.steps() != spec.time().steps()
        || traj.state_dim() != spec.state_dim()
        || traj.noise_dim() != spec.noise_dim()
    {
        return Err(Error::Shape("trajectory does not match the problem".into()));
    }
    if schedule.steps() != traj.steps() || schedule.grid_len() != spec.grid().len() {
        return Err(Error::Shape("schedule does not match the problem".into()));
    }
    let n_paths = traj.n_paths();
    let dt = spec.time().dt();
    let steps = traj.steps();
    let chunks = map_path_chunks(n_paths, |range| -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(range.len());
        for p in range {
            let mut total = spec.terminal_cost(traj.y(0, p));
            for k in 0..steps {
                total += spec.running_cost_avg(
                    spec.time().node(k),
                    traj.y(k, p),
                    traj.z(k, p),
                    schedule.row(k),
                ) * dt;
            }
            if !total.is_finite() {
                return Err(Error::NonFinite(format!("cost total on path {p}")));
            }
            out.push(total);
        }
        Ok(out)
    });
    let mut totals = Vec::with_capacity(n_paths);
    for c in chunks {
        totals.extend(c?);
    }
    let (mean, std_error) = mean_and_se(&totals);
    Ok(CostEstimate { mean, std_error })
}

/// Sample mean and Bessel-corrected standard error of the mean.
pub(crate) fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let count = values.len();
    let mean = values.iter().sum::<f64>() / count as f64;
    let se = if count > 1 {
        let var = values.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (count - 1) as f64;
        (var / count as f64).sqrt()
    } else {
        0.0
    };
    (mean, se)
}

/// Solves the linearized backward equation for the response of the state to
/// moving the schedule from `mu` toward `q`:
///
/// `ytil_K = 0`,
/// `ytil_k = E_k[ytil_{k+1}] - [ b_y(mu) E_k[ytil_{k+1}] + b_z(mu) : ztil_k
///   + (b_bar(q) - b_bar(mu)) ] dt`,
///
/// with all coefficients averaged under `mu` and evaluated along the solved
/// trajectory `traj`.
pub fn solve_variational_bsde(
    spec: &ProblemSpec,
    mu: &RelaxedControlSchedule,
    q: &RelaxedControlSchedule,
    traj: &TrajectoryBundle,
    paths: &PathBundle,
    basis: &RegressionBasis,
) -> Result<VariationalBundle> {
    check_shapes(spec, mu, paths)?;
    check_shapes(spec, q, paths)?;
    if traj.n_paths() != paths.n_paths()
        || traj.steps() != spec.time().steps()
        || traj.state_dim() != spec.state_dim()
    {
        return Err(Error::Shape(
            "trajectory does not match the paths/problem".into(),
        ));
    }
    let n = spec.state_dim();
    let d = spec.noise_dim();
    let nd = n * d;
    let steps = spec.time().steps();
    let n_paths = paths.n_paths();
    let dt = spec.time().dt();

    let mut vy = alloc_guarded(
        (steps + 1)
            .checked_mul(n_paths)
            .and_then(|v| v.checked_mul(n)),
        "variational state",
    )?;
    let mut vz = alloc_guarded(
        steps.checked_mul(n_paths).and_then(|v| v.checked_mul(nd)),
        "variational volatility",
    )?;

    let nodes = brownian_nodes(paths)?;
    let eval = basis.evaluator(d);
    let n_feat = eval.n_features();
    let n_targets = nd + n;
    let mut node_k = vec![0.0; n_paths * d];

    for k in (0..steps).rev() {
        gather_node(&nodes, k, steps, d, &mut node_k);
        let (vy_lo, vy_hi) = vy.split_at_mut((k + 1) * n_paths * n);
        let vy_next = &vy_hi[..n_paths * n];
        let vy_k = &mut vy_lo[k * n_paths * n..];
        let vz_k = &mut vz[k * n_paths * nd..(k + 1) * n_paths * nd];
        let mu_k = mu.row(k);
        let q_k = q.row(k);
        let t_k = spec.time().node(k);

        let solved = fit_step(&eval, &node_k, d, n_paths, n_targets, k, |p, tgt| {
            let yn = &vy_next[p * n..(p + 1) * n];
            let dw = paths.increment(p, k);
            for l in 0..n {
                for j in 0..d {
                    tgt[l * d + j] = yn[l] * dw[j] / dt;
                }
            }
            tgt[nd..].copy_from_slice(yn);
        })?;
        let coeffs = &solved.coeffs;

        let results = map_path_chunks_mut2(vy_k, n, vz_k, nd, |first, yk, zk| -> Result<()> {
            let mut ev = eval.clone();
            let mut phi = vec![0.0; n_feat];
            let mut cont = vec![0.0; n];
            let mut by = vec![0.0; n * n];
            let mut bz = vec![0.0; n * nd];
            let mut bq = vec![0.0; n];
            let mut bmu = vec![0.0; n];
            let mut scratch = vec![0.0; (n * n).max(n * nd)];
            for (i, (yrow, zrow)) in yk.chunks_mut(n).zip(zk.chunks_mut(nd)).enumerate() {
                let p = first + i;
                ev.eval_into(&node_k[p * d..(p + 1) * d], &mut phi);
                for (c, slot) in zrow.iter_mut().enumerate() {
                    let mut v = 0.0;
                    for (f, &pf) in phi.iter().enumerate() {
                        v += pf * coeffs[(f, c)];
                    }
                    *slot = v;
                }
                for (c, slot) in cont.iter_mut().enumerate() {
                    let mut v = 0.0;
                    for (f, &pf) in phi.iter().enumerate() {
                        v += pf * coeffs[(f, nd + c)];
                    }
                    *slot = v;
                }
                let y_p = traj.y(k, p);
                let z_p = traj.z(k, p);
                spec.drift_grad_y_avg_into(t_k, y_p, z_p, mu_k, &mut by, &mut scratch[..n * n]);
                spec.drift_grad_z_avg_into(t_k, y_p, z_p, mu_k, &mut bz, &mut scratch[..n * nd]);
                spec.drift_avg_into(t_k, y_p, z_p, q_k, &mut bq, &mut scratch[..n]);
                spec.drift_avg_into(t_k, y_p, z_p, mu_k, &mut bmu, &mut scratch[..n]);
                for idx in 0..n {
                    let mut lin = bq[idx] - bmu[idx];
                    for l in 0..n {
                        lin += by[idx * n + l] * cont[l];
                    }
                    for e in 0..nd {
                        lin += bz[idx * nd + e] * zrow[e];
                    }
                    yrow[idx] = cont[idx] - lin * dt;
                }
                if yrow.iter().chain(zrow.iter()).any(|v| !v.is_finite()) {
                    return Err(Error::NonFiniteAt {
                        what: "variational estimate",
                        path: p,
                        step: k,
                    });
                }
            }
            Ok(())
        });
        for r in results {
            r?;
        }
    }

    Ok(VariationalBundle {
        y: vy,
        z: vz,
        n_paths,
        steps,
        state_dim: n,
        noise_dim: d,
    })
}
