//! Conditional-gradient (Frank–Wolfe) descent over relaxed schedules, and
//! the two equivalent directional derivatives of the cost.
//!
//! Each iteration solves the state under the current schedule, propagates
//! the adjoint, and reads off the Hamiltonian gap. The gap plays two roles:
//! it is the optimality certificate (zero at stationarity) and, with a minus
//! sign, the directional derivative toward the best response, which makes it
//! the natural sufficient-decrease yardstick for the Armijo line search. The
//! step is a convex mixture, so iterates never leave the simplex; a step of
//! size 1 lands exactly on the best-response Dirac schedule.

use serde::{Deserialize, Serialize};

use crate::adjoint::solve_adjoint;
use crate::bsde::{
    evaluate_cost, mean_and_se, solve_bsde, solve_variational_bsde, CostEstimate, TrajectoryBundle,
};
use crate::error::{Error, Result};
use crate::hamiltonian::{hamiltonian_gap, GapReport};
use crate::parallel::map_path_chunks;
use crate::paths::PathBundle;
use crate::problem::{
    dirac_embed, mix, ProblemSpec, RelaxedControlSchedule, StrictControlSchedule,
};
use crate::regression::RegressionBasis;

/// How the step size along the best-response direction is chosen.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StepRule {
    /// Backtracking from 1 under an Armijo test against the gap; falls back
    /// to the harmonic step when backtracking exhausts its budget.
    Backtracking,
    /// The classic `2 / (iter + 2)` schedule, unconditionally.
    Harmonic,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct OptimizerOptions {
    pub max_iters: usize,
    /// Stop when the total Hamiltonian gap is at or below this.
    pub gap_tol: f64,
    pub step_rule: StepRule,
    /// Multiplicative step shrink per rejected trial.
    pub armijo_shrink: f64,
    /// Required decrease per unit step, as a fraction of the gap.
    pub armijo_slope: f64,
    /// Trials per line search before the harmonic fallback.
    pub max_backtracks: usize,
}

impl Default for OptimizerOptions {
    fn default() -> Self {
        Self {
            max_iters: 50,
            gap_tol: 0.01,
            step_rule: StepRule::Backtracking,
            armijo_shrink: 0.5,
            armijo_slope: 0.1,
            max_backtracks: 20,
        }
    }
}

impl OptimizerOptions {
    fn validate(&self) -> Result<()> {
        if !(self.gap_tol.is_finite() && self.gap_tol >= 0.0) {
            return Err(Error::Invalid(format!(
                "gap tolerance {} must be >= 0",
                self.gap_tol
            )));
        }
        if !(self.armijo_shrink > 0.0 && self.armijo_shrink < 1.0) {
            return Err(Error::Invalid(format!(
                "backtracking shrink {} must lie in (0, 1)",
                self.armijo_shrink
            )));
        }
        if !(self.armijo_slope > 0.0 && self.armijo_slope < 1.0) {
            return Err(Error::Invalid(format!(
                "Armijo slope {} must lie in (0, 1)",
                self.armijo_slope
            )));
        }
        if self.max_backtracks == 0 {
            return Err(Error::Invalid(
                "line search needs at least one trial".into(),
            ));
        }
        Ok(())
    }
}

/// One line of the optimization log. `theta` is the step taken *from* this
/// iterate (0 on the terminal line).
#[derive(Clone, Copy, Debug, Serialize)]
pub struct IterationRecord {
    pub iter: usize,
    pub cost: f64,
    pub cost_se: f64,
    pub gap: f64,
    pub theta: f64,
}

/// Writes the log as CSV with header `iter,cost,cost_se,gap,theta`.
pub fn write_iterations_csv<W: std::io::Write>(
    records: &[IterationRecord],
    out: &mut W,
) -> std::io::Result<()> {
    writeln!(out, "iter,cost,cost_se,gap,theta")?;
    for r in records {
        writeln!(
            out,
            "{},{},{},{},{}",
            r.iter, r.cost, r.cost_se, r.gap, r.theta
        )?;
    }
    Ok(())
}

#[derive(Debug)]
pub struct OptimizeResult {
    pub schedule: RelaxedControlSchedule,
    pub iterations: Vec<IterationRecord>,
    pub converged: bool,
    pub final_cost: CostEstimate,
    pub final_gap: GapReport,
}

/// Minimizes the cost over relaxed schedules starting from `initial`, on a
/// fixed path bundle (common random numbers across all evaluations).
///
/// The log has one record per visited iterate, at most `max_iters + 1`;
/// `converged` means the final gap is at or below `gap_tol`.
pub fn optimize(
    spec: &ProblemSpec,
    initial: &RelaxedControlSchedule,
    paths: &PathBundle,
    basis: &RegressionBasis,
    opts: &OptimizerOptions,
) -> Result<OptimizeResult> {
    opts.validate()?;
    let mut mu = initial.clone();
    let mut carried: Option<(TrajectoryBundle, CostEstimate)> = None;
    let mut records = Vec::new();

    for iter in 0..=opts.max_iters {
        let (traj, cost) = match carried.take() {
            Some(tc) => tc,
            None => {
                let traj = solve_bsde(spec, &mu, paths, basis)?;
                let cost = evaluate_cost(spec, &mu, &traj)?;
                (traj, cost)
            }
        };
        let adj = solve_adjoint(spec, &mu, &traj, paths)?;
        let gap = hamiltonian_gap(spec, &traj, &adj, &mu)?;

        let converged = gap.total_gap <= opts.gap_tol;
        if converged || iter == opts.max_iters {
            records.push(IterationRecord {
                iter,
                cost: cost.mean,
                cost_se: cost.std_error,
                gap: gap.total_gap,
                theta: 0.0,
            });
            return Ok(OptimizeResult {
                schedule: mu,
                iterations: records,
                converged,
                final_cost: cost,
                final_gap: gap,
            });
        }

        let best = StrictControlSchedule::new(gap.argmax.clone(), spec.grid().len())?;
        let direction = dirac_embed(&best, spec.grid())?;

        let try_step =
            |theta: f64| -> Result<(RelaxedControlSchedule, TrajectoryBundle, CostEstimate)> {
                let trial = mix(&mu, &direction, theta)?;
                let traj = solve_bsde(spec, &trial, paths, basis)?;
                let cost = evaluate_cost(spec, &trial, &traj)?;
                Ok((trial, traj, cost))
            };

        let harmonic = 2.0 / (iter as f64 + 2.0);
        let (theta, next_mu, next_traj, next_cost) = match opts.step_rule {
            StepRule::Harmonic => {
                let (m, t, c) = try_step(harmonic)?;
                (harmonic, m, t, c)
            }
            StepRule::Backtracking => {
                let mut found = None;
                let mut theta = 1.0;
                for _ in 0..opts.max_backtracks {
                    let (m, t, c) = try_step(theta)?;
                    if c.mean <= cost.mean - opts.armijo_slope * theta * gap.total_gap {
                        found = Some((theta, m, t, c));
                        break;
                    }
                    theta *= opts.armijo_shrink;
                }
                match found {
                    Some(hit) => hit,
                    None => {
                        let (m, t, c) = try_step(harmonic)?;
                        (harmonic, m, t, c)
                    }
                }
            }
        };

        records.push(IterationRecord {
            iter,
            cost: cost.mean,
            cost_se: cost.std_error,
            gap: gap.total_gap,
            theta,
        });
        mu = next_mu;
        carried = Some((next_traj, next_cost));
    }
    unreachable!("loop always returns at or before max_iters");
}

/// Which representation of the cost derivative to evaluate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DerivativeForm {
    /// Hamiltonian pairing: `E sum_k (H_bar(mu_k) - H_bar(q_k)) dt` with the
    /// adjoint along the `mu`-trajectory.
    Adjoint,
    /// First-order cost expansion through the linearized state:
    /// `E[ g_y(y_0) ytil_0 + sum_k (h_bar(q) - h_bar(mu)
    ///   + h_y(mu) . ytil + h_z(mu) : ztil) dt ]`.
    Variational,
}

/// A derivative estimate with its Monte Carlo standard error.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct DirectionalDerivative {
    pub value: f64,
    pub std_error: f64,
    pub form: DerivativeForm,
}

/// Derivative of the cost at `mu` in the direction of `q` (the slope of
/// `theta -> J((1-theta) mu + theta q)` at `theta = 0`).
pub fn directional_derivative(
    spec: &ProblemSpec,
    mu: &RelaxedControlSchedule,
    q: &RelaxedControlSchedule,
    paths: &PathBundle,
    basis: &RegressionBasis,
    form: DerivativeForm,
) -> Result<DirectionalDerivative> {
    let traj = solve_bsde(spec, mu, paths, basis)?;
    let steps = spec.time().steps();
    let dt = spec.time().dt();
    let n_paths = paths.n_paths();
    let per_path: Vec<f64> = match form {
        DerivativeForm::Adjoint => {
            let adj = solve_adjoint(spec, mu, &traj, paths)?;
            let chunks = map_path_chunks(n_paths, |range| {
                let mut ws = crate::hamiltonian::HamiltonianWorkspace::new(spec);
                let mut out = Vec::with_capacity(range.len());
                for p in range {
                    let mut acc = 0.0;
                    for k in 0..steps {
                        let t_k = spec.time().node(k);
                        let y = traj.y(k, p);
                        let z = traj.z(k, p);
                        let pk = adj.value(k, p);
                        let h_mu = crate::hamiltonian::relaxed_hamiltonian(
                            spec,
                            t_k,
                            y,
                            z,
                            pk,
                            mu.row(k),
                            &mut ws,
                        );
                        let h_q = crate::hamiltonian::relaxed_hamiltonian(
                            spec,
                            t_k,
                            y,
                            z,
                            pk,
                            q.row(k),
                            &mut ws,
                        );
                        acc += (h_mu - h_q) * dt;
                    }
                    out.push(acc);
                }
                out
            });
            chunks.into_iter().flatten().collect()
        }
        DerivativeForm::Variational => {
            let var = solve_variational_bsde(spec, mu, q, &traj, paths, basis)?;
            let n = spec.state_dim();
            let nd = n * spec.noise_dim();
            let chunks = map_path_chunks(n_paths, |range| {
                let mut gy = vec![0.0; n];
                let mut hy = vec![0.0; n];
                let mut hz = vec![0.0; nd];
                let mut scratch = vec![0.0; n.max(nd)];
                let mut out = Vec::with_capacity(range.len());
                for p in range {
                    spec.terminal_cost_grad_into(traj.y(0, p), &mut gy);
                    let mut acc: f64 = gy.iter().zip(var.y(0, p)).map(|(a, b)| a * b).sum();
                    for k in 0..steps {
                        let t_k = spec.time().node(k);
                        let y = traj.y(k, p);
                        let z = traj.z(k, p);
                        let mu_k = mu.row(k);
                        let mut term = spec.running_cost_avg(t_k, y, z, q.row(k))
                            - spec.running_cost_avg(t_k, y, z, mu_k);
                        spec.running_cost_grad_y_avg_into(
                            t_k,
                            y,
                            z,
                            mu_k,
                            &mut hy,
                            &mut scratch[..n],
                        );
                        spec.running_cost_grad_z_avg_into(
                            t_k,
                            y,
                            z,
                            mu_k,
                            &mut hz,
                            &mut scratch[..nd],
                        );
                        term += hy.iter().zip(var.y(k, p)).map(|(a, b)| a * b).sum::<f64>();
                        term += hz.iter().zip(var.z(k, p)).map(|(a, b)| a * b).sum::<f64>();
                        acc += term * dt;
                    }
                    out.push(acc);
                }
                out
            });
            chunks.into_iter().flatten().collect()
        }
    };
    if let Some(bad) = per_path.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!(
            "directional derivative on path {bad}"
        )));
    }
    let (value, std_error) = mean_and_se(&per_path);
    Ok(DirectionalDerivative {
        value,
        std_error,
        form,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::paths::generate_paths;
    use crate::problem::{ControlGrid, TimeGrid};

    /// b = v, h = v^2/2, g = y, xi = W_T on {0, 0.5, 1, 1.5, 2}.
    fn spec_quad(steps: usize) -> ProblemSpec {
        ProblemSpec::builder(
            1,
            1,
            ControlGrid::scalar(&[0.0, 0.5, 1.0, 1.5, 2.0]).unwrap(),
            TimeGrid::new(1.0, steps).unwrap(),
        )
        .drift(|_, _, _, a, out| out[0] = a[0])
        .running_cost(|_, _, _, a| 0.5 * a[0] * a[0])
        .terminal_cost(|y| y[0])
        .terminal_condition(|path, out| path.terminal_into(out))
        .drift_grad_y(|_, _, _, _, out| out[0] = 0.0)
        .drift_grad_z(|_, _, _, _, out| out[0] = 0.0)
        .running_cost_grad_y(|_, _, _, _, out| out[0] = 0.0)
        .running_cost_grad_z(|_, _, _, _, out| out[0] = 0.0)
        .terminal_cost_grad(|_, out| out[0] = 1.0)
        .build()
        .unwrap()
    }

    /// b = v, h = 0, g = y^2, xi = 0 on {-1, +1}. The value is
    /// `(integral of the mean control)^2` with no Monte Carlo noise.
    fn spec_bang(steps: usize) -> ProblemSpec {
        ProblemSpec::builder(
            1,
            1,
            ControlGrid::scalar(&[-1.0, 1.0]).unwrap(),
            TimeGrid::new(1.0, steps).unwrap(),
        )
        .drift(|_, _, _, a, out| out[0] = a[0])
        .running_cost(|_, _, _, _| 0.0)
        .terminal_cost(|y| y[0] * y[0])
        .terminal_condition(|_, out| out[0] = 0.0)
        .drift_grad_y(|_, _, _, _, out| out[0] = 0.0)
        .drift_grad_z(|_, _, _, _, out| out[0] = 0.0)
        .running_cost_grad_y(|_, _, _, _, out| out[0] = 0.0)
        .running_cost_grad_z(|_, _, _, _, out| out[0] = 0.0)
        .terminal_cost_grad(|y, out| out[0] = 2.0 * y[0])
        .build()
        .unwrap()
    }

    fn dirac(steps: usize, index: usize, m: usize, grid: &ControlGrid) -> RelaxedControlSchedule {
        dirac_embed(
            &StrictControlSchedule::constant(steps, index, m).unwrap(),
            grid,
        )
        .unwrap()
    }

    #[test]
    fn quadratic_problem_converges_in_one_step() {
        let steps = 8;
        let spec = spec_quad(steps);
        let initial = dirac(steps, 0, 5, spec.grid());
        let paths = generate_paths(7, 2048, spec.time(), 1).unwrap();
        let basis = RegressionBasis::new(2).unwrap();
        let result = optimize(
            &spec,
            &initial,
            &paths,
            &basis,
            &OptimizerOptions::default(),
        )
        .unwrap();
        assert!(result.converged);
        assert_eq!(result.iterations.len(), 2);
        let first = &result.iterations[0];
        assert!((first.gap - 0.5).abs() < 1e-10, "gap {}", first.gap);
        assert_eq!(first.theta, 1.0); // full step accepted
        assert!((first.cost).abs() < 0.05, "initial cost {}", first.cost);
        let last = &result.iterations[1];
        assert_eq!(last.theta, 0.0);
        assert!((last.cost + 0.5).abs() < 0.05, "final cost {}", last.cost);
        assert_eq!(result.final_gap.total_gap, 0.0);
        for k in 0..steps {
            assert_eq!(result.schedule.dirac_index(k), Some(2), "step {k}");
        }
    }

    #[test]
    fn bang_problem_rejects_full_step_then_averages() {
        // From the Dirac at +1 the best response is the Dirac at -1 with
        // J = 1 on both, so theta = 1 fails Armijo and theta = 1/2 lands on
        // the exact mean-zero optimum.
        let steps = 8;
        let spec = spec_bang(steps);
        let initial = dirac(steps, 1, 2, spec.grid());
        let paths = generate_paths(7, 1024, spec.time(), 1).unwrap();
        let basis = RegressionBasis::new(1).unwrap();
        let result = optimize(
            &spec,
            &initial,
            &paths,
            &basis,
            &OptimizerOptions::default(),
        )
        .unwrap();
        assert!(result.converged, "{:?}", result.iterations);
        assert_eq!(result.iterations.len(), 2);
        let first = &result.iterations[0];
        assert!((first.gap - 4.0).abs() < 1e-10, "gap {}", first.gap);
        assert!((first.cost - 1.0).abs() < 1e-10, "cost {}", first.cost);
        assert_eq!(first.theta, 0.5);
        assert!(result.final_cost.mean.abs() < 1e-10);
        for k in 0..steps {
            assert_eq!(result.schedule.row(k), &[0.5, 0.5], "step {k}");
        }
    }

    #[test]
    fn harmonic_rule_takes_the_scheduled_steps() {
        let steps = 6;
        let spec = spec_quad(steps);
        let initial = dirac(steps, 0, 5, spec.grid());
        let paths = generate_paths(7, 1024, spec.time(), 1).unwrap();
        let basis = RegressionBasis::new(2).unwrap();
        let opts = OptimizerOptions {
            step_rule: StepRule::Harmonic,
            ..Default::default()
        };
        let result = optimize(&spec, &initial, &paths, &basis, &opts).unwrap();
        assert!(result.converged);
        assert_eq!(result.iterations[0].theta, 1.0); // 2 / (0 + 2)
    }

    #[test]
    fn zero_iteration_budget_only_evaluates() {
        let steps = 4;
        let spec = spec_quad(steps);
        let initial = dirac(steps, 0, 5, spec.grid());
        let paths = generate_paths(7, 512, spec.time(), 1).unwrap();
        let basis = RegressionBasis::new(2).unwrap();
        let opts = OptimizerOptions {
            max_iters: 0,
            ..Default::default()
        };
        let result = optimize(&spec, &initial, &paths, &basis, &opts).unwrap();
        assert!(!result.converged);
        assert_eq!(result.iterations.len(), 1);
        assert_eq!(result.iterations[0].theta, 0.0);
    }

    #[test]
    fn derivative_forms_agree_on_the_quadratic_problem() {
        let steps = 8;
        let spec = spec_quad(steps);
        let mu = dirac(steps, 0, 5, spec.grid());
        let q = dirac(steps, 2, 5, spec.grid());
        let paths = generate_paths(7, 2048, spec.time(), 1).unwrap();
        let basis = RegressionBasis::new(2).unwrap();
        let adj = directional_derivative(&spec, &mu, &q, &paths, &basis, DerivativeForm::Adjoint)
            .unwrap();
        let var =
            directional_derivative(&spec, &mu, &q, &paths, &basis, DerivativeForm::Variational)
                .unwrap();
        assert!((adj.value + 0.5).abs() < 1e-10, "adjoint {}", adj.value);
        assert_eq!(adj.std_error, 0.0); // identical on every path here
        assert!((var.value + 0.5).abs() < 1e-8, "variational {}", var.value);
        assert!((adj.value - var.value).abs() < 1e-8);
    }

    #[test]
    fn derivative_matches_finite_differences_to_first_order() {
        // On the bang problem J(theta) = (1 - 2 theta)^2 exactly, so the
        // forward difference error is 4 theta exactly: it halves with theta.
        let steps = 8;
        let spec = spec_bang(steps);
        let mu = dirac(steps, 1, 2, spec.grid());
        let q = dirac(steps, 0, 2, spec.grid());
        let paths = generate_paths(7, 512, spec.time(), 1).unwrap();
        let basis = RegressionBasis::new(1).unwrap();
        let d = directional_derivative(&spec, &mu, &q, &paths, &basis, DerivativeForm::Adjoint)
            .unwrap();
        assert!((d.value + 4.0).abs() < 1e-10, "D {}", d.value);
        let cost_at = |theta: f64| {
            let m = mix(&mu, &q, theta).unwrap();
            let traj = solve_bsde(&spec, &m, &paths, &basis).unwrap();
            evaluate_cost(&spec, &m, &traj).unwrap().mean
        };
        let j0 = cost_at(0.0);
        let mut prev_err = f64::INFINITY;
        for theta in [0.2, 0.1, 0.05] {
            let fd = (cost_at(theta) - j0) / theta;
            let err = (fd - d.value).abs();
            assert!((err - 4.0 * theta).abs() < 1e-8, "theta {theta}: err {err}");
            assert!(err < prev_err / 1.5, "no first-order decay at {theta}");
            prev_err = err;
        }
    }

    #[test]
    fn log_is_capped_and_marks_non_convergence() {
        // Unreachable tolerance: the run must stop at max_iters with a
        // terminal zero-theta record.
        let steps = 4;
        let spec = spec_quad(steps);
        let initial = dirac(steps, 0, 5, spec.grid());
        let paths = generate_paths(7, 256, spec.time(), 1).unwrap();
        let basis = RegressionBasis::new(2).unwrap();
        let opts = OptimizerOptions {
            max_iters: 3,
            gap_tol: 0.0,
            ..Default::default()
        };
        let result = optimize(&spec, &initial, &paths, &basis, &opts).unwrap();
        assert!(!result.converged || result.final_gap.total_gap == 0.0);
        assert!(result.iterations.len() <= 4);
        assert_eq!(result.iterations.last().unwrap().theta, 0.0);
    }

    #[test]
    fn invalid_options_are_rejected() {
        let steps = 2;
        let spec = spec_quad(steps);
        let initial = dirac(steps, 0, 5, spec.grid());
        let paths = generate_paths(7, 64, spec.time(), 1).unwrap();
        let basis = RegressionBasis::new(1).unwrap();
        for bad in [
            OptimizerOptions {
                gap_tol: -1.0,
                ..Default::default()
            },
            OptimizerOptions {
                armijo_shrink: 1.0,
                ..Default::default()
            },
            OptimizerOptions {
                armijo_slope: 0.0,
                ..Default::default()
            },
            OptimizerOptions {
                max_backtracks: 0,
                ..Default::default()
            },
        ] {
            assert!(optimize(&spec, &initial, &paths, &basis, &bad).is_err());
        }
    }

    #[test]
    fn iteration_csv_has_the_expected_header() {
        let records = vec![IterationRecord {
            iter: 0,
            cost: 1.0,
            cost_se: 0.1,
            gap: 0.5,
            theta: 1.0,
        }];
        let mut buf = Vec::new();
        write_iterations_csv(&records, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("iter,cost,cost_se,gap,theta\n"), "{text}");
        assert!(
            text.lines().nth(1).unwrap().starts_with("0,1,0.1,0.5,1"),
            "{text}"
        );
    }
}
