//! Hamiltonian evaluation, best responses, and the optimality gap.
//!
//! The strict Hamiltonian is `H(t, y, z, p, a) = p . b(t, y, z, a) -
//! h(t, y, z, a)`; its relaxed version averages `H` under a weight row and is
//! linear in the weights. A schedule satisfies the (discrete) maximum
//! principle when, at every step, its weight row concentrates on grid points
//! maximizing the path-averaged Hamiltonian; the *gap* integrates how far the
//! current schedule is from that best response. Each per-step gap is a sum of
//! `weight * (max - value)` terms, so it is nonnegative exactly in floating
//! point, and it is zero exactly when the row is a best-response Dirac.

use serde::Serialize;

use crate::adjoint::AdjointBundle;
use crate::bsde::TrajectoryBundle;
use crate::error::{Error, Result};
use crate::parallel::map_path_chunks;
use crate::problem::{ProblemSpec, RelaxedControlSchedule, StrictControlSchedule};

/// Scratch for Hamiltonian evaluations (one drift output per call).
#[derive(Debug)]
pub struct HamiltonianWorkspace {
    drift: Vec<f64>,
}

impl HamiltonianWorkspace {
    pub fn new(spec: &ProblemSpec) -> Self {
        Self {
            drift: vec![0.0; spec.state_dim()],
        }
    }
}

/// `H(t, y, z, p, a) = p . b - h` at one grid point value `a`.
pub fn strict_hamiltonian(
    spec: &ProblemSpec,
    t: f64,
    y: &[f64],
    z: &[f64],
    p: &[f64],
    a: &[f64],
    ws: &mut HamiltonianWorkspace,
) -> f64 {
    spec.drift_into(t, y, z, a, &mut ws.drift);
    let mut v = -spec.running_cost(t, y, z, a);
    for (pi, bi) in p.iter().zip(&ws.drift) {
        v += pi * bi;
    }
    v
}

/// Weight-averaged Hamiltonian; zero weights are skipped, so a Dirac row
/// reproduces [`strict_hamiltonian`] bit for bit.
pub fn relaxed_hamiltonian(
    spec: &ProblemSpec,
    t: f64,
    y: &[f64],
    z: &[f64],
    p: &[f64],
    weights: &[f64],
    ws: &mut HamiltonianWorkspace,
) -> f64 {
    debug_assert_eq!(weights.len(), spec.grid().len());
    // First contribution assigned, not added to zero, so a negative-zero
    // Hamiltonian keeps its sign bit under a Dirac row.
    let mut acc = 0.0;
    let mut first = true;
    for (j, &w) in weights.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        let term = w * strict_hamiltonian(spec, t, y, z, p, spec.grid().point(j), ws);
        if first {
            acc = term;
            first = false;
        } else {
            acc += term;
        }
    }
    acc
}

/// Path-averaged Hamiltonian per (step, grid point).
#[derive(Clone, Debug)]
pub struct HamiltonianTable {
    values: Vec<f64>, // steps * grid_len, row-major
    steps: usize,
    grid_len: usize,
}

impl HamiltonianTable {
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn grid_len(&self) -> usize {
        self.grid_len
    }

    pub fn row(&self, k: usize) -> &[f64] {
        &self.values[k * self.grid_len..(k + 1) * self.grid_len]
    }

    /// Index of the row maximum, lowest index on ties.
    pub fn argmax(&self, k: usize) -> usize {
        let row = self.row(k);
        let mut best = 0;
        for (j, &v) in row.iter().enumerate().skip(1) {
            if v > row[best] {
                best = j;
            }
        }
        best
    }
}

fn check_bundles(
    spec: &ProblemSpec,
    traj: &TrajectoryBundle,
    adjoint: &AdjointBundle,
) -> Result<()> {
    if traj.steps() != spec.time().steps()
        || traj.state_dim() != spec.state_dim()
        || traj.noise_dim() != spec.noise_dim()
    {
        return Err(Error::Shape("trajectory does not match the problem".into()));
    }
    if adjoint.steps() != traj.steps()
        || adjoint.n_paths() != traj.n_paths()
        || adjoint.state_dim() != traj.state_dim()
    {
        return Err(Error::Shape("adjoint does not match the trajectory".into()));
    }
    Ok(())
}

/// Averages `H(t_k, y_k, z_k, p_k, a_j)` over paths for every step `k` and
/// grid index `j`. Chunk partial sums are combined in chunk order.
pub fn mean_hamiltonian_table(
    spec: &ProblemSpec,
    traj: &TrajectoryBundle,
    adjoint: &AdjointBundle,
) -> Result<HamiltonianTable> {
    check_bundles(spec, traj, adjoint)?;
    let steps = traj.steps();
    let m = spec.grid().len();
    let n_paths = traj.n_paths();
    let partials = map_path_chunks(n_paths, |range| {
        let mut ws = HamiltonianWorkspace::new(spec);
        let mut acc = vec![0.0; steps * m];
        for p in range {
            for k in 0..steps {
                let t_k = spec.time().node(k);
                let y = traj.y(k, p);
                let z = traj.z(k, p);
                let pk = adjoint.value(k, p);
                for j in 0..m {
                    acc[k * m + j] +=
                        strict_hamiltonian(spec, t_k, y, z, pk, spec.grid().point(j), &mut ws);
                }
            }
        }
        acc
    });
    let mut values = vec![0.0; steps * m];
    for part in partials {
        for (a, b) in values.iter_mut().zip(&part) {
            *a += b;
        }
    }
    let inv = 1.0 / n_paths as f64;
    for v in values.iter_mut() {
        *v *= inv;
    }
    if let Some(bad) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!(
            "mean Hamiltonian at step {}, grid index {}",
            bad / m,
            bad % m
        )));
    }
    Ok(HamiltonianTable {
        values,
        steps,
        grid_len: m,
    })
}

/// The pointwise maximizer of the table: a strict schedule choosing, at each
/// step, the lowest grid index attaining the row maximum.
pub fn best_response(table: &HamiltonianTable) -> Result<StrictControlSchedule> {
    let indices: Vec<usize> = (0..table.steps()).map(|k| table.argmax(k)).collect();
    StrictControlSchedule::new(indices, table.grid_len())
}

/// Integrated distance from the maximum principle.
#[derive(Clone, Debug, Serialize)]
pub struct GapReport {
    /// `sum_k per_step[k] * dt`; exactly zero iff every row already sits on
    /// best responses.
    pub total_gap: f64,
    /// `sum_j mu[k][j] * (max_j' table[k][j'] - table[k][j])`, one per step.
    pub per_step: Vec<f64>,
    /// Best-response grid index per step (lowest index on ties).
    pub argmax: Vec<usize>,
    /// Standard error of the per-path gap estimate (best response held
    /// fixed at `argmax`).
    pub std_error: f64,
}

/// Measures how far `mu` is from stepwise Hamiltonian maximization along the
/// solved trajectory.
///
/// `per_step` entries are sums of nonnegative terms, so `total_gap >= 0`
/// holds exactly; no tolerance is involved. The standard error is estimated
/// from per-path totals with the best-response indices frozen.
pub fn hamiltonian_gap(
    spec: &ProblemSpec,
    traj: &TrajectoryBundle,
    adjoint: &AdjointBundle,
    mu: &RelaxedControlSchedule,
) -> Result<GapReport> {
    check_bundles(spec, traj, adjoint)?;
    let steps = traj.steps();
    let m = spec.grid().len();
    if mu.steps() != steps || mu.grid_len() != m {
        return Err(Error::Shape("schedule does not match the problem".into()));
    }
    let table = mean_hamiltonian_table(spec, traj, adjoint)?;
    let argmax: Vec<usize> = (0..steps).map(|k| table.argmax(k)).collect();
    let mut per_step = Vec::with_capacity(steps);
    for k in 0..steps {
        let row = table.row(k);
        let best = row[argmax[k]];
        let mut gap = 0.0;
        for (j, &w) in mu.row(k).iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            gap += w * (best - row[j]);
        }
        per_step.push(gap);
    }
    let dt = spec.time().dt();
    let total_gap: f64 = per_step.iter().map(|g| g * dt).sum();

    // Per-path totals with the best response frozen, for the standard error.
    let n_paths = traj.n_paths();
    let chunks = map_path_chunks(n_paths, |range| {
        let mut ws = HamiltonianWorkspace::new(spec);
        let mut out = Vec::with_capacity(range.len());
        for p in range {
            let mut delta = 0.0;
            for (k, &amax) in argmax.iter().enumerate() {
                let t_k = spec.time().node(k);
                let y = traj.y(k, p);
                let z = traj.z(k, p);
                let pk = adjoint.value(k, p);
                let best =
                    strict_hamiltonian(spec, t_k, y, z, pk, spec.grid().point(amax), &mut ws);
                let cur = relaxed_hamiltonian(spec, t_k, y, z, pk, mu.row(k), &mut ws);
                delta += (best - cur) * dt;
            }
            out.push(delta);
        }
        out
    });
    let mut deltas = Vec::with_capacity(n_paths);
    for c in chunks {
        deltas.extend(c);
    }
    let (_, std_error) = crate::bsde::mean_and_se(&deltas);

    Ok(GapReport {
        total_gap,
        per_step,
        argmax,
        std_error,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adjoint::solve_adjoint;
    use crate::bsde::solve_bsde;
    use crate::paths::generate_paths;
    use crate::problem::{dirac_embed, ControlGrid, StrictControlSchedule, TimeGrid};
    use crate::regression::RegressionBasis;
    use crate::rng::ProbeRng;

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

    fn pipeline(
        spec: &ProblemSpec,
        mu: &RelaxedControlSchedule,
        n_paths: usize,
    ) -> (TrajectoryBundle, AdjointBundle) {
        let paths = generate_paths(7, n_paths, spec.time(), 1).unwrap();
        let basis = RegressionBasis::new(2).unwrap();
        let traj = solve_bsde(spec, mu, &paths, &basis).unwrap();
        let adj = solve_adjoint(spec, mu, &traj, &paths).unwrap();
        (traj, adj)
    }

    #[test]
    fn dirac_row_matches_strict_hamiltonian_bitwise() {
        let spec = spec_quad(4);
        let mut ws = HamiltonianWorkspace::new(&spec);
        let y = [0.3];
        let z = [-1.2];
        let p = [0.7];
        for j in 0..5 {
            let strict = strict_hamiltonian(&spec, 0.5, &y, &z, &p, spec.grid().point(j), &mut ws);
            let mut w = vec![0.0; 5];
            w[j] = 1.0;
            let relaxed = relaxed_hamiltonian(&spec, 0.5, &y, &z, &p, &w, &mut ws);
            assert_eq!(strict.to_bits(), relaxed.to_bits(), "grid index {j}");
        }
    }

    #[test]
    fn relaxed_hamiltonian_is_the_weighted_sum() {
        let spec = spec_quad(4);
        let mut ws = HamiltonianWorkspace::new(&spec);
        let mut rng = ProbeRng::new(3);
        for _ in 0..20 {
            let y = [rng.normal()];
            let z = [rng.normal()];
            let p = [rng.normal()];
            let w = rng.simplex(5);
            let got = relaxed_hamiltonian(&spec, 0.25, &y, &z, &p, &w, &mut ws);
            let manual: f64 = (0..5)
                .map(|j| {
                    w[j] * strict_hamiltonian(
                        &spec,
                        0.25,
                        &y,
                        &z,
                        &p,
                        spec.grid().point(j),
                        &mut ws,
                    )
                })
                .sum();
            assert!((got - manual).abs() < 1e-14);
        }
    }

    #[test]
    fn gap_at_zero_control_matches_hand_value() {
        // p = 1 everywhere; H(a) = a - a^2/2 peaks at a = 1 (index 2) with
        // value 1/2, so the Dirac-at-0 schedule has gap 1/2.
        let steps = 8;
        let spec = spec_quad(steps);
        let mu = dirac_embed(
            &StrictControlSchedule::constant(steps, 0, 5).unwrap(),
            spec.grid(),
        )
        .unwrap();
        let (traj, adj) = pipeline(&spec, &mu, 1024);
        let report = hamiltonian_gap(&spec, &traj, &adj, &mu).unwrap();
        assert!(
            (report.total_gap - 0.5).abs() < 1e-10,
            "gap {}",
            report.total_gap
        );
        assert!(report.argmax.iter().all(|&j| j == 2), "{:?}", report.argmax);
        for g in &report.per_step {
            assert!((g - 0.5).abs() < 1e-10);
        }
        assert!(report.std_error >= 0.0 && report.std_error < 1e-10);
    }

    #[test]
    fn gap_vanishes_exactly_on_the_best_response() {
        let steps = 6;
        let spec = spec_quad(steps);
        let mu = dirac_embed(
            &StrictControlSchedule::constant(steps, 0, 5).unwrap(),
            spec.grid(),
        )
        .unwrap();
        let (traj, adj) = pipeline(&spec, &mu, 512);
        let table = mean_hamiltonian_table(&spec, &traj, &adj).unwrap();
        let best = best_response(&table).unwrap();
        let best_relaxed = dirac_embed(&best, spec.grid()).unwrap();
        // Same trajectory and adjoint: the best response has zero gap by
        // construction, exactly.
        let report = hamiltonian_gap(&spec, &traj, &adj, &best_relaxed).unwrap();
        assert_eq!(report.total_gap, 0.0);
        assert!(report.per_step.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn gap_is_nonnegative_for_random_schedules() {
        let steps = 5;
        let spec = spec_quad(steps);
        let mut rng = ProbeRng::new(11);
        for _ in 0..10 {
            let rows: Vec<Vec<f64>> = (0..steps).map(|_| rng.simplex(5)).collect();
            let mu = RelaxedControlSchedule::from_rows(rows).unwrap();
            let (traj, adj) = pipeline(&spec, &mu, 256);
            let report = hamiltonian_gap(&spec, &traj, &adj, &mu).unwrap();
            assert!(report.total_gap >= 0.0);
            assert!(report.per_step.iter().all(|&g| g >= 0.0));
        }
    }

    #[test]
    fn argmax_ties_take_the_lowest_index() {
        // g = 0 makes the adjoint vanish, and h = 0 too, so the Hamiltonian
        // is identically zero at every grid point: an exact tie everywhere.
        let steps = 3;
        let spec = ProblemSpec::builder(
            1,
            1,
            ControlGrid::scalar(&[-1.0, 1.0]).unwrap(),
            TimeGrid::new(1.0, steps).unwrap(),
        )
        .drift(|_, _, _, a, out| out[0] = a[0])
        .running_cost(|_, _, _, _| 0.0)
        .terminal_cost(|_| 0.0)
        .terminal_condition(|path, out| path.terminal_into(out))
        .build()
        .unwrap();
        let mu = RelaxedControlSchedule::uniform(steps, 2).unwrap();
        let (traj, adj) = pipeline(&spec, &mu, 128);
        let table = mean_hamiltonian_table(&spec, &traj, &adj).unwrap();
        let best = best_response(&table).unwrap();
        assert!(
            best.indices().iter().all(|&j| j == 0),
            "{:?}",
            best.indices()
        );
    }

    #[test]
    fn gap_report_serializes_all_fields() {
        let steps = 3;
        let spec = spec_quad(steps);
        let mu = RelaxedControlSchedule::uniform(steps, 5).unwrap();
        let (traj, adj) = pipeline(&spec, &mu, 128);
        let report = hamiltonian_gap(&spec, &traj, &adj, &mu).unwrap();
        let json = serde_json::to_value(&report).unwrap();
        for key in ["total_gap", "per_step", "argmax", "std_error"] {
            assert!(json.get(key).is_some(), "missing {key}");
        }
    }
}
