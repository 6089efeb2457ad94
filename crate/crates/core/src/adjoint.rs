//! Adjoint (costate) process attached to a solved trajectory.
//!
//! For the backward state equation the adjoint runs *forward*: it starts from
//! the terminal-cost gradient at the initial state and propagates by
//!
//! `p_0 = g_y(y_0)`,
//! `p_{k+1} = p_k - Hy_k dt - Hz_k dW_k`,
//!
//! where `Hy = b_y^T p - h_y` and `Hz[l][j] = sum_i p_i db_i/dz_{lj} -
//! h_z[l][j]` are the state and volatility gradients of the Hamiltonian
//! `p . b - h`, with all coefficients weight-averaged under the schedule row
//! and evaluated along the stored trajectory. Pairing `p` with the
//! variational state turns the cost derivative into the Hamiltonian form
//! used by the optimality gap.

use crate::bsde::TrajectoryBundle;
use crate::error::{Error, Result};
use crate::parallel::for_path_chunks_mut;
use crate::paths::{PathBundle, MAX_BUNDLE_LEN};
use crate::problem::{ProblemSpec, RelaxedControlSchedule};

/// Adjoint values for every path and node, path-major:
/// `p[path * (steps + 1) * n + k * n + i]`.
#[derive(Debug)]
pub struct AdjointBundle {
    p: Vec<f64>,
    n_paths: usize,
    steps: usize,
    state_dim: usize,
}

impl AdjointBundle {
    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    /// Adjoint at node `k` (0..=steps) on path `p`.
    pub fn value(&self, k: usize, path: usize) -> &[f64] {
        let n = self.state_dim;
        let base = (path * (self.steps + 1) + k) * n;
        &self.p[base..base + n]
    }
}

/// Propagates the adjoint forward along every path of `traj` under the
/// schedule `mu`.
pub fn solve_adjoint(
    spec: &ProblemSpec,
    mu: &RelaxedControlSchedule,
    traj: &TrajectoryBundle,
    paths: &PathBundle,
) -> Result<AdjointBundle> {
    let n = spec.state_dim();
    let d = spec.noise_dim();
    let nd = n * d;
    let steps = spec.time().steps();
    let n_paths = traj.n_paths();
    if traj.steps() != steps || traj.state_dim() != n || traj.noise_dim() != d {
        return Err(Error::Shape("trajectory does not match the problem".into()));
    }
    if paths.n_paths() != n_paths || paths.steps() != steps || paths.noise_dim() != d {
        return Err(Error::Shape("paths do not match the trajectory".into()));
    }
    if mu.steps() != steps || mu.grid_len() != spec.grid().len() {
        return Err(Error::Shape("schedule does not match the problem".into()));
    }
    let dt = spec.time().dt();
    let stride = (steps + 1) * n;
    let total = n_paths
        .checked_mul(stride)
        .filter(|&v| v <= MAX_BUNDLE_LEN)
        .ok_or_else(|| {
            Error::Resource(format!(
                "adjoint buffer exceeds the {MAX_BUNDLE_LEN}-value limit"
            ))
        })?;
    let mut buf = vec![0.0; total];

    for_path_chunks_mut(&mut buf, stride, |first, rows| {
        let mut by = vec![0.0; n * n];
        let mut bz = vec![0.0; n * nd];
        let mut hy = vec![0.0; n];
        let mut hz = vec![0.0; nd];
        let mut scratch = vec![0.0; (n * n).max(n * nd)];
        let mut ham_y = vec![0.0; n];
        let mut ham_z = vec![0.0; nd];
        for (i, row) in rows.chunks_mut(stride).enumerate() {
            let path = first + i;
            spec.terminal_cost_grad_into(traj.y(0, path), &mut row[..n]);
            for k in 0..steps {
                let t_k = spec.time().node(k);
                let w = mu.row(k);
                let y_k = traj.y(k, path);
                let z_k = traj.z(k, path);
                spec.drift_grad_y_avg_into(t_k, y_k, z_k, w, &mut by, &mut scratch[..n * n]);
                spec.drift_grad_z_avg_into(t_k, y_k, z_k, w, &mut bz, &mut scratch[..n * nd]);
                spec.running_cost_grad_y_avg_into(t_k, y_k, z_k, w, &mut hy, &mut scratch[..n]);
                spec.running_cost_grad_z_avg_into(t_k, y_k, z_k, w, &mut hz, &mut scratch[..nd]);
                let (cur, rest) = row[k * n..].split_at_mut(n);
                let next = &mut rest[..n];
                // Hy_i = sum_l p_l db_l/dy_i - h_y[i]
                for i2 in 0..n {
                    let mut v = -hy[i2];
                    for l in 0..n {
                        v += cur[l] * by[l * n + i2];
                    }
                    ham_y[i2] = v;
                }
                // Hz[l][j] = sum_i p_i db_i/dz_{lj} - h_z[l][j]
                for e in 0..nd {
                    let mut v = -hz[e];
                    for i2 in 0..n {
                        v += cur[i2] * bz[i2 * nd + e];
                    }
                    ham_z[e] = v;
                }
                let dw = paths.increment(path, k);
                for i2 in 0..n {
                    let mut v = cur[i2] - ham_y[i2] * dt;
                    for (j, &dwj) in dw.iter().enumerate() {
                        v -= ham_z[i2 * d + j] * dwj;
                    }
                    next[i2] = v;
                }
            }
        }
    });

    if let Some(bad) = buf.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFiniteAt {
            what: "adjoint",
            path: bad / stride,
            step: (bad % stride) / n,
        });
    }
    Ok(AdjointBundle {
        p: buf,
        n_paths,
        steps,
        state_dim: n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bsde::solve_bsde;
    use crate::paths::generate_paths;
    use crate::problem::{dirac_embed, ControlGrid, StrictControlSchedule, TimeGrid};
    use crate::regression::RegressionBasis;

    fn pipeline(
        spec: &ProblemSpec,
        mu: &RelaxedControlSchedule,
        n_paths: usize,
        degree: usize,
    ) -> (TrajectoryBundle, AdjointBundle, PathBundle) {
        let paths = generate_paths(7, n_paths, spec.time(), spec.noise_dim()).unwrap();
        let basis = RegressionBasis::new(degree).unwrap();
        let traj = solve_bsde(spec, mu, &paths, &basis).unwrap();
        let adj = solve_adjoint(spec, mu, &traj, &paths).unwrap();
        (traj, adj, paths)
    }

    #[test]
    fn running_cost_in_state_gives_linear_adjoint() {
        // b = 0, h = y, g = 0: Hy = -1, so p_k = k dt exactly.
        let steps = 8;
        let spec = ProblemSpec::builder(
            1,
            1,
            ControlGrid::scalar(&[0.0]).unwrap(),
            TimeGrid::new(1.0, steps).unwrap(),
        )
        .drift(|_, _, _, _, out| out[0] = 0.0)
        .running_cost(|_, y, _, _| y[0])
        .terminal_cost(|_| 0.0)
        .terminal_condition(|path, out| path.terminal_into(out))
        .drift_grad_y(|_, _, _, _, out| out[0] = 0.0)
        .drift_grad_z(|_, _, _, _, out| out[0] = 0.0)
        .running_cost_grad_y(|_, _, _, _, out| out[0] = 1.0)
        .running_cost_grad_z(|_, _, _, _, out| out[0] = 0.0)
        .terminal_cost_grad(|_, out| out[0] = 0.0)
        .build()
        .unwrap();
        let mu = RelaxedControlSchedule::uniform(steps, 1).unwrap();
        let (_, adj, _) = pipeline(&spec, &mu, 256, 1);
        let dt = 1.0 / steps as f64;
        for path in [0, 100, 255] {
            for k in 0..=steps {
                assert_eq!(adj.value(k, path)[0], k as f64 * dt, "k {k} path {path}");
            }
        }
    }

    #[test]
    fn volatility_coupling_matches_manual_recursion() {
        // b = z, h = 0, g = y: Hz = p, so p_{k+1} = p_k (1 - dW_k) pathwise.
        let steps = 6;
        let spec = ProblemSpec::builder(
            1,
            1,
            ControlGrid::scalar(&[0.0]).unwrap(),
            TimeGrid::new(1.0, steps).unwrap(),
        )
        .drift(|_, _, z, _, out| out[0] = z[0])
        .running_cost(|_, _, _, _| 0.0)
        .terminal_cost(|y| y[0])
        .terminal_condition(|path, out| path.terminal_into(out))
        .drift_grad_y(|_, _, _, _, out| out[0] = 0.0)
        .drift_grad_z(|_, _, _, _, out| out[0] = 1.0)
        .running_cost_grad_y(|_, _, _, _, out| out[0] = 0.0)
        .running_cost_grad_z(|_, _, _, _, out| out[0] = 0.0)
        .terminal_cost_grad(|_, out| out[0] = 1.0)
        .build()
        .unwrap();
        let mu = RelaxedControlSchedule::uniform(steps, 1).unwrap();
        let (_, adj, paths) = pipeline(&spec, &mu, 128, 1);
        for path in [3, 64, 127] {
            let mut manual = 1.0_f64; // g_y = 1
            for k in 0..steps {
                assert_eq!(adj.value(k, path)[0].to_bits(), manual.to_bits(), "k {k}");
                manual -= manual * paths.increment(path, k)[0];
            }
            assert_eq!(adj.value(steps, path)[0].to_bits(), manual.to_bits());
        }
    }

    #[test]
    fn zero_terminal_condition_gives_exact_constant_adjoint() {
        // b = v, h = 0, g = y^2, xi = 0, Dirac at +1: y_0 = -1 exactly, so
        // p = -2 at every node on every path (state-free Hamiltonian).
        let steps = 8;
        let spec = ProblemSpec::builder(
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
        .unwrap();
        let mu = dirac_embed(
            &StrictControlSchedule::constant(steps, 1, 2).unwrap(),
            spec.grid(),
        )
        .unwrap();
        let (traj, adj, _) = pipeline(&spec, &mu, 512, 1);
        assert!(
            (traj.y(0, 0)[0] + 1.0).abs() < 1e-12,
            "y0 {}",
            traj.y(0, 0)[0]
        );
        for path in [0, 200, 511] {
            let p0 = adj.value(0, path)[0];
            assert!((p0 + 2.0).abs() < 1e-10, "p0 {p0}");
            for k in 1..=steps {
                assert_eq!(adj.value(k, path)[0].to_bits(), p0.to_bits());
            }
        }
    }

    #[test]
    fn adjoint_is_deterministic() {
        let steps = 5;
        let spec = ProblemSpec::builder(
            1,
            1,
            ControlGrid::scalar(&[0.0, 1.0]).unwrap(),
            TimeGrid::new(1.0, steps).unwrap(),
        )
        .drift(|_, y, _, a, out| out[0] = a[0] + 0.1 * y[0])
        .running_cost(|_, y, _, a| 0.5 * a[0] * a[0] + 0.1 * y[0])
        .terminal_cost(|y| y[0])
        .terminal_condition(|path, out| path.terminal_into(out))
        .build()
        .unwrap();
        let mu = RelaxedControlSchedule::uniform(steps, 2).unwrap();
        let (_, a, _) = pipeline(&spec, &mu, 300, 2);
        let (_, b, _) = pipeline(&spec, &mu, 300, 2);
        for path in 0..300 {
            for k in 0..=steps {
                assert_eq!(a.value(k, path), b.value(k, path));
            }
        }
    }
}
