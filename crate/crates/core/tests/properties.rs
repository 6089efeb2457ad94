//! Randomized invariants, each exercised on at least 1000 generated cases:
//! simplex preservation, terminal/initial condition exactness, Hamiltonian
//! gap nonnegativity, and the chattering occupation bound.

use proptest::prelude::*;

use bsdeopt::builtin::{InlineProblem, PolyTerm};
use bsdeopt::chattering::chatter;
use bsdeopt::hamiltonian::hamiltonian_gap;
use bsdeopt::paths::generate_paths;
use bsdeopt::problem::{dirac_embed, mix, RelaxedControlSchedule, StrictControlSchedule};
use bsdeopt::regression::RegressionBasis;
use bsdeopt::{solve_adjoint, solve_bsde, ControlGrid, SolveConfig};

const CASES: u32 = 1024;

/// Weight rows that satisfy the schedule constructor's contract.
fn simplex_row(m: usize) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(1e-3..1.0f64, m).prop_map(|raw| {
        let sum: f64 = raw.iter().sum();
        raw.into_iter().map(|w| w / sum).collect()
    })
}

fn schedule(steps: usize, m: usize) -> impl Strategy<Value = RelaxedControlSchedule> {
    proptest::collection::vec(simplex_row(m), steps)
        .prop_map(|rows| RelaxedControlSchedule::from_rows(rows).unwrap())
}

/// Shape parameters kept small so each case solves in well under a
/// millisecond; the invariants under test are exact at any size.
fn shapes() -> impl Strategy<Value = (usize, usize)> {
    (1usize..=6, 1usize..=4)
}

fn schedule_pair() -> impl Strategy<Value = (RelaxedControlSchedule, RelaxedControlSchedule)> {
    shapes().prop_flat_map(|(steps, m)| (schedule(steps, m), schedule(steps, m)))
}

/// A grid with `m` distinct scalar points.
fn grid_of(m: usize) -> ControlGrid {
    if m == 1 {
        ControlGrid::scalar(&[0.0]).unwrap()
    } else {
        ControlGrid::lattice(0.0, 1.0, m).unwrap()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(CASES))]

    #[test]
    fn mix_preserves_the_simplex(
        (mu, q) in schedule_pair(),
        theta in 0.0..=1.0f64,
    ) {
        let mixed = mix(&mu, &q, theta).unwrap();
        for k in 0..mixed.steps() {
            let row = mixed.row(k);
            prop_assert!(row.iter().all(|&w| w >= 0.0));
            let sum: f64 = row.iter().sum();
            prop_assert!((sum - 1.0).abs() <= 1e-12, "row {} sums to {}", k, sum);
        }
        // Endpoints are exact.
        let at_zero = mix(&mu, &q, 0.0).unwrap();
        let at_one = mix(&mu, &q, 1.0).unwrap();
        for k in 0..mu.steps() {
            prop_assert_eq!(at_zero.row(k), mu.row(k));
            prop_assert_eq!(at_one.row(k), q.row(k));
        }
    }

    #[test]
    fn dirac_rows_are_basis_vectors_and_round_trip(
        (m, indices) in (1usize..=4)
            .prop_flat_map(|m| (Just(m), proptest::collection::vec(0..m, 1..=6))),
    ) {
        let steps = indices.len();
        let grid = grid_of(m);
        let strict = StrictControlSchedule::new(indices.clone(), m).unwrap();
        let relaxed = dirac_embed(&strict, &grid).unwrap();
        for (k, &idx) in indices.iter().enumerate() {
            let row = relaxed.row(k);
            let ones = row.iter().filter(|&&w| w == 1.0).count();
            let zeros = row.iter().filter(|&&w| w == 0.0).count();
            prop_assert_eq!(ones, 1);
            prop_assert_eq!(zeros, m - 1);
            prop_assert_eq!(relaxed.dirac_index(k), Some(idx));
        }
        // Re-embedding the extracted indices reproduces the schedule exactly.
        let extracted: Vec<usize> = (0..steps).map(|k| relaxed.dirac_index(k).unwrap()).collect();
        let again = dirac_embed(&StrictControlSchedule::new(extracted, m).unwrap(), &grid).unwrap();
        for k in 0..steps {
            prop_assert_eq!(again.row(k), relaxed.row(k));
        }
    }

    #[test]
    fn refinement_repeats_rows_exactly(
        (mu, factor) in shapes().prop_flat_map(|(steps, m)| (schedule(steps, m), 1usize..=8)),
    ) {
        let fine = mu.refine(factor).unwrap();
        prop_assert_eq!(fine.steps(), mu.steps() * factor);
        for k in 0..fine.steps() {
            prop_assert_eq!(fine.row(k), mu.row(k / factor));
        }
    }

    #[test]
    fn chattering_occupation_stays_within_one_substep(
        row in simplex_row(5),
        r in 1usize..=32,
    ) {
        let mu = RelaxedControlSchedule::from_rows(vec![row.clone()]).unwrap();
        let strict = chatter(&mu, r).unwrap();
        prop_assert_eq!(strict.steps(), r);
        for (j, &w) in row.iter().enumerate() {
            let count = strict.indices().iter().filter(|&&i| i == j).count();
            prop_assert!(
                (count as f64 - r as f64 * w).abs() < 1.0 + 1e-9,
                "point {}: {} sub-steps for weight {} at r = {}", j, count, w, r
            );
        }
    }

    #[test]
    fn solver_invariants_hold_on_random_small_problems(
        seed in any::<u64>(),
        steps in 1usize..=4,
        log_paths in 3u32..=6,
        drift_y in -0.8..0.8f64,
        drift_v in -1.0..1.0f64,
        cost_v in -1.0..1.0f64,
        cost_quad in 0.0..1.0f64,
        terminal_lin in -1.0..1.0f64,
        grid_hi in 0.25..2.0f64,
    ) {
        // b = drift_y * y + drift_v * v, h = cost_v * v + cost_quad * v^2,
        // g = terminal_lin * y + y^2, xi = W_T: polynomial, everywhere finite,
        // with bounded coefficients so nothing overflows on [0, 1].
        let problem = InlineProblem {
            horizon: 1.0,
            state_dim: 1,
            noise_dim: 1,
            grid: vec![vec![0.0], vec![grid_hi / 2.0], vec![grid_hi]],
            b: vec![vec![
                PolyTerm { c: drift_y, y: vec![1], ..Default::default() },
                PolyTerm { c: drift_v, v: vec![1], ..Default::default() },
            ]],
            h: vec![
                PolyTerm { c: cost_v, v: vec![1], ..Default::default() },
                PolyTerm { c: cost_quad, v: vec![2], ..Default::default() },
            ],
            g: vec![
                PolyTerm { c: terminal_lin, y: vec![1], ..Default::default() },
                PolyTerm { c: 1.0, y: vec![2], ..Default::default() },
            ],
            xi: vec![vec![PolyTerm { c: 1.0, w: vec![1], ..Default::default() }]],
        };
        let spec = problem.build(steps).unwrap();
        let n_paths = 1usize << log_paths;
        let config = SolveConfig { n_paths, seed, basis_degree: 1 };
        let paths = generate_paths(seed, n_paths, spec.time(), 1).unwrap();
        let basis = RegressionBasis::new(config.basis_degree).unwrap();

        let mu = RelaxedControlSchedule::uniform(steps, 3).unwrap();
        let traj = solve_bsde(&spec, &mu, &paths, &basis).unwrap();

        // Terminal condition: the last stored row is the terminal value,
        // bit for bit.
        let mut xi_val = [0.0];
        for p in 0..n_paths {
            spec.terminal_condition_into(&paths.view(p), &mut xi_val);
            prop_assert_eq!(traj.y(steps, p)[0].to_bits(), xi_val[0].to_bits(), "path {}", p);
        }

        // Initial condition: the adjoint starts at the terminal-cost
        // gradient of the initial state, bit for bit.
        let adj = solve_adjoint(&spec, &mu, &traj, &paths).unwrap();
        let mut grad = [0.0];
        for p in 0..n_paths {
            spec.terminal_cost_grad_into(traj.y(0, p), &mut grad);
            prop_assert_eq!(adj.value(0, p)[0].to_bits(), grad[0].to_bits(), "path {}", p);
        }

        // Gap nonnegativity, per step and in total.
        let gap = hamiltonian_gap(&spec, &traj, &adj, &mu).unwrap();
        prop_assert!(gap.total_gap >= 0.0, "total {}", gap.total_gap);
        for (k, &g) in gap.per_step.iter().enumerate() {
            prop_assert!(g >= 0.0, "step {}: {}", k, g);
        }
    }
}
