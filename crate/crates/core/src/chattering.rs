//! Projection of relaxed schedules onto strict ones by time-slicing, and the
//! value-equality check that justifies it.
//!
//! A relaxed row assigns weights to grid points; on a grid refined by a
//! factor `r` the same step becomes `r` sub-steps, and the weights are
//! realized as *occupation fractions*: grid point `j` is applied on
//! approximately `r * w_j` of the sub-steps. As `r` grows the strict cost
//! approaches the relaxed cost, which is checked empirically by
//! [`value_equality_check`].

use serde::Serialize;

use crate::bsde::{evaluate_cost, solve_bsde, CostEstimate, SolveConfig};
use crate::error::{Error, Result};
use crate::paths::generate_paths;
use crate::problem::{dirac_embed, ProblemSpec, RelaxedControlSchedule, StrictControlSchedule};
use crate::rng::derive_seed;

/// Apportions `r` sub-steps among the grid points of one relaxed row by
/// largest remainder: each point gets `floor(r * w_j)` sub-steps, and the
/// leftovers go to the largest fractional parts (ties to the lowest index).
fn apportion(weights: &[f64], r: usize) -> Vec<usize> {
    let m = weights.len();
    let mut counts = vec![0usize; m];
    let mut remainders: Vec<(usize, f64)> = Vec::with_capacity(m);
    let mut assigned = 0usize;
    for (j, &w) in weights.iter().enumerate() {
        let exact = w * r as f64;
        let floor = exact.floor().min(r as f64) as usize;
        counts[j] = floor;
        assigned += floor;
        remainders.push((j, exact - floor as f64));
    }
    // Stable sort keeps index order among equal remainders, so ties go to
    // the lowest index.
    remainders.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
    let mut leftover = r.saturating_sub(assigned);
    for &(j, _) in &remainders {
        if leftover == 0 {
            break;
        }
        counts[j] += 1;
        leftover -= 1;
    }
    counts
}

/// Realizes a relaxed schedule as a strict schedule on the grid refined by
/// `r`: step `k` expands to `r` sub-steps that visit each grid point for a
/// number of sub-steps proportional to its weight, in ascending index order.
pub fn chatter(mu: &RelaxedControlSchedule, r: usize) -> Result<StrictControlSchedule> {
    if r == 0 {
        return Err(Error::Invalid(
            "refinement factor must be at least 1".into(),
        ));
    }
    let mut indices = Vec::with_capacity(mu.steps() * r);
    for k in 0..mu.steps() {
        let counts = apportion(mu.row(k), r);
        debug_assert_eq!(counts.iter().sum::<usize>(), r);
        for (j, &c) in counts.iter().enumerate() {
            indices.extend(std::iter::repeat_n(j, c));
        }
    }
    StrictControlSchedule::new(indices, mu.grid_len())
}

/// Relaxed and strict costs on one refinement level.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct ValueComparison {
    pub refinement: usize,
    pub relaxed: CostEstimate,
    pub strict: CostEstimate,
    /// `|strict.mean - relaxed.mean|`.
    pub abs_gap: f64,
}

/// Costs the relaxed schedule and its chattering projection on the grid
/// refined by `r`, under a common fresh path bundle for that level.
pub fn compare_values(
    spec: &ProblemSpec,
    mu: &RelaxedControlSchedule,
    r: usize,
    config: &SolveConfig,
) -> Result<ValueComparison> {
    let fine_spec = spec.with_time_grid(spec.time().refine(r)?);
    let paths = generate_paths(
        derive_seed(config.seed, r as u64),
        config.n_paths,
        fine_spec.time(),
        fine_spec.noise_dim(),
    )?;
    let basis = config.basis()?;

    let mu_fine = mu.refine(r)?;
    let traj_relaxed = solve_bsde(&fine_spec, &mu_fine, &paths, &basis)?;
    let relaxed = evaluate_cost(&fine_spec, &mu_fine, &traj_relaxed)?;

    let strict_schedule = dirac_embed(&chatter(mu, r)?, fine_spec.grid())?;
    let traj_strict = solve_bsde(&fine_spec, &strict_schedule, &paths, &basis)?;
    let strict = evaluate_cost(&fine_spec, &strict_schedule, &traj_strict)?;

    Ok(ValueComparison {
        refinement: r,
        relaxed,
        strict,
        abs_gap: (strict.mean - relaxed.mean).abs(),
    })
}

/// Runs [`compare_values`] across the given refinement levels.
pub fn value_equality_check(
    spec: &ProblemSpec,
    mu: &RelaxedControlSchedule,
    refinements: &[usize],
    config: &SolveConfig,
) -> Result<Vec<ValueComparison>> {
    if refinements.is_empty() {
        return Err(Error::Invalid("need at least one refinement level".into()));
    }
    refinements
        .iter()
        .map(|&r| compare_values(spec, mu, r, config))
        .collect()
}

/// Writes comparisons as CSV with header `refinement,relaxed,relaxed_se,strict,strict_se,abs_gap`.
pub fn write_comparison_csv<W: std::io::Write>(
    rows: &[ValueComparison],
    out: &mut W,
) -> std::io::Result<()> {
    writeln!(
        out,
        "refinement,relaxed,relaxed_se,strict,strict_se,abs_gap"
    )?;
    for c in rows {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            c.refinement,
            c.relaxed.mean,
            c.relaxed.std_error,
            c.strict.mean,
            c.strict.std_error,
            c.abs_gap
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::{ControlGrid, TimeGrid};

    fn relaxed(rows: Vec<Vec<f64>>) -> RelaxedControlSchedule {
        RelaxedControlSchedule::from_rows(rows).unwrap()
    }

    #[test]
    fn even_split_fills_half_and_half() {
        let mu = relaxed(vec![vec![0.5, 0.5]]);
        assert_eq!(chatter(&mu, 4).unwrap().indices(), &[0, 0, 1, 1]);
        assert_eq!(chatter(&mu, 1).unwrap().indices(), &[0]);
    }

    #[test]
    fn remainders_go_to_largest_fraction_first() {
        let mu = relaxed(vec![vec![0.3, 0.7]]);
        // r = 10 splits exactly 3 / 7.
        let s = chatter(&mu, 10).unwrap();
        assert_eq!(s.indices().iter().filter(|&&j| j == 0).count(), 3);
        assert_eq!(s.indices().iter().filter(|&&j| j == 1).count(), 7);
        // r = 3: floors are 0 and 2, the leftover goes to 0.9 > 0.9? no:
        // fractions are 0.9 (j=0) and 0.1 (j=1), so j=0 gets it.
        assert_eq!(chatter(&mu, 3).unwrap().indices(), &[0, 1, 1]);
    }

    #[test]
    fn dirac_rows_stay_constant() {
        let grid = ControlGrid::scalar(&[0.0, 1.0, 2.0]).unwrap();
        let strict = StrictControlSchedule::new(vec![2, 0, 1], 3).unwrap();
        let mu = dirac_embed(&strict, &grid).unwrap();
        let s = chatter(&mu, 4).unwrap();
        assert_eq!(s.indices(), &[2, 2, 2, 2, 0, 0, 0, 0, 1, 1, 1, 1]);
    }

    #[test]
    fn remainder_ties_break_to_the_lowest_index() {
        // Three equal weights at r = 2: floors 0, fractions all 2/3, so the
        // two leftovers land on indices 0 and 1.
        let mu = relaxed(vec![vec![1.0 / 3.0; 3]]);
        assert_eq!(chatter(&mu, 2).unwrap().indices(), &[0, 1]);
    }

    #[test]
    fn zero_refinement_is_rejected() {
        let mu = relaxed(vec![vec![1.0]]);
        assert!(chatter(&mu, 0).is_err());
    }

    /// b = v, h = 0, g = y^2, xi = 0 on {-1, +1}: the cost of any schedule
    /// is `(integral of mean control)^2` with no Monte Carlo noise, so the
    /// chattering error is computable by hand.
    fn exact_square_spec(steps: usize) -> ProblemSpec {
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
        .build()
        .unwrap()
    }

    #[test]
    fn strict_value_approaches_relaxed_value_under_refinement() {
        let steps = 4;
        let spec = exact_square_spec(steps);
        let mu = relaxed(vec![vec![0.5, 0.5]; steps]);
        let config = SolveConfig {
            n_paths: 128,
            seed: 7,
            basis_degree: 1,
        };
        // r = 1 projects every [0.5, 0.5] row to index 0, i.e. the constant
        // -1 control: J = 1 versus the relaxed J = 0.
        let coarse = compare_values(&spec, &mu, 1, &config).unwrap();
        assert!(
            (coarse.relaxed.mean).abs() < 1e-12,
            "{}",
            coarse.relaxed.mean
        );
        assert!(
            (coarse.strict.mean - 1.0).abs() < 1e-12,
            "{}",
            coarse.strict.mean
        );
        assert!((coarse.abs_gap - 1.0).abs() < 1e-12);
        // r = 2 alternates -1, +1 inside each step: the integral cancels
        // exactly and the gap vanishes.
        let fine = compare_values(&spec, &mu, 2, &config).unwrap();
        assert!(fine.abs_gap < 1e-12, "{}", fine.abs_gap);
    }

    #[test]
    fn check_runs_all_levels_in_order() {
        let spec = exact_square_spec(2);
        let mu = relaxed(vec![vec![0.5, 0.5]; 2]);
        let config = SolveConfig {
            n_paths: 64,
            seed: 7,
            basis_degree: 1,
        };
        let rows = value_equality_check(&spec, &mu, &[1, 2, 4], &config).unwrap();
        assert_eq!(
            rows.iter().map(|c| c.refinement).collect::<Vec<_>>(),
            vec![1, 2, 4]
        );
        assert!(value_equality_check(&spec, &mu, &[], &config).is_err());
    }

    #[test]
    fn comparison_csv_has_the_expected_header() {
        let rows = vec![ValueComparison {
            refinement: 2,
            relaxed: CostEstimate {
                mean: 0.0,
                std_error: 0.0,
            },
            strict: CostEstimate {
                mean: 1.0,
                std_error: 0.0,
            },
            abs_gap: 1.0,
        }];
        let mut buf = Vec::new();
        write_comparison_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("refinement,relaxed,relaxed_se,strict,strict_se,abs_gap\n"));
    }
}
