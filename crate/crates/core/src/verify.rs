//! Optimality certificates.
//!
//! [`check_necessary`] tests the first-order (maximum-principle) condition:
//! at an optimal schedule the Hamiltonian gap vanishes, so a gap that is
//! large relative to its Monte Carlo error refutes optimality. The converse
//! needs structure; [`check_sufficient_hypotheses`] probes the standard
//! convexity hypotheses under which a vanishing gap *implies* optimality —
//! a convex terminal cost and a Hamiltonian concave in the state and
//! volatility arguments.

use serde::Serialize;

use crate::adjoint::solve_adjoint;
use crate::bsde::{solve_bsde, SolveConfig};
use crate::error::{Error, Result};
use crate::hamiltonian::{hamiltonian_gap, relaxed_hamiltonian, HamiltonianWorkspace};
use crate::problem::{dirac_embed, ProblemSpec, RelaxedControlSchedule, StrictControlSchedule};
use crate::rng::ProbeRng;

/// Tolerance added on top of midpoint-inequality probes so that exactly
/// affine functions pass despite rounding.
const CONVEXITY_SLACK: f64 = 1e-9;
/// Midpoint probes per hypothesis.
const PROBES_PER_CHECK: usize = 200;
/// Recorded failures are capped; the booleans still reflect every probe.
const MAX_RECORDED_FAILURES: usize = 5;
/// Empirical ranges are widened by this fraction of their width.
const RANGE_INFLATION: f64 = 0.2;

/// The schedule whose stationarity is being certified.
#[derive(Clone, Debug)]
pub enum ControlInput {
    Relaxed(RelaxedControlSchedule),
    Strict(StrictControlSchedule),
}

/// One of the largest per-step contributors to the gap.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct WorstStep {
    pub step: usize,
    /// Per-step gap rate (the total gap is the time integral of these).
    pub gap: f64,
    /// Index of the grid point attaining the step's Hamiltonian maximum.
    pub argmax: usize,
}

/// Outcome of the first-order check.
#[derive(Clone, Debug, Serialize)]
pub struct Certificate {
    /// `"necessary-relaxed"` or `"necessary-strict"`, by input kind.
    pub kind: String,
    pub total_gap: f64,
    pub gap_std_error: f64,
    /// The threshold the gap was compared against.
    pub tolerance: f64,
    /// `"pass"` (gap at or below tolerance) or `"fail"`.
    pub verdict: String,
    /// Up to five steps, largest gap rate first (ties to the earlier step).
    pub worst_steps: Vec<WorstStep>,
}

impl Certificate {
    pub fn passed(&self) -> bool {
        self.verdict == "pass"
    }
}

/// Evaluates the first-order optimality condition at `control`.
///
/// With no explicit `tolerance` the gap is compared against
/// `3 * std_error + 0.01`, i.e. statistical noise plus a fixed margin.
pub fn check_necessary(
    spec: &ProblemSpec,
    control: &ControlInput,
    config: &SolveConfig,
    tolerance: Option<f64>,
) -> Result<Certificate> {
    if let Some(tol) = tolerance {
        if !(tol.is_finite() && tol >= 0.0) {
            return Err(Error::Invalid(format!("tolerance {tol} must be >= 0")));
        }
    }
    let (kind, mu) = match control {
        ControlInput::Relaxed(mu) => ("necessary-relaxed", mu.clone()),
        ControlInput::Strict(s) => ("necessary-strict", dirac_embed(s, spec.grid())?),
    };
    let paths = config.draw_paths(spec)?;
    let basis = config.basis()?;
    let traj = solve_bsde(spec, &mu, &paths, &basis)?;
    let adj = solve_adjoint(spec, &mu, &traj, &paths)?;
    let gap = hamiltonian_gap(spec, &traj, &adj, &mu)?;

    let tol = tolerance.unwrap_or(3.0 * gap.std_error + 0.01);
    let verdict = if gap.total_gap <= tol { "pass" } else { "fail" };

    let mut order: Vec<usize> = (0..gap.per_step.len()).collect();
    order.sort_by(|&a, &b| {
        gap.per_step[b]
            .partial_cmp(&gap.per_step[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let worst_steps = order
        .into_iter()
        .take(5)
        .map(|k| WorstStep {
            step: k,
            gap: gap.per_step[k],
            argmax: gap.argmax[k],
        })
        .collect();

    Ok(Certificate {
        kind: kind.to_string(),
        total_gap: gap.total_gap,
        gap_std_error: gap.std_error,
        tolerance: tol,
        verdict: verdict.to_string(),
        worst_steps,
    })
}

/// One failed midpoint probe.
#[derive(Clone, Debug, Serialize)]
pub struct ProbeFailure {
    /// `"terminal-cost-convexity"` or `"hamiltonian-concavity"`.
    pub check: String,
    /// By how much the midpoint inequality failed.
    pub violation: f64,
    pub detail: String,
}

/// Outcome of probing the sufficiency hypotheses.
#[derive(Clone, Debug, Serialize)]
pub struct ConvexityReport {
    pub probe_seed: u64,
    pub probes_per_check: usize,
    pub terminal_cost_convex: bool,
    pub hamiltonian_concave: bool,
    /// `"satisfied"` if both hypotheses held on every probe, else `"violated"`.
    pub verdict: String,
    /// At most five recorded failures (the flags count all of them).
    pub failures: Vec<ProbeFailure>,
}

struct Ranges {
    y: Vec<(f64, f64)>,
    z: Vec<(f64, f64)>,
    p: Vec<(f64, f64)>,
}

fn widen(lo: f64, hi: f64) -> (f64, f64) {
    let width = hi - lo;
    if width > 0.0 {
        (lo - RANGE_INFLATION * width, hi + RANGE_INFLATION * width)
    } else {
        // Every observation was the same value; open a window around it.
        let pad = 0.1 * hi.abs().max(1.0);
        (lo - pad, hi + pad)
    }
}

/// Solves the problem under the uniform schedule and records the ranges the
/// state, volatility, and adjoint actually visit, widened by 20%.
fn empirical_ranges(spec: &ProblemSpec, config: &SolveConfig) -> Result<Ranges> {
    let steps = spec.time().steps();
    let mu = RelaxedControlSchedule::uniform(steps, spec.grid().len())?;
    let paths = config.draw_paths(spec)?;
    let basis = config.basis()?;
    let traj = solve_bsde(spec, &mu, &paths, &basis)?;
    let adj = solve_adjoint(spec, &mu, &traj, &paths)?;

    let n = spec.state_dim();
    let nd = spec.vol_len();
    let mut y = vec![(f64::INFINITY, f64::NEG_INFINITY); n];
    let mut z = vec![(f64::INFINITY, f64::NEG_INFINITY); nd];
    let mut p = vec![(f64::INFINITY, f64::NEG_INFINITY); n];
    for pth in 0..paths.n_paths() {
        for k in 0..=steps {
            for (i, &v) in traj.y(k, pth).iter().enumerate() {
                y[i].0 = y[i].0.min(v);
                y[i].1 = y[i].1.max(v);
            }
            for (i, &v) in adj.value(k, pth).iter().enumerate() {
                p[i].0 = p[i].0.min(v);
                p[i].1 = p[i].1.max(v);
            }
            if k < steps {
                for (e, &v) in traj.z(k, pth).iter().enumerate() {
                    z[e].0 = z[e].0.min(v);
                    z[e].1 = z[e].1.max(v);
                }
            }
        }
    }
    let widen_all = |v: Vec<(f64, f64)>| v.into_iter().map(|(lo, hi)| widen(lo, hi)).collect();
    Ok(Ranges {
        y: widen_all(y),
        z: widen_all(z),
        p: widen_all(p),
    })
}

fn sample(rng: &mut ProbeRng, ranges: &[(f64, f64)], out: &mut [f64]) {
    for (x, &(lo, hi)) in out.iter_mut().zip(ranges) {
        *x = rng.range(lo, hi);
    }
}

/// Probes the convexity hypotheses under which a vanishing Hamiltonian gap
/// certifies optimality: the terminal cost must be convex, and the
/// Hamiltonian concave in the state and volatility arguments for the
/// adjoint values and controls the problem actually produces.
///
/// Probe points are drawn from the empirical ranges of a solve under the
/// uniform schedule (widened 20%), so the report speaks to the region the
/// solver visits rather than all of space.
pub fn check_sufficient_hypotheses(
    spec: &ProblemSpec,
    config: &SolveConfig,
    probe_seed: u64,
) -> Result<ConvexityReport> {
    let ranges = empirical_ranges(spec, config)?;
    let n = spec.state_dim();
    let nd = spec.vol_len();
    let m = spec.grid().len();
    let horizon = spec.time().horizon();
    let mut rng = ProbeRng::new(probe_seed);
    let mut ws = HamiltonianWorkspace::new(spec);

    let mut failures = Vec::new();
    let record = |failures: &mut Vec<ProbeFailure>, check: &str, violation: f64, detail: String| {
        if failures.len() < MAX_RECORDED_FAILURES {
            failures.push(ProbeFailure {
                check: check.to_string(),
                violation,
                detail,
            });
        }
    };

    let mut terminal_cost_convex = true;
    let (mut y1, mut y2, mut mid) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    for _ in 0..PROBES_PER_CHECK {
        sample(&mut rng, &ranges.y, &mut y1);
        sample(&mut rng, &ranges.y, &mut y2);
        for i in 0..n {
            mid[i] = 0.5 * (y1[i] + y2[i]);
        }
        let violation =
            spec.terminal_cost(&mid) - 0.5 * (spec.terminal_cost(&y1) + spec.terminal_cost(&y2));
        if !violation.is_finite() || violation > CONVEXITY_SLACK {
            terminal_cost_convex = false;
            record(
                &mut failures,
                "terminal-cost-convexity",
                violation,
                format!("midpoint of {y1:?} and {y2:?} exceeds the chord by {violation:.3e}"),
            );
        }
    }

    let mut hamiltonian_concave = true;
    let (mut z1, mut z2, mut zmid) = (vec![0.0; nd], vec![0.0; nd], vec![0.0; nd]);
    let mut pvec = vec![0.0; n];
    for _ in 0..PROBES_PER_CHECK {
        let t = rng.range(0.0, horizon);
        sample(&mut rng, &ranges.y, &mut y1);
        sample(&mut rng, &ranges.y, &mut y2);
        sample(&mut rng, &ranges.z, &mut z1);
        sample(&mut rng, &ranges.z, &mut z2);
        sample(&mut rng, &ranges.p, &mut pvec);
        let weights = rng.simplex(m);
        for i in 0..n {
            mid[i] = 0.5 * (y1[i] + y2[i]);
        }
        for e in 0..nd {
            zmid[e] = 0.5 * (z1[e] + z2[e]);
        }
        let h1 = relaxed_hamiltonian(spec, t, &y1, &z1, &pvec, &weights, &mut ws);
        let h2 = relaxed_hamiltonian(spec, t, &y2, &z2, &pvec, &weights, &mut ws);
        let hm = relaxed_hamiltonian(spec, t, &mid, &zmid, &pvec, &weights, &mut ws);
        let violation = 0.5 * (h1 + h2) - hm;
        if !violation.is_finite() || violation > CONVEXITY_SLACK {
            hamiltonian_concave = false;
            record(
                &mut failures,
                "hamiltonian-concavity",
                violation,
                format!(
                    "at t = {t:.4}, chord over states {y1:?}/{y2:?} exceeds the midpoint by {violation:.3e}"
                ),
            );
        }
    }

    let verdict = if terminal_cost_convex && hamiltonian_concave {
        "satisfied"
    } else {
        "violated"
    };
    Ok(ConvexityReport {
        probe_seed,
        probes_per_check: PROBES_PER_CHECK,
        terminal_cost_convex,
        hamiltonian_concave,
        verdict: verdict.to_string(),
        failures,
    })
}
