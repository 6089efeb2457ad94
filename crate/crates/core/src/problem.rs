//! Problem definition: controlled backward dynamics, costs, control grids,
//! and control schedules.
//!
//! A problem couples the backward state equation
//! `dy_t = b(t, y_t, z_t, v_t) dt + z_t dW_t`, `y_T = xi(W)` with the cost
//! `J = E[ g(y_0) + integral h(t, y_t, z_t, v_t) dt ]`. Controls take values
//! on a finite grid of points; a *strict* schedule picks one grid point per
//! time step, a *relaxed* schedule puts a probability weight row over the
//! grid at each step. Relaxed coefficients are the weight-averaged strict
//! ones, so a Dirac row reproduces the strict evaluation bit for bit (zero
//! weights are skipped, never multiplied).

use std::io::{BufRead, Write as IoWrite};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::paths::PathView;
use crate::rng::ProbeRng;

/// Row weights within this distance of the simplex are accepted as exact.
pub const SIMPLEX_TOL: f64 = 1e-12;
/// Rows whose sum is farther than `SIMPLEX_TOL` but within this distance of 1
/// are renormalized on construction; farther rows are rejected.
pub const SIMPLEX_RENORM_TOL: f64 = 1e-9;
/// Relative step for central finite-difference gradients.
pub const FD_STEP: f64 = 1e-5;
/// Analytic gradients must match finite differences to this relative error.
pub const GRADIENT_CONSISTENCY_TOL: f64 = 1e-4;
/// Probes per validation check.
const VALIDATION_PROBES: usize = 10;

// ---------------------------------------------------------------------------
// Grids
// ---------------------------------------------------------------------------

/// Finite set of admissible control points in `R^dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct ControlGrid {
    points: Vec<f64>, // len * dim, row-major
    dim: usize,
}

impl ControlGrid {
    pub fn new(points: Vec<Vec<f64>>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Invalid(
                "control grid needs at least one point".into(),
            ));
        }
        let dim = points[0].len();
        if dim == 0 {
            return Err(Error::Invalid(
                "control points must have dimension >= 1".into(),
            ));
        }
        let mut flat = Vec::with_capacity(points.len() * dim);
        for (j, p) in points.iter().enumerate() {
            if p.len() != dim {
                return Err(Error::Shape(format!(
                    "control point {j} has dimension {}, expected {dim}",
                    p.len()
                )));
            }
            if p.iter().any(|x| !x.is_finite()) {
                return Err(Error::Invalid(format!("control point {j} is not finite")));
            }
            flat.extend_from_slice(p);
        }
        for j in 0..points.len() {
            for i in 0..j {
                if flat[i * dim..(i + 1) * dim] == flat[j * dim..(j + 1) * dim] {
                    return Err(Error::Invalid(format!(
                        "control points {i} and {j} are identical; grid points must be distinct"
                    )));
                }
            }
        }
        Ok(Self { points: flat, dim })
    }

    /// One-dimensional grid of scalar points.
    pub fn scalar(values: &[f64]) -> Result<Self> {
        Self::new(values.iter().map(|&v| vec![v]).collect())
    }

    /// Uniform one-dimensional lattice of `count` points on `[lo, hi]`.
    pub fn lattice(lo: f64, hi: f64, count: usize) -> Result<Self> {
        if count == 0 {
            return Err(Error::Invalid("lattice needs at least one point".into()));
        }
        if !(lo.is_finite() && hi.is_finite()) || hi < lo {
            return Err(Error::Invalid(format!("bad lattice bounds [{lo}, {hi}]")));
        }
        if count == 1 {
            return Self::scalar(&[lo]);
        }
        let pts: Vec<f64> = (0..count)
            .map(|i| lo + (hi - lo) * i as f64 / (count - 1) as f64)
            .collect();
        Self::scalar(&pts)
    }

    pub fn len(&self) -> usize {
        self.points.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        false // construction guarantees at least one point
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn point(&self, j: usize) -> &[f64] {
        &self.points[j * self.dim..(j + 1) * self.dim]
    }
}

/// Uniform partition of `[0, T]` into `steps` intervals.
///
/// Nodes are `node(k) = T * k / steps`, so `node(steps) == T` exactly.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    horizon: f64,
    steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Invalid("empty time grid: steps must be >= 1".into()));
        }
        if !horizon.is_finite() || horizon <= 0.0 {
            return Err(Error::Invalid(format!(
                "horizon must be positive, got {horizon}"
            )));
        }
        Ok(Self { horizon, steps })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    pub fn node(&self, k: usize) -> f64 {
        debug_assert!(k <= self.steps);
        self.horizon * k as f64 / self.steps as f64
    }

    /// Same horizon, `factor` times as many steps.
    pub fn refine(&self, factor: usize) -> Result<Self> {
        if factor == 0 {
            return Err(Error::Invalid("refinement factor must be >= 1".into()));
        }
        let steps = self.steps.checked_mul(factor).ok_or_else(|| {
            Error::Resource(format!(
                "refined step count {} * {factor} overflows",
                self.steps
            ))
        })?;
        Self::new(self.horizon, steps)
    }
}

// ---------------------------------------------------------------------------
// Schedules
// ---------------------------------------------------------------------------

/// One grid index per time step.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StrictControlSchedule {
    indices: Vec<usize>,
    grid_len: usize,
}

impl StrictControlSchedule {
    pub fn new(indices: Vec<usize>, grid_len: usize) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::Invalid(
                "strict schedule needs at least one step".into(),
            ));
        }
        if grid_len == 0 {
            return Err(Error::Invalid(
                "strict schedule needs a nonempty grid".into(),
            ));
        }
        if let Some((k, &j)) = indices.iter().enumerate().find(|(_, &j)| j >= grid_len) {
            return Err(Error::Invalid(format!(
                "strict schedule index {j} at step {k} is out of range for grid of {grid_len}"
            )));
        }
        Ok(Self { indices, grid_len })
    }

    /// Same grid index at every step.
    pub fn constant(steps: usize, index: usize, grid_len: usize) -> Result<Self> {
        Self::new(vec![index; steps], grid_len)
    }

    pub fn steps(&self) -> usize {
        self.indices.len()
    }

    pub fn grid_len(&self) -> usize {
        self.grid_len
    }

    pub fn index(&self, k: usize) -> usize {
        self.indices[k]
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    /// CSV with the single column `index`, one row per step.
    pub fn to_csv<W: IoWrite>(&self, out: &mut W) -> std::io::Result<()> {
        writeln!(out, "index")?;
        for &j in &self.indices {
            writeln!(out, "{j}")?;
        }
        Ok(())
    }

    pub fn from_csv<R: BufRead>(reader: R, grid_len: usize) -> Result<Self> {
        let mut lines = reader.lines();
        match lines.next() {
            Some(Ok(h)) if h.trim() == "index" => {}
            Some(Ok(h)) => {
                return Err(Error::Invalid(format!(
                    "strict schedule CSV header must be 'index', got '{h}'"
                )))
            }
            Some(Err(e)) => return Err(e.into()),
            None => return Err(Error::Invalid("empty strict schedule CSV".into())),
        }
        let mut indices = Vec::new();
        for (lineno, line) in lines.enumerate() {
            let line = line?;
            let t = line.trim();
            if t.is_empty() {
                continue;
            }
            let j: usize = t
                .parse()
                .map_err(|_| Error::Invalid(format!("bad index '{t}' on line {}", lineno + 2)))?;
            indices.push(j);
        }
        Self::new(indices, grid_len)
    }
}

/// One probability weight row over the grid per time step.
#[derive(Clone, Debug, PartialEq)]
pub struct RelaxedControlSchedule {
    weights: Vec<f64>, // steps * grid_len, row-major
    steps: usize,
    grid_len: usize,
}

impl RelaxedControlSchedule {
    /// Validates and (if needed) renormalizes every row.
    ///
    /// A row is kept bit-identical when its sum is within `SIMPLEX_TOL` of 1;
    /// renormalized when within `SIMPLEX_RENORM_TOL`; rejected otherwise.
    /// Negative or non-finite weights are always rejected.
    pub fn from_flat(steps: usize, grid_len: usize, mut weights: Vec<f64>) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Invalid(
                "relaxed schedule needs at least one step".into(),
            ));
        }
        if grid_len == 0 {
            return Err(Error::Invalid(
                "relaxed schedule needs a nonempty grid".into(),
            ));
        }
        if weights.len() != steps * grid_len {
            return Err(Error::Shape(format!(
                "relaxed schedule has {} weights, expected {steps} x {grid_len}",
                weights.len()
            )));
        }
        for k in 0..steps {
            let row = &mut weights[k * grid_len..(k + 1) * grid_len];
            for (j, &w) in row.iter().enumerate() {
                if !w.is_finite() {
                    return Err(Error::Invalid(format!(
                        "weight at step {k}, grid index {j} is not finite"
                    )));
                }
                if w < 0.0 {
                    return Err(Error::Invalid(format!(
                        "negative weight {w} at step {k}, grid index {j}"
                    )));
                }
            }
            let sum: f64 = row.iter().sum();
            let err = (sum - 1.0).abs();
            if err <= SIMPLEX_TOL {
                // exact enough; keep bits
            } else if err <= SIMPLEX_RENORM_TOL {
                for w in row.iter_mut() {
                    *w /= sum;
                }
            } else {
                return Err(Error::Invalid(format!(
                    "weights at step {k} sum to {sum}, farther than {SIMPLEX_RENORM_TOL} from 1"
                )));
            }
        }
        Ok(Self {
            weights,
            steps,
            grid_len,
        })
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let steps = rows.len();
        let grid_len = rows.first().map(Vec::len).unwrap_or(0);
        for (k, r) in rows.iter().enumerate() {
            if r.len() != grid_len {
                return Err(Error::Shape(format!(
                    "row {k} has {} weights, expected {grid_len}",
                    r.len()
                )));
            }
        }
        Self::from_flat(steps, grid_len, rows.into_iter().flatten().collect())
    }

    /// Equal weight on every grid point at every step.
    pub fn uniform(steps: usize, grid_len: usize) -> Result<Self> {
        let w = 1.0 / grid_len as f64;
        Self::from_flat(steps, grid_len, vec![w; steps * grid_len])
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn grid_len(&self) -> usize {
        self.grid_len
    }

    pub fn row(&self, k: usize) -> &[f64] {
        &self.weights[k * self.grid_len..(k + 1) * self.grid_len]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.weights.chunks(self.grid_len)
    }

    /// `Some(j)` when step `k` is exactly the unit mass at grid index `j`.
    pub fn dirac_index(&self, k: usize) -> Option<usize> {
        let row = self.row(k);
        let j = row.iter().position(|&w| w == 1.0)?;
        row.iter()
            .enumerate()
            .all(|(i, &w)| i == j || w == 0.0)
            .then_some(j)
    }

    /// Repeats each row `factor` times (the lift onto a refined time grid).
    pub fn refine(&self, factor: usize) -> Result<Self> {
        if factor == 0 {
            return Err(Error::Invalid("refinement factor must be >= 1".into()));
        }
        let mut weights = Vec::with_capacity(self.weights.len() * factor);
        for k in 0..self.steps {
            for _ in 0..factor {
                weights.extend_from_slice(self.row(k));
            }
        }
        Self::from_flat(self.steps * factor, self.grid_len, weights)
    }

    /// CSV with header `w0,...,w{m-1}`, one row per step.
    pub fn to_csv<W: IoWrite>(&self, out: &mut W) -> std::io::Result<()> {
        let header: Vec<String> = (0..self.grid_len).map(|j| format!("w{j}")).collect();
        writeln!(out, "{}", header.join(","))?;
        for row in self.rows() {
            let cells: Vec<String> = row.iter().map(|w| format!("{w}")).collect();
            writeln!(out, "{}", cells.join(","))?;
        }
        Ok(())
    }

    pub fn from_csv<R: BufRead>(reader: R) -> Result<Self> {
        let mut lines = reader.lines();
        let header = match lines.next() {
            Some(Ok(h)) => h,
            Some(Err(e)) => return Err(e.into()),
            None => return Err(Error::Invalid("empty relaxed schedule CSV".into())),
        };
        let cols: Vec<&str> = header.trim().split(',').collect();
        let grid_len = cols.len();
        for (j, c) in cols.iter().enumerate() {
            if *c != format!("w{j}") {
                return Err(Error::Invalid(format!(
                    "relaxed schedule CSV header column {j} is '{c}', expected 'w{j}'"
                )));
            }
        }
        let mut weights = Vec::new();
        let mut steps = 0;
        for (lineno, line) in lines.enumerate() {
            let line = line?;
            let t = line.trim();
            if t.is_empty() {
                continue;
            }
            let row: Vec<f64> = t
                .split(',')
                .map(|c| {
                    c.trim().parse::<f64>().map_err(|_| {
                        Error::Invalid(format!("bad weight '{c}' on line {}", lineno + 2))
                    })
                })
                .collect::<Result<_>>()?;
            if row.len() != grid_len {
                return Err(Error::Shape(format!(
                    "line {} has {} weights, expected {grid_len}",
                    lineno + 2,
                    row.len()
                )));
            }
            weights.extend_from_slice(&row);
            steps += 1;
        }
        Self::from_flat(steps, grid_len, weights)
    }
}

/// Embeds a strict schedule as the relaxed schedule of Dirac rows.
/// Row `k` is exactly the standard basis vector at the chosen grid index.
pub fn dirac_embed(
    v: &StrictControlSchedule,
    grid: &ControlGrid,
) -> Result<RelaxedControlSchedule> {
    if v.grid_len() != grid.len() {
        return Err(Error::Shape(format!(
            "strict schedule was built for a grid of {}, got {}",
            v.grid_len(),
            grid.len()
        )));
    }
    let m = grid.len();
    let mut weights = vec![0.0; v.steps() * m];
    for (k, &j) in v.indices().iter().enumerate() {
        weights[k * m + j] = 1.0;
    }
    RelaxedControlSchedule::from_flat(v.steps(), m, weights)
}

/// Convex combination `(1 - theta) * mu + theta * q`, stepwise.
///
/// `theta = 0` returns `mu` exactly and `theta = 1` returns `q` exactly
/// (rows already on the simplex are never renormalized).
pub fn mix(
    mu: &RelaxedControlSchedule,
    q: &RelaxedControlSchedule,
    theta: f64,
) -> Result<RelaxedControlSchedule> {
    if mu.steps() != q.steps() || mu.grid_len() != q.grid_len() {
        return Err(Error::Shape(format!(
            "cannot mix schedules of shape {}x{} and {}x{}",
            mu.steps(),
            mu.grid_len(),
            q.steps(),
            q.grid_len()
        )));
    }
    if !(0.0..=1.0).contains(&theta) {
        return Err(Error::Invalid(format!(
            "mixing weight theta={theta} outside [0, 1]"
        )));
    }
    let weights: Vec<f64> = mu
        .weights
        .iter()
        .zip(&q.weights)
        .map(|(&a, &b)| (1.0 - theta) * a + theta * b)
        .collect();
    RelaxedControlSchedule::from_flat(mu.steps(), mu.grid_len(), weights)
}

// ---------------------------------------------------------------------------
// Problem specification
// ---------------------------------------------------------------------------

/// `b(t, y, z, a)` into `out` of length `state_dim`; `z` is the `n x d`
/// row-major volatility block, `a` a control point.
pub type DriftFn = dyn Fn(f64, &[f64], &[f64], &[f64], &mut [f64]) + Send + Sync;
/// `h(t, y, z, a)`.
pub type RunningCostFn = dyn Fn(f64, &[f64], &[f64], &[f64]) -> f64 + Send + Sync;
/// `g(y)`.
pub type TerminalCostFn = dyn Fn(&[f64]) -> f64 + Send + Sync;
/// `xi(path)` into `out` of length `state_dim`.
pub type TerminalConditionFn = dyn Fn(&PathView<'_>, &mut [f64]) + Send + Sync;
/// Jacobian/gradient callbacks share the drift calling shape; only the
/// output length differs (documented per field).
pub type GradFn = dyn Fn(f64, &[f64], &[f64], &[f64], &mut [f64]) + Send + Sync;
/// `dg/dy(y)` into `out` of length `state_dim`.
pub type TerminalCostGradFn = dyn Fn(&[f64], &mut [f64]) + Send + Sync;

/// Which gradient source the coefficient derivatives use.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GradientMode {
    /// All five derivative callbacks supplied.
    Analytic,
    /// No derivative callbacks; central finite differences throughout.
    FiniteDifference,
    /// Some supplied, the rest differenced.
    Mixed,
}

#[derive(Clone, Default)]
struct Gradients {
    drift_y: Option<Arc<GradFn>>,        // out: n*n, [i*n + l] = db_i/dy_l
    drift_z: Option<Arc<GradFn>>,        // out: n*n*d, [(i*n + l)*d + j] = db_i/dz_{lj}
    running_cost_y: Option<Arc<GradFn>>, // out: n
    running_cost_z: Option<Arc<GradFn>>, // out: n*d
    terminal_cost_y: Option<Arc<TerminalCostGradFn>>, // out: n
}

impl std::fmt::Debug for ProblemSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ProblemSpec")
            .field("state_dim", &self.state_dim)
            .field("noise_dim", &self.noise_dim)
            .field("grid_len", &self.grid.len())
            .field("steps", &self.time.steps())
            .field("horizon", &self.time.horizon())
            .field("gradient_mode", &self.gradient_mode())
            .finish_non_exhaustive()
    }
}

/// Complete problem description. Cheap to clone (callbacks are shared).
#[derive(Clone)]
pub struct ProblemSpec {
    state_dim: usize,
    noise_dim: usize,
    grid: ControlGrid,
    time: TimeGrid,
    drift: Arc<DriftFn>,
    running_cost: Arc<RunningCostFn>,
    terminal_cost: Arc<TerminalCostFn>,
    terminal_condition: Arc<TerminalConditionFn>,
    gradients: Gradients,
    fd_step: f64,
}

pub struct ProblemSpecBuilder {
    state_dim: usize,
    noise_dim: usize,
    grid: ControlGrid,
    time: TimeGrid,
    drift: Option<Arc<DriftFn>>,
    running_cost: Option<Arc<RunningCostFn>>,
    terminal_cost: Option<Arc<TerminalCostFn>>,
    terminal_condition: Option<Arc<TerminalConditionFn>>,
    gradients: Gradients,
    fd_step: f64,
}

impl ProblemSpec {
    pub fn builder(
        state_dim: usize,
        noise_dim: usize,
        grid: ControlGrid,
        time: TimeGrid,
    ) -> ProblemSpecBuilder {
        ProblemSpecBuilder {
            state_dim,
            noise_dim,
            grid,
            time,
            drift: None,
            running_cost: None,
            terminal_cost: None,
            terminal_condition: None,
            gradients: Gradients::default(),
            fd_step: FD_STEP,
        }
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn noise_dim(&self) -> usize {
        self.noise_dim
    }

    pub fn vol_len(&self) -> usize {
        self.state_dim * self.noise_dim
    }

    pub fn grid(&self) -> &ControlGrid {
        &self.grid
    }

    pub fn time(&self) -> &TimeGrid {
        &self.time
    }

    /// Same problem on a different time grid (used by chattering refinement).
    pub fn with_time_grid(&self, time: TimeGrid) -> Self {
        let mut s = self.clone();
        s.time = time;
        s
    }

    pub fn gradient_mode(&self) -> GradientMode {
        let g = &self.gradients;
        let have = [
            g.drift_y.is_some(),
            g.drift_z.is_some(),
            g.running_cost_y.is_some(),
            g.running_cost_z.is_some(),
            g.terminal_cost_y.is_some(),
        ];
        if have.iter().all(|&b| b) {
            GradientMode::Analytic
        } else if have.iter().all(|&b| !b) {
            GradientMode::FiniteDifference
        } else {
            GradientMode::Mixed
        }
    }

    // -- direct coefficient evaluation --------------------------------------

    pub fn drift_into(&self, t: f64, y: &[f64], z: &[f64], a: &[f64], out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.state_dim);
        (self.drift)(t, y, z, a, out);
    }

    pub fn running_cost(&self, t: f64, y: &[f64], z: &[f64], a: &[f64]) -> f64 {
        (self.running_cost)(t, y, z, a)
    }

    pub fn terminal_cost(&self, y: &[f64]) -> f64 {
        (self.terminal_cost)(y)
    }

    pub fn terminal_condition_into(&self, path: &PathView<'_>, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.state_dim);
        (self.terminal_condition)(path, out);
    }

    // -- derivatives (analytic or central finite differences) ---------------

    fn fd_delta(&self, x: f64) -> f64 {
        self.fd_step * x.abs().max(1.0)
    }

    /// `db_i/dy_l` into `out[i*n + l]`.
    pub fn drift_grad_y_into(&self, t: f64, y: &[f64], z: &[f64], a: &[f64], out: &mut [f64]) {
        let n = self.state_dim;
        debug_assert_eq!(out.len(), n * n);
        if let Some(f) = &self.gradients.drift_y {
            f(t, y, z, a, out);
            return;
        }
        let mut yp = y.to_vec();
        let mut ym = y.to_vec();
        let mut bp = vec![0.0; n];
        let mut bm = vec![0.0; n];
        for l in 0..n {
            let delta = self.fd_delta(y[l]);
            yp[l] = y[l] + delta;
            ym[l] = y[l] - delta;
            self.drift_into(t, &yp, z, a, &mut bp);
            self.drift_into(t, &ym, z, a, &mut bm);
            for i in 0..n {
                out[i * n + l] = (bp[i] - bm[i]) / (2.0 * delta);
            }
            yp[l] = y[l];
            ym[l] = y[l];
        }
    }

    /// `db_i/dz_{lj}` into `out[(i*n + l)*d + j]`.
    pub fn drift_grad_z_into(&self, t: f64, y: &[f64], z: &[f64], a: &[f64], out: &mut [f64]) {
        let n = self.state_dim;
        let nd = self.vol_len();
        debug_assert_eq!(out.len(), n * nd);
        if let Some(f) = &self.gradients.drift_z {
            f(t, y, z, a, out);
            return;
        }
        let mut zp = z.to_vec();
        let mut zm = z.to_vec();
        let mut bp = vec![0.0; n];
        let mut bm = vec![0.0; n];
        for e in 0..nd {
            let delta = self.fd_delta(z[e]);
            zp[e] = z[e] + delta;
            zm[e] = z[e] - delta;
            self.drift_into(t, y, &zp, a, &mut bp);
            self.drift_into(t, y, &zm, a, &mut bm);
            for i in 0..n {
                out[i * nd + e] = (bp[i] - bm[i]) / (2.0 * delta);
            }
            zp[e] = z[e];
            zm[e] = z[e];
        }
    }

    /// `dh/dy` into `out` of length `n`.
    pub fn running_cost_grad_y_into(
        &self,
        t: f64,
        y: &[f64],
        z: &[f64],
        a: &[f64],
        out: &mut [f64],
    ) {
        let n = self.state_dim;
        debug_assert_eq!(out.len(), n);
        if let Some(f) = &self.gradients.running_cost_y {
            f(t, y, z, a, out);
            return;
        }
        let mut yp = y.to_vec();
        let mut ym = y.to_vec();
        for l in 0..n {
            let delta = self.fd_delta(y[l]);
            yp[l] = y[l] + delta;
            ym[l] = y[l] - delta;
            out[l] =
                (self.running_cost(t, &yp, z, a) - self.running_cost(t, &ym, z, a)) / (2.0 * delta);
            yp[l] = y[l];
            ym[l] = y[l];
        }
    }

    /// `dh/dz` into `out` of length `n*d`.
    pub fn running_cost_grad_z_into(
        &self,
        t: f64,
        y: &[f64],
        z: &[f64],
        a: &[f64],
        out: &mut [f64],
    ) {
        let nd = self.vol_len();
        debug_assert_eq!(out.len(), nd);
        if let Some(f) = &self.gradients.running_cost_z {
            f(t, y, z, a, out);
            return;
        }
        let mut zp = z.to_vec();
        let mut zm = z.to_vec();
        for e in 0..nd {
            let delta = self.fd_delta(z[e]);
            zp[e] = z[e] + delta;
            zm[e] = z[e] - delta;
            out[e] =
                (self.running_cost(t, y, &zp, a) - self.running_cost(t, y, &zm, a)) / (2.0 * delta);
            zp[e] = z[e];
            zm[e] = z[e];
        }
    }

    /// `dg/dy` into `out` of length `n`.
    pub fn terminal_cost_grad_into(&self, y: &[f64], out: &mut [f64]) {
        let n = self.state_dim;
        debug_assert_eq!(out.len(), n);
        if let Some(f) = &self.gradients.terminal_cost_y {
            f(y, out);
            return;
        }
        let mut yp = y.to_vec();
        let mut ym = y.to_vec();
        for l in 0..n {
            let delta = self.fd_delta(y[l]);
            yp[l] = y[l] + delta;
            ym[l] = y[l] - delta;
            out[l] = (self.terminal_cost(&yp) - self.terminal_cost(&ym)) / (2.0 * delta);
            yp[l] = y[l];
            ym[l] = y[l];
        }
    }

    // -- weight-averaged coefficients ----------------------------------------
    //
    // Each average skips zero weights entirely, so a Dirac row evaluates the
    // single active grid point and nothing else — strict and relaxed
    // evaluations agree bit for bit.

    pub fn drift_avg_into(
        &self,
        t: f64,
        y: &[f64],
        z: &[f64],
        weights: &[f64],
        out: &mut [f64],
        scratch: &mut [f64],
    ) {
        debug_assert_eq!(weights.len(), self.grid.len());
        // First contribution assigned, not added to zero: keeps Dirac rows
        // bit-identical to direct evaluation even for negative zeros.
        out.fill(0.0);
        let mut first = true;
        for (j, &w) in weights.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            self.drift_into(t, y, z, self.grid.point(j), scratch);
            if first {
                for (o, &s) in out.iter_mut().zip(scratch.iter()) {
                    *o = w * s;
                }
                first = false;
            } else {
                for (o, &s) in out.iter_mut().zip(scratch.iter()) {
                    *o += w * s;
                }
            }
        }
    }

    pub fn running_cost_avg(&self, t: f64, y: &[f64], z: &[f64], weights: &[f64]) -> f64 {
        debug_assert_eq!(weights.len(), self.grid.len());
        let mut acc = 0.0;
        let mut first = true;
        for (j, &w) in weights.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            let term = w * self.running_cost(t, y, z, self.grid.point(j));
            if first {
                acc = term;
                first = false;
            } else {
                acc += term;
            }
        }
        acc
    }

    fn grad_avg_into(
        &self,
        weights: &[f64],
        out: &mut [f64],
        scratch: &mut [f64],
        mut eval: impl FnMut(&[f64], &mut [f64]),
    ) {
        debug_assert_eq!(weights.len(), self.grid.len());
        // The first contributing term is assigned rather than added to zero
        // so that a Dirac row reproduces direct evaluation bit for bit
        // (adding 0.0 would turn a negative zero into a positive one).
        out.fill(0.0);
        let mut first = true;
        for (j, &w) in weights.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            eval(self.grid.point(j), scratch);
            if first {
                for (o, &s) in out.iter_mut().zip(scratch.iter()) {
                    *o = w * s;
                }
                first = false;
            } else {
                for (o, &s) in out.iter_mut().zip(scratch.iter()) {
                    *o += w * s;
                }
            }
        }
    }

    pub fn drift_grad_y_avg_into(
        &self,
        t: f64,
        y: &[f64],
        z: &[f64],
        weights: &[f64],
        out: &mut [f64],
        scratch: &mut [f64],
    ) {
        self.grad_avg_into(weights, out, scratch, |a, s| {
            self.drift_grad_y_into(t, y, z, a, s)
        });
    }

    pub fn drift_grad_z_avg_into(
        &self,
        t: f64,
        y: &[f64],
        z: &[f64],
        weights: &[f64],
        out: &mut [f64],
        scratch: &mut [f64],
    ) {
        self.grad_avg_into(weights, out, scratch, |a, s| {
            self.drift_grad_z_into(t, y, z, a, s)
        });
    }

    pub fn running_cost_grad_y_avg_into(
        &self,
        t: f64,
        y: &[f64],
        z: &[f64],
        weights: &[f64],
        out: &mut [f64],
        scratch: &mut [f64],
    ) {
        self.grad_avg_into(weights, out, scratch, |a, s| {
            self.running_cost_grad_y_into(t, y, z, a, s)
        });
    }

    pub fn running_cost_grad_z_avg_into(
        &self,
        t: f64,
        y: &[f64],
        z: &[f64],
        weights: &[f64],
        out: &mut [f64],
        scratch: &mut [f64],
    ) {
        self.grad_avg_into(weights, out, scratch, |a, s| {
            self.running_cost_grad_z_into(t, y, z, a, s)
        });
    }
}

impl ProblemSpecBuilder {
    pub fn drift(
        mut self,
        f: impl Fn(f64, &[f64], &[f64], &[f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        self.drift = Some(Arc::new(f));
        self
    }

    pub fn running_cost(
        mut self,
        f: impl Fn(f64, &[f64], &[f64], &[f64]) -> f64 + Send + Sync + 'static,
    ) -> Self {
        self.running_cost = Some(Arc::new(f));
        self
    }

    pub fn terminal_cost(mut self, f: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> Self {
        self.terminal_cost = Some(Arc::new(f));
        self
    }

    pub fn terminal_condition(
        mut self,
        f: impl Fn(&PathView<'_>, &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        self.terminal_condition = Some(Arc::new(f));
        self
    }

    pub fn drift_grad_y(
        mut self,
        f: impl Fn(f64, &[f64], &[f64], &[f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        self.gradients.drift_y = Some(Arc::new(f));
        self
    }

    pub fn drift_grad_z(
        mut self,
        f: impl Fn(f64, &[f64], &[f64], &[f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        self.gradients.drift_z = Some(Arc::new(f));
        self
    }

    pub fn running_cost_grad_y(
        mut self,
        f: impl Fn(f64, &[f64], &[f64], &[f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        self.gradients.running_cost_y = Some(Arc::new(f));
        self
    }

    pub fn running_cost_grad_z(
        mut self,
        f: impl Fn(f64, &[f64], &[f64], &[f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        self.gradients.running_cost_z = Some(Arc::new(f));
        self
    }

    pub fn terminal_cost_grad(
        mut self,
        f: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        self.gradients.terminal_cost_y = Some(Arc::new(f));
        self
    }

    pub fn fd_step(mut self, step: f64) -> Self {
        self.fd_step = step;
        self
    }

    pub fn build(self) -> Result<ProblemSpec> {
        if self.state_dim == 0 {
            return Err(Error::Invalid("state dimension must be >= 1".into()));
        }
        if self.noise_dim == 0 {
            return Err(Error::Invalid("noise dimension must be >= 1".into()));
        }
        if !(self.fd_step.is_finite() && self.fd_step > 0.0) {
            return Err(Error::Invalid(format!(
                "finite-difference step must be positive, got {}",
                self.fd_step
            )));
        }
        Ok(ProblemSpec {
            state_dim: self.state_dim,
            noise_dim: self.noise_dim,
            grid: self.grid,
            time: self.time,
            drift: self
                .drift
                .ok_or_else(|| Error::Invalid("problem is missing the drift".into()))?,
            running_cost: self
                .running_cost
                .ok_or_else(|| Error::Invalid("problem is missing the running cost".into()))?,
            terminal_cost: self
                .terminal_cost
                .ok_or_else(|| Error::Invalid("problem is missing the terminal cost".into()))?,
            terminal_condition: self.terminal_condition.ok_or_else(|| {
                Error::Invalid("problem is missing the terminal condition".into())
            })?,
            gradients: self.gradients,
            fd_step: self.fd_step,
        })
    }
}

// ---------------------------------------------------------------------------
// Validation
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct ValidationReport {
    pub probe_seed: u64,
    pub gradient_mode: GradientMode,
    pub checks: Vec<CheckResult>,
}

impl ValidationReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn check(&self, name: &str) -> Option<&CheckResult> {
        self.checks.iter().find(|c| c.name == name)
    }
}

/// Deterministic sanity checks on a problem: coefficient finiteness at random
/// probes, analytic-vs-finite-difference gradient consistency (only for
/// gradients actually supplied), and simplex validity of an attached
/// schedule. Same spec and probe seed always produce the identical report.
///
/// Not checked: square-integrability of controls (trivial on a finite grid)
/// and growth conditions outside the probed box.
pub fn validate_problem(
    spec: &ProblemSpec,
    schedule: Option<&RelaxedControlSchedule>,
    probe_seed: u64,
) -> ValidationReport {
    let mut rng = ProbeRng::new(probe_seed);
    let n = spec.state_dim();
    let nd = spec.vol_len();
    let horizon = spec.time().horizon();
    let mut checks = Vec::new();

    let probe = |rng: &mut ProbeRng| -> (f64, Vec<f64>, Vec<f64>, usize) {
        let t = rng.range(0.0, horizon);
        let y: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        let z: Vec<f64> = (0..nd).map(|_| rng.normal()).collect();
        let j = rng.index(spec.grid().len());
        (t, y, z, j)
    };

    // Finiteness of b, h at random probes.
    {
        let mut drift_ok = true;
        let mut cost_ok = true;
        let mut detail = String::from("finite at all probes");
        let mut buf = vec![0.0; n];
        for i in 0..VALIDATION_PROBES {
            let (t, y, z, j) = probe(&mut rng);
            let a = spec.grid().point(j);
            spec.drift_into(t, &y, &z, a, &mut buf);
            if drift_ok && buf.iter().any(|v| !v.is_finite()) {
                drift_ok = false;
                detail = format!("drift non-finite at probe {i}");
            }
            let h = spec.running_cost(t, &y, &z, a);
            if cost_ok && !h.is_finite() {
                cost_ok = false;
                detail = format!("running cost non-finite at probe {i}");
            }
        }
        checks.push(CheckResult {
            name: "drift-finite".into(),
            passed: drift_ok,
            detail: if drift_ok {
                "finite at all probes".into()
            } else {
                detail.clone()
            },
        });
        checks.push(CheckResult {
            name: "running-cost-finite".into(),
            passed: cost_ok,
            detail: if cost_ok {
                "finite at all probes".into()
            } else {
                detail
            },
        });
    }

    // Finiteness of g and xi.
    {
        let mut g_ok = true;
        let mut xi_ok = true;
        let steps = spec.time().steps();
        let d = spec.noise_dim();
        let sqrt_dt = spec.time().dt().sqrt();
        let mut out = vec![0.0; n];
        for _ in 0..VALIDATION_PROBES {
            let y: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
            if !spec.terminal_cost(&y).is_finite() {
                g_ok = false;
            }
            let increments: Vec<f64> = (0..steps * d).map(|_| sqrt_dt * rng.normal()).collect();
            let view = PathView::new(&increments, d);
            spec.terminal_condition_into(&view, &mut out);
            if out.iter().any(|v| !v.is_finite()) {
                xi_ok = false;
            }
        }
        checks.push(CheckResult {
            name: "terminal-cost-finite".into(),
            passed: g_ok,
            detail: if g_ok {
                "finite at all probes".into()
            } else {
                "non-finite value".into()
            },
        });
        checks.push(CheckResult {
            name: "terminal-condition-finite".into(),
            passed: xi_ok,
            detail: if xi_ok {
                "finite at all probes".into()
            } else {
                "non-finite value".into()
            },
        });
    }

    // Gradient consistency, one check per supplied gradient.
    let rel_err = |a: f64, f: f64| (a - f).abs() / a.abs().max(f.abs()).max(1.0);
    #[allow(clippy::type_complexity)]
    let consistency = |name: &str,
                       rng: &mut ProbeRng,
                       len: usize,
                       analytic: &dyn Fn(f64, &[f64], &[f64], &[f64], &mut [f64]),
                       reference: &dyn Fn(f64, &[f64], &[f64], &[f64], &mut [f64])|
     -> CheckResult {
        let mut worst = 0.0_f64;
        let mut a_buf = vec![0.0; len];
        let mut f_buf = vec![0.0; len];
        for _ in 0..VALIDATION_PROBES {
            let (t, y, z, j) = probe(rng);
            let a = spec.grid().point(j);
            analytic(t, &y, &z, a, &mut a_buf);
            reference(t, &y, &z, a, &mut f_buf);
            for (&av, &fv) in a_buf.iter().zip(f_buf.iter()) {
                worst = worst.max(rel_err(av, fv));
            }
        }
        CheckResult {
            name: name.into(),
            passed: worst <= GRADIENT_CONSISTENCY_TOL,
            detail: format!("worst relative error {worst:.3e}"),
        }
    };

    let bare = ProblemSpec {
        gradients: Gradients::default(),
        ..spec.clone()
    };
    if spec.gradients.drift_y.is_some() {
        checks.push(consistency(
            "drift-grad-y-consistency",
            &mut rng,
            n * n,
            &|t, y, z, a, o| spec.drift_grad_y_into(t, y, z, a, o),
            &|t, y, z, a, o| bare.drift_grad_y_into(t, y, z, a, o),
        ));
    }
    if spec.gradients.drift_z.is_some() {
        checks.push(consistency(
            "drift-grad-z-consistency",
            &mut rng,
            n * nd,
            &|t, y, z, a, o| spec.drift_grad_z_into(t, y, z, a, o),
            &|t, y, z, a, o| bare.drift_grad_z_into(t, y, z, a, o),
        ));
    }
    if spec.gradients.running_cost_y.is_some() {
        checks.push(consistency(
            "running-cost-grad-y-consistency",
            &mut rng,
            n,
            &|t, y, z, a, o| spec.running_cost_grad_y_into(t, y, z, a, o),
            &|t, y, z, a, o| bare.running_cost_grad_y_into(t, y, z, a, o),
        ));
    }
    if spec.gradients.running_cost_z.is_some() {
        checks.push(consistency(
            "running-cost-grad-z-consistency",
            &mut rng,
            nd,
            &|t, y, z, a, o| spec.running_cost_grad_z_into(t, y, z, a, o),
            &|t, y, z, a, o| bare.running_cost_grad_z_into(t, y, z, a, o),
        ));
    }
    if spec.gradients.terminal_cost_y.is_some() {
        let mut worst = 0.0_f64;
        let mut a_buf = vec![0.0; n];
        let mut f_buf = vec![0.0; n];
        for _ in 0..VALIDATION_PROBES {
            let y: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
            spec.terminal_cost_grad_into(&y, &mut a_buf);
            bare.terminal_cost_grad_into(&y, &mut f_buf);
            for (&av, &fv) in a_buf.iter().zip(f_buf.iter()) {
                worst = worst.max(rel_err(av, fv));
            }
        }
        checks.push(CheckResult {
            name: "terminal-cost-grad-consistency".into(),
            passed: worst <= GRADIENT_CONSISTENCY_TOL,
            detail: format!("worst relative error {worst:.3e}"),
        });
    }

    // Attached schedule, if any.
    if let Some(sched) = schedule {
        let shape_ok =
            sched.steps() == spec.time().steps() && sched.grid_len() == spec.grid().len();
        let mut detail = String::from("rows on the simplex");
        let mut passed = shape_ok;
        if !shape_ok {
            detail = format!(
                "schedule shape {}x{} does not match problem {}x{}",
                sched.steps(),
                sched.grid_len(),
                spec.time().steps(),
                spec.grid().len()
            );
        } else {
            for k in 0..sched.steps() {
                let row = sched.row(k);
                let sum: f64 = row.iter().sum();
                if row.iter().any(|&w| w < 0.0) || (sum - 1.0).abs() > SIMPLEX_RENORM_TOL {
                    passed = false;
                    detail = format!("row {k} violates the simplex (sum {sum})");
                    break;
                }
            }
        }
        checks.push(CheckResult {
            name: "schedule-simplex".into(),
            passed,
            detail,
        });
    }

    ValidationReport {
        probe_seed,
        gradient_mode: spec.gradient_mode(),
        checks,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_spec() -> ProblemSpec {
        // b = v, h = v^2/2, g = y, xi = W_T on grid {0, 1}.
        ProblemSpec::builder(
            1,
            1,
            ControlGrid::scalar(&[0.0, 1.0]).unwrap(),
            TimeGrid::new(1.0, 4).unwrap(),
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

    #[test]
    fn time_grid_hits_horizon_exactly() {
        let tg = TimeGrid::new(0.7, 7).unwrap();
        assert_eq!(tg.node(7), 0.7);
        assert_eq!(tg.node(0), 0.0);
        for k in 0..7 {
            assert!(tg.node(k) < tg.node(k + 1));
        }
    }

    #[test]
    fn empty_time_grid_is_rejected() {
        let err = TimeGrid::new(1.0, 0).unwrap_err();
        assert!(err.to_string().contains("empty time grid"), "{err}");
    }

    #[test]
    fn grid_rejects_inconsistent_dimensions() {
        let err = ControlGrid::new(vec![vec![0.0], vec![1.0, 2.0]]).unwrap_err();
        assert!(matches!(err, Error::Shape(_)), "{err}");
    }

    #[test]
    fn grid_rejects_duplicate_points() {
        let err = ControlGrid::scalar(&[0.5, 1.0, 0.5])
            .unwrap_err()
            .to_string();
        assert!(err.contains("distinct"), "{err}");
        assert!(ControlGrid::scalar(&[0.5, 1.0]).is_ok());
    }

    #[test]
    fn lattice_endpoints_are_exact() {
        let g = ControlGrid::lattice(-1.0, 1.0, 5).unwrap();
        assert_eq!(g.len(), 5);
        assert_eq!(g.point(0)[0], -1.0);
        assert_eq!(g.point(4)[0], 1.0);
        assert_eq!(g.point(2)[0], 0.0);
    }

    #[test]
    fn dirac_rows_are_exact_basis_vectors() {
        let grid = ControlGrid::scalar(&[0.0, 0.5, 1.0]).unwrap();
        let v = StrictControlSchedule::new(vec![2, 0, 1], 3).unwrap();
        let q = dirac_embed(&v, &grid).unwrap();
        assert_eq!(q.row(0), &[0.0, 0.0, 1.0]);
        assert_eq!(q.row(1), &[1.0, 0.0, 0.0]);
        assert_eq!(q.row(2), &[0.0, 1.0, 0.0]);
        assert_eq!(q.dirac_index(0), Some(2));
    }

    #[test]
    fn mix_endpoints_are_bit_exact() {
        let mu = RelaxedControlSchedule::from_rows(vec![vec![0.25, 0.75], vec![1.0, 0.0]]).unwrap();
        let q = RelaxedControlSchedule::from_rows(vec![vec![0.5, 0.5], vec![0.0, 1.0]]).unwrap();
        assert_eq!(mix(&mu, &q, 0.0).unwrap(), mu);
        assert_eq!(mix(&mu, &q, 1.0).unwrap(), q);
        let half = mix(&mu, &q, 0.5).unwrap();
        assert_eq!(half.row(0), &[0.375, 0.625]);
    }

    #[test]
    fn mix_rejects_theta_outside_unit_interval() {
        let mu = RelaxedControlSchedule::uniform(2, 2).unwrap();
        assert!(mix(&mu, &mu, 1.5).is_err());
        assert!(mix(&mu, &mu, -0.1).is_err());
    }

    #[test]
    fn schedule_rows_renormalize_within_tolerance_only() {
        // Sum off by 1e-10: renormalized.
        let s = RelaxedControlSchedule::from_rows(vec![vec![0.5 + 1e-10, 0.5]]).unwrap();
        let sum: f64 = s.row(0).iter().sum();
        assert!((sum - 1.0).abs() <= SIMPLEX_TOL);
        // Sum off by 1e-3: rejected.
        assert!(RelaxedControlSchedule::from_rows(vec![vec![0.5, 0.501]]).is_err());
        // Negative weight: rejected.
        assert!(RelaxedControlSchedule::from_rows(vec![vec![-0.1, 1.1]]).is_err());
    }

    #[test]
    fn strict_schedule_rejects_out_of_range_indices() {
        let err = StrictControlSchedule::new(vec![0, 3], 3).unwrap_err();
        assert!(err.to_string().contains("out of range"), "{err}");
    }

    #[test]
    fn relaxed_csv_round_trips() {
        let s = RelaxedControlSchedule::from_rows(vec![vec![0.25, 0.75, 0.0], vec![0.0, 0.0, 1.0]])
            .unwrap();
        let mut buf = Vec::new();
        s.to_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("w0,w1,w2\n"), "{text}");
        let back = RelaxedControlSchedule::from_csv(&buf[..]).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn strict_csv_round_trips() {
        let s = StrictControlSchedule::new(vec![1, 0, 2, 2], 3).unwrap();
        let mut buf = Vec::new();
        s.to_csv(&mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf.clone()).unwrap(),
            "index\n1\n0\n2\n2\n"
        );
        let back = StrictControlSchedule::from_csv(&buf[..], 3).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn refine_repeats_rows() {
        let s = RelaxedControlSchedule::from_rows(vec![vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let r = s.refine(3).unwrap();
        assert_eq!(r.steps(), 6);
        for k in 0..3 {
            assert_eq!(r.row(k), s.row(0));
            assert_eq!(r.row(3 + k), s.row(1));
        }
    }

    #[test]
    fn validation_passes_on_consistent_spec() {
        let report = validate_problem(&toy_spec(), None, 7);
        assert!(report.all_passed(), "{report:?}");
        assert_eq!(report.gradient_mode, GradientMode::Analytic);
    }

    #[test]
    fn validation_reports_are_deterministic() {
        let a = validate_problem(&toy_spec(), None, 7);
        let b = validate_problem(&toy_spec(), None, 7);
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
    }

    #[test]
    fn wrong_terminal_gradient_fails_consistency() {
        // g(y) = y but the supplied gradient claims 0.
        let spec = ProblemSpec::builder(
            1,
            1,
            ControlGrid::scalar(&[0.0]).unwrap(),
            TimeGrid::new(1.0, 2).unwrap(),
        )
        .drift(|_, _, _, _, out| out[0] = 0.0)
        .running_cost(|_, _, _, _| 0.0)
        .terminal_cost(|y| y[0])
        .terminal_condition(|_, out| out[0] = 0.0)
        .terminal_cost_grad(|_, out| out[0] = 0.0)
        .build()
        .unwrap();
        let report = validate_problem(&spec, None, 7);
        let check = report.check("terminal-cost-grad-consistency").unwrap();
        assert!(!check.passed, "{check:?}");
        assert_eq!(report.gradient_mode, GradientMode::Mixed);
    }

    #[test]
    fn fd_gradients_recover_quadratic_running_cost() {
        // No analytic gradients: h = y^2 + z^2 must difference correctly.
        let spec = ProblemSpec::builder(
            1,
            1,
            ControlGrid::scalar(&[0.0]).unwrap(),
            TimeGrid::new(1.0, 2).unwrap(),
        )
        .drift(|_, _, _, _, out| out[0] = 0.0)
        .running_cost(|_, y, z, _| y[0] * y[0] + z[0] * z[0])
        .terminal_cost(|_| 0.0)
        .terminal_condition(|_, out| out[0] = 0.0)
        .build()
        .unwrap();
        assert_eq!(spec.gradient_mode(), GradientMode::FiniteDifference);
        let mut gy = [0.0];
        spec.running_cost_grad_y_into(0.3, &[1.5], &[0.2], &[0.0], &mut gy);
        assert!((gy[0] - 3.0).abs() < 1e-8, "dh/dy = {}", gy[0]);
        let mut gz = [0.0];
        spec.running_cost_grad_z_into(0.3, &[1.5], &[0.2], &[0.0], &mut gz);
        assert!((gz[0] - 0.4).abs() < 1e-8, "dh/dz = {}", gz[0]);
    }

    #[test]
    fn schedule_check_flags_shape_mismatch() {
        let spec = toy_spec(); // 4 steps, 2 grid points
        let sched = RelaxedControlSchedule::uniform(3, 2).unwrap();
        let report = validate_problem(&spec, Some(&sched), 7);
        let check = report.check("schedule-simplex").unwrap();
        assert!(!check.passed);
        let good = RelaxedControlSchedule::uniform(4, 2).unwrap();
        let report = validate_problem(&spec, Some(&good), 7);
        assert!(report.check("schedule-simplex").unwrap().passed);
    }

    #[test]
    fn dirac_average_matches_strict_evaluation_bitwise() {
        let spec = toy_spec();
        let grid = spec.grid().clone();
        let y = [0.37];
        let z = [-0.81];
        let mut direct = [0.0];
        spec.drift_into(0.25, &y, &z, grid.point(1), &mut direct);
        let mut avg = [0.0];
        let mut scratch = [0.0];
        spec.drift_avg_into(0.25, &y, &z, &[0.0, 1.0], &mut avg, &mut scratch);
        assert_eq!(direct[0].to_bits(), avg[0].to_bits());
        let h_direct = spec.running_cost(0.25, &y, &z, grid.point(1));
        let h_avg = spec.running_cost_avg(0.25, &y, &z, &[0.0, 1.0]);
        assert_eq!(h_direct.to_bits(), h_avg.to_bits());
    }
}
