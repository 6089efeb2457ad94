//! A small declarative problem vocabulary (polynomials in the state,
//! volatility, control, and terminal Brownian value) and the registry of
//! named benchmark problems built from it.
//!
//! Polynomials are differentiated symbolically, so every problem expressed
//! in this vocabulary gets analytic gradients for free.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::problem::{ControlGrid, ProblemSpec, TimeGrid};

fn coeff_one() -> f64 {
    1.0
}
fn dim_one() -> usize {
    1
}
fn horizon_one() -> f64 {
    1.0
}

/// One monomial: `c` times the product of `y_i^{y[i]}`, `z_e^{z[e]}`,
/// `v_c^{v[c]}`, and `w_j^{w[j]}`, where `z` is the flattened volatility
/// (row `l`, column `j` at entry `l*d + j`) and `w` is the Brownian value
/// at the horizon. Omitted exponent entries are zero.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolyTerm {
    #[serde(default = "coeff_one")]
    pub c: f64,
    #[serde(default)]
    pub y: Vec<u32>,
    #[serde(default)]
    pub z: Vec<u32>,
    #[serde(default)]
    pub v: Vec<u32>,
    #[serde(default)]
    pub w: Vec<u32>,
}

impl Default for PolyTerm {
    fn default() -> Self {
        Self {
            c: 1.0,
            y: Vec::new(),
            z: Vec::new(),
            v: Vec::new(),
            w: Vec::new(),
        }
    }
}

/// A problem assembled from polynomial coefficients. The drift and running
/// cost may use `y`, `z`, `v`; the terminal cost only `y`; the terminal
/// condition only `w` (the Brownian value at the horizon).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InlineProblem {
    #[serde(default = "horizon_one")]
    pub horizon: f64,
    #[serde(default = "dim_one")]
    pub state_dim: usize,
    #[serde(default = "dim_one")]
    pub noise_dim: usize,
    /// Control grid points, one inner vector per point.
    pub grid: Vec<Vec<f64>>,
    /// Drift components, one polynomial per state coordinate.
    pub b: Vec<Vec<PolyTerm>>,
    /// Running cost polynomial (empty means zero).
    #[serde(default)]
    pub h: Vec<PolyTerm>,
    /// Terminal cost polynomial in `y` (empty means zero).
    #[serde(default)]
    pub g: Vec<PolyTerm>,
    /// Terminal condition components, polynomials in `w`.
    pub xi: Vec<Vec<PolyTerm>>,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Var {
    Y,
    Z,
    V,
    W,
}

impl Var {
    fn letter(self) -> char {
        match self {
            Var::Y => 'y',
            Var::Z => 'z',
            Var::V => 'v',
            Var::W => 'w',
        }
    }
}

/// A compiled term: exponent vectors padded to their full lengths.
#[derive(Clone, Debug)]
struct Term {
    c: f64,
    y: Vec<u32>,
    z: Vec<u32>,
    v: Vec<u32>,
    w: Vec<u32>,
}

impl Term {
    fn exps(&self, var: Var) -> &[u32] {
        match var {
            Var::Y => &self.y,
            Var::Z => &self.z,
            Var::V => &self.v,
            Var::W => &self.w,
        }
    }

    fn exps_mut(&mut self, var: Var) -> &mut Vec<u32> {
        match var {
            Var::Y => &mut self.y,
            Var::Z => &mut self.z,
            Var::V => &mut self.v,
            Var::W => &mut self.w,
        }
    }
}

#[derive(Clone, Debug, Default)]
struct Poly {
    terms: Vec<Term>,
}

fn pow_product(acc: f64, values: &[f64], exps: &[u32]) -> f64 {
    let mut prod = acc;
    for (&x, &e) in values.iter().zip(exps) {
        if e > 0 {
            prod *= x.powi(e as i32);
        }
    }
    prod
}

impl Poly {
    fn eval(&self, y: &[f64], z: &[f64], v: &[f64], w: &[f64]) -> f64 {
        let mut acc = 0.0;
        for t in &self.terms {
            let mut prod = t.c;
            prod = pow_product(prod, y, &t.y);
            prod = pow_product(prod, z, &t.z);
            prod = pow_product(prod, v, &t.v);
            prod = pow_product(prod, w, &t.w);
            acc += prod;
        }
        acc
    }

    /// Partial derivative with respect to component `index` of `var`.
    fn diff(&self, var: Var, index: usize) -> Poly {
        let mut terms = Vec::new();
        for t in &self.terms {
            let e = t.exps(var)[index];
            if e > 0 {
                let mut nt = t.clone();
                nt.c *= e as f64;
                nt.exps_mut(var)[index] -= 1;
                terms.push(nt);
            }
        }
        Poly { terms }
    }
}

struct Dims {
    y: usize,
    z: usize,
    v: usize,
    w: usize,
}

/// Pads exponent vectors to full length, rejecting out-of-range entries and
/// uses of variables that `context` does not provide (signalled by a zero
/// allowed length while the term uses the variable).
fn compile(terms: &[PolyTerm], dims: &Dims, context: &str) -> Result<Poly> {
    let mut out = Vec::with_capacity(terms.len());
    for (idx, term) in terms.iter().enumerate() {
        if !term.c.is_finite() {
            return Err(Error::Invalid(format!(
                "{context}: term {idx} has non-finite coefficient {}",
                term.c
            )));
        }
        let mut compiled = Term {
            c: term.c,
            y: term.y.clone(),
            z: term.z.clone(),
            v: term.v.clone(),
            w: term.w.clone(),
        };
        for (var, allowed) in [
            (Var::Y, dims.y),
            (Var::Z, dims.z),
            (Var::V, dims.v),
            (Var::W, dims.w),
        ] {
            let exps = compiled.exps_mut(var);
            let used = exps.iter().any(|&e| e > 0);
            if used && allowed == 0 {
                return Err(Error::Invalid(format!(
                    "{context}: term {idx} uses variable `{}`, which is not available here",
                    var.letter()
                )));
            }
            if exps.len() > allowed {
                return Err(Error::Invalid(format!(
                    "{context}: term {idx} lists {} exponents for `{}`, but only {} component(s) exist",
                    exps.len(),
                    var.letter(),
                    allowed
                )));
            }
            exps.resize(allowed, 0);
        }
        out.push(compiled);
    }
    Ok(Poly { terms: out })
}

impl InlineProblem {
    /// Builds the runnable problem on a uniform time grid with `steps`
    /// steps and the problem's own control grid.
    pub fn build(&self, steps: usize) -> Result<ProblemSpec> {
        self.build_with_grid(steps, ControlGrid::new(self.grid.clone())?)
    }

    /// Builds with an explicit control grid (e.g. a user override); the
    /// grid's point dimension must match what the polynomials expect.
    pub fn build_with_grid(&self, steps: usize, grid: ControlGrid) -> Result<ProblemSpec> {
        let n = self.state_dim;
        let d = self.noise_dim;
        if n == 0 || d == 0 {
            return Err(Error::Invalid(
                "state and noise dimensions must be positive".into(),
            ));
        }
        if self.b.len() != n {
            return Err(Error::Invalid(format!(
                "drift has {} component(s) but the state dimension is {n}",
                self.b.len()
            )));
        }
        if self.xi.len() != n {
            return Err(Error::Invalid(format!(
                "terminal condition has {} component(s) but the state dimension is {n}",
                self.xi.len()
            )));
        }
        let nd = n * d;
        let m_u = grid.dim();
        let dyn_dims = Dims {
            y: n,
            z: nd,
            v: m_u,
            w: 0,
        };
        let mut b: Vec<Poly> = Vec::with_capacity(n);
        for (i, terms) in self.b.iter().enumerate() {
            b.push(compile(terms, &dyn_dims, &format!("drift component {i}"))?);
        }
        let h = compile(&self.h, &dyn_dims, "running cost")?;
        let g = compile(
            &self.g,
            &Dims {
                y: n,
                z: 0,
                v: 0,
                w: 0,
            },
            "terminal cost",
        )?;
        let mut xi: Vec<Poly> = Vec::with_capacity(n);
        for (i, terms) in self.xi.iter().enumerate() {
            xi.push(compile(
                terms,
                &Dims {
                    y: 0,
                    z: 0,
                    v: 0,
                    w: d,
                },
                &format!("terminal condition component {i}"),
            )?);
        }

        let dby: Vec<Vec<Poly>> = b
            .iter()
            .map(|p| (0..n).map(|l| p.diff(Var::Y, l)).collect())
            .collect();
        let dbz: Vec<Vec<Poly>> = b
            .iter()
            .map(|p| (0..nd).map(|e| p.diff(Var::Z, e)).collect())
            .collect();
        let dhy: Vec<Poly> = (0..n).map(|l| h.diff(Var::Y, l)).collect();
        let dhz: Vec<Poly> = (0..nd).map(|e| h.diff(Var::Z, e)).collect();
        let dgy: Vec<Poly> = (0..n).map(|l| g.diff(Var::Y, l)).collect();

        let b = Arc::new(b);
        let time = TimeGrid::new(self.horizon, steps)?;

        let b_cl = b.clone();
        let xi_cl = Arc::new(xi);
        let builder = ProblemSpec::builder(n, d, grid, time)
            .drift(move |_, y, z, a, out| {
                for (o, poly) in out.iter_mut().zip(b_cl.iter()) {
                    *o = poly.eval(y, z, a, &[]);
                }
            })
            .running_cost(move |_, y, z, a| h.eval(y, z, a, &[]))
            .terminal_cost(move |y| g.eval(y, &[], &[], &[]))
            .terminal_condition(move |path, out| {
                let mut w = vec![0.0; d];
                path.terminal_into(&mut w);
                for (o, poly) in out.iter_mut().zip(xi_cl.iter()) {
                    *o = poly.eval(&[], &[], &[], &w);
                }
            })
            .drift_grad_y(move |_, y, z, a, out| {
                for i in 0..n {
                    for l in 0..n {
                        out[i * n + l] = dby[i][l].eval(y, z, a, &[]);
                    }
                }
            })
            .drift_grad_z(move |_, y, z, a, out| {
                for i in 0..n {
                    for e in 0..nd {
                        out[i * nd + e] = dbz[i][e].eval(y, z, a, &[]);
                    }
                }
            })
            .running_cost_grad_y(move |_, y, z, a, out| {
                for (o, poly) in out.iter_mut().zip(dhy.iter()) {
                    *o = poly.eval(y, z, a, &[]);
                }
            })
            .running_cost_grad_z(move |_, y, z, a, out| {
                for (o, poly) in out.iter_mut().zip(dhz.iter()) {
                    *o = poly.eval(y, z, a, &[]);
                }
            })
            .terminal_cost_grad(move |y, out| {
                for (o, poly) in out.iter_mut().zip(dgy.iter()) {
                    *o = poly.eval(y, &[], &[], &[]);
                }
            });
        builder.build()
    }
}

/// A registry entry: a named problem with human-readable reference values.
#[derive(Clone, Debug)]
pub struct BuiltinProblem {
    pub name: &'static str,
    pub summary: &'static str,
    /// Known reference values, for display and for tests.
    pub reference: &'static str,
    pub problem: InlineProblem,
}

fn term(c: f64) -> PolyTerm {
    PolyTerm {
        c,
        ..Default::default()
    }
}

fn scalar_grid(points: &[f64]) -> Vec<Vec<f64>> {
    points.iter().map(|&p| vec![p]).collect()
}

fn p_lin() -> InlineProblem {
    InlineProblem {
        horizon: 1.0,
        state_dim: 1,
        noise_dim: 1,
        grid: scalar_grid(&[0.0]),
        b: vec![vec![PolyTerm {
            y: vec![1],
            ..term(1.0)
        }]],
        h: vec![],
        g: vec![],
        xi: vec![vec![PolyTerm {
            w: vec![1],
            ..term(1.0)
        }]],
    }
}

fn p_quad() -> InlineProblem {
    InlineProblem {
        horizon: 1.0,
        state_dim: 1,
        noise_dim: 1,
        grid: scalar_grid(&[0.0, 0.5, 1.0, 1.5, 2.0]),
        b: vec![vec![PolyTerm {
            v: vec![1],
            ..term(1.0)
        }]],
        h: vec![PolyTerm {
            v: vec![2],
            ..term(0.5)
        }],
        g: vec![PolyTerm {
            y: vec![1],
            ..term(1.0)
        }],
        xi: vec![vec![PolyTerm {
            w: vec![1],
            ..term(1.0)
        }]],
    }
}

fn p_bang() -> InlineProblem {
    InlineProblem {
        horizon: 1.0,
        state_dim: 1,
        noise_dim: 1,
        grid: scalar_grid(&[-1.0, 1.0]),
        b: vec![vec![PolyTerm {
            v: vec![1],
            ..term(1.0)
        }]],
        h: vec![],
        g: vec![PolyTerm {
            y: vec![2],
            ..term(1.0)
        }],
        xi: vec![vec![]],
    }
}

/// All registered problems, in display order.
pub fn builtin_problems() -> Vec<BuiltinProblem> {
    vec![
        BuiltinProblem {
            name: "P-LIN",
            summary: "linear state feedback: b = y, h = 0, g = 0, terminal state = W_T; \
                      the control has no effect",
            reference: "volatility at time 0 equals exp(-1) ~ 0.3679",
            problem: p_lin(),
        },
        BuiltinProblem {
            name: "P-QUAD",
            summary: "quadratic control cost: b = v, h = v^2/2, g = y, terminal state = W_T; \
                      grid {0, 0.5, 1, 1.5, 2}",
            reference: "optimal control v = 1 (index 2), optimal cost -0.5, adjoint = 1",
            problem: p_quad(),
        },
        BuiltinProblem {
            name: "P-BANG",
            summary: "bang-bang mixing: b = v, h = 0, g = y^2, terminal state = 0; \
                      grid {-1, +1}",
            reference: "relaxed optimum 0 at the even mixture; cost of any schedule equals \
                        (time integral of the mean control)^2",
            problem: p_bang(),
        },
    ]
}

/// The registered problem names, in display order.
pub fn builtin_names() -> Vec<&'static str> {
    builtin_problems().iter().map(|b| b.name).collect()
}

/// Looks up a registry entry by name (ASCII case-insensitive).
pub fn find_builtin(name: &str) -> Option<BuiltinProblem> {
    builtin_problems()
        .into_iter()
        .find(|b| b.name.eq_ignore_ascii_case(name))
}

/// Builds a registered problem on `steps` time steps, optionally replacing
/// its control grid.
pub fn build_builtin(
    name: &str,
    steps: usize,
    grid_override: Option<ControlGrid>,
) -> Result<ProblemSpec> {
    let entry = find_builtin(name).ok_or_else(|| {
        Error::Invalid(format!(
            "unknown problem `{name}`; registered problems: {}",
            builtin_names().join(", ")
        ))
    })?;
    match grid_override {
        Some(grid) => entry.problem.build_with_grid(steps, grid),
        None => entry.problem.build(steps),
    }
}
