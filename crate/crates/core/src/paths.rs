//! Brownian increment generation and storage.
//!
//! Increments are drawn from the counter-based generator, so path `p`,
//! step `k`, component `j` is the same number for a given seed no matter
//! how many threads fill the buffer or in what order paths are visited.

use std::io::Write as IoWrite;

use crate::error::{Error, Result};
use crate::parallel::for_path_chunks_mut;
use crate::problem::TimeGrid;
use crate::rng;

/// Hard cap on `paths * steps * noise_dim` for one bundle (2^28 values,
/// 2 GiB of f64), so a typo in a flag fails fast instead of thrashing.
pub const MAX_BUNDLE_LEN: usize = 1 << 28;

/// Read-only view of one path's increments, row `k` holding `dW_k` in `R^d`.
pub struct PathView<'a> {
    increments: &'a [f64],
    noise_dim: usize,
}

impl<'a> PathView<'a> {
    pub fn new(increments: &'a [f64], noise_dim: usize) -> Self {
        debug_assert!(noise_dim > 0 && increments.len().is_multiple_of(noise_dim));
        Self {
            increments,
            noise_dim,
        }
    }

    pub fn steps(&self) -> usize {
        self.increments.len() / self.noise_dim
    }

    pub fn noise_dim(&self) -> usize {
        self.noise_dim
    }

    pub fn increment(&self, k: usize) -> &[f64] {
        &self.increments[k * self.noise_dim..(k + 1) * self.noise_dim]
    }

    /// `W` at node `k` (sum of the first `k` increments) into `out`.
    pub fn node_into(&self, k: usize, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.noise_dim);
        out.fill(0.0);
        for step in 0..k {
            for (o, &dw) in out.iter_mut().zip(self.increment(step)) {
                *o += dw;
            }
        }
    }

    /// `W_T` into `out`.
    pub fn terminal_into(&self, out: &mut [f64]) {
        self.node_into(self.steps(), out);
    }
}

/// Increments for a batch of paths, path-major:
/// `data[p * steps * d + k * d + j]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PathBundle {
    data: Vec<f64>,
    n_paths: usize,
    steps: usize,
    noise_dim: usize,
}

impl PathBundle {
    pub fn from_increments(
        n_paths: usize,
        steps: usize,
        noise_dim: usize,
        data: Vec<f64>,
    ) -> Result<Self> {
        if data.len() != n_paths * steps * noise_dim {
            return Err(Error::Shape(format!(
                "increment buffer has {} values, expected {n_paths} x {steps} x {noise_dim}",
                data.len()
            )));
        }
        Ok(Self {
            data,
            n_paths,
            steps,
            noise_dim,
        })
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn noise_dim(&self) -> usize {
        self.noise_dim
    }

    pub fn path(&self, p: usize) -> &[f64] {
        let stride = self.steps * self.noise_dim;
        &self.data[p * stride..(p + 1) * stride]
    }

    pub fn view(&self, p: usize) -> PathView<'_> {
        PathView::new(self.path(p), self.noise_dim)
    }

    pub fn increment(&self, p: usize, k: usize) -> &[f64] {
        let base = (p * self.steps + k) * self.noise_dim;
        &self.data[base..base + self.noise_dim]
    }

    /// CSV with header `path,step,dW_0,...,dW_{d-1}`.
    pub fn write_csv<W: IoWrite>(&self, out: &mut W) -> std::io::Result<()> {
        let cols: Vec<String> = (0..self.noise_dim).map(|j| format!("dW_{j}")).collect();
        writeln!(out, "path,step,{}", cols.join(","))?;
        for p in 0..self.n_paths {
            for k in 0..self.steps {
                let cells: Vec<String> = self
                    .increment(p, k)
                    .iter()
                    .map(|v| format!("{v}"))
                    .collect();
                writeln!(out, "{p},{k},{}", cells.join(","))?;
            }
        }
        Ok(())
    }
}

/// Draws `n_paths` Brownian paths on `time` with `noise_dim` components.
///
/// Increment `(p, k, j)` is `sqrt(dt) * N(p*steps*d + k*d + j)` where `N` is
/// the seeded counter-based normal stream; the result is identical across
/// worker counts and machine runs.
pub fn generate_paths(
    seed: u64,
    n_paths: usize,
    time: &TimeGrid,
    noise_dim: usize,
) -> Result<PathBundle> {
    if n_paths == 0 {
        return Err(Error::Invalid("path count must be >= 1".into()));
    }
    if noise_dim == 0 {
        return Err(Error::Invalid("noise dimension must be >= 1".into()));
    }
    let steps = time.steps();
    let total = n_paths
        .checked_mul(steps)
        .and_then(|v| v.checked_mul(noise_dim))
        .filter(|&v| v <= MAX_BUNDLE_LEN)
        .ok_or_else(|| {
            Error::Resource(format!(
                "path bundle of {n_paths} x {steps} x {noise_dim} exceeds the \
                 {MAX_BUNDLE_LEN}-value limit"
            ))
        })?;
    let sqrt_dt = time.dt().sqrt();
    let stride = steps * noise_dim;
    let mut data = vec![0.0; total];
    for_path_chunks_mut(&mut data, stride, |first_path, block| {
        let base = first_path * stride;
        for (offset, slot) in block.iter_mut().enumerate() {
            *slot = sqrt_dt * rng::draw_normal(seed, (base + offset) as u64);
        }
    });
    PathBundle::from_increments(n_paths, steps, noise_dim, data)
}
