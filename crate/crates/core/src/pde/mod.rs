//! Recursive semi-linear PDE system on a 1-D factor grid.
//!
//! In time to horizon `tau`, for every default state `z`:
//!
//! ```text
//! f_tau = 1/2 sigma0 sigma0^T f_yy + nu f_y + beta^-1 phi f + Phi(f)
//! Phi(v) = beta^-1 v^(1-beta) [K2^(1-q) + sum_i f(z^i)^beta (1 - z_i)(1 + h_i)^q lambda_i]
//! f(0, y, z) = K1^(1/(1 - q rho^2)),   homogeneous Neumann at y_lo, y_hi
//! ```
//!
//! With `h` frozen, the reaction and source part is linear in `u = f^beta`:
//! `u' = phi u + K2^(1-q) + sum_i w_i u(z^i)`, `w_i = (1 + h_i)^q lambda_i`.
//! Each step is a Strang splitting: half a step of that lattice-coupled
//! linear system by RK4, a Crank–Nicolson step of diffusion and drift, and
//! another half reaction step. All states advance together; within a step
//! states are processed by descending number of defaults so every parent
//! sees its children's RK4 stage values. `h` at the new time level is
//! refreshed by a short fixed-point loop.
//!
//! The truncation clamp enters the `u`-form as the factor
//! `(clamp(f) / f)^(1 - beta)` on the source.

mod bounds;
mod solver;

pub use bounds::{truncation_bounds, TruncationBounds};
pub use solver::{gradient, nonlinear_source, rebuild_with, solve_with, step_slice, SliceInputs};

use crate::lattice::DefaultState;
use crate::model::ModelSpec;
use crate::strategy::PolicyField;
use crate::{Error, Result};
use serde::{Deserialize, Serialize};

/// Uniform space-time grid and solver switches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    pub y_lo: f64,
    pub y_hi: f64,
    pub n_y: usize,
    pub n_t: usize,
    pub clamp_enabled: bool,
    /// Maximum fixed-point sweeps for the jump control per step.
    pub inner_sweeps: usize,
    /// Relative change that ends the sweeps.
    pub inner_tol: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self::new(-1.0, 1.0, 401, 400)
    }
}

impl GridSpec {
    pub fn new(y_lo: f64, y_hi: f64, n_y: usize, n_t: usize) -> Self {
        Self {
            y_lo,
            y_hi,
            n_y,
            n_t,
            clamp_enabled: true,
            inner_sweeps: 5,
            inner_tol: 1e-8,
        }
    }

    pub fn check(&self) -> Result<()> {
        if self.n_y < 3 || self.n_y.is_multiple_of(2) {
            return Err(Error::InvalidGrid(format!("n_y = {} must be odd and at least 3", self.n_y)));
        }
        if self.n_t < 1 {
            return Err(Error::InvalidGrid("n_t must be at least 1".into()));
        }
        if !(self.y_lo < self.y_hi) || !self.y_lo.is_finite() || !self.y_hi.is_finite() {
            return Err(Error::InvalidGrid(format!(
                "need finite y_lo < y_hi, got [{}, {}]",
                self.y_lo, self.y_hi
            )));
        }
        if self.inner_sweeps < 1 {
            return Err(Error::InvalidGrid("inner_sweeps must be at least 1".into()));
        }
        Ok(())
    }

    pub fn dy(&self) -> f64 {
        (self.y_hi - self.y_lo) / (self.n_y - 1) as f64
    }

    pub fn y(&self, j: usize) -> f64 {
        if j == self.n_y - 1 {
            self.y_hi
        } else {
            self.y_lo + j as f64 * self.dy()
        }
    }

    pub fn y_nodes(&self) -> Vec<f64> {
        (0..self.n_y).map(|j| self.y(j)).collect()
    }

    pub fn dt(&self, horizon: f64) -> f64 {
        horizon / self.n_t as f64
    }

    pub fn tau(&self, k: usize, horizon: f64) -> f64 {
        if k == self.n_t {
            horizon
        } else {
            k as f64 * self.dt(horizon)
        }
    }

    /// Cell and weight for linear interpolation in `y`, clamped to the grid.
    pub fn locate_y(&self, y: f64) -> (usize, f64) {
        locate(y, self.y_lo, self.dy(), self.n_y)
    }

    pub fn locate_tau(&self, tau: f64, horizon: f64) -> (usize, f64) {
        locate(tau, 0.0, self.dt(horizon), self.n_t + 1)
    }
}

fn locate(x: f64, lo: f64, h: f64, n: usize) -> (usize, f64) {
    let s = ((x - lo) / h).clamp(0.0, (n - 1) as f64);
    let j = (s.floor() as usize).min(n - 2);
    (j, s - j as f64)
}

/// `f` and its `y`-gradient for one state on the grid, indexed `[k][j]`
/// with `k` the time-to-horizon level.
#[derive(Clone, Debug, PartialEq)]
pub struct SolutionField {
    pub state: DefaultState,
    pub n_t: usize,
    pub n_y: usize,
    pub f: Vec<f64>,
    pub df: Vec<f64>,
}

impl SolutionField {
    pub fn at(&self, k: usize, j: usize) -> f64 {
        self.f[k * self.n_y + j]
    }

    pub fn df_at(&self, k: usize, j: usize) -> f64 {
        self.df[k * self.n_y + j]
    }

    pub fn slice(&self, k: usize) -> &[f64] {
        &self.f[k * self.n_y..(k + 1) * self.n_y]
    }

    /// Rebuilds the gradient by central differences.
    pub fn from_values(state: DefaultState, grid: &GridSpec, f: Vec<f64>) -> Self {
        let mut df = Vec::with_capacity(f.len());
        for k in 0..=grid.n_t {
            df.extend(gradient(&f[k * grid.n_y..(k + 1) * grid.n_y], grid.dy()));
        }
        Self {
            state,
            n_t: grid.n_t,
            n_y: grid.n_y,
            f,
            df,
        }
    }
}

/// Per-state solver diagnostics.
#[derive(Clone, Debug, PartialEq)]
pub struct StateReport {
    pub state: DefaultState,
    pub max_identity_residual: f64,
    pub max_consistency_residual: f64,
    pub max_newton_iterations: usize,
    pub max_sweeps: usize,
    pub capped_steps: usize,
    pub clamp_hits: usize,
    /// `min (f - K_under)` over nodes.
    pub lower_margin: f64,
    /// `min (K_bar(tau) - f)` over nodes.
    pub upper_margin: f64,
    /// Max |discrete residual| of the PDE at step midpoints, relative to max f.
    pub discrete_residual: f64,
    pub min_f: f64,
    pub max_f: f64,
    pub max_abs_df: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolveReport {
    pub states: Vec<StateReport>,
    /// A second, clamped pass was needed.
    pub clamped_pass: bool,
}

/// Full solution of the lattice system.
#[derive(Clone, Debug)]
pub struct SystemSolution {
    pub spec: ModelSpec,
    pub grid: GridSpec,
    pub fields: Vec<SolutionField>,
    pub policies: Vec<PolicyField>,
    pub bounds: Vec<TruncationBounds>,
    pub report: SolveReport,
}

pub fn solve_recursive_system(spec: &ModelSpec, grid: &GridSpec) -> Result<SystemSolution> {
    solve_with(spec, grid, crate::Execution::default())
}

impl SystemSolution {
    pub fn n(&self) -> usize {
        self.spec.n()
    }

    pub fn field(&self, z: DefaultState) -> Option<&SolutionField> {
        self.fields.get(z.index())
    }

    pub fn policy(&self, z: DefaultState) -> &PolicyField {
        &self.policies[z.index()]
    }

    pub fn states(&self) -> Vec<DefaultState> {
        self.fields.iter().map(|f| f.state).collect()
    }

    fn interp(&self, values: &[f64], tau: f64, y: f64) -> f64 {
        let g = &self.grid;
        let (k, wt) = g.locate_tau(tau, self.spec.horizon());
        let (j, wy) = g.locate_y(y);
        let at = |k: usize, j: usize| values[k * g.n_y + j];
        let row = |k: usize| at(k, j) * (1.0 - wy) + at(k, j + 1) * wy;
        if wt == 0.0 {
            row(k)
        } else {
            row(k) * (1.0 - wt) + row(k + 1) * wt
        }
    }

    /// `f(tau, y, z)` by bilinear interpolation.
    pub fn f(&self, z: DefaultState, tau: f64, y: f64) -> f64 {
        self.interp(&self.fields[z.index()].f, tau, y)
    }

    pub fn f_and_df(&self, z: DefaultState, tau: f64, y: f64) -> (f64, f64) {
        let fl = &self.fields[z.index()];
        (self.interp(&fl.f, tau, y), self.interp(&fl.df, tau, y))
    }

    /// `g = f^beta`.
    pub fn g(&self, z: DefaultState, tau: f64, y: f64) -> f64 {
        self.f(z, tau, y).powf(self.spec.beta())
    }

    /// Stored jump controls interpolated at calendar time `t`.
    pub fn policy_hhat(&self, t: f64, y: f64, z: DefaultState) -> Vec<f64> {
        let tau = self.spec.horizon() - t;
        let p = self.policy(z);
        (0..self.n())
            .map(|i| {
                let vals: Vec<f64> = (0..(p.n_t + 1) * p.n_y).map(|kj| p.hhat[kj * p.n + i]).collect();
                self.interp(&vals, tau, y)
            })
            .collect()
    }

    /// Nodes violating the truncation bounds by more than `slack`.
    pub fn bound_violations(&self, slack: f64) -> Vec<(DefaultState, usize, usize, f64)> {
        let mut out = Vec::new();
        let h = self.spec.horizon();
        for (field, b) in self.fields.iter().zip(&self.bounds) {
            for k in 0..=self.grid.n_t {
                let kb = b.k_bar(self.grid.tau(k, h));
                for j in 0..self.grid.n_y {
                    let v = field.at(k, j);
                    if v < b.k_under - slack || v > kb + slack {
                        out.push((field.state, k, j, v));
                    }
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_checks() {
        assert!(GridSpec::new(-1.0, 1.0, 4, 10).check().is_err());
        assert!(GridSpec::new(-1.0, 1.0, 1, 10).check().is_err());
        assert!(GridSpec::new(1.0, -1.0, 5, 10).check().is_err());
        assert!(GridSpec::new(-1.0, 1.0, 5, 0).check().is_err());
        assert!(GridSpec::default().check().is_ok());
    }

    #[test]
    fn grid_nodes_hit_endpoints() {
        let g = GridSpec::new(-1.0, 1.0, 401, 400);
        assert_eq!(g.y(0), -1.0);
        assert_eq!(g.y(400), 1.0);
        assert_eq!(g.y(200), 0.0);
        assert_eq!(g.tau(400, 1.0), 1.0);
        assert_eq!(g.locate_y(1.0), (399, 1.0));
        assert_eq!(g.locate_y(-5.0), (0, 0.0));
        let (j, w) = g.locate_y(0.0);
        assert_eq!((j, w), (200, 0.0));
    }
}
