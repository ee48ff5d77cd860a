//! Monte Carlo engine.
//!
//! Paths of `(Y, H, P~)` are built on a uniform time mesh: Euler–Maruyama
//! for the factor with reflection at the domain edges, and defaults from
//! integrated-intensity crossings of unit exponential clocks, redrawn for the
//! survivors after every default. Wealth and the dual density ride on the
//! same increments. Every path owns a ChaCha stream keyed by
//! `(seed, path index)`, so results do not depend on the thread schedule.
//!
//! Large runs never materialize trajectories: each path reduces to a small
//! summary and summaries are combined in path order. [`PathBundle`] keeps full
//! trajectories and is meant for small runs and inspection.

mod checks;
mod market;
mod policy;
mod wealth;

pub use checks::{
    check_g_martingale, compare_policies, compensator_check, duality_gap, fk_tables,
    market_summary, mc_feynman_kac, mc_feynman_kac_with, survival_check, DualityReport,
    FkTables, MarketSummary,
};
pub use market::{simulate_market, DefaultEvent, Increments, MarketState, MarketStepper, PathBundle};
pub use policy::{ConstantPolicy, Controls, FeedbackPolicy, ScaledPolicy, SolutionPolicy, ZeroConsumption};
pub use wealth::{density_path, simulate_wealth, WealthState};

use crate::exec::Execution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::time::Duration;

/// Path count, mesh and seed shared by all Monte Carlo runs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SimConfig {
    pub n_paths: usize,
    pub n_steps: usize,
    pub seed: u64,
    pub exec: Execution,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n_paths: 100_000,
            n_steps: 400,
            seed: 42,
            exec: Execution::default(),
        }
    }
}

impl SimConfig {
    pub fn new(n_paths: usize, n_steps: usize, seed: u64) -> Self {
        Self {
            n_paths,
            n_steps,
            seed,
            exec: Execution::default(),
        }
    }

    pub fn with_exec(mut self, exec: Execution) -> Self {
        self.exec = exec;
        self
    }

    pub(crate) fn check(&self) -> crate::Result<()> {
        if self.n_paths < 2 || self.n_steps < 1 {
            return Err(crate::Error::InvalidSpec(format!(
                "Monte Carlo needs at least 2 paths and 1 step, got {} and {}",
                self.n_paths, self.n_steps
            )));
        }
        Ok(())
    }
}

/// Independent generator for path `index`.
pub fn path_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Running mean and variance (Welford), merged in a fixed order.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Moments {
    pub n: usize,
    pub mean: f64,
    m2: f64,
}

impl FromIterator<f64> for Moments {
    fn from_iter<I: IntoIterator<Item = f64>>(xs: I) -> Self {
        let mut m = Self::default();
        for x in xs {
            m.push(x);
        }
        m
    }
}

impl Moments {
    pub fn push(&mut self, x: f64) {
        self.n += 1;
        let d = x - self.mean;
        self.mean += d / self.n as f64;
        self.m2 += d * (x - self.mean);
    }

    pub fn variance(&self) -> f64 {
        if self.n < 2 {
            0.0
        } else {
            self.m2 / (self.n - 1) as f64
        }
    }

    /// Standard error of the mean.
    pub fn se(&self) -> f64 {
        if self.n == 0 {
            f64::NAN
        } else {
            (self.variance() / self.n as f64).sqrt()
        }
    }
}

/// Pearson correlation of two equally long samples.
pub fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let ma = Moments::from_iter(a.iter().copied());
    let mb = Moments::from_iter(b.iter().copied());
    let cov: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - ma.mean) * (y - mb.mean))
        .sum::<f64>()
        / (a.len() as f64 - 1.0);
    cov / (ma.variance() * mb.variance()).sqrt()
}

/// Statistical tolerance used throughout: three standard errors.
pub const SE_MULTIPLE: f64 = 3.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sided {
    /// `|estimate - target| <= 3 SE`.
    Two,
    /// `estimate - target > 3 SE`.
    Above,
    /// `target - estimate > 3 SE`.
    Below,
}

/// Outcome of one statistical test.
#[derive(Clone, Debug, PartialEq)]
pub struct McReport {
    pub name: String,
    pub estimate: f64,
    pub se: f64,
    pub n_paths: usize,
    pub elapsed: Duration,
    pub target: f64,
    /// Tolerance in standard errors.
    pub tol_se: f64,
    pub sided: Sided,
    pub pass: bool,
    pub note: String,
}

impl McReport {
    pub fn new(name: impl Into<String>, m: &Moments, target: f64, sided: Sided, elapsed: Duration) -> Self {
        Self::from_parts(name, m.mean, m.se(), m.n, target, sided, elapsed)
    }

    pub fn from_parts(
        name: impl Into<String>,
        estimate: f64,
        se: f64,
        n_paths: usize,
        target: f64,
        sided: Sided,
        elapsed: Duration,
    ) -> Self {
        // Rounding allowance so zero-variance estimates can still pass.
        let slack = 1e-12 * target.abs().max(1.0);
        let band = SE_MULTIPLE * se;
        let pass = match sided {
            Sided::Two => (estimate - target).abs() <= band + slack,
            Sided::Above => estimate - target > band,
            Sided::Below => target - estimate > band,
        };
        Self {
            name: name.into(),
            estimate,
            se,
            n_paths,
            elapsed,
            target,
            tol_se: SE_MULTIPLE,
            sided,
            pass: pass && estimate.is_finite(),
            note: String::new(),
        }
    }

    pub fn with_note(mut self, note: impl Into<String>) -> Self {
        self.note = note.into();
        self
    }

    /// Distance to the target in standard errors.
    pub fn z_score(&self) -> f64 {
        (self.estimate - self.target) / self.se
    }
}

impl std::fmt::Display for McReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} {}: estimate {:.8e} target {:.8e} se {:.3e} ({} paths, {:.2?})",
            if self.pass { "PASS" } else { "FAIL" },
            self.name,
            self.estimate,
            self.target,
            self.se,
            self.n_paths,
            self.elapsed
        )?;
        if !self.note.is_empty() {
            write!(f, " [{}]", self.note)?;
        }
        Ok(())
    }
}

/// Reflects `y` into `[lo, hi]`, returning the number of reflections.
pub(crate) fn reflect(mut y: f64, lo: f64, hi: f64) -> (f64, usize) {
    let mut count = 0;
    while y < lo || y > hi {
        y = if y < lo { 2.0 * lo - y } else { 2.0 * hi - y };
        count += 1;
        if count > 64 {
            // Step far larger than the domain; land in the middle.
            return (0.5 * (lo + hi), count);
        }
    }
    (y, count)
}
