//! Ground truths independent of the grid solver.
//!
//! All-defaulted state with constant market coefficients, in `u = f^beta`:
//!
//! ```text
//! u' = phi1 u + K2^(1-q),   u(0) = f0^beta,   phi1 = q(q-1)/2 |xi|^2 - q r
//! ```
//!
//! One name with a constant factor (`beta = 1 - q`), maturity time `tau`,
//! `x = 1 + h` the alive-state jump control as a function of `tau`:
//!
//! ```text
//! u1' = phi1 u1 + K2^beta
//! u0' = phi0(x) u0 + K2^beta + lambda u1 x^q
//! phi0(x) = q(q-1)/2 (xi - lambda (x - 1)/sigma)^2 - q r - lambda (1 + q (x - 1))
//!         = a x^2 + b x + c
//! x = b~/a~ + ell / (a~ u0 x^beta),   ell = lambda u1
//! a~ = beta lambda^2 / sigma^2,   b~ = lambda (beta (xi sigma + lambda) - sigma^2) / sigma^2
//! ```
//!
//! The last line is the first-order condition `J sigma = Lambda` solved for
//! `x`; the fixed point is found by Picard iteration on a uniform grid.

use crate::dual::market_price_of_risk;
use crate::model::{
    CreditSpec, Curve, FactorSpec, MarketSpec, ModelSpec, PreferenceSpec,
};
use crate::{Error, Result};

/// Steps per horizon for the RK4 references.
pub const RK4_STEPS: usize = 4096;

/// Simpson panels for the closed-form quadrature.
pub const SIMPSON_PANELS: usize = 512;

/// Panels of the Picard grid on `[0, T]`.
pub const PICARD_PANELS: usize = 1024;

const PICARD_TOL: f64 = 1e-10;
const PICARD_MAX_ITER: usize = 20_000;

fn linear_flow(phi: f64, u0: f64, source: f64, tau: f64) -> f64 {
    let growth = if phi == 0.0 {
        tau
    } else {
        (phi * tau).exp_m1() / phi
    };
    (phi * tau).exp() * u0 + source * growth
}

/// `phi` of the all-defaulted state at factor value `y`.
pub fn all_defaulted_rate(y: f64, spec: &ModelSpec) -> Result<f64> {
    let q = spec.q();
    let xi = market_price_of_risk(y, spec)?;
    let xi_sq: f64 = xi.iter().map(|v| v * v).sum();
    Ok(0.5 * q * (q - 1.0) * xi_sq - q * spec.market.r)
}

/// `f(tau, y, all defaulted)` in closed form. Exact when the market
/// coefficients do not depend on `y`.
pub fn all_defaulted_closed_form(tau: f64, y: f64, spec: &ModelSpec) -> Result<f64> {
    let beta = spec.beta();
    let phi = all_defaulted_rate(y, spec)?;
    let k2 = spec.preferences.k2.powf(1.0 - spec.q());
    let u = linear_flow(phi, spec.f0().powf(beta), k2, tau);
    Ok(u.powf(1.0 / beta))
}

/// The same quantity by RK4 with step `T / 4096` (rounded to land on `tau`).
pub fn all_defaulted_rk4(tau: f64, y: f64, spec: &ModelSpec) -> Result<f64> {
    let beta = spec.beta();
    let phi = all_defaulted_rate(y, spec)?;
    let k2 = spec.preferences.k2.powf(1.0 - spec.q());
    let rhs = |u: f64| phi * u + k2;
    let steps = ((tau / spec.horizon() * RK4_STEPS as f64).ceil() as usize).max(1);
    let h = tau / steps as f64;
    let mut u = spec.f0().powf(beta);
    for _ in 0..steps {
        let k1 = rhs(u);
        let k2_ = rhs(u + 0.5 * h * k1);
        let k3 = rhs(u + 0.5 * h * k2_);
        let k4 = rhs(u + h * k3);
        u += h / 6.0 * (k1 + 2.0 * k2_ + 2.0 * k3 + k4);
    }
    Ok(u.powf(1.0 / beta))
}

/// One defaultable name, constant factor.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScalarModel {
    /// Intensity while alive.
    pub lambda0: f64,
    pub sigma: f64,
    /// Market price of risk `(mu - r) / sigma`.
    pub xi: f64,
    pub r: f64,
    /// Dual exponent; `0` is log utility.
    pub q: f64,
    pub k1: f64,
    pub k2: f64,
    pub horizon: f64,
}

impl ScalarModel {
    pub fn check(&self) -> Result<()> {
        if !(self.lambda0 >= 0.0 && self.sigma > 0.0 && self.q < 1.0) {
            return Err(Error::InvalidSpec(format!(
                "scalar model needs lambda0 >= 0, sigma > 0, q < 1: {self:?}"
            )));
        }
        if !(self.k1 > 0.0 && self.k2 > 0.0 && self.horizon > 0.0) {
            return Err(Error::InvalidSpec("K1, K2 and T must be positive".into()));
        }
        Ok(())
    }

    pub fn beta(&self) -> f64 {
        1.0 - self.q
    }

    fn k2_beta(&self) -> f64 {
        self.k2.powf(self.beta())
    }

    fn k1_beta(&self) -> f64 {
        self.k1.powf(self.beta())
    }

    /// Rate of the defaulted state.
    pub fn phi1(&self) -> f64 {
        let q = self.q;
        0.5 * q * (q - 1.0) * self.xi * self.xi - q * self.r
    }

    /// Rate of the alive state with jump control `x = 1 + h`.
    pub fn phi0(&self, x: f64) -> f64 {
        let q = self.q;
        let h = x - 1.0;
        let theta = self.xi - self.lambda0 * h / self.sigma;
        0.5 * q * (q - 1.0) * theta * theta - q * self.r - self.lambda0 * (1.0 + q * h)
    }

    /// `(a, b, c)` with `phi0(x) = a x^2 + b x + c`.
    pub fn quadratic_coefficients(&self) -> (f64, f64, f64) {
        let (q, l, s, xi, r) = (self.q, self.lambda0, self.sigma, self.xi, self.r);
        let a = q * (q - 1.0) * l * l / (2.0 * s * s);
        let b = q * (1.0 - q) * l * l / (s * s) + q * l * ((1.0 - q) * xi / s - 1.0);
        let c = q * l * ((q - 1.0) * xi / s + 1.0) - q * r - l
            + 0.5 * q * (q - 1.0) * xi * xi
            + q * (q - 1.0) * l * l / (2.0 * s * s);
        (a, b, c)
    }

    /// `(a~, b~)` of the fixed-point equation.
    pub fn fixed_point_coefficients(&self) -> (f64, f64) {
        let (l, s, xi, beta) = (self.lambda0, self.sigma, self.xi, self.beta());
        (
            beta * l * l / (s * s),
            l * (beta * (xi * s + l) - s * s) / (s * s),
        )
    }

    /// `u1(tau) = f~(tau, defaulted)`.
    pub fn defaulted(&self, tau: f64) -> f64 {
        linear_flow(self.phi1(), self.k1_beta(), self.k2_beta(), tau)
    }

    /// `ell(tau) = lambda u1(tau)`.
    pub fn ell(&self, tau: f64) -> f64 {
        self.lambda0 * self.defaulted(tau)
    }

    /// Equivalent [`ModelSpec`] with one name and a frozen factor; needs
    /// `q != 0`.
    pub fn to_spec(&self) -> Result<ModelSpec> {
        self.check()?;
        if self.q == 0.0 {
            return Err(Error::InvalidSpec(
                "q = 0 (log utility) has no power-utility model spec".into(),
            ));
        }
        let c = Curve::constant;
        let spec = ModelSpec {
            names: 1,
            factor: FactorSpec {
                dim: 1,
                drift: c(0.0),
                vol: vec![c(0.0)],
                rho: 0.0,
                domain: (-1.0, 1.0),
            },
            market: MarketSpec {
                r: self.r,
                mu: vec![self.r + self.sigma * self.xi],
                sigma: vec![vec![c(self.sigma)]],
            },
            credit: CreditSpec {
                intensity: vec![vec![c(self.lambda0)], vec![c(0.0)]],
            },
            preferences: PreferenceSpec {
                p: self.q / (self.q - 1.0),
                k1: self.k1,
                k2: self.k2,
                horizon: self.horizon,
            },
        };
        spec.check()?;
        Ok(spec)
    }
}

/// Alive-state `u0(tau)` on the nodes `s_k = k tau / (2N)`, `k = 0..=2N`,
/// from `x` sampled on the same nodes. Even nodes are Simpson panel ends and
/// odd nodes their midpoints.
fn alive_profile(m: &ScalarModel, x: &[f64], tau: f64) -> Vec<f64> {
    let nodes = x.len();
    debug_assert!(nodes >= 3 && nodes % 2 == 1);
    let d = tau / (nodes - 1) as f64;
    let s = |k: usize| k as f64 * d;
    let phi: Vec<f64> = x.iter().map(|&v| m.phi0(v)).collect();
    let q = m.q;
    let k2 = m.k2_beta();
    // Integral of phi up to every node.
    let mut big_phi = vec![0.0; nodes];
    let mut k = 0;
    while k + 2 < nodes {
        let (a, b, c) = (phi[k], phi[k + 1], phi[k + 2]);
        big_phi[k + 1] = big_phi[k] + d / 12.0 * (5.0 * a + 8.0 * b - c);
        big_phi[k + 2] = big_phi[k] + d / 3.0 * (a + 4.0 * b + c);
        k += 2;
    }
    let g: Vec<f64> = (0..nodes)
        .map(|k| (-big_phi[k]).exp() * (k2 + m.ell(s(k)) * x[k].powf(q)))
        .collect();
    let mut integral = vec![0.0; nodes];
    let mut k = 0;
    while k + 2 < nodes {
        let (a, b, c) = (g[k], g[k + 1], g[k + 2]);
        integral[k + 1] = integral[k] + d / 12.0 * (5.0 * a + 8.0 * b - c);
        integral[k + 2] = integral[k] + d / 3.0 * (a + 4.0 * b + c);
        k += 2;
    }
    (0..nodes)
        .map(|k| big_phi[k].exp() * (integral[k] + m.k1_beta()))
        .collect()
}

/// `u0(tau)` for a given control path `x(s) = 1 + h(s)`, by composite
/// Simpson with [`SIMPSON_PANELS`] panels.
pub fn bernoulli_alive_solution(tau: f64, x: &dyn Fn(f64) -> f64, m: &ScalarModel) -> f64 {
    if tau == 0.0 {
        return m.k1_beta();
    }
    let nodes = 2 * SIMPSON_PANELS + 1;
    let d = tau / (nodes - 1) as f64;
    let xs: Vec<f64> = (0..nodes).map(|k| x(k as f64 * d)).collect();
    *alive_profile(m, &xs, tau).last().expect("non-empty profile")
}

/// Joint RK4 for `(u1, u0)` with step `T / 4096`.
pub fn bernoulli_rk4(tau: f64, x: &dyn Fn(f64) -> f64, m: &ScalarModel) -> f64 {
    let steps = ((tau / m.horizon * RK4_STEPS as f64).ceil() as usize).max(1);
    let h = tau / steps as f64;
    let k2 = m.k2_beta();
    let rhs = |s: f64, u1: f64, u0: f64| {
        let xv = x(s);
        (
            m.phi1() * u1 + k2,
            m.phi0(xv) * u0 + k2 + m.lambda0 * u1 * xv.powf(m.q),
        )
    };
    let (mut u1, mut u0) = (m.k1_beta(), m.k1_beta());
    for i in 0..steps {
        let s = i as f64 * h;
        let (a1, a0) = rhs(s, u1, u0);
        let (b1, b0) = rhs(s + 0.5 * h, u1 + 0.5 * h * a1, u0 + 0.5 * h * a0);
        let (c1, c0) = rhs(s + 0.5 * h, u1 + 0.5 * h * b1, u0 + 0.5 * h * b0);
        let (d1, d0) = rhs(s + h, u1 + h * c1, u0 + h * c0);
        u1 += h / 6.0 * (a1 + 2.0 * b1 + 2.0 * c1 + d1);
        u0 += h / 6.0 * (a0 + 2.0 * b0 + 2.0 * c0 + d0);
    }
    u0
}

/// Fixed point `x(tau)` on a uniform grid over `[0, T]`.
#[derive(Clone, Debug)]
pub struct PicardSolution {
    pub model: ScalarModel,
    pub tau: Vec<f64>,
    pub x: Vec<f64>,
    /// Alive-state `u0` on the grid for the returned `x`.
    pub alive: Vec<f64>,
    pub iterations: usize,
    /// Largest ratio of successive sup-norm updates over the last iterations.
    pub contraction: f64,
    /// `sup_u G(u)` with `G = beta eps^(-beta-1) ell / (a~ u0)`, the
    /// Lipschitz bound of the map on `[eps, inf)`.
    pub lipschitz_bound: f64,
}

impl PicardSolution {
    /// Four-point Lagrange interpolation of `x`.
    pub fn x_at(&self, tau: f64) -> f64 {
        let n = self.x.len();
        let d = self.tau[1] - self.tau[0];
        let s = (tau / d).clamp(0.0, (n - 1) as f64);
        let j = (s.floor() as usize).clamp(1, n - 3) - 1;
        let t = s - j as f64;
        let w = [
            -(t - 1.0) * (t - 2.0) * (t - 3.0) / 6.0,
            t * (t - 2.0) * (t - 3.0) / 2.0,
            -t * (t - 1.0) * (t - 3.0) / 2.0,
            t * (t - 1.0) * (t - 2.0) / 6.0,
        ];
        (0..4).map(|i| w[i] * self.x[j + i]).sum()
    }

    pub fn h_at(&self, tau: f64) -> f64 {
        self.x_at(tau) - 1.0
    }

    /// `f(tau, alive)` from an independent Simpson evaluation.
    pub fn f_alive(&self, tau: f64) -> f64 {
        let m = self.model;
        bernoulli_alive_solution(tau, &|s| self.x_at(s), &m).powf(1.0 / m.beta())
    }

    pub fn f_defaulted(&self, tau: f64) -> f64 {
        self.model.defaulted(tau).powf(1.0 / self.model.beta())
    }

    /// Fraction in the name while alive: `1 - x^(q-1) u1 / u0`.
    pub fn fraction(&self, tau: f64) -> f64 {
        let m = self.model;
        let u0 = bernoulli_alive_solution(tau, &|s| self.x_at(s), &m);
        1.0 - self.x_at(tau).powf(m.q - 1.0) * m.defaulted(tau) / u0
    }

    /// `x - b~/a~ - ell / (a~ u0 x^beta)` with `u0` from Simpson.
    pub fn residual(&self, tau: f64) -> f64 {
        let m = self.model;
        let (at, bt) = m.fixed_point_coefficients();
        let x = self.x_at(tau);
        let u0 = bernoulli_alive_solution(tau, &|s| self.x_at(s), &m);
        x - bt / at - m.ell(tau) / (at * u0 * x.powf(m.beta()))
    }

    /// Max |residual| at `samples` equally spaced maturities in `(0, T]`.
    pub fn max_residual(&self, samples: usize) -> f64 {
        let t = self.model.horizon;
        (1..=samples)
            .map(|k| self.residual(t * k as f64 / samples as f64).abs())
            .fold(0.0, f64::max)
    }
}

/// Picard iteration `x <- F(x)` from `x = eps = b~/a~`.
pub fn picard_fixed_point(m: &ScalarModel) -> Result<PicardSolution> {
    picard_fixed_point_with(m, &|tau| m.ell(tau))
}

/// As [`picard_fixed_point`] with the feed-in `ell` replaced.
pub fn picard_fixed_point_with(m: &ScalarModel, ell: &dyn Fn(f64) -> f64) -> Result<PicardSolution> {
    m.check()?;
    if !(m.lambda0 > 0.0) {
        return Err(Error::FixedPoint("the fixed point needs lambda0 > 0".into()));
    }
    let (at, bt) = m.fixed_point_coefficients();
    if !(bt > 0.0) {
        return Err(Error::FixedPoint(format!(
            "b~ = {bt} is not positive; the map has no invariant interval"
        )));
    }
    let eps = bt / at;
    let beta = m.beta();
    let nodes = 2 * PICARD_PANELS + 1;
    let d = m.horizon / (nodes - 1) as f64;
    let tau: Vec<f64> = (0..nodes).map(|k| k as f64 * d).collect();
    let ells: Vec<f64> = tau.iter().map(|&t| ell(t)).collect();
    let mut x = vec![eps; nodes];
    let mut ratios: Vec<f64> = Vec::new();
    let mut last_change = f64::INFINITY;
    for it in 1..=PICARD_MAX_ITER {
        let u0 = alive_profile(m, &x, m.horizon);
        let next: Vec<f64> = (0..nodes)
            .map(|k| eps + ells[k] / (at * u0[k] * x[k].powf(beta)))
            .collect();
        let change = next
            .iter()
            .zip(&x)
            .fold(0.0f64, |a, (p, q)| a.max((p - q).abs()));
        if last_change.is_finite() && last_change > 0.0 {
            ratios.push(change / last_change);
        }
        x = next;
        if !change.is_finite() {
            return Err(Error::FixedPoint("Picard iteration diverged".into()));
        }
        if change < PICARD_TOL {
            let alive = alive_profile(m, &x, m.horizon);
            let tail = &ratios[ratios.len().saturating_sub(10)..];
            let contraction = tail.iter().copied().fold(0.0, f64::max);
            let lipschitz_bound = (0..nodes)
                .map(|k| beta * eps.powf(-beta - 1.0) * ells[k] / (at * alive[k]))
                .fold(0.0, f64::max);
            return Ok(PicardSolution {
                model: *m,
                tau,
                x,
                alive,
                iterations: it,
                contraction,
                lipschitz_bound,
            });
        }
        last_change = change;
    }
    let tail = &ratios[ratios.len().saturating_sub(10)..];
    Err(Error::FixedPoint(format!(
        "no convergence after {PICARD_MAX_ITER} iterations; observed contraction factor {:.3}",
        tail.iter().copied().fold(0.0, f64::max)
    )))
}

/// Classical Merton fraction `(mu - r) / ((1 - p) sigma^2)`; requires
/// `p < 1`, `p != 0`, `sigma > 0`.
pub fn merton_fraction(mu: f64, r: f64, sigma: f64, p: f64) -> f64 {
    (mu - r) / ((1.0 - p) * sigma * sigma)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::load_preset;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn remark_model() -> ScalarModel {
        ScalarModel {
            lambda0: 0.5,
            sigma: 0.8,
            xi: 0.25,
            r: 0.1,
            q: 0.0,
            k1: 1.0,
            k2: 1.0,
            horizon: 1.0,
        }
    }

    #[test]
    fn all_defaulted_benchmark_values() {
        let spec = load_preset("benchmark_s5").unwrap();
        assert_relative_eq!(all_defaulted_closed_form(0.0, 0.3, &spec).unwrap(), 1.0, epsilon = 1e-15);
        let f = all_defaulted_closed_form(1.0, 0.0, &spec).unwrap();
        let u = f.powf(5.0);
        // e^0.8 + (e^0.8 - 1) / 0.8 = 3.757467...
        assert_relative_eq!(u, 0.8f64.exp() + 0.8f64.exp_m1() / 0.8, epsilon = 1e-13);
        assert_relative_eq!(u, 3.7575, epsilon = 1e-4);
        assert_relative_eq!(f, 1.3031, epsilon = 1e-4);
        // Frozen from this implementation.
        assert_relative_eq!(f, 1.303_103_877_521_233, epsilon = 1e-13);
    }

    #[test]
    fn zero_rate_gives_linear_growth() {
        let mut spec = load_preset("benchmark_s5").unwrap();
        spec.market.r = 0.0;
        spec.market.mu = vec![0.0, 0.0];
        let beta = spec.beta();
        for tau in [0.0, 0.25, 1.0] {
            let f = all_defaulted_closed_form(tau, 0.0, &spec).unwrap();
            assert_relative_eq!(f.powf(beta), 1.0 + tau, epsilon = 1e-14);
        }
    }

    #[test]
    fn closed_form_matches_rk4_at_32_times() {
        for preset in ["benchmark_s5", "merton_nodefault"] {
            let spec = load_preset(preset).unwrap();
            for k in 1..=32 {
                let tau = k as f64 / 32.0;
                let a = all_defaulted_closed_form(tau, 0.0, &spec).unwrap();
                let b = all_defaulted_rk4(tau, 0.0, &spec).unwrap();
                assert!((a - b).abs() <= 1e-9 * a, "{preset} tau {tau}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn quadratic_form_matches_direct_rate() {
        for q in [-4.0, -1.0, 0.0, 0.5] {
            let m = ScalarModel { q, ..remark_model() };
            let (a, b, c) = m.quadratic_coefficients();
            for x in [0.2, 1.0, 1.7, 3.0] {
                assert_relative_eq!(a * x * x + b * x + c, m.phi0(x), epsilon = 1e-13);
            }
        }
    }

    #[test]
    fn fixed_point_coefficients_of_the_remark_model() {
        let (at, bt) = remark_model().fixed_point_coefficients();
        assert_relative_eq!(at, 0.390625, epsilon = 1e-15);
        assert_relative_eq!(bt, 0.046875, epsilon = 1e-15);
    }

    #[test]
    fn no_intensity_reduces_to_the_defaulted_state() {
        let m = ScalarModel {
            lambda0: 0.0,
            q: -1.0,
            ..remark_model()
        };
        for tau in [0.3, 1.0] {
            let u0 = bernoulli_alive_solution(tau, &|_| 1.3, &m);
            assert_relative_eq!(u0, m.defaulted(tau), epsilon = 1e-12);
        }
        assert_eq!(bernoulli_alive_solution(0.0, &|_| 2.0, &m), 1.0);
    }

    #[test]
    fn closed_form_matches_rk4_for_log_utility_and_zero_control() {
        let m = ScalarModel {
            xi: 0.0,
            ..remark_model()
        };
        for tau in [0.25, 0.5, 1.0] {
            let a = bernoulli_alive_solution(tau, &|_| 1.0, &m);
            let b = bernoulli_rk4(tau, &|_| 1.0, &m);
            assert!((a - b).abs() <= 1e-8, "{a} vs {b}");
        }
    }

    #[test]
    fn closed_form_matches_rk4_for_a_varying_control() {
        let m = ScalarModel {
            q: -1.0,
            ..remark_model()
        };
        let x = |s: f64| 1.2 + 0.3 * (3.0 * s).sin();
        let a = bernoulli_alive_solution(1.0, &x, &m);
        let b = bernoulli_rk4(1.0, &x, &m);
        assert!((a - b).abs() <= 1e-9 * a, "{a} vs {b}");
    }

    #[test]
    fn picard_without_feed_in_is_constant() {
        let m = remark_model();
        let sol = picard_fixed_point_with(&m, &|_| 0.0).unwrap();
        let (at, bt) = m.fixed_point_coefficients();
        assert!(sol.x.iter().all(|&x| (x - bt / at).abs() < 1e-15));
        assert_eq!(sol.iterations, 1);
    }

    #[test]
    fn first_picard_step_at_zero_maturity() {
        let m = remark_model();
        let (at, bt) = m.fixed_point_coefficients();
        let eps = bt / at;
        let u0 = alive_profile(&m, &vec![eps; 2 * PICARD_PANELS + 1], m.horizon);
        let step0 = eps + m.ell(0.0) / (at * u0[0] * eps.powf(m.beta()));
        assert_relative_eq!(step0, eps + m.ell(0.0) * eps.powf(-1.0) / at, epsilon = 1e-14);
    }

    #[test]
    fn picard_fixed_point_of_the_remark_model() {
        let sol = picard_fixed_point(&remark_model()).unwrap();
        assert!(sol.max_residual(64) < 1e-8, "{}", sol.max_residual(64));
        assert!(sol.contraction < 1.0);
        // The bound from the remark is far from tight for these parameters.
        assert!(sol.lipschitz_bound > 1.0);
        assert!(sol.x.iter().all(|&x| x > 0.12));
    }

    #[test]
    fn picard_rejects_nonpositive_b_tilde() {
        let m = ScalarModel {
            xi: -1.0,
            ..remark_model()
        };
        assert!(matches!(picard_fixed_point(&m), Err(Error::FixedPoint(_))));
    }

    #[test]
    fn picard_with_power_utility() {
        let m = ScalarModel {
            q: -1.0,
            ..remark_model()
        };
        let sol = picard_fixed_point(&m).unwrap();
        assert!(sol.max_residual(64) < 1e-8, "{}", sol.max_residual(64));
    }

    #[test]
    fn spec_of_a_scalar_model() {
        let m = ScalarModel {
            q: -1.0,
            ..remark_model()
        };
        let spec = m.to_spec().unwrap();
        assert_relative_eq!(spec.q(), -1.0, epsilon = 1e-15);
        assert_relative_eq!(spec.beta(), 2.0, epsilon = 1e-15);
        assert_relative_eq!(market_price_of_risk(0.0, &spec).unwrap()[0], 0.25, epsilon = 1e-15);
        assert!(remark_model().to_spec().is_err());
    }

    #[test]
    fn merton_examples() {
        assert_relative_eq!(merton_fraction(0.25, 0.2, 0.2, 0.5), 2.5, epsilon = 1e-14);
        assert_eq!(merton_fraction(0.2, 0.2, 0.3, 0.5), 0.0);
    }

    proptest! {
        #[test]
        fn merton_fraction_shrinks_with_risk_aversion(
            excess in 0.001f64..0.5,
            sigma in 0.05f64..1.0,
            p1 in -50.0f64..0.99,
            dp in 0.01f64..10.0,
        ) {
            let a = merton_fraction(0.1 + excess, 0.1, sigma, p1 - dp);
            let b = merton_fraction(0.1 + excess, 0.1, sigma, p1);
            prop_assert!(a < b && a > 0.0);
        }
    }
}
