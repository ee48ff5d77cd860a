//! Pointwise coefficients of the dual problem.
//!
//! ```text
//! q     = p / (p - 1)                 beta = (1 - q) / (1 - q rho^2)
//! xi    = sigma^{-1} (mu - r 1)
//! theta = xi - sigma^{-1} diag((1 - z) lambda) h
//! psi   = q(q-1)/2 (|theta|^2 + |a|^2) - q r
//!         + sum_i (1 - z_i) [(1 + h_i)^q - q (1 + h_i) + q - 1] lambda_i
//! phi   = q(q-1)/2 |theta|^2 - q r + sum_i (1 - z_i) (-1 - q h_i) lambda_i
//! nu    = mu0 - q rho sigma0 . theta
//! ```
//!
//! `theta` is never an input of its own: it is always derived from `h`.
//! Jump controls of defaulted names are stored as 0 and excluded from sums.

use crate::lattice::DefaultState;
use crate::model::{ModelSpec, JUMP_EPS, SIGMA_CONDITION_CAP};
use crate::{Error, Result};
use nalgebra::{DMatrix, DVector};

pub fn dual_exponent(p: f64) -> f64 {
    p / (p - 1.0)
}

pub fn transform_exponent(q: f64, rho: f64) -> f64 {
    (1.0 - q) / (1.0 - q * rho * rho)
}

/// `(1 + h)^e` on the real branch; errors when `1 + h <= eps`.
pub fn jump_power(h: f64, e: f64) -> Result<f64> {
    let base = 1.0 + h;
    if !(base > JUMP_EPS) {
        return Err(Error::Domain(format!("1 + h = {base} is not above {JUMP_EPS}")));
    }
    Ok(base.powf(e))
}

/// Factor- and market-level coefficients at one factor value.
#[derive(Clone, Debug)]
pub struct NodeCoefficients {
    pub y: f64,
    pub sigma: DMatrix<f64>,
    /// `M = sigma^{-1}`.
    pub sigma_inv: DMatrix<f64>,
    /// `M^T M = (sigma sigma^T)^{-1}`.
    pub gram_inv: DMatrix<f64>,
    /// Off-diagonal entries of sigma are exactly zero.
    pub diagonal: bool,
    pub xi: Vec<f64>,
    /// Row vector `xi^T M`.
    pub xi_m: Vec<f64>,
    pub mu0: f64,
    pub sigma0: Vec<f64>,
    /// Row vector `sigma0 M`.
    pub sigma0_m: Vec<f64>,
    /// `sigma0 sigma0^T`.
    pub var0: f64,
}

impl NodeCoefficients {
    pub fn new(spec: &ModelSpec, y: f64) -> Result<Self> {
        let n = spec.n();
        let sigma = spec.sigma_at(y);
        let sv = sigma.clone().singular_values();
        if !(sv.min() > 0.0 && sv.max() / sv.min() < SIGMA_CONDITION_CAP) {
            return Err(Error::SingularVolatility { y });
        }
        let sigma_inv = sigma
            .clone()
            .try_inverse()
            .ok_or(Error::SingularVolatility { y })?;
        let gram_inv = sigma_inv.transpose() * &sigma_inv;
        let diagonal = (0..n).all(|i| (0..n).all(|j| i == j || sigma[(i, j)] == 0.0));
        let excess = DVector::from_iterator(n, spec.market.mu.iter().map(|m| m - spec.market.r));
        let xi_v = &sigma_inv * excess;
        let xi: Vec<f64> = xi_v.iter().copied().collect();
        let xi_m: Vec<f64> = (xi_v.transpose() * &sigma_inv).iter().copied().collect();
        let sigma0 = spec.sigma0(y);
        let s0 = DVector::from_column_slice(&sigma0);
        let sigma0_m: Vec<f64> = (s0.transpose() * &sigma_inv).iter().copied().collect();
        let var0 = sigma0.iter().map(|v| v * v).sum();
        Ok(Self {
            y,
            sigma,
            sigma_inv,
            gram_inv,
            diagonal,
            xi,
            xi_m,
            mu0: spec.mu0(y),
            sigma0,
            sigma0_m,
            var0,
        })
    }

    pub fn n(&self) -> usize {
        self.xi.len()
    }

    /// `theta = xi - M diag(lambda) h` with `lambda` already masked by
    /// survival.
    pub fn theta(&self, lambda: &[f64], h: &[f64]) -> Vec<f64> {
        let n = self.n();
        (0..n)
            .map(|j| {
                self.xi[j]
                    - (0..n)
                        .map(|k| self.sigma_inv[(j, k)] * lambda[k] * h[k])
                        .sum::<f64>()
            })
            .collect()
    }
}

/// Intensities masked by survival, `(1 - z_i) lambda_i(y, z)`.
pub fn masked_intensity(spec: &ModelSpec, y: f64, z: DefaultState) -> Vec<f64> {
    (0..spec.n())
        .map(|i| if z.is_alive(i) { spec.lambda(i, y, z) } else { 0.0 })
        .collect()
}

pub fn market_price_of_risk(y: f64, spec: &ModelSpec) -> Result<Vec<f64>> {
    Ok(NodeCoefficients::new(spec, y)?.xi)
}

pub fn theta_from_h(h: &[f64], y: f64, z: DefaultState, spec: &ModelSpec) -> Result<Vec<f64>> {
    check_jump_controls(h, z)?;
    let node = NodeCoefficients::new(spec, y)?;
    Ok(node.theta(&masked_intensity(spec, y, z), h))
}

fn check_jump_controls(h: &[f64], z: DefaultState) -> Result<()> {
    for i in z.alive_names() {
        jump_power(h[i], 1.0)?;
    }
    Ok(())
}

pub fn psi(
    a: &[f64],
    h: &[f64],
    theta: &[f64],
    y: f64,
    z: DefaultState,
    spec: &ModelSpec,
) -> Result<f64> {
    let q = spec.q();
    let sq = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>();
    let mut out = 0.5 * q * (q - 1.0) * (sq(theta) + sq(a)) - q * spec.market.r;
    for i in z.alive_names() {
        let x = 1.0 + h[i];
        out += (jump_power(h[i], q)? - q * x + q - 1.0) * spec.lambda(i, y, z);
    }
    Ok(out)
}

/// Reaction rate `phi` and factor drift `nu` from precomputed node data.
pub fn phi_nu_at(
    q: f64,
    r: f64,
    rho: f64,
    node: &NodeCoefficients,
    lambda: &[f64],
    hhat: &[f64],
    theta: &[f64],
) -> (f64, f64) {
    let theta_sq: f64 = theta.iter().map(|t| t * t).sum();
    let jumps: f64 = lambda
        .iter()
        .zip(hhat)
        .map(|(l, h)| (-1.0 - q * h) * l)
        .sum();
    let phi = 0.5 * q * (q - 1.0) * theta_sq - q * r + jumps;
    let s0_theta: f64 = node.sigma0.iter().zip(theta).map(|(s, t)| s * t).sum();
    (phi, node.mu0 - q * rho * s0_theta)
}

pub fn phi_and_nu(
    hhat: &[f64],
    theta: &[f64],
    y: f64,
    z: DefaultState,
    spec: &ModelSpec,
) -> Result<(f64, f64)> {
    let node = NodeCoefficients::new(spec, y)?;
    let lambda = masked_intensity(spec, y, z);
    Ok(phi_nu_at(
        spec.q(),
        spec.market.r,
        spec.factor.rho,
        &node,
        &lambda,
        hhat,
        theta,
    ))
}

/// Sup norms of the controls and intensities for one state.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ControlNorms {
    /// `sum_j sup |theta_j|^2`.
    pub theta_sq: f64,
    /// `sup lambda_i` per name (zero for defaulted names).
    pub lambda_sup: Vec<f64>,
    /// `sup |hhat_i|` per name.
    pub hhat_sup: Vec<f64>,
    /// `sup (1 + hhat_i)^q` per name.
    pub jump_power_sup: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PhiBounds {
    pub lower: f64,
    pub upper: f64,
}

/// State-dependent bounds on `phi` given sup norms of the controls.
pub fn phi_bounds(z: DefaultState, spec: &ModelSpec, norms: &ControlNorms) -> PhiBounds {
    let q = spec.q();
    let qr = q * spec.market.r;
    let quad = 0.5 * q * (q - 1.0) * norms.theta_sq;
    let alive = || z.alive_names();
    if q < 0.0 {
        let upper = quad - qr
            + alive()
                .map(|i| (-q * norms.hhat_sup[i] - 1.0).max(0.0) * norms.lambda_sup[i])
                .sum::<f64>();
        let lower =
            (-qr).min(0.0) - (1.0 - q) * alive().map(|i| norms.lambda_sup[i]).sum::<f64>();
        PhiBounds { lower, upper }
    } else {
        let lower = quad
            - qr.max(0.0)
            - alive()
                .map(|i| (1.0 + q * norms.hhat_sup[i]) * norms.lambda_sup[i])
                .sum::<f64>();
        PhiBounds {
            lower,
            upper: (-qr).max(0.0),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UtilityKind {
    /// Terminal wealth, weight `K1`.
    Terminal,
    /// Consumption, weight `K2`.
    Consumption,
}

/// Convex conjugate and its minimiser for `U(x) = K x^p / p`:
/// `I(y) = K^(1-q) y^(q-1)`, `U~(y) = -(1/q) K^(1-q) y^q`.
pub fn legendre(kind: UtilityKind, y_dual: f64, spec: &ModelSpec) -> Result<(f64, f64)> {
    let k = match kind {
        UtilityKind::Terminal => spec.preferences.k1,
        UtilityKind::Consumption => spec.preferences.k2,
    };
    legendre_with(k, spec.q(), y_dual)
}

pub fn legendre_with(k: f64, q: f64, y_dual: f64) -> Result<(f64, f64)> {
    if !(y_dual > 0.0) {
        return Err(Error::Domain(format!("dual argument {y_dual} must be positive")));
    }
    let kq = k.powf(1.0 - q);
    Ok((-kq * y_dual.powf(q) / q, kq * y_dual.powf(q - 1.0)))
}

/// Optimal Lagrange scaling `kappa = (F / x)^(1 / (1 - q))`.
pub fn kappa_hat(x: f64, dual_value: f64, q: f64) -> Result<f64> {
    if !(x > 0.0 && dual_value > 0.0) {
        return Err(Error::Domain(format!(
            "wealth {x} and dual value {dual_value} must be positive"
        )));
    }
    Ok((dual_value / x).powf(1.0 / (1.0 - q)))
}
