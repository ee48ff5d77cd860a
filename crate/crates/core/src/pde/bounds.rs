//! A priori bounds on `f` for one default state.
//!
//! With `f0 = K1^(1/(1 - q rho^2))` and `m_lo <= phi <= m_hi`:
//!
//! ```text
//! K_under       = f0 exp(beta^-1 T min(m_lo, 0))
//! Theta(x)      = beta^-1 x^-beta [K2^(1-q) + sum_i sup Kbar_i^beta sup (1+h_i)^q sup lambda_i]
//! ell(t)        = exp(-beta^-1 m_hi t)
//! Kbar(tau)     = f0 exp((beta^-1 m_hi + Theta(K_under)) tau)
//! ```
//!
//! The sum in `Theta` runs over the alive names `i`, with `Kbar_i` the bound
//! of the state where `i` has defaulted. `Kbar` follows from
//! `Phi(v) <= Theta(K_under) v` for `v >= K_under` and Gronwall's inequality.

use crate::dual::{phi_bounds, ControlNorms, PhiBounds};
use crate::lattice::DefaultState;
use crate::model::ModelSpec;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct TruncationBounds {
    pub state: DefaultState,
    pub f0: f64,
    pub beta: f64,
    pub horizon: f64,
    pub phi: PhiBounds,
    pub k_under: f64,
    /// Bracket of `Theta(x)`: `K2^(1-q) + sum_i ...`, so `Theta(x) = source_sup x^-beta / beta`.
    pub source_sup: f64,
}

impl TruncationBounds {
    pub fn theta_fun(&self, x: f64) -> f64 {
        self.source_sup * x.powf(-self.beta) / self.beta
    }

    pub fn theta_rate(&self) -> f64 {
        self.theta_fun(self.k_under)
    }

    pub fn ell(&self, t: f64) -> f64 {
        (-self.phi.upper * t / self.beta).exp()
    }

    /// Upper bound at time to horizon `tau`.
    pub fn k_bar(&self, tau: f64) -> f64 {
        if tau == 0.0 {
            // The rate may be infinite; inf * 0 would give NaN.
            return self.f0;
        }
        self.f0 * ((self.phi.upper / self.beta + self.theta_rate()) * tau).exp()
    }

    pub fn k_bar_sup(&self) -> f64 {
        self.k_bar(0.0).max(self.k_bar(self.horizon))
    }

    /// Smallest upper bound over `[tau_a, tau_b]`.
    pub fn k_bar_min(&self, tau_a: f64, tau_b: f64) -> f64 {
        self.k_bar(tau_a).min(self.k_bar(tau_b))
    }

    pub fn clamp(&self, v: f64, tau: f64) -> f64 {
        v.max(self.k_under).min(self.k_bar(tau))
    }
}

/// Bounds for state `z` from the sup norms of its controls and the bounds
/// of its children (indexed by dense state index).
pub fn truncation_bounds(
    z: DefaultState,
    children: &[Option<TruncationBounds>],
    spec: &ModelSpec,
    norms: &ControlNorms,
) -> Result<TruncationBounds> {
    let q = spec.q();
    let beta = spec.beta();
    let horizon = spec.horizon();
    let f0 = spec.f0();
    let phi = phi_bounds(z, spec, norms);
    let k_under = f0 * (horizon * phi.lower.min(0.0) / beta).exp();
    let mut source_sup = spec.preferences.k2.powf(1.0 - q);
    for i in z.alive_names() {
        let child = z.with_default(i);
        let cb = children
            .get(child.index())
            .and_then(Option::as_ref)
            .ok_or_else(|| Error::MissingState(child.bitstring()))?;
        source_sup += cb.k_bar_sup().powf(beta) * norms.jump_power_sup[i] * norms.lambda_sup[i];
    }
    Ok(TruncationBounds {
        state: z,
        f0,
        beta,
        horizon,
        phi,
        k_under,
        source_sup,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::load_preset;
    use approx::assert_relative_eq;

    fn zero_norms() -> ControlNorms {
        ControlNorms {
            theta_sq: 0.0,
            lambda_sup: vec![0.0; 2],
            hhat_sup: vec![0.0; 2],
            jump_power_sup: vec![1.0; 2],
        }
    }

    #[test]
    fn all_defaulted_benchmark_bounds() {
        let spec = load_preset("benchmark_s5").unwrap();
        let z = DefaultState::all_defaulted(2).unwrap();
        let b = truncation_bounds(z, &[], &spec, &zero_norms()).unwrap();
        assert_eq!(b.k_under, 1.0);
        assert_eq!(b.phi.lower, 0.0);
        assert_relative_eq!(b.phi.upper, 0.8, epsilon = 1e-15);
        assert_relative_eq!(b.ell(1.0), (-0.16f64).exp(), epsilon = 1e-15);
        assert_relative_eq!(b.theta_rate(), 0.2, epsilon = 1e-15);
        assert_relative_eq!(b.k_bar(1.0), 0.36f64.exp(), epsilon = 1e-14);
        // The closed-form solution at tau = 1 is about 1.3031.
        assert!(b.k_bar(1.0) > 1.3031 && b.k_under < 1.0 + 1e-15);
    }

    #[test]
    fn missing_child_is_an_error() {
        let spec = load_preset("benchmark_s5").unwrap();
        let z = DefaultState::all_alive(2).unwrap();
        assert!(matches!(
            truncation_bounds(z, &[None, None, None, None], &spec, &zero_norms()),
            Err(Error::MissingState(_))
        ));
    }

    #[test]
    fn unit_weight_and_nonnegative_lower_rate_gives_unit_lower_bound() {
        let spec = load_preset("merton_nodefault").unwrap();
        let z = DefaultState::all_defaulted(2).unwrap();
        let b = truncation_bounds(z, &[], &spec, &ControlNorms { theta_sq: 0.1, ..zero_norms() }).unwrap();
        assert!(b.phi.lower >= 0.0);
        assert_eq!(b.k_under, 1.0);
    }

    #[test]
    fn positive_q_has_flat_ell() {
        let spec = load_preset("benchmark_s5").unwrap().with_p(-1.0);
        let z = DefaultState::all_defaulted(2).unwrap();
        let b = truncation_bounds(z, &[], &spec, &zero_norms()).unwrap();
        assert_eq!(b.phi.upper, 0.0);
        assert_eq!(b.ell(0.7), 1.0);
    }

    #[test]
    fn clamp_is_identity_inside() {
        let spec = load_preset("benchmark_s5").unwrap();
        let z = DefaultState::all_defaulted(2).unwrap();
        let b = truncation_bounds(z, &[], &spec, &zero_norms()).unwrap();
        assert_eq!(b.clamp(1.1, 1.0), 1.1);
        assert_eq!(b.clamp(0.5, 1.0), 1.0);
        assert_eq!(b.clamp(9.0, 0.0), b.k_bar(0.0));
    }
}
