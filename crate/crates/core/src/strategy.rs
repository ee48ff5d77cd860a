//! Dual jump controls and the primal feedback strategy.
//!
//! With `g = f^beta`, `R_i = g(z^i) / g(z)` (the child with name `i`
//! defaulted) and `M = sigma^{-1}`:
//!
//! ```text
//! Lambda = (1 - q) theta^T + rho beta (f'/f) sigma0
//! J_i    = 1 - (1 + h_i)^(q-1) R_i                      (alive i)
//! F_i(h) = J_i - (Lambda M)_i = 0                       (first-order condition)
//! pi_i   = J_i (1 - z_i)
//! a      = -(sqrt(1 - rho^2) / (1 - q)) beta sigma0^T f'/f
//! c      = K2^(1-q) X / g(T - t)
//! V      = (x^p / p) g(T)^(1-p)
//! ```
//!
//! In the variables `v_i = lambda_i h_i` the first-order system is the
//! gradient of the strictly convex potential
//!
//! ```text
//! P(v) = sum_i [v_i - lambda_i R_i ((1 + v_i/lambda_i)^q - 1)/q - c_i v_i]
//!        + (1 - q)/2 v^T (sigma sigma^T)^{-1} v
//! ```
//!
//! so damped Newton with an Armijo search on `P` converges from any start.
//! Names that are alive but have zero intensity carry no jump risk; their
//! `h` is 0 and their fraction is `(Lambda M)_i`.

use crate::dual::{jump_power, NodeCoefficients};
use crate::error::NodeRef;
use crate::lattice::DefaultState;
use crate::model::JUMP_EPS;
use crate::pde::SystemSolution;
use crate::{Error, Result};
use nalgebra::{DMatrix, DVector};

/// Target for `max |F_i|` in the jump-control solve.
pub const FOC_TOL: f64 = 1e-12;

/// Reported failure threshold for the first-order residual.
pub const FOC_FAIL: f64 = 1e-10;

/// Failure threshold for the strategy consistency check.
pub const CONSISTENCY_TOL: f64 = 1e-6;

const MAX_NEWTON: usize = 60;
const H_MAX_START: f64 = 8.0;
const H_MAX_LIMIT: f64 = 512.0;

/// Inputs of the pointwise first-order system at one node.
#[derive(Clone, Copy, Debug)]
pub struct JumpSystem<'a> {
    pub q: f64,
    pub rho: f64,
    pub beta: f64,
    pub node: &'a NodeCoefficients,
    /// Survival-masked intensities.
    pub lambda: &'a [f64],
    /// `R_i = (f(z^i) / f(z))^beta` for alive names; ignored otherwise.
    pub ratio: &'a [f64],
    /// `f'/f` at the node.
    pub grad: f64,
}

/// Result of a jump-control solve.
#[derive(Clone, Debug, PartialEq)]
pub struct JumpSolution {
    pub hhat: Vec<f64>,
    /// `max_i |F_i|` over active names.
    pub residual: f64,
    pub iterations: usize,
    pub used_fallback: bool,
}

impl<'a> JumpSystem<'a> {
    pub fn n(&self) -> usize {
        self.lambda.len()
    }

    /// Names with `lambda_i > 0`; only these are unknowns.
    pub fn active(&self) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.lambda[i] > 0.0).collect()
    }

    pub fn theta(&self, h: &[f64]) -> Vec<f64> {
        self.node.theta(self.lambda, h)
    }

    /// Row `Lambda = (1 - q) theta^T + rho beta (f'/f) sigma0`.
    pub fn lambda_row(&self, theta: &[f64]) -> Vec<f64> {
        theta
            .iter()
            .zip(&self.node.sigma0)
            .map(|(t, s)| (1.0 - self.q) * t + self.rho * self.beta * self.grad * s)
            .collect()
    }

    /// `(Lambda M)_i = (1 - q)(theta^T M)_i + rho beta (f'/f)(sigma0 M)_i`.
    pub fn lambda_m(&self, theta: &[f64]) -> Vec<f64> {
        let n = self.n();
        let m = &self.node.sigma_inv;
        (0..n)
            .map(|i| {
                let tm: f64 = (0..n).map(|j| theta[j] * m[(j, i)]).sum();
                (1.0 - self.q) * tm + self.rho * self.beta * self.grad * self.node.sigma0_m[i]
            })
            .collect()
    }

    /// `J_i` for active names, 0 elsewhere.
    pub fn j_vec(&self, h: &[f64]) -> Result<Vec<f64>> {
        let mut j = vec![0.0; self.n()];
        for i in self.active() {
            j[i] = 1.0 - jump_power(h[i], self.q - 1.0)? * self.ratio[i];
        }
        Ok(j)
    }

    /// `F_i = J_i - (Lambda M)_i` for active names, 0 elsewhere.
    pub fn residual(&self, h: &[f64]) -> Result<Vec<f64>> {
        let j = self.j_vec(h)?;
        let lm = self.lambda_m(&self.theta(h));
        Ok((0..self.n())
            .map(|i| if self.lambda[i] > 0.0 { j[i] - lm[i] } else { 0.0 })
            .collect())
    }

    /// Constant part `c_i` of `(Lambda M)_i` at `h = 0`.
    fn c_vec(&self) -> Vec<f64> {
        self.lambda_m(&self.node.xi)
    }

    /// Convex potential in `v = lambda h`, evaluated at `h`.
    fn potential(&self, h: &[f64], act: &[usize], c: &[f64]) -> f64 {
        let q = self.q;
        let g = &self.node.gram_inv;
        let mut p = 0.0;
        for &i in act {
            let l = self.lambda[i];
            let v = l * h[i];
            let x = 1.0 + h[i];
            let integral = if q == 0.0 {
                x.ln()
            } else {
                (x.powf(q) - 1.0) / q
            };
            p += v - l * self.ratio[i] * integral - c[i] * v;
            for &k in act {
                p += 0.5 * (1.0 - q) * v * g[(i, k)] * self.lambda[k] * h[k];
            }
        }
        p
    }

    /// Solves `F(h) = 0` on the active names starting from `seed`.
    pub fn solve(&self, seed: &[f64]) -> Result<JumpSolution> {
        let n = self.n();
        let act = self.active();
        let mut h = vec![0.0; n];
        if act.is_empty() {
            return Ok(JumpSolution {
                hhat: h,
                residual: 0.0,
                iterations: 0,
                used_fallback: false,
            });
        }
        for &i in &act {
            h[i] = if seed[i] > -1.0 + JUMP_EPS { seed[i] } else { 0.0 };
        }
        if self.node.diagonal {
            if let Some((h, iterations)) = self.scalar_newton(&h, &act) {
                let residual = max_abs(&self.residual(&h)?);
                if residual <= FOC_TOL {
                    return Ok(JumpSolution {
                        hhat: h,
                        residual,
                        iterations,
                        used_fallback: false,
                    });
                }
            }
        }
        let (h, iterations, converged) = self.newton(h, &act)?;
        if converged {
            let residual = max_abs(&self.residual(&h)?);
            return Ok(JumpSolution {
                hhat: h,
                residual,
                iterations,
                used_fallback: false,
            });
        }
        let h = if self.node.diagonal {
            self.bisect_diagonal(&act)?
        } else {
            self.coordinate_bisection(h, &act)?
        };
        let residual = max_abs(&self.residual(&h)?);
        if !(residual <= FOC_FAIL) {
            return Err(Error::Domain(format!(
                "jump-control fallback left residual {residual:e}"
            )));
        }
        Ok(JumpSolution {
            hhat: h,
            residual,
            iterations: iterations + 1,
            used_fallback: true,
        })
    }

    /// Decoupled equations for diagonal sigma: safeguarded Newton on each
    /// concave increasing scalar residual.
    fn scalar_newton(&self, seed: &[f64], act: &[usize]) -> Option<(Vec<f64>, usize)> {
        let q = self.q;
        let mut h = vec![0.0; self.n()];
        let mut iters = 0;
        for &i in act {
            let c = (1.0 - q) * self.node.xi_m[i]
                + self.rho * self.beta * self.grad * self.node.sigma0_m[i];
            let k = (1.0 - q) * self.lambda[i] * self.node.gram_inv[(i, i)];
            let r = self.ratio[i];
            let (mut lo, mut hi) = (-1.0 + JUMP_EPS, f64::INFINITY);
            let mut x = seed[i];
            let mut done = false;
            for it in 0..100 {
                let p = (1.0 + x).powf(q - 2.0);
                let fx = 1.0 - p * (1.0 + x) * r - c + k * x;
                let dfx = (1.0 - q) * p * r + k;
                iters = iters.max(it + 1);
                if fx.abs() <= 0.25 * FOC_TOL {
                    done = true;
                    break;
                }
                if fx < 0.0 {
                    lo = lo.max(x);
                } else {
                    hi = hi.min(x);
                }
                let mut next = x - fx / dfx;
                if !(next > lo && next < hi) {
                    next = if hi.is_finite() { 0.5 * (lo + hi) } else { (2.0 * x + 1.0).max(H_MAX_START) };
                }
                if (next - x).abs() <= 4.0 * f64::EPSILON * (1.0 + x.abs()) {
                    x = next;
                    done = true;
                    break;
                }
                x = next;
            }
            if !done {
                return None;
            }
            h[i] = x;
        }
        Some((h, iters))
    }

    fn newton(&self, mut h: Vec<f64>, act: &[usize]) -> Result<(Vec<f64>, usize, bool)> {
        let q = self.q;
        let c = self.c_vec();
        let g = &self.node.gram_inv;
        let m = act.len();
        let mut f = self.residual(&h)?;
        for it in 0..MAX_NEWTON {
            let res = max_abs(&f);
            if res <= FOC_TOL {
                return Ok((h, it, true));
            }
            let jac = DMatrix::from_fn(m, m, |a, b| {
                let (i, k) = (act[a], act[b]);
                let diag = if i == k {
                    (1.0 + h[i]).powf(q - 2.0) * self.ratio[i]
                } else {
                    0.0
                };
                (1.0 - q) * (diag + self.lambda[k] * g[(i, k)])
            });
            let rhs = DVector::from_iterator(m, act.iter().map(|&i| -f[i]));
            let Some(step) = jac.lu().solve(&rhs) else {
                return Ok((h, it, false));
            };
            // Keep 1 + h above eps with a fraction-to-boundary rule.
            let mut t: f64 = 1.0;
            for (a, &i) in act.iter().enumerate() {
                if step[a] < 0.0 {
                    let room = (1.0 + h[i] - JUMP_EPS) * 0.99;
                    t = t.min(room / -step[a]);
                }
            }
            let p0 = self.potential(&h, act, &c);
            let slope: f64 = act
                .iter()
                .enumerate()
                .map(|(a, &i)| self.lambda[i] * f[i] * step[a])
                .sum();
            let mut accepted = false;
            for _ in 0..40 {
                let trial: Vec<f64> = (0..h.len())
                    .map(|i| match act.iter().position(|&k| k == i) {
                        Some(a) => h[i] + t * step[a],
                        None => 0.0,
                    })
                    .collect();
                let p1 = self.potential(&trial, act, &c);
                // Near the root the potential change is below rounding; accept
                // full steps there and let the residual decide.
                if p1 <= p0 + 1e-4 * t * slope || (t == 1.0 && res < 1e-6) {
                    h = trial;
                    accepted = true;
                    break;
                }
                t *= 0.5;
            }
            if !accepted {
                return Ok((h, it, false));
            }
            let step_norm = max_abs(step.as_slice()) * t;
            f = self.residual(&h)?;
            if step_norm <= 1e-16 * (1.0 + max_abs(&h)) {
                return Ok((h, it + 1, max_abs(&f) <= FOC_FAIL));
            }
        }
        let ok = max_abs(&f) <= FOC_FAIL;
        Ok((h, MAX_NEWTON, ok))
    }

    /// Scalar residual of name `i` with the other components fixed.
    fn scalar_residual(&self, h: &mut [f64], i: usize, v: f64) -> Result<f64> {
        h[i] = v;
        Ok(self.residual(h)?[i])
    }

    fn bracket_root(&self, h: &mut [f64], i: usize) -> Result<f64> {
        let lo0 = -1.0 + JUMP_EPS;
        let mut lo = lo0;
        if self.scalar_residual(h, i, lo)? > 0.0 {
            return Err(Error::Domain(format!(
                "no jump-control root above -1 + eps for name {}",
                i + 1
            )));
        }
        let mut hi = H_MAX_START;
        while self.scalar_residual(h, i, hi)? < 0.0 {
            lo = hi;
            hi *= 2.0;
            if hi > H_MAX_LIMIT {
                return Err(Error::Domain(format!(
                    "jump-control root for name {} exceeds {H_MAX_LIMIT}",
                    i + 1
                )));
            }
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if self.scalar_residual(h, i, mid)? < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let flo = self.scalar_residual(h, i, lo)?.abs();
        let fhi = self.scalar_residual(h, i, hi)?.abs();
        Ok(if flo <= fhi { lo } else { hi })
    }

    fn bisect_diagonal(&self, act: &[usize]) -> Result<Vec<f64>> {
        let mut h = vec![0.0; self.n()];
        for &i in act {
            let root = self.bracket_root(&mut h, i)?;
            h[i] = root;
        }
        Ok(h)
    }

    /// Cyclic coordinate minimisation of the convex potential, each
    /// coordinate solved by bisection.
    fn coordinate_bisection(&self, mut h: Vec<f64>, act: &[usize]) -> Result<Vec<f64>> {
        for &i in act {
            if !(h[i] > -1.0 + JUMP_EPS) {
                h[i] = 0.0;
            }
        }
        for _ in 0..500 {
            for &i in act {
                let root = self.bracket_root(&mut h, i)?;
                h[i] = root;
            }
            if max_abs(&self.residual(&h)?) <= FOC_TOL {
                break;
            }
        }
        Ok(h)
    }

    /// Residual of the optimality identity `J^T sigma = Lambda` on alive
    /// columns: `max_j |(F^T sigma)_j|` with `F = 0` off the active set.
    pub fn identity_residual(&self, h: &[f64]) -> Result<f64> {
        let f = self.residual(h)?;
        let n = self.n();
        let s = &self.node.sigma;
        Ok((0..n)
            .map(|j| (0..n).map(|i| f[i] * s[(i, j)]).sum::<f64>().abs())
            .fold(0.0, f64::max))
    }

    /// Wealth fractions and the consistency residual
    /// `max_alive |pi_i - (Lambda M)_i|`.
    pub fn pi_hat(&self, z: DefaultState, h: &[f64]) -> Result<(Vec<f64>, f64)> {
        let j = self.j_vec(h)?;
        let lm = self.lambda_m(&self.theta(h));
        let mut pi = vec![0.0; self.n()];
        let mut resid: f64 = 0.0;
        for i in z.alive_names() {
            pi[i] = if self.lambda[i] > 0.0 { j[i] } else { lm[i] };
            resid = resid.max((pi[i] - lm[i]).abs());
        }
        Ok((pi, resid))
    }

    /// Factor-direction dual control `a`.
    pub fn ahat(&self) -> Vec<f64> {
        let k = -(1.0 - self.rho * self.rho).sqrt() / (1.0 - self.q) * self.beta * self.grad;
        self.node.sigma0.iter().map(|s| k * s).collect()
    }
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Consumption rate `K2^(1-q) x / g`.
pub fn consumption_from_g(k2: f64, q: f64, g: f64, x: f64) -> Result<f64> {
    if !(x > 0.0) {
        return Err(Error::Domain(format!("wealth {x} must be positive")));
    }
    Ok(k2.powf(1.0 - q) * x / g)
}

/// `V = (x^p / p) g^(1-p)`.
pub fn value_from_g(x: f64, g: f64, p: f64) -> Result<f64> {
    if !(x > 0.0) {
        return Err(Error::Domain(format!("wealth {x} must be positive")));
    }
    Ok(x.powf(p) / p * g.powf(1.0 - p))
}

/// Feedback quantities at one node of a solved system.
#[derive(Clone, Debug, PartialEq)]
pub struct NodePolicy {
    pub hhat: Vec<f64>,
    pub theta: Vec<f64>,
    pub ahat: Vec<f64>,
    pub pi: Vec<f64>,
    /// `K2^(1-q) / g`.
    pub c_mult: f64,
    pub identity_residual: f64,
    pub consistency_residual: f64,
    pub iterations: usize,
}

/// Builds the pointwise system from solution values and solves it.
#[allow(clippy::too_many_arguments)]
pub fn node_policy(
    sol_q: (f64, f64, f64),
    k2: f64,
    node: &NodeCoefficients,
    lambda: &[f64],
    z: DefaultState,
    f: f64,
    df: f64,
    children: &[f64],
    seed: &[f64],
) -> Result<NodePolicy> {
    let (q, rho, beta) = sol_q;
    let ratio: Vec<f64> = (0..lambda.len())
        .map(|i| {
            if z.is_alive(i) {
                (children[i] / f).powf(beta)
            } else {
                1.0
            }
        })
        .collect();
    let sys = JumpSystem {
        q,
        rho,
        beta,
        node,
        lambda,
        ratio: &ratio,
        grad: df / f,
    };
    let sol = sys.solve(seed)?;
    let identity_residual = sys.identity_residual(&sol.hhat)?;
    let (pi, consistency_residual) = sys.pi_hat(z, &sol.hhat)?;
    Ok(NodePolicy {
        theta: sys.theta(&sol.hhat),
        ahat: sys.ahat(),
        pi,
        c_mult: k2.powf(1.0 - q) / f.powf(beta),
        identity_residual,
        consistency_residual,
        iterations: sol.iterations,
        hhat: sol.hhat,
    })
}

/// Per-state policy on the grid, stored by maturity index `k` (time to
/// horizon `tau_k = k dt`) and node `j`; vectors are flattened `[k][j][i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyField {
    pub state: DefaultState,
    pub n_t: usize,
    pub n_y: usize,
    pub n: usize,
    pub hhat: Vec<f64>,
    pub theta: Vec<f64>,
    pub ahat: Vec<f64>,
    pub pi: Vec<f64>,
    pub c_mult: Vec<f64>,
    pub max_identity_residual: f64,
    pub max_consistency_residual: f64,
    pub max_iterations: usize,
}

impl PolicyField {
    pub fn vec_index(&self, k: usize, j: usize, i: usize) -> usize {
        (k * self.n_y + j) * self.n + i
    }

    pub fn pi_at(&self, k: usize, j: usize) -> &[f64] {
        let s = self.vec_index(k, j, 0);
        &self.pi[s..s + self.n]
    }

    pub fn hhat_at(&self, k: usize, j: usize) -> &[f64] {
        let s = self.vec_index(k, j, 0);
        &self.hhat[s..s + self.n]
    }

    pub fn theta_at(&self, k: usize, j: usize) -> &[f64] {
        let s = self.vec_index(k, j, 0);
        &self.theta[s..s + self.n]
    }

    pub fn ahat_at(&self, k: usize, j: usize) -> &[f64] {
        let s = self.vec_index(k, j, 0);
        &self.ahat[s..s + self.n]
    }
}

fn node_ref(z: DefaultState, tau: f64, y: f64) -> NodeRef {
    NodeRef {
        state: z.bitstring(),
        tau,
        y,
    }
}

impl SystemSolution {
    /// `(Lambda, J)` at calendar time `t` for given jump controls.
    pub fn lambda_and_j(
        &self,
        t: f64,
        y: f64,
        z: DefaultState,
        hhat: &[f64],
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        let (node, lambda, ratio, grad) = self.node_inputs(t, y, z)?;
        let sys = self.jump_system(&node, &lambda, &ratio, grad);
        let lambda_row = sys.lambda_row(&sys.theta(hhat));
        let mut j = vec![0.0; self.n()];
        for i in z.alive_names() {
            j[i] = 1.0 - jump_power(hhat[i], sys.q - 1.0)? * ratio[i];
        }
        Ok((lambda_row, j))
    }

    /// Jump controls at calendar time `t`, seeded from the stored policy.
    pub fn solve_hhat(&self, t: f64, y: f64, z: DefaultState) -> Result<JumpSolution> {
        let (node, lambda, ratio, grad) = self.node_inputs(t, y, z)?;
        let sys = self.jump_system(&node, &lambda, &ratio, grad);
        let seed = self.policy_hhat(t, y, z);
        let tau = self.spec.horizon() - t;
        let sol = sys.solve(&seed).map_err(|_| Error::HhatNonConvergence {
            node: node_ref(z, tau, y),
            residual: f64::NAN,
        })?;
        if sol.residual > FOC_FAIL {
            return Err(Error::HhatNonConvergence {
                node: node_ref(z, tau, y),
                residual: sol.residual,
            });
        }
        Ok(sol)
    }

    /// Wealth fractions for given jump controls; errors when the
    /// consistency residual exceeds [`CONSISTENCY_TOL`].
    pub fn pi_hat(&self, t: f64, y: f64, z: DefaultState, hhat: &[f64]) -> Result<Vec<f64>> {
        let (node, lambda, ratio, grad) = self.node_inputs(t, y, z)?;
        let sys = self.jump_system(&node, &lambda, &ratio, grad);
        let (pi, resid) = sys.pi_hat(z, hhat)?;
        if resid > CONSISTENCY_TOL {
            return Err(Error::Consistency(format!(
                "strategy residual {resid:e} at t = {t}, y = {y}, state {z}"
            )));
        }
        Ok(pi)
    }

    pub fn consumption_rate(&self, t: f64, y: f64, z: DefaultState, x: f64) -> Result<f64> {
        let tau = self.spec.horizon() - t;
        let g = self.g(z, tau, y);
        consumption_from_g(self.spec.preferences.k2, self.spec.q(), g, x)
    }

    pub fn value_function(&self, x: f64, y: f64, z: DefaultState) -> Result<f64> {
        let g = self.g(z, self.spec.horizon(), y);
        value_from_g(x, g, self.spec.preferences.p)
    }

    fn jump_system<'a>(
        &self,
        node: &'a NodeCoefficients,
        lambda: &'a [f64],
        ratio: &'a [f64],
        grad: f64,
    ) -> JumpSystem<'a> {
        JumpSystem {
            q: self.spec.q(),
            rho: self.spec.factor.rho,
            beta: self.spec.beta(),
            node,
            lambda,
            ratio,
            grad,
        }
    }

    fn node_inputs(
        &self,
        t: f64,
        y: f64,
        z: DefaultState,
    ) -> Result<(NodeCoefficients, Vec<f64>, Vec<f64>, f64)> {
        let tau = self.spec.horizon() - t;
        let node = NodeCoefficients::new(&self.spec, y)?;
        let lambda = crate::dual::masked_intensity(&self.spec, y, z);
        let (f, df) = self.f_and_df(z, tau, y);
        let beta = self.spec.beta();
        let mut ratio = vec![1.0; self.n()];
        for i in z.alive_names() {
            let child = z.with_default(i);
            if self.field(child).is_none() {
                return Err(Error::MissingState(child.bitstring()));
            }
            ratio[i] = (self.f(child, tau, y) / f).powf(beta);
        }
        Ok((node, lambda, ratio, df / f))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{load_preset, Curve};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn node_for(spec: &crate::ModelSpec, y: f64) -> NodeCoefficients {
        NodeCoefficients::new(spec, y).unwrap()
    }

    #[test]
    fn zero_premium_equal_children_gives_zero_control() {
        let spec = load_preset("benchmark_s5").unwrap();
        let node = node_for(&spec, 0.0);
        let lambda = [1.0, 0.8];
        let sys = JumpSystem {
            q: -4.0,
            rho: 0.0,
            beta: 5.0,
            node: &node,
            lambda: &lambda,
            ratio: &[1.0, 1.0],
            grad: 0.0,
        };
        let sol = sys.solve(&[0.3, -0.2]).unwrap();
        assert!(sol.hhat.iter().all(|h| h.abs() < 1e-13), "{sol:?}");
        let (l, _) = (sys.lambda_row(&sys.theta(&sol.hhat)), ());
        assert!(l.iter().all(|v| v.abs() < 1e-12));
        assert_eq!(sys.j_vec(&[0.0, 0.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn empty_system_for_all_defaulted() {
        let spec = load_preset("benchmark_s5").unwrap();
        let node = node_for(&spec, 0.0);
        let sys = JumpSystem {
            q: -4.0,
            rho: 0.0,
            beta: 5.0,
            node: &node,
            lambda: &[0.0, 0.0],
            ratio: &[1.0, 1.0],
            grad: 0.0,
        };
        let sol = sys.solve(&[0.0, 0.0]).unwrap();
        assert_eq!(sol.hhat, vec![0.0, 0.0]);
        assert_eq!(sol.iterations, 0);
    }

    #[test]
    fn j_example_with_log_exponent() {
        let spec = load_preset("benchmark_s5").unwrap();
        let node = node_for(&spec, 0.0);
        let sys = JumpSystem {
            q: 0.0,
            rho: 0.0,
            beta: 1.0,
            node: &node,
            lambda: &[1.0, 0.0],
            ratio: &[0.5, 1.0],
            grad: 0.0,
        };
        assert_relative_eq!(sys.j_vec(&[1.0, 0.0]).unwrap()[0], 0.75, epsilon = 1e-15);
    }

    #[test]
    fn merton_fraction_from_zero_intensity_names() {
        let spec = load_preset("merton_nodefault").unwrap();
        let node = node_for(&spec, 0.0);
        let q = spec.q();
        let sys = JumpSystem {
            q,
            rho: 0.0,
            beta: spec.beta(),
            node: &node,
            lambda: &[0.0, 0.0],
            ratio: &[1.0, 1.0],
            grad: 0.0,
        };
        let z = DefaultState::all_alive(2).unwrap();
        let (pi, resid) = sys.pi_hat(z, &[0.0, 0.0]).unwrap();
        assert_relative_eq!(pi[0], 2.5, epsilon = 1e-12);
        assert_relative_eq!(pi[1], 0.04 / (0.5 * 0.0625), epsilon = 1e-12);
        assert_eq!(resid, 0.0);
        let (pi, _) = sys.pi_hat(z.with_default(0), &[0.0, 0.0]).unwrap();
        assert_eq!(pi[0], 0.0);
    }

    /// Dense scan plus bisection on each decoupled scalar equation.
    fn brute_force(sys: &JumpSystem, i: usize) -> f64 {
        let mut h = vec![0.0; sys.n()];
        let f = |h: &mut Vec<f64>, v: f64| {
            h[i] = v;
            sys.residual(h).unwrap()[i]
        };
        let n_scan = 20_000;
        let (a, b) = (-1.0 + 1e-6, 50.0);
        let mut lo = a;
        let mut hi = b;
        let mut prev = f(&mut h, a);
        for k in 1..=n_scan {
            let x = a + (b - a) * k as f64 / n_scan as f64;
            let fx = f(&mut h, x);
            if prev < 0.0 && fx >= 0.0 {
                lo = a + (b - a) * (k - 1) as f64 / n_scan as f64;
                hi = x;
                break;
            }
            prev = fx;
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if f(&mut h, mid) < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    proptest! {
        #[test]
        fn newton_matches_bisection_for_diagonal_sigma(
            r0 in 0.3f64..3.0, r1 in 0.3f64..3.0, p in -3.0f64..0.9,
            mu in 0.15f64..0.4, grad in -0.5f64..0.5, rho in -0.6f64..0.6,
        ) {
            prop_assume!(p.abs() > 0.05);
            let mut spec = load_preset("benchmark_s5").unwrap().with_p(p);
            spec.market.mu = vec![mu, 0.2];
            spec.factor.rho = rho;
            let node = node_for(&spec, 0.1);
            let lambda = [1.0, 0.8];
            let ratio = [r0, r1];
            let sys = JumpSystem { q: spec.q(), rho, beta: spec.beta(), node: &node, lambda: &lambda, ratio: &ratio, grad };
            let sol = sys.solve(&[0.0, 0.0]).unwrap();
            prop_assert!(sol.residual <= FOC_FAIL);
            for i in 0..2 {
                let bf = brute_force(&sys, i);
                prop_assert!((bf - sol.hhat[i]).abs() <= 1e-8, "name {i}: {bf} vs {}", sol.hhat[i]);
            }
            prop_assert!(sys.identity_residual(&sol.hhat).unwrap() <= 1e-10);
        }

        #[test]
        fn coupled_solve_reaches_tolerance(
            r0 in 0.3f64..3.0, r1 in 0.3f64..3.0, y in -1.0f64..1.0, grad in -0.5f64..0.5,
        ) {
            let spec = load_preset("scott_example22").unwrap();
            let node = node_for(&spec, y);
            let z = DefaultState::all_alive(2).unwrap();
            let lambda = crate::dual::masked_intensity(&spec, y, z);
            let ratio = [r0, r1];
            let sys = JumpSystem { q: spec.q(), rho: spec.factor.rho, beta: spec.beta(), node: &node, lambda: &lambda, ratio: &ratio, grad };
            let sol = sys.solve(&[0.0, 0.0]).unwrap();
            prop_assert!(sol.residual <= FOC_FAIL, "{sol:?}");
            let (pi, resid) = sys.pi_hat(z, &sol.hhat).unwrap();
            prop_assert!(resid <= 1e-10);
            prop_assert!(pi.iter().all(|&v| v < 1.0));
            prop_assert!(sol.hhat.iter().all(|&h| h > -1.0 + JUMP_EPS));
        }

        #[test]
        fn value_and_consumption_scaling(x in 0.1f64..10.0, s in 0.1f64..10.0, g in 0.5f64..5.0, p in -3.0f64..0.9) {
            prop_assume!(p.abs() > 1e-3);
            let v = value_from_g(x, g, p).unwrap();
            let vs = value_from_g(s * x, g, p).unwrap();
            prop_assert!((vs - s.powf(p) * v).abs() <= 1e-12 * vs.abs().max(1.0));
            let q = p / (p - 1.0);
            let c = consumption_from_g(1.3, q, g, x).unwrap();
            let cs = consumption_from_g(1.3, q, g, s * x).unwrap();
            prop_assert!((cs - s * c).abs() <= 1e-12 * cs.abs());
        }
    }

    #[test]
    fn value_and_consumption_examples() {
        assert_relative_eq!(value_from_g(2.0, 1.0, 0.5).unwrap(), 2f64.sqrt() / 0.5);
        assert_relative_eq!(value_from_g(1.0, 32.0, 0.8).unwrap(), 2.5, epsilon = 1e-14);
        assert_eq!(consumption_from_g(1.0, -2.0, 1.0, 3.0).unwrap(), 3.0);
        assert_eq!(consumption_from_g(1.0, 0.0, 2.0, 1.0).unwrap(), 0.5);
        assert!(value_from_g(0.0, 1.0, 0.5).is_err());
        assert!(consumption_from_g(1.0, 0.5, 1.0, -1.0).is_err());
    }

    #[test]
    fn ahat_formula() {
        let mut spec = load_preset("benchmark_s5").unwrap();
        spec.factor.vol = vec![Curve::constant(0.6), Curve::constant(0.4)];
        let node = node_for(&spec, 0.0);
        let sys = JumpSystem {
            q: -4.0,
            rho: 0.6,
            beta: 5.0 / (1.0 + 4.0 * 0.36),
            node: &node,
            lambda: &[1.0, 0.8],
            ratio: &[1.0, 1.0],
            grad: 0.2,
        };
        let a = sys.ahat();
        let k = -(0.64f64).sqrt() / 5.0 * sys.beta * 0.2;
        assert_relative_eq!(a[0], k * 0.6, epsilon = 1e-15);
        assert_relative_eq!(a[1], k * 0.4, epsilon = 1e-15);
    }
}
