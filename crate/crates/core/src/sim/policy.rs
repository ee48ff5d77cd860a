//! Feedback controls read along simulated paths.

use crate::lattice::DefaultState;
use crate::pde::SystemSolution;

/// Controls at one `(t, y, z)`; all vectors have one entry per name.
#[derive(Clone, Debug, PartialEq)]
pub struct Controls {
    pub pi: Vec<f64>,
    /// Consumption per unit wealth.
    pub c_mult: f64,
    pub theta: Vec<f64>,
    pub ahat: Vec<f64>,
    pub hhat: Vec<f64>,
}

impl Controls {
    pub fn zeros(n: usize) -> Self {
        Self {
            pi: vec![0.0; n],
            c_mult: 0.0,
            theta: vec![0.0; n],
            ahat: vec![0.0; n],
            hhat: vec![0.0; n],
        }
    }
}

pub trait FeedbackPolicy: Sync {
    /// Fills `out` at calendar time `t`.
    fn controls(&self, t: f64, y: f64, z: DefaultState, out: &mut Controls);
}

/// Fixed fractions and consumption rate; no dual controls.
#[derive(Clone, Debug, PartialEq)]
pub struct ConstantPolicy {
    pub pi: Vec<f64>,
    pub c_mult: f64,
}

impl FeedbackPolicy for ConstantPolicy {
    fn controls(&self, _t: f64, _y: f64, z: DefaultState, out: &mut Controls) {
        for (i, p) in out.pi.iter_mut().enumerate() {
            *p = if z.is_alive(i) { self.pi[i] } else { 0.0 };
        }
        out.c_mult = self.c_mult;
        out.theta.fill(0.0);
        out.ahat.fill(0.0);
        out.hhat.fill(0.0);
    }
}

/// Optimal feedback read from a solved system by bilinear interpolation in
/// `(tau, y)` of the stored policy fields.
#[derive(Clone, Copy, Debug)]
pub struct SolutionPolicy<'a> {
    sol: &'a SystemSolution,
}

impl<'a> SolutionPolicy<'a> {
    pub fn new(sol: &'a SystemSolution) -> Self {
        Self { sol }
    }
}

impl FeedbackPolicy for SolutionPolicy<'_> {
    fn controls(&self, t: f64, y: f64, z: DefaultState, out: &mut Controls) {
        let sol = self.sol;
        let g = &sol.grid;
        let (k, wt) = g.locate_tau(sol.spec.horizon() - t, sol.spec.horizon());
        let (j, wy) = g.locate_y(y);
        let p = sol.policy(z);
        let n = p.n;
        let corners = [
            ((k * g.n_y + j), (1.0 - wt) * (1.0 - wy)),
            ((k * g.n_y + j + 1), (1.0 - wt) * wy),
            (((k + 1).min(g.n_t) * g.n_y + j), wt * (1.0 - wy)),
            (((k + 1).min(g.n_t) * g.n_y + j + 1), wt * wy),
        ];
        let blend = |values: &[f64], i: usize| -> f64 {
            corners
                .iter()
                .filter(|(_, w)| *w != 0.0)
                .map(|&(node, w)| values[node * n + i] * w)
                .sum()
        };
        for i in 0..n {
            out.pi[i] = blend(&p.pi, i);
            out.theta[i] = blend(&p.theta, i);
            out.ahat[i] = blend(&p.ahat, i);
            out.hhat[i] = blend(&p.hhat, i);
        }
        out.c_mult = corners
            .iter()
            .filter(|(_, w)| *w != 0.0)
            .map(|&(node, w)| p.c_mult[node] * w)
            .sum();
    }
}

/// Wraps a policy and multiplies its fractions by a constant.
#[derive(Clone, Copy, Debug)]
pub struct ScaledPolicy<P> {
    pub inner: P,
    pub scale: f64,
}

impl<P: FeedbackPolicy> FeedbackPolicy for ScaledPolicy<P> {
    fn controls(&self, t: f64, y: f64, z: DefaultState, out: &mut Controls) {
        self.inner.controls(t, y, z, out);
        for p in out.pi.iter_mut() {
            *p *= self.scale;
        }
    }
}

/// Wraps a policy and switches consumption off.
#[derive(Clone, Copy, Debug)]
pub struct ZeroConsumption<P>(pub P);

impl<P: FeedbackPolicy> FeedbackPolicy for ZeroConsumption<P> {
    fn controls(&self, t: f64, y: f64, z: DefaultState, out: &mut Controls) {
        self.0.controls(t, y, z, out);
        out.c_mult = 0.0;
    }
}
