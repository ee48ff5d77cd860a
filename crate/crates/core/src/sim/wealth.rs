//! Wealth under feedback controls and the dual density along a path.

use super::market::{DefaultEvent, Increments, PathBundle};
use super::policy::{Controls, FeedbackPolicy};
use crate::lattice::DefaultState;
use crate::model::ModelSpec;
use crate::{Error, Result};

/// Log-wealth, log-density and running integrals of one path.
///
/// Between defaults, `log X` follows the log-Euler form of
/// `dX/X = [r + pi^T (mu - r) + pi^T lambda - c/X] dt + pi^T sigma dW`;
/// at a default of name `i` wealth is multiplied by `1 - pi_i`.
/// `log Gamma` gets `-theta dW - a dW_bar - |theta|^2/2 dt - |a|^2/2 dt
/// - sum h_i lambda_i dt` and `log(1 + h_i)` at defaults.
#[derive(Clone, Debug, PartialEq)]
pub struct WealthState {
    pub log_x: f64,
    /// Wealth reached zero or below at a default.
    pub ruined: bool,
    pub log_gamma: f64,
    /// `int_0^t U2(c_s) ds`, log-linear between mesh nodes.
    pub consumption_utility: f64,
    /// `int_0^t (Gamma_s / B_s)^q ds`, log-linear between mesh nodes.
    pub density_integral: f64,
    /// `int_0^t |a_s|^2 ds`.
    pub novikov: f64,
    last: Option<(f64, f64)>,
}

impl WealthState {
    pub fn new(x0: f64) -> Result<Self> {
        if !(x0 > 0.0) {
            return Err(Error::Domain(format!("initial wealth {x0} must be positive")));
        }
        Ok(Self {
            log_x: x0.ln(),
            ruined: false,
            log_gamma: 0.0,
            consumption_utility: 0.0,
            density_integral: 0.0,
            novikov: 0.0,
            last: None,
        })
    }

    pub fn wealth(&self) -> f64 {
        if self.ruined {
            0.0
        } else {
            self.log_x.exp()
        }
    }

    pub fn gamma(&self) -> f64 {
        self.log_gamma.exp()
    }

    /// `(Gamma_t / B_t)^q`.
    pub fn discounted_density_pow(&self, spec: &ModelSpec, t: f64) -> f64 {
        (spec.q() * (self.log_gamma - spec.market.r * t)).exp()
    }

    /// Continuous part of one step. Fractions and dual controls are frozen at
    /// the step start; `c_mult` is the consumption rate used over the step.
    #[allow(clippy::too_many_arguments)]
    pub fn diffuse(
        &mut self,
        spec: &ModelSpec,
        y: f64,
        z: DefaultState,
        ctrl: &Controls,
        c_mult: f64,
        dt: f64,
        inc: &Increments,
    ) {
        let n = spec.n();
        let r = spec.market.r;
        let mut drift = r - c_mult;
        let mut shock = 0.0;
        let mut var = 0.0;
        let mut jump_comp = 0.0;
        for j in 0..n {
            let mut s_j = 0.0;
            for i in 0..n {
                s_j += ctrl.pi[i] * spec.market.sigma[i][j].eval(y);
            }
            var += s_j * s_j;
            shock += s_j * inc.dw[j];
        }
        for i in z.alive_names() {
            let l = spec.lambda(i, y, z);
            drift += ctrl.pi[i] * (spec.market.mu[i] - r + l);
            jump_comp += ctrl.hhat[i] * l;
        }
        self.log_x += (drift - 0.5 * var) * dt + shock;

        let mut lg = -jump_comp * dt;
        let mut a_sq = 0.0;
        for j in 0..n {
            lg -= ctrl.theta[j] * inc.dw[j] + ctrl.ahat[j] * inc.dwbar[j];
            lg -= 0.5 * (ctrl.theta[j] * ctrl.theta[j] + ctrl.ahat[j] * ctrl.ahat[j]) * dt;
            a_sq += ctrl.ahat[j] * ctrl.ahat[j];
        }
        self.log_gamma += lg;
        self.novikov += a_sq * dt;
    }

    /// Default of `name` with the pre-default controls.
    pub fn jump(&mut self, ctrl: &Controls, name: usize) {
        let keep = 1.0 - ctrl.pi[name];
        if keep <= 0.0 {
            self.ruined = true;
        } else {
            self.log_x += keep.ln();
        }
        self.log_gamma += (1.0 + ctrl.hhat[name]).ln();
    }

    /// Records the running integrands at mesh time `t` and integrates them
    /// from the previous mark `dt` earlier, log-linearly in between.
    pub fn mark(&mut self, spec: &ModelSpec, t: f64, c_mult: f64, dt: f64) {
        let p = spec.preferences.p;
        let c = c_mult * self.wealth();
        let u2 = spec.preferences.k2 * c.powf(p) / p;
        let d = self.discounted_density_pow(spec, t);
        if let Some((u_prev, d_prev)) = self.last {
            self.consumption_utility += log_mean(u_prev, u2) * dt;
            self.density_integral += log_mean(d_prev, d) * dt;
        }
        self.last = Some((u2, d));
    }

    /// `U1(X_T) + int U2(c) dt`.
    pub fn total_utility(&self, spec: &ModelSpec) -> f64 {
        let p = spec.preferences.p;
        spec.preferences.k1 * self.wealth().powf(p) / p + self.consumption_utility
    }
}

/// Mean of `a e^(s ln(b/a))` over `s` in `[0, 1]`: exact for exponentials,
/// falling back to the arithmetic mean across a sign change or zero.
pub fn log_mean(a: f64, b: f64) -> f64 {
    if a == b {
        return a;
    }
    let ratio = b / a;
    if !(ratio > 0.0) || !ratio.is_finite() {
        return 0.5 * (a + b);
    }
    let l = ratio.ln();
    if l.abs() < 1e-4 {
        // Series of (r - 1) / ln r about r = 1.
        a * (1.0 + l / 2.0 + l * l / 6.0 + l * l * l / 24.0)
    } else {
        (b - a) / l
    }
}

fn replay_jumps(w: &mut WealthState, ctrl: &Controls, events: &[DefaultEvent], step: usize) {
    for e in events.iter().filter(|e| e.step == step) {
        w.jump(ctrl, e.name);
    }
}

/// Adds wealth, consumption and density trajectories to a stored bundle.
pub fn simulate_wealth(
    bundle: &PathBundle,
    spec: &ModelSpec,
    policy: &dyn FeedbackPolicy,
    x0: f64,
) -> Result<PathBundle> {
    WealthState::new(x0)?;
    let mut out = bundle.clone();
    let n = bundle.n;
    let dt = bundle.dt;
    for (pi, path) in out.paths.iter_mut().enumerate() {
        let mut w = WealthState::new(x0)?;
        let mut ctrl = Controls::zeros(n);
        let mut next = Controls::zeros(n);
        let steps = path.increments.len();
        path.wealth = Vec::with_capacity(steps + 1);
        path.consumption = Vec::with_capacity(steps + 1);
        path.density = Vec::with_capacity(steps + 1);
        policy.controls(0.0, path.y[0], bundle.state(pi, 0), &mut ctrl);
        for node in 0..=steps {
            let t = bundle.times[node];
            w.mark(spec, t, ctrl.c_mult, dt);
            path.wealth.push(w.wealth());
            path.consumption.push(ctrl.c_mult * w.wealth());
            path.density.push(w.gamma());
            if node < steps {
                let z = bundle.state(pi, node);
                policy.controls(bundle.times[node + 1], path.y[node + 1], bundle.state(pi, node + 1), &mut next);
                let c = 0.5 * (ctrl.c_mult + next.c_mult);
                w.diffuse(spec, path.y[node], z, &ctrl, c, dt, &path.increments[node]);
                replay_jumps(&mut w, &ctrl, &path.events, node);
                std::mem::swap(&mut ctrl, &mut next);
            }
        }
    }
    Ok(out)
}

/// `Gamma^(a, h)` along every stored path, indexed `[path][node]`.
pub fn density_path(bundle: &PathBundle, spec: &ModelSpec, policy: &dyn FeedbackPolicy) -> Vec<Vec<f64>> {
    let n = bundle.n;
    bundle
        .paths
        .iter()
        .enumerate()
        .map(|(pi, path)| {
            let mut w = WealthState::new(1.0).expect("unit wealth is positive");
            let mut ctrl = Controls::zeros(n);
            let steps = path.increments.len();
            let mut out = Vec::with_capacity(steps + 1);
            out.push(1.0);
            for node in 0..steps {
                let z = bundle.state(pi, node);
                policy.controls(bundle.times[node], path.y[node], z, &mut ctrl);
                w.diffuse(spec, path.y[node], z, &ctrl, ctrl.c_mult, bundle.dt, &path.increments[node]);
                replay_jumps(&mut w, &ctrl, &path.events, node);
                out.push(w.gamma());
            }
            out
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{load_preset, Curve};
    use crate::sim::{simulate_market, ConstantPolicy, SimConfig};
    use approx::assert_relative_eq;

    struct FixedDual {
        theta: Vec<f64>,
        ahat: Vec<f64>,
        hhat: Vec<f64>,
    }

    impl FeedbackPolicy for FixedDual {
        fn controls(&self, _t: f64, _y: f64, _z: DefaultState, out: &mut Controls) {
            out.pi.fill(0.0);
            out.c_mult = 0.0;
            out.theta.clone_from(&self.theta);
            out.ahat.clone_from(&self.ahat);
            out.hhat.clone_from(&self.hhat);
        }
    }

    fn alive() -> DefaultState {
        DefaultState::all_alive(2).unwrap()
    }

    #[test]
    fn bank_account_is_exact() {
        let spec = load_preset("benchmark_s5").unwrap();
        let b = simulate_market(&spec, &SimConfig::new(20, 400, 3), 0.0, alive()).unwrap();
        let pol = ConstantPolicy {
            pi: vec![0.0, 0.0],
            c_mult: 0.0,
        };
        let w = simulate_wealth(&b, &spec, &pol, 2.0).unwrap();
        let exact = 2.0 * (spec.market.r * spec.horizon()).exp();
        for p in &w.paths {
            assert_relative_eq!(*p.wealth.last().unwrap(), exact, max_relative = 1e-12);
        }
    }

    #[test]
    fn default_cuts_wealth_by_the_fraction() {
        let mut spec = load_preset("benchmark_s5").unwrap();
        for row in spec.credit.intensity.iter_mut() {
            for c in row.iter_mut() {
                *c = Curve::constant(5.0);
            }
        }
        let b = simulate_market(&spec, &SimConfig::new(50, 100, 11), 0.0, alive()).unwrap();
        let pol = ConstantPolicy {
            pi: vec![0.3, 0.0],
            c_mult: 0.0,
        };
        let w = simulate_wealth(&b, &spec, &pol, 1.0).unwrap();
        let mut checked = 0;
        for p in &w.paths {
            for e in p.events.iter().filter(|e| e.name == 0) {
                let s = e.step;
                // Predicted log change over the step without the default.
                let z = DefaultState::new(p.h[s], 2).unwrap();
                let y = p.y[s];
                let inc = &p.increments[s];
                let sig = spec.market.sigma[0][0].eval(y);
                let l = spec.lambda(0, y, z);
                let cont = (spec.market.r + 0.3 * (spec.market.mu[0] - spec.market.r + l)
                    - 0.5 * 0.09 * sig * sig)
                    * b.dt
                    + 0.3 * sig * inc.dw[0];
                let ratio = p.wealth[s + 1] / p.wealth[s];
                assert_relative_eq!(ratio, 0.7 * cont.exp(), max_relative = 1e-12);
                checked += 1;
            }
        }
        assert!(checked > 10);
    }

    #[test]
    fn trivial_density_is_one() {
        let spec = load_preset("benchmark_s5").unwrap();
        let b = simulate_market(&spec, &SimConfig::new(10, 30, 2), 0.0, alive()).unwrap();
        let zero = FixedDual {
            theta: vec![0.0; 2],
            ahat: vec![0.0; 2],
            hhat: vec![0.0; 2],
        };
        for g in density_path(&b, &spec, &zero) {
            assert!(g.iter().all(|&v| v == 1.0));
        }
    }

    #[test]
    fn density_jumps_by_one_plus_h() {
        let mut spec = load_preset("benchmark_s5").unwrap();
        for row in spec.credit.intensity.iter_mut() {
            for c in row.iter_mut() {
                *c = Curve::constant(4.0);
            }
        }
        let b = simulate_market(&spec, &SimConfig::new(40, 50, 8), 0.0, alive()).unwrap();
        let h = 0.25;
        let pol = FixedDual {
            theta: vec![0.0; 2],
            ahat: vec![0.0; 2],
            hhat: vec![h, h],
        };
        let dens = density_path(&b, &spec, &pol);
        let mut seen = 0;
        for (p, g) in b.paths.iter().zip(&dens) {
            for e in &p.events {
                if p.events.iter().filter(|o| o.step == e.step).count() > 1 {
                    continue;
                }
                let s = e.step;
                let z = DefaultState::new(p.h[s], 2).unwrap();
                let comp: f64 = z.alive_names().map(|i| h * spec.lambda(i, p.y[s], z)).sum();
                let expected = (1.0 + h) * (-comp * b.dt).exp();
                assert_relative_eq!(g[s + 1] / g[s], expected, max_relative = 1e-12);
                seen += 1;
            }
        }
        assert!(seen > 10);
    }

    #[test]
    fn deterministic_density_has_unit_mean() {
        let spec = load_preset("merton_nodefault").unwrap();
        let cfg = SimConfig::new(20_000, 20, 4);
        let b = simulate_market(&spec, &cfg, 0.0, alive()).unwrap();
        let pol = FixedDual {
            theta: vec![0.4, -0.3],
            ahat: vec![0.2, 0.5],
            hhat: vec![0.0; 2],
        };
        let m = crate::sim::Moments::from_iter(density_path(&b, &spec, &pol).iter().map(|g| g[20]));
        assert!((m.mean - 1.0).abs() <= 3.0 * m.se(), "{} +- {}", m.mean, m.se());
    }

    #[test]
    fn log_mean_integrates_exponentials() {
        let (a, k, dt) = (2.0, -0.7f64, 0.3);
        let exact = a * (k * dt).exp_m1() / k / dt;
        assert_relative_eq!(log_mean(a, a * (k * dt).exp()), exact, max_relative = 1e-14);
        let small = 1e-6f64;
        assert_relative_eq!(log_mean(1.0, small.exp()), small.exp_m1() / small, max_relative = 1e-14);
        assert_eq!(log_mean(1.5, 1.5), 1.5);
        assert_eq!(log_mean(-1.0, 1.0), 0.0);
        assert_eq!(log_mean(0.0, 2.0), 1.0);
    }

    #[test]
    fn rejects_nonpositive_wealth() {
        assert!(WealthState::new(0.0).is_err());
        assert!(WealthState::new(-1.0).is_err());
    }
}
