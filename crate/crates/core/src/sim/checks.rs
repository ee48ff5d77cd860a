//! Statistical validation suites.

use super::market::{DefaultEvent, Increments, MarketState, MarketStepper};
use super::policy::{Controls, FeedbackPolicy};
use super::wealth::WealthState;
use super::{correlation, path_rng, reflect, McReport, Moments, Sided, SimConfig};
use crate::dual::{jump_power, masked_intensity, phi_nu_at, NodeCoefficients};
use crate::lattice::DefaultState;
use crate::model::{Curve, ModelSpec};
use crate::pde::SystemSolution;
use crate::{Error, Result};
use rand::Rng;
use rand_distr::StandardNormal;
use std::time::Instant;

/// Walks one path of market, wealth and density, calling `visit` at every
/// mesh node after the running integrals have been updated.
#[allow(clippy::too_many_arguments)]
fn run_path(
    spec: &ModelSpec,
    policy: &dyn FeedbackPolicy,
    cfg: &SimConfig,
    index: usize,
    x0: f64,
    y0: f64,
    z0: DefaultState,
    visit: &mut dyn FnMut(usize, f64, &MarketState, &WealthState),
) -> Result<(MarketState, WealthState)> {
    let n = spec.n();
    let dt = spec.horizon() / cfg.n_steps as f64;
    let stepper = MarketStepper::new(spec);
    let mut rng = path_rng(cfg.seed, index);
    let mut st = stepper.start(&mut rng, y0, z0);
    let mut w = WealthState::new(x0)?;
    let mut ctrl = Controls::zeros(n);
    let mut next = Controls::zeros(n);
    let mut inc = Increments::zeros(n);
    let mut events: Vec<DefaultEvent> = Vec::with_capacity(n);
    policy.controls(0.0, st.y, st.z, &mut ctrl);
    for node in 0..=cfg.n_steps {
        let t = node as f64 * dt;
        w.mark(spec, t, ctrl.c_mult, dt);
        visit(node, t, &st, &w);
        if node == cfg.n_steps {
            break;
        }
        let (y, z) = (st.y, st.z);
        stepper.draw(&mut rng, dt, &mut inc);
        events.clear();
        stepper.advance(&mut st, &mut rng, dt, &inc, node, &mut events);
        policy.controls((node + 1) as f64 * dt, st.y, st.z, &mut next);
        // Consumption rate by the trapezoid over the step.
        w.diffuse(spec, y, z, &ctrl, 0.5 * (ctrl.c_mult + next.c_mult), dt, &inc);
        for e in &events {
            w.jump(&ctrl, e.name);
        }
        std::mem::swap(&mut ctrl, &mut next);
    }
    Ok((st, w))
}

fn probe_nodes(probes: &[f64], horizon: f64, n_steps: usize) -> Result<Vec<usize>> {
    let dt = horizon / n_steps as f64;
    probes
        .iter()
        .map(|&t| {
            let k = (t / dt).round();
            if !(0.0..=n_steps as f64).contains(&k) || (k * dt - t).abs() > 1e-9 * horizon.max(1.0) {
                Err(Error::InvalidSpec(format!(
                    "probe time {t} is not a node of the {n_steps}-step mesh on [0, {horizon}]"
                )))
            } else {
                Ok(k as usize)
            }
        })
        .collect()
}

/// `E[G_t] = G_0 = g(T, y0, z0)` at each probe, where
/// `G_t = K2^(1-q) int_0^t (Gamma/B)^q ds + (Gamma_t/B_t)^q g(T - t, Y_t, H_t)`.
pub fn check_g_martingale(
    sol: &SystemSolution,
    policy: &dyn FeedbackPolicy,
    cfg: &SimConfig,
    y0: f64,
    z0: DefaultState,
    probes: &[f64],
) -> Result<Vec<McReport>> {
    cfg.check()?;
    let spec = &sol.spec;
    let horizon = spec.horizon();
    let nodes = probe_nodes(probes, horizon, cfg.n_steps)?;
    let kq = spec.preferences.k2.powf(1.0 - spec.q());
    let start = Instant::now();
    let per_path = cfg.exec.map(cfg.n_paths, |index| -> Result<Vec<f64>> {
        let mut out = vec![0.0; nodes.len()];
        run_path(spec, policy, cfg, index, 1.0, y0, z0, &mut |node, t, st, w| {
            for (slot, &k) in nodes.iter().enumerate() {
                if k == node {
                    let g = sol.g(st.z, horizon - t, st.y);
                    out[slot] = kq * w.density_integral + w.discounted_density_pow(spec, t) * g;
                }
            }
        })?;
        Ok(out)
    });
    let per_path: Vec<Vec<f64>> = per_path.into_iter().collect::<Result<_>>()?;
    let elapsed = start.elapsed();
    let target = sol.g(z0, horizon, y0);
    Ok(probes
        .iter()
        .enumerate()
        .map(|(slot, t)| {
            let m = Moments::from_iter(per_path.iter().map(|v| v[slot]));
            McReport::new(format!("G martingale t={t}"), &m, target, Sided::Two, elapsed)
        })
        .collect())
}

/// Primal utility under a feedback policy against the value function.
#[derive(Clone, Debug, PartialEq)]
pub struct DualityReport {
    pub report: McReport,
    /// Correlation of simulated `log X_T` with the density representation.
    pub log_correlation: f64,
    /// Max pathwise `|log X_T - log X_T^repr|`.
    pub max_log_gap: f64,
    /// Paths whose wealth hit zero.
    pub ruined: usize,
    pub reflection_fraction: f64,
    /// Largest pathwise `int |a|^2 dt`.
    pub max_novikov: f64,
}

impl DualityReport {
    /// Simulated wealth follows the representation: correlation above 0.99,
    /// or pathwise agreement when `log X_T` is degenerate.
    pub fn representation_ok(&self) -> bool {
        self.log_correlation > 0.99 || (self.log_correlation.is_nan() && self.max_log_gap < 1e-2)
    }
}

struct UtilitySample {
    utility: f64,
    log_x: f64,
    log_repr: f64,
    ruined: bool,
    reflected: bool,
    novikov: f64,
}

fn utility_samples(
    sol: &SystemSolution,
    policy: &dyn FeedbackPolicy,
    cfg: &SimConfig,
    x0: f64,
    y0: f64,
    z0: DefaultState,
) -> Result<Vec<UtilitySample>> {
    cfg.check()?;
    let spec = &sol.spec;
    let (q, beta, horizon) = (spec.q(), spec.beta(), spec.horizon());
    let f_start = sol.f(z0, horizon, y0);
    let samples = cfg.exec.map(cfg.n_paths, |index| -> Result<UtilitySample> {
        let (st, w) = run_path(spec, policy, cfg, index, x0, y0, z0, &mut |_, _, _, _| {})?;
        let log_repr = x0.ln()
            + beta * (sol.f(st.z, 0.0, st.y) / f_start).ln()
            + (q - 1.0) * (w.log_gamma - spec.market.r * horizon);
        Ok(UtilitySample {
            utility: w.total_utility(spec),
            log_x: if w.ruined { f64::NEG_INFINITY } else { w.log_x },
            log_repr,
            ruined: w.ruined,
            reflected: st.reflections > 0,
            novikov: w.novikov,
        })
    });
    samples.into_iter().collect()
}

/// `E[U1(X_T) + int U2(c) dt]` under `policy` against
/// `V = (x0^p / p) g(T, y0, z0)^(1-p)`.
pub fn duality_gap(
    sol: &SystemSolution,
    policy: &dyn FeedbackPolicy,
    cfg: &SimConfig,
    x0: f64,
    y0: f64,
    z0: DefaultState,
) -> Result<DualityReport> {
    let start = Instant::now();
    let samples = utility_samples(sol, policy, cfg, x0, y0, z0)?;
    let elapsed = start.elapsed();
    let target = crate::strategy::value_from_g(x0, sol.g(z0, sol.spec.horizon(), y0), sol.spec.preferences.p)?;
    let m = Moments::from_iter(samples.iter().map(|s| s.utility));
    let ruined = samples.iter().filter(|s| s.ruined).count();
    let kept: Vec<&UtilitySample> = samples.iter().filter(|s| !s.ruined).collect();
    let lx: Vec<f64> = kept.iter().map(|s| s.log_x).collect();
    let lr: Vec<f64> = kept.iter().map(|s| s.log_repr).collect();
    let spread = Moments::from_iter(lx.iter().copied()).variance();
    let log_correlation = if spread > 1e-24 { correlation(&lx, &lr) } else { f64::NAN };
    let max_log_gap = lx.iter().zip(&lr).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let report = McReport::new("duality gap", &m, target, Sided::Two, elapsed).with_note(format!(
        "log corr {log_correlation:.6}, max log gap {max_log_gap:.3e}, ruined {ruined}"
    ));
    Ok(DualityReport {
        report,
        log_correlation,
        max_log_gap,
        ruined,
        reflection_fraction: samples.iter().filter(|s| s.reflected).count() as f64 / samples.len() as f64,
        max_novikov: samples.iter().map(|s| s.novikov).fold(0.0, f64::max),
    })
}

/// Paired comparison on common paths: passes when `better` beats `worse`
/// by more than three standard errors of the difference.
pub fn compare_policies(
    sol: &SystemSolution,
    better: &dyn FeedbackPolicy,
    worse: &dyn FeedbackPolicy,
    cfg: &SimConfig,
    x0: f64,
    y0: f64,
    z0: DefaultState,
) -> Result<McReport> {
    let start = Instant::now();
    let a = utility_samples(sol, better, cfg, x0, y0, z0)?;
    let b = utility_samples(sol, worse, cfg, x0, y0, z0)?;
    let m = Moments::from_iter(a.iter().zip(&b).map(|(a, b)| a.utility - b.utility));
    Ok(McReport::new("policy ordering", &m, 0.0, Sided::Above, start.elapsed()))
}

/// Default statistics of plain market paths.
#[derive(Clone, Debug, PartialEq)]
pub struct MarketSummary {
    pub n_paths: usize,
    /// Paths with no default by the horizon.
    pub survivors: usize,
    pub total_defaults: usize,
    pub max_defaults: usize,
    /// Pairs of defaults at the same instant on one path.
    pub simultaneous: usize,
    pub reflected_paths: usize,
}

type PathRecord<T> = (MarketState, Vec<DefaultEvent>, Vec<T>);

fn market_paths<T: Send>(
    spec: &ModelSpec,
    cfg: &SimConfig,
    y0: f64,
    z0: DefaultState,
    visit: impl Fn(usize, &MarketState, &[DefaultEvent]) -> T + Sync + Send,
) -> Result<Vec<PathRecord<T>>> {
    spec.check()?;
    cfg.check()?;
    let n = spec.n();
    let dt = spec.horizon() / cfg.n_steps as f64;
    let stepper = MarketStepper::new(spec);
    Ok(cfg.exec.map(cfg.n_paths, |index| {
        let mut rng = path_rng(cfg.seed, index);
        let mut st = stepper.start(&mut rng, y0, z0);
        let mut inc = Increments::zeros(n);
        let mut events = Vec::new();
        let mut seen = Vec::with_capacity(cfg.n_steps + 1);
        seen.push(visit(0, &st, &events));
        for step in 0..cfg.n_steps {
            stepper.draw(&mut rng, dt, &mut inc);
            stepper.advance(&mut st, &mut rng, dt, &inc, step, &mut events);
            seen.push(visit(step + 1, &st, &events));
        }
        (st, events, seen)
    }))
}

pub fn market_summary(spec: &ModelSpec, cfg: &SimConfig, y0: f64, z0: DefaultState) -> Result<MarketSummary> {
    let paths = market_paths(spec, cfg, y0, z0, |_, _, _| ())?;
    let mut s = MarketSummary {
        n_paths: paths.len(),
        survivors: 0,
        total_defaults: 0,
        max_defaults: 0,
        simultaneous: 0,
        reflected_paths: 0,
    };
    for (st, events, _) in &paths {
        s.survivors += usize::from(events.is_empty());
        s.total_defaults += events.len();
        s.max_defaults = s.max_defaults.max(events.len());
        s.simultaneous += events.windows(2).filter(|w| w[0].time == w[1].time).count();
        s.reflected_paths += usize::from(st.reflections > 0);
    }
    Ok(s)
}

/// `P(no default by T) = exp(-sum_i lambda_i T)` for constant all-alive
/// intensities.
pub fn survival_check(spec: &ModelSpec, cfg: &SimConfig, y0: f64) -> Result<McReport> {
    let z0 = DefaultState::all_alive(spec.n())?;
    let mut total = 0.0;
    for c in &spec.credit.intensity[z0.index()] {
        match c {
            Curve::Constant { value } => total += value,
            _ => {
                return Err(Error::InvalidSpec(
                    "survival check needs constant all-alive intensities".into(),
                ))
            }
        }
    }
    let start = Instant::now();
    let paths = market_paths(spec, cfg, y0, z0, |_, _, _| ())?;
    let m = Moments::from_iter(paths.iter().map(|(_, e, _)| if e.is_empty() { 1.0 } else { 0.0 }));
    let target = (-total * spec.horizon()).exp();
    Ok(McReport::new("survival", &m, target, Sided::Two, start.elapsed()))
}

/// `E[M^i_t] = 0` for each name at each probe time.
pub fn compensator_check(
    spec: &ModelSpec,
    cfg: &SimConfig,
    y0: f64,
    z0: DefaultState,
    probes: &[f64],
) -> Result<Vec<McReport>> {
    let nodes = probe_nodes(probes, spec.horizon(), cfg.n_steps)?;
    let n = spec.n();
    let start = Instant::now();
    let paths = market_paths(spec, cfg, y0, z0, |node, st, _| {
        if nodes.contains(&node) {
            (0..n).map(|i| st.martingale(i)).collect()
        } else {
            Vec::new()
        }
    })?;
    let elapsed = start.elapsed();
    let mut out = Vec::new();
    for (t, &k) in probes.iter().zip(&nodes) {
        for i in 0..n {
            let m = Moments::from_iter(paths.iter().map(|(_, _, seen)| seen[k][i]));
            out.push(McReport::new(format!("compensator name {} t={t}", i + 1), &m, 0.0, Sided::Two, elapsed));
        }
    }
    Ok(out)
}

/// Coefficients of the Feynman–Kac representation of one state on the
/// solver grid, flattened `[k][j]` by maturity level `k`. Each entry holds
/// `(phi / beta, Phi(f), nu)`, with `Phi` evaluated on the grid solution
/// and its children.
#[derive(Clone, Debug, PartialEq)]
pub struct FkTables {
    pub state: DefaultState,
    pub values: Vec<[f64; 3]>,
}

pub fn fk_tables(sol: &SystemSolution, z: DefaultState) -> Result<FkTables> {
    let spec = &sol.spec;
    let grid = &sol.grid;
    let (q, beta, rho, r) = (spec.q(), spec.beta(), spec.factor.rho, spec.market.r);
    let kq = spec.preferences.k2.powf(1.0 - q);
    let field = sol.field(z).ok_or_else(|| Error::MissingState(z.bitstring()))?;
    let policy = sol.policy(z);
    let size = (grid.n_t + 1) * grid.n_y;
    let mut t = FkTables {
        state: z,
        values: Vec::with_capacity(size),
    };
    let nodes: Vec<NodeCoefficients> = grid
        .y_nodes()
        .iter()
        .map(|&y| NodeCoefficients::new(spec, y))
        .collect::<Result<_>>()?;
    let lambdas: Vec<Vec<f64>> = grid.y_nodes().iter().map(|&y| masked_intensity(spec, y, z)).collect();
    for k in 0..=grid.n_t {
        for j in 0..grid.n_y {
            let h = policy.hhat_at(k, j);
            let lambda = &lambdas[j];
            let theta = nodes[j].theta(lambda, h);
            let (phi, nu) = phi_nu_at(q, r, rho, &nodes[j], lambda, h, &theta);
            let mut feed = kq;
            for i in z.alive_names() {
                let child = sol
                    .field(z.with_default(i))
                    .ok_or_else(|| Error::MissingState(z.with_default(i).bitstring()))?;
                feed += child.at(k, j).powf(beta) * jump_power(h[i], q)? * lambda[i];
            }
            let f = field.at(k, j);
            t.values.push([phi / beta, f.powf(1.0 - beta) * feed / beta, nu]);
        }
    }
    Ok(t)
}

/// Interpolation weights over maturity levels: cubic Lagrange through the
/// four nearest levels, linear when the grid has fewer than four.
#[derive(Clone, Copy, Debug)]
struct TimeStencil {
    first: usize,
    len: usize,
    w: [f64; 4],
}

impl TimeStencil {
    fn new(grid: &crate::pde::GridSpec, tau: f64, horizon: f64) -> Self {
        let (k, wt) = grid.locate_tau(tau, horizon);
        if grid.n_t < 3 {
            return Self {
                first: k,
                len: 2,
                w: [1.0 - wt, wt, 0.0, 0.0],
            };
        }
        let first = k.saturating_sub(1).min(grid.n_t - 3);
        let s = (k - first) as f64 + wt;
        let mut w = [0.0; 4];
        for (a, wa) in w.iter_mut().enumerate() {
            *wa = (0..4)
                .filter(|&b| b != a)
                .map(|b| (s - b as f64) / (a as f64 - b as f64))
                .product();
        }
        Self { first, len: 4, w }
    }

    fn eval<const D: usize>(&self, values: &[[f64; D]], n_y: usize, (j, wy): (usize, f64)) -> [f64; D] {
        let mut out = [0.0; D];
        for l in 0..self.len {
            let row = (self.first + l) * n_y + j;
            let (a, b) = (&values[row], &values[row + 1]);
            let w = self.w[l];
            for d in 0..D {
                out[d] += w * (a[d] + wy * (b[d] - a[d]));
            }
        }
        out
    }
}

/// Monte Carlo value of
/// `E[f0 e^(int_0^tau rate) + int_0^tau Phi e^(int_0^s rate) ds]` along
/// `dY = nu dt + sigma0 dB`, reflected at the grid edges, against the grid
/// value `f(tau, y, z)`.
///
/// `Y` is advanced by Euler–Maruyama and taken linear within a step; the
/// pair `(e^(int rate), int Phi e^(int rate))` is integrated along it by
/// RK4 with the tables interpolated cubically in maturity.
pub fn mc_feynman_kac(
    sol: &SystemSolution,
    z: DefaultState,
    tau: f64,
    y: f64,
    cfg: &SimConfig,
) -> Result<McReport> {
    let tables = fk_tables(sol, z)?;
    mc_feynman_kac_with(sol, &tables, tau, y, cfg)
}

pub fn mc_feynman_kac_with(
    sol: &SystemSolution,
    tables: &FkTables,
    tau: f64,
    y: f64,
    cfg: &SimConfig,
) -> Result<McReport> {
    cfg.check()?;
    let spec = &sol.spec;
    let grid = &sol.grid;
    let horizon = spec.horizon();
    if !(0.0..=horizon).contains(&tau) {
        return Err(Error::Domain(format!("probe maturity {tau} outside [0, {horizon}]")));
    }
    // `n_steps` is per unit maturity.
    let steps = ((cfg.n_steps as f64 * tau).ceil() as usize).max(1);
    let ds = tau / steps as f64;
    let sq = ds.sqrt();
    let f0 = spec.f0();
    // Stencils at half-step points s = i ds / 2.
    let stencils: Vec<TimeStencil> = (0..=2 * steps)
        .map(|i| TimeStencil::new(grid, (tau - i as f64 * 0.5 * ds).max(0.0), horizon))
        .collect();
    let n_y = grid.n_y;
    let table = &tables.values;
    let start = Instant::now();
    let values = cfg.exec.map(cfg.n_paths, |index| {
        let mut rng = path_rng(cfg.seed, index);
        let mut yk = y;
        let mut a = 1.0;
        let mut acc = 0.0;
        let [mut ra, mut sa, mut nu] = stencils[0].eval(table, n_y, grid.locate_y(yk));
        for k in 0..steps {
            let vol: f64 = spec.factor.vol.iter().map(|c| c.eval(yk).powi(2)).sum::<f64>().sqrt();
            let e: f64 = rng.sample(StandardNormal);
            let y_next = reflect(yk + nu * ds + vol * sq * e, grid.y_lo, grid.y_hi).0;
            let [rm, sm, _] = stencils[2 * k + 1].eval(table, n_y, grid.locate_y(0.5 * (yk + y_next)));
            let [rb, sb, nb] = stencils[2 * k + 2].eval(table, n_y, grid.locate_y(y_next));
            let a1 = a;
            let a2 = a + 0.5 * ds * ra * a1;
            let a3 = a + 0.5 * ds * rm * a2;
            let a4 = a + ds * rm * a3;
            a += ds / 6.0 * (ra * a1 + 2.0 * rm * (a2 + a3) + rb * a4);
            acc += ds / 6.0 * (sa * a1 + 2.0 * sm * (a2 + a3) + sb * a4);
            yk = y_next;
            (ra, sa, nu) = (rb, sb, nb);
        }
        f0 * a + acc
    });
    let m = Moments::from_iter(values);
    let target = sol.f(tables.state, tau, y);
    Ok(McReport::new(
        format!("Feynman-Kac state {} tau={tau} y={y}", tables.state),
        &m,
        target,
        Sided::Two,
        start.elapsed(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::load_preset;

    fn constant(spec: &mut ModelSpec, l: f64) {
        for row in spec.credit.intensity.iter_mut() {
            for c in row.iter_mut() {
                *c = Curve::constant(l);
            }
        }
    }

    #[test]
    fn cubic_stencil_reproduces_cubics() {
        let grid = crate::pde::GridSpec::new(-1.0, 1.0, 3, 10);
        let cubic = |t: f64| 1.0 - 2.0 * t + 0.5 * t * t - 3.0 * t * t * t;
        let values: Vec<[f64; 1]> = (0..=10).flat_map(|k| [[cubic(k as f64 / 10.0)]; 3]).collect();
        for tau in [0.0, 0.03, 0.37, 0.5, 0.96, 1.0] {
            let st = TimeStencil::new(&grid, tau, 1.0);
            let [v] = st.eval(&values, 3, (0, 0.3));
            assert!((v - cubic(tau)).abs() < 1e-13, "{tau}: {v}");
        }
    }

    #[test]
    fn probe_nodes_must_hit_mesh() {
        assert_eq!(probe_nodes(&[0.0, 0.25, 1.0], 1.0, 400).unwrap(), vec![0, 100, 400]);
        assert!(probe_nodes(&[0.3333], 1.0, 4).is_err());
        assert!(probe_nodes(&[1.5], 1.0, 4).is_err());
    }

    #[test]
    fn survival_matches_exponential() {
        let mut spec = load_preset("benchmark_s5").unwrap();
        constant(&mut spec, 1.0);
        let r = survival_check(&spec, &SimConfig::new(20_000, 50, 3), 0.0).unwrap();
        assert!(r.pass, "{r}");
        assert!((r.target - (-2.0f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn survival_needs_constant_intensity() {
        let spec = load_preset("benchmark_s5").unwrap();
        assert!(survival_check(&spec, &SimConfig::new(10, 5, 3), 0.0).is_err());
    }

    #[test]
    fn compensated_defaults_are_centered() {
        let spec = load_preset("benchmark_s5").unwrap();
        let z = DefaultState::all_alive(2).unwrap();
        let reps = compensator_check(&spec, &SimConfig::new(20_000, 100, 5), 0.0, z, &[0.25, 1.0]).unwrap();
        assert_eq!(reps.len(), 4);
        for r in reps {
            assert!(r.pass, "{r}");
        }
    }

    #[test]
    fn summary_counts_defaults() {
        let mut spec = load_preset("benchmark_s5").unwrap();
        constant(&mut spec, 2.0);
        let s = market_summary(&spec, &SimConfig::new(2000, 50, 1), 0.0, DefaultState::all_alive(2).unwrap()).unwrap();
        assert_eq!(s.simultaneous, 0);
        assert!(s.max_defaults <= 2 && s.total_defaults > 0);
        let none = market_summary(
            &load_preset("merton_nodefault").unwrap(),
            &SimConfig::new(500, 50, 1),
            0.0,
            DefaultState::all_alive(2).unwrap(),
        )
        .unwrap();
        assert_eq!((none.total_defaults, none.survivors), (0, 500));
    }
}
