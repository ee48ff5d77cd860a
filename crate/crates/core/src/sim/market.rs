//! Factor, default and price paths.

use super::{path_rng, reflect, SimConfig};
use crate::lattice::DefaultState;
use crate::model::ModelSpec;
use crate::Result;
use rand::Rng;
use rand_distr::{Exp1, StandardNormal};

/// Brownian increments of one step: `W` drives the stocks, `W_bar` is the
/// factor's own noise.
#[derive(Clone, Debug, PartialEq)]
pub struct Increments {
    pub dw: Vec<f64>,
    pub dwbar: Vec<f64>,
}

impl Increments {
    pub fn zeros(n: usize) -> Self {
        Self {
            dw: vec![0.0; n],
            dwbar: vec![0.0; n],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DefaultEvent {
    pub name: usize,
    pub time: f64,
    /// Mesh step during which the default happened.
    pub step: usize,
}

/// Current position of one path plus the default clocks.
#[derive(Clone, Debug, PartialEq)]
pub struct MarketState {
    pub t: f64,
    pub y: f64,
    pub z: DefaultState,
    /// Exp(1) thresholds of the current round.
    clocks: Vec<f64>,
    /// Integrated intensity since the last default.
    hazard: Vec<f64>,
    /// `int_0^(t ^ tau_i) lambda_i ds`, the compensator of `H^i`.
    pub compensator: Vec<f64>,
    pub reflections: usize,
    pub n_defaults: usize,
    scratch: Vec<f64>,
}

impl MarketState {
    /// Compensated default indicator `M^i_t`.
    pub fn martingale(&self, i: usize) -> f64 {
        let h = if self.z.is_defaulted(i) { 1.0 } else { 0.0 };
        h - self.compensator[i]
    }
}

/// Advances `(Y, H)` on a mesh.
#[derive(Clone, Debug)]
pub struct MarketStepper<'a> {
    spec: &'a ModelSpec,
    n: usize,
    rho: f64,
    rho_c: f64,
    lo: f64,
    hi: f64,
}

impl<'a> MarketStepper<'a> {
    /// Reflects the factor at the declared domain.
    pub fn new(spec: &'a ModelSpec) -> Self {
        let (lo, hi) = spec.factor.domain;
        Self::with_domain(spec, lo, hi)
    }

    pub fn with_domain(spec: &'a ModelSpec, lo: f64, hi: f64) -> Self {
        let rho = spec.factor.rho;
        Self {
            spec,
            n: spec.n(),
            rho,
            rho_c: (1.0 - rho * rho).sqrt(),
            lo,
            hi,
        }
    }

    pub fn spec(&self) -> &'a ModelSpec {
        self.spec
    }

    pub fn start<R: Rng>(&self, rng: &mut R, y0: f64, z0: DefaultState) -> MarketState {
        let mut clocks = vec![f64::INFINITY; self.n];
        for i in z0.alive_names() {
            clocks[i] = rng.sample(Exp1);
        }
        MarketState {
            t: 0.0,
            y: y0,
            z: z0,
            clocks,
            hazard: vec![0.0; self.n],
            compensator: vec![0.0; self.n],
            reflections: 0,
            n_defaults: 0,
            scratch: vec![0.0; self.n],
        }
    }

    pub fn draw<R: Rng>(&self, rng: &mut R, dt: f64, inc: &mut Increments) {
        let s = dt.sqrt();
        for v in inc.dw.iter_mut().chain(inc.dwbar.iter_mut()) {
            let e: f64 = rng.sample(StandardNormal);
            *v = s * e;
        }
    }

    /// One Euler step of the factor followed by the default clocks. Defaults
    /// inside the step are appended to `events`; several may occur, one at a
    /// time, each switching the intensities for the rest of the step.
    pub fn advance<R: Rng>(
        &self,
        st: &mut MarketState,
        rng: &mut R,
        dt: f64,
        inc: &Increments,
        step: usize,
        events: &mut Vec<DefaultEvent>,
    ) {
        let spec = self.spec;
        let y0 = st.y;
        let mut y1 = y0 + spec.mu0(y0) * dt;
        for (k, c) in spec.factor.vol.iter().enumerate() {
            y1 += c.eval(y0) * (self.rho * inc.dw[k] + self.rho_c * inc.dwbar[k]);
        }
        let (y1, bounced) = reflect(y1, self.lo, self.hi);
        st.reflections += bounced;

        let mut frac = 0.0;
        let mut ya = y0;
        while !st.z.is_all_defaulted() {
            let rem = (1.0 - frac) * dt;
            let mut first: Option<(usize, f64)> = None;
            for i in st.z.alive_names() {
                let inc_i = 0.5 * (spec.lambda(i, ya, st.z) + spec.lambda(i, y1, st.z)) * rem;
                st.scratch[i] = inc_i;
                if inc_i > 0.0 && st.hazard[i] + inc_i >= st.clocks[i] {
                    let s = ((st.clocks[i] - st.hazard[i]) / inc_i).clamp(0.0, 1.0);
                    if first.is_none_or(|(_, b)| s < b) {
                        first = Some((i, s));
                    }
                }
            }
            let Some((name, s)) = first else {
                for i in st.z.alive_names() {
                    st.hazard[i] += st.scratch[i];
                    st.compensator[i] += st.scratch[i];
                }
                break;
            };
            for i in st.z.alive_names() {
                st.compensator[i] += s * st.scratch[i];
            }
            frac += s * (1.0 - frac);
            st.z = st.z.with_default(name);
            st.n_defaults += 1;
            events.push(DefaultEvent {
                name,
                time: st.t + frac * dt,
                step,
            });
            ya = y0 + frac * (y1 - y0);
            for i in 0..self.n {
                st.hazard[i] = 0.0;
                st.clocks[i] = if st.z.is_alive(i) {
                    rng.sample(Exp1)
                } else {
                    f64::INFINITY
                };
            }
        }
        st.y = y1;
        st.t += dt;
    }
}

/// One stored trajectory. Vector quantities are flattened `[node][name]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MarketPath {
    pub index: usize,
    pub y: Vec<f64>,
    /// Default state bits at each mesh node.
    pub h: Vec<u32>,
    pub pre_default_price: Vec<f64>,
    pub price: Vec<f64>,
    pub increments: Vec<Increments>,
    pub events: Vec<DefaultEvent>,
    pub reflections: usize,
    /// Filled by [`super::simulate_wealth`].
    pub wealth: Vec<f64>,
    pub consumption: Vec<f64>,
    /// Filled by [`super::density_path`] or [`super::simulate_wealth`].
    pub density: Vec<f64>,
}

/// Monte Carlo trajectories with their RNG provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct PathBundle {
    pub seed: u64,
    pub n: usize,
    pub dt: f64,
    pub times: Vec<f64>,
    pub y0: f64,
    pub z0: DefaultState,
    pub paths: Vec<MarketPath>,
}

impl PathBundle {
    pub fn state(&self, path: usize, node: usize) -> DefaultState {
        DefaultState::new(self.paths[path].h[node], self.n).expect("stored state is valid")
    }

    pub fn reflection_fraction(&self) -> f64 {
        let hit = self.paths.iter().filter(|p| p.reflections > 0).count();
        hit as f64 / self.paths.len() as f64
    }
}

/// Simulates `(Y, H, P, P~)` over `[0, T]` and keeps every trajectory.
pub fn simulate_market(
    spec: &ModelSpec,
    cfg: &SimConfig,
    y0: f64,
    z0: DefaultState,
) -> Result<PathBundle> {
    spec.check()?;
    cfg.check()?;
    let n = spec.n();
    let dt = spec.horizon() / cfg.n_steps as f64;
    let stepper = MarketStepper::new(spec);
    let paths = cfg.exec.map(cfg.n_paths, |index| {
        let mut rng = path_rng(cfg.seed, index);
        let mut st = stepper.start(&mut rng, y0, z0);
        let mut inc = Increments::zeros(n);
        let nodes = cfg.n_steps + 1;
        let mut path = MarketPath {
            index,
            y: Vec::with_capacity(nodes),
            h: Vec::with_capacity(nodes),
            pre_default_price: Vec::with_capacity(nodes * n),
            price: Vec::with_capacity(nodes * n),
            increments: Vec::with_capacity(cfg.n_steps),
            events: Vec::new(),
            reflections: 0,
            wealth: Vec::new(),
            consumption: Vec::new(),
            density: Vec::new(),
        };
        let mut log_p = vec![0.0; n];
        let record = |path: &mut MarketPath, st: &MarketState, log_p: &[f64]| {
            path.y.push(st.y);
            path.h.push(st.z.bits());
            for (i, lp) in log_p.iter().enumerate() {
                let p = lp.exp();
                path.pre_default_price.push(p);
                path.price.push(if st.z.is_alive(i) { p } else { 0.0 });
            }
        };
        record(&mut path, &st, &log_p);
        for step in 0..cfg.n_steps {
            stepper.draw(&mut rng, dt, &mut inc);
            let y = st.y;
            for (i, lp) in log_p.iter_mut().enumerate() {
                if st.z.is_defaulted(i) {
                    continue;
                }
                let mut var = 0.0;
                let mut shock = 0.0;
                for (j, dw) in inc.dw.iter().enumerate() {
                    let s = spec.market.sigma[i][j].eval(y);
                    var += s * s;
                    shock += s * dw;
                }
                *lp += (spec.market.mu[i] + spec.lambda(i, y, st.z) - 0.5 * var) * dt + shock;
            }
            stepper.advance(&mut st, &mut rng, dt, &inc, step, &mut path.events);
            path.increments.push(inc.clone());
            record(&mut path, &st, &log_p);
        }
        path.reflections = st.reflections;
        path
    });
    Ok(PathBundle {
        seed: cfg.seed,
        n,
        dt,
        times: (0..=cfg.n_steps).map(|k| k as f64 * dt).collect(),
        y0,
        z0,
        paths,
    })
}
