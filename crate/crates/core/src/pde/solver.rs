//! Time marching for the lattice system.

use super::{
    truncation_bounds, GridSpec, SolutionField, SolveReport, StateReport, SystemSolution,
    TruncationBounds,
};
use crate::dual::{jump_power, masked_intensity, phi_nu_at, ControlNorms, NodeCoefficients};
use crate::error::NodeRef;
use crate::exec::Execution;
use crate::lattice::{levels_by_cardinality_desc, DefaultState};
use crate::model::ModelSpec;
use crate::strategy::{node_policy, JumpSystem, PolicyField, FOC_FAIL};
use crate::{Error, Result};

/// Slack on the hard bound checks; values are compared in floating point.
pub(crate) const BOUND_SLACK: f64 = 1e-12;

/// Second-order differences: central inside, one-sided at both ends.
pub fn gradient(f: &[f64], dy: f64) -> Vec<f64> {
    let n = f.len();
    let mut d = vec![0.0; n];
    if n < 3 {
        return d;
    }
    d[0] = (-3.0 * f[0] + 4.0 * f[1] - f[2]) / (2.0 * dy);
    for j in 1..n - 1 {
        d[j] = (f[j + 1] - f[j - 1]) / (2.0 * dy);
    }
    d[n - 1] = (3.0 * f[n - 1] - 4.0 * f[n - 2] + f[n - 3]) / (2.0 * dy);
    d
}

/// `Phi(v) = beta^-1 v^(1-beta) [K2^(1-q) + sum_i f_i^beta w_i]` with
/// `w_i = (1 - z_i)(1 + h_i)^q lambda_i`. With `bounds`, `v` is clamped to
/// `[K_under, K_bar(tau)]` first.
pub fn nonlinear_source(
    v: f64,
    tau: f64,
    beta: f64,
    consumption_weight: f64,
    children: &[f64],
    weights: &[f64],
    bounds: Option<&TruncationBounds>,
) -> Result<f64> {
    let v = match bounds {
        Some(b) => b.clamp(v, tau),
        None if v > 0.0 => v,
        None => return Err(Error::Domain(format!("source evaluated at f = {v}"))),
    };
    let feed: f64 = children
        .iter()
        .zip(weights)
        .map(|(c, w)| c.powf(beta) * w)
        .sum();
    Ok(v.powf(1.0 - beta) * (consumption_weight + feed) / beta)
}

/// Coefficients and coupling data for one state over one time step.
///
/// Index `0` of the paired fields refers to the first half step, `1` to the
/// second. `children[h][c]` holds the four RK4 stage values of `u = f^beta`
/// of the `c`-th coupled child during half step `h`, laid out `[stage][j]`;
/// `weights[h][c]` are the matching `(1 + h_i)^q lambda_i` per node.
pub struct SliceInputs<'a> {
    pub beta: f64,
    /// `K2^(1-q)`.
    pub consumption_weight: f64,
    pub dy: f64,
    /// `1/2 sigma0 sigma0^T` per node.
    pub half_var: &'a [f64],
    /// Factor drift per node, at the step midpoint.
    pub nu: &'a [f64],
    pub phi: [&'a [f64]; 2],
    pub weights: [Vec<&'a [f64]>; 2],
    pub children: [Vec<&'a [f64]>; 2],
    pub bounds: Option<&'a TruncationBounds>,
}

/// Result of [`step_slice`].
#[derive(Clone, Debug)]
pub struct SliceOutput {
    pub f: Vec<f64>,
    /// RK4 stage values of `u = f^beta`, `[half][stage * n_y + j]`.
    pub stages: [Vec<f64>; 2],
    /// Extremes of `f` at the quarter-step times `tau + s dt/4`.
    pub slot_min: [f64; 5],
    pub slot_max: [f64; 5],
    pub clamp_hits: usize,
}

/// Advances one state's slice from `tau` to `tau + dt`.
pub fn step_slice(inp: &SliceInputs, f_now: &[f64], tau: f64, dt: f64) -> Result<SliceOutput> {
    let n_y = f_now.len();
    let mut out = SliceOutput {
        f: Vec::new(),
        stages: [vec![0.0; 4 * n_y], vec![0.0; 4 * n_y]],
        slot_min: [f64::INFINITY; 5],
        slot_max: [f64::NEG_INFINITY; 5],
        clamp_hits: 0,
    };
    let beta = inp.beta;
    let mut u: Vec<f64> = f_now.iter().map(|v| v.powf(beta)).collect();
    let h = 0.5 * dt;
    for half in 0..2 {
        if half == 1 {
            let f_mid: Vec<f64> = to_f(&u, beta, tau + h)?;
            let f_diff = crank_nicolson(&f_mid, inp.half_var, inp.nu, inp.dy, dt)?;
            u = f_diff.iter().map(|v| v.powf(beta)).collect();
        }
        let t0 = tau + half as f64 * h;
        let slot0 = 2 * half;
        let phi = inp.phi[half];
        let stages = &mut out.stages[half];
        let mut k_prev = vec![0.0; n_y];
        let mut acc = vec![0.0; n_y];
        const OFFSET: [f64; 4] = [0.0, 0.5, 0.5, 1.0];
        const SLOT: [usize; 4] = [0, 1, 1, 2];
        const WEIGHT: [f64; 4] = [1.0, 2.0, 2.0, 1.0];
        for s in 0..4 {
            let ts = t0 + OFFSET[s] * h;
            let slot = slot0 + SLOT[s];
            for j in 0..n_y {
                let y = u[j] + OFFSET[s] * h * k_prev[j];
                stages[s * n_y + j] = y;
                if !(y > 0.0) {
                    return Err(Error::Domain(format!(
                        "f^beta = {y} at node {j}, tau = {ts}"
                    )));
                }
                let f = y.powf(1.0 / beta);
                out.slot_min[slot] = out.slot_min[slot].min(f);
                out.slot_max[slot] = out.slot_max[slot].max(f);
                let mut src = inp.consumption_weight;
                for (c, w) in inp.children[half].iter().zip(&inp.weights[half]) {
                    src += w[j] * c[s * n_y + j];
                }
                let factor = match inp.bounds {
                    Some(b) => {
                        let fc = b.clamp(f, ts);
                        if fc != f {
                            out.clamp_hits += 1;
                            (fc / f).powf(1.0 - beta)
                        } else {
                            1.0
                        }
                    }
                    None => 1.0,
                };
                let k = phi[j] * y + factor * src;
                acc[j] += WEIGHT[s] * k;
                k_prev[j] = k;
            }
        }
        for j in 0..n_y {
            u[j] += h / 6.0 * acc[j];
        }
    }
    out.f = to_f(&u, beta, tau + dt)?;
    for &f in &out.f {
        out.slot_min[4] = out.slot_min[4].min(f);
        out.slot_max[4] = out.slot_max[4].max(f);
    }
    Ok(out)
}

fn to_f(u: &[f64], beta: f64, tau: f64) -> Result<Vec<f64>> {
    u.iter()
        .enumerate()
        .map(|(j, &v)| {
            if v > 0.0 {
                Ok(v.powf(1.0 / beta))
            } else {
                Err(Error::Domain(format!("f^beta = {v} at node {j}, tau = {tau}")))
            }
        })
        .collect()
}

/// Tridiagonal generator `a f_yy + b f_y` with homogeneous Neumann ends,
/// as `(lower, diag, upper)` per row.
fn operator_rows(half_var: &[f64], nu: &[f64], dy: f64) -> Vec<(f64, f64, f64)> {
    let n = half_var.len();
    let dy2 = dy * dy;
    (0..n)
        .map(|j| {
            let a = half_var[j] / dy2;
            let b = nu[j] / (2.0 * dy);
            if j == 0 {
                (0.0, -2.0 * a, 2.0 * a)
            } else if j == n - 1 {
                (2.0 * a, -2.0 * a, 0.0)
            } else {
                (a - b, -2.0 * a, a + b)
            }
        })
        .collect()
}

fn apply_rows(rows: &[(f64, f64, f64)], f: &[f64]) -> Vec<f64> {
    let n = f.len();
    (0..n)
        .map(|j| {
            let (l, d, u) = rows[j];
            let mut v = d * f[j];
            if j > 0 {
                v += l * f[j - 1];
            }
            if j + 1 < n {
                v += u * f[j + 1];
            }
            v
        })
        .collect()
}

fn crank_nicolson(f: &[f64], half_var: &[f64], nu: &[f64], dy: f64, dt: f64) -> Result<Vec<f64>> {
    if dt == 0.0 {
        return Ok(f.to_vec());
    }
    let rows = operator_rows(half_var, nu, dy);
    let lf = apply_rows(&rows, f);
    let rhs: Vec<f64> = f.iter().zip(&lf).map(|(v, l)| v + 0.5 * dt * l).collect();
    let lower: Vec<f64> = rows.iter().map(|r| -0.5 * dt * r.0).collect();
    let diag: Vec<f64> = rows.iter().map(|r| 1.0 - 0.5 * dt * r.1).collect();
    let upper: Vec<f64> = rows.iter().map(|r| -0.5 * dt * r.2).collect();
    thomas(&lower, &diag, &upper, &rhs)
}

/// Thomas algorithm; `lower[0]` and `upper[n-1]` are ignored.
pub(crate) fn thomas(lower: &[f64], diag: &[f64], upper: &[f64], rhs: &[f64]) -> Result<Vec<f64>> {
    let n = diag.len();
    let mut c = vec![0.0; n];
    let mut d = vec![0.0; n];
    let mut den = diag[0];
    if !(den.abs() > 1e-300) {
        return Err(Error::Tridiagonal { row: 0 });
    }
    c[0] = upper[0] / den;
    d[0] = rhs[0] / den;
    for j in 1..n {
        den = diag[j] - lower[j] * c[j - 1];
        if !(den.abs() > 1e-300) || !den.is_finite() {
            return Err(Error::Tridiagonal { row: j });
        }
        c[j] = if j + 1 < n { upper[j] / den } else { 0.0 };
        d[j] = (rhs[j] - lower[j] * d[j - 1]) / den;
    }
    for j in (0..n - 1).rev() {
        d[j] -= c[j] * d[j + 1];
    }
    Ok(d)
}

/// Everything that stays fixed during a solve.
struct Context<'a> {
    spec: &'a ModelSpec,
    grid: &'a GridSpec,
    exec: Execution,
    n: usize,
    q: f64,
    beta: f64,
    rho: f64,
    r: f64,
    consumption_weight: f64,
    f0: f64,
    dy: f64,
    horizon: f64,
    ys: Vec<f64>,
    nodes: Vec<NodeCoefficients>,
    half_var: Vec<f64>,
    /// Masked intensities per dense state, `[j * n + i]`.
    lambda: Vec<Vec<f64>>,
    /// State has an alive name with positive intensity somewhere.
    has_jumps: Vec<bool>,
    levels: Vec<Vec<DefaultState>>,
}

/// Per-node coefficients of one state for a given jump-control slice.
struct StepCoefficients {
    phi: Vec<f64>,
    nu: Vec<f64>,
    /// Per alive name, in `alive_names` order.
    weights: Vec<Vec<f64>>,
}

/// Per-state history built during the march.
#[derive(Clone)]
struct March {
    f: Vec<f64>,
    hhat: Vec<f64>,
    slot_min: Vec<[f64; 5]>,
    slot_max: Vec<[f64; 5]>,
    clamp_hits: usize,
    max_sweeps: usize,
    capped_steps: usize,
}

struct StepResult {
    out: SliceOutput,
    hhat: Vec<f64>,
    sweeps: usize,
    capped: bool,
}

impl<'a> Context<'a> {
    fn new(spec: &'a ModelSpec, grid: &'a GridSpec, exec: Execution) -> Result<Self> {
        spec.check()?;
        grid.check()?;
        if spec.factor.dim != 1 {
            return Err(Error::InvalidSpec(format!(
                "the grid solver needs a one-dimensional factor, got {}",
                spec.factor.dim
            )));
        }
        let n = spec.n();
        let ys = grid.y_nodes();
        let nodes = ys
            .iter()
            .map(|&y| NodeCoefficients::new(spec, y))
            .collect::<Result<Vec<_>>>()?;
        let half_var = nodes.iter().map(|c| 0.5 * c.var0).collect();
        let states = DefaultState::all(n)?;
        let mut lambda = Vec::with_capacity(states.len());
        let mut has_jumps = Vec::with_capacity(states.len());
        for &z in &states {
            let mut row = Vec::with_capacity(ys.len() * n);
            for &y in &ys {
                let l = masked_intensity(spec, y, z);
                if l.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                    return Err(Error::InvalidSpec(format!(
                        "intensity {l:?} at y = {y}, state {z} is not finite and non-negative"
                    )));
                }
                row.extend(l);
            }
            has_jumps.push(row.iter().any(|&v| v > 0.0));
            lambda.push(row);
        }
        Ok(Self {
            spec,
            grid,
            exec,
            n,
            q: spec.q(),
            beta: spec.beta(),
            rho: spec.factor.rho,
            r: spec.market.r,
            consumption_weight: spec.preferences.k2.powf(1.0 - spec.q()),
            f0: spec.f0(),
            dy: grid.dy(),
            horizon: spec.horizon(),
            ys,
            nodes,
            half_var,
            lambda,
            has_jumps,
            levels: levels_by_cardinality_desc(n)?,
        })
    }

    fn n_y(&self) -> usize {
        self.grid.n_y
    }

    fn tau(&self, k: usize) -> f64 {
        self.grid.tau(k, self.horizon)
    }

    fn lambda_at(&self, z: DefaultState, j: usize) -> &[f64] {
        &self.lambda[z.index()][j * self.n..(j + 1) * self.n]
    }

    fn coefficients(&self, z: DefaultState, hhat: &[f64]) -> Result<StepCoefficients> {
        let n = self.n;
        let n_y = self.n_y();
        let alive: Vec<usize> = z.alive_names().collect();
        let mut phi = Vec::with_capacity(n_y);
        let mut nu = Vec::with_capacity(n_y);
        let mut weights = vec![Vec::with_capacity(n_y); alive.len()];
        for j in 0..n_y {
            let lam = self.lambda_at(z, j);
            let h = &hhat[j * n..(j + 1) * n];
            let theta = self.nodes[j].theta(lam, h);
            let (p, v) = phi_nu_at(self.q, self.r, self.rho, &self.nodes[j], lam, h, &theta);
            phi.push(p);
            nu.push(v);
            for (c, &i) in alive.iter().enumerate() {
                let w = if lam[i] > 0.0 {
                    jump_power(h[i], self.q)? * lam[i]
                } else {
                    0.0
                };
                weights[c].push(w);
            }
        }
        Ok(StepCoefficients { phi, nu, weights })
    }

    /// Jump controls on a slice from `f`, its children and a seed.
    fn hhat_slice(
        &self,
        z: DefaultState,
        f: &[f64],
        children: &[Option<&[f64]>],
        seed: &[f64],
        tau: f64,
    ) -> Result<Vec<f64>> {
        let n = self.n;
        let n_y = self.n_y();
        let mut out = vec![0.0; n_y * n];
        if !self.has_jumps[z.index()] {
            return Ok(out);
        }
        let df = gradient(f, self.dy);
        let mut ratio = vec![1.0; n];
        for j in 0..n_y {
            for i in 0..n {
                ratio[i] = match children[i] {
                    Some(c) => (c[j] / f[j]).powf(self.beta),
                    None => 1.0,
                };
            }
            let sys = JumpSystem {
                q: self.q,
                rho: self.rho,
                beta: self.beta,
                node: &self.nodes[j],
                lambda: self.lambda_at(z, j),
                ratio: &ratio,
                grad: df[j] / f[j],
            };
            let node = || NodeRef {
                state: z.bitstring(),
                tau,
                y: self.ys[j],
            };
            let sol = sys
                .solve(&seed[j * n..(j + 1) * n])
                .map_err(|_| Error::HhatNonConvergence {
                    node: node(),
                    residual: f64::NAN,
                })?;
            if !(sol.residual <= FOC_FAIL) {
                return Err(Error::HhatNonConvergence {
                    node: node(),
                    residual: sol.residual,
                });
            }
            out[j * n..(j + 1) * n].copy_from_slice(&sol.hhat);
        }
        Ok(out)
    }

    /// One time step of one state, with the jump-control sweeps.
    fn step_state(
        &self,
        z: DefaultState,
        k: usize,
        marches: &[March],
        stages: &[Option<[Vec<f64>; 2]>],
        bounds: Option<&[TruncationBounds]>,
    ) -> Result<StepResult> {
        let n = self.n;
        let n_y = self.n_y();
        let m = &marches[z.index()];
        let f_now = &m.f[k * n_y..(k + 1) * n_y];
        let h_now = &m.hhat[k * n_y * n..(k + 1) * n_y * n];
        let alive: Vec<usize> = z.alive_names().collect();
        let mut child_stages: [Vec<&[f64]>; 2] = [Vec::new(), Vec::new()];
        let mut child_next: Vec<Option<&[f64]>> = vec![None; n];
        for &i in &alive {
            let c = z.with_default(i).index();
            let st = stages[c]
                .as_ref()
                .ok_or_else(|| Error::MissingState(z.with_default(i).bitstring()))?;
            child_stages[0].push(&st[0]);
            child_stages[1].push(&st[1]);
            child_next[i] = Some(&marches[c].f[(k + 1) * n_y..(k + 2) * n_y]);
        }
        let tau = self.tau(k);
        let tau_next = self.tau(k + 1);
        let dt = tau_next - tau;
        let c0 = self.coefficients(z, h_now)?;
        let bound = bounds.map(|b| &b[z.index()]);
        let mut guess = h_now.to_vec();
        let sweeps_max = if self.has_jumps[z.index()] {
            self.grid.inner_sweeps
        } else {
            1
        };
        let mut sweep = 0;
        loop {
            sweep += 1;
            let c1 = if sweep == 1 {
                None
            } else {
                Some(self.coefficients(z, &guess)?)
            };
            let c1r = c1.as_ref().unwrap_or(&c0);
            let nu: Vec<f64> = c0.nu.iter().zip(&c1r.nu).map(|(a, b)| 0.5 * (a + b)).collect();
            let inputs = SliceInputs {
                beta: self.beta,
                consumption_weight: self.consumption_weight,
                dy: self.dy,
                half_var: &self.half_var,
                nu: &nu,
                phi: [&c0.phi, &c1r.phi],
                weights: [
                    c0.weights.iter().map(Vec::as_slice).collect(),
                    c1r.weights.iter().map(Vec::as_slice).collect(),
                ],
                children: child_stages.clone(),
                bounds: bound,
            };
            let out = step_slice(&inputs, f_now, tau, dt)?;
            if !self.has_jumps[z.index()] {
                return Ok(StepResult {
                    out,
                    hhat: guess,
                    sweeps: sweep,
                    capped: false,
                });
            }
            let fresh = self.hhat_slice(z, &out.f, &child_next, &guess, tau_next)?;
            let scale = fresh.iter().fold(1.0f64, |a, v| a.max(v.abs()));
            let change = fresh
                .iter()
                .zip(&guess)
                .fold(0.0f64, |a, (x, y)| a.max((x - y).abs()))
                / scale;
            if change < self.grid.inner_tol || sweep >= sweeps_max {
                return Ok(StepResult {
                    out,
                    hhat: fresh,
                    sweeps: sweep,
                    capped: change >= self.grid.inner_tol,
                });
            }
            guess = fresh;
        }
    }

    /// Marches every state in lock step from `tau = 0` to the horizon.
    fn march(&self, bounds: Option<&[TruncationBounds]>) -> Result<Vec<March>> {
        let n = self.n;
        let n_y = self.n_y();
        let n_t = self.grid.n_t;
        let n_states = 1usize << n;
        let mut marches = vec![
            March {
                f: vec![0.0; (n_t + 1) * n_y],
                hhat: vec![0.0; (n_t + 1) * n_y * n],
                slot_min: vec![[f64::INFINITY; 5]; n_t],
                slot_max: vec![[f64::NEG_INFINITY; 5]; n_t],
                clamp_hits: 0,
                max_sweeps: 0,
                capped_steps: 0,
            };
            n_states
        ];
        for m in &mut marches {
            m.f[..n_y].fill(self.f0);
        }
        // Initial jump controls, level by level so children exist.
        for level in &self.levels {
            for &z in level {
                let f = vec![self.f0; n_y];
                let children: Vec<Option<&[f64]>> = (0..n)
                    .map(|i| z.is_alive(i).then_some(f.as_slice()))
                    .collect();
                let h = self.hhat_slice(z, &f, &children, &vec![0.0; n_y * n], 0.0)?;
                marches[z.index()].hhat[..n_y * n].copy_from_slice(&h);
            }
        }
        for k in 0..n_t {
            let mut stages: Vec<Option<[Vec<f64>; 2]>> = vec![None; n_states];
            for level in &self.levels {
                let results = self
                    .exec
                    .map_items(level, |&z| self.step_state(z, k, &marches, &stages, bounds));
                for (&z, res) in level.iter().zip(results) {
                    let res = res?;
                    let m = &mut marches[z.index()];
                    m.f[(k + 1) * n_y..(k + 2) * n_y].copy_from_slice(&res.out.f);
                    m.hhat[(k + 1) * n_y * n..(k + 2) * n_y * n].copy_from_slice(&res.hhat);
                    m.slot_min[k] = res.out.slot_min;
                    m.slot_max[k] = res.out.slot_max;
                    m.clamp_hits += res.out.clamp_hits;
                    m.max_sweeps = m.max_sweeps.max(res.sweeps);
                    m.capped_steps += res.capped as usize;
                    stages[z.index()] = Some(res.out.stages);
                }
            }
        }
        Ok(marches)
    }

    /// Policy at every node of one state from the final fields.
    fn policies(&self, fields: &[SolutionField], seeds: &[Vec<f64>]) -> Result<Vec<PolicyField>> {
        fields.iter().map(|f| self.policy_field(f.state, fields, seeds)).collect()
    }

    fn policy_field(&self, z: DefaultState, fields: &[SolutionField], seeds: &[Vec<f64>]) -> Result<PolicyField> {
        let n = self.n;
        let n_y = self.n_y();
        let n_t = self.grid.n_t;
        let field = &fields[z.index()];
        let rows = self.exec.map(n_t + 1, |k| -> Result<Vec<crate::strategy::NodePolicy>> {
            let mut out = Vec::with_capacity(n_y);
            let mut children = vec![0.0; n];
            for j in 0..n_y {
                for i in z.alive_names() {
                    children[i] = fields[z.with_default(i).index()].at(k, j);
                }
                let seed = &seeds[z.index()][(k * n_y + j) * n..(k * n_y + j + 1) * n];
                let p = node_policy(
                    (self.q, self.rho, self.beta),
                    self.spec.preferences.k2,
                    &self.nodes[j],
                    self.lambda_at(z, j),
                    z,
                    field.at(k, j),
                    field.df_at(k, j),
                    &children,
                    seed,
                )
                .map_err(|_| Error::HhatNonConvergence {
                    node: NodeRef {
                        state: z.bitstring(),
                        tau: self.tau(k),
                        y: self.ys[j],
                    },
                    residual: f64::NAN,
                })?;
                if !(p.identity_residual <= FOC_FAIL) {
                    return Err(Error::HhatNonConvergence {
                        node: NodeRef {
                            state: z.bitstring(),
                            tau: self.tau(k),
                            y: self.ys[j],
                        },
                        residual: p.identity_residual,
                    });
                }
                out.push(p);
            }
            Ok(out)
        });
        let len = (n_t + 1) * n_y;
        let mut pf = PolicyField {
            state: z,
            n_t,
            n_y,
            n,
            hhat: Vec::with_capacity(len * n),
            theta: Vec::with_capacity(len * n),
            ahat: Vec::with_capacity(len * n),
            pi: Vec::with_capacity(len * n),
            c_mult: Vec::with_capacity(len),
            max_identity_residual: 0.0,
            max_consistency_residual: 0.0,
            max_iterations: 0,
        };
        for row in rows {
            for p in row? {
                pf.hhat.extend(&p.hhat);
                pf.theta.extend(&p.theta);
                pf.ahat.extend(&p.ahat);
                pf.pi.extend(&p.pi);
                pf.c_mult.push(p.c_mult);
                pf.max_identity_residual = pf.max_identity_residual.max(p.identity_residual);
                pf.max_consistency_residual =
                    pf.max_consistency_residual.max(p.consistency_residual);
                pf.max_iterations = pf.max_iterations.max(p.iterations);
            }
        }
        Ok(pf)
    }

    fn control_norms(&self, z: DefaultState, pf: &PolicyField) -> ControlNorms {
        let n = self.n;
        let mut theta_sup = vec![0.0f64; n];
        let mut norms = ControlNorms {
            theta_sq: 0.0,
            lambda_sup: vec![0.0; n],
            hhat_sup: vec![0.0; n],
            jump_power_sup: vec![0.0; n],
        };
        for kj in 0..(pf.n_t + 1) * pf.n_y {
            for i in 0..n {
                let h = pf.hhat[kj * n + i];
                theta_sup[i] = theta_sup[i].max(pf.theta[kj * n + i].abs());
                norms.hhat_sup[i] = norms.hhat_sup[i].max(h.abs());
                if z.is_alive(i) {
                    norms.jump_power_sup[i] = norms.jump_power_sup[i].max((1.0 + h).powf(self.q));
                }
            }
        }
        for j in 0..self.n_y() {
            for i in 0..n {
                norms.lambda_sup[i] = norms.lambda_sup[i].max(self.lambda_at(z, j)[i]);
            }
        }
        norms.theta_sq = theta_sup.iter().map(|t| t * t).sum();
        norms
    }

    fn bounds(&self, policies: &[PolicyField]) -> Result<Vec<TruncationBounds>> {
        let n_states = 1usize << self.n;
        let mut out: Vec<Option<TruncationBounds>> = vec![None; n_states];
        for level in &self.levels {
            for &z in level {
                let norms = self.control_norms(z, &policies[z.index()]);
                out[z.index()] = Some(truncation_bounds(z, &out, self.spec, &norms)?);
            }
        }
        Ok(out.into_iter().map(|b| b.expect("every state has bounds")).collect())
    }

    /// First bound violation of any RK4 stage value, if any.
    fn first_violation(
        &self,
        marches: &[March],
        bounds: &[TruncationBounds],
    ) -> Option<Error> {
        for level in &self.levels {
            for &z in level {
                let m = &marches[z.index()];
                let b = &bounds[z.index()];
                for k in 0..self.grid.n_t {
                    let tau = self.tau(k);
                    let dt = self.tau(k + 1) - tau;
                    for s in 0..5 {
                        let ts = tau + 0.25 * s as f64 * dt;
                        let upper = b.k_bar(ts);
                        let (lo, hi) = (m.slot_min[k][s], m.slot_max[k][s]);
                        let bad = if lo < b.k_under - BOUND_SLACK {
                            Some(lo)
                        } else if hi > upper + BOUND_SLACK {
                            Some(hi)
                        } else {
                            None
                        };
                        if let Some(value) = bad {
                            return Some(Error::BoundViolation {
                                node: NodeRef {
                                    state: z.bitstring(),
                                    tau: ts,
                                    y: f64::NAN,
                                },
                                value,
                                lower: b.k_under,
                                upper,
                            });
                        }
                    }
                }
            }
        }
        None
    }

    /// Max relative residual of the discrete equation (trapezoidal in time).
    fn discrete_residual(&self, z: DefaultState, fields: &[SolutionField], pf: &PolicyField) -> Result<f64> {
        let n_y = self.n_y();
        let field = &fields[z.index()];
        let rhs = |k: usize| -> Result<Vec<f64>> {
            let f = field.slice(k);
            let mut phi = Vec::with_capacity(n_y);
            let mut nu = Vec::with_capacity(n_y);
            let mut src = Vec::with_capacity(n_y);
            for j in 0..n_y {
                let lam = self.lambda_at(z, j);
                let h = pf.hhat_at(k, j);
                let (p, v) = phi_nu_at(self.q, self.r, self.rho, &self.nodes[j], lam, h, pf.theta_at(k, j));
                phi.push(p);
                nu.push(v);
                let mut kids = Vec::new();
                let mut w = Vec::new();
                for i in z.alive_names() {
                    kids.push(fields[z.with_default(i).index()].at(k, j));
                    w.push(if lam[i] > 0.0 { jump_power(h[i], self.q)? * lam[i] } else { 0.0 });
                }
                src.push(nonlinear_source(f[j], self.tau(k), self.beta, self.consumption_weight, &kids, &w, None)?);
            }
            let lf = apply_rows(&operator_rows(&self.half_var, &nu, self.dy), f);
            Ok((0..n_y).map(|j| lf[j] + phi[j] * f[j] / self.beta + src[j]).collect())
        };
        let mut worst = 0.0f64;
        let scale = field.f.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let mut prev = rhs(0)?;
        for k in 0..self.grid.n_t {
            let next = rhs(k + 1)?;
            let dt = self.tau(k + 1) - self.tau(k);
            for j in 0..n_y {
                let dfdt = (field.at(k + 1, j) - field.at(k, j)) / dt;
                worst = worst.max((dfdt - 0.5 * (prev[j] + next[j])).abs());
            }
            prev = next;
        }
        Ok(worst / scale)
    }
}

/// Solves the full lattice with the given execution policy.
///
/// A first pass runs without the clamp and records the range of every value
/// at which the source was evaluated. Bounds then follow bottom-up from the
/// solved controls. If a recorded value leaves them, the lattice is solved
/// again with the clamp (when enabled) or the violation is returned.
pub fn solve_with(spec: &ModelSpec, grid: &GridSpec, exec: Execution) -> Result<SystemSolution> {
    let ctx = Context::new(spec, grid, exec)?;
    let mut marches = ctx.march(None)?;
    let mut fields = build_fields(&ctx, &marches);
    let mut policies = ctx.policies(&fields, &seeds_of(&marches))?;
    let bounds = ctx.bounds(&policies)?;
    let mut clamped_pass = false;
    if let Some(err) = ctx.first_violation(&marches, &bounds) {
        if !grid.clamp_enabled {
            return Err(err);
        }
        clamped_pass = true;
        marches = ctx.march(Some(&bounds))?;
        fields = build_fields(&ctx, &marches);
        policies = ctx.policies(&fields, &seeds_of(&marches))?;
    }
    let stats: Vec<MarchStats> = marches.iter().map(MarchStats::from).collect();
    assemble(&ctx, fields, policies, bounds, &stats, clamped_pass)
}

/// Rebuilds a solution from stored `f` values, one `(n_t + 1) * n_y` vector
/// per state in dense order. Controls, bounds and diagnostics are recomputed;
/// march statistics are zero.
pub fn rebuild_with(spec: &ModelSpec, grid: &GridSpec, values: Vec<Vec<f64>>, exec: Execution) -> Result<SystemSolution> {
    let ctx = Context::new(spec, grid, exec)?;
    let n_states = 1usize << ctx.n;
    let len = (grid.n_t + 1) * grid.n_y;
    if values.len() != n_states {
        return Err(Error::InvalidSpec(format!(
            "expected {n_states} state fields, got {}",
            values.len()
        )));
    }
    let mut fields = Vec::with_capacity(n_states);
    for (s, f) in values.into_iter().enumerate() {
        let z = DefaultState::new(s as u32, ctx.n)?;
        if f.len() != len {
            return Err(Error::InvalidSpec(format!(
                "state {} has {} values, grid needs {len}",
                z.bitstring(),
                f.len()
            )));
        }
        if let Some(v) = f.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
            return Err(Error::InvalidSpec(format!(
                "state {} holds a non-positive or non-finite value {v}",
                z.bitstring()
            )));
        }
        fields.push(SolutionField::from_values(z, grid, f));
    }
    let seeds = vec![vec![0.0; len * ctx.n]; n_states];
    let policies = ctx.policies(&fields, &seeds)?;
    let bounds = ctx.bounds(&policies)?;
    let stats = vec![MarchStats::default(); n_states];
    assemble(&ctx, fields, policies, bounds, &stats, false)
}

#[derive(Clone, Copy, Debug, Default)]
struct MarchStats {
    max_sweeps: usize,
    capped_steps: usize,
    clamp_hits: usize,
}

impl From<&March> for MarchStats {
    fn from(m: &March) -> Self {
        Self {
            max_sweeps: m.max_sweeps,
            capped_steps: m.capped_steps,
            clamp_hits: m.clamp_hits,
        }
    }
}

fn seeds_of(marches: &[March]) -> Vec<Vec<f64>> {
    marches.iter().map(|m| m.hhat.clone()).collect()
}

fn assemble(
    ctx: &Context,
    fields: Vec<SolutionField>,
    policies: Vec<PolicyField>,
    bounds: Vec<TruncationBounds>,
    stats: &[MarchStats],
    clamped_pass: bool,
) -> Result<SystemSolution> {
    let grid = ctx.grid;
    let mut states = Vec::with_capacity(fields.len());
    for s in 0..fields.len() {
        let field = &fields[s];
        let pf = &policies[s];
        let b = &bounds[s];
        let m = stats[s];
        let mut lower_margin = f64::INFINITY;
        let mut upper_margin = f64::INFINITY;
        for k in 0..=grid.n_t {
            let kb = b.k_bar(ctx.tau(k));
            for &v in field.slice(k) {
                lower_margin = lower_margin.min(v - b.k_under);
                upper_margin = upper_margin.min(kb - v);
            }
        }
        states.push(StateReport {
            state: field.state,
            max_identity_residual: pf.max_identity_residual,
            max_consistency_residual: pf.max_consistency_residual,
            max_newton_iterations: pf.max_iterations,
            max_sweeps: m.max_sweeps,
            capped_steps: m.capped_steps,
            clamp_hits: m.clamp_hits,
            lower_margin,
            upper_margin,
            discrete_residual: ctx.discrete_residual(field.state, &fields, pf)?,
            min_f: field.f.iter().copied().fold(f64::INFINITY, f64::min),
            max_f: field.f.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            max_abs_df: field.df.iter().fold(0.0, |a, v| a.max(v.abs())),
        });
    }
    Ok(SystemSolution {
        spec: ctx.spec.clone(),
        grid: grid.clone(),
        fields,
        policies,
        bounds,
        report: SolveReport { states, clamped_pass },
    })
}

fn build_fields(ctx: &Context, marches: &[March]) -> Vec<SolutionField> {
    let n_states = 1usize << ctx.n;
    (0..n_states)
        .map(|s| {
            let z = DefaultState::new(s as u32, ctx.n).expect("dense index is a valid state");
            SolutionField::from_values(z, ctx.grid, marches[s].f.clone())
        })
        .collect()
}
