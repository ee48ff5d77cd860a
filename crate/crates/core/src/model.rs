//! Model inputs: factor, market, credit and preference blocks, the presets,
//! and assumption checks on a grid.
//!
//! ```text
//! dY     = mu0(Y) dt + sigma0(Y) [rho dW + sqrt(1 - rho^2) dWbar]
//! dP_i/P = (mu_i + lambda_i(Y, H)) dt + sum_j sigma_ij(Y) dW_j
//! lambda_i(y, z) = a_iz + b_iz * exp(c_iz * y)      (exp-affine preset)
//! ```
//!
//! Coefficient functions of the factor are [`Curve`]s so that presets,
//! configuration files and tabulated inputs share one representation.

use crate::lattice::DefaultState;
use crate::pde::GridSpec;
use crate::{Error, Result};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::str::FromStr;

/// Smallest admissible value of `1 + h` for jump controls.
pub const JUMP_EPS: f64 = 1e-6;

/// Condition-number cap for sigma(y).
pub const SIGMA_CONDITION_CAP: f64 = 1e12;

/// A scalar function of the factor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Curve {
    Constant { value: f64 },
    /// `intercept + slope * y`
    Affine { intercept: f64, slope: f64 },
    /// `a + b * exp(c * y)`
    ExpAffine { a: f64, b: f64, c: f64 },
    /// `scale * sqrt(eps + exp(gamma * y))`
    ScottVol { scale: f64, eps: f64, gamma: f64 },
    /// `scale * sqrt(eps + gamma * y^2)`
    SteinSteinVol { scale: f64, eps: f64, gamma: f64 },
    /// Piecewise linear through `(y, values)`, flat outside the table.
    Table { y: Vec<f64>, values: Vec<f64> },
}

impl Curve {
    pub fn constant(value: f64) -> Self {
        Curve::Constant { value }
    }

    pub fn eval(&self, y: f64) -> f64 {
        match self {
            Curve::Constant { value } => *value,
            Curve::Affine { intercept, slope } => intercept + slope * y,
            Curve::ExpAffine { a, b, c } => a + b * (c * y).exp(),
            Curve::ScottVol { scale, eps, gamma } => scale * (eps + (gamma * y).exp()).sqrt(),
            Curve::SteinSteinVol { scale, eps, gamma } => scale * (eps + gamma * y * y).sqrt(),
            Curve::Table { y: ys, values } => table_interp(ys, values, y),
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, Curve::Constant { value } if *value == 0.0)
    }

    fn check(&self, what: &str) -> Result<()> {
        if let Curve::Table { y, values } = self {
            if y.len() < 2 || y.len() != values.len() {
                return Err(Error::InvalidSpec(format!(
                    "{what}: table needs at least two points and matching lengths"
                )));
            }
            if y.windows(2).any(|w| w[1] <= w[0]) {
                return Err(Error::InvalidSpec(format!(
                    "{what}: table abscissae must be strictly increasing"
                )));
            }
        }
        Ok(())
    }
}

fn table_interp(ys: &[f64], values: &[f64], y: f64) -> f64 {
    if y <= ys[0] {
        return values[0];
    }
    let last = ys.len() - 1;
    if y >= ys[last] {
        return values[last];
    }
    let k = ys.partition_point(|&v| v <= y) - 1;
    let w = (y - ys[k]) / (ys[k + 1] - ys[k]);
    values[k] * (1.0 - w) + values[k + 1] * w
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactorSpec {
    /// Factor dimension; the grid solver only accepts 1.
    pub dim: usize,
    pub drift: Curve,
    /// Row `sigma0(y)`, one entry per Brownian component.
    pub vol: Vec<Curve>,
    pub rho: f64,
    /// Declared domain `D = (lo, hi)`.
    pub domain: (f64, f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarketSpec {
    pub r: f64,
    pub mu: Vec<f64>,
    /// Row-major `sigma(y)`, `n x n`.
    pub sigma: Vec<Vec<Curve>>,
}

/// Intensities `lambda_i(y, z)`, indexed by dense state index then name.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CreditRepr", into = "CreditRepr")]
pub struct CreditSpec {
    pub intensity: Vec<Vec<Curve>>,
}

/// On-disk form: one list of curves per state bitstring.
#[derive(Clone, Debug, Serialize, Deserialize)]
struct CreditRepr {
    intensity: BTreeMap<String, Vec<Curve>>,
}

impl TryFrom<CreditRepr> for CreditSpec {
    type Error = Error;

    fn try_from(repr: CreditRepr) -> Result<Self> {
        let n = repr
            .intensity
            .keys()
            .next()
            .map(|k| k.len())
            .ok_or_else(|| Error::InvalidSpec("credit block has no states".into()))?;
        let mut table: Vec<Option<Vec<Curve>>> = vec![None; 1 << n];
        for (key, curves) in repr.intensity {
            let z = DefaultState::from_bitstring(&key)?;
            if z.n() != n {
                return Err(Error::InvalidSpec(format!(
                    "credit state `{key}` has {} names, expected {n}",
                    z.n()
                )));
            }
            table[z.index()] = Some(curves);
        }
        let intensity = table
            .into_iter()
            .enumerate()
            .map(|(bits, row)| {
                row.ok_or_else(|| {
                    Error::InvalidSpec(format!(
                        "credit block misses state {}",
                        DefaultState::new(bits as u32, n).unwrap()
                    ))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(CreditSpec { intensity })
    }
}

impl From<CreditSpec> for CreditRepr {
    fn from(spec: CreditSpec) -> Self {
        let n = spec.intensity.len().trailing_zeros() as usize;
        let intensity = spec
            .intensity
            .into_iter()
            .enumerate()
            .map(|(bits, row)| (DefaultState::new(bits as u32, n).unwrap().bitstring(), row))
            .collect();
        CreditRepr { intensity }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreferenceSpec {
    pub p: f64,
    pub k1: f64,
    pub k2: f64,
    pub horizon: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub names: usize,
    pub factor: FactorSpec,
    pub market: MarketSpec,
    pub credit: CreditSpec,
    pub preferences: PreferenceSpec,
}

impl ModelSpec {
    /// Structural checks: dimensions and parameter ranges. Assumption checks
    /// on a grid live in [`validate_spec`].
    pub fn check(&self) -> Result<()> {
        let n = self.names;
        DefaultState::all_alive(n)?;
        let bad = |msg: String| Err(Error::InvalidSpec(msg));
        if self.factor.vol.len() != n {
            return bad(format!("factor vol has {} entries, expected {n}", self.factor.vol.len()));
        }
        if !(self.factor.rho > -1.0 && self.factor.rho < 1.0) {
            return bad(format!("rho = {} must lie in (-1, 1)", self.factor.rho));
        }
        let (lo, hi) = self.factor.domain;
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return bad(format!("factor domain ({lo}, {hi}) must be finite and ordered"));
        }
        if self.market.mu.len() != n {
            return bad(format!("market mu has {} entries, expected {n}", self.market.mu.len()));
        }
        if self.market.sigma.len() != n || self.market.sigma.iter().any(|row| row.len() != n) {
            return bad(format!("market sigma must be {n} x {n}"));
        }
        if self.credit.intensity.len() != 1 << n
            || self.credit.intensity.iter().any(|row| row.len() != n)
        {
            return bad(format!("credit block must list {n} intensities for each of {} states", 1 << n));
        }
        let pref = &self.preferences;
        if !(pref.p < 1.0) || pref.p == 0.0 || !pref.p.is_finite() {
            return bad(format!("p = {} must satisfy p < 1, p != 0", pref.p));
        }
        if !(pref.k1 > 0.0 && pref.k2 > 0.0 && pref.horizon > 0.0) {
            return bad("K1, K2 and T must be positive".into());
        }
        self.factor.drift.check("factor drift")?;
        for c in &self.factor.vol {
            c.check("factor vol")?;
        }
        for c in self.market.sigma.iter().flatten() {
            c.check("market sigma")?;
        }
        for c in self.credit.intensity.iter().flatten() {
            c.check("intensity")?;
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.names
    }

    /// Dual exponent `q = p / (p - 1)`.
    pub fn q(&self) -> f64 {
        crate::dual::dual_exponent(self.preferences.p)
    }

    /// Power-transform exponent `beta = (1 - q) / (1 - q rho^2)`.
    pub fn beta(&self) -> f64 {
        crate::dual::transform_exponent(self.q(), self.factor.rho)
    }

    /// Initial value `f(0, y, z) = K1^(1 / (1 - q rho^2))`.
    pub fn f0(&self) -> f64 {
        let q = self.q();
        let rho = self.factor.rho;
        self.preferences.k1.powf(1.0 / (1.0 - q * rho * rho))
    }

    pub fn horizon(&self) -> f64 {
        self.preferences.horizon
    }

    /// Raw intensity `lambda_i(y, z)`, not masked by survival.
    pub fn lambda(&self, i: usize, y: f64, z: DefaultState) -> f64 {
        self.credit.intensity[z.index()][i].eval(y)
    }

    pub fn sigma_at(&self, y: f64) -> DMatrix<f64> {
        let n = self.names;
        DMatrix::from_fn(n, n, |i, j| self.market.sigma[i][j].eval(y))
    }

    pub fn mu0(&self, y: f64) -> f64 {
        self.factor.drift.eval(y)
    }

    pub fn sigma0(&self, y: f64) -> Vec<f64> {
        self.factor.vol.iter().map(|c| c.eval(y)).collect()
    }

    /// Returns a copy with every entry of sigma multiplied by `scale`.
    pub fn with_sigma_scale(&self, scale: f64) -> Self {
        let mut out = self.clone();
        for c in out.market.sigma.iter_mut().flatten() {
            *c = scale_curve(c, scale);
        }
        out
    }

    pub fn with_p(&self, p: f64) -> Self {
        let mut out = self.clone();
        out.preferences.p = p;
        out
    }
}

fn scale_curve(c: &Curve, s: f64) -> Curve {
    match c {
        Curve::Constant { value } => Curve::Constant { value: value * s },
        Curve::Affine { intercept, slope } => Curve::Affine {
            intercept: intercept * s,
            slope: slope * s,
        },
        Curve::ExpAffine { a, b, c } => Curve::ExpAffine {
            a: a * s,
            b: b * s,
            c: *c,
        },
        Curve::ScottVol { scale, eps, gamma } => Curve::ScottVol {
            scale: scale * s,
            eps: *eps,
            gamma: *gamma,
        },
        Curve::SteinSteinVol { scale, eps, gamma } => Curve::SteinSteinVol {
            scale: scale * s,
            eps: *eps,
            gamma: *gamma,
        },
        Curve::Table { y, values } => Curve::Table {
            y: y.clone(),
            values: values.iter().map(|v| v * s).collect(),
        },
    }
}

/// Built-in parameter sets.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Benchmark,
    Scott,
    SteinStein,
    MertonNoDefault,
}

impl Preset {
    pub const ALL: [Preset; 4] = [
        Preset::Benchmark,
        Preset::Scott,
        Preset::SteinStein,
        Preset::MertonNoDefault,
    ];

    pub fn id(&self) -> &'static str {
        match self {
            Preset::Benchmark => "benchmark_s5",
            Preset::Scott => "scott_example22",
            Preset::SteinStein => "stein_stein_example22",
            Preset::MertonNoDefault => "merton_nodefault",
        }
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.id() == s)
            .ok_or_else(|| Error::UnknownPreset(s.to_string()))
    }
}

pub fn load_preset(name: &str) -> Result<ModelSpec> {
    let spec = match name.parse::<Preset>()? {
        Preset::Benchmark => benchmark(),
        Preset::Scott => example22(|scale, eps, gamma| Curve::ScottVol { scale, eps, gamma }),
        Preset::SteinStein => {
            example22(|scale, eps, gamma| Curve::SteinSteinVol { scale, eps, gamma })
        }
        Preset::MertonNoDefault => merton_nodefault(),
    };
    spec.check()?;
    Ok(spec)
}

fn ou_factor(rho: f64) -> FactorSpec {
    FactorSpec {
        dim: 1,
        drift: Curve::Affine {
            intercept: 0.5,
            slope: -1.2,
        },
        vol: vec![Curve::constant(0.6), Curve::constant(0.4)],
        rho,
        domain: (-1.0, 1.0),
    }
}

fn diag(a: Curve, b: Curve) -> Vec<Vec<Curve>> {
    vec![vec![a, Curve::constant(0.0)], vec![Curve::constant(0.0), b]]
}

fn exp_affine(a: f64, b: f64) -> Curve {
    Curve::ExpAffine { a, b, c: 0.1 }
}

/// Intensities indexed by state 00, 10, 01, 11 (dense order). Entries for
/// defaulted names are never read and are set to zero.
fn benchmark_credit() -> CreditSpec {
    let zero = Curve::constant(0.0);
    CreditSpec {
        intensity: vec![
            vec![exp_affine(0.6, 0.4), exp_affine(0.5, 0.3)],
            vec![zero.clone(), exp_affine(0.8, 0.6)],
            vec![exp_affine(0.8, 0.6), zero.clone()],
            vec![zero.clone(), zero],
        ],
    }
}

fn benchmark() -> ModelSpec {
    ModelSpec {
        names: 2,
        factor: ou_factor(0.0),
        market: MarketSpec {
            r: 0.2,
            mu: vec![0.2, 0.2],
            sigma: diag(Curve::constant(0.8), Curve::constant(0.8)),
        },
        credit: benchmark_credit(),
        preferences: PreferenceSpec {
            p: 0.8,
            k1: 1.0,
            k2: 1.0,
            horizon: 1.0,
        },
    }
}

/// Two stocks with correlated stochastic volatility driven by the factor:
/// `sigma = [[s1, 0], [rbar s2, sqrt(1 - rbar^2) s2]]`, `s_i = sqrt(vartheta_i(y))`.
fn example22(vol: impl Fn(f64, f64, f64) -> Curve) -> ModelSpec {
    let rbar: f64 = 0.3;
    let (eps, gamma) = ([0.04, 0.05], [0.5, 0.3]);
    let sigma = vec![
        vec![vol(1.0, eps[0], gamma[0]), Curve::constant(0.0)],
        vec![
            vol(rbar, eps[1], gamma[1]),
            vol((1.0 - rbar * rbar).sqrt(), eps[1], gamma[1]),
        ],
    ];
    ModelSpec {
        names: 2,
        factor: ou_factor(0.3),
        market: MarketSpec {
            r: 0.05,
            mu: vec![0.12, 0.10],
            sigma,
        },
        credit: benchmark_credit(),
        preferences: PreferenceSpec {
            p: 0.5,
            k1: 1.0,
            k2: 1.0,
            horizon: 1.0,
        },
    }
}

fn merton_nodefault() -> ModelSpec {
    let zero = || vec![Curve::constant(0.0), Curve::constant(0.0)];
    ModelSpec {
        names: 2,
        factor: ou_factor(0.0),
        market: MarketSpec {
            r: 0.2,
            mu: vec![0.25, 0.24],
            sigma: diag(Curve::constant(0.2), Curve::constant(0.25)),
        },
        credit: CreditSpec {
            intensity: vec![zero(), zero(), zero(), zero()],
        },
        preferences: PreferenceSpec {
            p: 0.5,
            k1: 1.0,
            k2: 1.0,
            horizon: 1.0,
        },
    }
}

/// Grid location of a failed check.
#[derive(Clone, Debug, PartialEq)]
pub struct Offending {
    pub y: f64,
    pub state: Option<String>,
    pub name: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AssumptionCheck {
    pub name: &'static str,
    pub passed: bool,
    pub offending: Option<Offending>,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct ValidationReport {
    pub checks: Vec<AssumptionCheck>,
}

impl ValidationReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &AssumptionCheck> {
        self.checks.iter().filter(|c| !c.passed)
    }

    pub fn check(&self, name: &str) -> Option<&AssumptionCheck> {
        self.checks.iter().find(|c| c.name == name)
    }
}

impl std::fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for c in &self.checks {
            write!(f, "{:<14} {}", c.name, if c.passed { "pass" } else { "FAIL" })?;
            if let Some(o) = &c.offending {
                write!(f, " at y = {}", o.y)?;
                if let Some(s) = &o.state {
                    write!(f, ", state {s}")?;
                }
                if let Some(i) = o.name {
                    write!(f, ", name {}", i + 1)?;
                }
            }
            if !c.detail.is_empty() {
                write!(f, " ({})", c.detail)?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

/// Largest admissible finite-difference slope of a coefficient.
const SLOPE_CAP: f64 = 1e8;

struct CheckBuilder {
    name: &'static str,
    offending: Option<Offending>,
    detail: String,
}

impl CheckBuilder {
    fn new(name: &'static str) -> Self {
        Self {
            name,
            offending: None,
            detail: String::new(),
        }
    }

    fn fail(&mut self, y: f64, state: Option<DefaultState>, name: Option<usize>, detail: String) {
        if self.offending.is_none() {
            self.offending = Some(Offending {
                y,
                state: state.map(|z| z.bitstring()),
                name,
            });
            self.detail = detail;
        }
    }

    fn finish(self) -> AssumptionCheck {
        AssumptionCheck {
            name: self.name,
            passed: self.offending.is_none(),
            offending: self.offending,
            detail: self.detail,
        }
    }
}

/// Checks the standing assumptions on the grid nodes.
///
/// Failures are reported, never thrown; structural errors (wrong dimensions)
/// are reported under `structure` and skip the grid checks.
pub fn validate_spec(spec: &ModelSpec, grid: &GridSpec) -> ValidationReport {
    let mut report = ValidationReport::default();
    let mut structure = CheckBuilder::new("structure");
    if let Err(e) = spec.check() {
        structure.fail(f64::NAN, None, None, e.to_string());
        report.checks.push(structure.finish());
        return report;
    }
    let (lo, hi) = spec.factor.domain;
    if let Err(e) = grid.check() {
        structure.fail(f64::NAN, None, None, e.to_string());
    } else if grid.y_lo < lo || grid.y_hi > hi {
        structure.fail(
            grid.y_lo,
            None,
            None,
            format!("grid [{}, {}] leaves the domain ({lo}, {hi})", grid.y_lo, grid.y_hi),
        );
    }
    report.checks.push(structure.finish());
    if !report.all_passed() {
        return report;
    }

    let mut dim = CheckBuilder::new("factor_dim");
    if spec.factor.dim != 1 {
        dim.fail(f64::NAN, None, None, format!("grid solver needs m = 1, got {}", spec.factor.dim));
    }
    report.checks.push(dim.finish());

    let ys = grid.y_nodes();
    let n = spec.n();
    let states = DefaultState::all(n).expect("checked");

    let mut a1 = CheckBuilder::new("A1");
    let mut a2_factor = CheckBuilder::new("A2_factor");
    let mut a2_lambda = CheckBuilder::new("A2_intensity");
    let mut inv = CheckBuilder::new("sigma_inverse");
    let mut a3 = CheckBuilder::new("A3");
    let mut zero_intensity = 0usize;

    for (j, &y) in ys.iter().enumerate() {
        let mu0 = spec.mu0(y);
        let s0 = spec.sigma0(y);
        if !mu0.is_finite() || s0.iter().any(|v| !v.is_finite()) {
            a1.fail(y, None, None, "factor coefficients not finite".into());
        }
        if j > 0 {
            let yp = ys[j - 1];
            let dy = y - yp;
            let slope = ((mu0 - spec.mu0(yp)) / dy).abs();
            let vslope = s0
                .iter()
                .zip(spec.sigma0(yp))
                .map(|(a, b)| ((a - b) / dy).abs())
                .fold(0.0, f64::max);
            if !(slope < SLOPE_CAP) || !(vslope < SLOPE_CAP) {
                a2_factor.fail(y, None, None, "factor coefficient slope unbounded".into());
            }
            for z in &states {
                for i in z.alive_names() {
                    let d = (spec.lambda(i, y, *z) - spec.lambda(i, yp, *z)) / dy;
                    if !(d.abs() < SLOPE_CAP) {
                        a2_lambda.fail(y, Some(*z), Some(i), "intensity slope unbounded".into());
                    }
                }
            }
        }
        for z in &states {
            for i in z.alive_names() {
                let l = spec.lambda(i, y, *z);
                if !l.is_finite() || l < 0.0 {
                    a2_lambda.fail(y, Some(*z), Some(i), format!("lambda = {l}"));
                } else if l == 0.0 {
                    zero_intensity += 1;
                }
            }
        }

        let sigma = spec.sigma_at(y);
        let sv = sigma.clone().singular_values();
        let smax = sv.max();
        let smin = sv.min();
        if !(smin > 0.0) || !(smax / smin < SIGMA_CONDITION_CAP) {
            inv.fail(y, None, None, format!("condition number {:e}", smax / smin));
            continue;
        }
        let Some(sigma_inv) = sigma.clone().try_inverse() else {
            inv.fail(y, None, None, "inversion failed".into());
            continue;
        };
        let excess = nalgebra::DVector::from_iterator(
            n,
            spec.market.mu.iter().map(|m| m - spec.market.r),
        );
        let xi = &sigma_inv * &excess;
        for z in &states {
            if let Some((i, detail)) = a3_candidates_fail(spec, &sigma, &xi, y, *z) {
                a3.fail(y, Some(*z), Some(i), detail);
            }
        }
    }

    report.checks.extend([a1.finish(), a2_factor.finish(), a2_lambda.finish(), inv.finish(), a3.finish()]);
    if zero_intensity > 0 {
        report.checks.push(AssumptionCheck {
            name: "zero_intensity",
            passed: true,
            offending: None,
            detail: format!("{zero_intensity} alive (node, state, name) triples have lambda = 0 (name not defaultable there)"),
        });
    }
    report
}

/// Candidate family for the constraint `sigma (xi - theta) = diag((1-z) lambda) h`:
/// `theta = xi` (h = 0) and `theta = 0` (h = sigma xi / lambda). Returns the
/// first offending name if no candidate yields a bounded `h > -1 + eps`.
fn a3_candidates_fail(
    spec: &ModelSpec,
    sigma: &DMatrix<f64>,
    xi: &nalgebra::DVector<f64>,
    y: f64,
    z: DefaultState,
) -> Option<(usize, String)> {
    let n = spec.n();
    let admissible = |h: &[f64]| h.iter().all(|&v| v.is_finite() && v > -1.0 + JUMP_EPS);
    let zero = vec![0.0; n];
    if admissible(&zero) {
        return None;
    }
    let sx = sigma * xi;
    let mut h = vec![0.0; n];
    for i in z.alive_names() {
        let l = spec.lambda(i, y, z);
        h[i] = if l > 0.0 { sx[i] / l } else { f64::NAN };
    }
    if admissible(&h) {
        return None;
    }
    let i = (0..n).find(|&i| !(h[i] > -1.0 + JUMP_EPS)).unwrap_or(0);
    Some((i, "no candidate theta gives h > -1 + eps".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn grid101() -> GridSpec {
        GridSpec::new(-1.0, 1.0, 101, 10)
    }

    #[test]
    fn benchmark_intensity_at_origin() {
        let spec = load_preset("benchmark_s5").unwrap();
        let z = DefaultState::all_alive(2).unwrap();
        assert_relative_eq!(spec.lambda(0, 0.0, z), 1.0, epsilon = 1e-15);
        assert_relative_eq!(spec.lambda(1, 0.0, z), 0.8, epsilon = 1e-15);
        assert_relative_eq!(spec.q(), -4.0, epsilon = 1e-12);
        assert_relative_eq!(spec.beta(), 5.0, epsilon = 1e-12);
    }

    #[test]
    fn benchmark_passes_validation() {
        let spec = load_preset("benchmark_s5").unwrap();
        let report = validate_spec(&spec, &grid101());
        assert!(report.all_passed(), "{report}");
    }

    #[test]
    fn every_preset_loads_and_validates() {
        for p in Preset::ALL {
            let spec = load_preset(p.id()).unwrap();
            let report = validate_spec(&spec, &grid101());
            assert!(report.all_passed(), "{}: {report}", p.id());
        }
        assert!(matches!(load_preset("nope"), Err(Error::UnknownPreset(_))));
    }

    #[test]
    fn merton_preset_has_zero_intensity_and_constant_sigma() {
        let spec = load_preset("merton_nodefault").unwrap();
        assert!(spec.credit.intensity.iter().flatten().all(Curve::is_zero));
        assert_eq!(spec.sigma_at(-0.7), spec.sigma_at(0.4));
    }

    #[test]
    fn scott_volatility_shape() {
        let spec = load_preset("scott_example22").unwrap();
        let y: f64 = 0.4;
        assert_relative_eq!(
            spec.sigma_at(y)[(0, 0)],
            (0.04 + (0.5 * y).exp()).sqrt(),
            epsilon = 1e-15
        );
    }

    #[test]
    fn negative_intensity_is_reported_at_lower_end() {
        let mut spec = load_preset("benchmark_s5").unwrap();
        // Negative on the lower part of the grid, first seen at y = -1.
        spec.credit.intensity[0][0] = Curve::ExpAffine { a: 0.6, b: -0.7, c: -2.0 };
        let report = validate_spec(&spec, &grid101());
        let a2 = report.check("A2_intensity").unwrap();
        assert!(!a2.passed);
        let off = a2.offending.as_ref().unwrap();
        assert_relative_eq!(off.y, -1.0);
        assert_eq!(off.state.as_deref(), Some("00"));
        assert_eq!(off.name, Some(0));
    }

    #[test]
    fn singular_sigma_is_reported() {
        let mut spec = load_preset("benchmark_s5").unwrap();
        spec.market.sigma = vec![
            vec![Curve::constant(0.8), Curve::constant(0.8)],
            vec![Curve::constant(0.8), Curve::constant(0.8)],
        ];
        let report = validate_spec(&spec, &grid101());
        assert!(!report.check("sigma_inverse").unwrap().passed);
    }

    #[test]
    fn validation_is_deterministic() {
        let spec = load_preset("stein_stein_example22").unwrap();
        assert_eq!(validate_spec(&spec, &grid101()), validate_spec(&spec, &grid101()));
    }

    #[test]
    fn benchmark_contagion_raises_intensities() {
        let spec = load_preset("benchmark_s5").unwrap();
        let z = DefaultState::all_alive(2).unwrap();
        for y in grid101().y_nodes() {
            for i in 0..2 {
                let j = 1 - i;
                assert!(spec.lambda(i, y, z.with_default(j)) >= spec.lambda(i, y, z));
            }
        }
    }

    #[test]
    fn structural_errors() {
        let mut spec = load_preset("benchmark_s5").unwrap();
        spec.factor.rho = 1.0;
        assert!(spec.check().is_err());
        let mut spec = load_preset("benchmark_s5").unwrap();
        spec.preferences.p = 0.0;
        assert!(spec.check().is_err());
        let mut spec = load_preset("benchmark_s5").unwrap();
        spec.factor.dim = 2;
        let report = validate_spec(&spec, &grid101());
        assert!(!report.check("factor_dim").unwrap().passed);
    }

    #[test]
    fn table_curve_interpolates_linearly() {
        let c = Curve::Table {
            y: vec![-1.0, 0.0, 1.0],
            values: vec![1.0, 2.0, 4.0],
        };
        assert_relative_eq!(c.eval(0.5), 3.0);
        assert_relative_eq!(c.eval(-3.0), 1.0);
        assert_relative_eq!(c.eval(3.0), 4.0);
    }

    #[test]
    fn toml_round_trip() {
        let spec = load_preset("scott_example22").unwrap();
        let text = toml::to_string(&spec).unwrap();
        let back: ModelSpec = toml::from_str(&text).unwrap();
        assert_eq!(spec, back);
    }
}
