//! The five commands. Each returns `Ok` or a [`Failure`] that carries its
//! exit code.

use crate::config::{RunConfig, SweepMode};
use contagion_core::io::{self, SweepRow};
use contagion_core::oracle::{all_defaulted_closed_form, merton_fraction, picard_fixed_point};
use contagion_core::pde::solve_with;
use contagion_core::sim::{
    check_g_martingale, compensator_check, duality_gap, fk_tables, mc_feynman_kac_with, simulate_market,
    simulate_wealth, Controls, FeedbackPolicy, McReport, SimConfig, SolutionPolicy,
};
use contagion_core::{validate_spec, DefaultState, Error, Execution, ModelSpec, SystemSolution};
use std::path::Path;

#[derive(Debug)]
pub enum Failure {
    Validation(String),
    Solver(String),
    Statistical(String),
    Io(String),
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Failure::Io(_) => 1,
            Failure::Validation(_) => 2,
            Failure::Solver(_) => 3,
            Failure::Statistical(_) => 4,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            Failure::Validation(m) | Failure::Solver(m) | Failure::Statistical(m) | Failure::Io(m) => m,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::IndexOutOfRange { .. }
            | Error::InvalidSpec(_)
            | Error::InvalidGrid(_)
            | Error::UnknownPreset(_)
            | Error::SingularVolatility { .. }
            | Error::Domain(_)
            | Error::MissingState(_)
            | Error::Config(_) => Failure::Validation(msg),
            Error::HhatNonConvergence { .. }
            | Error::Tridiagonal { .. }
            | Error::BoundViolation { .. }
            | Error::FixedPoint(_)
            | Error::Consistency(_) => Failure::Solver(msg),
            Error::Io(_) | Error::Csv(_) => Failure::Io(msg),
        }
    }
}

type Outcome = Result<(), Failure>;

fn validated(spec: &ModelSpec, cfg: &RunConfig) -> Outcome {
    let report = validate_spec(spec, &cfg.grid);
    if report.all_passed() {
        return Ok(());
    }
    let lines: Vec<String> = report
        .failures()
        .map(|c| format!("{}: {}", c.name, c.detail))
        .collect();
    Err(Failure::Validation(format!(
        "model `{}` fails validation:\n{}",
        cfg.model_source,
        lines.join("\n")
    )))
}

fn solve(spec: &ModelSpec, cfg: &RunConfig, exec: Execution) -> Result<SystemSolution, Failure> {
    validated(spec, cfg)?;
    Ok(solve_with(spec, &cfg.grid, exec)?)
}

pub fn validate(cfg: &RunConfig) -> Outcome {
    let report = validate_spec(&cfg.model, &cfg.grid);
    print!("{report}");
    validated(&cfg.model, cfg)
}

pub fn solve_cmd(cfg: &RunConfig, exec: Execution) -> Outcome {
    let sol = solve(&cfg.model, cfg, exec)?;
    let files = io::write_solution(&cfg.output_dir, &sol)?;
    for s in &sol.report.states {
        println!(
            "state {}: f in [{:.6}, {:.6}], foc residual {:.2e}, clamp hits {}",
            s.state, s.min_f, s.max_f, s.max_identity_residual, s.clamp_hits
        );
    }
    if sol.report.clamped_pass {
        println!("truncation clamp was active; see solve_report.csv");
    }
    println!("wrote {} files to {}", files.len(), cfg.output_dir.display());
    Ok(())
}

pub fn simulate(cfg: &RunConfig, from: Option<&Path>, exec: Execution) -> Outcome {
    let sol = match from {
        Some(dir) => io::read_solution(dir, exec)?,
        None => solve(&cfg.model, cfg, exec)?,
    };
    let spec = &sol.spec;
    let mc = &cfg.mc;
    let horizon = spec.horizon();
    let steps = ((mc.n_steps as f64) * horizon).round().max(1.0) as usize;
    let sim = SimConfig::new(mc.n_paths, steps, mc.seed).with_exec(exec);
    let fk_sim = SimConfig::new(mc.n_paths, mc.n_steps, mc.seed).with_exec(exec);
    let z0 = DefaultState::all_alive(spec.n())?;
    let policy = SolutionPolicy::new(&sol);

    let mut rows: Vec<McReport> = Vec::new();
    rows.extend(check_g_martingale(&sol, &policy, &sim, mc.y0, z0, &mc.g_probes)?);
    for field in &sol.fields {
        let tables = fk_tables(&sol, field.state)?;
        for &(tau, y) in &mc.fk_probes {
            rows.push(mc_feynman_kac_with(&sol, &tables, tau, y, &fk_sim)?);
        }
    }
    let duality = duality_gap(&sol, &policy, &sim, mc.x0, mc.y0, z0)?;
    println!(
        "duality diagnostics: log correlation {:.6}, max log gap {:.3e}, ruined {}, reflected fraction {:.3e}",
        duality.log_correlation, duality.max_log_gap, duality.ruined, duality.reflection_fraction
    );
    rows.push(duality.report);
    rows.extend(compensator_check(spec, &sim, mc.y0, z0, &mc.g_probes)?);
    for r in &rows {
        println!("{r}");
    }
    let path = cfg.output_dir.join("mc_report.csv");
    io::write_mc_report(&path, &rows)?;
    if mc.dump_paths > 0 {
        let small = SimConfig::new(mc.dump_paths.max(2), steps, mc.seed).with_exec(exec);
        let bundle = simulate_market(spec, &small, mc.y0, z0)?;
        simulate_wealth(&bundle, spec, &policy, mc.x0)?;
        io::write_paths(&cfg.output_dir.join("paths.csv"), &bundle, mc.dump_paths)?;
    }
    let failed: Vec<&str> = rows.iter().filter(|r| !r.pass).map(|r| r.name.as_str()).collect();
    println!("wrote {}", path.display());
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Statistical(format!(
            "{} of {} tests failed: {}",
            failed.len(),
            rows.len(),
            failed.join(", ")
        )))
    }
}

/// Every alive name's fraction at calendar time `t` on the grid nodes in
/// `[y_lo, y_hi]`.
fn fractions(sol: &SystemSolution, axis_value: f64, t: f64, y_lo: f64, y_hi: f64, rows: &mut Vec<SweepRow>) {
    let n = sol.n();
    let policy = SolutionPolicy::new(sol);
    let mut c = Controls::zeros(n);
    let ys: Vec<f64> = sol
        .grid
        .y_nodes()
        .into_iter()
        .filter(|y| (y_lo - 1e-12..=y_hi + 1e-12).contains(y))
        .collect();
    for field in &sol.fields {
        let z = field.state;
        for &y in &ys {
            policy.controls(t, y, z, &mut c);
            for i in z.alive_names() {
                rows.push(SweepRow {
                    axis_value,
                    y,
                    state: z,
                    name: i + 1,
                    pi_hat: c.pi[i],
                });
            }
        }
    }
}

pub fn sweep(cfg: &RunConfig, exec: Execution) -> Outcome {
    let sw = cfg.sweep.as_ref().ok_or_else(|| Failure::Validation("no sweep configured".into()))?;
    if sw.values.is_empty() {
        return Err(Failure::Validation(format!(
            "sweep {} has an empty axis; give values with --set sweep.values=[...]",
            sw.mode.id()
        )));
    }
    if !(sw.y_lo <= sw.y_hi) {
        return Err(Failure::Validation(format!("empty y-range [{}, {}]", sw.y_lo, sw.y_hi)));
    }
    let horizon = cfg.model.horizon();
    let mut rows = Vec::new();
    match sw.mode {
        SweepMode::Fig1 => {
            if let Some(t) = sw.values.iter().find(|t| !(0.0..=horizon).contains(*t)) {
                return Err(Failure::Validation(format!("t = {t} is outside [0, {horizon}]")));
            }
            let sol = solve(&cfg.model.with_p(0.8), cfg, exec)?;
            for &t in &sw.values {
                fractions(&sol, t, t, sw.y_lo, sw.y_hi, &mut rows);
            }
        }
        SweepMode::Fig2 => {
            for &p in &sw.values {
                let sol = solve(&cfg.model.with_p(p), cfg, exec)?;
                fractions(&sol, p, 0.6f64.min(horizon), sw.y_lo, sw.y_hi, &mut rows);
            }
        }
        SweepMode::Fig3 => {
            for &s in &sw.values {
                let sol = solve(&cfg.model.with_p(0.1).with_sigma_scale(s), cfg, exec)?;
                fractions(&sol, s, 0.0, sw.y_lo, sw.y_hi, &mut rows);
            }
        }
    }
    let path = cfg.output_dir.join(format!("sweep_{}.csv", sw.mode.id()));
    io::write_sweep(&path, &rows)?;
    println!("wrote {} rows to {}", rows.len(), path.display());
    Ok(())
}

pub fn oracle(cfg: &RunConfig) -> Outcome {
    let spec = &cfg.model;
    let samples = cfg.oracle_samples;
    let mut w = csv_writer(&cfg.output_dir.join("oracle.csv"))?;
    let row = |w: &mut csv::Writer<std::fs::File>, what: &str, tau: Option<f64>, y: Option<f64>, v: f64| {
        let opt = |x: Option<f64>| x.map(io::fmt_f64).unwrap_or_default();
        w.write_record([what.to_string(), opt(tau), opt(y), io::fmt_f64(v)])
            .map_err(|e| Failure::Io(e.to_string()))
    };
    row_header(&mut w)?;

    let horizon = spec.horizon();
    let ys = [cfg.grid.y_lo, 0.5 * (cfg.grid.y_lo + cfg.grid.y_hi), cfg.grid.y_hi];
    for k in 0..samples {
        let tau = horizon * k as f64 / (samples - 1) as f64;
        for y in ys {
            row(&mut w, "all_defaulted_f", Some(tau), Some(y), all_defaulted_closed_form(tau, y, spec)?)?;
        }
    }
    let y_mid = ys[1];
    let sigma = spec.sigma_at(y_mid);
    for i in 0..spec.n() {
        let v = merton_fraction(spec.market.mu[i], spec.market.r, sigma[(i, i)], spec.preferences.p);
        row(&mut w, &format!("merton_fraction_{}", i + 1), None, Some(y_mid), v)?;
    }

    let m = cfg.oracle;
    m.check()?;
    let pic = picard_fixed_point(&m)?;
    for k in 0..samples {
        let tau = m.horizon * k as f64 / (samples - 1) as f64;
        row(&mut w, "picard_x", Some(tau), None, pic.x_at(tau))?;
        row(&mut w, "picard_h", Some(tau), None, pic.h_at(tau))?;
        row(&mut w, "picard_f_alive", Some(tau), None, pic.f_alive(tau))?;
        row(&mut w, "picard_f_defaulted", Some(tau), None, pic.f_defaulted(tau))?;
        row(&mut w, "picard_fraction", Some(tau), None, pic.fraction(tau))?;
        row(&mut w, "picard_residual", Some(tau), None, pic.residual(tau))?;
    }
    w.flush().map_err(|e| Failure::Io(e.to_string()))?;
    println!(
        "fixed point: {} iterations, contraction {:.3e}, max residual {:.3e}",
        pic.iterations,
        pic.contraction,
        pic.max_residual(1001)
    );
    println!("all-defaulted f(T, {y_mid}) = {:.12}", all_defaulted_closed_form(horizon, y_mid, spec)?);
    println!("wrote {}", cfg.output_dir.join("oracle.csv").display());
    Ok(())
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>, Failure> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Failure::Io(e.to_string()))?;
    }
    csv::Writer::from_path(path).map_err(|e| Failure::Io(e.to_string()))
}

fn row_header(w: &mut csv::Writer<std::fs::File>) -> Outcome {
    w.write_record(["quantity", "tau", "y", "value"])
        .map_err(|e| Failure::Io(e.to_string()))
}
