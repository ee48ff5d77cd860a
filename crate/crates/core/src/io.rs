//! CSV and TOML artifacts.
//!
//! Every CSV starts with a header row and keeps a fixed column order. Floats
//! are written with 17 significant digits, so reading a file back gives the
//! same bits.
//!
//! A solve directory holds:
//!
//! | file | columns |
//! |---|---|
//! | `f_state_<bits>.csv` | `t, y, f, g, df_dy`, with `t` the time to maturity, rows by `t` then `y` |
//! | `policy_state_<bits>.csv` | `t, y, hhat_1..n, ahat_1..n, pi_1..n, c_mult`, with `t` calendar time |
//! | `bounds.csv` | truncation bounds per state |
//! | `solve_report.csv` | solver diagnostics per state |
//! | `model.toml`, `grid.toml` | the inputs, so [`read_solution`] can rebuild the run |

use crate::exec::Execution;
use crate::lattice::DefaultState;
use crate::model::ModelSpec;
use crate::pde::{rebuild_with, GridSpec, SystemSolution};
use crate::sim::{McReport, PathBundle};
use crate::{Error, Result};
use std::fs;
use std::path::{Path, PathBuf};

pub const MODEL_FILE: &str = "model.toml";
pub const GRID_FILE: &str = "grid.toml";

/// 17 significant digits.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn f_file(z: DefaultState) -> String {
    format!("f_state_{}.csv", z.bitstring())
}

pub fn policy_file(z: DefaultState) -> String {
    format!("policy_state_{}.csv", z.bitstring())
}

fn writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    Ok(csv::Writer::from_path(path)?)
}

/// Writes the full solve output into `dir` and returns the files written.
pub fn write_solution(dir: &Path, sol: &SystemSolution) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut out = Vec::new();
    for field in &sol.fields {
        let path = dir.join(f_file(field.state));
        write_field(&path, sol, field.state)?;
        out.push(path);
    }
    for pf in &sol.policies {
        let path = dir.join(policy_file(pf.state));
        write_policy(&path, sol, pf.state)?;
        out.push(path);
    }
    let path = dir.join("bounds.csv");
    write_bounds(&path, sol)?;
    out.push(path);
    let path = dir.join("solve_report.csv");
    write_solve_report(&path, sol)?;
    out.push(path);
    for (name, text) in [
        (MODEL_FILE, toml_text(&sol.spec)?),
        (GRID_FILE, toml_text(&sol.grid)?),
    ] {
        let path = dir.join(name);
        fs::write(&path, text)?;
        out.push(path);
    }
    Ok(out)
}

fn toml_text<T: serde::Serialize>(value: &T) -> Result<String> {
    toml::to_string(value).map_err(|e| Error::Config(e.to_string()))
}

pub fn write_field(path: &Path, sol: &SystemSolution, z: DefaultState) -> Result<()> {
    let field = sol.field(z).ok_or_else(|| Error::MissingState(z.bitstring()))?;
    let beta = sol.spec.beta();
    let ys = sol.grid.y_nodes();
    let mut w = writer(path)?;
    w.write_record(["t", "y", "f", "g", "df_dy"])?;
    for k in 0..=sol.grid.n_t {
        let tau = sol.grid.tau(k, sol.spec.horizon());
        for (j, y) in ys.iter().enumerate() {
            let f = field.at(k, j);
            w.write_record([
                fmt_f64(tau),
                fmt_f64(*y),
                fmt_f64(f),
                fmt_f64(f.powf(beta)),
                fmt_f64(field.df_at(k, j)),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_policy(path: &Path, sol: &SystemSolution, z: DefaultState) -> Result<()> {
    let pf = sol.policy(z);
    let n = pf.n;
    let horizon = sol.spec.horizon();
    let ys = sol.grid.y_nodes();
    let mut header = vec!["t".to_string(), "y".to_string()];
    for prefix in ["hhat", "ahat", "pi"] {
        header.extend((1..=n).map(|i| format!("{prefix}_{i}")));
    }
    header.push("c_mult".into());
    let mut w = writer(path)?;
    w.write_record(&header)?;
    // Calendar time ascending, so maturity descending.
    for k in (0..=sol.grid.n_t).rev() {
        let t = horizon - sol.grid.tau(k, horizon);
        for (j, y) in ys.iter().enumerate() {
            let node = k * pf.n_y + j;
            let mut row = vec![fmt_f64(t), fmt_f64(*y)];
            for values in [&pf.hhat, &pf.ahat, &pf.pi] {
                row.extend(values[node * n..(node + 1) * n].iter().map(|v| fmt_f64(*v)));
            }
            row.push(fmt_f64(pf.c_mult[node]));
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_bounds(path: &Path, sol: &SystemSolution) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record([
        "state",
        "k_under",
        "k_bar_tau0",
        "k_bar_horizon",
        "phi_lower",
        "phi_upper",
        "source_sup",
    ])?;
    for b in &sol.bounds {
        w.write_record([
            b.state.bitstring(),
            fmt_f64(b.k_under),
            fmt_f64(b.k_bar(0.0)),
            fmt_f64(b.k_bar(b.horizon)),
            fmt_f64(b.phi.lower),
            fmt_f64(b.phi.upper),
            fmt_f64(b.source_sup),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_solve_report(path: &Path, sol: &SystemSolution) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record([
        "state",
        "max_identity_residual",
        "max_consistency_residual",
        "max_newton_iterations",
        "max_sweeps",
        "capped_steps",
        "clamp_hits",
        "clamped_pass",
        "lower_margin",
        "upper_margin",
        "discrete_residual",
        "min_f",
        "max_f",
        "max_abs_df",
    ])?;
    for s in &sol.report.states {
        w.write_record([
            s.state.bitstring(),
            fmt_f64(s.max_identity_residual),
            fmt_f64(s.max_consistency_residual),
            s.max_newton_iterations.to_string(),
            s.max_sweeps.to_string(),
            s.capped_steps.to_string(),
            s.clamp_hits.to_string(),
            sol.report.clamped_pass.to_string(),
            fmt_f64(s.lower_margin),
            fmt_f64(s.upper_margin),
            fmt_f64(s.discrete_residual),
            fmt_f64(s.min_f),
            fmt_f64(s.max_f),
            fmt_f64(s.max_abs_df),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Timing is left out so the file depends only on the inputs and the seed.
pub fn write_mc_report(path: &Path, reports: &[McReport]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["test", "estimate", "target", "se", "pass"])?;
    for r in reports {
        w.write_record([
            r.name.clone(),
            fmt_f64(r.estimate),
            fmt_f64(r.target),
            fmt_f64(r.se),
            r.pass.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// One optimal fraction in a figure-style sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub axis_value: f64,
    pub y: f64,
    pub state: DefaultState,
    /// 1-based name.
    pub name: usize,
    pub pi_hat: f64,
}

pub fn write_sweep(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["axis_value", "y", "state", "name", "pi_hat"])?;
    for r in rows {
        w.write_record([
            fmt_f64(r.axis_value),
            fmt_f64(r.y),
            r.state.bitstring(),
            r.name.to_string(),
            fmt_f64(r.pi_hat),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Writes at most `max_paths` trajectories; wealth, consumption and density
/// columns are empty where the bundle has none.
pub fn write_paths(path: &Path, bundle: &PathBundle, max_paths: usize) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["path", "t", "Y", "H_bits", "X", "c", "Gamma"])?;
    let n = bundle.n;
    let opt = |v: &[f64], i: usize| v.get(i).map(|x| fmt_f64(*x)).unwrap_or_default();
    for p in bundle.paths.iter().take(max_paths) {
        for (i, t) in bundle.times.iter().enumerate() {
            let bits = DefaultState::new(p.h[i], n)?.bitstring();
            w.write_record([
                p.index.to_string(),
                fmt_f64(*t),
                fmt_f64(p.y[i]),
                bits,
                opt(&p.wealth, i),
                opt(&p.consumption, i),
                opt(&p.density, i),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads the `f` column of one state file, checking its `(t, y)` layout
/// against the grid.
pub fn read_field(path: &Path, grid: &GridSpec, horizon: f64) -> Result<Vec<f64>> {
    let mut r = csv::Reader::from_path(path)?;
    let headers = r.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Config(format!("{}: missing column `{name}`", path.display())))
    };
    let (ct, cy, cf) = (col("t")?, col("y")?, col("f")?);
    let ys = grid.y_nodes();
    let len = (grid.n_t + 1) * grid.n_y;
    let mut f = Vec::with_capacity(len);
    for (row, rec) in r.records().enumerate() {
        let rec = rec?;
        let num = |c: usize| -> Result<f64> {
            rec.get(c).unwrap_or("").trim().parse::<f64>().map_err(|e| {
                Error::Config(format!("{} row {}: {e}", path.display(), row + 2))
            })
        };
        if row >= len {
            return Err(Error::Config(format!(
                "{}: more than the {len} rows of the grid",
                path.display()
            )));
        }
        let (k, j) = (row / grid.n_y, row % grid.n_y);
        let (t, y) = (num(ct)?, num(cy)?);
        let scale = 1e-9 * (1.0 + horizon.abs() + grid.y_hi.abs().max(grid.y_lo.abs()));
        if (t - grid.tau(k, horizon)).abs() > scale || (y - ys[j]).abs() > scale {
            return Err(Error::Config(format!(
                "{} row {}: node ({t}, {y}) is off the grid",
                path.display(),
                row + 2
            )));
        }
        f.push(num(cf)?);
    }
    if f.len() != len {
        return Err(Error::Config(format!(
            "{}: {} rows, grid needs {len}",
            path.display(),
            f.len()
        )));
    }
    Ok(f)
}

/// Loads `model.toml`, `grid.toml` and every `f_state_*.csv` from a solve
/// directory and rebuilds the solution from the stored values.
pub fn read_solution(dir: &Path, exec: Execution) -> Result<SystemSolution> {
    let read = |name: &str| -> Result<String> {
        fs::read_to_string(dir.join(name))
            .map_err(|e| Error::Config(format!("{}: {e}", dir.join(name).display())))
    };
    let spec: ModelSpec = toml::from_str(&read(MODEL_FILE)?).map_err(|e| Error::Config(e.to_string()))?;
    let grid: GridSpec = toml::from_str(&read(GRID_FILE)?).map_err(|e| Error::Config(e.to_string()))?;
    spec.check()?;
    grid.check()?;
    let n = spec.n();
    let values = (0..1u32 << n)
        .map(|bits| {
            let z = DefaultState::new(bits, n)?;
            let path = dir.join(f_file(z));
            if !path.exists() {
                return Err(Error::MissingState(format!("{} ({})", z.bitstring(), path.display())));
            }
            read_field(&path, &grid, spec.horizon())
        })
        .collect::<Result<Vec<_>>>()?;
    rebuild_with(&spec, &grid, values, exec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::load_preset;
    use crate::sim::Sided;
    use std::time::Duration;

    #[test]
    fn floats_round_trip() {
        for x in [0.1, 1.0 / 3.0, -2.5e-300, 6.02214076e23, f64::MIN_POSITIVE] {
            assert_eq!(fmt_f64(x).parse::<f64>().unwrap(), x);
        }
    }

    #[test]
    fn solution_round_trips_through_disk() {
        let spec = load_preset("benchmark_s5").unwrap();
        let grid = GridSpec::new(-1.0, 1.0, 21, 20);
        let sol = crate::pde::solve_recursive_system(&spec, &grid).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let files = write_solution(dir.path(), &sol).unwrap();
        assert_eq!(files.len(), 4 + 4 + 2 + 2);
        let back = read_solution(dir.path(), Execution::Sequential).unwrap();
        assert_eq!(back.spec, sol.spec);
        assert_eq!(back.grid, sol.grid);
        for (a, b) in back.fields.iter().zip(&sol.fields) {
            assert_eq!(a.f, b.f);
        }
        for (a, b) in back.policies.iter().zip(&sol.policies) {
            assert_eq!(a.pi, b.pi);
        }
    }

    #[test]
    fn off_grid_rows_are_rejected() {
        let spec = load_preset("benchmark_s5").unwrap();
        let grid = GridSpec::new(-1.0, 1.0, 5, 4);
        let sol = crate::pde::solve_recursive_system(&spec, &grid).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.csv");
        write_field(&path, &sol, DefaultState::all_alive(2).unwrap()).unwrap();
        let other = GridSpec::new(-1.0, 1.0, 6, 4);
        assert!(read_field(&path, &other, 1.0).is_err());
        assert_eq!(read_field(&path, &grid, 1.0).unwrap(), sol.fields[0].f);
    }

    #[test]
    fn report_has_fixed_columns() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mc.csv");
        let r = McReport::from_parts("x", 1.0, 0.1, 10, 1.0, Sided::Two, Duration::from_secs(3));
        write_mc_report(&path, &[r]).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(
            text,
            "test,estimate,target,se,pass\nx,1.0000000000000000e0,1.0000000000000000e0,1.0000000000000001e-1,true\n"
        );
    }
}
