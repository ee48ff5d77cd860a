//! Run configuration.
//!
//! A config file is TOML with one table per block. Every key is optional;
//! missing keys take the defaults shown.
//!
//! ```toml
//! [model]
//! preset = "benchmark_s5"   # or: file = "model.toml" (a full model, as written by `solve`)
//! # Any other key overrides the chosen model, with the layout of model.toml:
//! # market.r = 0.25                              (per year)
//! # preferences.p = 0.8                          (risk aversion, dimensionless)
//!
//! [grid]
//! y_lo = -1.0               # factor units
//! y_hi = 1.0
//! n_y = 401                 # nodes
//! n_t = 400                 # time steps over the horizon
//! clamp_enabled = true
//! inner_sweeps = 5
//! inner_tol = 1e-8          # relative
//!
//! [mc]
//! n_paths = 100000
//! n_steps = 400             # time steps per year
//! seed = 42
//! x0 = 1.0                  # initial wealth, currency units
//! y0 = 0.0                  # initial factor value
//! g_probes = [0.25, 0.5, 1.0]          # calendar times, years
//! fk_probes = [[1.0, 0.0], [1.0, -0.5], [1.0, 0.5], [0.5, 0.25], [0.25, -0.25]]  # [tau (years), y]
//! dump_paths = 0            # trajectories written to paths.csv
//!
//! [sweep]
//! mode = "fig1"             # fig1: t axis (years), fig2: p axis, fig3: sigma scale
//! values = [0.0, 0.3, 0.6]  # default depends on the mode
//! y_lo = -1.0               # y-range written, factor units
//! y_hi = 1.0
//!
//! [oracle]                  # single-name model for the fixed-point oracle
//! lambda0 = 0.5             # per year
//! sigma = 0.8               # per sqrt(year)
//! xi = 0.25                 # market price of risk
//! r = 0.1                   # per year
//! q = -1.0
//! k1 = 1.0
//! k2 = 1.0
//! horizon = 1.0             # years
//! samples = 11              # maturities reported
//!
//! [output]
//! dir = "out"
//! ```
//!
//! `--set key=value` applies one dotted override on top of the file, e.g.
//! `--set grid.n_y=201` or `--set model.market.mu.0=0.25` (array entries by
//! index). The dedicated flags (`--ny`, `--seed`, ...) are applied last.

use contagion_core::oracle::ScalarModel;
use contagion_core::{load_preset, GridSpec, ModelSpec};
use serde::Deserialize;
use std::path::PathBuf;
use toml::{Table, Value};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Solve,
    Simulate,
    Sweep,
    Oracle,
    Validate,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepMode {
    Fig1,
    Fig2,
    Fig3,
}

impl SweepMode {
    pub fn id(self) -> &'static str {
        match self {
            Self::Fig1 => "fig1",
            Self::Fig2 => "fig2",
            Self::Fig3 => "fig3",
        }
    }

    pub fn default_values(self) -> Vec<f64> {
        match self {
            Self::Fig1 => vec![0.0, 0.3, 0.6],
            Self::Fig2 => vec![0.1, 0.5, 0.8],
            Self::Fig3 => vec![1.0, 1.25, 1.5],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct McConfig {
    pub n_paths: usize,
    pub n_steps: usize,
    pub seed: u64,
    pub x0: f64,
    pub y0: f64,
    pub g_probes: Vec<f64>,
    pub fk_probes: Vec<(f64, f64)>,
    pub dump_paths: usize,
}

impl Default for McConfig {
    fn default() -> Self {
        Self {
            n_paths: 100_000,
            n_steps: 400,
            seed: 42,
            x0: 1.0,
            y0: 0.0,
            g_probes: vec![0.25, 0.5, 1.0],
            fk_probes: vec![(1.0, 0.0), (1.0, -0.5), (1.0, 0.5), (0.5, 0.25), (0.25, -0.25)],
            dump_paths: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
struct SweepTable {
    mode: Option<SweepMode>,
    values: Option<Vec<f64>>,
    y_lo: Option<f64>,
    y_hi: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepConfig {
    pub mode: SweepMode,
    pub values: Vec<f64>,
    pub y_lo: f64,
    pub y_hi: f64,
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct OracleTable {
    lambda0: f64,
    sigma: f64,
    xi: f64,
    r: f64,
    q: f64,
    k1: f64,
    k2: f64,
    horizon: f64,
    samples: usize,
}

impl Default for OracleTable {
    fn default() -> Self {
        Self {
            lambda0: 0.5,
            sigma: 0.8,
            xi: 0.25,
            r: 0.1,
            q: -1.0,
            k1: 1.0,
            k2: 1.0,
            horizon: 1.0,
            samples: 11,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub command: Command,
    pub model: ModelSpec,
    /// Preset id or model file, for messages.
    pub model_source: String,
    pub grid: GridSpec,
    pub mc: McConfig,
    pub sweep: Option<SweepConfig>,
    pub oracle: ScalarModel,
    pub oracle_samples: usize,
    pub output_dir: PathBuf,
}

/// Command-line inputs that shape the configuration.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub config: Option<PathBuf>,
    pub preset: Option<String>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub paths: Option<usize>,
    pub steps: Option<usize>,
    pub ny: Option<usize>,
    pub nt: Option<usize>,
    pub sweep: Option<String>,
    pub no_clamp: bool,
    pub set: Vec<String>,
}

/// Parses a raw override value as TOML, falling back to a bare string.
fn parse_value(raw: &str) -> Value {
    toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

/// Sets `path` (dot-separated, array entries by index) inside `root`,
/// creating tables on the way.
pub fn set_dotted(root: &mut Value, path: &str, value: Value) -> Result<(), String> {
    let parts: Vec<&str> = path.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(format!("malformed key `{path}`"));
    }
    let mut cur = root;
    for (depth, part) in parts.iter().enumerate() {
        let last = depth + 1 == parts.len();
        cur = match cur {
            Value::Table(t) => {
                if last {
                    t.insert(part.to_string(), value);
                    return Ok(());
                }
                t.entry(part.to_string()).or_insert_with(|| Value::Table(Table::new()))
            }
            Value::Array(a) => {
                let i: usize = part
                    .parse()
                    .map_err(|_| format!("`{path}`: `{part}` is not an array index"))?;
                let len = a.len();
                let slot = a
                    .get_mut(i)
                    .ok_or_else(|| format!("`{path}`: index {i} out of range (length {len})"))?;
                if last {
                    *slot = value;
                    return Ok(());
                }
                slot
            }
            _ => return Err(format!("`{path}`: `{part}` is inside a scalar")),
        };
    }
    unreachable!("loop returns on the last segment")
}

/// Recursively overlays `top` on `base`; tables merge, everything else replaces.
fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Table(b), Value::Table(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn section<T: for<'de> Deserialize<'de> + Default>(root: &Table, name: &str) -> Result<T, String> {
    match root.get(name) {
        None => Ok(T::default()),
        Some(v) => v.clone().try_into().map_err(|e| format!("[{name}]: {e}")),
    }
}

impl RunConfig {
    pub fn build(command: Command, o: &Overrides) -> Result<Self, String> {
        let mut root = match &o.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
                Value::Table(toml::from_str::<Table>(&text).map_err(|e| format!("{}: {e}", path.display()))?)
            }
            None => Value::Table(Table::new()),
        };
        let mut model_sets = Vec::new();
        for item in &o.set {
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| format!("--set expects key=value, got `{item}`"))?;
            let key = key.trim();
            match key.strip_prefix("model.") {
                Some(rest) if rest != "preset" && rest != "file" => model_sets.push((rest.to_string(), parse_value(raw.trim()))),
                _ => set_dotted(&mut root, key, parse_value(raw.trim()))?,
            }
        }
        let flags: [(&str, Option<Value>); 9] = [
            ("model.preset", o.preset.clone().map(Value::String)),
            ("output.dir", o.out.as_ref().map(|p| Value::String(p.display().to_string()))),
            ("mc.seed", o.seed.map(|v| Value::Integer(v as i64))),
            ("mc.n_paths", o.paths.map(|v| Value::Integer(v as i64))),
            ("mc.n_steps", o.steps.map(|v| Value::Integer(v as i64))),
            ("grid.n_y", o.ny.map(|v| Value::Integer(v as i64))),
            ("grid.n_t", o.nt.map(|v| Value::Integer(v as i64))),
            ("sweep.mode", o.sweep.clone().map(Value::String)),
            ("grid.clamp_enabled", o.no_clamp.then_some(Value::Boolean(false))),
        ];
        for (key, value) in flags {
            if let Some(v) = value {
                if key == "model.preset" {
                    // A preset flag wins over a model file from the config.
                    if let Some(Value::Table(m)) = root.get_mut("model") {
                        m.remove("file");
                    }
                }
                set_dotted(&mut root, key, v)?;
            }
        }
        let Value::Table(mut root) = root else {
            unreachable!("root is a table")
        };
        for key in root.keys() {
            if !["command", "model", "grid", "mc", "sweep", "oracle", "output"].contains(&key.as_str()) {
                return Err(format!("unknown config block `{key}`"));
            }
        }
        if let Some(Value::String(c)) = root.get("command") {
            if c != command.id() {
                return Err(format!("config is for `{c}`, command line asks for `{}`", command.id()));
            }
        }

        let (model, model_source) = build_model(root.remove("model"), model_sets)?;
        let grid: GridSpec = section(&root, "grid")?;
        let mc: McConfig = section(&root, "mc")?;
        let sweep = match root.get("sweep") {
            None => None,
            Some(v) => {
                let t: SweepTable = v.clone().try_into().map_err(|e| format!("[sweep]: {e}"))?;
                let mode = t.mode.ok_or("[sweep]: `mode` is required")?;
                Some(SweepConfig {
                    mode,
                    values: t.values.unwrap_or_else(|| mode.default_values()),
                    y_lo: t.y_lo.unwrap_or(grid.y_lo),
                    y_hi: t.y_hi.unwrap_or(grid.y_hi),
                })
            }
        };
        if sweep.is_some() != (command == Command::Sweep) {
            return Err(if sweep.is_some() {
                "a sweep can only be given with the `sweep` command".into()
            } else {
                "the `sweep` command needs --sweep {fig1|fig2|fig3} or a [sweep] block".into()
            });
        }
        let ot: OracleTable = section(&root, "oracle")?;
        let output_dir = match root.get("output").and_then(|o| o.get("dir")) {
            None => PathBuf::from("out"),
            Some(Value::String(s)) => PathBuf::from(s),
            Some(other) => return Err(format!("[output] dir must be a string, got {other}")),
        };
        Ok(Self {
            command,
            model,
            model_source,
            grid,
            mc,
            sweep,
            oracle: ScalarModel {
                lambda0: ot.lambda0,
                sigma: ot.sigma,
                xi: ot.xi,
                r: ot.r,
                q: ot.q,
                k1: ot.k1,
                k2: ot.k2,
                horizon: ot.horizon,
            },
            oracle_samples: ot.samples.max(2),
            output_dir,
        })
    }
}

impl Command {
    pub fn id(self) -> &'static str {
        match self {
            Command::Solve => "solve",
            Command::Simulate => "simulate",
            Command::Sweep => "sweep",
            Command::Oracle => "oracle",
            Command::Validate => "validate",
        }
    }
}

fn build_model(block: Option<Value>, sets: Vec<(String, Value)>) -> Result<(ModelSpec, String), String> {
    let mut block = match block {
        None => Table::new(),
        Some(Value::Table(t)) => t,
        Some(other) => return Err(format!("[model] must be a table, got {other}")),
    };
    let preset = block.remove("preset");
    let file = block.remove("file");
    let (mut value, source) = match (preset, file) {
        (Some(_), Some(_)) => return Err("[model]: give either `preset` or `file`, not both".into()),
        (None, Some(Value::String(path))) => {
            let text = std::fs::read_to_string(&path).map_err(|e| format!("{path}: {e}"))?;
            let t: Table = toml::from_str(&text).map_err(|e| format!("{path}: {e}"))?;
            (Value::Table(t), path)
        }
        (Some(Value::String(id)), None) => preset_value(&id)?,
        (None, None) => preset_value("benchmark_s5")?,
        _ => return Err("[model]: `preset` and `file` must be strings".into()),
    };
    merge(&mut value, Value::Table(block));
    for (key, v) in sets {
        set_dotted(&mut value, &key, v)?;
    }
    let spec: ModelSpec = value.try_into().map_err(|e| format!("[model]: {e}"))?;
    Ok((spec, source))
}

fn preset_value(id: &str) -> Result<(Value, String), String> {
    let spec = load_preset(id).map_err(|e| e.to_string())?;
    Ok((Value::try_from(&spec).map_err(|e| e.to_string())?, id.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dotted_keys_reach_tables_and_arrays() {
        let mut v = Value::Table(toml::from_str("a = { b = [1, 2] }").unwrap());
        set_dotted(&mut v, "a.b.1", Value::Integer(5)).unwrap();
        set_dotted(&mut v, "c.d", Value::Boolean(true)).unwrap();
        assert_eq!(v["a"]["b"][1].as_integer(), Some(5));
        assert_eq!(v["c"]["d"].as_bool(), Some(true));
        assert!(set_dotted(&mut v, "a.b.9", Value::Integer(0)).is_err());
        assert!(set_dotted(&mut v, "a..b", Value::Integer(0)).is_err());
    }

    #[test]
    fn values_parse_as_toml_or_string() {
        assert_eq!(parse_value("0.25"), Value::Float(0.25));
        assert_eq!(parse_value("[1, 2]"), Value::Array(vec![Value::Integer(1), Value::Integer(2)]));
        assert_eq!(parse_value("fig2"), Value::String("fig2".into()));
    }

    #[test]
    fn flags_override_file_and_sets() {
        let o = Overrides {
            ny: Some(51),
            set: vec!["grid.n_y=11".into(), "model.market.r=0.25".into(), "model.preferences.p=0.5".into()],
            ..Default::default()
        };
        let c = RunConfig::build(Command::Solve, &o).unwrap();
        assert_eq!(c.grid.n_y, 51);
        assert_eq!(c.model.market.r, 0.25);
        assert_eq!(c.model.preferences.p, 0.5);
        assert_eq!(c.model_source, "benchmark_s5");
    }

    #[test]
    fn sweep_only_with_sweep_command() {
        let o = Overrides {
            sweep: Some("fig2".into()),
            ..Default::default()
        };
        assert!(RunConfig::build(Command::Solve, &o).is_err());
        let c = RunConfig::build(Command::Sweep, &o).unwrap();
        assert_eq!(c.sweep.unwrap().values, vec![0.1, 0.5, 0.8]);
        assert!(RunConfig::build(Command::Sweep, &Overrides::default()).is_err());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let o = Overrides {
            set: vec!["grid.nonsense=1".into()],
            ..Default::default()
        };
        assert!(RunConfig::build(Command::Solve, &o).is_err());
    }
}
