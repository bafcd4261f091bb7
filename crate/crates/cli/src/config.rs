//! Flat `key = value` configs with `include`, flag overrides and a typed view.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use exproj_core::{OrderParam, PiecewiseFn, TestFunction};

use crate::error::{io_err, CliError, Result};

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "EXPROJ_OUT_DIR";
pub const DEFAULT_OUT_DIR: &str = "exproj-out";
const MAX_INCLUDE_DEPTH: usize = 16;

/// Every accepted key. Anything else is rejected before any computation.
pub const KEYS: &[&str] = &[
    "command",
    "alpha",
    "h",
    "seed",
    "out_dir",
    "mu.knots",
    "mu.values",
    "c",
    "q",
    "grid.nx",
    "grid.dt",
    "pde.slice_times",
    "oracle.f00",
    "oracle.tol",
    "opt.knots",
    "opt.budget",
    "opt.q",
    "opt.q_grid",
    "sde.paths",
    "sde.dt",
    "amp.n",
    "amp.d",
    "amp.q",
    "amp.t1",
    "amp.t2",
    "amp.early_stop",
    "amp.history",
    "amp.plan_samples",
    "amp.predicted_samples",
    "amp.bins",
    "amp.hist_lo",
    "amp.hist_hi",
    "se.map",
    "se.max_iter",
    "se.tol",
    "se.samples",
    "check.gap",
    "check.ks",
    "check.value_tol",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    SolvePde,
    Minimize,
    RunAmp,
    StateEvolution,
    VerifyDuality,
}

impl Command {
    pub const ALL: [Command; 5] =
        [Command::SolvePde, Command::Minimize, Command::RunAmp, Command::StateEvolution, Command::VerifyDuality];

    pub fn name(self) -> &'static str {
        match self {
            Command::SolvePde => "solve-pde",
            Command::Minimize => "minimize",
            Command::RunAmp => "run-amp",
            Command::StateEvolution => "state-evolution",
            Command::VerifyDuality => "verify-duality",
        }
    }
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Command {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self> {
        Command::ALL
            .into_iter()
            .find(|c| c.name() == s.trim())
            .ok_or_else(|| CliError::Config(format!("unknown command `{}`", s.trim())))
    }
}

/// Untyped entries in key order; later assignments win.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RawConfig {
    entries: BTreeMap<String, String>,
}

impl RawConfig {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut raw = Self::new();
        raw.merge_file(path, &mut Vec::new())?;
        Ok(raw)
    }

    /// Parses text; `include` paths resolve against `base`.
    pub fn parse(text: &str, base: Option<&Path>) -> Result<Self> {
        let mut raw = Self::new();
        raw.merge_text(text, base, "<text>", &mut Vec::new())?;
        Ok(raw)
    }

    fn merge_file(&mut self, path: &Path, stack: &mut Vec<PathBuf>) -> Result<()> {
        let canon = path.canonicalize().map_err(io_err(path))?;
        if stack.contains(&canon) {
            return Err(CliError::Config(format!("include cycle through {}", path.display())));
        }
        if stack.len() >= MAX_INCLUDE_DEPTH {
            return Err(CliError::Config(format!("includes nested deeper than {MAX_INCLUDE_DEPTH}")));
        }
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        stack.push(canon);
        let res = self.merge_text(&text, path.parent(), &path.display().to_string(), stack);
        stack.pop();
        res
    }

    fn merge_text(&mut self, text: &str, base: Option<&Path>, origin: &str, stack: &mut Vec<PathBuf>) -> Result<()> {
        // a manifest carries its config echo under [config]; read only that part
        let sectioned = text.lines().any(|l| l.trim() == "[config]");
        let mut inside = !sectioned;
        for (no, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if line.starts_with('[') && line.ends_with(']') {
                inside = line == "[config]";
                continue;
            }
            if !inside {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("{origin}:{}: expected `key = value`, got `{line}`", no + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if key == "include" {
                let target = base.map_or_else(|| PathBuf::from(value), |b| b.join(value));
                self.merge_file(&target, stack)?;
            } else {
                self.set(key, value).map_err(|e| CliError::Config(format!("{origin}:{}: {e}", no + 1)))?;
            }
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if !KEYS.contains(&key) {
            return Err(CliError::Config(format!("unknown key `{key}`")));
        }
        self.entries.insert(key.to_string(), value.trim().to_string());
        Ok(())
    }

    /// `key=value` as given on the command line.
    pub fn apply_override(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("override `{pair}` is not `key=value`")))?;
        self.set(k.trim(), v)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    fn parsed<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: fmt::Display,
    {
        self.get(key)
            .map(|v| v.parse::<T>().map_err(|e| CliError::Config(format!("`{key} = {v}`: {e}"))))
            .transpose()
    }

    fn or<T: FromStr>(&self, key: &str, default: T) -> Result<T>
    where
        T::Err: fmt::Display,
    {
        Ok(self.parsed(key)?.unwrap_or(default))
    }

    fn list(&self, key: &str) -> Result<Option<Vec<f64>>> {
        self.get(key)
            .map(|v| {
                v.split(',')
                    .filter(|x| !x.trim().is_empty())
                    .map(|x| x.trim().parse::<f64>().map_err(|e| CliError::Config(format!("`{key}`: `{}`: {e}", x.trim()))))
                    .collect()
            })
            .transpose()
    }
}

/// Where stage 1 gets its overlap from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StageQ {
    /// `q` of the order parameter, or the self-consistent root when `mu = 0`.
    Auto,
    Fixed(f64),
}

/// The map driven through state evolution.
#[derive(Debug, Clone, PartialEq)]
pub enum SeMap {
    /// `F*` from the PDE solution.
    Optimal,
    /// `a + b tanh(s v)`, rescaled so that `E F^2 = alpha q`.
    AffineTanh { a: f64, b: f64, s: f64 },
}

impl FromStr for SeMap {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let s = s.trim();
        if s == "optimal" {
            return Ok(SeMap::Optimal);
        }
        let args = s
            .strip_prefix("affine_tanh(")
            .and_then(|r| r.strip_suffix(')'))
            .ok_or_else(|| format!("expected `optimal` or `affine_tanh(a, b, s)`, got `{s}`"))?;
        let vals: Vec<f64> = args
            .split(',')
            .map(|x| x.trim().parse::<f64>().map_err(|e| format!("`{}`: {e}", x.trim())))
            .collect::<std::result::Result<_, _>>()?;
        match vals[..] {
            [a, b, s] => Ok(SeMap::AffineTanh { a, b, s }),
            _ => Err(format!("affine_tanh takes three numbers, got {}", vals.len())),
        }
    }
}

impl fmt::Display for SeMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SeMap::Optimal => f.write_str("optimal"),
            SeMap::AffineTanh { a, b, s } => write!(f, "affine_tanh({a:?}, {b:?}, {s:?})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridSettings {
    pub nx: usize,
    pub dt: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerSettings {
    pub knots: usize,
    pub budget: usize,
    pub q: f64,
    pub q_grid: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SdeSettings {
    pub paths: usize,
    pub dt: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AmpSettings {
    pub n: usize,
    pub d: usize,
    pub q: StageQ,
    pub t1: usize,
    pub t2: usize,
    pub early_stop: f64,
    pub history: usize,
    pub plan_samples: usize,
    pub predicted_samples: usize,
    pub bins: usize,
    pub hist_lo: f64,
    pub hist_hi: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeSettings {
    pub map: SeMap,
    pub max_iter: usize,
    pub tol: f64,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checks {
    pub gap: f64,
    pub ks: f64,
    pub value_tol: f64,
    pub oracle_f00: Option<f64>,
    pub oracle_tol: f64,
}

/// Validated run configuration.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub command: Command,
    pub alpha: Option<f64>,
    pub test_fn: TestFunction,
    /// Given order parameter; `None` means "minimise first".
    pub order_param: Option<OrderParam>,
    pub optimizer: OptimizerSettings,
    pub grid: GridSettings,
    pub slice_times: Vec<f64>,
    pub sde: SdeSettings,
    pub amp: AmpSettings,
    pub se: SeSettings,
    pub checks: Checks,
    pub seed: u64,
    pub out_dir: PathBuf,
}

fn positive(key: &str, v: f64) -> Result<f64> {
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(CliError::Config(format!("`{key}` must be positive and finite, got {v}")))
    }
}

fn at_least(key: &str, v: usize, min: usize) -> Result<usize> {
    if v >= min {
        Ok(v)
    } else {
        Err(CliError::Config(format!("`{key}` must be at least {min}, got {v}")))
    }
}

impl ExperimentConfig {
    /// Schema validation; `out_dir` falls back to the environment and then to
    /// [`DEFAULT_OUT_DIR`].
    pub fn from_raw(command: Command, raw: &RawConfig) -> Result<Self> {
        if let Some(c) = raw.get("command") {
            let named: Command = c.parse()?;
            if named != command {
                return Err(CliError::Config(format!("config is for `{named}` but `{command}` was run")));
            }
        }
        let alpha = raw.parsed::<f64>("alpha")?.map(|a| positive("alpha", a)).transpose()?;
        if alpha.is_none() && command != Command::SolvePde {
            return Err(CliError::Config(format!("`{command}` needs `alpha`")));
        }
        let test_fn = TestFunction::parse(raw.get("h").ok_or_else(|| CliError::Config("missing key `h`".into()))?)
            .map_err(|e| CliError::Config(format!("`h`: {e}")))?;

        let order_keys = ["mu.knots", "mu.values", "c"];
        let given = order_keys.iter().filter(|k| raw.contains(k)).count();
        let order_param = match given {
            0 => None,
            3 => {
                let mu = PiecewiseFn::new(raw.list("mu.knots")?.unwrap_or_default(), raw.list("mu.values")?.unwrap_or_default())
                    .map_err(|e| CliError::Config(format!("order parameter: {e}")))?;
                let c = positive("c", raw.parsed("c")?.unwrap_or(f64::NAN))?;
                let q: f64 = raw.or("q", 0.0)?;
                Some(OrderParam::new(mu, c, q).map_err(|e| CliError::Config(format!("order parameter: {e}")))?)
            }
            _ => return Err(CliError::Config("give all of `mu.knots`, `mu.values`, `c` or none of them".into())),
        };
        if order_param.is_none() && command == Command::SolvePde {
            return Err(CliError::Config("`solve-pde` needs `mu.knots`, `mu.values` and `c`".into()));
        }
        if order_param.is_none() && raw.contains("q") {
            return Err(CliError::Config("`q` belongs to a given order parameter; use `opt.q` when minimising".into()));
        }

        let optimizer = OptimizerSettings {
            knots: at_least("opt.knots", raw.or("opt.knots", 2)?, 1)?,
            budget: at_least("opt.budget", raw.or("opt.budget", 300)?, 1)?,
            q: raw.or("opt.q", 0.0)?,
            q_grid: raw.list("opt.q_grid")?,
        };
        if !(0.0..1.0).contains(&optimizer.q) {
            return Err(CliError::Config(format!("`opt.q` must lie in [0, 1), got {}", optimizer.q)));
        }
        let grid = GridSettings { nx: at_least("grid.nx", raw.or("grid.nx", 1025)?, 8)?, dt: positive("grid.dt", raw.or("grid.dt", 1e-3)?)? };
        let slice_times = raw.list("pde.slice_times")?.unwrap_or_else(|| vec![0.0, 0.5, 1.0]);
        if slice_times.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(CliError::Config("`pde.slice_times` must lie in [0, 1]".into()));
        }
        let sde = SdeSettings {
            paths: at_least("sde.paths", raw.or("sde.paths", 20_000)?, 1)?,
            dt: positive("sde.dt", raw.or("sde.dt", 1e-3)?)?,
        };

        let n = at_least("amp.n", raw.or("amp.n", 20_000)?, 2)?;
        let d = match (raw.parsed::<usize>("amp.d")?, alpha) {
            (Some(d), Some(a)) => {
                let ratio = n as f64 / d.max(1) as f64;
                if ((ratio - a) / a).abs() > 0.01 {
                    return Err(CliError::Config(format!("n/d = {ratio} does not match alpha = {a} within 1%")));
                }
                d
            }
            (Some(d), None) => d,
            (None, Some(a)) => ((n as f64 / a).round() as usize).max(1),
            (None, None) => (n / 4).max(1),
        };
        let q = match raw.get("amp.q") {
            None | Some("auto") => StageQ::Auto,
            Some(v) => {
                let q: f64 = v.parse().map_err(|e| CliError::Config(format!("`amp.q = {v}`: {e}")))?;
                if !(0.0..1.0).contains(&q) {
                    return Err(CliError::Config(format!("`amp.q` must lie in [0, 1), got {q}")));
                }
                StageQ::Fixed(q)
            }
        };
        let amp = AmpSettings {
            n,
            d: at_least("amp.d", d, 1)?,
            q,
            t1: at_least("amp.t1", raw.or("amp.t1", 50)?, 1)?,
            t2: at_least("amp.t2", raw.or("amp.t2", 32)?, 1)?,
            early_stop: raw.or("amp.early_stop", 1e-3)?,
            history: raw.or("amp.history", 4)?,
            plan_samples: at_least("amp.plan_samples", raw.or("amp.plan_samples", 100_000)?, 1)?,
            predicted_samples: at_least("amp.predicted_samples", raw.or("amp.predicted_samples", 40_000)?, 1)?,
            bins: at_least("amp.bins", raw.or("amp.bins", 120)?, 1)?,
            hist_lo: raw.or("amp.hist_lo", -6.0)?,
            hist_hi: raw.or("amp.hist_hi", 6.0)?,
        };
        if amp.t2 > exproj_core::AmpConfig::MAX_T2 {
            return Err(CliError::Config(format!("`amp.t2` is capped at {}", exproj_core::AmpConfig::MAX_T2)));
        }
        if !(amp.hist_hi > amp.hist_lo) {
            return Err(CliError::Config("`amp.hist_hi` must exceed `amp.hist_lo`".into()));
        }
        let se = SeSettings {
            map: raw.or("se.map", SeMap::Optimal)?,
            max_iter: at_least("se.max_iter", raw.or("se.max_iter", 200)?, 1)?,
            tol: positive("se.tol", raw.or("se.tol", 1e-8)?)?,
            samples: at_least("se.samples", raw.or("se.samples", 40_000)?, 2)?,
        };
        let checks = Checks {
            gap: positive("check.gap", raw.or("check.gap", 0.02)?)?,
            ks: positive("check.ks", raw.or("check.ks", 0.03)?)?,
            value_tol: positive("check.value_tol", raw.or("check.value_tol", 1e-3)?)?,
            oracle_f00: raw.parsed("oracle.f00")?,
            oracle_tol: positive("oracle.tol", raw.or("oracle.tol", 1e-4)?)?,
        };
        let out_dir = raw
            .get("out_dir")
            .map(PathBuf::from)
            .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR));
        Ok(Self {
            command,
            alpha,
            test_fn,
            order_param,
            optimizer,
            grid,
            slice_times,
            sde,
            amp,
            se,
            checks,
            seed: raw.or("seed", 1)?,
            out_dir,
        })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha.expect("validated for every command that reads alpha")
    }

    /// Every effective key, defaults included. Loading the echo reproduces the
    /// configuration exactly.
    pub fn echo(&self) -> String {
        let join = |xs: &[f64]| xs.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(", ");
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("command", self.command.to_string());
        if let Some(a) = self.alpha {
            put("alpha", format!("{a:?}"));
        }
        put("h", self.test_fn.label());
        put("seed", self.seed.to_string());
        put("out_dir", self.out_dir.display().to_string());
        if let Some(p) = &self.order_param {
            put("mu.knots", join(p.mu.knots()));
            put("mu.values", join(p.mu.values()));
            put("c", format!("{:?}", p.c));
            put("q", format!("{:?}", p.q));
        }
        put("grid.nx", self.grid.nx.to_string());
        put("grid.dt", format!("{:?}", self.grid.dt));
        put("pde.slice_times", join(&self.slice_times));
        if let Some(v) = self.checks.oracle_f00 {
            put("oracle.f00", format!("{v:?}"));
        }
        put("oracle.tol", format!("{:?}", self.checks.oracle_tol));
        put("opt.knots", self.optimizer.knots.to_string());
        put("opt.budget", self.optimizer.budget.to_string());
        put("opt.q", format!("{:?}", self.optimizer.q));
        if let Some(g) = &self.optimizer.q_grid {
            put("opt.q_grid", join(g));
        }
        put("sde.paths", self.sde.paths.to_string());
        put("sde.dt", format!("{:?}", self.sde.dt));
        let a = &self.amp;
        put("amp.n", a.n.to_string());
        put("amp.d", a.d.to_string());
        put("amp.q", match a.q {
            StageQ::Auto => "auto".into(),
            StageQ::Fixed(q) => format!("{q:?}"),
        });
        put("amp.t1", a.t1.to_string());
        put("amp.t2", a.t2.to_string());
        put("amp.early_stop", format!("{:?}", a.early_stop));
        put("amp.history", a.history.to_string());
        put("amp.plan_samples", a.plan_samples.to_string());
        put("amp.predicted_samples", a.predicted_samples.to_string());
        put("amp.bins", a.bins.to_string());
        put("amp.hist_lo", format!("{:?}", a.hist_lo));
        put("amp.hist_hi", format!("{:?}", a.hist_hi));
        put("se.map", self.se.map.to_string());
        put("se.max_iter", self.se.max_iter.to_string());
        put("se.tol", format!("{:?}", self.se.tol));
        put("se.samples", self.se.samples.to_string());
        put("check.gap", format!("{:?}", self.checks.gap));
        put("check.ks", format!("{:?}", self.checks.ks));
        put("check.value_tol", format!("{:?}", self.checks.value_tol));
        s
    }
}
