//! Experiment specification: a flat `key=value` parameter file plus command-line overrides.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use pglab_core::pg::default_npg_eta;
use pglab_core::{Algorithm, HardMdpParams, Variant};

/// Horizon either pinned to a chain length or given through `c_h`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Horizon {
    Chain(usize),
    Scaled(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub enum Source {
    Hard {
        gamma: f64,
        size: usize,
        horizon: Horizon,
        c_b1: f64,
        c_b2: f64,
        c_m: f64,
        c_p: f64,
    },
    File(PathBuf),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentSpec {
    pub source: Source,
    pub variant: Variant,
    pub collapse: bool,
    pub algo: Algorithm,
    /// `None` selects `(1-gamma)^2/10` for PG and the NPG default.
    pub eta: Option<f64>,
    pub max_iter: u64,
    pub stop_sup_error: Option<f64>,
    pub stop_mean_error: Option<f64>,
    pub stop_when_crossed: bool,
    pub eval_tol: f64,
    pub enforce_paper_regime: bool,
    /// Class labels of monitored states; empty means the default key states.
    pub monitor: Vec<String>,
    pub sweep_sizes: Vec<usize>,
    pub sweep_gammas: Vec<f64>,
    pub sweep_etas: Vec<f64>,
    pub seed: u64,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            source: Source::Hard {
                gamma: 0.9,
                size: 1000,
                horizon: Horizon::Chain(6),
                c_b1: 0.2,
                c_b2: 0.2,
                c_m: 0.4,
                c_p: 0.1,
            },
            variant: Variant::Base,
            collapse: true,
            algo: Algorithm::Pg,
            eta: None,
            max_iter: 100_000,
            stop_sup_error: Some(0.15),
            stop_mean_error: Some(0.07),
            stop_when_crossed: false,
            eval_tol: 1e-12,
            enforce_paper_regime: false,
            monitor: Vec::new(),
            sweep_sizes: Vec::new(),
            sweep_gammas: Vec::new(),
            sweep_etas: Vec::new(),
            seed: 0,
        }
    }
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    value
        .split(',')
        .map(str::trim)
        .filter(|v| !v.is_empty())
        .map(|v| v.parse::<T>().map_err(|e| anyhow!("{key}: cannot parse `{v}`: {e}")))
        .collect()
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse::<T>()
        .map_err(|e| anyhow!("{key}: cannot parse `{value}`: {e}"))
}

fn parse_on_off(key: &str, value: &str) -> Result<bool> {
    match value {
        "on" | "true" | "yes" => Ok(true),
        "off" | "false" | "no" => Ok(false),
        _ => bail!("{key}: expected on or off, got `{value}`"),
    }
}

fn parse_optional(key: &str, value: &str) -> Result<Option<f64>> {
    if value == "none" {
        Ok(None)
    } else {
        parse_value(key, value).map(Some)
    }
}

fn on_off(b: bool) -> &'static str {
    if b {
        "on"
    } else {
        "off"
    }
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl ExperimentSpec {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut spec = Self::parse(&text).with_context(|| format!("in {}", path.display()))?;
        if let Source::File(p) = &mut spec.source {
            if p.is_relative() {
                *p = path.parent().unwrap_or(Path::new(".")).join(&*p);
            }
        }
        Ok(spec)
    }

    /// Parses `key=value` lines; `#` starts a comment. Unknown or repeated keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("line {}: expected key=value", i + 1))?;
            let key = key.trim().to_string();
            if entries.insert(key.clone(), value.trim().to_string()).is_some() {
                bail!("line {}: duplicate key `{key}`", i + 1);
            }
        }
        let mut spec = Self::default();
        let Source::Hard {
            mut gamma,
            mut size,
            mut horizon,
            mut c_b1,
            mut c_b2,
            mut c_m,
            mut c_p,
        } = spec.source.clone()
        else {
            unreachable!()
        };
        let mut file = None;
        if entries.contains_key("h") && entries.contains_key("c_h") {
            bail!("give either h or c_h, not both");
        }
        for (key, value) in &entries {
            let (k, v) = (key.as_str(), value.as_str());
            match k {
                "gamma" => gamma = parse_value(k, v)?,
                "size" => size = parse_value(k, v)?,
                "h" => horizon = Horizon::Chain(parse_value(k, v)?),
                "c_h" => horizon = Horizon::Scaled(parse_value(k, v)?),
                "c_b1" => c_b1 = parse_value(k, v)?,
                "c_b2" => c_b2 = parse_value(k, v)?,
                "c_m" => c_m = parse_value(k, v)?,
                "c_p" => c_p = parse_value(k, v)?,
                "mdp" => file = Some(PathBuf::from(v)),
                "variant" => spec.variant = parse_value(k, v)?,
                "collapse" => spec.collapse = parse_on_off(k, v)?,
                "algo" => spec.algo = parse_value(k, v)?,
                "eta" => spec.eta = parse_optional(k, v)?,
                "max_iter" => spec.max_iter = parse_value(k, v)?,
                "stop_sup_error" => spec.stop_sup_error = parse_optional(k, v)?,
                "stop_mean_error" => spec.stop_mean_error = parse_optional(k, v)?,
                "stop_when_crossed" => spec.stop_when_crossed = parse_on_off(k, v)?,
                "eval_tol" => spec.eval_tol = parse_value(k, v)?,
                "enforce_paper_regime" => spec.enforce_paper_regime = parse_on_off(k, v)?,
                "monitor" => spec.monitor = parse_list(k, v)?,
                "sweep_sizes" => spec.sweep_sizes = parse_list(k, v)?,
                "sweep_gammas" => spec.sweep_gammas = parse_list(k, v)?,
                "sweep_etas" => spec.sweep_etas = parse_list(k, v)?,
                "seed" => spec.seed = parse_value(k, v)?,
                _ => bail!("unknown key `{k}`"),
            }
        }
        spec.source = match file {
            Some(path) => Source::File(path),
            None => Source::Hard {
                gamma,
                size,
                horizon,
                c_b1,
                c_b2,
                c_m,
                c_p,
            },
        };
        Ok(spec)
    }

    /// Canonical echo; parsing it back yields the same spec.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        match &self.source {
            Source::Hard {
                gamma,
                size,
                horizon,
                c_b1,
                c_b2,
                c_m,
                c_p,
            } => {
                let _ = writeln!(out, "gamma={gamma}\nsize={size}");
                let _ = match horizon {
                    Horizon::Chain(h) => writeln!(out, "h={h}"),
                    Horizon::Scaled(c) => writeln!(out, "c_h={c}"),
                };
                let _ = writeln!(out, "c_b1={c_b1}\nc_b2={c_b2}\nc_m={c_m}\nc_p={c_p}");
            }
            Source::File(p) => {
                let _ = writeln!(out, "mdp={}", p.display());
            }
        }
        let opt = |x: Option<f64>| x.map_or("none".to_string(), |v| v.to_string());
        let _ = writeln!(out, "variant={}", self.variant);
        let _ = writeln!(out, "collapse={}", on_off(self.collapse));
        let _ = writeln!(out, "algo={}", self.algo);
        let _ = writeln!(out, "eta={}", opt(self.eta));
        let _ = writeln!(out, "max_iter={}", self.max_iter);
        let _ = writeln!(out, "stop_sup_error={}", opt(self.stop_sup_error));
        let _ = writeln!(out, "stop_mean_error={}", opt(self.stop_mean_error));
        let _ = writeln!(out, "stop_when_crossed={}", on_off(self.stop_when_crossed));
        let _ = writeln!(out, "eval_tol={}", self.eval_tol);
        let _ = writeln!(out, "enforce_paper_regime={}", on_off(self.enforce_paper_regime));
        if !self.monitor.is_empty() {
            let _ = writeln!(out, "monitor={}", self.monitor.join(","));
        }
        for (key, list) in [
            ("sweep_sizes", join(&self.sweep_sizes)),
            ("sweep_gammas", join(&self.sweep_gammas)),
            ("sweep_etas", join(&self.sweep_etas)),
        ] {
            if !list.is_empty() {
                let _ = writeln!(out, "{key}={list}");
            }
        }
        let _ = writeln!(out, "seed={}", self.seed);
        out
    }

    pub fn gamma(&self) -> Option<f64> {
        match &self.source {
            Source::Hard { gamma, .. } => Some(*gamma),
            Source::File(_) => None,
        }
    }

    pub fn hard_params(&self) -> Option<HardMdpParams> {
        let Source::Hard {
            gamma,
            size,
            horizon,
            c_b1,
            c_b2,
            c_m,
            c_p,
        } = self.source
        else {
            return None;
        };
        let c_h = match horizon {
            Horizon::Chain(h) => (h as f64 + 0.5) * (1.0 - gamma),
            Horizon::Scaled(c) => c,
        };
        Some(HardMdpParams {
            gamma,
            target_size: size,
            c_h,
            c_b1,
            c_b2,
            c_m,
            c_p,
            enforce_paper_regime: self.enforce_paper_regime,
        })
    }

    pub fn resolved_eta(&self, gamma: f64) -> f64 {
        self.eta.unwrap_or(match self.algo {
            Algorithm::Pg => (1.0 - gamma).powi(2) / 10.0,
            Algorithm::Npg => default_npg_eta(gamma),
        })
    }

    /// Copy of this spec at one sweep point.
    pub fn at_point(&self, size: Option<usize>, gamma: Option<f64>, eta: Option<f64>) -> Result<Self> {
        let mut point = self.clone();
        point.sweep_sizes.clear();
        point.sweep_gammas.clear();
        point.sweep_etas.clear();
        if size.is_some() || gamma.is_some() {
            let Source::Hard { gamma: g, size: n, .. } = &mut point.source else {
                bail!("size and gamma axes require a hard instance");
            };
            if let Some(v) = size {
                *n = v;
            }
            if let Some(v) = gamma {
                *g = v;
            }
        }
        if eta.is_some() {
            point.eta = eta;
        }
        Ok(point)
    }

    pub fn has_sweep(&self) -> bool {
        !(self.sweep_sizes.is_empty() && self.sweep_gammas.is_empty() && self.sweep_etas.is_empty())
    }
}
