//! Experiment configuration: a flat key = value text file plus command-line
//! overrides. Lists are comma-separated; unknown keys are errors so typos
//! fail loudly.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use ua_core::schemes::Scheme;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Problem {
    Scalar,
    HenonHeiles,
    KleinGordon,
}

impl Problem {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "scalar" => Ok(Problem::Scalar),
            "hh" | "henon-heiles" => Ok(Problem::HenonHeiles),
            "kg" | "klein-gordon" => Ok(Problem::KleinGordon),
            other => bail!("unknown problem '{other}' (expected scalar|hh|kg)"),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Problem::Scalar => "scalar",
            Problem::HenonHeiles => "hh",
            Problem::KleinGordon => "kg",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    MicroMacro,
    Pullback,
}

impl Method {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "micromacro" => Ok(Method::MicroMacro),
            "pullback" => Ok(Method::Pullback),
            other => bail!("unknown method '{other}' (expected micromacro|pullback)"),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Method::MicroMacro => "micromacro",
            Method::Pullback => "pullback",
        }
    }

    /// The scheme pairings exercised by the experiments: the explicit
    /// integral schemes ride on the micro-macro split, the implicit
    /// midpoint family on the pullback transformation.
    pub fn allows(&self, scheme: Scheme) -> bool {
        match self {
            Method::MicroMacro => {
                matches!(scheme, Scheme::Irk2 | Scheme::Extrap3 | Scheme::Extrap4)
            }
            Method::Pullback => matches!(scheme, Scheme::Imidpoint | Scheme::Compos3),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ExperimentConfig {
    pub problem: Problem,
    pub method: Method,
    pub scheme: Scheme,
    pub eps_list: Vec<f64>,
    pub dt_list: Vec<f64>,
    pub t_end: f64,
    pub n_theta: usize,
    pub n_x: usize,
    pub tol_fp: f64,
    pub tol_step: f64,
    pub damping: bool,
    pub out: PathBuf,
    pub seed: u64,
    pub workers: usize,
    pub full_scale: bool,
    /// Poincare section parameters: target energy and orbit angles.
    pub h_target: Option<f64>,
    pub angles: Vec<f64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            problem: Problem::HenonHeiles,
            method: Method::MicroMacro,
            scheme: Scheme::Irk2,
            eps_list: vec![0.5],
            dt_list: vec![0.0625],
            t_end: 1.0,
            n_theta: 0, // resolved per problem when left 0
            n_x: 128,
            tol_fp: 1e-12,
            tol_step: 1e-12,
            damping: true,
            out: PathBuf::from("out.csv"),
            seed: 42,
            workers: default_workers(),
            full_scale: false,
            h_target: None,
            angles: Vec::new(),
        }
    }
}

fn default_workers() -> usize {
    std::env::var("UA_WORKERS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|w| *w >= 1)
        .unwrap_or(1)
}

impl ExperimentConfig {
    /// The theta grid size, defaulting per problem (32 for Henon-Heiles,
    /// 64 for Klein-Gordon) when the config leaves it unset.
    pub fn n_theta_resolved(&self) -> usize {
        if self.n_theta != 0 {
            return self.n_theta;
        }
        match self.problem {
            Problem::KleinGordon => 64,
            Problem::HenonHeiles => 32,
            Problem::Scalar => 16,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.method.allows(self.scheme) {
            bail!(
                "scheme '{}' is not paired with method '{}' (micromacro: irk2|extrap3|extrap4, pullback: imidpoint|compos3)",
                self.scheme.name(),
                self.method.name()
            );
        }
        if self.eps_list.is_empty() || self.dt_list.is_empty() {
            bail!("eps and dt lists must be non-empty");
        }
        for &e in &self.eps_list {
            if !(e > 0.0 && e <= 1.0) {
                bail!("eps values must lie in (0, 1], got {e}");
            }
        }
        for &dt in &self.dt_list {
            if dt <= 0.0 {
                bail!("dt values must be positive, got {dt}");
            }
        }
        if self.t_end <= 0.0 {
            bail!("t_end must be positive");
        }
        if self.workers == 0 {
            bail!("workers must be >= 1");
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg = Self::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut pairs = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("line {}: expected 'key = value'", lineno + 1))?;
            pairs.insert(key.trim().to_string(), value.trim().to_string());
        }
        for (key, value) in pairs {
            self.set(&key, &value)?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "problem" => self.problem = Problem::parse(value)?,
            "method" => self.method = Method::parse(value)?,
            "scheme" => self.scheme = Scheme::parse(value).map_err(|e| anyhow!("{e}"))?,
            "eps" => self.eps_list = parse_list(value)?,
            "dt" => self.dt_list = parse_list(value)?,
            "n_steps" => {
                // convenience: step counts for the configured t_end
                let steps: Vec<f64> = parse_list(value)?;
                let t = self.t_end;
                self.dt_list = steps.iter().map(|n| t / n).collect();
            }
            "t_end" => self.t_end = parse_one(value)?,
            "n_theta" => self.n_theta = parse_usize(value)?,
            "n_x" => self.n_x = parse_usize(value)?,
            "tol_fp" => self.tol_fp = parse_one(value)?,
            "tol_step" => self.tol_step = parse_one(value)?,
            "damping" => self.damping = parse_bool(value)?,
            "out" => self.out = PathBuf::from(value),
            "seed" => self.seed = value.parse().context("seed")?,
            "workers" => self.workers = parse_usize(value)?,
            "full_scale" => self.full_scale = parse_bool(value)?,
            "h_target" => self.h_target = Some(parse_one(value)?),
            "angles" => self.angles = parse_list(value)?,
            other => bail!("unknown config key '{other}'"),
        }
        Ok(())
    }
}

fn parse_list(value: &str) -> Result<Vec<f64>> {
    value
        .split(',')
        .map(|v| v.trim().parse::<f64>().with_context(|| format!("number '{v}'")))
        .collect()
}

fn parse_one(value: &str) -> Result<f64> {
    value.trim().parse().with_context(|| format!("number '{value}'"))
}

fn parse_usize(value: &str) -> Result<usize> {
    value.trim().parse().with_context(|| format!("integer '{value}'"))
}

fn parse_bool(value: &str) -> Result<bool> {
    match value {
        "true" | "on" | "1" | "yes" => Ok(true),
        "false" | "off" | "0" | "no" => Ok(false),
        other => bail!("expected boolean, got '{other}'"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_flat_key_value_text() {
        let mut cfg = ExperimentConfig::default();
        cfg.apply_text(
            "# comment\nproblem = kg\nmethod = pullback\nscheme = imidpoint\neps = 1e-4, 1e-2\ndt = 0.01\nt_end = 100\nn_x = 64\nn_theta = 64\n",
        )
        .unwrap();
        assert_eq!(cfg.problem, Problem::KleinGordon);
        assert_eq!(cfg.method, Method::Pullback);
        assert_eq!(cfg.eps_list, vec![1e-4, 1e-2]);
        cfg.validate().unwrap();
    }

    #[test]
    fn rejects_unknown_keys_and_bad_pairings() {
        let mut cfg = ExperimentConfig::default();
        assert!(cfg.apply_text("bogus = 1\n").is_err());
        cfg.method = Method::Pullback;
        cfg.scheme = Scheme::Irk2;
        assert!(cfg.validate().is_err());
        cfg.scheme = Scheme::Imidpoint;
        cfg.validate().unwrap();
    }

    #[test]
    fn n_steps_derives_dt_from_t_end() {
        let mut cfg = ExperimentConfig::default();
        cfg.apply_text("t_end = 2\nn_steps = 4, 8\n").unwrap();
        assert_eq!(cfg.dt_list, vec![0.5, 0.25]);
    }

    #[test]
    fn rejects_out_of_range_eps() {
        let mut cfg = ExperimentConfig::default();
        cfg.eps_list = vec![1.5];
        assert!(cfg.validate().is_err());
    }
}
