//! `key = value` experiment configuration.
//!
//! ```text
//! # network
//! sizes = 256,20,20,20,10
//! activation = tanh
//! init_variance = 0.01
//! train_epochs = 0
//!
//! # estimators: S, TU, TU-sym, Simple, BeckerLeCun; an optional
//! # -binary / -gaussian suffix fixes the noise, otherwise every entry of
//! # `noise` is used.
//! estimators = S-binary,S-gaussian,TU-binary,TU-gaussian,Simple-gaussian,BeckerLeCun
//! samples = 1,10,100
//! metric = rel_l2
//! ```

use std::collections::HashMap;
use std::path::PathBuf;

use crate::error::{Error, Result};
use crate::noise::NoiseDist;
use crate::nodes::Nonlinearity;

/// Diagonal estimators compared by the experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DiagMethod {
    S,
    TU,
    TUSymmetrized,
    Simple,
    BeckerLeCun,
}

impl DiagMethod {
    pub fn name(self) -> &'static str {
        match self {
            DiagMethod::S => "S",
            DiagMethod::TU => "TU",
            DiagMethod::TUSymmetrized => "TU-sym",
            DiagMethod::Simple => "Simple",
            DiagMethod::BeckerLeCun => "BeckerLeCun",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "s" | "cp" => Some(DiagMethod::S),
            "tu" => Some(DiagMethod::TU),
            "tu-sym" | "tusym" => Some(DiagMethod::TUSymmetrized),
            "simple" => Some(DiagMethod::Simple),
            "beckerlecun" | "becker-lecun" | "bl" => Some(DiagMethod::BeckerLeCun),
            _ => None,
        }
    }

    pub fn is_stochastic(self) -> bool {
        self != DiagMethod::BeckerLeCun
    }
}

/// One `(estimator, noise)` series; deterministic methods have no noise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Series {
    pub method: DiagMethod,
    pub noise: Option<NoiseDist>,
}

impl Series {
    pub fn noise_name(&self) -> &'static str {
        self.noise.map_or("none", NoiseDist::name)
    }

    pub fn label(&self) -> String {
        match self.noise {
            Some(n) => format!("{}-{}", self.method.name(), n.name()),
            None => self.method.name().to_string(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Metric {
    /// `‖d̂ − d‖₂ / ‖d‖₂`.
    RelL2,
    /// `(‖d̂ − d‖₂ / ‖d‖₂)²`.
    SqRelL2,
    /// `‖d̂ − d‖₂ / √n`.
    Rmse,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::RelL2, Metric::SqRelL2, Metric::Rmse];

    pub fn name(self) -> &'static str {
        match self {
            Metric::RelL2 => "rel_l2",
            Metric::SqRelL2 => "sq_rel_l2",
            Metric::Rmse => "rmse",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Metric::ALL.into_iter().find(|m| m.name() == s)
    }

    pub fn eval(self, estimate: &[f64], exact: &[f64]) -> f64 {
        let diff: f64 = estimate.iter().zip(exact).map(|(a, b)| (a - b) * (a - b)).sum();
        let norm: f64 = exact.iter().map(|b| b * b).sum();
        match self {
            Metric::RelL2 => (diff / norm).sqrt(),
            Metric::SqRelL2 => diff / norm,
            Metric::Rmse => (diff / exact.len() as f64).sqrt(),
        }
    }
}

/// How the reference diagonal is computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ExactMethod {
    /// One Hessian-vector product per parameter on the generic graph.
    Hvp,
    /// One batched curvature sweep per unit basis probe.
    Basis,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub sizes: Vec<usize>,
    pub activation: Nonlinearity,
    pub init_variance: f64,
    pub checkpoint: Option<PathBuf>,
    pub train_epochs: usize,
    pub learning_rate: f64,
    pub train_batch: usize,
    pub cases: usize,
    pub series: Vec<Series>,
    pub samples: Vec<usize>,
    pub metric: Metric,
    pub seed: u64,
    pub out: PathBuf,
    pub threads: Option<usize>,
    pub exact: ExactMethod,
    /// Directory for cached reference diagonals; `None` disables caching.
    pub cache_dir: Option<PathBuf>,
    /// Record wall-clock seconds in results.csv. Off by default so that
    /// results.csv is byte-for-byte reproducible; timings.csv always has them.
    pub timing: bool,
    estimator_spec: String,
    noise_spec: String,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let mut c = Self {
            sizes: vec![256, 20, 20, 20, 10],
            activation: Nonlinearity::Tanh,
            init_variance: 0.01,
            checkpoint: None,
            train_epochs: 0,
            learning_rate: 0.1,
            train_batch: 20,
            cases: 1000,
            series: Vec::new(),
            samples: vec![1, 10, 100],
            metric: Metric::RelL2,
            seed: 0,
            out: PathBuf::from("results"),
            threads: None,
            exact: ExactMethod::Hvp,
            cache_dir: Some(PathBuf::from("results/cache")),
            timing: false,
            estimator_spec: "S-binary,S-gaussian,TU-binary,TU-gaussian,Simple-gaussian,BeckerLeCun".into(),
            noise_spec: "binary,gaussian".into(),
        };
        c.series = expand_series(&c.estimator_spec, &c.noise_spec).expect("default estimators parse");
        c
    }
}

fn parse_list<T>(v: &str, f: impl Fn(&str) -> Option<T>) -> std::result::Result<Vec<T>, String> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| f(s).ok_or_else(|| format!("bad list entry '{s}'")))
        .collect()
}

fn expand_series(estimators: &str, noise: &str) -> std::result::Result<Vec<Series>, String> {
    let noises = parse_list(noise, |s| s.parse::<NoiseDist>().ok())?;
    let mut out = Vec::new();
    for item in estimators.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let (name, fixed) = match item.rsplit_once('-') {
            Some((head, tail)) if DiagMethod::parse(head).is_some() => match tail.parse::<NoiseDist>() {
                Ok(n) => (head, Some(n)),
                Err(_) => (item, None),
            },
            _ => (item, None),
        };
        let method = DiagMethod::parse(name).ok_or_else(|| format!("unknown estimator '{item}'"))?;
        let push = |out: &mut Vec<Series>, s: Series| {
            if !out.contains(&s) {
                out.push(s);
            }
        };
        if !method.is_stochastic() {
            if fixed.is_some() {
                return Err(format!("'{}' takes no noise", method.name()));
            }
            push(&mut out, Series { method, noise: None });
        } else if let Some(n) = fixed {
            push(&mut out, Series { method, noise: Some(n) });
        } else {
            for &n in &noises {
                push(&mut out, Series { method, noise: Some(n) });
            }
        }
    }
    Ok(out)
}

impl ExperimentConfig {
    /// Parses a config file on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        let mut seen: HashMap<String, usize> = HashMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (k, v) = content.split_once('=').ok_or(Error::Config {
                line,
                msg: format!("expected key = value, got '{content}'"),
            })?;
            let k = k.trim();
            if let Some(prev) = seen.insert(k.to_string(), line) {
                return Err(Error::Config {
                    line,
                    msg: format!("'{k}' already set on line {prev}"),
                });
            }
            c.set(k, v.trim()).map_err(|msg| Error::Config { line, msg })?;
        }
        c.validate().map_err(|msg| Error::Config {
            line: text.lines().count().max(1),
            msg,
        })?;
        Ok(c)
    }

    /// Sets one key; the error message has no location.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> std::result::Result<T, String> {
            v.parse().map_err(|_| format!("'{key}': cannot parse '{v}'"))
        }
        match key {
            "sizes" => self.sizes = parse_list(value, |s| s.parse().ok())?,
            "activation" => {
                self.activation = Nonlinearity::parse(value).ok_or_else(|| format!("unknown activation '{value}'"))?
            }
            "init_variance" => self.init_variance = num(key, value)?,
            "checkpoint" => self.checkpoint = (!value.is_empty()).then(|| PathBuf::from(value)),
            "train_epochs" => self.train_epochs = num(key, value)?,
            "learning_rate" => self.learning_rate = num(key, value)?,
            "train_batch" => self.train_batch = num(key, value)?,
            "cases" => self.cases = num(key, value)?,
            "estimators" => {
                self.series = expand_series(value, &self.noise_spec)?;
                self.estimator_spec = value.to_string();
            }
            "noise" => {
                self.series = expand_series(&self.estimator_spec, value)?;
                self.noise_spec = value.to_string();
            }
            "samples" => self.samples = parse_list(value, |s| s.parse().ok())?,
            "metric" => self.metric = Metric::parse(value).ok_or_else(|| format!("unknown metric '{value}'"))?,
            "seed" => self.seed = num(key, value)?,
            "out" => {
                let old_default = self.out.join("cache");
                self.out = PathBuf::from(value);
                if self.cache_dir.as_deref() == Some(old_default.as_path()) {
                    self.cache_dir = Some(self.out.join("cache"));
                }
            }
            "threads" => self.threads = Some(num(key, value)?),
            "exact" => {
                self.exact = match value {
                    "hvp" => ExactMethod::Hvp,
                    "basis" => ExactMethod::Basis,
                    _ => return Err(format!("'exact' must be hvp or basis, got '{value}'")),
                }
            }
            "cache" => {
                self.cache_dir = match value {
                    "" | "none" | "off" => None,
                    dir => Some(PathBuf::from(dir)),
                }
            }
            "timing" => {
                self.timing = match value {
                    "true" | "1" | "yes" => true,
                    "false" | "0" | "no" => false,
                    _ => return Err(format!("'timing' must be true or false, got '{value}'")),
                }
            }
            _ => return Err(format!("unknown key '{key}'")),
        }
        Ok(())
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.sizes.len() < 2 || self.sizes.contains(&0) {
            return Err(format!("'sizes' needs at least two positive entries, got {:?}", self.sizes));
        }
        if self.series.is_empty() {
            return Err("at least one estimator is required".into());
        }
        if self.samples.is_empty() || self.samples[0] == 0 || self.samples.windows(2).any(|w| w[0] >= w[1]) {
            return Err(format!("'samples' must be positive and strictly increasing, got {:?}", self.samples));
        }
        if self.cases == 0 {
            return Err("'cases' must be positive".into());
        }
        if !(self.init_variance >= 0.0) {
            return Err("'init_variance' must be non-negative".into());
        }
        if self.threads == Some(0) {
            return Err("'threads' must be positive".into());
        }
        Ok(())
    }
}
