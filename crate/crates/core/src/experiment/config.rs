//! Flat `key = value` run configuration.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::SynthSpec;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Algorithm {
    /// Single-machine Langevin sampler: one block, one chain.
    Sgld,
    /// Square `√S × √S` blocks.
    DsgldS,
    /// `S` row stripes.
    DsgldC,
    Sgd,
    /// Noise-free updates over an `S × S` square grid, one chain.
    Dsgd,
    Gibbs,
}

impl Algorithm {
    pub fn name(&self) -> &'static str {
        match self {
            Algorithm::Sgld => "sgld",
            Algorithm::DsgldS => "dsgld-s",
            Algorithm::DsgldC => "dsgld-c",
            Algorithm::Sgd => "sgd",
            Algorithm::Dsgd => "dsgd",
            Algorithm::Gibbs => "gibbs",
        }
    }

    pub fn is_sampler(&self) -> bool {
        !matches!(self, Algorithm::Sgd | Algorithm::Dsgd)
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "sgld" => Algorithm::Sgld,
            "dsgld-s" => Algorithm::DsgldS,
            "dsgld-c" => Algorithm::DsgldC,
            "sgd" => Algorithm::Sgd,
            "dsgd" => Algorithm::Dsgd,
            "gibbs" => Algorithm::Gibbs,
            other => {
                return Err(Error::Config {
                    key: "algorithm".into(),
                    message: format!("unknown algorithm {other:?}"),
                })
            }
        })
    }
}

/// What goes into the `wall_clock_s` column.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Clock {
    Wall,
    /// Row ordinal; makes metrics files reproducible byte for byte.
    Logical,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransportKind {
    InProcess,
    Socket,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub algorithm: Algorithm,
    /// Rating file; when absent the synthetic generator is used.
    pub dataset: Option<PathBuf>,
    pub synth: SynthSpec,
    pub test_fraction: f64,
    pub dim: usize,
    pub tau: f64,
    pub alpha0: f64,
    pub beta0: f64,
    pub eps0: f64,
    pub kappa: f64,
    pub gamma_decay: f64,
    pub round_length: usize,
    pub minibatch_size: usize,
    pub workers: usize,
    pub chains: usize,
    pub burn_in_rmse_threshold: f64,
    pub thin: u64,
    pub hyper_interval: u64,
    pub max_rounds: u64,
    pub max_seconds: f64,
    pub seed: u64,
    pub out: PathBuf,
    pub precision_init: f64,
    pub init_sd: f64,
    /// Fraction of the test set used for the per-round burn-in RMSE.
    pub eval_fraction: f64,
    pub clip: Option<(f64, f64)>,
    pub clock: Clock,
    pub trace: bool,
    pub transport: TransportKind,
    pub worker_addrs: Vec<String>,
    pub reply_timeout_seconds: f64,
    /// SGD rounds used to initialize the Gibbs sampler; 0 disables.
    pub warm_start_rounds: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            algorithm: Algorithm::Sgld,
            dataset: None,
            synth: SynthSpec::default(),
            test_fraction: 0.2,
            dim: 10,
            tau: 2.0,
            alpha0: 1.0,
            beta0: 1.0,
            eps0: 1e-5,
            kappa: 1000.0,
            gamma_decay: 0.51,
            round_length: 50,
            minibatch_size: 1000,
            workers: 1,
            chains: 1,
            burn_in_rmse_threshold: f64::INFINITY,
            thin: 10,
            hyper_interval: 50,
            max_rounds: 100,
            max_seconds: f64::INFINITY,
            seed: 0,
            out: PathBuf::from("metrics.csv"),
            precision_init: 2.0,
            init_sd: 0.1,
            eval_fraction: 1.0,
            clip: None,
            clock: Clock::Wall,
            trace: false,
            transport: TransportKind::InProcess,
            worker_addrs: Vec::new(),
            reply_timeout_seconds: 600.0,
            warm_start_rounds: 0,
        }
    }
}

/// Every accepted key with a one-line description.
pub const KEYS: &[(&str, &str)] = &[
    ("algorithm", "sgld | dsgld-s | dsgld-c | sgd | dsgd | gibbs"),
    (
        "dataset",
        "path to a tab-separated rating file; empty selects synthetic data",
    ),
    ("synth_users", "synthetic user count"),
    ("synth_items", "synthetic item count"),
    (
        "synth_dim",
        "latent dimension of the synthetic ground truth",
    ),
    (
        "synth_noise_sd",
        "standard deviation of synthetic rating noise",
    ),
    ("synth_density", "fraction of observed synthetic cells"),
    ("synth_seed", "seed of the synthetic generator"),
    ("test_fraction", "share of ratings held out for testing"),
    ("dim", "latent dimension D"),
    ("tau", "likelihood precision"),
    ("alpha0", "Gamma hyper-prior shape"),
    ("beta0", "Gamma hyper-prior rate"),
    ("eps0", "initial step size"),
    ("kappa", "step-size decay scale"),
    ("gamma_decay", "step-size decay exponent, in (0.5, 1]"),
    ("round_length", "local iterations per round"),
    ("minibatch_size", "ratings per minibatch"),
    ("workers", "number of blocks S"),
    ("chains", "number of parallel chains"),
    (
        "burn_in_rmse_threshold",
        "mean chain RMSE that ends burn-in; inf ends it immediately",
    ),
    ("thin", "rounds between stored samples"),
    (
        "hyper_interval",
        "rounds between precision draws after burn-in",
    ),
    ("max_rounds", "round budget (sweeps for gibbs)"),
    ("max_seconds", "wall-clock budget"),
    ("seed", "master seed"),
    ("out", "metrics output path"),
    ("precision_init", "initial value of every precision"),
    ("init_sd", "standard deviation of initial factor entries"),
    (
        "eval_fraction",
        "fraction of the test set used for per-round RMSE",
    ),
    (
        "clip",
        "min,max rating range for clipping predictions; empty disables",
    ),
    ("clock", "wall | logical"),
    ("trace", "write the block schedule to <out>.trace"),
    ("transport", "in-process | socket"),
    (
        "worker_addrs",
        "comma-separated worker addresses, one per block, for socket transport",
    ),
    ("reply_timeout_seconds", "worker reply timeout"),
    (
        "warm_start_rounds",
        "SGD rounds to initialize gibbs; 0 disables",
    ),
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.trim().parse().map_err(|_| Error::Config {
        key: key.into(),
        message: format!("cannot parse {value:?}"),
    })
}

fn parse_real(key: &str, value: &str) -> Result<f64> {
    match value.trim() {
        "inf" | "+inf" | "infinity" => Ok(f64::INFINITY),
        v => parse(key, v),
    }
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config {
            key: key.into(),
            message: format!("expected a boolean, got {value:?}"),
        }),
    }
}

fn fmt_real(x: f64) -> String {
    if x == f64::INFINITY {
        "inf".into()
    } else {
        format!("{x}")
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "algorithm" => self.algorithm = v.parse()?,
            "dataset" => self.dataset = (!v.is_empty()).then(|| PathBuf::from(v)),
            "synth_users" => self.synth.n_users = parse(key, v)?,
            "synth_items" => self.synth.n_items = parse(key, v)?,
            "synth_dim" => self.synth.dim_true = parse(key, v)?,
            "synth_noise_sd" => self.synth.noise_sd = parse_real(key, v)?,
            "synth_density" => self.synth.density = parse_real(key, v)?,
            "synth_seed" => self.synth.seed = parse(key, v)?,
            "test_fraction" => self.test_fraction = parse_real(key, v)?,
            "dim" => self.dim = parse(key, v)?,
            "tau" => self.tau = parse_real(key, v)?,
            "alpha0" => self.alpha0 = parse_real(key, v)?,
            "beta0" => self.beta0 = parse_real(key, v)?,
            "eps0" => self.eps0 = parse_real(key, v)?,
            "kappa" => self.kappa = parse_real(key, v)?,
            "gamma_decay" => self.gamma_decay = parse_real(key, v)?,
            "round_length" => self.round_length = parse(key, v)?,
            "minibatch_size" => self.minibatch_size = parse(key, v)?,
            "workers" => self.workers = parse(key, v)?,
            "chains" => self.chains = parse(key, v)?,
            "burn_in_rmse_threshold" => self.burn_in_rmse_threshold = parse_real(key, v)?,
            "thin" => self.thin = parse(key, v)?,
            "hyper_interval" => self.hyper_interval = parse(key, v)?,
            "max_rounds" => self.max_rounds = parse(key, v)?,
            "max_seconds" => self.max_seconds = parse_real(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "out" => self.out = PathBuf::from(v),
            "precision_init" => self.precision_init = parse_real(key, v)?,
            "init_sd" => self.init_sd = parse_real(key, v)?,
            "eval_fraction" => self.eval_fraction = parse_real(key, v)?,
            "clip" => {
                self.clip = if v.is_empty() || v == "off" {
                    None
                } else {
                    let (lo, hi) = v.split_once(',').ok_or_else(|| Error::Config {
                        key: key.into(),
                        message: "expected min,max".into(),
                    })?;
                    Some((parse_real(key, lo)?, parse_real(key, hi)?))
                }
            }
            "clock" => {
                self.clock = match v {
                    "wall" => Clock::Wall,
                    "logical" => Clock::Logical,
                    _ => {
                        return Err(Error::Config {
                            key: key.into(),
                            message: format!("expected wall or logical, got {v:?}"),
                        })
                    }
                }
            }
            "trace" => self.trace = parse_bool(key, v)?,
            "transport" => {
                self.transport = match v {
                    "in-process" => TransportKind::InProcess,
                    "socket" => TransportKind::Socket,
                    _ => {
                        return Err(Error::Config {
                            key: key.into(),
                            message: format!("expected in-process or socket, got {v:?}"),
                        })
                    }
                }
            }
            "worker_addrs" => {
                self.worker_addrs = v
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(String::from)
                    .collect()
            }
            "reply_timeout_seconds" => self.reply_timeout_seconds = parse_real(key, v)?,
            "warm_start_rounds" => self.warm_start_rounds = parse(key, v)?,
            _ => {
                return Err(Error::Config {
                    key: key.into(),
                    message: "unknown key".into(),
                })
            }
        }
        Ok(())
    }

    /// Resolved configuration in [`KEYS`] order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let s = &self.synth;
        let v = |k: &'static str, x: String| (k, x);
        vec![
            v("algorithm", self.algorithm.to_string()),
            v(
                "dataset",
                self.dataset
                    .as_ref()
                    .map_or(String::new(), |p| p.display().to_string()),
            ),
            v("synth_users", s.n_users.to_string()),
            v("synth_items", s.n_items.to_string()),
            v("synth_dim", s.dim_true.to_string()),
            v("synth_noise_sd", fmt_real(s.noise_sd)),
            v("synth_density", fmt_real(s.density)),
            v("synth_seed", s.seed.to_string()),
            v("test_fraction", fmt_real(self.test_fraction)),
            v("dim", self.dim.to_string()),
            v("tau", fmt_real(self.tau)),
            v("alpha0", fmt_real(self.alpha0)),
            v("beta0", fmt_real(self.beta0)),
            v("eps0", fmt_real(self.eps0)),
            v("kappa", fmt_real(self.kappa)),
            v("gamma_decay", fmt_real(self.gamma_decay)),
            v("round_length", self.round_length.to_string()),
            v("minibatch_size", self.minibatch_size.to_string()),
            v("workers", self.workers.to_string()),
            v("chains", self.chains.to_string()),
            v(
                "burn_in_rmse_threshold",
                fmt_real(self.burn_in_rmse_threshold),
            ),
            v("thin", self.thin.to_string()),
            v("hyper_interval", self.hyper_interval.to_string()),
            v("max_rounds", self.max_rounds.to_string()),
            v("max_seconds", fmt_real(self.max_seconds)),
            v("seed", self.seed.to_string()),
            v("out", self.out.display().to_string()),
            v("precision_init", fmt_real(self.precision_init)),
            v("init_sd", fmt_real(self.init_sd)),
            v("eval_fraction", fmt_real(self.eval_fraction)),
            v(
                "clip",
                self.clip.map_or(String::new(), |(a, b)| {
                    format!("{},{}", fmt_real(a), fmt_real(b))
                }),
            ),
            v(
                "clock",
                match self.clock {
                    Clock::Wall => "wall",
                    Clock::Logical => "logical",
                }
                .into(),
            ),
            v("trace", self.trace.to_string()),
            v(
                "transport",
                match self.transport {
                    TransportKind::InProcess => "in-process",
                    TransportKind::Socket => "socket",
                }
                .into(),
            ),
            v("worker_addrs", self.worker_addrs.join(",")),
            v(
                "reply_timeout_seconds",
                fmt_real(self.reply_timeout_seconds),
            ),
            v("warm_start_rounds", self.warm_start_rounds.to_string()),
        ]
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (k, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: k + 1,
                message: format!("expected key = value, got {line:?}"),
            })?;
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())?;
        let mut cfg = RunConfig::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    /// `(S, p)` grid side for the square schemes.
    pub fn square_side(&self) -> Result<usize> {
        let s = self.workers;
        let p = (s as f64).sqrt().round() as usize;
        if p * p != s {
            return Err(Error::Config {
                key: "workers".into(),
                message: format!(
                    "{} requires a perfect-square worker count, got {s}",
                    self.algorithm
                ),
            });
        }
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, message: String| {
            Err(Error::Config {
                key: key.into(),
                message,
            })
        };
        if self.dim == 0 {
            return bad("dim", "must be at least 1".into());
        }
        if !(self.tau > 0.0) {
            return bad("tau", "must be positive".into());
        }
        if !(self.alpha0 > 0.0) {
            return bad("alpha0", "must be positive".into());
        }
        if !(self.beta0 > 0.0) {
            return bad("beta0", "must be positive".into());
        }
        if self.minibatch_size == 0 {
            return bad("minibatch_size", "must be at least 1".into());
        }
        if !(self.eps0 > 0.0 && self.eps0.is_finite()) {
            return bad("eps0", "must be positive".into());
        }
        if !(self.kappa > 0.0) {
            return bad("kappa", "must be positive".into());
        }
        if !(self.gamma_decay > 0.5 && self.gamma_decay <= 1.0) {
            return bad("gamma_decay", "must lie in (0.5, 1]".into());
        }
        if self.workers == 0 {
            return bad("workers", "must be at least 1".into());
        }
        if self.chains == 0 {
            return bad("chains", "must be at least 1".into());
        }
        if self.thin == 0 {
            return bad("thin", "must be at least 1".into());
        }
        if self.hyper_interval == 0 {
            return bad("hyper_interval", "must be at least 1".into());
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return bad("test_fraction", "must lie in (0, 1)".into());
        }
        if !(self.eval_fraction > 0.0 && self.eval_fraction <= 1.0) {
            return bad("eval_fraction", "must lie in (0, 1]".into());
        }
        if !(self.max_seconds > 0.0) {
            return bad("max_seconds", "must be positive".into());
        }
        if self.burn_in_rmse_threshold.is_nan() {
            return bad("burn_in_rmse_threshold", "must be a number".into());
        }
        if let Some((lo, hi)) = self.clip {
            if !(lo < hi) {
                return bad("clip", "min must be below max".into());
            }
        }
        match self.algorithm {
            Algorithm::DsgldS => {
                let p = self.square_side()?;
                if self.chains > p {
                    return bad("chains", format!("dsgld-s allows at most √S = {p} chains"));
                }
            }
            Algorithm::DsgldC => {
                if self.chains > self.workers {
                    return bad(
                        "chains",
                        format!("dsgld-c allows at most S = {} chains", self.workers),
                    );
                }
            }
            Algorithm::Sgld | Algorithm::Sgd | Algorithm::Dsgd | Algorithm::Gibbs => {
                if self.chains != 1 {
                    return bad("chains", format!("{} runs a single chain", self.algorithm));
                }
            }
        }
        if matches!(
            self.algorithm,
            Algorithm::Sgld | Algorithm::Sgd | Algorithm::Gibbs
        ) && self.workers != 1
        {
            return bad(
                "workers",
                format!("{} runs on a single block", self.algorithm),
            );
        }
        if self.transport == TransportKind::Socket && self.algorithm != Algorithm::Gibbs {
            let blocks = match self.algorithm {
                Algorithm::DsgldS => self.workers,
                Algorithm::Dsgd => self.workers * self.workers,
                _ => self.workers,
            };
            if self.worker_addrs.len() != blocks {
                return bad(
                    "worker_addrs",
                    format!(
                        "socket transport needs {blocks} addresses, got {}",
                        self.worker_addrs.len()
                    ),
                );
            }
        }
        if self.dataset.is_none() {
            self.synth_spec().validate().map_err(|e| Error::Config {
                key: "synth_*".into(),
                message: e.to_string(),
            })?;
        }
        Ok(())
    }

    pub fn synth_spec(&self) -> SynthSpec {
        SynthSpec {
            test_fraction: self.test_fraction,
            ..self.synth.clone()
        }
    }

    pub fn to_text(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    pub fn as_map(&self) -> BTreeMap<&'static str, String> {
        self.entries().into_iter().collect()
    }
}
