//! Sweep configuration: a flat `key = value` file plus CLI overrides.

use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::dataset::{load_cifar10, synthetic_regression, teacher_regression, Dataset};
use crate::error::{Error, Result};
use crate::network::Activation;
use crate::posterior::SamplingMode;
use crate::samplers::SamplerKind;

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    /// iid standard normal inputs (`m` features) and targets (`k` outputs).
    Synthetic { m: usize, k: usize },
    /// Inputs as above; targets from a prior-drawn teacher network plus
    /// observation noise of the plan's `noise_var`.
    Teacher { m: usize, k: usize },
    /// A CIFAR-10 binary batch file.
    Cifar10(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentPlan {
    pub samplers: Vec<SamplerKind>,
    pub widths: Vec<usize>,
    pub betas: Vec<f64>,
    pub steps: usize,
    pub burn_in: usize,
    pub thin: usize,
    /// Dataset size.
    pub n: usize,
    pub data: DataSource,
    /// Seed for dataset generation or subsampling.
    pub data_seed: u64,
    pub teacher_width: usize,
    pub seeds: Vec<u64>,
    /// Chains per cell; R-hat needs at least 2.
    pub n_chains: usize,
    pub out_dir: PathBuf,
    pub strict: bool,
    pub workers: usize,
    /// Number of hidden layers, all of the cell's width.
    pub depth: usize,
    pub activation: Activation,
    pub noise_var: f64,
    pub mode: SamplingMode,
    /// Coordinates kept per stored sample.
    pub monitor: usize,
    pub n_components: usize,
    /// Checkpoint interval in steps; 0 disables.
    pub checkpoint_every: usize,
    /// Stop every chain after this many steps (interruption testing).
    pub halt_after: Option<usize>,
}

impl Default for ExperimentPlan {
    fn default() -> Self {
        Self {
            samplers: vec![SamplerKind::Pcn, SamplerKind::Pcnl, SamplerKind::Lmc],
            widths: vec![128, 512, 2048],
            betas: vec![0.1],
            steps: 50_000,
            burn_in: 5_000,
            thin: 25,
            n: 64,
            data: DataSource::Teacher { m: 16, k: 1 },
            data_seed: 0,
            teacher_width: 4096,
            seeds: vec![0, 1, 2],
            n_chains: 1,
            out_dir: PathBuf::from("results"),
            strict: false,
            workers: std::thread::available_parallelism().map_or(1, |n| n.get()),
            depth: 1,
            activation: Activation::Gelu,
            noise_var: 0.01,
            mode: SamplingMode::FullPhi,
            monitor: 20,
            n_components: 2,
            checkpoint_every: 0,
            halt_after: None,
        }
    }
}

fn list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse()
                .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{s}`")))
        })
        .collect()
}

fn one<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{}`", v.trim())))
}

/// `n,m,k` as given to `--synthetic` and `--teacher`.
pub fn parse_synthetic(v: &str) -> Result<(usize, usize, usize)> {
    match list::<usize>("synthetic", v)?[..] {
        [n, m, k] => Ok((n, m, k)),
        _ => Err(Error::Config(format!("expected n,m,k, got `{v}`"))),
    }
}

fn mode_name(m: SamplingMode) -> &'static str {
    match m {
        SamplingMode::FullPhi => "full",
        SamplingMode::InnerOnly => "inner",
    }
}

fn join<T: std::fmt::Display>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl ExperimentPlan {
    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "samplers" => self.samplers = list(key, value)?,
            "widths" => self.widths = list(key, value)?,
            "betas" => self.betas = list(key, value)?,
            "steps" => self.steps = one(key, value)?,
            "burn_in" => self.burn_in = one(key, value)?,
            "thin" => self.thin = one(key, value)?,
            "n" => self.n = one(key, value)?,
            "synthetic" => {
                let (n, m, k) = parse_synthetic(value)?;
                self.n = n;
                self.data = DataSource::Synthetic { m, k };
            }
            "teacher" => {
                let (n, m, k) = parse_synthetic(value)?;
                self.n = n;
                self.data = DataSource::Teacher { m, k };
            }
            "teacher_width" => self.teacher_width = one(key, value)?,
            "data" => self.data = DataSource::Cifar10(PathBuf::from(value.trim())),
            "data_seed" => self.data_seed = one(key, value)?,
            "seeds" => self.seeds = list(key, value)?,
            "n_chains" => self.n_chains = one(key, value)?,
            "out" => self.out_dir = PathBuf::from(value.trim()),
            "strict" => self.strict = one(key, value)?,
            "workers" => self.workers = one(key, value)?,
            "depth" => self.depth = one(key, value)?,
            "activation" => self.activation = one(key, value)?,
            "noise_var" => self.noise_var = one(key, value)?,
            "mode" => self.mode = one(key, value)?,
            "monitor" => self.monitor = one(key, value)?,
            "n_components" => self.n_components = one(key, value)?,
            "checkpoint_every" => self.checkpoint_every = one(key, value)?,
            "halt_after" => {
                self.halt_after = match value.trim() {
                    "" | "none" => None,
                    v => Some(one(key, v)?),
                }
            }
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Defaults overridden by every setting in `text`. Blank lines and
    /// `#` comments are ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let mut plan = Self::default();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", no + 1)))?;
            plan.set(k.trim(), v)?;
        }
        Ok(plan)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Canonical serialization; [`ExperimentPlan::parse`] inverts it.
    pub fn to_config_string(&self) -> String {
        let data = match &self.data {
            DataSource::Synthetic { m, k } => format!("synthetic = {},{m},{k}", self.n),
            DataSource::Teacher { m, k } => format!("teacher = {},{m},{k}", self.n),
            DataSource::Cifar10(p) => format!("n = {}\ndata = {}", self.n, p.display()),
        };
        let samplers: Vec<&str> = self.samplers.iter().map(|s| s.name()).collect();
        let halt = self.halt_after.map_or("none".to_string(), |h| h.to_string());
        [
            format!("samplers = {}", samplers.join(",")),
            format!("widths = {}", join(&self.widths)),
            format!("betas = {}", join(&self.betas)),
            format!("steps = {}", self.steps),
            format!("burn_in = {}", self.burn_in),
            format!("thin = {}", self.thin),
            data,
            format!("data_seed = {}", self.data_seed),
            format!("teacher_width = {}", self.teacher_width),
            format!("seeds = {}", join(&self.seeds)),
            format!("n_chains = {}", self.n_chains),
            format!("out = {}", self.out_dir.display()),
            format!("strict = {}", self.strict),
            format!("workers = {}", self.workers),
            format!("depth = {}", self.depth),
            format!("activation = {}", self.activation.name()),
            format!("noise_var = {}", self.noise_var),
            format!("mode = {}", mode_name(self.mode)),
            format!("monitor = {}", self.monitor),
            format!("n_components = {}", self.n_components),
            format!("checkpoint_every = {}", self.checkpoint_every),
            format!("halt_after = {halt}"),
        ]
        .join("\n")
            + "\n"
    }

    /// SHA-256 of the canonical serialization.
    pub fn config_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_config_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.samplers.is_empty() || self.widths.is_empty() || self.betas.is_empty() || self.seeds.is_empty() {
            return bad("samplers, widths, betas and seeds must be non-empty");
        }
        if self.widths.contains(&0) {
            return bad("widths must be positive");
        }
        if self.betas.iter().any(|b| !(*b > 0.0 && *b <= 1.0)) {
            return bad("betas must lie in (0, 1]");
        }
        if self.steps == 0 || self.thin == 0 || self.burn_in >= self.steps {
            return bad("need steps > burn_in >= 0 and thin > 0");
        }
        if (self.steps - self.burn_in) / self.thin <= self.n_components.max(3) {
            return bad("too few stored samples for the diagnostics");
        }
        if self.n == 0 || self.n_chains == 0 || self.depth == 0 || self.workers == 0 {
            return bad("n, n_chains, depth and workers must be positive");
        }
        if !(self.noise_var > 0.0 && self.noise_var.is_finite()) {
            return bad("noise_var must be positive");
        }
        if self.monitor == 0 || self.n_components == 0 {
            return bad("monitor and n_components must be positive");
        }
        if let DataSource::Synthetic { m, k } | DataSource::Teacher { m, k } = self.data {
            if m == 0 || k == 0 || self.teacher_width == 0 {
                return bad("synthetic m, k and teacher_width must be positive");
            }
        }
        Ok(())
    }

    pub fn load_dataset(&self) -> Result<Dataset> {
        match &self.data {
            DataSource::Synthetic { m, k } => synthetic_regression(self.n, *m, *k, self.data_seed),
            DataSource::Teacher { m, k } => teacher_regression(
                self.n,
                *m,
                *k,
                self.teacher_width,
                self.noise_var.sqrt(),
                self.data_seed,
            ),
            DataSource::Cifar10(path) => load_cifar10(path, self.n, self.data_seed),
        }
    }

    /// Every `(sampler, width, beta, seed)` cell in a fixed order.
    pub fn cells(&self) -> Vec<Cell> {
        let mut out = Vec::new();
        for &sampler in &self.samplers {
            for &width in &self.widths {
                for &beta in &self.betas {
                    for &seed in &self.seeds {
                        out.push(Cell {
                            sampler,
                            width,
                            beta,
                            seed,
                        });
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub sampler: SamplerKind,
    pub width: usize,
    pub beta: f64,
    pub seed: u64,
}

impl Cell {
    /// File-name stem, e.g. `pcn_w128_b0.1_s0`.
    pub fn name(&self) -> String {
        format!("{}_w{}_b{}_s{}", self.sampler, self.width, self.beta, self.seed)
    }
}
