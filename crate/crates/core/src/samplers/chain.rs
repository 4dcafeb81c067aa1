use std::path::PathBuf;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rand::Rng;
use sha2::{Digest, Sha256};

use super::checkpoint::{Checkpoint, RngState};
use super::{step, SamplerConfig, State, Target};
use crate::error::{Error, Result};

/// Starting point of a chain.
#[derive(Debug, Clone, PartialEq)]
pub enum Init {
    /// Draw from the `N(0, I)` reference measure.
    PriorDraw,
    Given(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOptions {
    /// Proposals per acceptance-rate window.
    pub window: usize,
    /// Coordinates (of the completed state) kept in stored samples; all when `None`.
    pub monitor: Option<Vec<usize>>,
    pub checkpoint_path: Option<PathBuf>,
    /// Write a checkpoint every this many steps (0 disables).
    pub checkpoint_every: usize,
    /// Stop after this many steps, leaving the chain incomplete. Used to
    /// simulate interruptions.
    pub halt_after: Option<usize>,
    pub chain_index: u64,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            window: 1000,
            monitor: None,
            checkpoint_path: None,
            checkpoint_every: 0,
            halt_after: None,
            chain_index: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Chain {
    pub config: SamplerConfig,
    pub chain_index: u64,
    /// Post burn-in, thinned; restricted to `monitored` when set.
    pub samples: Vec<Vec<f64>>,
    pub monitored: Option<Vec<usize>>,
    pub acceptance_count: u64,
    pub proposal_count: u64,
    pub post_burn_in_accepted: u64,
    pub post_burn_in_proposed: u64,
    pub non_finite_count: u64,
    pub acceptance_series: Vec<f64>,
    pub target_descriptor: String,
    pub config_hash: [u8; 32],
    pub final_state: Vec<f64>,
    pub steps_done: usize,
    pub wall_time: f64,
}

impl Chain {
    pub fn acceptance_rate(&self) -> f64 {
        ratio(self.acceptance_count, self.proposal_count)
    }

    /// Acceptance rate over post burn-in proposals.
    pub fn post_burn_in_acceptance_rate(&self) -> f64 {
        ratio(self.post_burn_in_accepted, self.post_burn_in_proposed)
    }

    pub fn is_complete(&self) -> bool {
        self.steps_done == self.config.steps
    }

    /// Equality of everything except wall time.
    pub fn same_trajectory(&self, other: &Chain) -> bool {
        let mut a = self.clone();
        a.wall_time = other.wall_time;
        a == *other
    }

    /// `N x width` column-per-coordinate view of the samples.
    pub fn sample_matrix(&self) -> nalgebra::DMatrix<f64> {
        let n = self.samples.len();
        let w = self.samples.first().map_or(0, Vec::len);
        nalgebra::DMatrix::from_fn(n, w, |i, j| self.samples[i][j])
    }
}

fn ratio(a: u64, b: u64) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Independent MH and completion streams for `(seed, chain_index)`.
pub fn chain_rngs(seed: u64, chain_index: u64) -> (ChaCha8Rng, ChaCha8Rng) {
    let mut mh = ChaCha8Rng::seed_from_u64(seed);
    mh.set_stream(2 * chain_index);
    let mut completion = ChaCha8Rng::seed_from_u64(seed);
    completion.set_stream(2 * chain_index + 1);
    (mh, completion)
}

pub(crate) fn config_hash<T: Target + ?Sized>(target: &T, config: &SamplerConfig, options: &RunOptions) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(serde_json::to_string(config).expect("config serializes"));
    h.update(b"\0");
    h.update(target.descriptor());
    h.update(b"\0");
    h.update(format!("dim={}:completion={}", target.dim(), target.completion_len()));
    h.update(format!(":window={}:chain={}", options.window, options.chain_index));
    h.update(format!(":monitor={:?}", options.monitor));
    h.finalize().into()
}

struct Runner<'a, T: Target + ?Sized> {
    target: &'a T,
    config: &'a SamplerConfig,
    options: &'a RunOptions,
    hash: [u8; 32],
    mh: ChaCha8Rng,
    completion: ChaCha8Rng,
    current: State,
    chain: Chain,
    window_accepted: u64,
    window_count: u64,
    elapsed_before: f64,
}

impl<T: Target + ?Sized> Runner<'_, T> {
    fn store_sample(&mut self) {
        let extra = self.target.completion_len();
        let tail: Vec<f64> = (0..extra)
            .map(|_| self.completion.sample::<f64, _>(StandardNormal))
            .collect();
        let full = || self.current.position.iter().chain(tail.iter()).copied();
        let sample = match &self.options.monitor {
            Some(idx) => {
                let d = self.current.position.len();
                idx.iter()
                    .map(|&i| if i < d { self.current.position[i] } else { tail[i - d] })
                    .collect()
            }
            None => full().collect(),
        };
        self.chain.samples.push(sample);
    }

    fn checkpoint(&self, started: Instant) -> Checkpoint {
        Checkpoint {
            config_hash: self.hash,
            step: self.chain.steps_done as u64,
            chain_index: self.options.chain_index,
            seed: self.config.seed,
            acceptance_count: self.chain.acceptance_count,
            proposal_count: self.chain.proposal_count,
            post_burn_in_accepted: self.chain.post_burn_in_accepted,
            post_burn_in_proposed: self.chain.post_burn_in_proposed,
            non_finite_count: self.chain.non_finite_count,
            window_accepted: self.window_accepted,
            window_count: self.window_count,
            log_lik: self.current.log_lik,
            state: self.current.position.clone(),
            grad: self.current.grad.clone(),
            mh_rng: RngState::capture(&self.mh),
            completion_rng: RngState::capture(&self.completion),
            acceptance_series: self.chain.acceptance_series.clone(),
            samples: self.chain.samples.clone(),
            elapsed: self.elapsed_before + started.elapsed().as_secs_f64(),
        }
    }

    fn run(mut self) -> Result<Chain> {
        let started = Instant::now();
        let cfg = self.config;
        let window = self.options.window.max(1) as u64;
        let stop = self
            .options
            .halt_after
            .map_or(cfg.steps, |h| h.min(cfg.steps));
        while self.chain.steps_done < stop {
            let record = step(self.target, cfg, &self.current, &mut self.mh)?;
            let t = self.chain.steps_done + 1;
            self.chain.steps_done = t;
            self.chain.proposal_count += 1;
            self.window_count += 1;
            if record.non_finite {
                self.chain.non_finite_count += 1;
            }
            let post = t > cfg.burn_in;
            if post {
                self.chain.post_burn_in_proposed += 1;
            }
            if record.accepted {
                self.chain.acceptance_count += 1;
                self.window_accepted += 1;
                if post {
                    self.chain.post_burn_in_accepted += 1;
                }
                self.current = record.proposed.expect("accepted proposals are evaluated");
            }
            if self.window_count == window {
                self.chain
                    .acceptance_series
                    .push(self.window_accepted as f64 / window as f64);
                self.window_accepted = 0;
                self.window_count = 0;
            }
            if post && (t - cfg.burn_in).is_multiple_of(cfg.thin) {
                self.store_sample();
            }
            if let Some(path) = &self.options.checkpoint_path {
                let every = self.options.checkpoint_every;
                if every > 0 && t.is_multiple_of(every) && t < cfg.steps {
                    self.checkpoint(started).write(path)?;
                }
            }
        }
        if self.chain.steps_done == cfg.steps && self.window_count > 0 {
            self.chain
                .acceptance_series
                .push(self.window_accepted as f64 / self.window_count as f64);
        } else if self.chain.steps_done < cfg.steps {
            if let Some(path) = &self.options.checkpoint_path {
                self.checkpoint(started).write(path)?;
            }
        }
        self.chain.final_state = self.current.position.clone();
        self.chain.wall_time = self.elapsed_before + started.elapsed().as_secs_f64();
        Ok(self.chain)
    }
}

fn empty_chain<T: Target + ?Sized>(target: &T, config: &SamplerConfig, options: &RunOptions, hash: [u8; 32]) -> Chain {
    Chain {
        config: config.clone(),
        chain_index: options.chain_index,
        samples: Vec::with_capacity(config.stored_samples()),
        monitored: options.monitor.clone(),
        acceptance_count: 0,
        proposal_count: 0,
        post_burn_in_accepted: 0,
        post_burn_in_proposed: 0,
        non_finite_count: 0,
        acceptance_series: Vec::new(),
        target_descriptor: target.descriptor(),
        config_hash: hash,
        final_state: Vec::new(),
        steps_done: 0,
        wall_time: 0.0,
    }
}

fn check_monitor<T: Target + ?Sized>(target: &T, options: &RunOptions) -> Result<()> {
    let full = target.dim() + target.completion_len();
    if let Some(idx) = &options.monitor {
        if let Some(&bad) = idx.iter().find(|&&i| i >= full) {
            return Err(Error::Shape(format!(
                "monitored coordinate {bad} exceeds sample width {full}"
            )));
        }
    }
    Ok(())
}

/// Runs one chain from `init` with streams derived from
/// `(config.seed, options.chain_index)`.
pub fn run_chain<T: Target + ?Sized>(
    target: &T,
    config: &SamplerConfig,
    init: Init,
    options: &RunOptions,
) -> Result<Chain> {
    config.validate()?;
    check_monitor(target, options)?;
    let (mut mh, completion) = chain_rngs(config.seed, options.chain_index);
    let start = match init {
        Init::PriorDraw => (0..target.dim())
            .map(|_| mh.sample::<f64, _>(StandardNormal))
            .collect(),
        Init::Given(x) => x,
    };
    let current = State::evaluate(target, start, config.kind.needs_gradient())?;
    let hash = config_hash(target, config, options);
    Runner {
        target,
        config,
        options,
        hash,
        mh,
        completion,
        current,
        chain: empty_chain(target, config, options, hash),
        window_accepted: 0,
        window_count: 0,
        elapsed_before: 0.0,
    }
    .run()
}

/// Continues a chain from the checkpoint at `options.checkpoint_path`.
pub fn resume_chain<T: Target + ?Sized>(
    target: &T,
    config: &SamplerConfig,
    options: &RunOptions,
) -> Result<Chain> {
    config.validate()?;
    check_monitor(target, options)?;
    let path = options
        .checkpoint_path
        .as_ref()
        .ok_or_else(|| Error::Checkpoint("no checkpoint path configured".into()))?;
    let ck = Checkpoint::read(path)?;
    let hash = config_hash(target, config, options);
    if ck.config_hash != hash {
        return Err(Error::Checkpoint(format!(
            "{} was written for a different configuration",
            path.display()
        )));
    }
    let mut chain = empty_chain(target, config, options, hash);
    chain.steps_done = ck.step as usize;
    chain.acceptance_count = ck.acceptance_count;
    chain.proposal_count = ck.proposal_count;
    chain.post_burn_in_accepted = ck.post_burn_in_accepted;
    chain.post_burn_in_proposed = ck.post_burn_in_proposed;
    chain.non_finite_count = ck.non_finite_count;
    chain.acceptance_series = ck.acceptance_series;
    chain.samples = ck.samples;
    let current = State {
        position: ck.state,
        log_lik: ck.log_lik,
        grad: ck.grad,
    };
    if current.position.len() != target.dim() {
        return Err(Error::Checkpoint("checkpointed state has the wrong length".into()));
    }
    Runner {
        target,
        config,
        options,
        hash,
        mh: ck.mh_rng.restore(),
        completion: ck.completion_rng.restore(),
        current,
        chain,
        window_accepted: ck.window_accepted,
        window_count: ck.window_count,
        elapsed_before: ck.elapsed,
    }
    .run()
}

/// Runs `n_chains` chains with chain indices `0..n_chains`, concurrently
/// unless `strict`.
pub fn run_chains<T: Target + ?Sized>(
    target: &T,
    config: &SamplerConfig,
    options: &RunOptions,
    n_chains: usize,
    strict: bool,
) -> Vec<Result<Chain>> {
    crate::par::map_indices(n_chains, strict, |i| {
        let opts = RunOptions {
            chain_index: i as u64,
            ..options.clone()
        };
        run_chain(target, config, Init::PriorDraw, &opts)
    })
}
