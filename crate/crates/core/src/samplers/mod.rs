//! Metropolis-Hastings with three proposals against a standard normal
//! reference measure:
//!
//! * pCN, `v = sqrt(1 - beta^2) u + beta w`, accepted on the likelihood
//!   ratio alone because the proposal is prior-reversible;
//! * pCNL, the Crank-Nicolson discretization of the preconditioned
//!   Langevin SPDE, with drift `2 delta Dl(u)`;
//! * MALA, the position-only Metropolis-adjusted Langevin proposal on the
//!   full log posterior.
//!
//! `w` is iid standard normal in every case.

mod chain;
mod checkpoint;

pub use chain::{chain_rngs, run_chain, run_chains, resume_chain, Chain, Init, RunOptions};
pub use checkpoint::{Checkpoint, RngState, CHECKPOINT_VERSION};
pub(crate) use chain::config_hash;
pub(crate) use checkpoint::tmp_path;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// A likelihood on `R^dim` paired with an implicit `N(0, I)` prior.
pub trait Target: Sync {
    fn dim(&self) -> usize;

    fn log_likelihood(&self, x: &[f64]) -> Result<f64>;

    fn log_likelihood_and_grad(&self, x: &[f64]) -> Result<(f64, Vec<f64>)>;

    /// Extra iid standard normal coordinates appended to every stored
    /// sample (exact conditional completion). Zero for most targets.
    fn completion_len(&self) -> usize {
        0
    }

    fn descriptor(&self) -> String;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum SamplerKind {
    #[serde(rename = "pcn")]
    Pcn,
    #[serde(rename = "pcnl")]
    Pcnl,
    #[serde(rename = "lmc")]
    Lmc,
}

impl SamplerKind {
    pub fn name(self) -> &'static str {
        match self {
            SamplerKind::Pcn => "pcn",
            SamplerKind::Pcnl => "pcnl",
            SamplerKind::Lmc => "lmc",
        }
    }

    pub fn needs_gradient(self) -> bool {
        !matches!(self, SamplerKind::Pcn)
    }
}

impl std::fmt::Display for SamplerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for SamplerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "pcn" => Ok(SamplerKind::Pcn),
            "pcnl" => Ok(SamplerKind::Pcnl),
            "lmc" | "mala" => Ok(SamplerKind::Lmc),
            other => Err(Error::Config(format!("unknown sampler `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SamplerConfig {
    pub kind: SamplerKind,
    /// Noise coefficient of the proposal; pCNL derives `delta` from it and
    /// MALA uses it as `epsilon`.
    pub beta: f64,
    pub steps: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub seed: u64,
}

impl SamplerConfig {
    pub fn new(kind: SamplerKind, beta: f64, steps: usize, burn_in: usize, thin: usize, seed: u64) -> Result<Self> {
        let cfg = Self {
            kind,
            beta,
            steps,
            burn_in,
            thin,
            seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return Err(Error::Domain(format!("beta must lie in (0, 1], got {}", self.beta)));
        }
        if self.steps == 0 || self.thin == 0 {
            return Err(Error::Config("steps and thin must be positive".into()));
        }
        if self.burn_in >= self.steps {
            return Err(Error::Config(format!(
                "burn-in {} must be smaller than steps {}",
                self.burn_in, self.steps
            )));
        }
        if self.kind == SamplerKind::Pcnl {
            let delta = beta_to_delta(self.beta)?;
            if !(delta > 0.0 && delta < 2.0) {
                return Err(Error::Domain(format!(
                    "pCNL needs delta in (0, 2); beta = {} gives delta = {delta}",
                    self.beta
                )));
            }
        }
        Ok(())
    }

    /// Number of stored samples, `floor((steps - burn_in) / thin)`.
    pub fn stored_samples(&self) -> usize {
        (self.steps - self.burn_in) / self.thin
    }

    pub fn delta(&self) -> Result<f64> {
        beta_to_delta(self.beta)
    }
}

/// A point with its cached likelihood (and gradient, for the Langevin
/// proposals).
#[derive(Debug, Clone, PartialEq)]
pub struct State {
    pub position: Vec<f64>,
    pub log_lik: f64,
    pub grad: Option<Vec<f64>>,
}

impl State {
    pub fn evaluate<T: Target + ?Sized>(target: &T, position: Vec<f64>, with_grad: bool) -> Result<Self> {
        if position.len() != target.dim() {
            return Err(Error::Shape(format!(
                "state has {} entries, target dimension is {}",
                position.len(),
                target.dim()
            )));
        }
        let (log_lik, grad) = if with_grad {
            let (l, g) = target.log_likelihood_and_grad(&position)?;
            (l, Some(g))
        } else {
            (target.log_likelihood(&position)?, None)
        };
        if !log_lik.is_finite() {
            return Err(Error::Numeric(format!("log-likelihood evaluated to {log_lik}")));
        }
        if grad.as_ref().is_some_and(|g| g.iter().any(|v| !v.is_finite())) {
            return Err(Error::Numeric("non-finite gradient".into()));
        }
        Ok(Self {
            position,
            log_lik,
            grad,
        })
    }

    fn gradient(&self) -> Result<&[f64]> {
        self.grad
            .as_deref()
            .ok_or_else(|| Error::Numeric("state carries no gradient".into()))
    }

    fn log_posterior(&self) -> f64 {
        self.log_lik - 0.5 * dot(&self.position, &self.position)
    }
}

/// Outcome of one Metropolis-Hastings decision.
#[derive(Debug, Clone)]
pub struct ProposalRecord {
    /// `None` when the proposal could not be evaluated.
    pub proposed: Option<State>,
    pub log_accept_ratio: f64,
    pub accepted: bool,
    pub non_finite: bool,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `true` with probability `min(1, exp(log_ratio))`. Always consumes one
/// uniform so the random stream does not depend on the ratio.
fn metropolis<R: Rng + ?Sized>(log_ratio: f64, rng: &mut R) -> bool {
    let u: f64 = rng.random();
    log_ratio > f64::NEG_INFINITY && (log_ratio >= 0.0 || u < log_ratio.exp())
}

fn decide<T, R, F>(
    target: &T,
    position: Vec<f64>,
    with_grad: bool,
    rng: &mut R,
    log_ratio: F,
) -> Result<ProposalRecord>
where
    T: Target + ?Sized,
    R: Rng + ?Sized,
    F: FnOnce(&State) -> Result<f64>,
{
    let evaluated = match State::evaluate(target, position, with_grad) {
        Ok(s) => Some(s),
        Err(Error::Numeric(_)) => None,
        Err(e) => return Err(e),
    };
    let (proposed, log_accept_ratio) = match evaluated {
        Some(s) => {
            let r = log_ratio(&s)?;
            if r.is_nan() {
                (None, f64::NEG_INFINITY)
            } else {
                (Some(s), r)
            }
        }
        None => (None, f64::NEG_INFINITY),
    };
    let non_finite = proposed.is_none();
    let accepted = metropolis(log_accept_ratio, rng);
    Ok(ProposalRecord {
        proposed,
        log_accept_ratio,
        accepted,
        non_finite,
    })
}

/// `v = sqrt(1 - beta^2) u + beta w`.
pub fn pcn_propose<R: Rng + ?Sized>(current: &[f64], beta: f64, rng: &mut R) -> Vec<f64> {
    let a = (1.0 - beta * beta).sqrt();
    current
        .iter()
        .map(|&u| a * u + beta * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

/// `log a(v | u) = l(v) - l(u)` before the `min(1, .)`.
pub fn pcn_log_ratio(u: &State, v: &State) -> f64 {
    v.log_lik - u.log_lik
}

pub fn pcn_accept<T: Target + ?Sized, R: Rng + ?Sized>(
    target: &T,
    u: &State,
    v: Vec<f64>,
    rng: &mut R,
) -> Result<ProposalRecord> {
    decide(target, v, false, rng, |v| Ok(pcn_log_ratio(u, v)))
}

/// Root `delta` in `(0, 2]` of `beta^2 = 8 delta / (2 + delta)^2`.
pub fn beta_to_delta(beta: f64) -> Result<f64> {
    if !(beta > 0.0 && beta <= 1.0) {
        return Err(Error::Domain(format!("beta must lie in (0, 1], got {beta}")));
    }
    // beta^2 delta^2 + (4 beta^2 - 8) delta + 4 beta^2 = 0, smaller root.
    // Written as 2c / (-b + sqrt(disc)) to avoid cancellation for small beta.
    let b2 = beta * beta;
    let b = 8.0 - 4.0 * b2;
    let disc = (b * b - 16.0 * b2 * b2).max(0.0);
    Ok(8.0 * b2 / (b + disc.sqrt()))
}

/// `v = [(2 - delta) u + 2 delta Dl(u) + sqrt(8 delta) w] / (2 + delta)`.
pub fn pcnl_propose<R: Rng + ?Sized>(current: &State, delta: f64, rng: &mut R) -> Result<Vec<f64>> {
    let g = current.gradient()?;
    let inv = 1.0 / (2.0 + delta);
    let a = (2.0 - delta) * inv;
    let c = 2.0 * delta * inv;
    let s = (8.0 * delta).sqrt() * inv;
    Ok(current
        .position
        .iter()
        .zip(g)
        .map(|(&u, &gu)| a * u + c * gu + s * rng.sample::<f64, _>(StandardNormal))
        .collect())
}

/// `rho(u, v) = -l(u) - <v - u, Dl(u)>/2 - (delta/4) <u + v, Dl(u)> + (delta/4) |Dl(u)|^2`.
fn pcnl_rho(u: &State, v: &State, delta: f64) -> Result<f64> {
    let g = u.gradient()?;
    let mut diff = 0.0;
    let mut sum = 0.0;
    let mut gg = 0.0;
    for ((&ui, &vi), &gi) in u.position.iter().zip(&v.position).zip(g) {
        diff += (vi - ui) * gi;
        sum += (ui + vi) * gi;
        gg += gi * gi;
    }
    Ok(-u.log_lik - 0.5 * diff - 0.25 * delta * sum + 0.25 * delta * gg)
}

/// `rho(u, v) - rho(v, u)`.
pub fn pcnl_log_ratio(u: &State, v: &State, delta: f64) -> Result<f64> {
    Ok(pcnl_rho(u, v, delta)? - pcnl_rho(v, u, delta)?)
}

pub fn pcnl_accept<T: Target + ?Sized, R: Rng + ?Sized>(
    target: &T,
    u: &State,
    v: Vec<f64>,
    delta: f64,
    rng: &mut R,
) -> Result<ProposalRecord> {
    decide(target, v, true, rng, |v| pcnl_log_ratio(u, v, delta))
}

fn lmc_drift(x: &State, eps: f64) -> Result<Vec<f64>> {
    let g = x.gradient()?;
    let h = 0.5 * eps * eps;
    Ok(x.position.iter().zip(g).map(|(&xi, &gi)| xi + h * (gi - xi)).collect())
}

/// `v = u + (eps^2 / 2) grad log p(u | D) + eps w`.
pub fn lmc_propose<R: Rng + ?Sized>(current: &State, eps: f64, rng: &mut R) -> Result<Vec<f64>> {
    let mean = lmc_drift(current, eps)?;
    Ok(mean
        .into_iter()
        .map(|m| m + eps * rng.sample::<f64, _>(StandardNormal))
        .collect())
}

/// `log p(v) - log p(u) + log q(u | v) - log q(v | u)`.
pub fn lmc_log_ratio(u: &State, v: &State, eps: f64) -> Result<f64> {
    let mean_u = lmc_drift(u, eps)?;
    let mean_v = lmc_drift(v, eps)?;
    let inv = 1.0 / (2.0 * eps * eps);
    let fwd: f64 = v.position.iter().zip(&mean_u).map(|(a, b)| (a - b) * (a - b)).sum();
    let bwd: f64 = u.position.iter().zip(&mean_v).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(v.log_posterior() - u.log_posterior() - bwd * inv + fwd * inv)
}

pub fn lmc_accept<T: Target + ?Sized, R: Rng + ?Sized>(
    target: &T,
    u: &State,
    v: Vec<f64>,
    eps: f64,
    rng: &mut R,
) -> Result<ProposalRecord> {
    decide(target, v, true, rng, |v| lmc_log_ratio(u, v, eps))
}

/// One proposal plus decision for `config.kind`.
pub fn step<T: Target + ?Sized, R: Rng + ?Sized>(
    target: &T,
    config: &SamplerConfig,
    current: &State,
    rng: &mut R,
) -> Result<ProposalRecord> {
    match config.kind {
        SamplerKind::Pcn => {
            let v = pcn_propose(&current.position, config.beta, rng);
            pcn_accept(target, current, v, rng)
        }
        SamplerKind::Pcnl => {
            let delta = config.delta()?;
            let v = pcnl_propose(current, delta, rng)?;
            pcnl_accept(target, current, v, delta, rng)
        }
        SamplerKind::Lmc => {
            let v = lmc_propose(current, config.beta, rng)?;
            lmc_accept(target, current, v, config.beta, rng)
        }
    }
}
