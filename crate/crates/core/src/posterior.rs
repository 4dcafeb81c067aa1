//! The reparametrized posterior as a sampling target.
//!
//! With the readout block whitened, the posterior factorizes into an exact
//! standard normal on the readout block times a marginal over the inner
//! weights `W`:
//!
//! ```text
//! log p(phi | D) = -|phi|^2 / 2 + l(W) + const
//! l(W) = sum_c log N(y_c; 0, K),   K = s2 I_n + Psi(W) Psi(W)^T
//! ```
//!
//! `l` is the Gaussian-process log marginal likelihood under the empirical
//! NNGP kernel `K`. It is the likelihood term for pCN/pCNL (whose reference
//! measure is the prior) and, together with the prior, the MALA target.

use nalgebra::{Cholesky, DMatrix, Dyn};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::network::{features, hidden_features, Layout, NetworkConfig, PsiJacobian};
use crate::samplers::Target;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Which coordinates the chain state holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SamplingMode {
    /// Inner weights followed by the whitened readout block.
    FullPhi,
    /// Inner weights only; readout samples are drawn exactly afterwards.
    InnerOnly,
}

impl std::str::FromStr for SamplingMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "full" | "fullphi" | "full_phi" => Ok(SamplingMode::FullPhi),
            "inner" | "inneronly" | "inner_only" => Ok(SamplingMode::InnerOnly),
            other => Err(Error::Config(format!("unknown sampling mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GradientMode {
    Analytic,
    /// Central differences with the given step.
    FiniteDifference(f64),
}

/// Factorization used for the likelihood.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LinalgPath {
    /// `n x n` kernel when `n <= d'`, otherwise the `d' x d'` precision.
    Auto,
    Kernel,
    Woodbury,
}

/// `K = s2 I + Psi Psi^T` with its Cholesky factor.
#[derive(Debug, Clone)]
pub struct KernelMatrix {
    pub khat: DMatrix<f64>,
    factor: Cholesky<f64, Dyn>,
    /// `0.5 * log det K`.
    pub half_logdet: f64,
}

impl KernelMatrix {
    pub fn from_psi(psi: &DMatrix<f64>, noise_var: f64) -> Result<Self> {
        let n = psi.nrows();
        let mut khat = psi * psi.transpose();
        for i in 0..n {
            khat[(i, i)] += noise_var;
        }
        let factor = Cholesky::new(khat.clone())
            .ok_or_else(|| Error::Numeric("kernel matrix is not positive definite".into()))?;
        let half_logdet = factor.l_dirty().diagonal().iter().map(|v| v.ln()).sum();
        Ok(Self {
            khat,
            factor,
            half_logdet,
        })
    }

    /// Lower-triangular factor `L` with `L L^T = K`.
    pub fn factor(&self) -> DMatrix<f64> {
        self.factor.l()
    }

    pub fn solve(&self, rhs: &DMatrix<f64>) -> DMatrix<f64> {
        self.factor.solve(rhs)
    }

    /// `sum_c y_c^T K^-1 y_c`.
    pub fn quadratic_form(&self, targets: &DMatrix<f64>) -> f64 {
        self.solve(targets).dot(targets)
    }

    /// `sum_c log N(y_c; 0, K)`.
    pub fn log_marginal(&self, targets: &DMatrix<f64>) -> f64 {
        let (n, k) = targets.shape();
        -0.5 * self.quadratic_form(targets)
            - k as f64 * self.half_logdet
            - 0.5 * (n * k) as f64 * LN_2PI
    }
}

/// `l(phi*) - l(phi)` written directly in terms of the two kernels:
/// `-(k/2) log(det K* / det K) + (1/2) sum_c (y_c^T K^-1 y_c - y_c^T K*^-1 y_c)`.
pub fn kernel_log_ratio(proposed: &KernelMatrix, current: &KernelMatrix, targets: &DMatrix<f64>) -> f64 {
    let k = targets.ncols() as f64;
    -k * (proposed.half_logdet - current.half_logdet)
        + 0.5 * (current.quadratic_form(targets) - proposed.quadratic_form(targets))
}

#[derive(Debug, Clone)]
pub struct PosteriorTarget {
    config: NetworkConfig,
    dataset: Dataset,
    noise_var: f64,
    mode: SamplingMode,
    gradient_mode: GradientMode,
    linalg: LinalgPath,
    layout: Layout,
}

/// Likelihood value plus the intermediates the gradient needs.
struct LikelihoodParts {
    value: f64,
    /// `d l / d Psi`.
    psi_bar: Option<DMatrix<f64>>,
}

impl PosteriorTarget {
    pub fn new(
        config: NetworkConfig,
        dataset: Dataset,
        noise_var: f64,
        mode: SamplingMode,
    ) -> Result<Self> {
        if !(noise_var > 0.0 && noise_var.is_finite()) {
            return Err(Error::Domain(format!("noise variance must be positive, got {noise_var}")));
        }
        if dataset.m() != config.input_dim() || dataset.k() != config.output_dim() {
            return Err(Error::Shape(format!(
                "dataset is (m={}, k={}) but network is (m={}, k={})",
                dataset.m(),
                dataset.k(),
                config.input_dim(),
                config.output_dim()
            )));
        }
        let layout = config.layout();
        Ok(Self {
            config,
            dataset,
            noise_var,
            mode,
            gradient_mode: GradientMode::Analytic,
            linalg: LinalgPath::Auto,
            layout,
        })
    }

    pub fn with_gradient_mode(mut self, mode: GradientMode) -> Self {
        self.gradient_mode = mode;
        self
    }

    pub fn with_linalg_path(mut self, path: LinalgPath) -> Self {
        self.linalg = path;
        self
    }

    pub fn with_mode(mut self, mode: SamplingMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn dataset(&self) -> &Dataset {
        &self.dataset
    }

    pub fn noise_var(&self) -> f64 {
        self.noise_var
    }

    pub fn mode(&self) -> SamplingMode {
        self.mode
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    /// Length of the chain state for the current mode.
    pub fn state_dim(&self) -> usize {
        match self.mode {
            SamplingMode::FullPhi => self.layout.len(),
            SamplingMode::InnerOnly => self.layout.inner_len(),
        }
    }

    fn check_state(&self, state: &[f64]) -> Result<()> {
        if state.len() != self.state_dim() {
            return Err(Error::Shape(format!(
                "state has {} entries, {:?} target expects {}",
                state.len(),
                self.mode,
                self.state_dim()
            )));
        }
        Ok(())
    }

    /// Readout features for the inner weights held in `state`.
    pub fn psi(&self, state: &[f64]) -> Result<DMatrix<f64>> {
        self.check_state(state)?;
        Ok(hidden_features(&self.config, &self.layout, state, self.dataset.inputs())?.2)
    }

    /// Empirical NNGP kernel at the inner weights held in `state`.
    pub fn nngp_kernel(&self, state: &[f64]) -> Result<KernelMatrix> {
        KernelMatrix::from_psi(&self.psi(state)?, self.noise_var)
    }

    fn use_kernel_path(&self) -> bool {
        match self.linalg {
            LinalgPath::Kernel => true,
            LinalgPath::Woodbury => false,
            LinalgPath::Auto => self.dataset.n() <= self.config.readout_dim(),
        }
    }

    fn likelihood_parts(&self, psi: &DMatrix<f64>, with_grad: bool) -> Result<LikelihoodParts> {
        let y = self.dataset.targets();
        let (n, k) = y.shape();
        let s2 = self.noise_var;
        let kf = k as f64;
        let parts = if self.use_kernel_path() {
            let kernel = KernelMatrix::from_psi(psi, s2)?;
            let alpha = kernel.solve(y);
            let value = -0.5 * alpha.dot(y)
                - kf * kernel.half_logdet
                - 0.5 * (n * k) as f64 * LN_2PI;
            let psi_bar = with_grad.then(|| {
                let kinv_psi = kernel.solve(psi);
                &alpha * alpha.tr_mul(psi) - kinv_psi * kf
            });
            LikelihoodParts { value, psi_bar }
        } else {
            let d = psi.ncols();
            let inv_s2 = 1.0 / s2;
            let mut precision = psi.tr_mul(psi) * inv_s2;
            for i in 0..d {
                precision[(i, i)] += 1.0;
            }
            let chol = Cholesky::new(precision)
                .ok_or_else(|| Error::Numeric("readout precision is not positive definite".into()))?;
            let half_logdet_p: f64 = chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum();
            let mu = chol.solve(&psi.tr_mul(y)) * inv_s2;
            let fitted = psi * &mu;
            let quad = inv_s2 * (y.norm_squared() - fitted.dot(y));
            let value = -0.5 * quad
                - kf * (0.5 * n as f64 * s2.ln() + half_logdet_p)
                - 0.5 * (n * k) as f64 * LN_2PI;
            let psi_bar = with_grad.then(|| {
                let alpha = (y - &fitted) * inv_s2;
                // K^-1 Psi = Psi Sigma / s2.
                let kinv_psi = chol.solve(&psi.transpose()).transpose() * inv_s2;
                &alpha * alpha.tr_mul(psi) - kinv_psi * kf
            });
            LikelihoodParts { value, psi_bar }
        };
        if !parts.value.is_finite() {
            return Err(Error::Numeric(format!("log-likelihood evaluated to {}", parts.value)));
        }
        Ok(parts)
    }

    /// Log marginal likelihood `l`; depends on the inner weights only.
    pub fn log_likelihood(&self, state: &[f64]) -> Result<f64> {
        let psi = self.psi(state)?;
        Ok(self.likelihood_parts(&psi, false)?.value)
    }

    /// `-|state|^2 / 2 + l`, normalizing constant omitted.
    pub fn log_posterior(&self, state: &[f64]) -> Result<f64> {
        Ok(self.log_likelihood(state)? - 0.5 * norm_sq(state))
    }

    pub fn log_likelihood_and_grad(&self, state: &[f64]) -> Result<(f64, Vec<f64>)> {
        match self.gradient_mode {
            GradientMode::Analytic => self.analytic(state),
            GradientMode::FiniteDifference(h) => {
                let value = self.log_likelihood(state)?;
                Ok((value, self.finite_difference_grad(state, h)?))
            }
        }
    }

    /// Gradient of `l` with respect to the state; zero on the readout block.
    pub fn grad_log_likelihood(&self, state: &[f64]) -> Result<Vec<f64>> {
        Ok(self.log_likelihood_and_grad(state)?.1)
    }

    pub fn grad_log_posterior(&self, state: &[f64]) -> Result<Vec<f64>> {
        let mut g = self.grad_log_likelihood(state)?;
        for (gi, xi) in g.iter_mut().zip(state) {
            *gi -= xi;
        }
        Ok(g)
    }

    fn analytic(&self, state: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.check_state(state)?;
        let inputs = self.dataset.inputs();
        let f = features(&self.config, &self.layout, state, inputs, true)?;
        let parts = self.likelihood_parts(&f.psi, true)?;
        let jac = PsiJacobian::from_parts(&self.config, self.layout.clone(), state, inputs, f.post, f.derivatives);
        let inner = jac.transpose_apply(parts.psi_bar.as_ref().expect("gradient requested"))?;
        let mut grad = vec![0.0; self.state_dim()];
        grad[..inner.len()].copy_from_slice(&inner);
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numeric("non-finite log-likelihood gradient".into()));
        }
        Ok((parts.value, grad))
    }

    fn finite_difference_grad(&self, state: &[f64], h: f64) -> Result<Vec<f64>> {
        self.check_state(state)?;
        let mut grad = vec![0.0; self.state_dim()];
        let mut x = state.to_vec();
        for i in 0..self.layout.inner_len() {
            let orig = x[i];
            x[i] = orig + h;
            let up = self.log_likelihood(&x)?;
            x[i] = orig - h;
            let down = self.log_likelihood(&x)?;
            x[i] = orig;
            grad[i] = (up - down) / (2.0 * h);
        }
        Ok(grad)
    }

    /// Length of the exact readout completion appended to stored samples.
    pub fn readout_len(&self) -> usize {
        self.layout.readout_range().len()
    }

    pub fn descriptor(&self) -> String {
        format!(
            "posterior:{}:{}:s2={:e}:mode={:?}:grad={:?}:linalg={:?}",
            self.config.descriptor(),
            self.dataset.provenance(),
            self.noise_var,
            self.mode,
            self.gradient_mode,
            self.linalg
        )
    }
}

impl Target for PosteriorTarget {
    fn dim(&self) -> usize {
        self.state_dim()
    }

    fn log_likelihood(&self, x: &[f64]) -> Result<f64> {
        PosteriorTarget::log_likelihood(self, x)
    }

    fn log_likelihood_and_grad(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        PosteriorTarget::log_likelihood_and_grad(self, x)
    }

    fn completion_len(&self) -> usize {
        match self.mode {
            SamplingMode::FullPhi => 0,
            SamplingMode::InnerOnly => self.readout_len(),
        }
    }

    fn descriptor(&self) -> String {
        PosteriorTarget::descriptor(self)
    }
}

/// Exact draw of the whitened readout block, `d' x k` iid standard normal.
pub fn sample_readout_conditional<R: Rng + ?Sized>(
    rng: &mut R,
    k: usize,
    readout_dim: usize,
) -> DMatrix<f64> {
    DMatrix::from_fn(readout_dim, k, |_, _| rng.sample(StandardNormal))
}

pub(crate) fn norm_sq(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}
