//! Data-dependent whitening of the readout block.
//!
//! Given the readout features `Psi` and targets `Y`, the conditional
//! posterior of the readout weights is Gaussian with covariance
//! `Sigma = (I + Psi^T Psi / s2)^-1` and mean `mu = Sigma Psi^T Y / s2`.
//! The map `phi = Sigma^{-1/2} (theta - mu)` whitens it; inner blocks are
//! left untouched.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::network::FlatWeights;

#[derive(Debug, Clone)]
pub struct ReparamState {
    /// `Sigma`, `d' x d'`.
    pub sigma: DMatrix<f64>,
    /// `mu`, one column per output, `d' x k`.
    pub mu: DMatrix<f64>,
    /// Symmetric square root of `Sigma`.
    pub sigma_sqrt: DMatrix<f64>,
    /// Symmetric square root of `Sigma^-1`.
    pub sigma_inv_sqrt: DMatrix<f64>,
    /// `0.5 * log det Sigma`.
    pub half_logdet: f64,
    pub noise_var: f64,
    /// Eigenvalues of `I + Psi^T Psi / s2`, floored at 1.
    pub precision_eigenvalues: DVector<f64>,
}

pub fn build_reparam(
    psi: &DMatrix<f64>,
    targets: &DMatrix<f64>,
    noise_var: f64,
) -> Result<ReparamState> {
    if !(noise_var > 0.0 && noise_var.is_finite()) {
        return Err(Error::Domain(format!("noise variance must be positive, got {noise_var}")));
    }
    if psi.nrows() != targets.nrows() {
        return Err(Error::Shape(format!(
            "psi has {} rows but targets have {}",
            psi.nrows(),
            targets.nrows()
        )));
    }
    if psi.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite entry in psi".into()));
    }
    let d = psi.ncols();
    let inv_s2 = 1.0 / noise_var;
    let mut precision = psi.tr_mul(psi) * inv_s2;
    for i in 0..d {
        precision[(i, i)] += 1.0;
    }
    // Symmetrize against round-off before the eigensolver.
    let precision = (&precision + precision.transpose()) * 0.5;
    let eig = SymmetricEigen::try_new(precision, f64::EPSILON, 0)
        .ok_or_else(|| Error::Numeric("eigendecomposition did not converge".into()))?;
    let lambda = eig.eigenvalues.map(|l| l.max(1.0));
    let q = &eig.eigenvectors;
    let scaled = |f: &dyn Fn(f64) -> f64| {
        let mut qs = q.clone();
        for (j, mut col) in qs.column_iter_mut().enumerate() {
            col *= f(lambda[j]);
        }
        &qs * q.transpose()
    };
    let sigma = scaled(&|l| 1.0 / l);
    let sigma_sqrt = scaled(&|l| 1.0 / l.sqrt());
    let sigma_inv_sqrt = scaled(&|l| l.sqrt());
    let half_logdet = -0.5 * lambda.iter().map(|l| l.ln()).sum::<f64>();
    let mu = (&sigma * psi.tr_mul(targets)) * inv_s2;
    Ok(ReparamState {
        sigma,
        mu,
        sigma_sqrt,
        sigma_inv_sqrt,
        half_logdet,
        noise_var,
        precision_eigenvalues: lambda,
    })
}

impl ReparamState {
    fn check(&self, w: &FlatWeights) -> Result<()> {
        let shape = w.layout().readout_shape();
        if shape != self.mu.shape() {
            return Err(Error::Shape(format!(
                "readout block is {shape:?}, reparametrization expects {:?}",
                self.mu.shape()
            )));
        }
        Ok(())
    }
}

/// `theta -> phi`.
pub fn to_phi(theta: &FlatWeights, state: &ReparamState) -> Result<FlatWeights> {
    state.check(theta)?;
    let readout = &state.sigma_inv_sqrt * (theta.readout_matrix() - &state.mu);
    let mut phi = theta.clone();
    phi.set_readout_matrix(&readout)?;
    Ok(phi)
}

/// `phi -> theta`.
pub fn to_theta(phi: &FlatWeights, state: &ReparamState) -> Result<FlatWeights> {
    state.check(phi)?;
    let readout = &state.sigma_sqrt * phi.readout_matrix() + &state.mu;
    let mut theta = phi.clone();
    theta.set_readout_matrix(&readout)?;
    Ok(theta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{Activation, NetworkConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(&mut rng))
    }

    #[test]
    fn zero_features_give_identity() {
        let psi = DMatrix::zeros(5, 3);
        let y = random_matrix(5, 2, 0);
        let s = build_reparam(&psi, &y, 0.3).unwrap();
        assert_eq!(s.sigma, DMatrix::identity(3, 3));
        assert_eq!(s.sigma_sqrt, DMatrix::identity(3, 3));
        assert!(s.mu.iter().all(|&v| v == 0.0));
        assert_eq!(s.half_logdet, 0.0);
    }

    #[test]
    fn scalar_case() {
        // Psi^T Psi = 1, s2 = 1, Psi^T y = 1.
        let psi = DMatrix::from_element(1, 1, 1.0);
        let y = DMatrix::from_element(1, 1, 1.0);
        let s = build_reparam(&psi, &y, 1.0).unwrap();
        assert!((s.sigma[(0, 0)] - 0.5).abs() < 1e-15);
        assert!((s.mu[(0, 0)] - 0.5).abs() < 1e-15);
        assert!((s.half_logdet + 0.5 * 2f64.ln()).abs() < 1e-15);

        let cfg = NetworkConfig::new(1, vec![1], 1, Activation::Identity, vec![1.0, 1.0], vec![0.0, 0.0], false)
            .unwrap();
        let theta = FlatWeights::new(cfg.layout(), vec![0.0, 1.0]).unwrap();
        let phi = to_phi(&theta, &s).unwrap();
        assert!((phi.readout()[0] - 0.5 / 0.5f64.sqrt()).abs() < 1e-15);
        assert!((phi.readout()[0] - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
    }

    #[test]
    fn sigma_inverts_precision() {
        let psi = random_matrix(3, 2, 4);
        let y = random_matrix(3, 1, 5);
        let s2 = 0.25;
        let s = build_reparam(&psi, &y, s2).unwrap();
        let precision = DMatrix::identity(2, 2) + psi.tr_mul(&psi) / s2;
        let prod = &s.sigma * &precision;
        assert!((prod - DMatrix::identity(2, 2)).abs().max() < 1e-10);
        let sq = &s.sigma_sqrt * &s.sigma_sqrt;
        assert!((&sq - &s.sigma).norm() / s.sigma.norm() < 1e-10);
    }

    #[test]
    fn eigenvalue_bounds_and_logdet() {
        let psi = random_matrix(9, 4, 7) * 3.0;
        let y = random_matrix(9, 2, 8);
        let s2 = 0.01;
        let s = build_reparam(&psi, &y, s2).unwrap();
        let gram = SymmetricEigen::new(psi.tr_mul(&psi)).eigenvalues;
        let lmax = gram.max();
        let sig = SymmetricEigen::new(s.sigma.clone()).eigenvalues;
        for &e in sig.iter() {
            assert!(e <= 1.0 + 1e-12);
            assert!(e >= s2 / (s2 + lmax) - 1e-12);
        }
        let expected: f64 = -0.5 * gram.iter().map(|l| (1.0 + l.max(0.0) / s2).ln()).sum::<f64>();
        assert!((s.half_logdet - expected).abs() < 1e-9);
    }

    #[test]
    fn conjugate_posterior_matches_bayesian_linear_regression() {
        // Readout posterior for y = Psi w + eps, w ~ N(0, I), eps ~ N(0, s2 I),
        // assembled from the completed-square normal equations element by element.
        let (n, d, s2) = (8, 3, 0.4);
        let psi = random_matrix(n, d, 12);
        let y = random_matrix(n, 1, 13);
        let s = build_reparam(&psi, &y, s2).unwrap();
        let mut a = DMatrix::<f64>::zeros(d, d);
        let mut b = DMatrix::<f64>::zeros(d, 1);
        for i in 0..d {
            a[(i, i)] = 1.0;
            for j in 0..d {
                for r in 0..n {
                    a[(i, j)] += psi[(r, i)] * psi[(r, j)] / s2;
                }
            }
            for r in 0..n {
                b[(i, 0)] += psi[(r, i)] * y[(r, 0)] / s2;
            }
        }
        let cov = a.clone().try_inverse().unwrap();
        let mean = a.lu().solve(&b).unwrap();
        assert!((&cov - &s.sigma).abs().max() < 1e-8);
        assert!((&mean - &s.mu).abs().max() < 1e-8);
    }

    #[test]
    fn round_trip_and_monte_carlo_covariance() {
        let cfg = NetworkConfig::wide_default(2, vec![3], 2, Activation::Gelu).unwrap();
        let psi = random_matrix(6, cfg.readout_dim(), 30) * 0.7;
        let y = random_matrix(6, 2, 31);
        let s = build_reparam(&psi, &y, 0.5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let theta = FlatWeights::prior_draw(cfg.layout(), &mut rng);
        let back = to_theta(&to_phi(&theta, &s).unwrap(), &s).unwrap();
        let err = theta
            .values()
            .iter()
            .zip(back.values())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-10);
        assert_eq!(&back.inner(), &theta.inner());

        // Column 0 of theta_readout under phi ~ N(0, I) has covariance Sigma.
        let d = cfg.readout_dim();
        let draws = 10_000;
        let mut samples = DMatrix::zeros(draws, d);
        for t in 0..draws {
            let phi = FlatWeights::prior_draw(cfg.layout(), &mut rng);
            let th = to_theta(&phi, &s).unwrap().readout_matrix();
            for i in 0..d {
                samples[(t, i)] = th[(i, 0)];
            }
        }
        let mean = samples.row_mean();
        let mut cov = DMatrix::zeros(d, d);
        for t in 0..draws {
            let c = samples.row(t) - &mean;
            cov += c.transpose() * c;
        }
        cov /= (draws - 1) as f64;
        let rel = (&cov - &s.sigma).norm() / s.sigma.norm();
        assert!(rel < 0.05, "relative Frobenius error {rel}");
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let psi = DMatrix::zeros(4, 2);
        let y = DMatrix::zeros(4, 1);
        let s = build_reparam(&psi, &y, 1.0).unwrap();
        let cfg = NetworkConfig::wide_default(2, vec![3], 1, Activation::Gelu).unwrap();
        let theta = FlatWeights::zeros(cfg.layout());
        assert!(matches!(to_phi(&theta, &s), Err(Error::Shape(_))));
        assert!(build_reparam(&psi, &y, 0.0).is_err());
        let bad = DMatrix::from_element(4, 2, f64::INFINITY);
        assert!(matches!(build_reparam(&bad, &y, 1.0), Err(Error::Numeric(_))));
    }
}
