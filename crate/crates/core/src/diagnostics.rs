//! Convergence and efficiency diagnostics over sample matrices (`N x D`,
//! one row per stored iterate).

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::par;

#[derive(Debug, Clone, PartialEq)]
pub struct EssSummary {
    pub per_parameter_ess: Vec<f64>,
    /// Parameters whose chain has zero sample variance.
    pub degenerate: Vec<bool>,
    pub n: usize,
    pub mean_per_step_ess: f64,
    pub min_per_step_ess: f64,
    pub max_per_step_ess: f64,
}

impl EssSummary {
    pub fn per_step(&self) -> Vec<f64> {
        self.per_parameter_ess.iter().map(|e| e / self.n as f64).collect()
    }
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Biased (`1/N`) sample autocorrelation at `lag`, given the centered
/// series and its biased variance.
fn autocorr_centered(c: &[f64], var: f64, lag: usize) -> f64 {
    let n = c.len();
    let s: f64 = c[..n - lag].iter().zip(&c[lag..]).map(|(a, b)| a * b).sum();
    s / n as f64 / var
}

/// Sample autocorrelations `R_0..=R_max_lag` with the biased normalization.
pub fn autocorrelation(x: &[f64], max_lag: usize) -> Result<Vec<f64>> {
    if max_lag >= x.len() {
        return Err(Error::Domain(format!(
            "lag {max_lag} needs more than {} samples",
            x.len()
        )));
    }
    let m = mean(x);
    let c: Vec<f64> = x.iter().map(|v| v - m).collect();
    let var = c.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    if var == 0.0 {
        return Err(Error::Numeric("autocorrelation of a constant series".into()));
    }
    Ok((0..=max_lag).map(|l| autocorr_centered(&c, var, l)).collect())
}

/// ESS of one series; `None` when the series is constant.
///
/// `N / (1 + 2 sum_i (1 - i/N) R_i)`, the sum stopping before the first
/// negative `R_i`. Lags are evaluated one at a time, so cost is `O(N * lag)`.
pub fn ess_1d(x: &[f64]) -> Option<f64> {
    let n = x.len();
    let m = mean(x);
    let c: Vec<f64> = x.iter().map(|v| v - m).collect();
    let var = c.iter().map(|v| v * v).sum::<f64>() / n as f64;
    if var.is_nan() || var <= 0.0 {
        return None;
    }
    let nf = n as f64;
    let mut tau = 1.0;
    for lag in 1..n {
        let r = autocorr_centered(&c, var, lag);
        if r < 0.0 {
            break;
        }
        tau += 2.0 * (1.0 - lag as f64 / nf) * r;
    }
    Some((nf / tau).clamp(f64::MIN_POSITIVE, nf))
}

/// Per-parameter single-chain ESS.
pub fn ess(samples: &DMatrix<f64>) -> Result<EssSummary> {
    let (n, d) = samples.shape();
    if n < 4 {
        return Err(Error::Domain(format!("ESS needs at least 4 samples, got {n}")));
    }
    if d == 0 {
        return Err(Error::Shape("sample matrix has no columns".into()));
    }
    let per: Vec<Option<f64>> = par::map_indices(d, false, |j| ess_1d(samples.column(j).as_slice()));
    let degenerate: Vec<bool> = per.iter().map(Option::is_none).collect();
    let per_parameter_ess: Vec<f64> = per.into_iter().map(|e| e.unwrap_or(n as f64)).collect();
    let steps: Vec<f64> = per_parameter_ess.iter().map(|e| e / n as f64).collect();
    Ok(EssSummary {
        mean_per_step_ess: mean(&steps),
        min_per_step_ess: steps.iter().copied().fold(f64::INFINITY, f64::min),
        max_per_step_ess: steps.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        per_parameter_ess,
        degenerate,
        n,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GelmanRubin {
    /// `NaN` where [`GelmanRubin::undefined`] is set.
    pub r_hat: Vec<f64>,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    pub undefined: Vec<bool>,
    pub m: usize,
    pub n: usize,
}

impl GelmanRubin {
    /// Mean and standard deviation of the defined `r_hat` entries.
    pub fn mean_sd(&self) -> Option<(f64, f64)> {
        let v: Vec<f64> = self.r_hat.iter().copied().filter(|r| r.is_finite()).collect();
        if v.is_empty() {
            return None;
        }
        let mu = mean(&v);
        let var = v.iter().map(|r| (r - mu) * (r - mu)).sum::<f64>() / v.len() as f64;
        Some((mu, var.sqrt()))
    }
}

/// Potential scale reduction per parameter:
/// `W` the mean within-chain variance, `B = N/(M-1) sum (xbar - xbar_m)^2`,
/// `R = ((N-1)/N W + B/N) / W`.
pub fn gelman_rubin(chains: &[DMatrix<f64>]) -> Result<GelmanRubin> {
    let m = chains.len();
    if m < 2 {
        return Err(Error::Domain(format!("R-hat needs at least 2 chains, got {m}")));
    }
    let (n, d) = chains[0].shape();
    if n < 2 {
        return Err(Error::Domain("R-hat needs chains of length at least 2".into()));
    }
    if chains.iter().any(|c| c.shape() != (n, d)) {
        return Err(Error::Shape("chains differ in shape".into()));
    }
    let nf = n as f64;
    let stats: Vec<(f64, f64)> = par::map_indices(d, false, |j| {
        let mut means = Vec::with_capacity(m);
        let mut w = 0.0;
        for c in chains {
            let col = c.column(j);
            let mu = col.mean();
            w += col.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / (nf - 1.0);
            means.push(mu);
        }
        w /= m as f64;
        let grand = mean(&means);
        let b = nf / (m as f64 - 1.0) * means.iter().map(|v| (v - grand) * (v - grand)).sum::<f64>();
        (w, b)
    });
    let mut out = GelmanRubin {
        r_hat: Vec::with_capacity(d),
        w: Vec::with_capacity(d),
        b: Vec::with_capacity(d),
        undefined: Vec::with_capacity(d),
        m,
        n,
    };
    for (w, b) in stats {
        let undefined = w.is_nan() || w <= 0.0;
        out.r_hat
            .push(if undefined { f64::NAN } else { ((nf - 1.0) / nf * w + b / nf) / w });
        out.w.push(w);
        out.b.push(b);
        out.undefined.push(undefined);
    }
    Ok(out)
}

/// R-hat on growing prefixes of the chains.
pub fn rhat_series(chains: &[DMatrix<f64>], lengths: &[usize]) -> Result<Vec<(usize, GelmanRubin)>> {
    lengths
        .iter()
        .map(|&len| {
            let prefixes: Vec<DMatrix<f64>> = chains
                .iter()
                .map(|c| {
                    if len > c.nrows() {
                        Err(Error::Bounds {
                            requested: len,
                            available: c.nrows(),
                        })
                    } else {
                        Ok(c.rows(0, len).into_owned())
                    }
                })
                .collect::<Result<_>>()?;
            Ok((len, gelman_rubin(&prefixes)?))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PcTraces {
    /// `N x r` projections onto the leading directions.
    pub scores: DMatrix<f64>,
    /// One unit direction per column, `D x r`.
    pub loadings: DMatrix<f64>,
    /// Fraction of total variance per returned component.
    pub explained_variance: Vec<f64>,
    /// Set when fewer than the requested components exist.
    pub rank_deficient: bool,
}

/// Principal-component traces of the centered samples. Each direction is
/// signed so its largest-magnitude loading is positive.
pub fn pc_traces(samples: &DMatrix<f64>, n_components: usize) -> Result<PcTraces> {
    let (n, d) = samples.shape();
    if n <= n_components {
        return Err(Error::Domain(format!(
            "{n_components} components need more than {n} samples"
        )));
    }
    let means = samples.row_mean();
    let mut centered = samples.clone();
    for mut row in centered.row_iter_mut() {
        row -= &means;
    }
    let cov = centered.tr_mul(&centered) / (n as f64 - 1.0);
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let total: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0)).sum();
    let top = eig.eigenvalues[order[0]].max(0.0);
    let tol = top * 1e-12 * d as f64;
    let kept: Vec<usize> = order
        .into_iter()
        .take(n_components)
        .filter(|&i| eig.eigenvalues[i] > tol && eig.eigenvalues[i] > 0.0)
        .collect();
    let r = kept.len();
    let mut loadings = DMatrix::zeros(d, r);
    for (c, &i) in kept.iter().enumerate() {
        let mut v = eig.eigenvectors.column(i).into_owned();
        let imax = v.iamax();
        if v[imax] < 0.0 {
            v = -v;
        }
        loadings.set_column(c, &v);
    }
    Ok(PcTraces {
        scores: &centered * &loadings,
        explained_variance: kept.iter().map(|&i| eig.eigenvalues[i] / total).collect(),
        loadings,
        rank_deficient: r < n_components,
    })
}

/// Kolmogorov-Smirnov statistics and asymptotic p-values.
pub mod ks {
    /// `P(K > lambda)` for the Kolmogorov distribution.
    pub fn kolmogorov_sf(lambda: f64) -> f64 {
        if lambda < 0.2 {
            return 1.0;
        }
        let mut s = 0.0;
        for j in 1..=100 {
            let jf = j as f64;
            let term = 2.0 * (-2.0 * jf * jf * lambda * lambda).exp();
            s += if j % 2 == 1 { term } else { -term };
            if term < 1e-16 {
                break;
            }
        }
        s.clamp(0.0, 1.0)
    }

    fn sorted(x: &[f64]) -> Vec<f64> {
        let mut v = x.to_vec();
        v.sort_by(f64::total_cmp);
        v
    }

    /// Sup distance between the empirical CDF of `x` and `cdf`.
    pub fn one_sample_statistic(x: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
        let v = sorted(x);
        let n = v.len() as f64;
        v.iter()
            .enumerate()
            .map(|(i, &xi)| {
                let f = cdf(xi);
                (f - i as f64 / n).max((i + 1) as f64 / n - f)
            })
            .fold(0.0, f64::max)
    }

    pub fn one_sample_p_value(x: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
        let d = one_sample_statistic(x, cdf);
        let sn = (x.len() as f64).sqrt();
        kolmogorov_sf((sn + 0.12 + 0.11 / sn) * d)
    }

    pub fn two_sample_statistic(x: &[f64], y: &[f64]) -> f64 {
        let a = sorted(x);
        let b = sorted(y);
        let (n, m) = (a.len() as f64, b.len() as f64);
        let (mut i, mut j, mut d) = (0usize, 0usize, 0.0f64);
        while i < a.len() && j < b.len() {
            let t = a[i].min(b[j]);
            while i < a.len() && a[i] <= t {
                i += 1;
            }
            while j < b.len() && b[j] <= t {
                j += 1;
            }
            d = d.max((i as f64 / n - j as f64 / m).abs());
        }
        d
    }

    pub fn two_sample_p_value(x: &[f64], y: &[f64]) -> f64 {
        let d = two_sample_statistic(x, y);
        let (n, m) = (x.len() as f64, y.len() as f64);
        let en = (n * m / (n + m)).sqrt();
        kolmogorov_sf((en + 0.12 + 0.11 / en) * d)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn iid(n: usize, d: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(n, d, |_, _| rng.sample(StandardNormal))
    }

    fn ar1(n: usize, rho: f64, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = (1.0 - rho * rho).sqrt();
        let mut x: f64 = rng.sample(StandardNormal);
        (0..n)
            .map(|_| {
                x = rho * x + s * rng.sample::<f64, _>(StandardNormal);
                x
            })
            .collect()
    }

    #[test]
    fn iid_chain_has_unit_per_step_ess() {
        let s = ess(&iid(10_000, 3, 1)).unwrap();
        for e in s.per_step() {
            assert!((0.8..=1.2).contains(&e), "{e}");
        }
        assert!(s.degenerate.iter().all(|d| !d));
    }

    #[test]
    fn ar1_ess_matches_closed_form() {
        let x = ar1(100_000, 0.5, 2);
        let e = ess_1d(&x).unwrap() / x.len() as f64;
        assert!((e - 1.0 / 3.0).abs() < 0.15 / 3.0, "{e}");
    }

    #[test]
    fn constant_chain_is_degenerate() {
        let s = ess(&DMatrix::from_element(50, 2, 3.0)).unwrap();
        assert_eq!(s.per_parameter_ess, vec![50.0, 50.0]);
        assert_eq!(s.degenerate, vec![true, true]);
        assert!(ess(&DMatrix::zeros(3, 1)).is_err());
    }

    #[test]
    fn thinning_keeps_ess_consistent() {
        let x = ar1(100_000, 0.9, 3);
        let full = ess_1d(&x).unwrap();
        for t in [2, 5, 10] {
            let thinned: Vec<f64> = x.iter().step_by(t).copied().collect();
            let et = ess_1d(&thinned).unwrap();
            let bound = full / x.len() as f64 * thinned.len() as f64 * 0.85;
            assert!(et >= bound, "thin {t}: {et} < {bound}");
        }
    }

    #[test]
    fn autocorrelation_starts_at_one() {
        let x = ar1(10_000, 0.5, 4);
        let r = autocorrelation(&x, 3).unwrap();
        assert!((r[0] - 1.0).abs() < 1e-12);
        assert!((r[1] - 0.5).abs() < 0.05);
        assert!(autocorrelation(&x, 10_000).is_err());
    }

    #[test]
    fn rhat_near_one_for_identical_distributions() {
        let chains: Vec<_> = (0..3).map(|s| iid(10_000, 4, 10 + s)).collect();
        let g = gelman_rubin(&chains).unwrap();
        for r in &g.r_hat {
            assert!((0.99..=1.05).contains(r), "{r}");
        }
    }

    #[test]
    fn rhat_detects_separated_chains() {
        let a = iid(1000, 1, 1);
        let b = iid(1000, 1, 2).add_scalar(5.0);
        let g = gelman_rubin(&[a, b]).unwrap();
        assert!(g.r_hat[0] > 1.2);
    }

    #[test]
    fn rhat_of_duplicated_chain() {
        let a = iid(1000, 2, 7);
        let g = gelman_rubin(&[a.clone(), a]).unwrap();
        for (r, b) in g.r_hat.iter().zip(&g.b) {
            assert_eq!(*b, 0.0);
            assert!((r - 999.0 / 1000.0).abs() < 1e-12);
        }
    }

    #[test]
    fn rhat_flags_constant_parameters() {
        let a = DMatrix::from_element(10, 1, 1.0);
        let g = gelman_rubin(&[a.clone(), a]).unwrap();
        assert!(g.undefined[0] && g.r_hat[0].is_nan());
        assert!(gelman_rubin(&[iid(10, 1, 0)]).is_err());
        assert!(gelman_rubin(&[iid(10, 1, 0), iid(11, 1, 0)]).is_err());
    }

    #[test]
    fn rhat_series_uses_prefixes() {
        let chains: Vec<_> = (0..2).map(|s| iid(100, 1, s)).collect();
        let s = rhat_series(&chains, &[10, 100]).unwrap();
        assert_eq!(s[0].1.n, 10);
        assert_eq!(s[1].1, gelman_rubin(&chains).unwrap());
        assert!(rhat_series(&chains, &[101]).is_err());
    }

    #[test]
    fn pc_of_rank_one_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let dir = [0.6, -0.8, 0.0];
        let samples = DMatrix::from_fn(200, 3, |_, _| 0.0);
        let mut samples = samples;
        for i in 0..200 {
            let t: f64 = rng.sample(StandardNormal);
            for j in 0..3 {
                samples[(i, j)] = 1.0 + t * dir[j];
            }
        }
        let pc = pc_traces(&samples, 2).unwrap();
        assert_eq!(pc.scores.ncols(), 1);
        assert!(pc.rank_deficient);
        assert!((pc.explained_variance[0] - 1.0).abs() < 1e-10);
        // Sign convention: the -0.8 entry dominates, so it is flipped positive.
        assert!((pc.loadings[(1, 0)] - 0.8).abs() < 1e-10);
        assert!((pc.loadings[(0, 0)] + 0.6).abs() < 1e-10);
    }

    #[test]
    fn pc_scores_are_uncorrelated() {
        let mut x = iid(2000, 4, 8);
        for i in 0..2000 {
            x[(i, 1)] += 0.7 * x[(i, 0)];
            x[(i, 3)] -= 0.3 * x[(i, 2)] + 0.2 * x[(i, 1)];
        }
        let pc = pc_traces(&x, 3).unwrap();
        let s = &pc.scores;
        let cov = s.tr_mul(s);
        for a in 0..3 {
            for b in 0..3 {
                if a != b {
                    let rel = cov[(a, b)].abs() / (cov[(a, a)] * cov[(b, b)]).sqrt();
                    assert!(rel < 1e-10, "{rel}");
                }
            }
        }
    }

    #[test]
    fn pc_explained_variance_of_anisotropic_gaussian() {
        let mut x = iid(10_000, 2, 9);
        x.column_mut(0).scale_mut(3.0);
        let pc = pc_traces(&x, 2).unwrap();
        let ratio = pc.explained_variance[0];
        assert!((ratio - 0.9).abs() < 0.09, "{ratio}");
        assert!(pc_traces(&x.rows(0, 2).into_owned(), 2).is_err());
    }

    #[test]
    fn ks_accepts_normal_and_rejects_shifted() {
        let x: Vec<f64> = iid(5000, 1, 11).as_slice().to_vec();
        let y: Vec<f64> = iid(5000, 1, 12).as_slice().to_vec();
        let cdf = crate::network::std_normal_cdf;
        assert!(ks::one_sample_p_value(&x, cdf) > 0.01);
        assert!(ks::two_sample_p_value(&x, &y) > 0.01);
        let shifted: Vec<f64> = y.iter().map(|v| v + 0.2).collect();
        assert!(ks::one_sample_p_value(&shifted, cdf) < 0.01);
        assert!(ks::two_sample_p_value(&x, &shifted) < 0.01);
    }

    #[test]
    fn kolmogorov_tail_at_one_percent() {
        // Classic 1% critical value of the limiting distribution.
        assert!((ks::kolmogorov_sf(1.6276) - 0.01).abs() < 1e-4);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]
            #[test]
            fn ess_is_affine_invariant(seed in 0u64..1000, scale in 0.01f64..100.0, shift in -50.0f64..50.0) {
                let x = ar1(500, 0.6, seed);
                let y: Vec<f64> = x.iter().map(|v| scale * v + shift).collect();
                let (a, b) = (ess_1d(&x).unwrap(), ess_1d(&y).unwrap());
                prop_assert!((a - b).abs() <= 1e-9 * a);
            }

            #[test]
            fn ess_within_bounds(seed in 0u64..1000, rho in -0.9f64..0.99) {
                let x = ar1(300, rho, seed);
                let e = ess_1d(&x).unwrap();
                prop_assert!(e > 0.0 && e <= 300.0);
            }
        }
    }
}
