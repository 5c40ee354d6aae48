//! Layer covariance spectra, the Marchenko-Pastur law and the right-edge
//! outlier threshold.
//!
//! Conventions: a layer `W` is oriented so that it has at least as many rows
//! as columns (wide matrices are transposed), giving `N >= M` and aspect
//! ratio `Q = N / M >= 1`. The covariance is `X = WᵀW / N` and its `M`
//! eigenvalues are obtained from the singular values of `W` as `s² / N`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor_store::WeightMatrix;

/// Eigenvalues at or below this fraction of the largest one are set to zero.
pub const ZERO_CLAMP: f64 = 1e-12;
/// Eigenvalues above this quantile are excluded from the MP fit.
pub const BULK_QUANTILE: f64 = 0.99;
/// Minimum number of bulk eigenvalues needed for a fit.
pub const MIN_BULK: usize = 10;
/// Default multiplier on the Tracy-Widom fluctuation scale.
pub const DEFAULT_C_TW: f64 = 4.0;

/// Empirical spectral density of a layer covariance, stored as its sorted
/// eigenvalues.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Esd {
    /// Ascending, nonnegative.
    pub eigenvalues: Vec<f64>,
    pub q: f64,
    /// Long side of the oriented matrix (the normalization).
    pub n: usize,
    /// Short side; equals `eigenvalues.len()`.
    pub m: usize,
    /// Whether the layer was transposed to make `n >= m`.
    pub transposed: bool,
}

impl Esd {
    pub fn from_eigenvalues(mut eigenvalues: Vec<f64>, n: usize) -> Result<Self> {
        let m = eigenvalues.len();
        if m == 0 || n < m {
            return Err(Error::Dimension(format!(
                "spectrum of {m} eigenvalues with normalization {n}"
            )));
        }
        if eigenvalues.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite eigenvalue".into()));
        }
        eigenvalues.sort_by(f64::total_cmp);
        clamp_small(&mut eigenvalues);
        Ok(Self {
            eigenvalues,
            q: n as f64 / m as f64,
            n,
            m,
            transposed: false,
        })
    }

    pub fn max(&self) -> f64 {
        *self.eigenvalues.last().expect("nonempty spectrum")
    }

    pub fn trace(&self) -> f64 {
        self.eigenvalues.iter().sum()
    }
}

fn clamp_small(sorted: &mut [f64]) {
    let max = sorted.last().copied().unwrap_or(0.0).max(0.0);
    let tol = ZERO_CLAMP * max;
    for v in sorted.iter_mut() {
        if *v <= tol {
            *v = 0.0;
        }
    }
}

/// Eigenvalues together with unit eigenvectors of `X`, both in ascending
/// eigenvalue order.
#[derive(Debug, Clone)]
pub struct SpectralDecomposition {
    pub esd: Esd,
    pub eigenvectors: Vec<Vec<f64>>,
}

/// Fitted Marchenko-Pastur parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MpFit {
    pub sigma2: f64,
    pub q: f64,
    pub lambda_minus: f64,
    pub lambda_plus: f64,
    pub ks_distance: f64,
    pub bulk_fraction_used: f64,
}

impl MpFit {
    /// An unfitted parameter set, e.g. for evaluating the law directly.
    pub fn from_params(sigma2: f64, q: f64) -> Result<Self> {
        let (lambda_minus, lambda_plus) = mp_edges(sigma2, q)?;
        Ok(Self {
            sigma2,
            q,
            lambda_minus,
            lambda_plus,
            ks_distance: 0.0,
            bulk_fraction_used: 1.0,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EdgeThreshold {
    pub delta_tw: f64,
    pub c_tw: f64,
    pub lambda_plus: f64,
    pub threshold: f64,
}

/// The layer as an `n x m` faer matrix with `n >= m`.
pub(crate) fn oriented(w: &WeightMatrix) -> (faer::Mat<f64>, bool) {
    let (rows, cols) = w.shape();
    if rows >= cols {
        (faer::Mat::from_fn(rows, cols, |i, j| w.get(i, j)), false)
    } else {
        (faer::Mat::from_fn(cols, rows, |i, j| w.get(j, i)), true)
    }
}

fn check_dims(w: &WeightMatrix) -> Result<()> {
    if !w.is_matrix() {
        return Err(Error::Dimension(format!(
            "layer `{}` is {}x{}; both sides must be at least 2",
            w.layer_id(),
            w.rows(),
            w.cols()
        )));
    }
    Ok(())
}

// faer reports non-convergence by panicking.
fn guarded<T>(what: &str, f: impl FnOnce() -> T) -> Result<T> {
    std::panic::catch_unwind(std::panic::AssertUnwindSafe(f))
        .map_err(|_| Error::Numerical(format!("{what} failed to converge")))
}

/// Eigenvalues of `X = WᵀW / N` via the singular values of `W`.
pub fn covariance_spectrum(w: &WeightMatrix) -> Result<Esd> {
    check_dims(w)?;
    let (a, transposed) = oriented(w);
    let n = a.nrows();
    let singular = guarded("SVD", || a.singular_values())?;
    let eigs = singular.iter().map(|s| s * s / n as f64).collect();
    let mut esd = Esd::from_eigenvalues(eigs, n)?;
    esd.transposed = transposed;
    Ok(esd)
}

/// Like [`covariance_spectrum`] but also returns the eigenvectors of `X`
/// (right singular vectors of the oriented layer).
pub fn covariance_decomposition(w: &WeightMatrix) -> Result<SpectralDecomposition> {
    check_dims(w)?;
    let (a, transposed) = oriented(w);
    let (n, m) = (a.nrows(), a.ncols());
    let svd = guarded("SVD", || a.thin_svd())?;
    let s = svd.s_diagonal();
    let v = svd.v();

    // faer returns singular values in nonincreasing order.
    let mut pairs: Vec<(f64, Vec<f64>)> = (0..m)
        .map(|k| {
            let sk = s.read(k);
            let vec = (0..m).map(|i| v.read(i, k)).collect();
            (sk * sk / n as f64, vec)
        })
        .collect();
    if pairs.iter().any(|(l, v)| !l.is_finite() || v.iter().any(|x| !x.is_finite())) {
        return Err(Error::Numerical("SVD produced non-finite output".into()));
    }
    pairs.sort_by(|x, y| x.0.total_cmp(&y.0));
    let (eigs, mut eigenvectors): (Vec<f64>, Vec<Vec<f64>>) = pairs.into_iter().unzip();
    for vec in &mut eigenvectors {
        canonical_sign(vec);
    }
    let mut esd = Esd::from_eigenvalues(eigs, n)?;
    esd.transposed = transposed;
    Ok(SpectralDecomposition { esd, eigenvectors })
}

/// Flips `v` so that its largest-magnitude component is positive.
pub fn canonical_sign(v: &mut [f64]) {
    let pivot = v
        .iter()
        .copied()
        .max_by(|a, b| a.abs().total_cmp(&b.abs()))
        .unwrap_or(0.0);
    if pivot < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

/// `(λ₋, λ₊) = σ²(1 ∓ Q^{-1/2})²`.
pub fn mp_edges(sigma2: f64, q: f64) -> Result<(f64, f64)> {
    if !(sigma2 > 0.0 && sigma2.is_finite()) {
        return Err(Error::Domain(format!("sigma2 must be positive, got {sigma2}")));
    }
    if !(q >= 1.0 && q.is_finite()) {
        return Err(Error::Domain(format!("Q must be at least 1, got {q}")));
    }
    let r = q.powf(-0.5);
    Ok((sigma2 * (1.0 - r).powi(2), sigma2 * (1.0 + r).powi(2)))
}

/// Marchenko-Pastur density; zero outside `[λ₋, λ₊]`.
pub fn mp_density(lambda: f64, fit: &MpFit) -> f64 {
    let (lo, hi) = (fit.lambda_minus, fit.lambda_plus);
    if !(lambda > lo && lambda < hi) || lambda <= 0.0 {
        return 0.0;
    }
    fit.q / (2.0 * PI * fit.sigma2) * ((hi - lambda) * (lambda - lo)).sqrt() / lambda
}

/// Marchenko-Pastur cumulative distribution, in closed form.
///
/// With `y = 1/Q`, `x = λ/σ²` and the substitution
/// `x = (1 + y) − 2√y·cos φ`, the integral of the density reduces to
/// elementary functions of `φ ∈ [0, π]`.
pub fn mp_cdf(lambda: f64, sigma2: f64, q: f64) -> f64 {
    let y = 1.0 / q;
    let sy = y.sqrt();
    let a = (1.0 - sy).powi(2);
    let b = (1.0 + sy).powi(2);
    let x = lambda / sigma2;
    if x <= a {
        return 0.0;
    }
    if x >= b {
        return 1.0;
    }
    let phi = ((1.0 + y - x) / (2.0 * sy)).clamp(-1.0, 1.0).acos();
    let smooth = (2.0 / PI) * (phi.sin() / (2.0 * sy) + (1.0 + y) * phi / (4.0 * y));
    let half = 0.5 * phi;
    let arc = (b.sqrt() * half.sin()).atan2(a.sqrt() * half.cos());
    (smooth - (1.0 - y) / (PI * y) * arc).clamp(0.0, 1.0)
}

/// Number of eigenvalues (from the bottom of an ascending spectrum) that lie
/// at or below the bulk quantile.
pub fn bulk_len(sorted: &[f64]) -> usize {
    if sorted.is_empty() {
        return 0;
    }
    let pos = BULK_QUANTILE * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let cut = sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo]);
    sorted.partition_point(|&v| v <= cut)
}

/// Kolmogorov-Smirnov distance between the MP law and the empirical CDF,
/// evaluated at the `bulk` smallest eigenvalues while keeping the full
/// spectrum as the ECDF denominator. Trimmed outliers therefore shift
/// nothing.
pub fn ks_distance(sorted: &[f64], bulk: usize, sigma2: f64, q: f64) -> f64 {
    let total = sorted.len() as f64;
    sorted[..bulk]
        .iter()
        .enumerate()
        .map(|(i, &lam)| {
            let f = mp_cdf(lam, sigma2, q);
            (f - i as f64 / total).abs().max((f - (i + 1) as f64 / total).abs())
        })
        .fold(0.0, f64::max)
}

/// Fits the MP scale `σ²` by minimizing the KS distance to the bulk.
///
/// The search runs on `log(σ²/m)` over `[0.01, 100]`, where `m` is the bulk
/// mean: a coarse grid locates the basin, golden-section search refines it.
/// Working relative to `m` makes the fit scale-equivariant.
pub fn fit_mp(esd: &Esd) -> Result<MpFit> {
    let eigs = &esd.eigenvalues;
    if eigs.len() < MIN_BULK {
        return Err(Error::Fit(format!(
            "{} eigenvalues; at least {MIN_BULK} required",
            eigs.len()
        )));
    }
    let bulk = bulk_len(eigs);
    if bulk < MIN_BULK {
        return Err(Error::Fit(format!(
            "bulk of {bulk} eigenvalues after trimming; at least {MIN_BULK} required"
        )));
    }
    let scale = eigs[..bulk].iter().sum::<f64>() / bulk as f64;
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::Fit("bulk has zero trace".into()));
    }
    let q = esd.q;
    let normalized: Vec<f64> = eigs.iter().map(|v| v / scale).collect();
    let objective = |log_t: f64| ks_distance(&normalized, bulk, log_t.exp(), q);

    const GRID: usize = 161;
    let (lo, hi) = (0.01f64.ln(), 100f64.ln());
    let step = (hi - lo) / (GRID - 1) as f64;
    let mut best = (f64::INFINITY, 0usize);
    for k in 0..GRID {
        let val = objective(lo + step * k as f64);
        if val < best.0 {
            best = (val, k);
        }
    }
    let k = best.1;
    let mut a = lo + step * k.saturating_sub(1) as f64;
    let mut b = lo + step * (k + 1).min(GRID - 1) as f64;

    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (objective(c), objective(d));
    for _ in 0..100 {
        if (b - a).abs() < 1e-13 {
            break;
        }
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = objective(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = objective(d);
        }
    }
    let mut log_t = 0.5 * (a + b);
    let mut ks = objective(log_t);
    let grid_t = lo + step * k as f64;
    if best.0 < ks {
        log_t = grid_t;
        ks = best.0;
    }

    let sigma2 = log_t.exp() * scale;
    let (lambda_minus, lambda_plus) = mp_edges(sigma2, q)?;
    Ok(MpFit {
        sigma2,
        q,
        lambda_minus,
        lambda_plus,
        ks_distance: ks,
        bulk_fraction_used: bulk as f64 / eigs.len() as f64,
    })
}

/// Right-edge outlier threshold `λ₊ + Δ_TW` with
/// `Δ_TW = c·σ²·N^{-2/3}·(1 + Q^{-1/2})·(1 + Q^{1/2})^{1/3}`, the
/// fluctuation scale of the largest sample-covariance eigenvalue.
pub fn tw_delta(fit: &MpFit, n: usize, c_tw: f64) -> Result<EdgeThreshold> {
    if n < 2 {
        return Err(Error::Domain(format!("N must be at least 2, got {n}")));
    }
    if !(c_tw > 0.0 && c_tw.is_finite()) {
        return Err(Error::Domain(format!("c_tw must be positive, got {c_tw}")));
    }
    if !(fit.sigma2 > 0.0 && fit.q >= 1.0) {
        return Err(Error::Domain("invalid MP fit".into()));
    }
    let delta_tw = c_tw
        * fit.sigma2
        * (n as f64).powf(-2.0 / 3.0)
        * (1.0 + fit.q.powf(-0.5))
        * (1.0 + fit.q.sqrt()).cbrt();
    Ok(EdgeThreshold {
        delta_tw,
        c_tw,
        lambda_plus: fit.lambda_plus,
        threshold: fit.lambda_plus + delta_tw,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(rows: usize, cols: usize, seed: u64) -> WeightMatrix {
        let mut rng = crate::seed::rng(seed);
        let data = (0..rows * cols)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        WeightMatrix::new("g", rows, cols, data).unwrap()
    }

    /// Cyclic Jacobi eigenvalues of a small symmetric matrix.
    fn jacobi_eigenvalues(mut a: Vec<Vec<f64>>) -> Vec<f64> {
        let n = a.len();
        for _ in 0..100 {
            let off: f64 = (0..n)
                .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
                .map(|(i, j)| a[i][j] * a[i][j])
                .sum();
            if off < 1e-30 {
                break;
            }
            for p in 0..n {
                for q in p + 1..n {
                    if a[p][q].abs() < 1e-300 {
                        continue;
                    }
                    let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let t = if theta == 0.0 { 1.0 } else { t };
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    for k in 0..n {
                        let (akp, akq) = (a[k][p], a[k][q]);
                        a[k][p] = c * akp - s * akq;
                        a[k][q] = s * akp + c * akq;
                    }
                    for k in 0..n {
                        let (apk, aqk) = (a[p][k], a[q][k]);
                        a[p][k] = c * apk - s * aqk;
                        a[q][k] = s * apk + c * aqk;
                    }
                }
            }
        }
        let mut d: Vec<f64> = (0..n).map(|i| a[i][i]).collect();
        d.sort_by(f64::total_cmp);
        d
    }

    #[test]
    fn identity_spectrum() {
        let w = WeightMatrix::from_fn("i", 2, 2, |i, j| if i == j { 1.0 } else { 0.0 }).unwrap();
        let esd = covariance_spectrum(&w).unwrap();
        assert_eq!(esd.m, 2);
        for l in &esd.eigenvalues {
            assert!((l - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn wide_matrix_is_transposed() {
        let w = WeightMatrix::new("w", 2, 3, vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let esd = covariance_spectrum(&w).unwrap();
        assert!(esd.transposed);
        assert_eq!((esd.n, esd.m), (3, 2));
        // Oracle: the nonzero eigenvalues of the 3x3 WᵀW, normalized by the
        // long side after transposition.
        let wt = w.transpose();
        let gram: Vec<Vec<f64>> = (0..3)
            .map(|i| (0..3).map(|j| (0..2).map(|k| w.get(k, i) * w.get(k, j)).sum()).collect())
            .collect();
        let full = jacobi_eigenvalues(gram);
        assert!(full[0].abs() < 1e-9);
        let expected: Vec<f64> = full[1..].iter().map(|l| l / wt.rows() as f64).collect();
        for (got, want) in esd.eigenvalues.iter().zip(&expected) {
            assert!((got - want).abs() < 1e-12 * want.max(1.0), "{got} vs {want}");
        }
        // Frozen values from the oracle: (91 ± √8065)/6.
        let hi = (91.0 + 8065f64.sqrt()) / 6.0;
        assert!((esd.max() - hi).abs() < 1e-12);
    }

    #[test]
    fn zero_matrix_spectrum() {
        let w = WeightMatrix::new("z", 3, 3, vec![0.0; 9]).unwrap();
        assert_eq!(covariance_spectrum(&w).unwrap().eigenvalues, vec![0.0; 3]);
    }

    #[test]
    fn vector_is_dimension_error() {
        let w = WeightMatrix::new("b", 1, 5, vec![1.0; 5]).unwrap();
        assert!(matches!(covariance_spectrum(&w), Err(Error::Dimension(_))));
    }

    #[test]
    fn edges_examples() {
        assert_eq!(mp_edges(1.0, 1.0).unwrap(), (0.0, 4.0));
        assert_eq!(mp_edges(1.0, 4.0).unwrap(), (0.25, 2.25));
        assert_eq!(mp_edges(2.0, 1.0).unwrap(), (0.0, 8.0));
        assert!(matches!(mp_edges(0.0, 1.0), Err(Error::Domain(_))));
        assert!(matches!(mp_edges(1.0, 0.5), Err(Error::Domain(_))));
    }

    #[test]
    fn density_examples() {
        let square = MpFit::from_params(1.0, 1.0).unwrap();
        assert_eq!(mp_density(4.0, &square), 0.0);
        assert!((mp_density(2.0, &square) - 1.0 / (2.0 * PI)).abs() < 1e-15);
        let tall = MpFit::from_params(1.0, 4.0).unwrap();
        assert_eq!(mp_density(5.0, &tall), 0.0);
        assert_eq!(mp_density(0.1, &tall), 0.0);
    }

    /// Simpson quadrature of the density in the angle variable, where the
    /// integrand is smooth even at a hard left edge.
    fn density_mass(fit: &MpFit, upto: f64) -> f64 {
        let mid = 0.5 * (fit.lambda_plus + fit.lambda_minus);
        let rad = 0.5 * (fit.lambda_plus - fit.lambda_minus);
        let phi_max = ((mid - upto) / rad).clamp(-1.0, 1.0).acos();
        let steps = 20_000;
        let h = phi_max / steps as f64;
        let g = |t: f64| {
            let lam = mid - rad * t.cos();
            if lam <= 0.0 {
                // Q = 1 left edge: r²sin²θ/λ → 2r as θ → 0.
                return fit.q / (2.0 * PI * fit.sigma2) * 2.0 * rad;
            }
            mp_density(lam, fit).max(0.0) * rad * t.sin()
        };
        let mut acc = g(0.0) + g(phi_max);
        for i in 1..steps {
            acc += g(i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        acc * h / 3.0
    }

    #[test]
    fn density_has_unit_mass_and_matches_cdf() {
        for &(s2, q) in &[(1.0, 1.0), (1.0, 2.0), (0.3, 4.0), (7.0, 1.37), (1.0, 50.0)] {
            let fit = MpFit::from_params(s2, q).unwrap();
            let mass = density_mass(&fit, fit.lambda_plus);
            assert!((mass - 1.0).abs() < 1e-6, "mass {mass} for {s2},{q}");
            for frac in [0.1, 0.35, 0.5, 0.8, 0.97] {
                let x = fit.lambda_minus + frac * (fit.lambda_plus - fit.lambda_minus);
                let quad = density_mass(&fit, x);
                let closed = mp_cdf(x, s2, q);
                assert!((quad - closed).abs() < 1e-7, "cdf {closed} vs {quad} at {x}");
            }
        }
    }

    #[test]
    fn fit_recovers_unit_variance() {
        let w = gaussian(1000, 500, 11);
        let fit = fit_mp(&covariance_spectrum(&w).unwrap()).unwrap();
        assert!((fit.sigma2 - 1.0).abs() < 0.05, "{fit:?}");
        assert!(fit.ks_distance < 0.05);
        assert_eq!(fit.q, 2.0);
    }

    #[test]
    fn fit_is_scale_equivariant() {
        let w = gaussian(300, 100, 5);
        let base = fit_mp(&covariance_spectrum(&w).unwrap()).unwrap();
        for c in [0.1, 3.0, 10.0] {
            let scaled = fit_mp(&covariance_spectrum(&w.scaled(c).unwrap()).unwrap()).unwrap();
            let rel = (scaled.sigma2 - c * c * base.sigma2).abs() / (c * c * base.sigma2);
            assert!(rel < 1e-9, "c={c} rel={rel}");
        }
    }

    #[test]
    fn tiny_spectrum_is_fit_error() {
        let esd = Esd::from_eigenvalues(vec![1.0, 2.0, 3.0, 4.0, 5.0], 10).unwrap();
        assert!(matches!(fit_mp(&esd), Err(Error::Fit(_))));
    }

    #[test]
    fn tw_delta_examples() {
        let fit = MpFit::from_params(1.0, 1.0).unwrap();
        let t = tw_delta(&fit, 1000, 4.0).unwrap();
        // 4 · 1000^{-2/3} · 2 · 2^{1/3}
        let hand = 4.0 * 0.01 * 2.0 * 2f64.powf(1.0 / 3.0);
        assert!((t.delta_tw - hand).abs() < 1e-12);
        assert!((t.delta_tw - 0.1008).abs() < 1e-4);
        assert_eq!(t.threshold, 4.0 + t.delta_tw);
        assert!(matches!(tw_delta(&fit, 1000, 0.0), Err(Error::Domain(_))));
        let doubled = MpFit::from_params(2.0, 1.0).unwrap();
        assert_eq!(tw_delta(&doubled, 1000, 4.0).unwrap().delta_tw, 2.0 * t.delta_tw);
    }

    #[test]
    fn bulk_trims_top_percent() {
        let v: Vec<f64> = (0..250).map(f64::from).collect();
        assert_eq!(bulk_len(&v), 247);
        let ten: Vec<f64> = (0..10).map(f64::from).collect();
        assert_eq!(bulk_len(&ten), 9);
    }
}
