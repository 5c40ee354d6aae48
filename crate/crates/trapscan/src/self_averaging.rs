//! Sampled-mean stability of a shuffled layer and the trap-induced lower
//! bound on row-mean variance.
//!
//! For `A ∈ R^{N×M}` with row means `r_i` and an eigenpair `(λ, v)` of
//! `X = AᵀA / N` with `η = |⟨v, 𝟙/√M⟩|`:
//!
//! ```text
//! (1/N) Σ r_i²  ≥  η² λ / M
//! Var_i(r_i)    ≥  η² λ / M − r̄²
//! ```
//!
//! and the same bound holds for the variance of the random sampled mean
//! `μ_{I,J} = (1/s) Σ_{j∈J} A_{Ij}` at every sampling scale `s`.

use std::collections::BTreeMap;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{map_indexed, pairwise_sum, Execution};
use crate::seed;
use crate::tensor_store::WeightMatrix;
use crate::traps::{check_unit, shuffled_for, LayerTrapReport, TrapRecord};

pub const DEFAULT_TRIALS: usize = 10_000;
pub const MIN_TRIALS: usize = 100;
const INEQUALITY_TOL: f64 = 1e-9;

/// `|Σ v_j| / √M`.
pub fn constant_overlap(v: &[f64]) -> Result<f64> {
    check_unit(v, 1e-6)?;
    Ok(v.iter().sum::<f64>().abs() / (v.len() as f64).sqrt())
}

/// A Monte-Carlo variance estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloEstimate {
    pub scale: usize,
    pub trials: usize,
    pub variance: f64,
    pub standard_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanInstabilityReport {
    pub layer_id: String,
    pub replicate_index: u32,
    pub eta: f64,
    pub lambda_trap: f64,
    /// `(1/N) Σ r_i²`.
    pub row_mean_sq_avg: f64,
    pub bar_r: f64,
    /// `η² λ / M − r̄²`.
    pub bound: f64,
    /// `Var_i(r_i)`, exact.
    pub row_mean_variance: f64,
    pub first_inequality_holds: bool,
    pub bound_holds: bool,
    pub sampled_variance: BTreeMap<usize, MonteCarloEstimate>,
}

impl MeanInstabilityReport {
    /// `Var_i(r_i) − bound`; nonnegative whenever the bound holds.
    pub fn slack(&self) -> f64 {
        self.row_mean_variance - self.bound
    }
}

/// Orients `a` the way the trap's eigenvector expects.
fn oriented_for(a: &WeightMatrix, trap: &TrapRecord) -> Result<WeightMatrix> {
    let a = if trap.transposed { a.transpose() } else { a.clone() };
    if trap.eigenvector.len() != a.cols() {
        return Err(Error::ShapeMismatch(format!(
            "trap eigenvector has length {}, matrix has {} columns",
            trap.eigenvector.len(),
            a.cols()
        )));
    }
    Ok(a)
}

fn row_means(a: &WeightMatrix) -> Vec<f64> {
    let m = a.cols() as f64;
    (0..a.rows()).map(|i| a.row(i).iter().sum::<f64>() / m).collect()
}

/// Evaluates both inequalities for `trap`, an eigenpair of `AᵀA / N` where
/// `A` is the (shuffled) matrix it was found in.
pub fn theorem2_bound(a: &WeightMatrix, trap: &TrapRecord) -> Result<MeanInstabilityReport> {
    let a = oriented_for(a, trap)?;
    let (n, m) = (a.rows() as f64, a.cols() as f64);
    let eta = constant_overlap(&trap.eigenvector)?;
    let r = row_means(&a);
    let row_mean_sq_avg = r.iter().map(|x| x * x).sum::<f64>() / n;
    let bar_r = r.iter().sum::<f64>() / n;
    let row_mean_variance = r.iter().map(|x| (x - bar_r).powi(2)).sum::<f64>() / n;
    let floor = eta * eta * trap.lambda_trap / m;
    let bound = floor - bar_r * bar_r;
    let tol = |x: f64| INEQUALITY_TOL * x.abs().max(1.0);
    Ok(MeanInstabilityReport {
        layer_id: trap.layer_id.clone(),
        replicate_index: trap.replicate_index,
        eta,
        lambda_trap: trap.lambda_trap,
        row_mean_sq_avg,
        bar_r,
        bound,
        row_mean_variance,
        first_inequality_holds: row_mean_sq_avg >= floor - tol(floor),
        bound_holds: row_mean_variance >= bound - tol(bound),
        sampled_variance: BTreeMap::new(),
    })
}

/// [`theorem2_bound`] plus Monte-Carlo sampled-mean variances at `scales`.
pub fn theorem2_with_sampling(
    a: &WeightMatrix,
    trap: &TrapRecord,
    scales: &[usize],
    trials: usize,
    seed: u64,
    exec: Execution,
) -> Result<MeanInstabilityReport> {
    let mut report = theorem2_bound(a, trap)?;
    let oriented = oriented_for(a, trap)?;
    for &s in scales {
        let est = sampled_mean_variance(&oriented, s, trials, seed::derive(seed, s as u64), exec)?;
        report.sampled_variance.insert(s, est);
    }
    Ok(report)
}

/// Default sampling scales for an `M`-column matrix: `{1, M/2, M}`.
pub fn default_scales(m: usize) -> Vec<usize> {
    let mut s = vec![1, (m / 2).max(1), m];
    s.dedup();
    s
}

/// Monte-Carlo estimate of `Var(μ_{I,J} | A)`: `I` uniform over rows, `J` a
/// uniform `s`-subset of columns drawn without replacement.
pub fn sampled_mean_variance(
    a: &WeightMatrix,
    s: usize,
    trials: usize,
    seed: u64,
    exec: Execution,
) -> Result<MonteCarloEstimate> {
    let (n, m) = a.shape();
    if s == 0 || s > m {
        return Err(Error::Domain(format!("sampling scale {s} outside 1..={m}")));
    }
    if trials < MIN_TRIALS {
        return Err(Error::Domain(format!(
            "{trials} trials; at least {MIN_TRIALS} required"
        )));
    }
    let samples = map_indexed(exec, trials, |t| {
        let mut rng = seed::rng(seed::derive(seed, t as u64));
        let i = rng.gen_range(0..n);
        let row = a.row(i);
        let total: f64 = if s == m {
            row.iter().sum()
        } else {
            index::sample(&mut rng, m, s).iter().map(|j| row[j]).sum()
        };
        total / s as f64
    });

    let k = trials as f64;
    let mean = pairwise_sum(&samples) / k;
    let dev2: Vec<f64> = samples.iter().map(|x| (x - mean).powi(2)).collect();
    let dev4: Vec<f64> = dev2.iter().map(|d| d * d).collect();
    let m2 = pairwise_sum(&dev2) / k;
    let m4 = pairwise_sum(&dev4) / k;
    let variance = m2 * k / (k - 1.0);
    let standard_error = ((m4 - m2 * m2).max(0.0) / k).sqrt();
    Ok(MonteCarloEstimate {
        scale: s,
        trials,
        variance,
        standard_error,
    })
}

/// Fills `report.mean_instability` with one entry per trap, evaluated on
/// the shuffled matrix each trap was found in.
pub fn annotate_report(
    w: &WeightMatrix,
    report: &mut LayerTrapReport,
    trials: usize,
    seed: u64,
    exec: Execution,
) -> Result<()> {
    let entries = report
        .traps
        .iter()
        .map(|trap| {
            let a = shuffled_for(w, trap).unwrap_or_else(|| w.clone());
            let scales = default_scales(trap.eigenvector.len());
            theorem2_with_sampling(&a, trap, &scales, trials, seed, exec)
        })
        .collect::<Result<Vec<_>>>()?;
    report.mean_instability = Some(entries);
    Ok(())
}
