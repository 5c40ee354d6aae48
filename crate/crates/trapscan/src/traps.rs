//! Correlation-trap detection: shuffle a layer entry-wise, fit the MP bulk of
//! the shuffled covariance spectrum, and report every eigenvalue beyond the
//! fitted edge plus the Tracy-Widom margin.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{map_indexed, Execution};
use crate::rmt::{self, EdgeThreshold, Esd, MpFit};
use crate::seed;
use crate::self_averaging::MeanInstabilityReport;
use crate::tensor_store::WeightMatrix;

pub const DEFAULT_REPLICATES: usize = 5;

/// Identifies one entry-wise shuffle of one layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShuffleSeed {
    pub seed: u64,
    pub replicate_index: u32,
}

impl ShuffleSeed {
    /// Seed for `replicate` of `layer_id`, independent of scheduling order.
    pub fn for_layer(base_seed: u64, layer_id: &str, replicate_index: u32) -> Self {
        Self {
            seed: seed::derive(base_seed, seed::hash_label(layer_id)),
            replicate_index,
        }
    }

    pub fn stream(&self) -> u64 {
        seed::derive(self.seed, u64::from(self.replicate_index))
    }
}

/// Permutation used by [`shuffle_entries`]: entry `f` of the shuffled matrix
/// is entry `perm[f]` of the original (flat, row-major).
pub fn shuffle_permutation(len: usize, stream: u64) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..len).collect();
    perm.shuffle(&mut seed::rng(stream));
    perm
}

/// Uniform random permutation of all `N·M` entries (Fisher-Yates).
pub fn shuffle_entries(w: &WeightMatrix, seed: ShuffleSeed) -> WeightMatrix {
    let perm = shuffle_permutation(w.data().len(), seed.stream());
    let data = perm.iter().map(|&p| w.data()[p]).collect();
    w.with_data(data).expect("permutation keeps entries finite")
}

/// Eigenvector localization: inverse participation ratio and the squared
/// mass carried by the `k` largest components.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Localization {
    pub ipr: f64,
    pub top_k_mass: BTreeMap<usize, f64>,
}

impl Localization {
    /// Mass on the top `⌈0.05·M⌉` coordinates.
    pub fn headline_mass(&self, m: usize) -> f64 {
        self.top_k_mass[&headline_k(m)]
    }
}

pub fn headline_k(m: usize) -> usize {
    ((0.05 * m as f64).ceil() as usize).clamp(1, m.max(1))
}

pub(crate) fn check_unit(v: &[f64], tol: f64) -> Result<()> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if v.is_empty() || (norm - 1.0).abs() > tol || !norm.is_finite() {
        return Err(Error::NotNormalized { norm });
    }
    Ok(())
}

/// IPR `Σ v_j⁴` and top-k squared mass for `k ∈ {1, 5, ⌈0.05·M⌉}`.
pub fn localization_metrics(v: &[f64]) -> Result<Localization> {
    check_unit(v, 1e-6)?;
    let m = v.len();
    let mut sq: Vec<f64> = v.iter().map(|x| x * x).collect();
    let ipr = sq.iter().map(|s| s * s).sum();
    sq.sort_by(|a, b| b.total_cmp(a));
    let mut top_k_mass = BTreeMap::new();
    for k in [1, 5, headline_k(m)] {
        let k = k.min(m);
        top_k_mass.insert(k, sq[..k].iter().sum());
    }
    Ok(Localization { ipr, top_k_mass })
}

/// `λ_max / mean(λ)`.
pub fn condensation_ratio(esd: &Esd) -> Result<f64> {
    if esd.eigenvalues.is_empty() {
        return Err(Error::ZeroTrace);
    }
    let trace = esd.trace();
    if !(trace > 0.0) {
        return Err(Error::ZeroTrace);
    }
    Ok(esd.max() / (trace / esd.eigenvalues.len() as f64))
}

/// One detected outlier of a shuffled spectrum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrapRecord {
    pub layer_id: String,
    pub replicate_index: u32,
    pub lambda_trap: f64,
    pub threshold: f64,
    /// `λ_trap − λ₊`.
    pub gap_over_edge: f64,
    /// Unit eigenvector of the shuffled covariance, canonical sign.
    pub eigenvector: Vec<f64>,
    pub ipr: f64,
    pub top_k_mass: BTreeMap<usize, f64>,
    /// The layer was transposed before analysis; the eigenvector then lives
    /// in the row space of the stored matrix.
    pub transposed: bool,
    /// Stream seed of the shuffle the trap was found in. `None` means the
    /// eigenvector is already expressed in the unshuffled layer coordinates.
    pub shuffle_stream: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectOptions {
    pub replicates: usize,
    pub base_seed: u64,
    pub c_tw: f64,
    #[serde(skip)]
    pub execution: Execution,
}

impl Default for DetectOptions {
    fn default() -> Self {
        Self {
            replicates: DEFAULT_REPLICATES,
            base_seed: 0,
            c_tw: rmt::DEFAULT_C_TW,
            execution: Execution::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateFailure {
    pub replicate_index: u32,
    pub error: String,
}

/// Per-layer trap statistics over all shuffle replicates. Arrays indexed by
/// replicate hold `null` for failed replicates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerTrapReport {
    pub layer_id: String,
    pub rows: usize,
    pub cols: usize,
    pub replicates: usize,
    pub valid_replicates: usize,
    pub trap_count_per_replicate: Vec<Option<usize>>,
    pub mean_count: f64,
    /// Population standard deviation over valid replicates.
    pub std_count: f64,
    pub mp_fits: Vec<Option<MpFit>>,
    pub thresholds: Vec<Option<EdgeThreshold>>,
    pub max_eigenvalues: Vec<Option<f64>>,
    /// Mean over valid replicates of the shuffled-spectrum condensation ratio.
    pub condensation_ratio: f64,
    pub traps: Vec<TrapRecord>,
    pub failures: Vec<ReplicateFailure>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_instability: Option<Vec<MeanInstabilityReport>>,
}

impl LayerTrapReport {
    pub fn mean_lambda_plus(&self) -> Option<f64> {
        mean(self.mp_fits.iter().flatten().map(|f| f.lambda_plus))
    }

    pub fn max_eigenvalue(&self) -> Option<f64> {
        self.max_eigenvalues.iter().flatten().copied().reduce(f64::max)
    }

    /// Largest headline (top 5%) localized mass over all traps.
    pub fn max_headline_mass(&self) -> Option<f64> {
        self.traps
            .iter()
            .filter_map(|t| t.top_k_mass.get(&headline_k(t.eigenvector.len())))
            .copied()
            .reduce(f64::max)
    }

    /// Traps of a given replicate, largest first.
    pub fn traps_of(&self, replicate_index: u32) -> impl Iterator<Item = &TrapRecord> {
        self.traps
            .iter()
            .filter(move |t| t.replicate_index == replicate_index)
    }
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Result of analysing one shuffle replicate.
#[derive(Debug, Clone)]
pub struct ReplicateAnalysis {
    pub esd: Esd,
    pub fit: MpFit,
    pub threshold: EdgeThreshold,
    pub traps: Vec<TrapRecord>,
}

/// Runs shuffle → spectrum → MP fit → threshold → outlier extraction for one
/// replicate.
pub fn analyze_replicate(
    w: &WeightMatrix,
    shuffle: ShuffleSeed,
    c_tw: f64,
) -> Result<ReplicateAnalysis> {
    let shuffled = shuffle_entries(w, shuffle);
    let esd = rmt::covariance_spectrum(&shuffled)?;
    let fit = rmt::fit_mp(&esd)?;
    let threshold = rmt::tw_delta(&fit, esd.n, c_tw)?;
    let count = esd
        .eigenvalues
        .iter()
        .rev()
        .take_while(|&&l| l > threshold.threshold)
        .count();

    let mut traps = Vec::with_capacity(count);
    if count > 0 {
        let decomposition = rmt::covariance_decomposition(&shuffled)?;
        let m = esd.m;
        for k in 0..count {
            let idx = m - 1 - k;
            let lambda_trap = esd.eigenvalues[idx];
            let eigenvector = decomposition.eigenvectors[idx].clone();
            let loc = localization_metrics(&eigenvector)?;
            traps.push(TrapRecord {
                layer_id: w.layer_id().to_string(),
                replicate_index: shuffle.replicate_index,
                lambda_trap,
                threshold: threshold.threshold,
                gap_over_edge: lambda_trap - fit.lambda_plus,
                eigenvector,
                ipr: loc.ipr,
                top_k_mass: loc.top_k_mass,
                transposed: esd.transposed,
                shuffle_stream: Some(shuffle.stream()),
            });
        }
    }
    Ok(ReplicateAnalysis {
        esd,
        fit,
        threshold,
        traps,
    })
}

/// Detects correlation traps in `w` over `options.replicates` independent
/// shuffles. Failed replicates are recorded and excluded from the mean; an
/// error is returned only if the layer cannot be analysed at all.
pub fn detect_traps(w: &WeightMatrix, options: &DetectOptions) -> Result<LayerTrapReport> {
    if options.replicates == 0 {
        return Err(Error::Domain("at least one replicate is required".into()));
    }
    if !w.is_matrix() {
        return Err(Error::Dimension(format!(
            "layer `{}` is {}x{}; both sides must be at least 2",
            w.layer_id(),
            w.rows(),
            w.cols()
        )));
    }
    if !(options.c_tw > 0.0 && options.c_tw.is_finite()) {
        return Err(Error::Domain(format!("c_tw must be positive, got {}", options.c_tw)));
    }

    let outcomes = map_indexed(options.execution, options.replicates, |r| {
        let shuffle = ShuffleSeed::for_layer(options.base_seed, w.layer_id(), r as u32);
        analyze_replicate(w, shuffle, options.c_tw)
    });

    let mut report = LayerTrapReport {
        layer_id: w.layer_id().to_string(),
        rows: w.rows(),
        cols: w.cols(),
        replicates: options.replicates,
        valid_replicates: 0,
        trap_count_per_replicate: Vec::with_capacity(options.replicates),
        mean_count: 0.0,
        std_count: 0.0,
        mp_fits: Vec::with_capacity(options.replicates),
        thresholds: Vec::with_capacity(options.replicates),
        max_eigenvalues: Vec::with_capacity(options.replicates),
        condensation_ratio: 0.0,
        traps: Vec::new(),
        failures: Vec::new(),
        mean_instability: None,
    };
    let mut ratios = Vec::new();
    let mut first_error = None;
    for (r, outcome) in outcomes.into_iter().enumerate() {
        match outcome {
            Ok(analysis) => {
                report.trap_count_per_replicate.push(Some(analysis.traps.len()));
                report.mp_fits.push(Some(analysis.fit));
                report.thresholds.push(Some(analysis.threshold));
                report.max_eigenvalues.push(Some(analysis.esd.max()));
                if let Ok(ratio) = condensation_ratio(&analysis.esd) {
                    ratios.push(ratio);
                }
                report.traps.extend(analysis.traps);
            }
            Err(e) => {
                report.trap_count_per_replicate.push(None);
                report.mp_fits.push(None);
                report.thresholds.push(None);
                report.max_eigenvalues.push(None);
                report.failures.push(ReplicateFailure {
                    replicate_index: r as u32,
                    error: e.to_string(),
                });
                first_error.get_or_insert(e);
            }
        }
    }

    let counts: Vec<f64> = report
        .trap_count_per_replicate
        .iter()
        .flatten()
        .map(|&c| c as f64)
        .collect();
    if counts.is_empty() {
        return Err(first_error.expect("all replicates failed"));
    }
    let n = counts.len() as f64;
    report.valid_replicates = counts.len();
    report.mean_count = counts.iter().sum::<f64>() / n;
    report.std_count =
        (counts.iter().map(|c| (c - report.mean_count).powi(2)).sum::<f64>() / n).sqrt();
    report.condensation_ratio = mean(ratios.into_iter()).unwrap_or(0.0);
    Ok(report)
}

/// Mean trap counts of `w` and of `scale·w` under identical seeds.
pub fn scale_perturbation_check(
    w: &WeightMatrix,
    scale: f64,
    options: &DetectOptions,
) -> Result<(f64, f64)> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::Domain(format!("scale must be positive, got {scale}")));
    }
    let original = detect_traps(w, options)?;
    let scaled = detect_traps(&w.scaled(scale)?, options)?;
    Ok((original.mean_count, scaled.mean_count))
}

/// Reconstructs the shuffled matrix a trap was detected in.
pub fn shuffled_for(w: &WeightMatrix, trap: &TrapRecord) -> Option<WeightMatrix> {
    let stream = trap.shuffle_stream?;
    let perm = shuffle_permutation(w.data().len(), stream);
    Some(
        w.with_data(perm.iter().map(|&p| w.data()[p]).collect())
            .expect("permutation keeps entries finite"),
    )
}

/// Expresses a trap in the coordinates of the unshuffled layer.
///
/// The trap's rank-one component `(A v) vᵀ` of the shuffled matrix `A` is
/// un-permuted entry by entry; the leading right singular vector of that
/// pulled-back matrix is the trap direction in the original layer (oriented
/// the same way as the trap's eigenvector). Traps without a shuffle stream
/// are returned unchanged.
pub fn pull_back_direction(w: &WeightMatrix, trap: &TrapRecord) -> Result<Vec<f64>> {
    let Some(stream) = trap.shuffle_stream else {
        return Ok(trap.eigenvector.clone());
    };
    let (rows, cols) = w.shape();
    let (n, m) = if trap.transposed { (cols, rows) } else { (rows, cols) };
    if trap.eigenvector.len() != m {
        return Err(Error::ShapeMismatch(format!(
            "trap eigenvector has length {}, layer `{}` needs {m}",
            trap.eigenvector.len(),
            w.layer_id()
        )));
    }
    let perm = shuffle_permutation(rows * cols, stream);
    let shuffled: Vec<f64> = perm.iter().map(|&p| w.data()[p]).collect();
    let oriented_index = |i: usize, j: usize| if trap.transposed { j * cols + i } else { i * cols + j };

    let v = &trap.eigenvector;
    let av: Vec<f64> = (0..n)
        .map(|i| (0..m).map(|j| shuffled[oriented_index(i, j)] * v[j]).sum())
        .collect();
    // Pulled-back component in original flat coordinates.
    let mut back = vec![0.0; rows * cols];
    for i in 0..n {
        for j in 0..m {
            back[perm[oriented_index(i, j)]] = av[i] * v[j];
        }
    }
    let b = faer::Mat::from_fn(n, m, |i, j| back[oriented_index(i, j)]);
    let svd = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| b.thin_svd()))
        .map_err(|_| Error::Numerical("SVD failed to converge".into()))?;
    if !(svd.s_diagonal().read(0) > 0.0) {
        return Err(Error::DegenerateSvd("trap component vanishes".into()));
    }
    let mut dir: Vec<f64> = (0..m).map(|i| svd.v().read(i, 0)).collect();
    rmt::canonical_sign(&mut dir);
    Ok(dir)
}
