//! Trap ablation and the data-free Jensen-Shannon probe score.

use std::collections::BTreeMap;
use std::f64::consts::LN_2;

use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{map_indexed, pairwise_sum, Execution};
use crate::nn::{evaluate, Dataset, MlpModel};
use crate::rmt::oriented;
use crate::seed;
use crate::traps::{pull_back_direction, TrapRecord};

pub const DEFAULT_PROBES: usize = 1024;
pub const DEFAULT_TEMPERATURE: f64 = 1.0;
pub const DEFAULT_TAU_ERR: f64 = 0.01;
pub const DEFAULT_TAU_JSD: f64 = 0.01;
/// Overlaps below this mark the singular direction match as ambiguous.
pub const AMBIGUOUS_OVERLAP: f64 = 0.3;
const NULL_SINGULAR_VALUE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeKind {
    #[default]
    GaussianMatched,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub num_probes: usize,
    pub probe_kind: ProbeKind,
    pub mean: f64,
    pub std: f64,
    pub seed: u64,
    pub temperature: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            num_probes: DEFAULT_PROBES,
            probe_kind: ProbeKind::GaussianMatched,
            mean: 0.0,
            std: 1.0,
            seed: 0,
            temperature: DEFAULT_TEMPERATURE,
        }
    }
}

impl ProbeConfig {
    /// Takes `input_mean` / `input_std` from checkpoint metadata when both
    /// parse, keeping the current values otherwise.
    pub fn with_metadata(mut self, metadata: &BTreeMap<String, String>) -> Self {
        let get = |k: &str| metadata.get(k).and_then(|v| v.parse::<f64>().ok());
        if let (Some(mean), Some(std)) = (get("input_mean"), get("input_std")) {
            if mean.is_finite() && std.is_finite() && std > 0.0 {
                self.mean = mean;
                self.std = std;
            }
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_probes == 0 {
            return Err(Error::Domain("num_probes must be at least 1".into()));
        }
        if !(self.std > 0.0 && self.std.is_finite()) || !self.mean.is_finite() {
            return Err(Error::Domain(format!(
                "probe mean/std must be finite with std > 0, got ({}, {})",
                self.mean, self.std
            )));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Domain(format!("temperature must be positive, got {}", self.temperature)));
        }
        Ok(())
    }
}

/// Outcome of replacing a trap-aligned singular component.
#[derive(Debug, Clone)]
pub struct Removal {
    pub model: MlpModel,
    /// Index into the layer's singular values (descending).
    pub singular_index: usize,
    pub singular_value: f64,
    /// `|⟨v*, trap direction⟩|`.
    pub overlap: f64,
    pub ambiguous: bool,
    /// The matched component had a null singular value; the model is returned
    /// unchanged.
    pub null_component: bool,
}

fn random_unit(len: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..len).map(|_| StandardNormal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Replaces the singular component of `layer_id` best aligned with the trap
/// (`σ* u* v*ᵀ`) by `σ* u_r v_rᵀ` with seeded random unit vectors. Every
/// other singular component is left as is.
pub fn remove_trap(model: &MlpModel, layer_id: &str, trap: &TrapRecord, seed: u64) -> Result<Removal> {
    let index = model
        .layer_index(layer_id)
        .ok_or_else(|| Error::LayerNotFound(layer_id.to_string()))?;
    let w = &model.layers()[index].weight;
    let (a, transposed) = oriented(w);
    let (n, m) = (a.nrows(), a.ncols());
    if trap.eigenvector.len() != m || trap.transposed != transposed {
        return Err(Error::ShapeMismatch(format!(
            "trap eigenvector of length {} does not fit layer `{layer_id}` ({}x{})",
            trap.eigenvector.len(),
            w.rows(),
            w.cols()
        )));
    }
    let direction = pull_back_direction(w, trap)?;
    let svd = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| a.thin_svd()))
        .map_err(|_| Error::Numerical("SVD failed to converge".into()))?;
    let (u, s, v) = (svd.u(), svd.s_diagonal(), svd.v());

    let mut best = (0, -1.0);
    for k in 0..m {
        let dot: f64 = (0..m).map(|i| v.read(i, k) * direction[i]).sum();
        if dot.abs() > best.1 {
            best = (k, dot.abs());
        }
    }
    let (k, overlap) = best;
    let sigma = s.read(k);
    let ambiguous = overlap < AMBIGUOUS_OVERLAP;
    if !(sigma.is_finite()) {
        return Err(Error::DegenerateSvd(format!("singular value {sigma} in `{layer_id}`")));
    }
    if sigma < NULL_SINGULAR_VALUE {
        return Ok(Removal {
            model: model.clone(),
            singular_index: k,
            singular_value: sigma,
            overlap,
            ambiguous,
            null_component: true,
        });
    }

    let mut rng = seed::rng(seed);
    let u_r = random_unit(n, &mut rng);
    let v_r = random_unit(m, &mut rng);
    let mut data = w.data().to_vec();
    let cols = w.cols();
    for i in 0..n {
        for j in 0..m {
            let delta = sigma * (u_r[i] * v_r[j] - u.read(i, k) * v.read(j, k));
            let flat = if transposed { j * cols + i } else { i * cols + j };
            data[flat] += delta;
        }
    }
    let mut out = model.clone();
    out.set_weight(index, w.with_data(data)?)?;
    Ok(Removal {
        model: out,
        singular_index: k,
        singular_value: sigma,
        overlap,
        ambiguous,
        null_component: false,
    })
}

fn softmax(z: &[f64], temperature: f64) -> Vec<f64> {
    let scaled: Vec<f64> = z.iter().map(|v| v / temperature).collect();
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = scaled.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / total).collect()
}

/// Jensen-Shannon divergence in nats; symmetric in its arguments bit for bit.
pub fn js_divergence(p: &[f64], q: &[f64]) -> f64 {
    let term = |a: f64, mid: f64| if a > 0.0 { a * (a / mid).ln() } else { 0.0 };
    let total: f64 = p
        .iter()
        .zip(q)
        .map(|(&a, &b)| {
            let mid = 0.5 * (a + b);
            0.5 * (term(a, mid) + term(b, mid))
        })
        .sum();
    total.clamp(0.0, LN_2)
}

/// Gaussian probe `p` of the configuration.
pub fn probe_input(probes: &ProbeConfig, dim: usize, p: usize) -> Vec<f64> {
    let mut rng = seed::rng(seed::derive(probes.seed, p as u64));
    let normal = Normal::new(probes.mean, probes.std).expect("validated std");
    (0..dim).map(|_| normal.sample(&mut rng)).collect()
}

/// Mean Jensen-Shannon divergence between the tempered output distributions
/// of two models over seeded Gaussian probes.
pub fn jsd_score(a: &MlpModel, b: &MlpModel, probes: &ProbeConfig) -> Result<f64> {
    jsd_score_with(a, b, probes, Execution::default())
}

pub fn jsd_score_with(a: &MlpModel, b: &MlpModel, probes: &ProbeConfig, exec: Execution) -> Result<f64> {
    probes.validate()?;
    if a.input_dim() != b.input_dim() || a.output_dim() != b.output_dim() {
        return Err(Error::ShapeMismatch(format!(
            "models map {}→{} and {}→{}",
            a.input_dim(),
            a.output_dim(),
            b.input_dim(),
            b.output_dim()
        )));
    }
    let per_probe = map_indexed(exec, probes.num_probes, |p| {
        let x = probe_input(probes, a.input_dim(), p);
        let za = a.forward(&x)?;
        let zb = b.forward(&x)?;
        if za.iter().chain(&zb).any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteLogits { probe: p });
        }
        Ok(js_divergence(&softmax(&za, probes.temperature), &softmax(&zb, probes.temperature)))
    })
    .into_iter()
    .collect::<Result<Vec<f64>>>()?;
    Ok((pairwise_sum(&per_probe) / per_probe.len() as f64).clamp(0.0, LN_2))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Classification {
    Harmful,
    Benign,
    Unlabeled,
}

impl Classification {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Harmful => "Harmful",
            Self::Benign => "Benign",
            Self::Unlabeled => "Unlabeled",
        }
    }
}

/// Labels a trap by its test-error change. `jsd` and `tau_jsd` are carried
/// for reporting only.
pub fn classify_trap(_jsd: f64, delta_test_error: Option<f64>, _tau_jsd: f64, tau_err: f64) -> Classification {
    match delta_test_error {
        None => Classification::Unlabeled,
        Some(d) if d.abs() > tau_err => Classification::Harmful,
        Some(_) => Classification::Benign,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrapRef {
    pub layer_id: String,
    pub replicate_index: u32,
    pub trap_index: usize,
}

impl TrapRef {
    pub fn id(&self) -> String {
        format!("{}:{}:{}", self.layer_id, self.replicate_index, self.trap_index)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub trap_ref: TrapRef,
    pub lambda_trap: f64,
    pub ipr: f64,
    pub jsd_score: f64,
    pub temperature: f64,
    /// `err_ablated − err_original`, with error = 1 − accuracy.
    pub delta_test_error: Option<f64>,
    pub classification: Classification,
    pub tau_err: f64,
    pub tau_jsd: f64,
    pub singular_index: usize,
    pub singular_value: f64,
    pub overlap: f64,
    pub ambiguous: bool,
    pub null_component: bool,
}

pub const CSV_HEADER: &str = "trap_id,layer,lambda,ipr,jsd,delta_err,class";

impl AblationResult {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.trap_ref.id(),
            self.trap_ref.layer_id,
            self.lambda_trap,
            self.ipr,
            self.jsd_score,
            self.delta_test_error.map(|d| d.to_string()).unwrap_or_default(),
            self.classification.as_str()
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AblateOptions {
    pub probes: ProbeConfig,
    pub replacement_seed: u64,
    pub tau_err: f64,
    pub tau_jsd: f64,
}

impl Default for AblateOptions {
    fn default() -> Self {
        Self {
            probes: ProbeConfig::default(),
            replacement_seed: 0,
            tau_err: DEFAULT_TAU_ERR,
            tau_jsd: DEFAULT_TAU_JSD,
        }
    }
}

/// Removes one trap, scores it, and labels it when evaluation data is given.
pub fn ablate(
    model: &MlpModel,
    trap: &TrapRecord,
    trap_index: usize,
    options: &AblateOptions,
    eval: Option<&Dataset>,
) -> Result<AblationResult> {
    let removal = remove_trap(model, &trap.layer_id, trap, options.replacement_seed)?;
    let jsd = jsd_score(model, &removal.model, &options.probes)?;
    let delta = match eval {
        Some(data) => {
            let before = evaluate(model, data)?.accuracy;
            let after = evaluate(&removal.model, data)?.accuracy;
            Some((1.0 - after) - (1.0 - before))
        }
        None => None,
    };
    Ok(AblationResult {
        trap_ref: TrapRef {
            layer_id: trap.layer_id.clone(),
            replicate_index: trap.replicate_index,
            trap_index,
        },
        lambda_trap: trap.lambda_trap,
        ipr: trap.ipr,
        jsd_score: jsd,
        temperature: options.probes.temperature,
        delta_test_error: delta,
        classification: classify_trap(jsd, delta, options.tau_jsd, options.tau_err),
        tau_err: options.tau_err,
        tau_jsd: options.tau_jsd,
        singular_index: removal.singular_index,
        singular_value: removal.singular_value,
        overlap: removal.overlap,
        ambiguous: removal.ambiguous,
        null_component: removal.null_component,
    })
}

/// Ranks starting at 1; ties share their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        let rank = (start + end + 1) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = rank;
        }
        start = end;
    }
    ranks
}

/// Spearman rank correlation (Pearson correlation of average ranks).
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::ShapeMismatch(format!("need two equal samples of length ≥ 2, got {} and {}", x.len(), y.len())));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::Domain("non-finite value in rank correlation".into()));
    }
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Domain("rank correlation of a constant sample".into()));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::DenseLayer;
    use crate::WeightMatrix;

    fn model_with(w: WeightMatrix) -> MlpModel {
        let out = w.rows();
        MlpModel::new(vec![DenseLayer {
            name: "fc1".into(),
            weight: w,
            bias: vec![0.0; out],
        }])
        .unwrap()
    }

    fn trap_along(layer: &str, v: Vec<f64>, transposed: bool) -> TrapRecord {
        TrapRecord {
            layer_id: format!("{layer}.weight"),
            replicate_index: 0,
            lambda_trap: 1.0,
            threshold: 0.5,
            gap_over_edge: 0.5,
            ipr: v.iter().map(|x| x.powi(4)).sum(),
            eigenvector: v,
            top_k_mass: BTreeMap::new(),
            transposed,
            shuffle_stream: None,
        }
    }

    #[test]
    fn identical_models_score_zero() {
        let m = MlpModel::init(&[4, 8, 3], 8.0, 1).unwrap();
        let probes = ProbeConfig { num_probes: 64, ..Default::default() };
        assert_eq!(jsd_score(&m, &m, &probes).unwrap(), 0.0);
    }

    #[test]
    fn disjoint_point_masses_reach_ln2() {
        let a = model_with(WeightMatrix::new("fc1.weight", 2, 1, vec![0.0, 0.0]).unwrap());
        let mut layers_a = a.layers().to_vec();
        layers_a[0].bias = vec![100.0, -100.0];
        let mut layers_b = a.layers().to_vec();
        layers_b[0].bias = vec![-100.0, 100.0];
        let (a, b) = (MlpModel::new(layers_a).unwrap(), MlpModel::new(layers_b).unwrap());
        let j = jsd_score(&a, &b, &ProbeConfig { num_probes: 8, ..Default::default() }).unwrap();
        assert!((j - LN_2).abs() < 1e-12, "{j}");
    }

    #[test]
    fn high_temperature_flattens() {
        let a = MlpModel::init(&[4, 8, 3], 8.0, 1).unwrap();
        let b = MlpModel::init(&[4, 8, 3], 8.0, 2).unwrap();
        let probes = ProbeConfig { num_probes: 64, temperature: 1e6, ..Default::default() };
        assert!(jsd_score(&a, &b, &probes).unwrap() < 1e-6);
    }

    #[test]
    fn score_is_symmetric() {
        let a = MlpModel::init(&[4, 8, 3], 8.0, 1).unwrap();
        let b = MlpModel::init(&[4, 8, 3], 8.0, 2).unwrap();
        let probes = ProbeConfig { num_probes: 128, seed: 9, ..Default::default() };
        let (ab, ba) = (jsd_score(&a, &b, &probes).unwrap(), jsd_score(&b, &a, &probes).unwrap());
        assert!((ab - ba).abs() <= 1e-12);
        assert!(ab > 0.0 && ab <= LN_2);
    }

    #[test]
    fn sequential_and_parallel_scores_agree() {
        let a = MlpModel::init(&[4, 8, 3], 8.0, 1).unwrap();
        let b = MlpModel::init(&[4, 8, 3], 8.0, 2).unwrap();
        let probes = ProbeConfig { num_probes: 100, ..Default::default() };
        assert_eq!(
            jsd_score_with(&a, &b, &probes, Execution::Sequential).unwrap(),
            jsd_score_with(&a, &b, &probes, Execution::Parallel).unwrap()
        );
    }

    #[test]
    fn mismatched_models_and_bad_probes_fail() {
        let a = MlpModel::init(&[4, 3], 1.0, 1).unwrap();
        let b = MlpModel::init(&[5, 3], 1.0, 1).unwrap();
        assert!(matches!(jsd_score(&a, &b, &ProbeConfig::default()), Err(Error::ShapeMismatch(_))));
        let bad = ProbeConfig { std: 0.0, ..Default::default() };
        assert!(jsd_score(&a, &a, &bad).is_err());
    }

    #[test]
    fn classification_rule() {
        assert_eq!(classify_trap(0.5, Some(0.12), 0.01, 0.01), Classification::Harmful);
        assert_eq!(classify_trap(1e-5, Some(0.002), 0.01, 0.01), Classification::Benign);
        assert_eq!(classify_trap(0.3, None, 0.01, 0.01), Classification::Unlabeled);
        assert_eq!(classify_trap(0.0, Some(-0.05), 0.01, 0.01), Classification::Harmful);
    }

    #[test]
    fn probe_stats_from_metadata() {
        let meta = BTreeMap::from([
            ("input_mean".to_string(), "0.5".to_string()),
            ("input_std".to_string(), "2".to_string()),
        ]);
        let p = ProbeConfig::default().with_metadata(&meta);
        assert_eq!((p.mean, p.std), (0.5, 2.0));
        assert_eq!(ProbeConfig::default().with_metadata(&BTreeMap::new()).std, 1.0);
    }

    #[test]
    fn rank_one_layer_is_replaced() {
        // W = 3 u vᵀ (4x3), u = e_1, v = (1,1,1)/√3.
        let s = 1.0 / 3f64.sqrt();
        let w = WeightMatrix::from_fn("fc1.weight", 4, 3, |i, _| if i == 0 { 3.0 * s } else { 0.0 }).unwrap();
        let model = model_with(w);
        let trap = trap_along("fc1", vec![s, s, s], false);
        let r = remove_trap(&model, "fc1.weight", &trap, 7).unwrap();
        assert!((r.singular_value - 3.0).abs() < 1e-12);
        assert!((r.overlap - 1.0).abs() < 1e-12 && !r.ambiguous && !r.null_component);
        let new = &r.model.layers()[0].weight;
        // Still rank one with the same Frobenius norm.
        assert!((new.frobenius_norm_sq() - 9.0).abs() < 1e-10);
        let x = [0.3, -1.1, 0.7];
        assert_ne!(r.model.forward(&x).unwrap(), model.forward(&x).unwrap());
        let again = remove_trap(&model, "fc1.weight", &trap, 7).unwrap();
        assert_eq!(again.model, r.model);
    }

    #[test]
    fn null_direction_leaves_model_unchanged() {
        // Columns 0 and 1 only; e_2 is a null right singular direction.
        let w = WeightMatrix::new("fc1.weight", 3, 3, vec![1., 2., 0., -1., 0.5, 0., 0.3, 0.1, 0.]).unwrap();
        let model = model_with(w);
        let r = remove_trap(&model, "fc1", &trap_along("fc1", vec![0.0, 0.0, 1.0], false), 1).unwrap();
        assert!(r.null_component);
        assert_eq!(r.model, model);
        let probes = ProbeConfig { num_probes: 16, ..Default::default() };
        assert_eq!(jsd_score(&model, &r.model, &probes).unwrap(), 0.0);
    }

    #[test]
    fn wide_layers_match_in_row_space() {
        // 2x5 layer is analyzed transposed; the trap lives in R^2.
        let w = WeightMatrix::new("fc1.weight", 2, 5, vec![5., 5., 5., 5., 5., 0.1, -0.1, 0.2, 0.0, 0.3]).unwrap();
        let model = model_with(w);
        let r = remove_trap(&model, "fc1", &trap_along("fc1", vec![1.0, 0.0], true), 3).unwrap();
        assert_eq!(r.singular_index, 0);
        assert!(r.overlap > 0.99);
        assert!(remove_trap(&model, "fc1", &trap_along("fc1", vec![1.0, 0.0], false), 3).is_err());
        assert!(matches!(
            remove_trap(&model, "fc9", &trap_along("fc9", vec![1.0, 0.0], true), 3),
            Err(Error::LayerNotFound(_))
        ));
    }

    #[test]
    fn spearman_examples() {
        assert!((spearman(&[1., 2., 3., 4.], &[10., 20., 30., 40.]).unwrap() - 1.0).abs() < 1e-15);
        assert!((spearman(&[1., 2., 3., 4.], &[4., 3., 2., 1.]).unwrap() + 1.0).abs() < 1e-15);
        assert_eq!(average_ranks(&[5., 1., 5., 3.]), vec![3.5, 1.0, 3.5, 2.0]);
        // Hand value: ranks x = [1,2,3,4,5], y = [2,1,4,3,5] → 1 − 6·4/(5·24) = 0.8.
        assert!((spearman(&[1., 2., 3., 4., 5.], &[2., 1., 4., 3., 5.]).unwrap() - 0.8).abs() < 1e-12);
        assert!(spearman(&[1., 1.], &[1., 2.]).is_err());
    }

    #[test]
    fn csv_row_shape() {
        let r = AblationResult {
            trap_ref: TrapRef { layer_id: "fc1.weight".into(), replicate_index: 2, trap_index: 0 },
            lambda_trap: 3.5,
            ipr: 0.25,
            jsd_score: 0.125,
            temperature: 1.0,
            delta_test_error: None,
            classification: Classification::Unlabeled,
            tau_err: 0.01,
            tau_jsd: 0.01,
            singular_index: 0,
            singular_value: 1.0,
            overlap: 1.0,
            ambiguous: false,
            null_component: false,
        };
        assert_eq!(r.csv_row(), "fc1.weight:2:0,fc1.weight,3.5,0.25,0.125,,Unlabeled");
        assert_eq!(CSV_HEADER.split(',').count(), r.csv_row().split(',').count());
    }
}
