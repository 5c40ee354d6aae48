//! Report documents written by the commands. Every report carries the tool
//! version and the full set of options, defaults included.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use trapscan::ablation::{AblationResult, ProbeConfig};
use trapscan::nn::{ClusterSpec, LogRow, TrainConfig};
use trapscan::traps::LayerTrapReport;

use crate::error::{io_error, CliError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tool {
    pub name: String,
    pub version: String,
}

impl Default for Tool {
    fn default() -> Self {
        Self {
            name: "trapscan".into(),
            version: env!("CARGO_PKG_VERSION").into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum Report {
    Scan(ScanReport),
    Series(SeriesReport),
    Ablate(AblateReport),
    TrainDemo(TrainDemoReport),
}

// Dispatches on `command` by hand: a derived internally tagged enum buffers
// its content and cannot read integer map keys back.
impl<'de> Deserialize<'de> for Report {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        use serde::de::Error as _;
        let value = serde_json::Value::deserialize(deserializer)?;
        let command = value
            .get("command")
            .and_then(|c| c.as_str())
            .ok_or_else(|| D::Error::missing_field("command"))?
            .to_string();
        let parsed = match command.as_str() {
            "scan" => serde_json::from_value(value).map(Report::Scan),
            "series" => serde_json::from_value(value).map(Report::Series),
            "ablate" => serde_json::from_value(value).map(Report::Ablate),
            "train-demo" => serde_json::from_value(value).map(Report::TrainDemo),
            other => {
                return Err(D::Error::unknown_variant(other, &["scan", "series", "ablate", "train-demo"]))
            }
        };
        parsed.map_err(D::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScanOptions {
    pub replicates: usize,
    pub base_seed: u64,
    pub c_tw: f64,
    pub theorem2: bool,
    pub theorem2_trials: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FailureKind {
    Ingestion,
    Numerical,
    Data,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub checkpoint: String,
    pub layer: Option<String>,
    pub kind: FailureKind,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedLayer {
    pub layer: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointScan {
    pub path: String,
    pub model_name: String,
    pub step: u64,
    pub metadata: BTreeMap<String, String>,
    pub layers: Vec<LayerTrapReport>,
    pub skipped: Vec<SkippedLayer>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanReport {
    pub tool: Tool,
    pub options: ScanOptions,
    pub checkpoints: Vec<CheckpointScan>,
    pub failures: Vec<Failure>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesRow {
    pub step: u64,
    pub layer: String,
    pub mean_traps: f64,
    pub std_traps: f64,
    pub train_acc: Option<f64>,
    pub test_acc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesReport {
    pub tool: Tool,
    pub options: ScanOptions,
    pub checkpoints: Vec<String>,
    pub rows: Vec<SeriesRow>,
    pub failures: Vec<Failure>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblateOptionsEcho {
    pub replicates: usize,
    pub base_seed: u64,
    pub c_tw: f64,
    pub replicate: u32,
    pub trap: Option<usize>,
    pub probes: ProbeConfig,
    pub replacement_seed: u64,
    pub tau_err: f64,
    pub tau_jsd: f64,
    pub eval: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblateReport {
    pub tool: Tool,
    pub options: AblateOptionsEcho,
    pub checkpoint: String,
    pub layer: String,
    pub traps_found: usize,
    pub results: Vec<AblationResult>,
}

/// Training-demo configuration, read from TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DemoConfig {
    pub model_name: String,
    pub hidden: Vec<usize>,
    pub data_seed: u64,
    pub data: ClusterSpec,
    pub train: TrainConfig,
}

impl Default for DemoConfig {
    fn default() -> Self {
        Self {
            model_name: "demo-mlp".into(),
            hidden: vec![64, 64],
            data_seed: 0,
            data: ClusterSpec::default(),
            train: TrainConfig {
                steps: 20_000,
                log_every: 100,
                ..TrainConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainDemoReport {
    pub tool: Tool,
    pub config: DemoConfig,
    pub train_data: String,
    pub test_data: String,
    pub log_csv: String,
    pub checkpoints: Vec<String>,
    pub final_metrics: LogRow,
}

pub fn to_json(report: &Report) -> String {
    let mut text = serde_json::to_string_pretty(report).expect("reports serialize");
    text.push('\n');
    text
}

/// Writes `text` to `path`, or stdout when `path` is `None`.
pub fn emit(path: Option<&Path>, text: &str) -> Result<(), CliError> {
    match path {
        Some(p) => std::fs::write(p, text).map_err(|e| io_error(p, e)),
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(text.as_bytes())
                .map_err(|e| CliError::Internal(format!("stdout: {e}")))
        }
    }
}

pub fn read_report(path: &Path) -> Result<Report, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        CliError::Core(trapscan::Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
    })?;
    serde_json::from_str(&text).map_err(|e| {
        CliError::Core(trapscan::Error::MalformedManifest {
            path: path.to_path_buf(),
            reason: format!("not a trapscan report: {e}"),
        })
    })
}

/// CSV text: a `#` line echoing the options, the header, then one record
/// per row.
pub fn csv_text<S: Serialize>(echo: &str, header: &str, rows: &[S]) -> String {
    let mut writer = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(Vec::new());
    for row in rows {
        writer.serialize(row).expect("csv rows serialize");
    }
    let body = String::from_utf8(writer.into_inner().expect("in-memory writer")).expect("utf-8");
    format!("# {echo}\n{header}\n{body}")
}
