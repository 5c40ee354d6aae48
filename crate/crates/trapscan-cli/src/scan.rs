use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use trapscan::rmt::MIN_BULK;
use trapscan::self_averaging::annotate_report;
use trapscan::traps::{detect_traps, DetectOptions};
use trapscan::{load_checkpoint, Error, Execution};

use crate::error::{core_code, CliError, EXIT_INGESTION, EXIT_NUMERICAL};
use crate::report::{
    csv_text, emit, to_json, CheckpointScan, Failure, FailureKind, Report, ScanOptions, ScanReport,
    SeriesReport, SeriesRow, SkippedLayer, Tool,
};
use crate::{Format, ScanArgs};

fn failure_kind(e: &Error) -> FailureKind {
    match core_code(e) {
        EXIT_INGESTION => FailureKind::Ingestion,
        EXIT_NUMERICAL => FailureKind::Numerical,
        _ => FailureKind::Data,
    }
}

impl ScanArgs {
    pub fn options(&self) -> ScanOptions {
        ScanOptions {
            replicates: self.replicates,
            base_seed: self.seed,
            c_tw: self.c_tw,
            theorem2: self.theorem2,
            theorem2_trials: self.trials,
        }
    }

    fn validate(&self) -> Result<(), CliError> {
        if self.replicates == 0 {
            return Err(CliError::Usage("--replicates must be at least 1".into()));
        }
        if !(self.c_tw > 0.0 && self.c_tw.is_finite()) {
            return Err(CliError::Usage("--c-tw must be positive".into()));
        }
        Ok(())
    }
}

/// Scans every analyzable layer of one checkpoint. Failures are appended to
/// `failures`; the checkpoint entry is `None` only if it could not be read.
fn scan_checkpoint(path: &Path, args: &ScanArgs, failures: &mut Vec<Failure>) -> Option<CheckpointScan> {
    let shown = path.display().to_string();
    let ckpt = match load_checkpoint(path) {
        Ok(c) => c,
        Err(e) => {
            failures.push(Failure {
                checkpoint: shown,
                layer: None,
                kind: failure_kind(&e),
                error: e.to_string(),
            });
            return None;
        }
    };
    let wanted: BTreeSet<&str> = args.layer.iter().map(String::as_str).collect();
    let detect = DetectOptions {
        replicates: args.replicates,
        base_seed: args.seed,
        c_tw: args.c_tw,
        execution: Execution::default(),
    };
    let mut scan = CheckpointScan {
        path: shown.clone(),
        model_name: ckpt.manifest.model_name.clone(),
        step: ckpt.manifest.step,
        metadata: ckpt.manifest.metadata.clone(),
        layers: Vec::new(),
        skipped: Vec::new(),
    };
    for w in &ckpt.layers {
        if !wanted.is_empty() && !wanted.contains(w.layer_id()) {
            continue;
        }
        if w.rows().min(w.cols()) <= MIN_BULK {
            scan.skipped.push(SkippedLayer {
                layer: w.layer_id().to_string(),
                reason: format!("{}x{} is too small for a spectral fit", w.rows(), w.cols()),
            });
            continue;
        }
        let outcome = detect_traps(w, &detect).and_then(|mut report| {
            if args.theorem2 {
                annotate_report(w, &mut report, args.trials, args.seed, Execution::default())?;
            }
            Ok(report)
        });
        match outcome {
            Ok(report) => {
                for f in &report.failures {
                    failures.push(Failure {
                        checkpoint: shown.clone(),
                        layer: Some(format!("{} (replicate {})", w.layer_id(), f.replicate_index)),
                        kind: FailureKind::Numerical,
                        error: f.error.clone(),
                    });
                }
                scan.layers.push(report);
            }
            Err(e) => failures.push(Failure {
                checkpoint: shown.clone(),
                layer: Some(w.layer_id().to_string()),
                kind: failure_kind(&e),
                error: e.to_string(),
            }),
        }
    }
    for id in &wanted {
        if ckpt.layer(id).is_none() {
            failures.push(Failure {
                checkpoint: shown.clone(),
                layer: Some(id.to_string()),
                kind: FailureKind::Data,
                error: Error::LayerNotFound(id.to_string()).to_string(),
            });
        }
    }
    Some(scan)
}

/// Exit status for a finished run with recorded failures.
fn partial(failures: &[Failure]) -> Result<(), CliError> {
    let code = if failures.iter().any(|f| f.kind == FailureKind::Ingestion) {
        EXIT_INGESTION
    } else if failures.iter().any(|f| f.kind == FailureKind::Numerical) {
        EXIT_NUMERICAL
    } else if failures.is_empty() {
        return Ok(());
    } else {
        crate::error::EX_DATAERR
    };
    for f in failures {
        eprintln!(
            "trapscan: {}{}: {}",
            f.checkpoint,
            f.layer.as_deref().map(|l| format!(" [{l}]")).unwrap_or_default(),
            f.error
        );
    }
    Err(CliError::Partial {
        code,
        message: format!("{} failure(s); partial results written", failures.len()),
    })
}

fn fmt_opt(v: Option<f64>, digits: usize) -> String {
    v.map(|x| format!("{x:.digits$}")).unwrap_or_else(|| "-".into())
}

fn print_summary(report: &ScanReport) {
    println!(
        "{:<28} {:>7} {:>13} {:>10} {:>10} {:>9}",
        "layer", "step", "traps", "lambda+", "max", "top5%"
    );
    for ckpt in &report.checkpoints {
        for l in &ckpt.layers {
            println!(
                "{:<28} {:>7} {:>13} {:>10} {:>10} {:>9}",
                l.layer_id,
                ckpt.step,
                format!("{:.2}±{:.2}", l.mean_count, l.std_count),
                fmt_opt(l.mean_lambda_plus(), 4),
                fmt_opt(l.max_eigenvalue(), 4),
                fmt_opt(l.max_headline_mass(), 3),
            );
        }
    }
}

#[derive(serde::Serialize)]
struct ScanCsvRow<'a> {
    checkpoint: &'a str,
    step: u64,
    layer: &'a str,
    rows: usize,
    cols: usize,
    mean_traps: f64,
    std_traps: f64,
    lambda_plus: Option<f64>,
    max_lambda: Option<f64>,
    top5_mass: Option<f64>,
}

fn echo(command: &str, o: &ScanOptions) -> String {
    format!(
        "trapscan {} {command} replicates={} seed={} c_tw={} theorem2={} trials={}",
        env!("CARGO_PKG_VERSION"),
        o.replicates,
        o.base_seed,
        o.c_tw,
        o.theorem2,
        o.theorem2_trials
    )
}

pub fn run_scan(checkpoints: &[PathBuf], args: &ScanArgs) -> Result<(), CliError> {
    if checkpoints.is_empty() {
        return Err(CliError::Usage("scan needs at least one checkpoint".into()));
    }
    args.validate()?;
    let mut failures = Vec::new();
    let scans: Vec<CheckpointScan> = checkpoints
        .iter()
        .filter_map(|p| scan_checkpoint(p, args, &mut failures))
        .collect();
    let report = ScanReport {
        tool: Tool::default(),
        options: args.options(),
        checkpoints: scans,
        failures,
    };
    let text = match args.format.unwrap_or(Format::Json) {
        Format::Json => to_json(&Report::Scan(report.clone())),
        Format::Csv => {
            let rows: Vec<ScanCsvRow> = report
                .checkpoints
                .iter()
                .flat_map(|c| {
                    c.layers.iter().map(move |l| ScanCsvRow {
                        checkpoint: &c.path,
                        step: c.step,
                        layer: &l.layer_id,
                        rows: l.rows,
                        cols: l.cols,
                        mean_traps: l.mean_count,
                        std_traps: l.std_count,
                        lambda_plus: l.mean_lambda_plus(),
                        max_lambda: l.max_eigenvalue(),
                        top5_mass: l.max_headline_mass(),
                    })
                })
                .collect();
            csv_text(
                &echo("scan", &report.options),
                "checkpoint,step,layer,rows,cols,mean_traps,std_traps,lambda_plus,max_lambda,top5_mass",
                &rows,
            )
        }
    };
    emit(args.output.as_deref(), &text)?;
    if args.output.is_some() {
        print_summary(&report);
    }
    partial(&report.failures)
}

/// Expands glob patterns; plain paths are kept as given.
pub fn expand_inputs(inputs: &[String]) -> Result<Vec<PathBuf>, CliError> {
    let mut out = Vec::new();
    for input in inputs {
        if input.contains(['*', '?', '[']) {
            let mut matches: Vec<PathBuf> = glob::glob(input)
                .map_err(|e| CliError::Usage(format!("bad pattern `{input}`: {e}")))?
                .filter_map(|p| p.ok())
                .collect();
            matches.sort();
            out.extend(matches);
        } else {
            out.push(PathBuf::from(input));
        }
    }
    Ok(out)
}

fn metadata_f64(c: &CheckpointScan, key: &str) -> Option<f64> {
    c.metadata.get(key).and_then(|v| v.parse().ok())
}

pub fn run_series(inputs: &[String], args: &ScanArgs) -> Result<(), CliError> {
    let paths = expand_inputs(inputs)?;
    if paths.len() < 2 {
        return Err(CliError::Usage(format!(
            "series needs at least two checkpoints, got {}",
            paths.len()
        )));
    }
    args.validate()?;
    let mut failures = Vec::new();
    let mut scans: Vec<CheckpointScan> = paths
        .iter()
        .filter_map(|p| scan_checkpoint(p, args, &mut failures))
        .collect();
    scans.sort_by(|a, b| a.step.cmp(&b.step).then_with(|| a.path.cmp(&b.path)));
    let rows: Vec<SeriesRow> = scans
        .iter()
        .flat_map(|c| {
            c.layers.iter().map(move |l| SeriesRow {
                step: c.step,
                layer: l.layer_id.clone(),
                mean_traps: l.mean_count,
                std_traps: l.std_count,
                train_acc: metadata_f64(c, "train_acc"),
                test_acc: metadata_f64(c, "test_acc"),
            })
        })
        .collect();
    let report = SeriesReport {
        tool: Tool::default(),
        options: args.options(),
        checkpoints: scans.iter().map(|c| c.path.clone()).collect(),
        rows,
        failures,
    };
    let text = match args.format.unwrap_or(Format::Csv) {
        Format::Csv => csv_text(
            &echo("series", &report.options),
            "step,layer,mean_traps,std_traps,train_acc,test_acc",
            &report.rows,
        ),
        Format::Json => to_json(&Report::Series(report.clone())),
    };
    emit(args.output.as_deref(), &text)?;
    partial(&report.failures)
}
