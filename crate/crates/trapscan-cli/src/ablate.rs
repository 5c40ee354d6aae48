use std::path::PathBuf;

use clap::Args;
use trapscan::ablation::{ablate, AblateOptions, ProbeConfig, CSV_HEADER, DEFAULT_TAU_ERR, DEFAULT_TAU_JSD};
use trapscan::nn::{load_dataset, MlpModel};
use trapscan::rmt::DEFAULT_C_TW;
use trapscan::traps::{detect_traps, DetectOptions, TrapRecord, DEFAULT_REPLICATES};
use trapscan::{load_checkpoint, Error, Execution};

use crate::error::CliError;
use crate::report::{emit, to_json, AblateOptionsEcho, AblateReport, Report, Tool};
use crate::Format;

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// Checkpoint manifest (JSON).
    pub checkpoint: PathBuf,
    /// Layer to ablate, e.g. `fc2.weight`.
    #[arg(long)]
    pub layer: String,
    /// Shuffle replicate whose traps are ablated.
    #[arg(long, default_value_t = 0)]
    pub replicate: u32,
    /// Trap index within the replicate (largest first). All traps if omitted.
    #[arg(long)]
    pub trap: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_REPLICATES)]
    pub replicates: usize,
    #[arg(long = "c-tw", default_value_t = DEFAULT_C_TW)]
    pub c_tw: f64,
    /// Base seed of the shuffle replicates.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1024)]
    pub probes: usize,
    #[arg(long, default_value_t = 1.0)]
    pub temperature: f64,
    #[arg(long = "probe-seed", default_value_t = 0)]
    pub probe_seed: u64,
    /// Probe mean; defaults to the checkpoint's recorded input mean, else 0.
    #[arg(long = "probe-mean")]
    pub probe_mean: Option<f64>,
    /// Probe standard deviation; defaults to the recorded input std, else 1.
    #[arg(long = "probe-std")]
    pub probe_std: Option<f64>,
    #[arg(long = "replacement-seed", default_value_t = 0)]
    pub replacement_seed: u64,
    /// Labeled dataset (JSON) for the test-error change.
    #[arg(long)]
    pub eval: Option<PathBuf>,
    #[arg(long = "tau-err", default_value_t = DEFAULT_TAU_ERR)]
    pub tau_err: f64,
    #[arg(long = "tau-jsd", default_value_t = DEFAULT_TAU_JSD)]
    pub tau_jsd: f64,
    #[arg(long, value_enum)]
    pub format: Option<Format>,
    #[arg(short, long)]
    pub output: Option<PathBuf>,
}

pub fn run(args: &AblateArgs) -> Result<(), CliError> {
    if args.replicates == 0 || args.probes == 0 {
        return Err(CliError::Usage("--replicates and --probes must be at least 1".into()));
    }
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let model = MlpModel::from_checkpoint(&ckpt)?;
    let w = ckpt
        .layer(&args.layer)
        .ok_or_else(|| Error::LayerNotFound(args.layer.clone()))?;
    let eval = args.eval.as_deref().map(load_dataset).transpose()?;

    let mut probes = ProbeConfig {
        num_probes: args.probes,
        seed: args.probe_seed,
        temperature: args.temperature,
        ..ProbeConfig::default()
    }
    .with_metadata(&ckpt.manifest.metadata);
    if let Some(mean) = args.probe_mean {
        probes.mean = mean;
    }
    if let Some(std) = args.probe_std {
        probes.std = std;
    }
    probes.validate()?;

    let detect = DetectOptions {
        replicates: args.replicates.max(args.replicate as usize + 1),
        base_seed: args.seed,
        c_tw: args.c_tw,
        execution: Execution::default(),
    };
    let scan = detect_traps(w, &detect)?;
    let traps: Vec<&TrapRecord> = scan.traps_of(args.replicate).collect();
    let selected: Vec<(usize, &TrapRecord)> = match args.trap {
        Some(k) => {
            let trap = traps.get(k).ok_or(Error::TrapNotFound {
                index: k,
                available: traps.len(),
            })?;
            vec![(k, *trap)]
        }
        None => traps.iter().copied().enumerate().collect(),
    };

    let options = AblateOptions {
        probes,
        replacement_seed: args.replacement_seed,
        tau_err: args.tau_err,
        tau_jsd: args.tau_jsd,
    };
    let results = selected
        .into_iter()
        .map(|(k, trap)| ablate(&model, trap, k, &options, eval.as_ref()))
        .collect::<Result<Vec<_>, _>>()?;
    for r in results.iter().filter(|r| r.ambiguous) {
        eprintln!(
            "trapscan: trap {} matches its singular direction with overlap {:.3} only",
            r.trap_ref.id(),
            r.overlap
        );
    }

    let report = AblateReport {
        tool: Tool::default(),
        options: AblateOptionsEcho {
            replicates: detect.replicates,
            base_seed: args.seed,
            c_tw: args.c_tw,
            replicate: args.replicate,
            trap: args.trap,
            probes,
            replacement_seed: args.replacement_seed,
            tau_err: args.tau_err,
            tau_jsd: args.tau_jsd,
            eval: args.eval.as_ref().map(|p| p.display().to_string()),
        },
        checkpoint: args.checkpoint.display().to_string(),
        layer: args.layer.clone(),
        traps_found: traps.len(),
        results,
    };
    let text = match args.format.unwrap_or(Format::Json) {
        Format::Json => to_json(&Report::Ablate(report)),
        Format::Csv => {
            let mut out = format!(
                "# trapscan {} ablate replicates={} seed={} c_tw={} probes={} temperature={} probe_seed={} probe_mean={} probe_std={} tau_err={}\n{CSV_HEADER}\n",
                env!("CARGO_PKG_VERSION"),
                report.options.replicates,
                args.seed,
                args.c_tw,
                probes.num_probes,
                probes.temperature,
                probes.seed,
                probes.mean,
                probes.std,
                args.tau_err
            );
            for r in &report.results {
                out.push_str(&r.csv_row());
                out.push('\n');
            }
            out
        }
    };
    emit(args.output.as_deref(), &text)
}
