use std::path::{Path, PathBuf};

use trapscan::nn::{gaussian_clusters, save_dataset, train, CheckpointSink, LogRow, MlpModel};

use crate::error::{io_error, CliError};
use crate::report::{csv_text, emit, to_json, DemoConfig, Report, TrainDemoReport, Tool};

pub fn load_config(path: Option<&Path>) -> Result<DemoConfig, CliError> {
    let Some(path) = path else {
        return Ok(DemoConfig::default());
    };
    let text = std::fs::read_to_string(path).map_err(|e| {
        CliError::Core(trapscan::Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
    })?;
    toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

#[derive(serde::Serialize)]
struct LogCsvRow {
    step: u64,
    train_acc: f64,
    train_loss: f64,
    test_acc: Option<f64>,
    test_loss: Option<f64>,
}

impl From<&LogRow> for LogCsvRow {
    fn from(r: &LogRow) -> Self {
        Self {
            step: r.step,
            train_acc: r.train_acc,
            train_loss: r.train_loss,
            test_acc: r.eval_acc,
            test_loss: r.eval_loss,
        }
    }
}

pub fn run(config_path: Option<&Path>, out: &Path) -> Result<(), CliError> {
    let config = load_config(config_path)?;
    config.train.validate()?;
    std::fs::create_dir_all(out).map_err(|e| io_error(out, e))?;

    let (train_set, test_set) = gaussian_clusters(&config.data, config.data_seed)?;
    let mut widths = vec![config.data.dim];
    widths.extend(&config.hidden);
    widths.push(config.data.num_classes);
    let model = MlpModel::init(&widths, config.train.init_scale, config.train.seed)?;

    let train_path = out.join("train_data.json");
    let test_path = out.join("test_data.json");
    save_dataset(&train_path, &train_set)?;
    save_dataset(&test_path, &test_set)?;

    let sink = CheckpointSink {
        dir: out.to_path_buf(),
        model_name: config.model_name.clone(),
    };
    let run = train(model, &train_set, Some(&test_set), &config.train, Some(&sink))?;

    let log_path = out.join("train_log.csv");
    let rows: Vec<LogCsvRow> = run.log.iter().map(LogCsvRow::from).collect();
    let echo = format!(
        "trapscan {} train-demo seed={} data_seed={} steps={} lr={} weight_decay={} batch_size={} init_scale={}",
        env!("CARGO_PKG_VERSION"),
        config.train.seed,
        config.data_seed,
        config.train.steps,
        config.train.learning_rate,
        config.train.weight_decay,
        config.train.batch_size,
        config.train.init_scale
    );
    emit(
        Some(&log_path),
        &csv_text(&echo, "step,train_acc,train_loss,test_acc,test_loss", &rows),
    )?;

    let final_metrics = *run.log.last().expect("step 0 is always logged");
    let shown = |p: &PathBuf| p.display().to_string();
    let report = TrainDemoReport {
        tool: Tool::default(),
        config,
        train_data: shown(&train_path),
        test_data: shown(&test_path),
        log_csv: shown(&log_path),
        checkpoints: run.checkpoints.iter().map(shown).collect(),
        final_metrics,
    };
    let report_path = out.join("run.json");
    emit(Some(&report_path), &to_json(&Report::TrainDemo(report.clone())))?;
    println!(
        "trained {} steps: train_acc {:.4}, test_acc {}; {} checkpoints in {}",
        report.config.train.steps,
        final_metrics.train_acc,
        final_metrics
            .eval_acc
            .map(|a| format!("{a:.4}"))
            .unwrap_or_else(|| "-".into()),
        report.checkpoints.len(),
        out.display()
    );
    Ok(())
}
