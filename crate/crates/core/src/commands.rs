//! File-level entry points behind the command-line subcommands.

use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use serde::Serialize;
use serde_json::Value;

use crate::checkpoint;
use crate::config::RunConfig;
use crate::data::{self, DatasetSplit, Role, SynthConfig};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::pipeline;
use crate::report::{self, Evaluation, RunReport, SweepAxis, SweepRow};

pub const SOURCE_CSV: &str = "source.csv";
pub const TARGET_CSV: &str = "target.csv";
pub const SYNTH_CONFIG_JSON: &str = "synth_config.json";
pub const REPORT_JSON: &str = "report.json";
pub const ADAPTED_CHECKPOINT: &str = "adapted.ckpt";
pub const METRICS_JSON: &str = "metrics.json";
pub const METRICS_CSV: &str = "metrics.csv";

/// Where a configuration comes from: an optional JSON file, an optional seed
/// and `key=value` overrides, applied in that order.
#[derive(Debug, Clone, Default)]
pub struct ConfigSource {
    pub path: Option<PathBuf>,
    pub seed: Option<u64>,
    pub overrides: Vec<String>,
}

impl ConfigSource {
    fn document(&self) -> Result<Value> {
        let mut doc = match &self.path {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                serde_json::from_str(&text).map_err(|e| Error::config("<root>", format!("{}: {e}", path.display())))?
            }
            None => Value::Object(Default::default()),
        };
        if let Some(seed) = self.seed {
            match &mut doc {
                Value::Object(map) => {
                    map.insert("seed".into(), seed.into());
                }
                _ => return Err(Error::config("<root>", "configuration must be a JSON object")),
            }
        }
        Ok(doc)
    }

    pub fn run_config(&self) -> Result<RunConfig> {
        RunConfig::with_overrides(self.document()?, &self.overrides)
    }

    pub fn synth_config(&self) -> Result<SynthConfig> {
        SynthConfig::with_overrides(self.document()?, &self.overrides)
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn to_pretty_json(value: &impl Serialize) -> String {
    let mut text = serde_json::to_string_pretty(value).unwrap_or_default();
    text.push('\n');
    text
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SynthFiles {
    pub source: PathBuf,
    pub target: PathBuf,
    pub config: PathBuf,
}

/// Generates a synthetic benchmark and writes both splits with the config
/// used. Target files keep their labels as hidden truth for evaluation.
pub fn cmd_synth(cfg: &SynthConfig, out: &Path) -> Result<SynthFiles> {
    let (source, target) = data::generate_synthetic(cfg)?;
    create_dir(out)?;
    let files = SynthFiles {
        source: out.join(SOURCE_CSV),
        target: out.join(TARGET_CSV),
        config: out.join(SYNTH_CONFIG_JSON),
    };
    data::save_features(&source.to_table(), &files.source)?;
    data::save_features(&target.to_table(), &files.target)?;
    write_text(&files.config, &to_pretty_json(cfg))?;
    info!(
        "wrote {} source and {} target rows to {}",
        source.len(),
        target.len(),
        out.display()
    );
    Ok(files)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PretrainSummary {
    pub n_shared: usize,
    pub samples: usize,
    pub train_accuracy: f64,
}

/// Trains a source model on a labelled CSV and writes its checkpoint.
/// `n_shared` defaults to one more than the largest label.
pub fn cmd_pretrain(
    source_csv: &Path,
    n_shared: Option<usize>,
    cfg: &RunConfig,
    checkpoint_out: &Path,
) -> Result<PretrainSummary> {
    let table = data::load_features(source_csv)?;
    let inferred = table.labels.iter().flatten().max().map_or(0, |m| m + 1);
    let n_shared = n_shared.unwrap_or(inferred);
    let split = DatasetSplit::from_table(table, Role::Source, n_shared)?;
    if split.is_empty() {
        return Err(Error::Data(format!("{}: no rows", source_csv.display())));
    }
    let model = pipeline::pretrain(&split, cfg)?;
    let train_accuracy = data::accuracy(&model, &split.inputs, &split.truth()?)?;
    if let Some(parent) = checkpoint_out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    checkpoint::save(&model, checkpoint_out)?;
    info!("source accuracy {train_accuracy:.4}");
    Ok(PretrainSummary {
        n_shared,
        samples: split.len(),
        train_accuracy,
    })
}

fn load_target(model: &Model, target_csv: &Path) -> Result<DatasetSplit> {
    let table = data::load_features(target_csv)?;
    if table.dim != model.input_dim() {
        return Err(Error::Data(format!(
            "{}: {} features per row, checkpoint expects {}",
            target_csv.display(),
            table.dim,
            model.input_dim()
        )));
    }
    DatasetSplit::from_table(table, Role::Target, model.classifier.n_shared())
}

/// Adapts a source checkpoint to a target CSV and writes the report and the
/// adapted checkpoint into `out`.
pub fn cmd_adapt(source_checkpoint: &Path, target_csv: &Path, cfg: &RunConfig, out: &Path) -> Result<RunReport> {
    let source = checkpoint::load(source_checkpoint)?;
    let target = load_target(&source, target_csv)?;
    let (report, outcome) = report::run_adaptation(&source, &target, cfg)?;
    create_dir(out)?;
    write_text(&out.join(REPORT_JSON), &format!("{}\n", report.to_json()))?;
    checkpoint::save(&outcome.model, &out.join(ADAPTED_CHECKPOINT))?;
    Ok(report)
}

/// Scores a checkpoint on a target CSV with ground truth. Writes metrics JSON
/// and a one-row CSV when `out` is given.
pub fn cmd_eval(checkpoint_path: &Path, target_csv: &Path, cfg: &RunConfig, out: Option<&Path>) -> Result<Evaluation> {
    let model = checkpoint::load(checkpoint_path)?;
    let target = load_target(&model, target_csv)?;
    target.truth()?;
    let evaluation = report::evaluate(&model, &target, cfg.discovery_matching)?;
    if let Some(out) = out {
        create_dir(out)?;
        write_text(&out.join(METRICS_JSON), &to_pretty_json(&evaluation))?;
        let csv = format!(
            "{}\n{}\n",
            crate::eval::MetricsSummary::CSV_HEADER,
            evaluation.summary().csv_row()
        );
        write_text(&out.join(METRICS_CSV), &csv)?;
    }
    Ok(evaluation)
}

/// Minimum number of seeds per sweep cell.
pub const MIN_SWEEP_SEEDS: usize = 3;

/// Runs every cell of `axis` over `n_seeds` consecutive seeds starting at the
/// configured one and writes the aggregated table to `out_csv`.
pub fn cmd_sweep(
    source_checkpoint: &Path,
    target_csv: &Path,
    cfg: &RunConfig,
    axis: SweepAxis,
    n_seeds: usize,
    out_csv: &Path,
) -> Result<Vec<SweepRow>> {
    if n_seeds < MIN_SWEEP_SEEDS {
        return Err(Error::config(
            "seeds",
            format!("a sweep needs at least {MIN_SWEEP_SEEDS} seeds"),
        ));
    }
    let source = checkpoint::load(source_checkpoint)?;
    let target = load_target(&source, target_csv)?;
    let seeds: Vec<u64> = (0..n_seeds as u64).map(|i| cfg.seed + i).collect();
    let rows = report::sweep(&source, &target, cfg, axis, &seeds)?;
    if let Some(parent) = out_csv.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_text(out_csv, &report::sweep_csv(axis, &rows))?;
    Ok(rows)
}
