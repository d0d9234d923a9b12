//! Run reports, evaluation against held-out truth, and ablation sweeps.

use std::time::Instant;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::config::{DiscoveryMatching, RunConfig};
use crate::data::DatasetSplit;
use crate::error::{Error, Result};
use crate::eval::{self, DiscoveryMetrics, MetricsSummary, OpenSetMetrics};
use crate::losses::{ContrastiveKind, LossBreakdown};
use crate::model::Model;
use crate::pipeline::{self, AdaptOutcome};
use crate::pseudo::{Combiner, WeightFn};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
    pub pseudo_label_acc: Option<f64>,
    pub selection_rate: f64,
    pub mean_u_nc: f64,
    pub mean_u_cs: f64,
    pub mean_u_nc_selected: Option<f64>,
    pub mean_u_nc_rejected: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub open_set: OpenSetMetrics,
    pub discovery: Option<DiscoveryMetrics>,
    /// The other discovery matching mode, reported when its score differs.
    pub discovery_alt: Option<DiscoveryMetrics>,
    pub note: Option<String>,
}

impl Evaluation {
    pub fn summary(&self) -> MetricsSummary {
        MetricsSummary::new(&self.open_set, self.discovery.as_ref())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: RunConfig,
    pub initial_pseudo_label_acc: Option<f64>,
    pub trace: Vec<EpochReport>,
    pub evaluation: Option<Evaluation>,
    pub wall_clock_secs: f64,
}

impl RunReport {
    /// The report with timing removed, for reproducibility comparisons.
    pub fn without_timing(&self) -> RunReport {
        RunReport {
            wall_clock_secs: 0.0,
            ..self.clone()
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).unwrap_or_default()
    }
}

/// Open-set pseudo-label accuracy: a shared-class sample counts when its
/// label is exact, a private-class sample when its label is any private class.
pub fn pseudo_label_accuracy(labels: &[usize], truth: &[usize], n_shared: usize) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = labels
        .iter()
        .zip(truth)
        .filter(|&(&l, &t)| if t < n_shared { l == t } else { l >= n_shared })
        .count();
    hits as f64 / labels.len() as f64
}

/// Scores a model on a target split with ground truth.
pub fn evaluate(model: &Model, target: &DatasetSplit, matching: DiscoveryMatching) -> Result<Evaluation> {
    let truth = target.truth()?;
    let n_shared = model.classifier.n_shared();
    if n_shared != target.n_shared {
        return Err(Error::Data(format!(
            "model has {n_shared} shared classes, target split {}",
            target.n_shared
        )));
    }
    let mut pred = Vec::with_capacity(target.len());
    let mut features = Vec::with_capacity(target.len());
    for x in &target.inputs {
        let f = model.forward(x)?;
        pred.push(crate::numerics::argmax(&f.probs));
        features.push(f.features().to_vec());
    }
    let open_set = eval::open_set_metrics(&pred, &truth, n_shared)?;

    let n_hat = model.classifier.n_private();
    let n_true = target.n_private;
    let (discovery, discovery_alt, note) = if n_true == 0 || n_hat == 0 {
        (None, None, None)
    } else if n_hat != n_true {
        let note = format!("discovery not scored: {n_hat} private columns but {n_true} true private classes");
        (None, None, Some(note))
    } else {
        let contingency = eval::discovery_metrics(&pred, &truth, n_shared, n_true)?;
        let prototype = eval::discovery_by_prototypes(&features, &pred, &truth, n_shared, n_hat, n_true)?;
        let (primary, other) = match matching {
            DiscoveryMatching::Contingency => (contingency, prototype),
            DiscoveryMatching::Prototype => (prototype, contingency),
        };
        let alt = (other.cluster_acc != primary.cluster_acc).then_some(other);
        (Some(primary), alt, None)
    };
    Ok(Evaluation {
        open_set,
        discovery,
        discovery_alt,
        note,
    })
}

/// Adapts `source` to `target` and assembles the report. Ground truth, when
/// present, is consulted only after adaptation.
pub fn run_adaptation(source: &Model, target: &DatasetSplit, cfg: &RunConfig) -> Result<(RunReport, AdaptOutcome)> {
    let start = Instant::now();
    let outcome = pipeline::adapt(source, target.unlabelled(), cfg)?;
    let truth = target.truth().ok();
    let acc = |labels: &[usize]| {
        truth
            .as_ref()
            .map(|t| pseudo_label_accuracy(labels, t, target.n_shared))
    };
    let trace = outcome
        .stats
        .iter()
        .zip(&outcome.epoch_labels)
        .map(|(s, labels)| EpochReport {
            epoch: s.epoch,
            lr: s.lr,
            loss: s.loss,
            pseudo_label_acc: acc(labels),
            selection_rate: s.selection_rate,
            mean_u_nc: s.mean_u_nc,
            mean_u_cs: s.mean_u_cs,
            mean_u_nc_selected: s.mean_u_nc_selected,
            mean_u_nc_rejected: s.mean_u_nc_rejected,
        })
        .collect();
    let evaluation = match truth {
        Some(_) => Some(evaluate(&outcome.model, target, cfg.discovery_matching)?),
        None => {
            warn!("target split has no ground truth; skipping evaluation");
            None
        }
    };
    if let Some(e) = &evaluation {
        info!(
            "OS* {:.2} UNK {:.2} HOS {:.2}",
            e.open_set.os_star, e.open_set.unk, e.open_set.hos
        );
    }
    let report = RunReport {
        config: cfg.clone(),
        initial_pseudo_label_acc: acc(&outcome.initial_labels),
        trace,
        evaluation,
        wall_clock_secs: start.elapsed().as_secs_f64(),
    };
    Ok((report, outcome))
}

/// Source-only baseline: the source model with its freshly extended,
/// untrained private columns.
pub fn source_only(source: &Model, target: &DatasetSplit, cfg: &RunConfig) -> Result<Evaluation> {
    let extended = pipeline::extended_source(source, cfg)?;
    evaluate(&extended, target, cfg.discovery_matching)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    /// Weight functions for (u_nc, u_cs).
    FAssignment,
    Combiner,
    NPrivate,
    /// The full method and each single component disabled.
    Components,
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f_assignment" => Ok(SweepAxis::FAssignment),
            "combiner" => Ok(SweepAxis::Combiner),
            "n_private" => Ok(SweepAxis::NPrivate),
            "components" => Ok(SweepAxis::Components),
            other => Err(Error::config("axis", format!("unknown sweep axis `{other}`"))),
        }
    }
}

/// The labelled configurations an axis expands to.
pub fn sweep_cells(axis: SweepAxis, base: &RunConfig, n_shared: usize) -> Vec<(String, RunConfig)> {
    let with = |f: &dyn Fn(&mut RunConfig)| {
        let mut c = base.clone();
        f(&mut c);
        c
    };
    let name = |w: WeightFn| match w {
        WeightFn::Linear => "lin",
        WeightFn::Exponential => "exp",
    };
    match axis {
        SweepAxis::FAssignment => [
            (WeightFn::Linear, WeightFn::Linear),
            (WeightFn::Linear, WeightFn::Exponential),
            (WeightFn::Exponential, WeightFn::Exponential),
            (WeightFn::Exponential, WeightFn::Linear),
        ]
        .into_iter()
        .map(|(nc, cs)| {
            let label = format!("{}/{}", name(nc), name(cs));
            (
                label,
                with(&|c| {
                    c.weight_nc = nc;
                    c.weight_cs = cs;
                }),
            )
        })
        .collect(),
        SweepAxis::Combiner => [(Combiner::And, "and"), (Combiner::Or, "or")]
            .into_iter()
            .map(|(op, label)| (label.to_string(), with(&|c| c.combiner = op)))
            .collect(),
        SweepAxis::NPrivate => {
            let mut grid = vec![1, n_shared / 2, n_shared, 2 * n_shared];
            grid.retain(|&k| k >= 1);
            grid.dedup();
            grid.into_iter()
                .map(|k| (k.to_string(), with(&|c| c.n_private = Some(k))))
                .collect()
        }
        SweepAxis::Components => vec![
            ("full".to_string(), base.clone()),
            ("no_cluster_init".to_string(), with(&|c| c.cluster_init = false)),
            ("no_u_nc".to_string(), with(&|c| c.use_nc = false)),
            ("no_u_cs".to_string(), with(&|c| c.use_cs = false)),
            (
                "no_nl_infonce".to_string(),
                with(&|c| c.contrastive = ContrastiveKind::Infonce),
            ),
        ],
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: String,
    pub hos: Vec<f64>,
    pub mean_hos: f64,
    pub std_hos: f64,
}

/// Mean and sample standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Adapts once per cell and seed and aggregates HOS.
pub fn sweep(
    source: &Model,
    target: &DatasetSplit,
    base: &RunConfig,
    axis: SweepAxis,
    seeds: &[u64],
) -> Result<Vec<SweepRow>> {
    if seeds.is_empty() {
        return Err(Error::config("seeds", "at least one seed is required"));
    }
    target.truth()?;
    let mut rows = Vec::new();
    for (value, cfg) in sweep_cells(axis, base, target.n_shared) {
        let mut hos = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let cfg = RunConfig { seed, ..cfg.clone() };
            let (report, _) = run_adaptation(source, target, &cfg)?;
            let h = report.evaluation.map_or(0.0, |e| e.open_set.hos);
            info!("sweep {value} seed {seed}: HOS {h:.2}");
            hos.push(h);
        }
        let (mean_hos, std_hos) = mean_std(&hos);
        rows.push(SweepRow {
            value,
            hos,
            mean_hos,
            std_hos,
        });
    }
    Ok(rows)
}

pub fn sweep_csv(axis: SweepAxis, rows: &[SweepRow]) -> String {
    let axis = serde_json::to_value(axis)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default();
    let mut out = String::from("axis,value,mean_hos,std_hos,n_seeds\n");
    for r in rows {
        out.push_str(&format!(
            "{axis},{},{},{},{}\n",
            r.value,
            r.mean_hos,
            r.std_hos,
            r.hos.len()
        ));
    }
    out
}
