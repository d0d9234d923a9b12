//! Run configuration: every hyperparameter with its default, JSON loading,
//! validation, and `key=value` overrides.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::bank::ExclusionMode;
use crate::cluster_init::MatchingMode;
use crate::error::{Error, Result};
use crate::losses::ContrastiveKind;
use crate::pseudo::{Combiner, WeightFn};

/// How private predictions are paired with true private classes when
/// scoring discovery.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscoveryMatching {
    #[default]
    Contingency,
    Prototype,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,

    pub hidden: Vec<usize>,
    pub feature_dim: usize,
    pub source_epochs: usize,
    pub source_lr: f64,
    pub source_batch_size: usize,

    /// Number of private classifier columns; `None` means one per shared class.
    pub n_private: Option<usize>,
    pub cluster_init: bool,
    pub matching: MatchingMode,
    pub tau2: f64,
    pub kmeans_max_iter: usize,
    pub kmeans_tol: f64,

    /// Memory bank size; `None` means `min(N, 2048)`.
    pub bank_size: Option<usize>,
    pub n_neighbors: usize,
    pub tau_hist: usize,
    pub exclusion: ExclusionMode,
    pub key_queue_size: usize,

    pub use_nc: bool,
    pub use_cs: bool,
    pub weight_nc: WeightFn,
    pub weight_cs: WeightFn,
    pub combiner: Combiner,

    pub contrastive: ContrastiveKind,
    pub tau: f64,
    pub include_positive: bool,
    pub gamma_cls: f64,
    pub gamma_ctr: f64,
    pub gamma_div: f64,

    /// Noise scales as fractions of the input RMS.
    pub weak_noise: f64,
    pub strong_noise: f64,
    pub mask_prob: f64,

    pub momentum: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,

    pub discovery_matching: DiscoveryMatching,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            hidden: vec![64, 64],
            feature_dim: 32,
            source_epochs: 60,
            source_lr: 0.05,
            source_batch_size: 32,
            n_private: None,
            cluster_init: true,
            matching: MatchingMode::Optimal,
            tau2: 0.25,
            kmeans_max_iter: 100,
            kmeans_tol: 1e-6,
            bank_size: None,
            n_neighbors: 4,
            tau_hist: 5,
            exclusion: ExclusionMode::History,
            key_queue_size: 256,
            use_nc: true,
            use_cs: true,
            weight_nc: WeightFn::Exponential,
            weight_cs: WeightFn::Linear,
            combiner: Combiner::And,
            contrastive: ContrastiveKind::NlInfonce,
            tau: 0.07,
            include_positive: false,
            gamma_cls: 1.0,
            gamma_ctr: 1.0,
            gamma_div: 1.0,
            weak_noise: 0.02,
            strong_noise: 0.1,
            mask_prob: 0.1,
            momentum: 0.999,
            lr: 2e-3,
            weight_decay: 1e-4,
            batch_size: 64,
            epochs: 30,
            discovery_matching: DiscoveryMatching::Contingency,
        }
    }
}

fn check(ok: bool, field: &str, message: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::config(field, message))
    }
}

fn positive(v: f64, field: &str) -> Result<()> {
    check(v.is_finite() && v > 0.0, field, "must be positive")
}

fn non_negative(v: f64, field: &str) -> Result<()> {
    check(v.is_finite() && v >= 0.0, field, "must be non-negative")
}

fn probability(v: f64, field: &str) -> Result<()> {
    check((0.0..=1.0).contains(&v), field, "must lie in [0, 1]")
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_value(serde_json::from_str(text).map_err(|e| Error::config("<root>", e.to_string()))?)
    }

    pub fn from_value(value: Value) -> Result<Self> {
        let cfg: RunConfig = serde_path_to_error::deserialize(value).map_err(|e| {
            let field = e.path().to_string();
            Error::config(field, e.into_inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies `key=value` overrides on top of a JSON document. Values are
    /// read as JSON when they parse as such and as strings otherwise.
    pub fn with_overrides(base: Value, overrides: &[String]) -> Result<Self> {
        let mut value = base;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        Self::from_value(value)
    }

    pub fn validate(&self) -> Result<()> {
        check(self.hidden.iter().all(|&h| h > 0), "hidden", "widths must be positive")?;
        check(self.feature_dim > 0, "feature_dim", "must be positive")?;
        positive(self.source_lr, "source_lr")?;
        check(self.source_batch_size > 0, "source_batch_size", "must be positive")?;
        check(self.kmeans_max_iter > 0, "kmeans_max_iter", "must be positive")?;
        positive(self.tau2, "tau2")?;
        non_negative(self.kmeans_tol, "kmeans_tol")?;
        check(self.bank_size != Some(0), "bank_size", "must be positive")?;
        check(self.n_neighbors > 0, "n_neighbors", "must be positive")?;
        check(self.tau_hist > 0, "tau_hist", "must be positive")?;
        positive(self.tau, "tau")?;
        non_negative(self.gamma_cls, "gamma_cls")?;
        non_negative(self.gamma_ctr, "gamma_ctr")?;
        non_negative(self.gamma_div, "gamma_div")?;
        non_negative(self.weak_noise, "weak_noise")?;
        non_negative(self.strong_noise, "strong_noise")?;
        probability(self.mask_prob, "mask_prob")?;
        check(
            self.momentum.is_finite() && (0.0..=1.0).contains(&self.momentum),
            "momentum",
            "must lie in [0, 1]",
        )?;
        non_negative(self.lr, "lr")?;
        non_negative(self.weight_decay, "weight_decay")?;
        check(self.batch_size > 0, "batch_size", "must be positive")?;
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).unwrap_or_default()
    }
}

/// Splits `key=value`, parses the value, and writes it at `key` in `doc`.
/// Keys are top-level only.
pub fn apply_override(doc: &mut Value, assignment: &str) -> Result<()> {
    let known = serde_json::to_value(RunConfig::default()).unwrap_or(Value::Null);
    apply_override_to(doc, assignment, &known)
}

/// As [`apply_override`], with the admissible keys taken from `known`.
pub fn apply_override_to(doc: &mut Value, assignment: &str, known: &Value) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::config(assignment, "override must have the form key=value"))?;
    let key = key.trim();
    if key.is_empty() {
        return Err(Error::config(assignment, "empty key"));
    }
    if known.get(key).is_none() {
        return Err(Error::config(key, "unknown field"));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    match doc {
        Value::Object(map) => {
            map.insert(key.to_string(), value);
            Ok(())
        }
        _ => Err(Error::config("<root>", "configuration must be a JSON object")),
    }
}
