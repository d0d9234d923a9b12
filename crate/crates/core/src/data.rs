//! Datasets: the synthetic shifted benchmark, feature-space augmentations,
//! the feature CSV format, and source pretraining.

use std::fmt::Write as _;
use std::path::Path;

use log::{debug, info};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses;
use crate::model::{sgd_step, Model};
use crate::numerics::{self, Rng, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Source,
    Target,
}

/// A feature matrix with optional labels. `None` marks a withheld label.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub dim: usize,
    pub inputs: Vec<Vec<f64>>,
    pub labels: Vec<Option<usize>>,
    pub role: Role,
    pub n_shared: usize,
    pub n_private: usize,
}

/// Inputs of a split without any labels; the adaptation path only sees this.
#[derive(Debug, Clone, Copy)]
pub struct UnlabelledView<'a> {
    inputs: &'a [Vec<f64>],
}

impl<'a> UnlabelledView<'a> {
    pub fn new(inputs: &'a [Vec<f64>]) -> Self {
        UnlabelledView { inputs }
    }

    pub fn inputs(&self) -> &'a [Vec<f64>] {
        self.inputs
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

impl DatasetSplit {
    /// Builds a split from a parsed table, checking labels against the role:
    /// source labels must all be present and shared; target labels beyond the
    /// shared range define the private class count.
    pub fn from_table(table: FeatureTable, role: Role, n_shared: usize) -> Result<Self> {
        let max = table.labels.iter().flatten().copied().max();
        let n_private = match role {
            Role::Source => {
                if let Some(row) = table.labels.iter().position(Option::is_none) {
                    return Err(Error::Data(format!("source row {} has no label", row + 1)));
                }
                if let Some(m) = max.filter(|&m| m >= n_shared) {
                    return Err(Error::Data(format!(
                        "source label {m} outside the shared range [0, {n_shared})"
                    )));
                }
                0
            }
            Role::Target => max.map_or(0, |m| (m + 1).saturating_sub(n_shared)),
        };
        Ok(DatasetSplit {
            dim: table.dim,
            inputs: table.inputs,
            labels: table.labels,
            role,
            n_shared,
            n_private,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn unlabelled(&self) -> UnlabelledView<'_> {
        UnlabelledView::new(&self.inputs)
    }

    /// All labels, or a data error naming the first unlabelled row.
    pub fn truth(&self) -> Result<Vec<usize>> {
        self.labels
            .iter()
            .enumerate()
            .map(|(i, l)| l.ok_or_else(|| Error::Data(format!("row {} has no ground-truth label", i + 1))))
            .collect()
    }

    /// Same split with every label withheld.
    pub fn strip_labels(&self) -> DatasetSplit {
        DatasetSplit {
            labels: vec![None; self.len()],
            ..self.clone()
        }
    }

    pub fn to_table(&self) -> FeatureTable {
        FeatureTable {
            dim: self.dim,
            inputs: self.inputs.clone(),
            labels: self.labels.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_shared: usize,
    pub n_private: usize,
    pub input_dim: usize,
    pub source_per_class: usize,
    pub target_per_class: usize,
    /// Radius of the sphere the class centres are drawn on.
    pub center_scale: f64,
    pub within_std: f64,
    pub rotation_deg: f64,
    /// Translation length as a fraction of `center_scale`.
    pub translation: f64,
    /// Per-class scale factors are drawn from `U(1 - jitter, 1 + jitter)`.
    pub jitter: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_shared: 10,
            n_private: 11,
            input_dim: 16,
            source_per_class: 40,
            target_per_class: 40,
            center_scale: 3.0,
            within_std: 0.3,
            rotation_deg: 90.0,
            translation: 1.0,
            jitter: 0.1,
            seed: 0,
        }
    }
}

impl SynthConfig {
    /// Office-Home-shaped class structure.
    pub fn office_home() -> Self {
        SynthConfig {
            n_shared: 25,
            n_private: 40,
            ..Default::default()
        }
    }

    /// No rotation, translation or jitter.
    pub fn without_shift(self) -> Self {
        SynthConfig {
            rotation_deg: 0.0,
            translation: 0.0,
            jitter: 0.0,
            ..self
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: SynthConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let field = e.path().to_string();
            Error::config(field, e.into_inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies `key=value` overrides on top of a JSON document.
    pub fn with_overrides(base: serde_json::Value, overrides: &[String]) -> Result<Self> {
        let known = serde_json::to_value(SynthConfig::default()).unwrap_or_default();
        let mut value = base;
        for o in overrides {
            crate::config::apply_override_to(&mut value, o, &known)?;
        }
        let cfg: SynthConfig = serde_path_to_error::deserialize(value).map_err(|e| {
            let field = e.path().to_string();
            Error::config(field, e.into_inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, field: &str, msg: &str| if ok { Ok(()) } else { Err(Error::config(field, msg)) };
        check(self.n_shared >= 2, "n_shared", "must be at least 2")?;
        check(self.input_dim >= 2, "input_dim", "must be at least 2")?;
        check(self.source_per_class >= 1, "source_per_class", "must be at least 1")?;
        check(self.target_per_class >= 1, "target_per_class", "must be at least 1")?;
        check(
            self.center_scale.is_finite() && self.center_scale > 0.0,
            "center_scale",
            "must be positive",
        )?;
        check(
            self.within_std.is_finite() && self.within_std >= 0.0,
            "within_std",
            "must be non-negative",
        )?;
        check(self.rotation_deg.is_finite(), "rotation_deg", "must be finite")?;
        check(
            self.translation.is_finite() && self.translation >= 0.0,
            "translation",
            "must be non-negative",
        )?;
        check((0.0..1.0).contains(&self.jitter), "jitter", "must lie in [0, 1)")?;
        let classes = self.n_shared.checked_add(self.n_private);
        let total = classes.and_then(|c| c.checked_mul(self.source_per_class.max(self.target_per_class)));
        let cells = total.and_then(|t| t.checked_mul(self.input_dim));
        check(
            cells.is_some_and(|c| c <= 1 << 28),
            "n_private",
            "dataset would be too large",
        )?;
        Ok(())
    }
}

fn random_unit(dim: usize, rng: &mut Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        if let Ok(u) = numerics::l2_normalize(&v) {
            return u;
        }
    }
}

/// Rotation by `theta` inside the plane spanned by orthonormal `u`, `v`.
fn rotate(x: &[f64], u: &[f64], v: &[f64], theta: f64) -> Vec<f64> {
    let (a, b) = (numerics::dot(x, u), numerics::dot(x, v));
    let (c, s) = (theta.cos(), theta.sin());
    let (a2, b2) = (c * a - s * b, s * a + c * b);
    x.iter()
        .zip(u.iter().zip(v))
        .map(|(xi, (ui, vi))| xi + (a2 - a) * ui + (b2 - b) * vi)
        .collect()
}

/// Draws a source split over the shared classes and a shifted target split
/// over all classes. Deterministic in `cfg.seed`.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<(DatasetSplit, DatasetSplit)> {
    cfg.validate()?;
    let mut rng = Rng::new(cfg.seed, Stream::DataGeneration);
    let d = cfg.input_dim;
    let classes = cfg.n_shared + cfg.n_private;
    let centers: Vec<Vec<f64>> = (0..classes)
        .map(|_| {
            random_unit(d, &mut rng)
                .into_iter()
                .map(|x| x * cfg.center_scale)
                .collect()
        })
        .collect();
    for (i, a) in centers.iter().enumerate() {
        if centers[..i].iter().any(|b| b == a) {
            return Err(Error::config("seed", "class centres coincide"));
        }
    }

    let u = random_unit(d, &mut rng);
    let v = {
        let w = random_unit(d, &mut rng);
        let p = numerics::dot(&w, &u);
        let r: Vec<f64> = w.iter().zip(&u).map(|(wi, ui)| wi - p * ui).collect();
        numerics::l2_normalize(&r).map_err(|_| Error::config("seed", "degenerate rotation plane"))?
    };
    let theta = cfg.rotation_deg.to_radians();
    let shift: Vec<f64> = random_unit(d, &mut rng)
        .into_iter()
        .map(|x| x * cfg.translation * cfg.center_scale)
        .collect();
    let jitter: Vec<f64> = (0..classes)
        .map(|_| {
            if cfg.jitter == 0.0 {
                1.0
            } else {
                rng.uniform_range(1.0 - cfg.jitter, 1.0 + cfg.jitter)
            }
        })
        .collect();

    let sample = |c: usize, rng: &mut Rng| -> Vec<f64> {
        centers[c].iter().map(|m| m + cfg.within_std * rng.normal()).collect()
    };

    let mut src_inputs = Vec::with_capacity(cfg.n_shared * cfg.source_per_class);
    let mut src_labels = Vec::with_capacity(src_inputs.capacity());
    for c in 0..cfg.n_shared {
        for _ in 0..cfg.source_per_class {
            src_inputs.push(sample(c, &mut rng));
            src_labels.push(Some(c));
        }
    }

    let mut tgt_inputs = Vec::with_capacity(classes * cfg.target_per_class);
    let mut tgt_labels = Vec::with_capacity(tgt_inputs.capacity());
    for (c, &j) in jitter.iter().enumerate() {
        for _ in 0..cfg.target_per_class {
            let x: Vec<f64> = sample(c, &mut rng).into_iter().map(|xi| xi * j).collect();
            let x = rotate(&x, &u, &v, theta);
            tgt_inputs.push(x.iter().zip(&shift).map(|(a, b)| a + b).collect());
            tgt_labels.push(Some(c));
        }
    }

    let source = DatasetSplit {
        dim: d,
        inputs: src_inputs,
        labels: src_labels,
        role: Role::Source,
        n_shared: cfg.n_shared,
        n_private: 0,
    };
    let target = DatasetSplit {
        dim: d,
        inputs: tgt_inputs,
        labels: tgt_labels,
        role: Role::Target,
        n_shared: cfg.n_shared,
        n_private: cfg.n_private,
    };
    Ok((source, target))
}

/// Root mean square of all coordinates; the reference scale for noise.
pub fn input_scale(inputs: &[Vec<f64>]) -> f64 {
    let (sum, count) = inputs
        .iter()
        .flatten()
        .fold((0.0, 0usize), |(s, n), x| (s + x * x, n + 1));
    if count == 0 {
        1.0
    } else {
        (sum / count as f64).sqrt()
    }
}

/// Additive Gaussian noise with standard deviation `sigma`.
pub fn weak_aug(x: &[f64], sigma: f64, rng: &mut Rng) -> Vec<f64> {
    x.iter().map(|xi| xi + sigma * rng.normal()).collect()
}

/// Additive Gaussian noise, then each coordinate zeroed with probability
/// `mask_prob`.
pub fn strong_aug(x: &[f64], sigma: f64, mask_prob: f64, rng: &mut Rng) -> Vec<f64> {
    x.iter()
        .map(|xi| {
            let noisy = xi + sigma * rng.normal();
            if rng.bernoulli(mask_prob) {
                0.0
            } else {
                noisy
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PretrainOptions {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
}

/// Minibatch SGD on mean cross-entropy over the labelled source split.
/// Returns the mean training loss of the last epoch.
pub fn pretrain_source(model: &mut Model, source: &DatasetSplit, opts: &PretrainOptions, rng: &mut Rng) -> Result<f64> {
    if model.classifier.n_private() != 0 || model.n_classes() != source.n_shared {
        return Err(Error::shape(format!(
            "source model must have exactly {} classes, has {}",
            source.n_shared,
            model.n_classes()
        )));
    }
    let labels = source.truth()?;
    if let Some(&bad) = labels.iter().find(|&&l| l >= source.n_shared) {
        return Err(Error::InvalidLabel {
            label: bad,
            classes: source.n_shared,
        });
    }
    if opts.batch_size == 0 {
        return Err(Error::config("batch_size", "must be at least 1"));
    }
    let mut order: Vec<usize> = (0..source.len()).collect();
    let mut last = 0.0;
    for epoch in 0..opts.epochs {
        rng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(opts.batch_size) {
            let mut grads = model.zero_gradients();
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let f = model.forward(&source.inputs[i])?;
                let (loss, mut d_logits) = losses::cross_entropy(&f.probs, labels[i]);
                if !loss.is_finite() {
                    return Err(Error::AtEpoch {
                        epoch,
                        source: Box::new(Error::NonFiniteLoss { term: "cross_entropy" }),
                    });
                }
                epoch_loss += loss;
                d_logits.iter_mut().for_each(|g| *g *= scale);
                model.backward(&f, &d_logits, None, &mut grads);
            }
            sgd_step(model, &grads, opts.lr, opts.weight_decay).map_err(|e| Error::AtEpoch {
                epoch,
                source: Box::new(e),
            })?;
        }
        last = epoch_loss / source.len().max(1) as f64;
        debug!("pretrain epoch {epoch}: loss {last:.5}");
    }
    info!("source pretraining finished, final loss {last:.5}");
    Ok(last)
}

/// Fraction of samples whose prediction equals the label.
pub fn accuracy(model: &Model, inputs: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if inputs.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    for (x, &y) in inputs.iter().zip(labels) {
        hits += usize::from(model.predict(x)? == y);
    }
    Ok(hits as f64 / inputs.len() as f64)
}

/// Parsed feature CSV: header `label,f0,...,f{d-1}`, one row per sample,
/// label `-1` for unlabelled rows.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTable {
    pub dim: usize,
    pub inputs: Vec<Vec<f64>>,
    pub labels: Vec<Option<usize>>,
}

fn parse_error(line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        message: message.into(),
    }
}

/// Strict parser: ASCII only, `.` decimals, every line newline-terminated,
/// no quoting, no blank lines, finite values only.
pub fn parse_features(text: &str) -> Result<FeatureTable> {
    if !text.is_ascii() {
        let line = text
            .split_inclusive('\n')
            .position(|l| !l.is_ascii())
            .map_or(1, |i| i + 1);
        return Err(parse_error(line, "non-ASCII content"));
    }
    if !text.ends_with('\n') {
        let line = text.split('\n').count().max(1);
        return Err(parse_error(line, "missing trailing newline"));
    }
    let mut lines = text[..text.len() - 1].split('\n');
    let header = lines.next().unwrap_or_default();
    let mut cols = header.split(',');
    if cols.next() != Some("label") {
        return Err(parse_error(1, "header must start with `label`"));
    }
    let mut dim = 0usize;
    for name in cols {
        if name != format!("f{dim}") {
            return Err(parse_error(1, format!("expected column `f{dim}`, found `{name}`")));
        }
        dim += 1;
    }
    if dim == 0 {
        return Err(parse_error(1, "no feature columns"));
    }

    let mut inputs = Vec::new();
    let mut labels = Vec::new();
    for (i, row) in lines.enumerate() {
        let line = i + 2;
        let fields: Vec<&str> = row.split(',').collect();
        if fields.len() != dim + 1 {
            return Err(parse_error(
                line,
                format!("expected {} columns, found {}", dim + 1, fields.len()),
            ));
        }
        let label: i64 = fields[0]
            .parse()
            .map_err(|_| parse_error(line, format!("invalid label `{}`", fields[0])))?;
        labels.push(match label {
            -1 => None,
            l if l >= 0 => Some(usize::try_from(l).map_err(|_| parse_error(line, "label too large"))?),
            l => return Err(parse_error(line, format!("invalid label {l}"))),
        });
        let mut x = Vec::with_capacity(dim);
        for (j, f) in fields[1..].iter().enumerate() {
            let v: f64 =
                parse_number(f).ok_or_else(|| parse_error(line, format!("invalid value `{f}` in column f{j}")))?;
            x.push(v);
        }
        inputs.push(x);
    }
    Ok(FeatureTable { dim, inputs, labels })
}

/// Plain decimal or scientific notation; rejects `inf`, `nan` and the like.
fn parse_number(s: &str) -> Option<f64> {
    let ok = !s.is_empty()
        && s.bytes()
            .all(|b| b.is_ascii_digit() || matches!(b, b'.' | b'-' | b'+' | b'e' | b'E'));
    if !ok {
        return None;
    }
    s.parse::<f64>().ok().filter(|v| v.is_finite())
}

/// Writes values with the shortest representation that parses back exactly.
pub fn format_features(table: &FeatureTable) -> String {
    let mut out = String::from("label");
    for j in 0..table.dim {
        let _ = write!(out, ",f{j}");
    }
    out.push('\n');
    for (x, l) in table.inputs.iter().zip(&table.labels) {
        match l {
            Some(l) => {
                let _ = write!(out, "{l}");
            }
            None => out.push_str("-1"),
        }
        for v in x {
            let _ = write!(out, ",{v:?}");
        }
        out.push('\n');
    }
    out
}

pub fn load_features(path: &Path) -> Result<FeatureTable> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_features(&text)
}

pub fn save_features(table: &FeatureTable, path: &Path) -> Result<()> {
    std::fs::write(path, format_features(table)).map_err(|e| Error::io(path, e))
}
