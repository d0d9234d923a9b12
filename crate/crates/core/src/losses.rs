//! Adaptation losses and their analytic gradients.
//!
//! * negative-learning classification on complementary labels,
//! * NL-InfoNCE contrastive loss over history-filtered negatives,
//! * the diversity regulariser on the batch-mean prediction,
//!
//! and the weighted composite backpropagated through the whole model.
//! Keys and queued keys come from the momentum model and carry no gradient.

use std::collections::VecDeque;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::bank::{ExclusionMode, TemporalQueue};
use crate::error::{Error, Result};
use crate::model::{Gradients, Model, MomentumModel};
use crate::numerics::{self, Rng};

/// `1 - p` and `p` are floored at this value inside logarithms.
pub const LOG_FLOOR: f64 = 1e-7;

/// Standard cross-entropy `-ln p_y` and its logit gradient `p - e_y`.
pub fn cross_entropy(probs: &[f64], label: usize) -> (f64, Vec<f64>) {
    let loss = -probs[label].max(1e-300).ln();
    let mut grad = probs.to_vec();
    grad[label] -= 1.0;
    (loss, grad)
}

/// Uniform draw from `{0..classes} \ {y_bar}`.
pub fn complementary_label(y_bar: usize, classes: usize, rng: &mut Rng) -> Result<usize> {
    if classes < 2 {
        return Err(Error::InvalidClassCount {
            count: classes,
            reason: "complementary labels need at least two classes",
        });
    }
    let r = rng.below(classes - 1);
    Ok(if r >= y_bar { r + 1 } else { r })
}

/// `-ln(1 - p_ytilde)` and its gradient w.r.t. the logits.
///
/// With `q = p_ytilde`, `dL/dl_c = q (1[c = ytilde] - p_c) / (1 - q)`; the
/// gradient vanishes where the floor on `1 - q` is active.
pub fn complementary_loss(probs: &[f64], y_tilde: usize) -> (f64, Vec<f64>) {
    let q = probs[y_tilde];
    let one_minus = 1.0 - q;
    if one_minus < LOG_FLOOR {
        return (-LOG_FLOOR.ln(), vec![0.0; probs.len()]);
    }
    let loss = -one_minus.ln();
    let scale = q / one_minus;
    let grad = probs
        .iter()
        .enumerate()
        .map(|(c, &p)| scale * (f64::from(u8::from(c == y_tilde)) - p))
        .collect();
    (loss, grad)
}

#[derive(Debug, Clone, PartialEq)]
pub struct NlClassification {
    pub loss: f64,
    pub d_logits: Vec<f64>,
    pub y_tilde: usize,
}

pub fn nl_classification_loss(probs: &[f64], y_bar: usize, rng: &mut Rng) -> Result<NlClassification> {
    let y_tilde = complementary_label(y_bar, probs.len(), rng)?;
    let (loss, d_logits) = complementary_loss(probs, y_tilde);
    Ok(NlClassification {
        loss,
        d_logits,
        y_tilde,
    })
}

/// FIFO of momentum-model keys from earlier batches, stored unit-normalised.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct KeyQueue {
    capacity: usize,
    entries: VecDeque<(usize, Vec<f64>)>,
}

impl KeyQueue {
    pub fn new(capacity: usize) -> Self {
        KeyQueue {
            capacity,
            entries: VecDeque::with_capacity(capacity),
        }
    }

    pub fn push(&mut self, sample_id: usize, key: &[f64]) -> Result<()> {
        if self.capacity == 0 {
            return Ok(());
        }
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back((sample_id, numerics::l2_normalize(key)?));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> Vec<usize> {
        self.entries.iter().map(|(id, _)| *id).collect()
    }

    pub fn key(&self, index: usize) -> &[f64] {
        &self.entries[index].1
    }
}

/// Indices of queue entries admissible as negatives for `query_id`: never the
/// query itself, and never a sample whose pseudo-label history intersects the
/// query's.
pub fn exclusion_set(queue_ids: &[usize], query_id: usize, history: &TemporalQueue, mode: ExclusionMode) -> Vec<usize> {
    queue_ids
        .iter()
        .enumerate()
        .filter(|&(_, &id)| id != query_id && !history.shared_history(query_id, id, mode))
        .map(|(j, _)| j)
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveOutput {
    pub loss: f64,
    /// Gradient w.r.t. the raw (unnormalised) query feature.
    pub d_query: Vec<f64>,
}

/// Maps a gradient w.r.t. `q / |q|` back to `q`.
fn through_normalization(unit: &[f64], norm: f64, g: &[f64]) -> Vec<f64> {
    let proj = numerics::dot(unit, g);
    unit.iter().zip(g).map(|(u, gi)| (gi - u * proj) / norm).collect()
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// NL-InfoNCE with a given negative:
/// `-ln(1 - exp(q.k_neg / t) / sum_{j in N_q} exp(q.k_j / t))`.
///
/// `candidates` are unit keys indexed by `N_q`; `negative` indexes into
/// `candidates`. `positive`, when given, adds `exp(q.k / t)` to the
/// denominator.
pub fn nl_infonce_with_negative(
    query: &[f64],
    candidates: &[&[f64]],
    negative: usize,
    positive: Option<&[f64]>,
    tau: f64,
) -> Result<ContrastiveOutput> {
    let norm = numerics::norm(query);
    if norm == 0.0 {
        return Err(Error::DegenerateVector("zero query feature"));
    }
    let q: Vec<f64> = query.iter().map(|x| x / norm).collect();
    let keys: Vec<&[f64]> = candidates.iter().copied().chain(positive).collect();
    let logits: Vec<f64> = keys.iter().map(|k| numerics::dot(&q, k) / tau).collect();
    // -ln(1 - r) = LSE(all) - LSE(all but the negative).
    let lse = log_sum_exp(&logits);
    let rest: Vec<f64> = logits
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != negative)
        .map(|(_, &s)| s)
        .collect();
    let lse_rest = if rest.is_empty() {
        f64::NEG_INFINITY
    } else {
        log_sum_exp(&rest)
    };
    let loss = lse - lse_rest;
    if loss > -LOG_FLOOR.ln() {
        return Ok(ContrastiveOutput {
            loss: -LOG_FLOOR.ln(),
            d_query: vec![0.0; query.len()],
        });
    }
    let mut g = vec![0.0; q.len()];
    for (j, (k, s)) in keys.iter().zip(&logits).enumerate() {
        let rest_weight = if j == negative { 0.0 } else { (s - lse_rest).exp() };
        let coef = ((s - lse).exp() - rest_weight) / tau;
        g.iter_mut().zip(k.iter()).for_each(|(gi, ki)| *gi += coef * ki);
    }
    Ok(ContrastiveOutput {
        loss,
        d_query: through_normalization(&q, norm, &g),
    })
}

/// NL-InfoNCE with the negative drawn uniformly from `N_q`.
/// Fewer than two admissible negatives yields [`Error::SampleSkipped`].
pub fn nl_infonce_loss(
    query: &[f64],
    candidates: &[&[f64]],
    positive: Option<&[f64]>,
    tau: f64,
    rng: &mut Rng,
) -> Result<(ContrastiveOutput, usize)> {
    if candidates.len() < 2 {
        return Err(Error::SampleSkipped("fewer than two admissible negatives"));
    }
    let negative = rng.below(candidates.len());
    Ok((
        nl_infonce_with_negative(query, candidates, negative, positive, tau)?,
        negative,
    ))
}

/// Standard InfoNCE against the positive key and the admissible negatives.
pub fn infonce_loss(query: &[f64], positive: &[f64], candidates: &[&[f64]], tau: f64) -> Result<ContrastiveOutput> {
    let norm = numerics::norm(query);
    if norm == 0.0 {
        return Err(Error::DegenerateVector("zero query feature"));
    }
    let q: Vec<f64> = query.iter().map(|x| x / norm).collect();
    let keys: Vec<&[f64]> = std::iter::once(positive).chain(candidates.iter().copied()).collect();
    let logits: Vec<f64> = keys.iter().map(|k| numerics::dot(&q, k) / tau).collect();
    let lse = log_sum_exp(&logits);
    let loss = lse - logits[0];
    let mut g = vec![0.0; q.len()];
    for (j, (k, s)) in keys.iter().zip(&logits).enumerate() {
        let coef = ((s - lse).exp() - f64::from(u8::from(j == 0))) / tau;
        g.iter_mut().zip(k.iter()).for_each(|(gi, ki)| *gi += coef * ki);
    }
    Ok(ContrastiveOutput {
        loss,
        d_query: through_normalization(&q, norm, &g),
    })
}

/// `sum_c pbar_c ln pbar_c` of the batch-mean prediction, with per-sample
/// logit gradients.
pub fn diversity_loss(probs: &[Vec<f64>]) -> Result<(f64, Vec<Vec<f64>>)> {
    if probs.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let b = probs.len() as f64;
    let mean = crate::pseudo::soft_vote(probs.iter().map(Vec::as_slice));
    let loss: f64 = mean.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum();
    // dL/dp_i = (ln pbar + 1) / B, then through each sample's softmax.
    let dp: Vec<f64> = mean.iter().map(|&p| (p.max(1e-300).ln() + 1.0) / b).collect();
    let grads = probs
        .iter()
        .map(|p| {
            let inner = numerics::dot(p, &dp);
            p.iter().zip(&dp).map(|(pk, gk)| pk * (gk - inner)).collect()
        })
        .collect();
    Ok((loss, grads))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContrastiveKind {
    #[default]
    NlInfonce,
    Infonce,
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub cls: f64,
    pub ctr: f64,
    pub div: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            cls: 1.0,
            ctr: 1.0,
            div: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_cls: f64,
    pub l_ctr: f64,
    pub l_div: f64,
    pub total: f64,
    pub n_selected: usize,
    pub n_excluded_pairs: usize,
    pub n_skipped: usize,
}

/// One target sample as seen by the composite loss, with every random choice
/// already made.
#[derive(Debug, Clone, PartialEq)]
pub struct PlannedSample {
    pub sample_id: usize,
    /// Strongly augmented input for the live model (query and `p_sa`).
    pub query_input: Vec<f64>,
    /// Unit key from the momentum model on a second strong augmentation.
    pub key: Vec<f64>,
    /// Complementary label when the sample was selected.
    pub y_tilde: Option<usize>,
    /// Admissible negatives (indices into the plan's key list).
    pub negatives: Vec<usize>,
    /// Chosen negative, an index into `negatives`.
    pub negative: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchPlan {
    pub samples: Vec<PlannedSample>,
    pub queue_keys: Vec<Vec<f64>>,
    pub weights: LossWeights,
    pub contrastive: ContrastiveKind,
    pub tau: f64,
    pub include_positive: bool,
    pub n_excluded_pairs: usize,
}

/// Evaluates a planned batch: `L = g1 L_cls + g2 L_ctr + g3 L_div` and its
/// parameter gradient. `L_cls` averages over selected samples, `L_ctr` over
/// samples with a contrastive term, `L_div` uses the whole batch.
pub fn evaluate_plan(model: &Model, plan: &BatchPlan) -> Result<(LossBreakdown, Gradients)> {
    if plan.samples.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let w = plan.weights;
    let forwards = plan
        .samples
        .iter()
        .map(|s| model.forward(&s.query_input))
        .collect::<Result<Vec<_>>>()?;
    let c = model.n_classes();
    let mut d_logits = vec![vec![0.0; c]; forwards.len()];
    let mut d_feats = vec![vec![0.0; model.classifier.dim()]; forwards.len()];
    let mut out = LossBreakdown {
        n_excluded_pairs: plan.n_excluded_pairs,
        ..Default::default()
    };

    let n_sel = plan.samples.iter().filter(|s| s.y_tilde.is_some()).count();
    out.n_selected = n_sel;
    if n_sel == 0 {
        warn!("no selected samples in batch; classification term is zero");
    }
    for (i, s) in plan.samples.iter().enumerate() {
        if let Some(yt) = s.y_tilde {
            let (l, g) = complementary_loss(&forwards[i].probs, yt);
            out.l_cls += l / n_sel as f64;
            if !numerics::all_finite(&g) {
                return Err(Error::NonFiniteGradient { term: "classification" });
            }
            let k = w.cls / n_sel as f64;
            d_logits[i].iter_mut().zip(&g).for_each(|(d, gi)| *d += k * gi);
        }
    }

    let probs: Vec<Vec<f64>> = forwards.iter().map(|f| f.probs.clone()).collect();
    let (l_div, g_div) = diversity_loss(&probs)?;
    out.l_div = l_div;
    for (d, g) in d_logits.iter_mut().zip(&g_div) {
        if !numerics::all_finite(g) {
            return Err(Error::NonFiniteGradient { term: "diversity" });
        }
        d.iter_mut().zip(g).for_each(|(di, gi)| *di += w.div * gi);
    }

    if plan.contrastive != ContrastiveKind::Off {
        let mut terms = Vec::with_capacity(plan.samples.len());
        for (i, s) in plan.samples.iter().enumerate() {
            let cands: Vec<&[f64]> = s.negatives.iter().map(|&j| plan.queue_keys[j].as_slice()).collect();
            let q = forwards[i].features();
            let term = match plan.contrastive {
                ContrastiveKind::NlInfonce => match s.negative {
                    Some(neg) => {
                        let pos = plan.include_positive.then_some(s.key.as_slice());
                        Some(nl_infonce_with_negative(q, &cands, neg, pos, plan.tau)?)
                    }
                    None => None,
                },
                ContrastiveKind::Infonce => Some(infonce_loss(q, &s.key, &cands, plan.tau)?),
                ContrastiveKind::Off => None,
            };
            match term {
                Some(t) => terms.push((i, t)),
                None => out.n_skipped += 1,
            }
        }
        let n = terms.len();
        for (i, t) in terms {
            if !numerics::all_finite(&t.d_query) || !t.loss.is_finite() {
                return Err(Error::NonFiniteGradient { term: "contrastive" });
            }
            out.l_ctr += t.loss / n as f64;
            let k = w.ctr / n as f64;
            d_feats[i].iter_mut().zip(&t.d_query).for_each(|(d, g)| *d += k * g);
        }
    }

    out.total = w.cls * out.l_cls + w.ctr * out.l_ctr + w.div * out.l_div;
    if !out.total.is_finite() {
        return Err(Error::NonFiniteLoss { term: "total" });
    }
    let mut grads = model.zero_gradients();
    for ((f, dl), df) in forwards.iter().zip(&d_logits).zip(&d_feats) {
        model.backward(f, dl, Some(df), &mut grads);
    }
    Ok((out, grads))
}

/// Evaluates only the scalar objective of a plan (used by gradient checks).
pub fn plan_objective(model: &Model, plan: &BatchPlan) -> Result<f64> {
    evaluate_plan(model, plan).map(|(b, _)| b.total)
}

/// One batch element handed to [`total_loss_and_grads`].
#[derive(Debug, Clone)]
pub struct BatchSample<'a> {
    pub sample_id: usize,
    pub y_bar: usize,
    pub selected: bool,
    pub strong_a: &'a [f64],
    pub strong_b: &'a [f64],
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveConfig {
    pub weights: LossWeights,
    pub contrastive: ContrastiveKind,
    pub tau: f64,
    pub include_positive: bool,
    pub exclusion: ExclusionMode,
}

/// Makes the batch's random choices (complementary labels, admissible and
/// chosen negatives), embeds the keys with the momentum model, and evaluates
/// the composite objective.
#[allow(clippy::too_many_arguments)]
pub fn total_loss_and_grads(
    model: &Model,
    momentum: &MomentumModel,
    batch: &[BatchSample<'_>],
    key_queue: &KeyQueue,
    history: &TemporalQueue,
    cfg: &ObjectiveConfig,
    complementary_rng: &mut Rng,
    negative_rng: &mut Rng,
) -> Result<(LossBreakdown, Gradients, BatchPlan)> {
    let plan = plan_batch(
        model,
        momentum,
        batch,
        key_queue,
        history,
        cfg,
        complementary_rng,
        negative_rng,
    )?;
    let (breakdown, grads) = evaluate_plan(model, &plan)?;
    Ok((breakdown, grads, plan))
}

#[allow(clippy::too_many_arguments)]
pub fn plan_batch(
    model: &Model,
    momentum: &MomentumModel,
    batch: &[BatchSample<'_>],
    key_queue: &KeyQueue,
    history: &TemporalQueue,
    cfg: &ObjectiveConfig,
    complementary_rng: &mut Rng,
    negative_rng: &mut Rng,
) -> Result<BatchPlan> {
    let c = model.n_classes();
    let queue_ids = key_queue.ids();
    let mut n_excluded_pairs = 0;
    let mut samples = Vec::with_capacity(batch.len());
    for s in batch {
        if s.y_bar >= c {
            return Err(Error::InvalidLabel {
                label: s.y_bar,
                classes: c,
            });
        }
        let y_tilde = if s.selected {
            Some(complementary_label(s.y_bar, c, complementary_rng)?)
        } else {
            None
        };
        let key_fwd = momentum.model().forward(s.strong_b)?;
        let key = numerics::l2_normalize(key_fwd.features())?;
        let (negatives, negative) = if cfg.contrastive == ContrastiveKind::Off {
            (Vec::new(), None)
        } else {
            let nq = exclusion_set(&queue_ids, s.sample_id, history, cfg.exclusion);
            n_excluded_pairs += queue_ids.len() - nq.len();
            let neg =
                (cfg.contrastive == ContrastiveKind::NlInfonce && nq.len() >= 2).then(|| negative_rng.below(nq.len()));
            (nq, neg)
        };
        samples.push(PlannedSample {
            sample_id: s.sample_id,
            query_input: s.strong_a.to_vec(),
            key,
            y_tilde,
            negatives,
            negative,
        });
    }
    Ok(BatchPlan {
        samples,
        queue_keys: (0..key_queue.len()).map(|j| key_queue.key(j).to_vec()).collect(),
        weights: cfg.weights,
        contrastive: cfg.contrastive,
        tau: cfg.tau,
        include_positive: cfg.include_positive,
        n_excluded_pairs,
    })
}
