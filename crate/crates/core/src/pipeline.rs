//! End-to-end adaptation: classifier extension, clustering initialisation,
//! memory bank and queues, then the per-batch refine / select / optimise loop.

use log::{debug, info};
use serde::{Deserialize, Serialize};

use crate::bank::{MemoryBank, SeedEntry, TemporalQueue};
use crate::cluster_init::{self, CentroidMatching, InitOptions};
use crate::config::RunConfig;
use crate::data::{self, DatasetSplit, PretrainOptions, UnlabelledView};
use crate::error::{Error, Result};
use crate::losses::{self, BatchSample, KeyQueue, LossBreakdown, LossWeights, ObjectiveConfig};
use crate::model::{sgd_step, Classifier, FeatureExtractor, Model, MomentumModel};
use crate::numerics::{self, Rng, Stream};
use crate::pseudo::{self, PseudoLabelRecord};

/// Default bank size cap.
pub const MAX_BANK: usize = 2048;

/// Freshly initialised source network for `input_dim` inputs and
/// `n_shared` classes.
pub fn source_model(input_dim: usize, n_shared: usize, cfg: &RunConfig) -> Result<Model> {
    let mut rng = Rng::new(cfg.seed, Stream::WeightInit);
    let extractor = FeatureExtractor::mlp(input_dim, &cfg.hidden, cfg.feature_dim, &mut rng);
    Model::new(extractor, Classifier::random(cfg.feature_dim, n_shared, &mut rng))
}

/// Builds and trains a source model on a labelled source split.
pub fn pretrain(source: &DatasetSplit, cfg: &RunConfig) -> Result<Model> {
    let mut model = source_model(source.dim, source.n_shared, cfg)?;
    let opts = PretrainOptions {
        epochs: cfg.source_epochs,
        lr: cfg.source_lr,
        batch_size: cfg.source_batch_size,
        weight_decay: cfg.weight_decay,
    };
    data::pretrain_source(&mut model, source, &opts, &mut Rng::new(cfg.seed, Stream::Shuffle))?;
    Ok(model)
}

/// Number of private columns the run uses.
pub fn private_columns(source: &Model, cfg: &RunConfig) -> usize {
    cfg.n_private.unwrap_or(source.classifier.n_shared())
}

/// The source model with `W_P` appended, before any target information.
pub fn extended_source(source: &Model, cfg: &RunConfig) -> Result<Model> {
    if source.classifier.n_private() != 0 {
        return Err(Error::shape("source model is already extended"));
    }
    let n_private = private_columns(source, cfg);
    let classifier = if n_private == 0 {
        source.classifier.clone()
    } else {
        let mut rng = Rng::new(cfg.seed, Stream::ClassifierExtension);
        source.classifier.extend(n_private, &mut rng)?
    };
    Model::new(source.extractor.clone(), classifier)
}

/// Target model and bank contents before the first adaptation epoch.
#[derive(Debug, Clone)]
pub struct InitialState {
    pub model: Model,
    /// One entry per target sample.
    pub bank_seed: Vec<SeedEntry>,
    pub pseudo_labels: Vec<usize>,
    pub matching: Option<CentroidMatching>,
}

/// Clustering initialisation, or, when disabled, the raw predictions of the
/// extended source model.
pub fn initialize(source: &Model, target: UnlabelledView<'_>, cfg: &RunConfig) -> Result<InitialState> {
    if target.is_empty() {
        return Err(Error::Data("target split is empty".into()));
    }
    let extended = extended_source(source, cfg)?;
    let features: Vec<Vec<f64>> = target
        .inputs()
        .iter()
        .map(|x| extended.extractor.extract(x))
        .collect::<Result<_>>()?;

    if cfg.cluster_init {
        let opts = InitOptions {
            matching: cfg.matching,
            tau2: cfg.tau2,
            max_iter: cfg.kmeans_max_iter,
            tol: cfg.kmeans_tol,
            ..Default::default()
        };
        let mut rng = Rng::new(cfg.seed, Stream::Clustering);
        let init = cluster_init::initialize_target(&extended.classifier, &features, &opts, &mut rng)?;
        info!(
            "clustering initialisation: inertia {:.4} after {} iterations",
            init.clusters.inertia, init.clusters.iterations
        );
        let bank_seed = features
            .into_iter()
            .zip(init.bank_probs)
            .enumerate()
            .map(|(i, (z, p))| (i, z, p))
            .collect();
        Ok(InitialState {
            model: Model::new(extended.extractor, init.classifier)?,
            bank_seed,
            pseudo_labels: init.pseudo_labels,
            matching: Some(init.matching),
        })
    } else {
        let mut bank_seed = Vec::with_capacity(features.len());
        let mut labels = Vec::with_capacity(features.len());
        for (i, z) in features.into_iter().enumerate() {
            let p = numerics::softmax(&extended.classifier.logits(&z));
            labels.push(numerics::argmax(&p));
            bank_seed.push((i, z, p));
        }
        Ok(InitialState {
            model: extended,
            bank_seed,
            pseudo_labels: labels,
            matching: None,
        })
    }
}

/// Per-epoch statistics of an adaptation run. Contains no ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    /// Losses averaged over the epoch's batches; counts are summed.
    pub loss: LossBreakdown,
    pub selection_rate: f64,
    pub mean_u_nc: f64,
    pub mean_u_cs: f64,
    pub mean_u_nc_selected: Option<f64>,
    pub mean_u_nc_rejected: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct AdaptOutcome {
    pub model: Model,
    pub initial_labels: Vec<usize>,
    pub matching: Option<CentroidMatching>,
    /// Refined pseudo-label of every sample at each epoch.
    pub epoch_labels: Vec<Vec<usize>>,
    pub stats: Vec<EpochStats>,
    /// Records from the final epoch, indexed by sample id.
    pub records: Vec<PseudoLabelRecord>,
}

fn cosine_lr(base: f64, epoch: usize, epochs: usize) -> f64 {
    base * 0.5 * (1.0 + (std::f64::consts::PI * epoch as f64 / epochs as f64).cos())
}

fn mean_of(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| s / n as f64)
}

struct Streams {
    complementary: Rng,
    negatives: Rng,
    selection: Rng,
    augmentation: Rng,
    bank: Rng,
    shuffle: Rng,
}

impl Streams {
    fn new(seed: u64) -> Self {
        Streams {
            complementary: Rng::new(seed, Stream::ComplementaryLabels),
            negatives: Rng::new(seed, Stream::NegativeKeys),
            selection: Rng::new(seed, Stream::Selection),
            augmentation: Rng::new(seed, Stream::Augmentation),
            bank: Rng::new(seed, Stream::BankSampling),
            shuffle: Rng::new(seed, Stream::Shuffle),
        }
    }
}

/// Runs the full adaptation of `source` to the unlabelled target inputs.
pub fn adapt(source: &Model, target: UnlabelledView<'_>, cfg: &RunConfig) -> Result<AdaptOutcome> {
    cfg.validate()?;
    let inputs = target.inputs();
    let n = inputs.len();
    let init = initialize(source, target, cfg)?;
    let mut streams = Streams::new(cfg.seed);
    let mut live = init.model;
    let classes = live.n_classes();
    let mut momentum = MomentumModel::new(&live, cfg.momentum)?;
    let bank_size = cfg.bank_size.unwrap_or(n.min(MAX_BANK));
    let mut bank = MemoryBank::create(init.bank_seed, bank_size, &mut streams.bank)?;
    let mut history = TemporalQueue::new(n, cfg.tau_hist, classes)?;
    for (i, &y) in init.pseudo_labels.iter().enumerate() {
        history.push(i, y)?;
    }
    let mut key_queue = KeyQueue::new(cfg.key_queue_size);

    let scale = data::input_scale(inputs);
    let (sigma_w, sigma_s) = (cfg.weak_noise * scale, cfg.strong_noise * scale);
    let objective = ObjectiveConfig {
        weights: LossWeights {
            cls: cfg.gamma_cls,
            ctr: cfg.gamma_ctr,
            div: cfg.gamma_div,
        },
        contrastive: cfg.contrastive,
        tau: cfg.tau,
        include_positive: cfg.include_positive,
        exclusion: cfg.exclusion,
    };
    // With every weight at zero the objective is constant and the update,
    // weight decay included, is skipped.
    let trains = cfg.gamma_cls > 0.0 || cfg.gamma_ctr > 0.0 || cfg.gamma_div > 0.0;

    let mut order: Vec<usize> = (0..n).collect();
    let mut epoch_labels = Vec::with_capacity(cfg.epochs);
    let mut stats = Vec::with_capacity(cfg.epochs);
    let mut records: Vec<Option<PseudoLabelRecord>> = vec![None; n];

    for epoch in 0..cfg.epochs {
        let at_epoch = |e: Error| Error::AtEpoch {
            epoch: epoch + 1,
            source: Box::new(e),
        };
        history.advance_epoch();
        let lr = cosine_lr(cfg.lr, epoch, cfg.epochs);
        streams.shuffle.shuffle(&mut order);
        let mut labels = vec![0usize; n];
        let mut sum = LossBreakdown::default();
        let mut batches = 0usize;

        for chunk in order.chunks(cfg.batch_size) {
            let mut ids = chunk.to_vec();
            ids.sort_unstable();
            let weak: Vec<Vec<f64>> = ids
                .iter()
                .map(|&i| data::weak_aug(&inputs[i], sigma_w, &mut streams.augmentation))
                .collect();

            for (&i, x) in ids.iter().zip(&weak) {
                let rec = refine_sample(i, x, &live, &bank, cfg, &mut streams.selection).map_err(at_epoch)?;
                history.push(i, rec.y_bar).map_err(at_epoch)?;
                labels[i] = rec.y_bar;
                records[i] = Some(rec);
            }

            let strong: Vec<(Vec<f64>, Vec<f64>)> = ids
                .iter()
                .map(|&i| {
                    let a = data::strong_aug(&inputs[i], sigma_s, cfg.mask_prob, &mut streams.augmentation);
                    let b = data::strong_aug(&inputs[i], sigma_s, cfg.mask_prob, &mut streams.augmentation);
                    (a, b)
                })
                .collect();
            let batch: Vec<BatchSample<'_>> = ids
                .iter()
                .zip(&strong)
                .map(|(&i, (a, b))| {
                    let rec = records[i].as_ref().expect("refined above");
                    BatchSample {
                        sample_id: i,
                        y_bar: rec.y_bar,
                        selected: rec.selected,
                        strong_a: a,
                        strong_b: b,
                    }
                })
                .collect();
            let (breakdown, grads, plan) = losses::total_loss_and_grads(
                &live,
                &momentum,
                &batch,
                &key_queue,
                &history,
                &objective,
                &mut streams.complementary,
                &mut streams.negatives,
            )
            .map_err(at_epoch)?;

            if trains {
                sgd_step(&mut live, &grads, lr, cfg.weight_decay).map_err(at_epoch)?;
            }
            momentum.update(&live).map_err(at_epoch)?;
            let refresh: Vec<(usize, Vec<f64>)> = ids.iter().copied().zip(weak).collect();
            bank.refresh(momentum.model(), &refresh).map_err(at_epoch)?;
            for s in &plan.samples {
                key_queue.push(s.sample_id, &s.key).map_err(at_epoch)?;
            }

            sum.l_cls += breakdown.l_cls;
            sum.l_ctr += breakdown.l_ctr;
            sum.l_div += breakdown.l_div;
            sum.total += breakdown.total;
            sum.n_selected += breakdown.n_selected;
            sum.n_excluded_pairs += breakdown.n_excluded_pairs;
            sum.n_skipped += breakdown.n_skipped;
            batches += 1;
        }

        let b = batches.max(1) as f64;
        sum.l_cls /= b;
        sum.l_ctr /= b;
        sum.l_div /= b;
        sum.total /= b;
        let recs: Vec<&PseudoLabelRecord> = records.iter().flatten().collect();
        let epoch_stats = EpochStats {
            epoch: epoch + 1,
            lr,
            loss: sum,
            selection_rate: sum.n_selected as f64 / n as f64,
            mean_u_nc: mean_of(recs.iter().map(|r| r.u_nc)).unwrap_or(0.0),
            mean_u_cs: mean_of(recs.iter().map(|r| r.u_cs)).unwrap_or(0.0),
            mean_u_nc_selected: mean_of(recs.iter().filter(|r| r.selected).map(|r| r.u_nc)),
            mean_u_nc_rejected: mean_of(recs.iter().filter(|r| !r.selected).map(|r| r.u_nc)),
        };
        debug!(
            "epoch {}: loss {:.4} (cls {:.4}, ctr {:.4}, div {:.4}), selected {:.3}",
            epoch + 1,
            sum.total,
            sum.l_cls,
            sum.l_ctr,
            sum.l_div,
            epoch_stats.selection_rate
        );
        stats.push(epoch_stats);
        epoch_labels.push(labels);
    }

    Ok(AdaptOutcome {
        model: live,
        initial_labels: init.pseudo_labels,
        matching: init.matching,
        epoch_labels,
        stats,
        records: records.into_iter().flatten().collect(),
    })
}

/// Refinement, both uncertainties and the selection draw for one sample.
/// Both Bernoulli draws are always consumed; disabled components are left
/// out of the combination.
fn refine_sample(
    sample_id: usize,
    weak: &[f64],
    live: &Model,
    bank: &MemoryBank,
    cfg: &RunConfig,
    selection: &mut Rng,
) -> Result<PseudoLabelRecord> {
    let z = live.extractor.extract(weak)?;
    let (p_bar, y_bar) = pseudo::refine(bank, &z, cfg.n_neighbors)?;
    let u_nc = pseudo::uncertainty_nc(&p_bar, p_bar.len())?;
    let u_cs = pseudo::uncertainty_cs(&z, &live.classifier, &p_bar)?;
    let w_nc = pseudo::to_weight(u_nc, cfg.weight_nc)?;
    let w_cs = pseudo::to_weight(u_cs, cfg.weight_cs)?;
    let d = pseudo::draw(w_nc, w_cs, selection);
    let selected = match (cfg.use_nc, cfg.use_cs) {
        (true, true) => cfg.combiner.combine(d.nc, d.cs),
        (true, false) => d.nc,
        (false, true) => d.cs,
        (false, false) => true,
    };
    Ok(PseudoLabelRecord {
        sample_id,
        p_bar,
        y_bar,
        u_nc,
        u_cs,
        w_nc,
        w_cs,
        selected,
    })
}
