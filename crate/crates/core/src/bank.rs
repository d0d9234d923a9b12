//! Memory bank of momentum-model features and predictions, and the temporal
//! pseudo-label queue used to exclude likely same-class negative pairs.

use std::collections::{HashMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::numerics::{self, Rng};

#[derive(Debug, Clone, PartialEq)]
pub struct BankEntry {
    pub sample_id: usize,
    pub feature: Vec<f64>,
    pub probs: Vec<f64>,
    unit: Vec<f64>,
}

impl BankEntry {
    pub fn new(sample_id: usize, feature: Vec<f64>, probs: Vec<f64>) -> Result<Self> {
        let unit = numerics::l2_normalize(&feature)?;
        Ok(BankEntry {
            sample_id,
            feature,
            probs,
            unit,
        })
    }
}

/// `(sample_id, feature, probabilities)`.
pub type SeedEntry = (usize, Vec<f64>, Vec<f64>);

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    entries: Vec<BankEntry>,
    index: HashMap<usize, usize>,
}

impl MemoryBank {
    /// Draws `size` distinct entries uniformly without replacement.
    pub fn create(seed: Vec<SeedEntry>, size: usize, rng: &mut Rng) -> Result<Self> {
        if size > seed.len() {
            return Err(Error::InsufficientSamples {
                needed: size,
                available: seed.len(),
            });
        }
        let mut order: Vec<usize> = (0..seed.len()).collect();
        // Partial Fisher-Yates: the first `size` slots are a uniform sample.
        for i in 0..size {
            let j = i + rng.below(seed.len() - i);
            order.swap(i, j);
        }
        let mut chosen: Vec<usize> = order[..size].to_vec();
        chosen.sort_unstable();
        let mut slots: Vec<Option<SeedEntry>> = seed.into_iter().map(Some).collect();
        let mut entries = Vec::with_capacity(size);
        let mut index = HashMap::with_capacity(size);
        for i in chosen {
            let (id, z, p) = slots[i].take().expect("indices are distinct");
            if index.insert(id, entries.len()).is_some() {
                return Err(Error::Data(format!("duplicate sample id {id} in bank seed")));
            }
            entries.push(BankEntry::new(id, z, p)?);
        }
        Ok(MemoryBank { entries, index })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[BankEntry] {
        &self.entries
    }

    pub fn get(&self, sample_id: usize) -> Option<&BankEntry> {
        self.index.get(&sample_id).map(|&i| &self.entries[i])
    }

    pub fn contains(&self, sample_id: usize) -> bool {
        self.index.contains_key(&sample_id)
    }

    pub fn sample_ids(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.sample_id).collect()
    }

    /// Overwrites the stored pair for a member; non-members are ignored.
    pub fn update(&mut self, sample_id: usize, feature: Vec<f64>, probs: Vec<f64>) -> Result<()> {
        if let Some(&i) = self.index.get(&sample_id) {
            self.entries[i] = BankEntry::new(sample_id, feature, probs)?;
        }
        Ok(())
    }

    /// Re-embeds the members of `batch` with `model` (the momentum model).
    /// Inputs should already carry the weak augmentation.
    pub fn refresh(&mut self, model: &Model, batch: &[(usize, Vec<f64>)]) -> Result<()> {
        for (id, x) in batch {
            if !self.contains(*id) {
                continue;
            }
            let f = model.forward(x)?;
            self.update(*id, f.features().to_vec(), f.probs)?;
        }
        Ok(())
    }

    /// The `n` entries closest to `z` in cosine distance, nearest first,
    /// ties broken by ascending sample id.
    pub fn neighbors(&self, z: &[f64], n: usize) -> Result<Vec<(usize, &[f64])>> {
        if n > self.entries.len() {
            return Err(Error::InsufficientSamples {
                needed: n,
                available: self.entries.len(),
            });
        }
        let q = numerics::l2_normalize(z)?;
        let mut scored: Vec<(f64, usize, usize)> = self
            .entries
            .iter()
            .enumerate()
            .map(|(i, e)| (numerics::unit_cosine_distance(&q, &e.unit), e.sample_id, i))
            .collect();
        let cmp = |a: &(f64, usize, usize), b: &(f64, usize, usize)| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1));
        if n > 0 && n < scored.len() {
            scored.select_nth_unstable_by(n - 1, cmp);
            scored.truncate(n);
        }
        scored.sort_by(cmp);
        scored.truncate(n);
        Ok(scored
            .into_iter()
            .map(|(_, id, i)| (id, self.entries[i].probs.as_slice()))
            .collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExclusionMode {
    /// Two samples collide if their label windows share any value.
    #[default]
    History,
    /// Two samples collide only if they carried the same label in the same epoch.
    SameEpoch,
}

/// Per-sample ring buffer of the most recent refined pseudo-labels.
#[derive(Debug, Clone, PartialEq)]
pub struct TemporalQueue {
    depth: usize,
    n_classes: usize,
    epoch: usize,
    buffers: Vec<VecDeque<(usize, usize)>>,
}

impl TemporalQueue {
    pub fn new(n_samples: usize, depth: usize, n_classes: usize) -> Result<Self> {
        if depth == 0 {
            return Err(Error::config("tau_hist", "history depth must be at least 1"));
        }
        Ok(TemporalQueue {
            depth,
            n_classes,
            epoch: 0,
            buffers: vec![VecDeque::with_capacity(depth); n_samples],
        })
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn advance_epoch(&mut self) {
        self.epoch += 1;
    }

    pub fn push(&mut self, sample_id: usize, label: usize) -> Result<()> {
        if label >= self.n_classes {
            return Err(Error::InvalidLabel {
                label,
                classes: self.n_classes,
            });
        }
        if sample_id >= self.buffers.len() {
            self.buffers.resize(sample_id + 1, VecDeque::with_capacity(self.depth));
        }
        let buf = &mut self.buffers[sample_id];
        if buf.len() == self.depth {
            buf.pop_front();
        }
        buf.push_back((self.epoch, label));
        Ok(())
    }

    /// Labels currently held for a sample, oldest first.
    pub fn labels(&self, sample_id: usize) -> Vec<usize> {
        self.buffers
            .get(sample_id)
            .map(|b| b.iter().map(|&(_, l)| l).collect())
            .unwrap_or_default()
    }

    /// Whether two samples carried a common pseudo-label inside the window.
    /// Unknown ids have an empty history.
    pub fn shared_history(&self, a: usize, b: usize, mode: ExclusionMode) -> bool {
        let (Some(ha), Some(hb)) = (self.buffers.get(a), self.buffers.get(b)) else {
            return false;
        };
        match mode {
            ExclusionMode::History => ha.iter().any(|&(_, la)| hb.iter().any(|&(_, lb)| la == lb)),
            ExclusionMode::SameEpoch => ha.iter().any(|x| hb.contains(x)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;
    use crate::numerics::Stream;
    use proptest::prelude::*;

    fn seed_pairs(n: usize, rng: &mut Rng) -> Vec<SeedEntry> {
        (0..n)
            .map(|i| {
                let z: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
                let p = numerics::softmax(&[rng.normal(), rng.normal(), rng.normal()]);
                (i, z, p)
            })
            .collect()
    }

    #[test]
    fn create_examples() {
        let mut r = Rng::with_stream_id(1, 300);
        let all = MemoryBank::create(seed_pairs(10, &mut r), 10, &mut Rng::new(1, Stream::BankSampling)).unwrap();
        assert_eq!(all.sample_ids(), (0..10).collect::<Vec<_>>());
        let one = MemoryBank::create(seed_pairs(10, &mut r), 1, &mut Rng::new(1, Stream::BankSampling)).unwrap();
        assert_eq!(one.len(), 1);
        assert!(MemoryBank::create(seed_pairs(3, &mut r), 4, &mut Rng::new(1, Stream::BankSampling)).is_err());
    }

    #[test]
    fn create_is_deterministic() {
        let ids = |seed| {
            let mut r = Rng::with_stream_id(1, 300);
            MemoryBank::create(seed_pairs(10, &mut r), 4, &mut Rng::new(seed, Stream::BankSampling))
                .unwrap()
                .sample_ids()
        };
        assert_eq!(ids(17), ids(17));
        assert_eq!(ids(17), vec![0, 1, 2, 4]);
    }

    #[test]
    fn neighbor_examples() {
        let mut r = Rng::with_stream_id(2, 300);
        let pairs = seed_pairs(8, &mut r);
        let target = pairs[5].1.clone();
        let bank = MemoryBank::create(pairs, 8, &mut r).unwrap();
        let nn = bank.neighbors(&target, 1).unwrap();
        assert_eq!(nn[0].0, 5);
        let all = bank.neighbors(&target, 8).unwrap();
        assert_eq!(all.len(), 8);
        assert!(bank.neighbors(&target, 9).is_err());
    }

    #[test]
    fn neighbors_match_full_scan() {
        let mut r = Rng::with_stream_id(3, 300);
        let bank = MemoryBank::create(seed_pairs(50, &mut r), 50, &mut r).unwrap();
        for _ in 0..100 {
            let z: Vec<f64> = (0..4).map(|_| r.normal()).collect();
            let mut scan: Vec<(f64, usize)> = bank
                .entries()
                .iter()
                .map(|e| (numerics::cosine_distance(&z, &e.feature).unwrap(), e.sample_id))
                .collect();
            scan.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            let want: Vec<usize> = scan[..5].iter().map(|x| x.1).collect();
            let got: Vec<usize> = bank.neighbors(&z, 5).unwrap().iter().map(|x| x.0).collect();
            assert_eq!(got, want);
        }
    }

    #[test]
    fn refresh_overwrites_members_only() {
        let mut r = Rng::new(4, Stream::WeightInit);
        let model = Model::new(
            crate::model::FeatureExtractor::mlp(4, &[5], 4, &mut r),
            crate::model::Classifier::random(4, 3, &mut r),
        )
        .unwrap();
        let mut bank = MemoryBank::create(seed_pairs(6, &mut r), 3, &mut r).unwrap();
        let before = bank.clone();
        bank.refresh(&model, &[]).unwrap();
        assert_eq!(bank, before);
        let member = bank.sample_ids()[0];
        let outsider = (0..6).find(|i| !bank.contains(*i)).unwrap();
        let x = vec![0.1, 0.2, -0.3, 0.4];
        bank.refresh(&model, &[(member, x.clone()), (outsider, x.clone())])
            .unwrap();
        assert_eq!(bank.sample_ids(), before.sample_ids());
        let f = model.forward(&x).unwrap();
        assert_eq!(bank.get(member).unwrap().probs, f.probs);
        assert_eq!(bank.get(member).unwrap().feature, f.features());
    }

    #[test]
    fn queue_examples() {
        let mut q = TemporalQueue::new(2, 3, 10).unwrap();
        assert!(q.labels(0).is_empty());
        for l in 1..=4 {
            q.push(0, l).unwrap();
        }
        assert_eq!(q.labels(0), vec![2, 3, 4]);
        for _ in 0..3 {
            q.push(1, 7).unwrap();
        }
        assert_eq!(q.labels(1), vec![7, 7, 7]);
        assert!(matches!(q.push(0, 10), Err(Error::InvalidLabel { .. })));
    }

    #[test]
    fn shared_history_examples() {
        let mut q = TemporalQueue::new(4, 3, 10).unwrap();
        for (a, b) in [(1, 3), (2, 5), (3, 5)] {
            q.push(0, a).unwrap();
            q.push(1, b).unwrap();
            q.advance_epoch();
        }
        assert!(q.shared_history(0, 1, ExclusionMode::History));
        assert!(!q.shared_history(0, 1, ExclusionMode::SameEpoch));
        q.push(2, 1).unwrap();
        q.push(2, 1).unwrap();
        q.push(3, 2).unwrap();
        q.push(3, 2).unwrap();
        assert!(!q.shared_history(2, 3, ExclusionMode::History));
        assert!(!q.shared_history(0, 99, ExclusionMode::History));
    }

    #[test]
    fn depth_one_reduces_to_current_label_equality() {
        let mut r = Rng::with_stream_id(6, 300);
        let mut q = TemporalQueue::new(20, 1, 4).unwrap();
        let mut current = [0; 20];
        for _ in 0..5 {
            for (id, c) in current.iter_mut().enumerate() {
                *c = r.below(4);
                q.push(id, *c).unwrap();
            }
            q.advance_epoch();
        }
        for a in 0..20 {
            for b in 0..20 {
                assert_eq!(q.shared_history(a, b, ExclusionMode::History), current[a] == current[b]);
            }
        }
    }

    #[test]
    fn shared_history_matches_double_loop() {
        let mut r = Rng::with_stream_id(7, 300);
        let mut q = TemporalQueue::new(30, 5, 6).unwrap();
        for _ in 0..9 {
            for id in 0..30 {
                if r.bernoulli(0.8) {
                    q.push(id, r.below(6)).unwrap();
                }
            }
            q.advance_epoch();
        }
        for _ in 0..100 {
            let (a, b) = (r.below(30), r.below(30));
            let (la, lb) = (q.labels(a), q.labels(b));
            let mut naive = false;
            for x in &la {
                for y in &lb {
                    naive |= x == y;
                }
            }
            assert_eq!(q.shared_history(a, b, ExclusionMode::History), naive);
        }
    }

    proptest! {
        #[test]
        fn neighbors_ignore_storage_order(seed in 0u64..500) {
            let mut r = Rng::with_stream_id(seed, 301);
            let mut pairs = seed_pairs(25, &mut r);
            let z: Vec<f64> = (0..4).map(|_| r.normal()).collect();
            let a = MemoryBank::create(pairs.clone(), 25, &mut r).unwrap();
            r.shuffle(&mut pairs);
            // Rebuild with entries inserted in shuffled order.
            let mut b = MemoryBank { entries: Vec::new(), index: HashMap::new() };
            for (id, f, p) in pairs {
                b.index.insert(id, b.entries.len());
                b.entries.push(BankEntry::new(id, f, p).unwrap());
            }
            let ids = |bank: &MemoryBank| bank.neighbors(&z, 6).unwrap().iter().map(|x| x.0).collect::<Vec<_>>();
            prop_assert_eq!(ids(&a), ids(&b));
        }

        #[test]
        fn shared_history_is_symmetric(seed in 0u64..500) {
            let mut r = Rng::with_stream_id(seed, 302);
            let mut q = TemporalQueue::new(10, 4, 5).unwrap();
            for _ in 0..6 {
                for id in 0..10 { q.push(id, r.below(5)).unwrap(); }
                q.advance_epoch();
            }
            for a in 0..10 {
                for b in 0..10 {
                    for mode in [ExclusionMode::History, ExclusionMode::SameEpoch] {
                        prop_assert_eq!(q.shared_history(a, b, mode), q.shared_history(b, a, mode));
                    }
                }
            }
        }
    }
}
