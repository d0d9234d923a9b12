//! Pseudo-label refinement by neighbour soft-voting, the two uncertainty
//! estimates, and Bernoulli sample selection.

use serde::{Deserialize, Serialize};

use crate::bank::MemoryBank;
use crate::error::{Error, Result};
use crate::model::Classifier;
use crate::numerics::{self, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelRecord {
    pub sample_id: usize,
    pub p_bar: Vec<f64>,
    pub y_bar: usize,
    pub u_nc: f64,
    pub u_cs: f64,
    pub w_nc: f64,
    pub w_cs: f64,
    pub selected: bool,
}

/// Mean of the `n` nearest bank predictions and its argmax.
pub fn refine(bank: &MemoryBank, z: &[f64], n: usize) -> Result<(Vec<f64>, usize)> {
    if n == 0 {
        return Err(Error::config("n_neighbors", "must be at least 1"));
    }
    let nn = bank.neighbors(z, n)?;
    let p_bar = soft_vote(nn.iter().map(|(_, p)| *p));
    let y_bar = numerics::argmax(&p_bar);
    Ok((p_bar, y_bar))
}

/// Arithmetic mean of probability vectors.
pub fn soft_vote<'a>(probs: impl Iterator<Item = &'a [f64]>) -> Vec<f64> {
    let mut sum: Vec<f64> = Vec::new();
    let mut count = 0usize;
    for p in probs {
        if sum.is_empty() {
            sum = vec![0.0; p.len()];
        }
        sum.iter_mut().zip(p).for_each(|(s, v)| *s += v);
        count += 1;
    }
    sum.iter_mut().for_each(|s| *s /= count as f64);
    sum
}

/// Neighbour-consensus uncertainty: normalised entropy of the vote.
pub fn uncertainty_nc(p_bar: &[f64], classes: usize) -> Result<f64> {
    numerics::normalized_entropy(p_bar, classes)
}

/// Class-separation uncertainty from the cosine distances to the prototypes
/// of the two most voted classes: `min(d_i, d_j) / (d_i + d_j)`, in `[0, 0.5]`.
pub fn uncertainty_cs(z: &[f64], classifier: &Classifier, p_bar: &[f64]) -> Result<f64> {
    if p_bar.len() < 2 || p_bar.len() != classifier.n_classes() {
        return Err(Error::shape(format!(
            "vote over {} classes, classifier has {}",
            p_bar.len(),
            classifier.n_classes()
        )));
    }
    let (i, j) = numerics::top_two(p_bar);
    let di = numerics::cosine_distance(z, classifier.prototype(i))?;
    let dj = numerics::cosine_distance(z, classifier.prototype(j))?;
    Ok(separation_ratio(di, dj))
}

pub fn separation_ratio(di: f64, dj: f64) -> f64 {
    let sum = di + dj;
    if sum <= 0.0 {
        0.5
    } else {
        di.min(dj) / sum
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightFn {
    /// `1 - u`, floored at 1e-6.
    Linear,
    /// `exp(-u)`.
    Exponential,
}

pub fn to_weight(u: f64, f: WeightFn) -> Result<f64> {
    if !(0.0..=1.0).contains(&u) {
        return Err(Error::InvalidUncertainty(u));
    }
    Ok(match f {
        WeightFn::Linear => (1.0 - u).max(1e-6),
        WeightFn::Exponential => (-u).exp(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Combiner {
    #[default]
    And,
    Or,
}

impl Combiner {
    pub fn combine(self, a: bool, b: bool) -> bool {
        match self {
            Combiner::And => a && b,
            Combiner::Or => a || b,
        }
    }
}

/// The two Bernoulli draws behind one selection decision.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Draws {
    pub nc: bool,
    pub cs: bool,
}

pub fn draw(w_nc: f64, w_cs: f64, rng: &mut Rng) -> Draws {
    let nc = rng.bernoulli(w_nc);
    let cs = rng.bernoulli(w_cs);
    Draws { nc, cs }
}

/// `B(w_nc) (+) B(w_cs)`; always consumes exactly two uniforms.
pub fn select(w_nc: f64, w_cs: f64, op: Combiner, rng: &mut Rng) -> bool {
    let d = draw(w_nc, w_cs, rng);
    op.combine(d.nc, d.cs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bank::MemoryBank;
    use crate::numerics::Stream;

    fn bank_with(probs: &[Vec<f64>]) -> MemoryBank {
        let seed = probs
            .iter()
            .enumerate()
            .map(|(i, p)| (i, vec![1.0, i as f64 * 1e-3], p.clone()))
            .collect::<Vec<_>>();
        let n = seed.len();
        MemoryBank::create(seed, n, &mut Rng::new(0, Stream::BankSampling)).unwrap()
    }

    #[test]
    fn refine_examples() {
        let bank = bank_with(&[vec![0.3, 0.7]]);
        assert_eq!(refine(&bank, &[1.0, 0.0], 1).unwrap(), (vec![0.3, 0.7], 1));

        let bank = bank_with(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert_eq!(refine(&bank, &[1.0, 0.0], 2).unwrap(), (vec![0.5, 0.5], 0));

        let bank = bank_with(&[vec![0.6, 0.4], vec![0.8, 0.2], vec![0.1, 0.9]]);
        let (p, y) = refine(&bank, &[1.0, 0.0], 3).unwrap();
        assert!((p[0] - 0.5).abs() < 1e-12 && (p[1] - 0.5).abs() < 1e-12);
        assert_eq!(y, 0);
    }

    #[test]
    fn soft_vote_is_order_invariant() {
        let a = [vec![0.2, 0.8], vec![0.6, 0.4], vec![0.9, 0.1]];
        let fwd = soft_vote(a.iter().map(Vec::as_slice));
        let rev = soft_vote(a.iter().rev().map(Vec::as_slice));
        for (x, y) in fwd.iter().zip(&rev) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn uncertainty_nc_examples() {
        assert!((uncertainty_nc(&[0.25; 4], 4).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(uncertainty_nc(&[0.0, 0.0, 1.0, 0.0], 4).unwrap(), 0.0);
        assert!((uncertainty_nc(&[0.5, 0.5, 0.0, 0.0], 4).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn uncertainty_cs_examples() {
        let cls = Classifier::from_columns(2, 2, 0, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let equi = uncertainty_cs(&[1.0, 1.0], &cls, &[0.6, 0.4]).unwrap();
        assert!((equi - 0.5).abs() < 1e-12);
        assert_eq!(uncertainty_cs(&[2.0, 0.0], &cls, &[0.6, 0.4]).unwrap(), 0.0);
        assert!((separation_ratio(0.2, 0.6) - 0.25).abs() < 1e-12);
        assert_eq!(separation_ratio(0.0, 0.0), 0.5);
    }

    #[test]
    fn uncertainty_cs_bounds() {
        let mut r = Rng::with_stream_id(1, 400);
        for _ in 0..1000 {
            let (a, b) = (r.uniform() * 2.0, r.uniform() * 2.0);
            let u = separation_ratio(a, b);
            assert!((0.0..=0.5).contains(&u));
            assert_eq!(u == 0.5, a == b);
        }
    }

    #[test]
    fn weight_examples() {
        assert_eq!(to_weight(0.0, WeightFn::Exponential).unwrap(), 1.0);
        assert!((to_weight(0.3, WeightFn::Linear).unwrap() - 0.7).abs() < 1e-12);
        assert!((to_weight(1.0, WeightFn::Exponential).unwrap() - 0.3679).abs() < 1e-4);
        assert_eq!(to_weight(1.0, WeightFn::Linear).unwrap(), 1e-6);
        assert!(matches!(
            to_weight(1.5, WeightFn::Linear),
            Err(Error::InvalidUncertainty(_))
        ));
        assert!(to_weight(-0.1, WeightFn::Exponential).is_err());
    }

    #[test]
    fn select_examples() {
        let mut r = Rng::new(1, Stream::Selection);
        for _ in 0..100 {
            assert!(select(1.0, 1.0, Combiner::And, &mut r));
            assert!(select(1.0, 1.0, Combiner::Or, &mut r));
            assert!(!select(0.0, r.uniform(), Combiner::And, &mut r));
        }
    }

    #[test]
    fn and_implies_or_under_shared_draws() {
        let mut r = Rng::new(2, Stream::Selection);
        for _ in 0..10_000 {
            let (a, b) = (r.uniform(), r.uniform());
            let d = draw(a, b, &mut r);
            if Combiner::And.combine(d.nc, d.cs) {
                assert!(Combiner::Or.combine(d.nc, d.cs));
            }
        }
    }
}
