//! Clustering-based initialisation of the extended target classifier.
//!
//! Target features from the source extractor are clustered into
//! `|C_S| + |C_P_hat|` groups. Centroids are matched one-to-one to the shared
//! class prototypes by cosine similarity; the leftovers become the private
//! prototypes. Every sample then gets a bank probability vector that peaks at
//! its nearest centroid.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::hungarian;
use crate::model::Classifier;
use crate::numerics::{self, Rng};

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterResult {
    pub centroids: Vec<Vec<f64>>,
    pub assignment: Vec<usize>,
    pub inertia: f64,
    /// Inertia after every Lloyd iteration.
    pub inertia_trace: Vec<f64>,
    pub iterations: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(x: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, c) in centroids.iter().enumerate() {
        let d = sq_dist(x, c);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

/// k-means++ seeding: the first centre uniformly, the rest with probability
/// proportional to the squared distance to the closest chosen centre.
pub fn kmeans_pp_seed(features: &[Vec<f64>], k: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    let n = features.len();
    let mut centroids = vec![features[rng.below(n)].clone()];
    let mut d2: Vec<f64> = features.iter().map(|x| sq_dist(x, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let idx = if total > 0.0 {
            let target = rng.uniform() * total;
            let mut acc = 0.0;
            let mut pick = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                acc += d;
                if acc > target && d > 0.0 {
                    pick = i;
                    break;
                }
            }
            pick
        } else {
            rng.below(n)
        };
        let c = features[idx].clone();
        for (d, x) in d2.iter_mut().zip(features) {
            *d = d.min(sq_dist(x, &c));
        }
        centroids.push(c);
    }
    centroids
}

fn means(features: &[Vec<f64>], assignment: &[usize], k: usize, dim: usize) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (x, &a) in features.iter().zip(assignment) {
        counts[a] += 1;
        sums[a].iter_mut().zip(x).for_each(|(s, v)| *s += v);
    }
    for (s, &n) in sums.iter_mut().zip(&counts) {
        if n > 0 {
            s.iter_mut().for_each(|v| *v /= n as f64);
        }
    }
    (sums, counts)
}

fn inertia(features: &[Vec<f64>], assignment: &[usize], centroids: &[Vec<f64>]) -> f64 {
    features
        .iter()
        .zip(assignment)
        .map(|(x, &a)| sq_dist(x, &centroids[a]))
        .sum()
}

/// Lloyd iterations from a given seeding, followed by single-point
/// (Hartigan) moves until no move lowers the inertia.
pub fn kmeans_from(features: &[Vec<f64>], seeds: Vec<Vec<f64>>, max_iter: usize, tol: f64) -> Result<ClusterResult> {
    let k = seeds.len();
    let n = features.len();
    if k == 0 || n < k {
        return Err(Error::InsufficientSamples {
            needed: k.max(1),
            available: n,
        });
    }
    let dim = features[0].len();
    if features.iter().any(|x| x.len() != dim || !numerics::all_finite(x)) {
        return Err(Error::shape("k-means features must be finite and equally sized"));
    }
    let mut centroids = seeds;
    let mut assignment = vec![0usize; n];
    let mut trace = Vec::new();
    let mut iterations = 0;
    for _ in 0..max_iter.max(1) {
        iterations += 1;
        for (a, x) in assignment.iter_mut().zip(features) {
            *a = nearest(x, &centroids).0;
        }
        reseed_empty(features, &mut assignment, &centroids, k);
        let (next, _) = means(features, &assignment, k, dim);
        let shift = centroids
            .iter()
            .zip(&next)
            .map(|(a, b)| sq_dist(a, b).sqrt())
            .fold(0.0, f64::max);
        centroids = next;
        trace.push(inertia(features, &assignment, &centroids));
        if shift < tol {
            break;
        }
    }
    hartigan_refine(features, &mut assignment, &mut centroids);
    let final_inertia = inertia(features, &assignment, &centroids);
    if trace.last().is_none_or(|&last| final_inertia < last) {
        trace.push(final_inertia);
    }
    Ok(ClusterResult {
        centroids,
        assignment,
        inertia: final_inertia,
        inertia_trace: trace,
        iterations,
    })
}

/// Every empty cluster takes the point farthest from its current centroid.
fn reseed_empty(features: &[Vec<f64>], assignment: &mut [usize], centroids: &[Vec<f64>], k: usize) {
    loop {
        let mut counts = vec![0usize; k];
        assignment.iter().for_each(|&a| counts[a] += 1);
        let Some(empty) = counts.iter().position(|&c| c == 0) else {
            return;
        };
        let far = (0..features.len())
            .filter(|&i| counts[assignment[i]] > 1)
            .max_by(|&i, &j| {
                let di = sq_dist(&features[i], &centroids[assignment[i]]);
                let dj = sq_dist(&features[j], &centroids[assignment[j]]);
                di.partial_cmp(&dj).unwrap().then(j.cmp(&i))
            });
        match far {
            Some(i) => assignment[i] = empty,
            None => return,
        }
    }
}

fn hartigan_refine(features: &[Vec<f64>], assignment: &mut [usize], centroids: &mut [Vec<f64>]) {
    let k = centroids.len();
    let mut counts = vec![0usize; k];
    assignment.iter().for_each(|&a| counts[a] += 1);
    for _ in 0..100 {
        let mut moved = false;
        for (i, x) in features.iter().enumerate() {
            let a = assignment[i];
            if counts[a] <= 1 {
                continue;
            }
            let na = counts[a] as f64;
            let cost_leave = na / (na - 1.0) * sq_dist(x, &centroids[a]);
            let mut best: Option<(usize, f64)> = None;
            for b in (0..k).filter(|&b| b != a) {
                let nb = counts[b] as f64;
                let cost_join = nb / (nb + 1.0) * sq_dist(x, &centroids[b]);
                // Relative margin keeps float noise from causing endless swaps.
                if cost_join < cost_leave * (1.0 - 1e-12) && best.is_none_or(|(_, c)| cost_join < c) {
                    best = Some((b, cost_join));
                }
            }
            if let Some((b, _)) = best {
                let nb = counts[b] as f64;
                for (c, v) in centroids[a].iter_mut().zip(x) {
                    *c = (*c * na - v) / (na - 1.0);
                }
                for (c, v) in centroids[b].iter_mut().zip(x) {
                    *c = (*c * nb + v) / (nb + 1.0);
                }
                counts[a] -= 1;
                counts[b] += 1;
                assignment[i] = b;
                moved = true;
            }
        }
        if !moved {
            break;
        }
    }
    // Recompute exactly to shed incremental rounding.
    let dim = features[0].len();
    let (exact, _) = means(features, assignment, k, dim);
    centroids.clone_from_slice(&exact);
}

/// k-means++ seeded k-means.
pub fn kmeans(features: &[Vec<f64>], k: usize, rng: &mut Rng, max_iter: usize, tol: f64) -> Result<ClusterResult> {
    if k == 0 || features.len() < k {
        return Err(Error::InsufficientSamples {
            needed: k.max(1),
            available: features.len(),
        });
    }
    let seeds = kmeans_pp_seed(features, k, rng);
    kmeans_from(features, seeds, max_iter, tol)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchingMode {
    /// Globally optimal one-to-one assignment.
    #[default]
    Optimal,
    /// Each shared class in index order takes its most similar unused centroid.
    Greedy,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CentroidMatching {
    /// `shared_map[class] = centroid index`.
    pub shared_map: Vec<usize>,
    /// Unmatched centroid indices in ascending order.
    pub private_centroids: Vec<usize>,
}

impl CentroidMatching {
    /// Centroid indices in class order: shared classes first, then private.
    pub fn class_order(&self) -> Vec<usize> {
        self.shared_map.iter().chain(&self.private_centroids).copied().collect()
    }
}

pub fn similarity_matrix(prototypes: &[&[f64]], centroids: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    prototypes
        .iter()
        .map(|w| {
            centroids
                .iter()
                .map(|c| numerics::cosine_distance(w, c).map(|d| 1.0 - d))
                .collect()
        })
        .collect()
}

pub fn match_centroids(prototypes: &[&[f64]], centroids: &[Vec<f64>], mode: MatchingMode) -> Result<CentroidMatching> {
    let n_shared = prototypes.len();
    let k = centroids.len();
    if k < n_shared {
        return Err(Error::InsufficientSamples {
            needed: n_shared,
            available: k,
        });
    }
    let sim = similarity_matrix(prototypes, centroids)?;
    let shared_map = match mode {
        MatchingMode::Optimal => {
            let mut cost = vec![vec![0.0; k]; k];
            for (row, s) in cost.iter_mut().zip(&sim) {
                row.iter_mut().zip(s).for_each(|(c, v)| *c = -v);
            }
            hungarian(&cost)?[..n_shared].to_vec()
        }
        MatchingMode::Greedy => {
            let mut used = vec![false; k];
            sim.iter()
                .map(|s| {
                    let mut best = None;
                    for c in (0..k).filter(|&c| !used[c]) {
                        if best.is_none_or(|b: usize| s[c] > s[b]) {
                            best = Some(c);
                        }
                    }
                    let b = best.expect("k >= n_shared");
                    used[b] = true;
                    b
                })
                .collect()
        }
    };
    let private_centroids = (0..k).filter(|c| !shared_map.contains(c)).collect();
    Ok(CentroidMatching {
        shared_map,
        private_centroids,
    })
}

/// Similarity-proportional initial bank probabilities:
/// `s_k = 1 - d_k / max_j d_j` with `d` the cosine distances, then
/// `softmax(s / tau2)`. Centroids must already be in class order.
pub fn bank_init_probs(z: &[f64], centroids: &[Vec<f64>], tau2: f64) -> Result<Vec<f64>> {
    let d: Vec<f64> = centroids
        .iter()
        .map(|c| numerics::cosine_distance(z, c))
        .collect::<Result<_>>()?;
    let max = d.iter().copied().fold(0.0, f64::max);
    if max == 0.0 {
        return Ok(vec![1.0 / d.len() as f64; d.len()]);
    }
    let scores: Vec<f64> = d.iter().map(|x| 1.0 - x / max).collect();
    Ok(numerics::softmax_temp(&scores, tau2))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InitOptions {
    pub matching: MatchingMode,
    pub tau2: f64,
    pub max_iter: usize,
    pub tol: f64,
    /// Rescale private prototypes to the mean norm of the shared columns.
    pub rescale_prototypes: bool,
}

impl Default for InitOptions {
    fn default() -> Self {
        InitOptions {
            matching: MatchingMode::Optimal,
            tau2: 0.25,
            max_iter: 100,
            tol: 1e-6,
            rescale_prototypes: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TargetInit {
    pub classifier: Classifier,
    pub clusters: ClusterResult,
    pub matching: CentroidMatching,
    /// Prototypes written into the private columns, in column order.
    pub private_prototypes: Vec<Vec<f64>>,
    /// Initial bank probabilities, one per target sample.
    pub bank_probs: Vec<Vec<f64>>,
    /// `argmax` of each bank probability vector.
    pub pseudo_labels: Vec<usize>,
}

/// Runs clustering, matching and prototype installation. `features` are the
/// source-extractor features of every target sample; `classifier` is the
/// extended source head (its private column count fixes `|C_P_hat|`).
pub fn initialize_target(
    classifier: &Classifier,
    features: &[Vec<f64>],
    opts: &InitOptions,
    rng: &mut Rng,
) -> Result<TargetInit> {
    let normalized: Vec<Vec<f64>> = features
        .iter()
        .map(|z| numerics::l2_normalize(z))
        .collect::<Result<_>>()?;
    let k = classifier.n_classes();
    let clusters = kmeans(&normalized, k, rng, opts.max_iter, opts.tol)?;
    let prototypes: Vec<&[f64]> = (0..classifier.n_shared()).map(|c| classifier.prototype(c)).collect();
    let matching = match_centroids(&prototypes, &clusters.centroids, opts.matching)?;
    let ordered: Vec<Vec<f64>> = matching
        .class_order()
        .into_iter()
        .map(|c| clusters.centroids[c].clone())
        .collect();

    let shared_norm = prototypes.iter().map(|p| numerics::norm(p)).sum::<f64>() / prototypes.len() as f64;
    let private_prototypes: Vec<Vec<f64>> = ordered[classifier.n_shared()..]
        .iter()
        .map(|c| {
            if opts.rescale_prototypes {
                let n = numerics::norm(c);
                if n == 0.0 {
                    return Err(Error::DegenerateVector("zero private centroid"));
                }
                Ok(c.iter().map(|v| v * shared_norm / n).collect())
            } else {
                Ok(c.clone())
            }
        })
        .collect::<Result<_>>()?;
    let classifier = classifier.set_private_prototypes(&private_prototypes)?;

    let bank_probs: Vec<Vec<f64>> = normalized
        .iter()
        .map(|z| bank_init_probs(z, &ordered, opts.tau2))
        .collect::<Result<_>>()?;
    let pseudo_labels = bank_probs.iter().map(|p| numerics::argmax(p)).collect();
    Ok(TargetInit {
        classifier,
        clusters,
        matching,
        private_prototypes,
        bank_probs,
        pseudo_labels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Stream;

    fn rng() -> Rng {
        Rng::new(42, Stream::Clustering)
    }

    #[test]
    fn separable_pairs() {
        let pts = vec![vec![0.0, 0.0], vec![0.0, 0.0], vec![5.0, 5.0], vec![5.0, 5.0]];
        let r = kmeans(&pts, 2, &mut rng(), 50, 1e-9).unwrap();
        assert_eq!(r.inertia, 0.0);
        let mut cs = r.centroids.clone();
        cs.sort_by(|a, b| a[0].partial_cmp(&b[0]).unwrap());
        assert_eq!(cs, vec![vec![0.0, 0.0], vec![5.0, 5.0]]);
    }

    #[test]
    fn k_equals_n() {
        let pts: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64, (i * i) as f64]).collect();
        let r = kmeans(&pts, 6, &mut rng(), 50, 1e-9).unwrap();
        assert_eq!(r.inertia, 0.0);
        assert!(matches!(
            kmeans(&pts, 7, &mut rng(), 50, 1e-9),
            Err(Error::InsufficientSamples { .. })
        ));
    }

    #[test]
    fn inertia_never_increases_and_centroids_are_means() {
        let mut r = Rng::with_stream_id(3, 200);
        let pts: Vec<Vec<f64>> = (0..300)
            .map(|i| {
                let c = (i % 5) as f64;
                vec![c + r.normal() * 0.8, -c + r.normal() * 0.8, r.normal()]
            })
            .collect();
        let res = kmeans(&pts, 5, &mut rng(), 100, 1e-10).unwrap();
        for w in res.inertia_trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-9, "{:?}", res.inertia_trace);
        }
        let (m, counts) = means(&pts, &res.assignment, 5, 3);
        assert!(counts.iter().all(|&c| c > 0));
        for (a, b) in m.iter().zip(&res.centroids) {
            assert!(sq_dist(a, b).sqrt() < 1e-6);
        }
        // No single-point move lowers the objective.
        for (i, x) in pts.iter().enumerate() {
            let a = res.assignment[i];
            for b in 0..5 {
                if b == a || counts[a] == 1 {
                    continue;
                }
                let mut moved = res.assignment.clone();
                moved[i] = b;
                let (mc, _) = means(&pts, &moved, 5, 3);
                assert!(inertia(&pts, &moved, &mc) >= res.inertia - 1e-9);
            }
            let _ = x;
        }
    }

    #[test]
    fn matching_identity_plus_extras() {
        let w0 = [1.0, 0.0, 0.0, 0.0];
        let w1 = [0.0, 1.0, 0.0, 0.0];
        let centroids = vec![
            vec![0.0, 0.0, 1.0, 0.0],
            vec![0.0, 2.0, 0.0, 0.0],
            vec![0.0, 0.0, 0.0, 1.0],
            vec![3.0, 0.0, 0.0, 0.0],
        ];
        let m = match_centroids(&[&w0, &w1], &centroids, MatchingMode::Optimal).unwrap();
        assert_eq!(m.shared_map, vec![3, 1]);
        assert_eq!(m.private_centroids, vec![0, 2]);
        let closed = match_centroids(
            &[&w0, &w1],
            &centroids[1..2]
                .iter()
                .chain(&centroids[3..])
                .cloned()
                .collect::<Vec<_>>(),
            MatchingMode::Optimal,
        )
        .unwrap();
        assert!(closed.private_centroids.is_empty());
    }

    #[test]
    fn matching_resolves_conflicts_globally() {
        // Unit vectors with prescribed cosines: s(0,c0)=0.8, s(0,c1)=0.9,
        // s(1,c0)=0.9, s(1,c1)=0.1.
        let angle = |c: f64| c.acos();
        let w0 = [1.0, 0.0];
        let t1 = angle(0.9);
        let c1 = [t1.cos(), t1.sin()];
        let c0 = [0.8f64, -(1.0f64 - 0.64).sqrt()];
        // Solve for w1 with cos(w1,c0)=0.9 and cos(w1,c1)=0.1 in 3D.
        let w1 = {
            // w1 = a c0 + b c1 + r e3
            let g = 0.8 * t1.cos() + (-(0.36f64).sqrt()) * t1.sin();
            let det = 1.0 - g * g;
            let a = (0.9 - 0.1 * g) / det;
            let b = (0.1 - 0.9 * g) / det;
            let v = [a * c0[0] + b * c1[0], a * c0[1] + b * c1[1]];
            let r = (1.0 - v[0] * v[0] - v[1] * v[1]).max(0.0).sqrt();
            [v[0], v[1], r]
        };
        let w0 = [w0[0], w0[1], 0.0];
        let cents = vec![vec![c0[0], c0[1], 0.0], vec![c1[0], c1[1], 0.0]];
        let sim = similarity_matrix(&[&w0, &w1], &cents).unwrap();
        assert!((sim[0][0] - 0.8).abs() < 1e-9 && (sim[0][1] - 0.9).abs() < 1e-9);
        assert!((sim[1][0] - 0.9).abs() < 1e-9 && (sim[1][1] - 0.1).abs() < 1e-9);
        let m = match_centroids(&[&w0, &w1], &cents, MatchingMode::Optimal).unwrap();
        assert_eq!(m.shared_map, vec![1, 0]);
    }

    #[test]
    fn greedy_gives_first_class_priority() {
        let w0 = [1.0, 0.0];
        let w1 = [0.9, 0.1];
        let cents = vec![vec![1.0, 0.05], vec![0.0, 1.0]];
        let g = match_centroids(&[&w0, &w1], &cents, MatchingMode::Greedy).unwrap();
        assert_eq!(g.shared_map, vec![0, 1]);
    }

    #[test]
    fn bank_init_examples() {
        let cents = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.0]];
        let p = bank_init_probs(&[1.0, 0.0], &cents, 0.25).unwrap();
        assert_eq!(numerics::argmax(&p), 0);

        let eq = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let p = bank_init_probs(&[1.0, 1.0], &eq, 0.25).unwrap();
        assert!((p[0] - 0.5).abs() < 1e-12);

        let same = vec![vec![2.0, 0.0], vec![1.0, 0.0]];
        assert_eq!(bank_init_probs(&[1.0, 0.0], &same, 0.25).unwrap(), vec![0.5, 0.5]);
    }

    #[test]
    fn bank_init_hand_computed() {
        // Unit vectors at cosine distances 0.1, 0.5, 1.0 from z = e0.
        let z = [1.0, 0.0];
        let cents: Vec<Vec<f64>> = [0.1f64, 0.5, 1.0]
            .iter()
            .map(|d| {
                let c = 1.0 - d;
                vec![c, (1.0 - c * c).sqrt()]
            })
            .collect();
        let p = bank_init_probs(&z, &cents, 0.25).unwrap();
        let expected = [0.8135, 0.1642, 0.0222];
        for (a, b) in p.iter().zip(expected) {
            assert!((a - b).abs() < 1e-4, "{p:?}");
        }
        let e = |x: f64| x.exp();
        let s = e(3.6) + e(2.0) + e(0.0);
        assert!((p[0] - e(3.6) / s).abs() < 1e-12);
    }
}
