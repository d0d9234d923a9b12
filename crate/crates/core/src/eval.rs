//! Open-set metrics (OS*, UNK, HOS) and novel-class discovery scoring.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpenSetMetrics {
    pub os_star: f64,
    pub unk: f64,
    pub hos: f64,
    /// Per shared class accuracy in percent; `None` when the class has no
    /// ground-truth samples.
    pub per_class_acc: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscoveryMetrics {
    pub cluster_acc: f64,
    /// `matching[p]` is the true private class assigned to predicted private
    /// class `p`, or `None` when it was matched to padding.
    pub matching: Vec<Option<usize>>,
}

pub fn harmonic_mean(os_star: f64, unk: f64) -> f64 {
    if os_star + unk == 0.0 {
        0.0
    } else {
        2.0 * os_star * unk / (os_star + unk)
    }
}

/// Any class index `>= n_shared` counts as "unknown", both in predictions and
/// in ground truth.
pub fn open_set_metrics(pred: &[usize], truth: &[usize], n_shared: usize) -> Result<OpenSetMetrics> {
    if pred.len() != truth.len() {
        return Err(Error::shape(format!(
            "{} predictions for {} labels",
            pred.len(),
            truth.len()
        )));
    }
    let mut hits = vec![0usize; n_shared];
    let mut totals = vec![0usize; n_shared];
    let (mut unk_hits, mut unk_total) = (0usize, 0usize);
    for (&p, &t) in pred.iter().zip(truth) {
        if t < n_shared {
            totals[t] += 1;
            hits[t] += usize::from(p == t);
        } else {
            unk_total += 1;
            unk_hits += usize::from(p >= n_shared);
        }
    }
    let per_class_acc: Vec<Option<f64>> = hits
        .iter()
        .zip(&totals)
        .enumerate()
        .map(|(c, (&h, &n))| {
            if n == 0 {
                warn!("shared class {c} absent from ground truth; omitted from OS*");
                None
            } else {
                Some(100.0 * h as f64 / n as f64)
            }
        })
        .collect();
    let present: Vec<f64> = per_class_acc.iter().flatten().copied().collect();
    let os_star = if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    let unk = if unk_total == 0 {
        warn!("no ground-truth unknown samples; UNK reported as 0");
        0.0
    } else {
        100.0 * unk_hits as f64 / unk_total as f64
    };
    Ok(OpenSetMetrics {
        os_star,
        unk,
        hos: harmonic_mean(os_star, unk),
        per_class_acc,
    })
}

/// Minimum-cost perfect matching on a square matrix; `result[row] = column`.
///
/// Among co-optimal assignments the lexicographically smallest one is
/// returned.
pub fn hungarian(cost: &[Vec<f64>]) -> Result<Vec<usize>> {
    let n = cost.len();
    if cost.iter().any(|row| row.len() != n) {
        return Err(Error::shape("hungarian needs a square cost matrix"));
    }
    if cost.iter().flatten().any(|c| !c.is_finite()) {
        return Err(Error::shape("hungarian needs finite costs"));
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    let rows: Vec<usize> = (0..n).collect();
    let cols: Vec<usize> = (0..n).collect();
    let mut best = solve_sub(cost, &rows, &cols);
    let total = |assign: &[usize], rows: &[usize]| -> f64 { rows.iter().zip(assign).map(|(&r, &c)| cost[r][c]).sum() };

    // Fix rows one at a time to the smallest column that still admits an
    // optimal completion.
    let mut fixed: Vec<usize> = Vec::with_capacity(n);
    let mut free_cols = cols;
    let mut remaining = total(&best, &rows);
    for i in 0..n {
        let sub_rows = &rows[i + 1..];
        let current = best[0];
        let mut chosen = current;
        let mut chosen_rest: Vec<usize> = best[1..].to_vec();
        for &j in free_cols.iter().filter(|&&j| j < current) {
            let rest_cols: Vec<usize> = free_cols.iter().copied().filter(|&c| c != j).collect();
            let rest = solve_sub(cost, sub_rows, &rest_cols);
            let candidate = cost[i][j] + total(&rest, sub_rows);
            if (candidate - remaining).abs() <= 1e-9 * (1.0 + remaining.abs()) {
                chosen = j;
                chosen_rest = rest;
                break;
            }
        }
        fixed.push(chosen);
        remaining -= cost[i][chosen];
        free_cols.retain(|&c| c != chosen);
        best = chosen_rest;
    }
    Ok(fixed)
}

/// Shortest-augmenting-path Hungarian algorithm restricted to the given rows
/// and columns (equal counts). Returns the column for each listed row.
fn solve_sub(cost: &[Vec<f64>], rows: &[usize], cols: &[usize]) -> Vec<usize> {
    let n = rows.len();
    if n == 0 {
        return Vec::new();
    }
    let a = |i: usize, j: usize| cost[rows[i - 1]][cols[j - 1]];
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = a(i0, j) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0usize; n];
    for j in 1..=n {
        if p[j] > 0 {
            assign[p[j] - 1] = cols[j - 1];
        }
    }
    assign
}

/// Permutation-maximised accuracy of private predictions.
///
/// `pred` holds predicted private class ids (any non-negative integer; ids
/// beyond `n_private` are allowed and pad the contingency matrix), `truth`
/// holds true private ids in `[0, n_private)`.
pub fn cluster_accuracy(pred: &[usize], truth: &[usize], n_private: usize) -> Result<DiscoveryMetrics> {
    let pred: Vec<Option<usize>> = pred.iter().copied().map(Some).collect();
    cluster_accuracy_partial(&pred, truth, n_private)
}

/// As [`cluster_accuracy`], but `None` predictions (e.g. a private sample
/// predicted into a shared class) can never be matched.
pub fn cluster_accuracy_partial(pred: &[Option<usize>], truth: &[usize], n_private: usize) -> Result<DiscoveryMetrics> {
    if n_private == 0 {
        return Err(Error::InvalidClassCount {
            count: 0,
            reason: "cluster accuracy needs private classes",
        });
    }
    if pred.len() != truth.len() {
        return Err(Error::shape(format!(
            "{} predictions for {} labels",
            pred.len(),
            truth.len()
        )));
    }
    if let Some(&t) = truth.iter().find(|&&t| t >= n_private) {
        return Err(Error::InvalidLabel {
            label: t,
            classes: n_private,
        });
    }
    let n_pred = pred.iter().flatten().map(|&p| p + 1).max().unwrap_or(0);
    let n = n_pred.max(n_private);
    let mut counts = vec![vec![0usize; n]; n];
    for (p, &t) in pred.iter().zip(truth) {
        if let Some(p) = p {
            counts[*p][t] += 1;
        }
    }
    let cost: Vec<Vec<f64>> = counts
        .iter()
        .map(|row| row.iter().map(|&c| -(c as f64)).collect())
        .collect();
    let assign = hungarian(&cost)?;
    let matched: usize = assign.iter().enumerate().map(|(p, &t)| counts[p][t]).sum();
    let cluster_acc = if truth.is_empty() {
        0.0
    } else {
        matched as f64 / truth.len() as f64
    };
    let matching = assign[..n_pred].iter().map(|&t| (t < n_private).then_some(t)).collect();
    Ok(DiscoveryMetrics { cluster_acc, matching })
}

/// Discovery scoring over an extended prediction space: restricts to samples
/// whose truth is private and treats shared-class predictions as misses.
pub fn discovery_metrics(
    pred: &[usize],
    truth: &[usize],
    n_shared: usize,
    n_private_true: usize,
) -> Result<DiscoveryMetrics> {
    let (p, t): (Vec<Option<usize>>, Vec<usize>) = pred
        .iter()
        .zip(truth)
        .filter(|(_, &t)| t >= n_shared)
        .map(|(&p, &t)| (p.checked_sub(n_shared), t - n_shared))
        .unzip();
    cluster_accuracy_partial(&p, &t, n_private_true)
}

/// Prototype-matching variant: mean features per true and per predicted
/// private class are paired by Hungarian matching on cosine distance, and the
/// predictions relabelled accordingly before scoring.
pub fn discovery_by_prototypes(
    features: &[Vec<f64>],
    pred: &[usize],
    truth: &[usize],
    n_shared: usize,
    n_private_hat: usize,
    n_private_true: usize,
) -> Result<DiscoveryMetrics> {
    if n_private_true == 0 || n_private_hat == 0 {
        return Err(Error::InvalidClassCount {
            count: 0,
            reason: "prototype matching needs private classes",
        });
    }
    if features.len() != pred.len() || pred.len() != truth.len() {
        return Err(Error::shape("features, predictions and labels differ in length"));
    }
    let dim = features.first().map_or(0, Vec::len);
    let mean_by = |labels: &dyn Fn(usize) -> Option<usize>, k: usize| -> Vec<Option<Vec<f64>>> {
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (i, f) in features.iter().enumerate() {
            if truth[i] < n_shared {
                continue;
            }
            if let Some(c) = labels(i) {
                counts[c] += 1;
                sums[c].iter_mut().zip(f).for_each(|(s, x)| *s += x);
            }
        }
        sums.into_iter()
            .zip(counts)
            .map(|(s, n)| (n > 0).then(|| s.iter().map(|x| x / n as f64).collect()))
            .collect()
    };
    let true_protos = mean_by(&|i| Some(truth[i] - n_shared), n_private_true);
    let pred_protos = mean_by(
        &|i| pred[i].checked_sub(n_shared).filter(|&p| p < n_private_hat),
        n_private_hat,
    );
    let n = n_private_hat.max(n_private_true);
    let mut cost = vec![vec![0.0; n]; n];
    for (p, row) in cost.iter_mut().enumerate().take(n_private_hat) {
        for (t, c) in row.iter_mut().enumerate().take(n_private_true) {
            *c = match (&pred_protos[p], &true_protos[t]) {
                (Some(a), Some(b)) => numerics::cosine_distance(a, b).unwrap_or(1.0),
                _ => 1.0,
            };
        }
    }
    let assign = hungarian(&cost)?;
    let (mut hits, mut total) = (0usize, 0usize);
    for (&p, &t) in pred.iter().zip(truth) {
        if t < n_shared {
            continue;
        }
        total += 1;
        if let Some(pp) = p.checked_sub(n_shared).filter(|&pp| pp < n_private_hat) {
            hits += usize::from(assign[pp] == t - n_shared);
        }
    }
    Ok(DiscoveryMetrics {
        cluster_acc: if total == 0 { 0.0 } else { hits as f64 / total as f64 },
        matching: assign[..n_private_hat]
            .iter()
            .map(|&t| (t < n_private_true).then_some(t))
            .collect(),
    })
}

/// Flat metrics record used for JSON output and sweep aggregation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub os_star: f64,
    pub unk: f64,
    pub hos: f64,
    pub cluster_acc: Option<f64>,
    pub per_class_acc: Vec<Option<f64>>,
}

impl MetricsSummary {
    pub fn new(open: &OpenSetMetrics, discovery: Option<&DiscoveryMetrics>) -> Self {
        MetricsSummary {
            os_star: open.os_star,
            unk: open.unk,
            hos: open.hos,
            cluster_acc: discovery.map(|d| d.cluster_acc),
            per_class_acc: open.per_class_acc.clone(),
        }
    }

    pub const CSV_HEADER: &'static str = "os_star,unk,hos,cluster_acc";

    pub fn csv_row(&self) -> String {
        let ca = self.cluster_acc.map_or_else(String::new, |c| c.to_string());
        format!("{},{},{},{}", self.os_star, self.unk, self.hos, ca)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    fn permutations(n: usize) -> Vec<Vec<usize>> {
        fn rec(prefix: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
            if prefix.len() == used.len() {
                out.push(prefix.clone());
                return;
            }
            for j in 0..used.len() {
                if !used[j] {
                    used[j] = true;
                    prefix.push(j);
                    rec(prefix, used, out);
                    prefix.pop();
                    used[j] = false;
                }
            }
        }
        let mut out = Vec::new();
        rec(&mut Vec::new(), &mut vec![false; n], &mut out);
        out
    }

    #[test]
    fn hos_examples() {
        assert!((harmonic_mean(85.7, 93.0) - 89.2).abs() <= 0.05);
        assert!((harmonic_mean(98.6, 94.6) - 96.6).abs() <= 0.05);
        assert_eq!(harmonic_mean(0.0, 0.0), 0.0);
    }

    #[test]
    fn perfect_predictor() {
        let truth = vec![0, 1, 2, 3, 4, 0, 1];
        let m = open_set_metrics(&truth, &truth, 3).unwrap();
        assert_eq!((m.os_star, m.unk, m.hos), (100.0, 100.0, 100.0));
    }

    #[test]
    fn unknown_predictions_count_regardless_of_private_index() {
        let truth = vec![0, 1, 2, 2, 3];
        let a = open_set_metrics(&[0, 1, 2, 3, 0], &truth, 2).unwrap();
        let b = open_set_metrics(&[0, 1, 5, 2, 0], &truth, 2).unwrap();
        assert_eq!(a, b);
        assert!((a.unk - 200.0 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn missing_shared_class_is_omitted() {
        let m = open_set_metrics(&[0, 0, 2], &[0, 0, 2], 2).unwrap();
        assert_eq!(m.per_class_acc, vec![Some(100.0), None]);
        assert_eq!(m.os_star, 100.0);
    }

    #[test]
    fn hungarian_small_cases() {
        assert_eq!(hungarian(&[vec![3.0]]).unwrap(), vec![0]);
        let diag = vec![vec![0.0, 5.0, 5.0], vec![5.0, 0.0, 5.0], vec![5.0, 5.0, 0.0]];
        assert_eq!(hungarian(&diag).unwrap(), vec![0, 1, 2]);
        assert!(hungarian(&[vec![1.0, 2.0]]).is_err());
        // All-equal costs: every permutation is optimal, identity is the lexicographic minimum.
        assert_eq!(hungarian(&vec![vec![1.0; 4]; 4]).unwrap(), vec![0, 1, 2, 3]);
    }

    #[test]
    fn hungarian_matches_exhaustive_search() {
        let mut rng = Rng::with_stream_id(21, 100);
        for trial in 0..200 {
            let n = 1 + trial % 7;
            // Integer costs make co-optimal ties common.
            let cost: Vec<Vec<f64>> = (0..n).map(|_| (0..n).map(|_| rng.below(5) as f64).collect()).collect();
            let got = hungarian(&cost).unwrap();
            let value = |p: &[usize]| p.iter().enumerate().map(|(i, &j)| cost[i][j]).sum::<f64>();
            let best = permutations(n)
                .into_iter()
                .min_by(|a, b| value(a).partial_cmp(&value(b)).unwrap().then(a.cmp(b)))
                .unwrap();
            assert_eq!(got, best, "trial {trial}");
        }
    }

    #[test]
    fn cluster_accuracy_examples() {
        let truth = vec![0, 0, 1, 1, 2, 2];
        let relabelled = vec![2, 2, 0, 0, 1, 1];
        assert_eq!(cluster_accuracy(&relabelled, &truth, 3).unwrap().cluster_acc, 1.0);
        assert!(matches!(
            cluster_accuracy(&[], &[], 0),
            Err(Error::InvalidClassCount { .. })
        ));
        // More predicted clusters than true classes: padded, unmatched clusters score nothing.
        let d = cluster_accuracy(&[0, 1, 2, 3], &[0, 0, 1, 1], 2).unwrap();
        assert_eq!(d.cluster_acc, 0.5);
        assert_eq!(d.matching.iter().flatten().count(), 2);
    }

    #[test]
    fn cluster_accuracy_of_random_guessing() {
        let mut rng = Rng::with_stream_id(5, 101);
        let truth: Vec<usize> = (0..10_000).map(|_| rng.below(4)).collect();
        let pred: Vec<usize> = (0..10_000).map(|_| rng.below(4)).collect();
        let acc = cluster_accuracy(&pred, &truth, 4).unwrap().cluster_acc;
        assert!((0.25..0.27).contains(&acc), "{acc}");
    }

    #[test]
    fn cluster_accuracy_matches_max_over_permutations() {
        let mut rng = Rng::with_stream_id(8, 102);
        for trial in 0..100 {
            let k = 1 + trial % 5;
            let len = 1 + rng.below(30);
            let truth: Vec<usize> = (0..len).map(|_| rng.below(k)).collect();
            let pred: Vec<usize> = (0..len).map(|_| rng.below(k)).collect();
            let brute = permutations(k)
                .iter()
                .map(|t| pred.iter().zip(&truth).filter(|(&p, &y)| t[p] == y).count())
                .max()
                .unwrap() as f64
                / len as f64;
            let got = cluster_accuracy(&pred, &truth, k).unwrap().cluster_acc;
            assert_eq!(got, brute, "trial {trial}");
        }
    }

    #[test]
    fn cluster_accuracy_is_relabel_invariant() {
        let mut rng = Rng::with_stream_id(9, 103);
        for _ in 0..50 {
            let truth: Vec<usize> = (0..40).map(|_| rng.below(5)).collect();
            let pred: Vec<usize> = (0..40).map(|_| rng.below(5)).collect();
            let mut p1: Vec<usize> = (0..5).collect();
            let mut p2: Vec<usize> = (0..5).collect();
            rng.shuffle(&mut p1);
            rng.shuffle(&mut p2);
            let pred2: Vec<usize> = pred.iter().map(|&p| p1[p]).collect();
            let truth2: Vec<usize> = truth.iter().map(|&t| p2[t]).collect();
            let a = cluster_accuracy(&pred, &truth, 5).unwrap().cluster_acc;
            let b = cluster_accuracy(&pred2, &truth2, 5).unwrap().cluster_acc;
            assert_eq!(a, b);
        }
    }

    #[test]
    fn discovery_ignores_shared_truth_and_penalises_shared_predictions() {
        // n_shared = 2; private truth 2,3 -> 0,1
        let truth = vec![0, 1, 2, 2, 3, 3];
        let pred = vec![0, 1, 3, 3, 2, 0];
        let d = discovery_metrics(&pred, &truth, 2, 2).unwrap();
        assert_eq!(d.cluster_acc, 0.75);
    }

    #[test]
    fn prototype_discovery_on_separated_clusters() {
        let features = vec![
            vec![1.0, 0.0],
            vec![0.9, 0.1],
            vec![0.0, 1.0],
            vec![0.1, 0.9],
            vec![-1.0, 0.0],
        ];
        let truth = vec![1, 1, 2, 2, 0];
        let pred = vec![2, 2, 1, 1, 0];
        let d = discovery_by_prototypes(&features, &pred, &truth, 1, 2, 2).unwrap();
        assert_eq!(d.cluster_acc, 1.0);
        assert_eq!(d.matching, vec![Some(1), Some(0)]);
    }

    #[test]
    fn hos_bounds() {
        let mut rng = Rng::with_stream_id(1, 104);
        for _ in 0..1000 {
            let (a, b) = (rng.uniform() * 100.0, rng.uniform() * 100.0);
            let h = harmonic_mean(a, b);
            assert!(h <= 2.0 * a.min(b) + 1e-9 && h <= a.max(b) + 1e-9);
        }
    }

    #[test]
    fn summary_csv_row() {
        let open = open_set_metrics(&[0, 2], &[0, 2], 2).unwrap();
        let s = MetricsSummary::new(&open, None);
        assert_eq!(s.csv_row(), "100,100,100,");
    }
}
