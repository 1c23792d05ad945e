//! Retrieval and clustering quality of an embedding.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView1, ArrayView2};
use rand::Rng as _;
use serde::ser::SerializeMap;
use serde::{Deserialize, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::par::{self, Parallelism};
use crate::rng;

/// Recall cut-offs reported by [`evaluate`].
pub const DEFAULT_KS: [usize; 4] = [1, 2, 4, 8];

const KMEANS_MAX_ITERS: usize = 100;
const KMEANS_TOL: f64 = 1e-6;

fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Fraction of rows whose `k` nearest other rows contain a same-label row.
/// Neighbors are ordered by Euclidean distance, ties by lower index.
pub fn recall_at_k(
    emb: ArrayView2<f64>,
    labels: &[usize],
    ks: &[usize],
) -> Result<BTreeMap<usize, f64>> {
    recall_at_k_with(emb, labels, ks, Parallelism::default())
}

pub fn recall_at_k_with(
    emb: ArrayView2<f64>,
    labels: &[usize],
    ks: &[usize],
    mode: Parallelism,
) -> Result<BTreeMap<usize, f64>> {
    let n = emb.nrows();
    if labels.len() != n {
        return Err(Error::invalid("labels and embeddings differ in length"));
    }
    if ks.is_empty() || ks.contains(&0) {
        return Err(Error::invalid("recall cut-offs must be positive"));
    }
    let k_max = *ks.iter().max().expect("non-empty");
    if k_max >= n {
        return Err(Error::invalid(format!(
            "recall@{k_max} needs more than {k_max} rows, got {n}"
        )));
    }
    // Rank of the first same-label neighbor for every query.
    let first_hit: Vec<Option<usize>> = par::map_range(n, mode, |q| {
        let mut others: Vec<(f64, usize)> = (0..n)
            .filter(|&j| j != q)
            .map(|j| (sq_dist(emb.row(q), emb.row(j)).sqrt(), j))
            .collect();
        others.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        others.iter().position(|&(_, j)| labels[j] == labels[q])
    });
    Ok(ks
        .iter()
        .map(|&k| {
            let hits = first_hit.iter().filter(|r| matches!(r, Some(p) if *p < k)).count();
            (k, hits as f64 / n as f64)
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClusterAssignment {
    pub assignments: Vec<usize>,
    pub centroids: Array2<f64>,
    pub inertia: f64,
    /// Inertia after every assignment step.
    pub inertia_history: Vec<f64>,
}

fn nearest(point: ArrayView1<f64>, centroids: &Array2<f64>) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, row) in centroids.rows().into_iter().enumerate() {
        let d = sq_dist(point, row);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// k-means++ seeding followed by Lloyd iterations. Empty clusters are
/// re-seeded at the point farthest from its centroid.
pub fn kmeans(emb: ArrayView2<f64>, k: usize, seed: u64) -> Result<ClusterAssignment> {
    let n = emb.nrows();
    if k == 0 || k > n {
        return Err(Error::invalid(format!("k must lie in [1, {n}], got {k}")));
    }
    let mut r = rng::stream(seed, rng::streams::KMEANS);
    let dim = emb.ncols();
    let mut centroids = Array2::zeros((k, dim));
    centroids.row_mut(0).assign(&emb.row(r.random_range(0..n)));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(emb.row(i), centroids.row(0))).collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = r.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 && u < w {
                    pick = i;
                    break;
                }
                u -= w;
            }
            pick
        } else {
            r.random_range(0..n)
        };
        centroids.row_mut(c).assign(&emb.row(pick));
        for (i, slot) in d2.iter_mut().enumerate() {
            *slot = slot.min(sq_dist(emb.row(i), centroids.row(c)));
        }
    }

    let mut assignments = vec![0; n];
    let mut history = Vec::new();
    for _ in 0..KMEANS_MAX_ITERS {
        let mut dists = vec![0.0; n];
        for i in 0..n {
            let (c, d) = nearest(emb.row(i), &centroids);
            assignments[i] = c;
            dists[i] = d;
        }
        // re-seed empty clusters from the farthest points
        let mut counts = vec![0usize; k];
        for &a in &assignments {
            counts[a] += 1;
        }
        for c in 0..k {
            if counts[c] == 0 {
                let far = (0..n)
                    .filter(|&i| counts[assignments[i]] > 1)
                    .max_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(b.cmp(&a)));
                if let Some(i) = far {
                    counts[assignments[i]] -= 1;
                    assignments[i] = c;
                    counts[c] = 1;
                    dists[i] = 0.0;
                    centroids.row_mut(c).assign(&emb.row(i));
                }
            }
        }
        history.push(dists.iter().sum());

        let mut next = Array2::zeros((k, dim));
        for (i, &a) in assignments.iter().enumerate() {
            let mut row = next.row_mut(a);
            row += &emb.row(i);
        }
        for c in 0..k {
            let mut row = next.row_mut(c);
            row /= counts[c] as f64;
        }
        let shift = (0..k)
            .map(|c| sq_dist(next.row(c), centroids.row(c)).sqrt())
            .fold(0.0, f64::max);
        centroids = next;
        if shift < KMEANS_TOL {
            break;
        }
    }
    let mut inertia = 0.0;
    for i in 0..n {
        let (c, d) = nearest(emb.row(i), &centroids);
        assignments[i] = c;
        inertia += d;
    }
    history.push(inertia);
    Ok(ClusterAssignment {
        assignments,
        centroids,
        inertia,
        inertia_history: history,
    })
}

fn contingency(a: &[usize], b: &[usize]) -> (BTreeMap<(usize, usize), u64>, BTreeMap<usize, u64>, BTreeMap<usize, u64>) {
    let mut joint = BTreeMap::new();
    let mut left = BTreeMap::new();
    let mut right = BTreeMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *joint.entry((x, y)).or_insert(0) += 1;
        *left.entry(x).or_insert(0) += 1;
        *right.entry(y).or_insert(0) += 1;
    }
    (joint, left, right)
}

fn entropy(counts: &BTreeMap<usize, u64>, n: f64) -> f64 {
    counts
        .values()
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// `2 I(C; L) / (H(C) + H(L))`. Two single-block partitions score 1; a
/// single block against a non-trivial partition scores 0.
pub fn nmi(assignments: &[usize], labels: &[usize]) -> Result<f64> {
    if assignments.len() != labels.len() {
        return Err(Error::invalid("assignment and label lengths differ"));
    }
    if labels.is_empty() {
        return Err(Error::invalid("nmi of an empty partition"));
    }
    let n = labels.len() as f64;
    let (joint, left, right) = contingency(assignments, labels);
    let h_c = entropy(&left, n);
    let h_l = entropy(&right, n);
    if left.len() == 1 && right.len() == 1 {
        return Ok(1.0);
    }
    if left.len() == 1 || right.len() == 1 {
        return Ok(0.0);
    }
    let mut mi = 0.0;
    for (&(c, l), &nij) in &joint {
        let nij = nij as f64;
        let a = left[&c] as f64;
        let b = right[&l] as f64;
        mi += nij / n * (n * nij / (a * b)).ln();
    }
    Ok((2.0 * mi / (h_c + h_l)).clamp(0.0, 1.0))
}

fn pairs_of(c: u64) -> u64 {
    c * c.saturating_sub(1) / 2
}

/// Pair-counting precision, recall and F1 over all unordered pairs.
pub fn pair_counts(assignments: &[usize], labels: &[usize]) -> (u64, u64, u64) {
    let (joint, left, right) = contingency(assignments, labels);
    let tp = joint.values().map(|&c| pairs_of(c)).sum();
    let predicted = left.values().map(|&c| pairs_of(c)).sum();
    let actual = right.values().map(|&c| pairs_of(c)).sum();
    (tp, predicted, actual)
}

/// F1 from pair counts, `2·tp / (predicted + actual)`; 0 when both are empty.
pub fn f1_from_counts(tp: u64, predicted: u64, actual: u64) -> f64 {
    match predicted + actual {
        0 => 0.0,
        total => (2 * tp) as f64 / total as f64,
    }
}

pub fn pairwise_f1(assignments: &[usize], labels: &[usize]) -> Result<f64> {
    if assignments.len() != labels.len() {
        return Err(Error::invalid("assignment and label lengths differ"));
    }
    if labels.len() < 2 {
        return Err(Error::invalid("pairwise F1 needs at least 2 rows"));
    }
    let (tp, predicted, actual) = pair_counts(assignments, labels);
    Ok(f1_from_counts(tp, predicted, actual))
}

/// Metric a weight can refer to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MetricName {
    Recall(usize),
    Nmi,
    F1,
}

impl fmt::Display for MetricName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MetricName::Recall(k) => write!(f, "recall@{k}"),
            MetricName::Nmi => f.write_str("nmi"),
            MetricName::F1 => f.write_str("f1"),
        }
    }
}

impl FromStr for MetricName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        match lower.as_str() {
            "nmi" => Ok(MetricName::Nmi),
            "f1" => Ok(MetricName::F1),
            other => other
                .strip_prefix("recall@")
                .or_else(|| other.strip_prefix("r@"))
                .and_then(|k| k.parse().ok())
                .filter(|&k: &usize| k > 0)
                .map(MetricName::Recall)
                .ok_or_else(|| Error::invalid(format!("unknown metric `{s}`"))),
        }
    }
}

impl Serialize for MetricName {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for MetricName {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Simplex weights over metrics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricWeights(pub Vec<(MetricName, f64)>);

impl Default for MetricWeights {
    fn default() -> Self {
        Self(vec![(MetricName::Recall(1), 0.5), (MetricName::Nmi, 0.5)])
    }
}

impl MetricWeights {
    pub fn validate(&self) -> Result<()> {
        if self.0.iter().any(|(_, w)| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::invalid("metric weights must be non-negative"));
        }
        let total: f64 = self.0.iter().map(|(_, w)| w).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("metric weights sum to {total}, expected 1")));
        }
        Ok(())
    }

    /// Recall cut-offs the weights need beyond the defaults.
    pub fn recall_ks(&self) -> Vec<usize> {
        self.0
            .iter()
            .filter_map(|(m, _)| match m {
                MetricName::Recall(k) => Some(*k),
                _ => None,
            })
            .collect()
    }
}

impl fmt::Display for MetricWeights {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|(m, w)| format!("{m}:{w}")).collect();
        f.write_str(&parts.join(","))
    }
}

impl FromStr for MetricWeights {
    type Err = Error;

    /// `recall@1:0.5,nmi:0.5`
    fn from_str(s: &str) -> Result<Self> {
        let weights = s
            .split(',')
            .filter(|p| !p.trim().is_empty())
            .map(|part| {
                let (name, w) = part
                    .split_once(':')
                    .ok_or_else(|| Error::invalid(format!("expected metric:weight, got `{part}`")))?;
                let w: f64 = w
                    .trim()
                    .parse()
                    .map_err(|_| Error::invalid(format!("bad weight in `{part}`")))?;
                Ok((name.parse()?, w))
            })
            .collect::<Result<Vec<_>>>()?;
        let out = Self(weights);
        out.validate()?;
        Ok(out)
    }
}

/// One evaluation of an embedding.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct MetricReport {
    pub recall: BTreeMap<usize, f64>,
    pub nmi: f64,
    pub f1: f64,
    pub weighted: f64,
}

impl MetricReport {
    pub fn get(&self, metric: MetricName) -> Option<f64> {
        match metric {
            MetricName::Recall(k) => self.recall.get(&k).copied(),
            MetricName::Nmi => Some(self.nmi),
            MetricName::F1 => Some(self.f1),
        }
    }

    /// Flat `(name, value)` list in a stable order, weighted last.
    pub fn entries(&self) -> Vec<(String, f64)> {
        let mut out: Vec<(String, f64)> = self
            .recall
            .iter()
            .map(|(k, v)| (MetricName::Recall(*k).to_string(), *v))
            .collect();
        out.push(("nmi".into(), self.nmi));
        out.push(("f1".into(), self.f1));
        out.push(("weighted".into(), self.weighted));
        out
    }
}

impl Serialize for MetricReport {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let entries = self.entries();
        let mut map = s.serialize_map(Some(entries.len()))?;
        for (k, v) in &entries {
            map.serialize_entry(k, v)?;
        }
        map.end()
    }
}

impl<'de> Deserialize<'de> for MetricReport {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let flat = BTreeMap::<String, f64>::deserialize(d)?;
        let mut report = MetricReport::default();
        for (k, v) in flat {
            match k.as_str() {
                "nmi" => report.nmi = v,
                "f1" => report.f1 = v,
                "weighted" => report.weighted = v,
                other => match other.parse::<MetricName>() {
                    Ok(MetricName::Recall(k)) => {
                        report.recall.insert(k, v);
                    }
                    _ => return Err(serde::de::Error::custom(format!("unknown metric `{other}`"))),
                },
            }
        }
        Ok(report)
    }
}

/// Dot product of the weights with the named metric values.
pub fn weighted_metric(report: &MetricReport, weights: &MetricWeights) -> Result<f64> {
    weights.validate()?;
    weights.0.iter().try_fold(0.0, |acc, (m, w)| {
        report
            .get(*m)
            .map(|v| acc + w * v)
            .ok_or_else(|| Error::invalid(format!("report has no value for {m}")))
    })
}

/// Recall at the default cut-offs (capped below `N`), k-means with one
/// cluster per class, NMI, pairwise F1 and the weighted aggregate.
pub fn evaluate(
    emb: ArrayView2<f64>,
    labels: &[usize],
    weights: &MetricWeights,
    seed: u64,
) -> Result<MetricReport> {
    let n = emb.nrows();
    let mut ks: Vec<usize> = DEFAULT_KS.iter().copied().chain(weights.recall_ks()).collect();
    ks.sort_unstable();
    ks.dedup();
    ks.retain(|&k| k < n);
    if ks.is_empty() {
        return Err(Error::invalid("evaluation needs at least 2 rows"));
    }
    let recall = recall_at_k(emb, labels, &ks)?;
    let classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    let clusters = kmeans(emb, classes.clamp(1, n), seed)?;
    let mut report = MetricReport {
        recall,
        nmi: nmi(&clusters.assignments, labels)?,
        f1: pairwise_f1(&clusters.assignments, labels)?,
        weighted: 0.0,
    };
    report.weighted = weighted_metric(&report, weights)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn recall_separated_clusters() {
        let mut e = Array2::zeros((10, 2));
        for i in 0..5 {
            e[[i, 0]] = i as f64 * 0.01;
            e[[i + 5, 0]] = 10.0 + i as f64 * 0.01;
        }
        let labels = [0, 0, 0, 0, 0, 1, 1, 1, 1, 1];
        let r = recall_at_k(e.view(), &labels, &[1, 9]).unwrap();
        assert_eq!(r[&1], 1.0);
        assert_eq!(r[&9], 1.0);
        assert!(recall_at_k(e.view(), &labels, &[10]).is_err());
    }

    #[test]
    fn recall_tie_breaks_by_index() {
        // query 0 has rows 1 and 2 at equal distance; row 1 is another class
        let e = array![[0.0, 0.0], [1.0, 0.0], [-1.0, 0.0], [5.0, 5.0]];
        let labels = [0, 1, 0, 1];
        let r = recall_at_k(e.view(), &labels, &[1]).unwrap();
        // q0 -> row1 (miss), q1 -> row0 (miss), q2 -> row0 (hit), q3 -> row1 (hit)
        assert_eq!(r[&1], 0.5);
    }

    #[test]
    fn kmeans_edge_cases() {
        let e = array![[0.0, 0.0], [1.0, 0.0], [0.0, 3.0], [2.0, 2.0]];
        let all = kmeans(e.view(), 4, 0).unwrap();
        assert_eq!(all.inertia, 0.0);
        let mut ids = all.assignments.clone();
        ids.sort_unstable();
        assert_eq!(ids, vec![0, 1, 2, 3]);

        let one = kmeans(e.view(), 1, 0).unwrap();
        assert_eq!(one.assignments, vec![0; 4]);
        assert!((one.centroids[[0, 0]] - 0.75).abs() < 1e-15);
        assert!((one.centroids[[0, 1]] - 1.25).abs() < 1e-15);

        assert!(kmeans(e.view(), 5, 0).is_err());
        assert!(kmeans(e.view(), 0, 0).is_err());
    }

    #[test]
    fn kmeans_inertia_never_increases() {
        let mut r = rng::seeded(5);
        for trial in 0..20 {
            let e = Array2::from_shape_simple_fn((40, 3), || r.random_range(-1.0..1.0));
            let c = kmeans(e.view(), 5, trial).unwrap();
            for w in c.inertia_history.windows(2) {
                assert!(w[1] <= w[0] + 1e-12, "{:?}", c.inertia_history);
            }
            assert_eq!(kmeans(e.view(), 5, trial).unwrap(), c);
        }
    }

    #[test]
    fn nmi_endpoints() {
        assert_eq!(nmi(&[2, 2, 0, 0, 1], &[0, 0, 1, 1, 2]).unwrap(), 1.0);
        assert_eq!(nmi(&[0, 0, 0, 0], &[0, 1, 0, 1]).unwrap(), 0.0);
        assert_eq!(nmi(&[0, 0, 0], &[1, 1, 1]).unwrap(), 1.0);
        assert!(nmi(&[0, 1], &[0]).is_err());
    }

    #[test]
    fn nmi_eight_point_contingency() {
        // clusters {0,1,2,3} / {4,5,6,7}; labels put point 3 in class 1
        let a = [0, 0, 0, 0, 1, 1, 1, 1];
        let l = [0, 0, 0, 1, 1, 1, 1, 1];
        // H(C) = ln 2; H(L) = -(3/8 ln 3/8 + 5/8 ln 5/8)
        // I = 3/8 ln(8*3/(4*3)) + 1/8 ln(8*1/(4*5)) + 4/8 ln(8*4/(4*5))
        let hc = 2f64.ln();
        let hl = -(0.375 * 0.375f64.ln() + 0.625 * 0.625f64.ln());
        let i = 0.375 * 2f64.ln() + 0.125 * 0.4f64.ln() + 0.5 * 1.6f64.ln();
        let expected = 2.0 * i / (hc + hl);
        assert!((nmi(&a, &l).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn f1_examples() {
        assert_eq!(pairwise_f1(&[1, 1, 0, 0], &[0, 0, 1, 1]).unwrap(), 1.0);
        // six points, point 2 misassigned to the second cluster
        let a = [0, 0, 1, 1, 1, 1];
        let l = [0, 0, 0, 1, 1, 1];
        // TP = 1 + 3 = 4, predicted = 1 + 6 = 7, actual = 3 + 3 = 6
        let (p, r) = (4.0 / 7.0, 4.0 / 6.0);
        let f1 = pairwise_f1(&a, &l).unwrap();
        assert_eq!(f1, 8.0 / 13.0);
        assert!((f1 - 2.0 * p * r / (p + r)).abs() < 1e-15);
        let permuted = [5, 5, 3, 3, 3, 3];
        assert_eq!(pairwise_f1(&permuted, &l).unwrap(), pairwise_f1(&a, &l).unwrap());
        assert!(pairwise_f1(&[0], &[0]).is_err());
        assert_eq!(pairwise_f1(&[0, 1, 2], &[0, 1, 2]).unwrap(), 0.0);
    }

    #[test]
    fn weighted_examples() {
        let mut report = MetricReport { nmi: 0.6, ..Default::default() };
        report.recall.insert(1, 0.8);
        let only_r1 = MetricWeights(vec![(MetricName::Recall(1), 1.0)]);
        assert_eq!(weighted_metric(&report, &only_r1).unwrap(), 0.8);
        assert!((weighted_metric(&report, &MetricWeights::default()).unwrap() - 0.7).abs() < 1e-15);
        let bad = MetricWeights(vec![(MetricName::Recall(1), 0.6), (MetricName::Nmi, 0.5)]);
        assert!(weighted_metric(&report, &bad).is_err());
        assert!("recall@1:0.6,nmi:0.5".parse::<MetricWeights>().is_err());
        assert_eq!("recall@1:0.5,nmi:0.5".parse::<MetricWeights>().unwrap(), MetricWeights::default());
    }

    #[test]
    fn report_json_is_flat() {
        let mut report = MetricReport { nmi: 0.5, f1: 0.25, weighted: 0.75, ..Default::default() };
        report.recall.insert(1, 1.0);
        report.recall.insert(2, 1.0);
        let json = serde_json::to_string(&report).unwrap();
        assert_eq!(json, r#"{"recall@1":1.0,"recall@2":1.0,"nmi":0.5,"f1":0.25,"weighted":0.75}"#);
        let back: MetricReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, report);
    }

    proptest::proptest! {
        #[test]
        fn scores_bounded_and_permutation_invariant(
            labels in proptest::collection::vec(0usize..4, 2..30),
            clusters in proptest::collection::vec(0usize..4, 30),
            shift in 1usize..4,
        ) {
            let a = &clusters[..labels.len()];
            let perm: Vec<usize> = a.iter().map(|c| (c + shift) % 4).collect();
            let n1 = nmi(a, &labels).unwrap();
            let f1 = pairwise_f1(a, &labels).unwrap();
            proptest::prop_assert!((0.0..=1.0).contains(&n1));
            proptest::prop_assert!((0.0..=1.0).contains(&f1));
            proptest::prop_assert!((nmi(&perm, &labels).unwrap() - n1).abs() < 1e-12);
            proptest::prop_assert_eq!(pairwise_f1(&perm, &labels).unwrap(), f1);
        }
    }
}
