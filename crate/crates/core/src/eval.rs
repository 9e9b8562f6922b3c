//! Retrieval and clustering metrics over a frozen embedding set.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::grouping::GroupedEmbedding;
use crate::tensor::Tensor;

pub const KMEANS_MAX_ITERS: usize = 100;
pub const KMEANS_TOL: f64 = 1e-6;

/// Rows are L2-normalized concatenations of each image's group embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSet {
    pub embeddings: Tensor,
    pub labels: Vec<usize>,
}

impl EmbeddingSet {
    /// Takes rows as given (no normalization).
    pub fn new(embeddings: Tensor, labels: Vec<usize>) -> Result<Self> {
        let (n, _) = embeddings.dims2()?;
        if n != labels.len() {
            return Err(Error::dim("embedding set", embeddings.shape(), &[labels.len()]));
        }
        if n < 2 {
            return Err(Error::Usage(format!("an embedding set needs at least 2 rows, got {n}")));
        }
        Ok(EmbeddingSet { embeddings, labels })
    }

    /// Concatenates each image's groups and normalizes the result.
    pub fn from_grouped(groups: &[GroupedEmbedding], labels: Vec<usize>) -> Result<Self> {
        let first = groups.first().ok_or_else(|| Error::Usage("no embeddings".into()))?;
        let d = first.f.len();
        let mut data = Vec::with_capacity(d * groups.len());
        for (i, g) in groups.iter().enumerate() {
            if g.f.len() != d {
                return Err(Error::dim("embedding set", first.f.shape(), g.f.shape()));
            }
            let row = g.concatenated();
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < crate::autodiff::MIN_NORM {
                return Err(Error::Numeric(format!("embedding {i} has zero norm")));
            }
            data.extend(row.iter().map(|v| v / norm));
        }
        Self::new(Tensor::new(&[groups.len(), d], data)?, labels)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn row(&self, i: usize) -> &[f64] {
        self.embeddings.row(i)
    }

    fn sq_dist(&self, i: usize, j: usize) -> f64 {
        sq_dist(self.row(i), self.row(j))
    }

    /// Other indices ordered by distance to `q`, ties by lower index.
    fn ranking(&self, q: usize) -> Vec<usize> {
        let mut others: Vec<(f64, usize)> = (0..self.len())
            .filter(|&j| j != q)
            .map(|j| (self.sq_dist(q, j), j))
            .collect();
        others.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        others.into_iter().map(|(_, j)| j).collect()
    }

    pub fn distinct_labels(&self) -> usize {
        let mut l = self.labels.clone();
        l.sort_unstable();
        l.dedup();
        l.len()
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Fraction of queries with a same-label item among their `k` nearest
/// neighbours (self excluded).
pub fn recall_at_k(set: &EmbeddingSet, k: usize) -> Result<f64> {
    if k == 0 || k >= set.len() {
        return Err(Error::Usage(format!("recall@k needs 1 <= k < {}, got {k}", set.len())));
    }
    let hits = (0..set.len())
        .filter(|&q| set.ranking(q)[..k].iter().any(|&j| set.labels[j] == set.labels[q]))
        .count();
    Ok(hits as f64 / set.len() as f64)
}

/// Lloyd's algorithm with greedy max-min seeding: the first centre is the
/// point at index `seed mod N`, each next one the point farthest from its
/// nearest chosen centre (ties by lower index).
pub fn kmeans(set: &EmbeddingSet, k: usize, seed: u64) -> Result<Vec<usize>> {
    let n = set.len();
    if k == 0 || k > n {
        return Err(Error::Usage(format!("k-means needs 1 <= k <= {n}, got {k}")));
    }
    let d = set.embeddings.shape()[1];
    let mut centres: Vec<Vec<f64>> = vec![set.row((seed % n as u64) as usize).to_vec()];
    let mut nearest: Vec<f64> = (0..n).map(|i| sq_dist(set.row(i), &centres[0])).collect();
    while centres.len() < k {
        let mut best = 0;
        for i in 1..n {
            if nearest[i] > nearest[best] {
                best = i;
            }
        }
        let c = set.row(best).to_vec();
        for (i, near) in nearest.iter_mut().enumerate() {
            *near = near.min(sq_dist(set.row(i), &c));
        }
        centres.push(c);
    }
    let assign_all = |centres: &[Vec<f64>]| -> Vec<usize> {
        (0..n)
            .map(|i| {
                let mut best = (f64::INFINITY, 0);
                for (c, centre) in centres.iter().enumerate() {
                    let dist = sq_dist(set.row(i), centre);
                    if dist < best.0 {
                        best = (dist, c);
                    }
                }
                best.1
            })
            .collect()
    };
    let mut assign = assign_all(&centres);
    for _ in 0..KMEANS_MAX_ITERS {
        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for (i, &c) in assign.iter().enumerate() {
            counts[c] += 1;
            for (s, v) in sums[c].iter_mut().zip(set.row(i)) {
                *s += v;
            }
        }
        let mut shift = 0.0f64;
        for c in 0..k {
            // An emptied cluster keeps its old centre.
            if counts[c] == 0 {
                continue;
            }
            let new: Vec<f64> = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            shift = shift.max(sq_dist(&new, &centres[c]).sqrt());
            centres[c] = new;
        }
        assign = assign_all(&centres);
        if shift < KMEANS_TOL {
            break;
        }
    }
    Ok(assign)
}

fn entropy(counts: impl Iterator<Item = usize>, n: f64) -> f64 {
    counts
        .filter(|&c| c > 0)
        .map(|c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// `2·I(C;Y) / (H(C) + H(Y))` in nats. Two constant labelings agree
/// perfectly, so that case is 1.
pub fn nmi_of(assign: &[usize], labels: &[usize]) -> f64 {
    let n = labels.len() as f64;
    let mut joint: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let mut cs: BTreeMap<usize, usize> = BTreeMap::new();
    let mut ys: BTreeMap<usize, usize> = BTreeMap::new();
    for (&c, &y) in assign.iter().zip(labels) {
        *joint.entry((c, y)).or_default() += 1;
        *cs.entry(c).or_default() += 1;
        *ys.entry(y).or_default() += 1;
    }
    let hc = entropy(cs.values().copied(), n);
    let hy = entropy(ys.values().copied(), n);
    // A one-to-one correspondence between clusters and labels is a perfect
    // clustering; scoring it through logarithms could land an ulp below 1.
    if hc + hy == 0.0 || (joint.len() == cs.len() && joint.len() == ys.len()) {
        return 1.0;
    }
    let mi: f64 = joint
        .iter()
        .map(|(&(c, y), &nxy)| {
            let nxy = nxy as f64;
            nxy / n * (n * nxy / (cs[&c] as f64 * ys[&y] as f64)).ln()
        })
        .sum();
    (2.0 * mi / (hc + hy)).clamp(0.0, 1.0)
}

/// Clusters with k-means, then scores the assignment against the labels.
pub fn nmi(set: &EmbeddingSet, n_clusters: usize, seed: u64) -> Result<f64> {
    Ok(nmi_of(&kmeans(set, n_clusters, seed)?, &set.labels))
}

fn count_pairs<K>(m: &BTreeMap<K, usize>) -> usize {
    m.values().map(|&c| c * c.saturating_sub(1) / 2).sum()
}

/// Pair-counting F1 of a clustering against the labels.
pub fn pairwise_f1(assign: &[usize], labels: &[usize]) -> f64 {
    let mut joint: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let mut cs: BTreeMap<usize, usize> = BTreeMap::new();
    let mut ys: BTreeMap<usize, usize> = BTreeMap::new();
    for (&c, &y) in assign.iter().zip(labels) {
        *joint.entry((c, y)).or_default() += 1;
        *cs.entry(c).or_default() += 1;
        *ys.entry(y).or_default() += 1;
    }
    let tp = count_pairs(&joint) as f64;
    let same_cluster = count_pairs(&cs) as f64;
    let same_label = count_pairs(&ys) as f64;
    let p = if same_cluster > 0.0 { tp / same_cluster } else { 0.0 };
    let r = if same_label > 0.0 { tp / same_label } else { 0.0 };
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MapAtR {
    pub value: f64,
    /// Classes with a single sample, left out of the average.
    pub skipped_classes: usize,
}

/// How far down a query's ranking average precision looks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ApDepth {
    /// The first R ranks, R being the number of relevant items (mAP@R).
    FirstR,
    FullRanking,
}

/// Average precision of query `q`, normalized by its R relevant items.
/// Returns `None` when the query has no class mates.
pub fn average_precision(set: &EmbeddingSet, q: usize, depth: ApDepth) -> Option<f64> {
    let label = set.labels[q];
    let r = set.labels.iter().filter(|&&l| l == label).count() - 1;
    if r == 0 {
        return None;
    }
    let ranking = set.ranking(q);
    let cut = match depth {
        ApDepth::FirstR => r,
        ApDepth::FullRanking => ranking.len(),
    };
    let mut hits = 0usize;
    let mut ap = 0.0;
    for (i, &j) in ranking[..cut].iter().enumerate() {
        if set.labels[j] == label {
            hits += 1;
            ap += hits as f64 / (i + 1) as f64;
        }
    }
    Some(ap / r as f64)
}

/// Class-wise mean of mAP@R: per-query AP over the first R ranks, averaged
/// within each class, then over classes.
pub fn map_at_r(set: &EmbeddingSet) -> Result<MapAtR> {
    let mut per_class: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    let mut sizes: BTreeMap<usize, usize> = BTreeMap::new();
    for q in 0..set.len() {
        *sizes.entry(set.labels[q]).or_default() += 1;
        if let Some(ap) = average_precision(set, q, ApDepth::FirstR) {
            let e = per_class.entry(set.labels[q]).or_default();
            e.0 += ap;
            e.1 += 1;
        }
    }
    if per_class.is_empty() {
        return Err(Error::Usage("mAP@R needs a class with at least 2 samples".into()));
    }
    let value = per_class
        .values().map(|(s, c)| s / *c as f64).sum::<f64>() / per_class.len() as f64;
    Ok(MapAtR {
        value,
        skipped_classes: sizes.values().filter(|&&s| s == 1).count(),
    })
}

/// Recall@1 of a labeling whose nearest neighbour is drawn uniformly from
/// the other N−1 items: the mean same-class fraction among neighbours.
pub fn chance_recall_at_1(labels: &[usize]) -> f64 {
    let n = labels.len();
    let mut sizes: BTreeMap<usize, usize> = BTreeMap::new();
    for &l in labels {
        *sizes.entry(l).or_default() += 1;
    }
    labels.iter().map(|l| (sizes[l] - 1) as f64 / (n - 1) as f64).sum::<f64>() / n as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub recall: Vec<(usize, f64)>,
    pub nmi: f64,
    pub f1: f64,
    pub map_at_r: f64,
    pub skipped_classes: usize,
    pub samples: usize,
}

impl EvalReport {
    pub fn compute(set: &EmbeddingSet, ks: &[usize], seed: u64) -> Result<Self> {
        let recall = ks
            .iter()
            .map(|&k| recall_at_k(set, k).map(|r| (k, r)))
            .collect::<Result<_>>()?;
        let assign = kmeans(set, set.distinct_labels(), seed)?;
        let m = map_at_r(set)?;
        Ok(EvalReport {
            recall,
            nmi: nmi_of(&assign, &set.labels),
            f1: pairwise_f1(&assign, &set.labels),
            map_at_r: m.value,
            skipped_classes: m.skipped_classes,
            samples: set.len(),
        })
    }

    /// `metric=value` lines.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, r) in &self.recall {
            writeln!(s, "recall@{k}={r}").expect("string write");
        }
        writeln!(s, "nmi={}", self.nmi).expect("string write");
        writeln!(s, "f1={}", self.f1).expect("string write");
        writeln!(s, "map@r={}", self.map_at_r).expect("string write");
        writeln!(s, "skipped_classes={}", self.skipped_classes).expect("string write");
        writeln!(s, "samples={}", self.samples).expect("string write");
        s
    }

    /// One JSON object on a single line, keys as in [`to_text`](Self::to_text).
    pub fn to_json_line(&self) -> String {
        let mut fields: Vec<String> = self
            .recall
            .iter()
            .map(|(k, r)| format!("\"recall@{k}\":{}", json_num(*r)))
            .collect();
        fields.push(format!("\"nmi\":{}", json_num(self.nmi)));
        fields.push(format!("\"f1\":{}", json_num(self.f1)));
        fields.push(format!("\"map@r\":{}", json_num(self.map_at_r)));
        fields.push(format!("\"skipped_classes\":{}", self.skipped_classes));
        fields.push(format!("\"samples\":{}", self.samples));
        format!("{{{}}}", fields.join(","))
    }

    pub fn recall_at(&self, k: usize) -> Option<f64> {
        self.recall.iter().find(|(kk, _)| *kk == k).map(|(_, r)| *r)
    }
}

fn json_num(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 1e15 {
        format!("{v:.1}")
    } else {
        format!("{v}")
    }
}
