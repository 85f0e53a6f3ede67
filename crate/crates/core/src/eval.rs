//! Cluster assignment, clustering metrics, a K-means baseline and
//! embedding export.
//!
//! Metric functions accept arbitrary non-negative label values; they are
//! remapped to dense indices internally.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;

use crate::error::{Error, Result};
use crate::nets::{encoder_forward, NetworkParams};
use crate::tensor::{Array, Tensor};

/// Rows per encoder call in [`assign`] and [`export_embeddings`].
const CHUNK: usize = 4096;

/// Index of the largest entry, lowest index on ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn encode_chunks(encoder: &NetworkParams, x: &Array, mut f: impl FnMut(usize, &[f64], &[f64])) -> Result<()> {
    let net = encoder.frozen();
    let n = x.rows();
    let mut start = 0;
    while start < n {
        let end = (start + CHUNK).min(n);
        let idx: Vec<usize> = (start..end).collect();
        let enc = encoder_forward(&net, &Tensor::constant(x.select_rows(&idx)))?;
        let (p, zn) = (enc.zc_prob.value(), enc.zn.value());
        for (r, i) in idx.into_iter().enumerate() {
            f(i, p.row(r), zn.row(r));
        }
        start = end;
    }
    Ok(())
}

/// Cluster id per row: argmax of the encoder's cluster probabilities.
pub fn assign(encoder: &NetworkParams, x: &Array) -> Result<Vec<usize>> {
    let mut ids = vec![0; x.rows()];
    encode_chunks(encoder, x, |i, p, _| ids[i] = argmax(p))?;
    Ok(ids)
}

/// Writes `index, zn_0.., p_0.., cluster[, label]` per row with 17
/// significant digits.
pub fn export_embeddings(encoder: &NetworkParams, x: &Array, labels: Option<&[usize]>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if let Some(l) = labels {
        if l.len() != x.rows() {
            return Err(Error::dim(format!("{} labels for {} rows", l.len(), x.rows())));
        }
    }
    let mut out = String::new();
    let mut first = true;
    encode_chunks(encoder, x, |i, p, zn| {
        if first {
            let mut cols = vec!["index".to_string()];
            cols.extend((0..zn.len()).map(|j| format!("zn{j}")));
            cols.extend((0..p.len()).map(|j| format!("p{j}")));
            cols.push("cluster".into());
            if labels.is_some() {
                cols.push("label".into());
            }
            out.push_str(&cols.join(","));
            out.push('\n');
            first = false;
        }
        let _ = write!(out, "{i}");
        for v in zn.iter().chain(p) {
            let _ = write!(out, ",{v:.16e}");
        }
        let _ = write!(out, ",{}", argmax(p));
        if let Some(l) = labels {
            let _ = write!(out, ",{}", l[i]);
        }
        out.push('\n');
    })?;
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// Optimal assignment
// ---------------------------------------------------------------------------

/// Minimum-cost perfect matching on a square matrix. Returns `col[row]`
/// and the total cost.
pub fn hungarian(cost: &[Vec<f64>]) -> Result<(Vec<usize>, f64)> {
    let n = cost.len();
    if cost.iter().any(|r| r.len() != n) {
        return Err(Error::dim("hungarian needs a square cost matrix"));
    }
    if cost.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Domain("hungarian cost matrix has non-finite entries".into()));
    }
    if n == 0 {
        return Ok((Vec::new(), 0.0));
    }
    // Potentials formulation, 1-based with a sentinel column 0.
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
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
    let mut col = vec![0; n];
    for j in 1..=n {
        col[p[j] - 1] = j - 1;
    }
    let total = col.iter().enumerate().map(|(i, &j)| cost[i][j]).sum();
    Ok((col, total))
}

// ---------------------------------------------------------------------------
// Contingency and metrics
// ---------------------------------------------------------------------------

/// Counts of (predicted, true) pairs over dense indices of the distinct
/// values, each sorted ascending.
#[derive(Clone, Debug, PartialEq)]
pub struct Contingency {
    pub pred_ids: Vec<usize>,
    pub true_ids: Vec<usize>,
    /// `counts[i][j]`: points with prediction `pred_ids[i]` and label `true_ids[j]`.
    pub counts: Vec<Vec<u64>>,
}

impl Contingency {
    pub fn new(pred: &[usize], truth: &[usize]) -> Result<Self> {
        if pred.len() != truth.len() {
            return Err(Error::dim(format!(
                "{} predictions for {} labels",
                pred.len(),
                truth.len()
            )));
        }
        let dense = |v: &[usize]| -> BTreeMap<usize, usize> {
            let mut m: BTreeMap<usize, usize> = v.iter().map(|&x| (x, 0)).collect();
            for (i, slot) in m.values_mut().enumerate() {
                *slot = i;
            }
            m
        };
        let (pm, tm) = (dense(pred), dense(truth));
        let mut counts = vec![vec![0u64; tm.len()]; pm.len()];
        for (p, t) in pred.iter().zip(truth) {
            counts[pm[p]][tm[t]] += 1;
        }
        Ok(Contingency {
            pred_ids: pm.into_keys().collect(),
            true_ids: tm.into_keys().collect(),
            counts,
        })
    }

    /// Builds directly from a count table (ids `0..rows`, `0..cols`).
    pub fn from_counts(counts: Vec<Vec<u64>>) -> Result<Self> {
        let cols = counts.first().map_or(0, Vec::len);
        if counts.iter().any(|r| r.len() != cols) {
            return Err(Error::dim("contingency rows differ in length"));
        }
        Ok(Contingency {
            pred_ids: (0..counts.len()).collect(),
            true_ids: (0..cols).collect(),
            counts,
        })
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    fn row_sums(&self) -> Vec<u64> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    fn col_sums(&self) -> Vec<u64> {
        let mut s = vec![0; self.true_ids.len()];
        for r in &self.counts {
            for (j, c) in r.iter().enumerate() {
                s[j] += c;
            }
        }
        s
    }

    /// Optimal one-to-one matching of prediction rows to label columns,
    /// zero-padded to square. `None` marks a row matched to padding.
    pub fn matching(&self) -> (Vec<Option<usize>>, u64) {
        let (r, c) = (self.counts.len(), self.true_ids.len());
        let n = r.max(c);
        let cost: Vec<Vec<f64>> = (0..n)
            .map(|i| (0..n).map(|j| if i < r && j < c { -(self.counts[i][j] as f64) } else { 0.0 }).collect())
            .collect();
        let (col, _) = hungarian(&cost).expect("square finite matrix");
        let mut matched = 0;
        let mapping = (0..r)
            .map(|i| {
                let j = col[i];
                (j < c).then(|| {
                    matched += self.counts[i][j];
                    j
                })
            })
            .collect();
        (mapping, matched)
    }

    pub fn acc(&self) -> f64 {
        let n = self.total();
        if n == 0 {
            return 0.0;
        }
        self.matching().1 as f64 / n as f64
    }

    /// Fraction of points whose cluster's majority label matches theirs.
    pub fn purity(&self) -> f64 {
        let n = self.total();
        if n == 0 {
            return 0.0;
        }
        self.counts.iter().map(|r| r.iter().copied().max().unwrap_or(0)).sum::<u64>() as f64 / n as f64
    }

    pub fn nmi(&self) -> f64 {
        let n = self.total() as f64;
        if n == 0.0 {
            return 0.0;
        }
        let entropy = |s: &[u64]| -> f64 {
            s.iter().filter(|&&c| c > 0).map(|&c| {
                let p = c as f64 / n;
                -p * p.ln()
            }).sum()
        };
        let (a, b) = (self.row_sums(), self.col_sums());
        let (ha, hb) = (entropy(&a), entropy(&b));
        if ha == 0.0 || hb == 0.0 {
            // Identical up to relabeling only if both are a single cluster.
            return if ha == hb { 1.0 } else { 0.0 };
        }
        let mut mi = 0.0;
        for (i, r) in self.counts.iter().enumerate() {
            for (j, &c) in r.iter().enumerate() {
                if c > 0 {
                    let c = c as f64;
                    mi += c / n * (n * c / (a[i] as f64 * b[j] as f64)).ln();
                }
            }
        }
        (mi / ((ha + hb) / 2.0)).clamp(0.0, 1.0)
    }

    pub fn ari(&self) -> f64 {
        let pairs = |c: u64| (c as f64) * (c as f64 - 1.0) / 2.0;
        let total = pairs(self.total());
        let index: f64 = self.counts.iter().flatten().map(|&c| pairs(c)).sum();
        let sa: f64 = self.row_sums().into_iter().map(pairs).sum();
        let sb: f64 = self.col_sums().into_iter().map(pairs).sum();
        if total == 0.0 {
            return 1.0;
        }
        let expected = sa * sb / total;
        let max_index = (sa + sb) / 2.0;
        if max_index == expected {
            // Both partitions trivial and identical (all singletons or one block).
            return 1.0;
        }
        (index - expected) / (max_index - expected)
    }
}

/// Accuracy under the optimal one-to-one cluster-to-label mapping.
pub fn acc(pred: &[usize], truth: &[usize]) -> Result<f64> {
    Ok(Contingency::new(pred, truth)?.acc())
}

/// Majority-label purity, no one-to-one constraint.
pub fn purity(pred: &[usize], truth: &[usize]) -> Result<f64> {
    Ok(Contingency::new(pred, truth)?.purity())
}

/// Mutual information over the arithmetic mean of the two entropies.
pub fn nmi(pred: &[usize], truth: &[usize]) -> Result<f64> {
    Ok(Contingency::new(pred, truth)?.nmi())
}

pub fn ari(pred: &[usize], truth: &[usize]) -> Result<f64> {
    Ok(Contingency::new(pred, truth)?.ari())
}

// ---------------------------------------------------------------------------
// Report
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct ClusterReport {
    /// Rows are cluster ids `0..k`, columns the distinct true labels.
    pub contingency: Vec<Vec<u64>>,
    pub true_ids: Vec<usize>,
    pub acc: f64,
    pub purity: f64,
    pub nmi: f64,
    pub ari: f64,
    /// Matched true label per cluster, `None` for unmatched clusters.
    pub assignment: Vec<Option<usize>>,
    /// Clusters that received no points.
    pub dead_clusters: Vec<usize>,
}

impl ClusterReport {
    /// Report for predictions in `0..k`.
    pub fn new(pred: &[usize], truth: &[usize], k: usize) -> Result<Self> {
        if let Some(&bad) = pred.iter().find(|&&p| p >= k) {
            return Err(Error::dim(format!("cluster id {bad} outside 0..{k}")));
        }
        let c = Contingency::new(pred, truth)?;
        let mut rows = vec![vec![0u64; c.true_ids.len()]; k];
        for (i, &p) in c.pred_ids.iter().enumerate() {
            rows[p] = c.counts[i].clone();
        }
        let full = Contingency {
            pred_ids: (0..k).collect(),
            true_ids: c.true_ids.clone(),
            counts: rows,
        };
        let (mapping, _) = full.matching();
        Ok(ClusterReport {
            assignment: mapping.into_iter().map(|m| m.map(|j| c.true_ids[j])).collect(),
            dead_clusters: (0..k).filter(|&i| full.counts[i].iter().all(|&x| x == 0)).collect(),
            acc: c.acc(),
            purity: c.purity(),
            nmi: c.nmi(),
            ari: c.ari(),
            contingency: full.counts,
            true_ids: c.true_ids,
        })
    }

    /// `key = value` lines; floats carry 17 significant digits.
    pub fn to_text(&self) -> String {
        let list = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(" ");
        let mut s = String::new();
        let _ = writeln!(s, "acc = {:.16e}", self.acc);
        let _ = writeln!(s, "purity = {:.16e}", self.purity);
        let _ = writeln!(s, "nmi = {:.16e}", self.nmi);
        let _ = writeln!(s, "nmi_normalization = arithmetic");
        let _ = writeln!(s, "ari = {:.16e}", self.ari);
        let _ = writeln!(s, "clusters = {}", self.contingency.len());
        let _ = writeln!(s, "labels = {}", list(&self.true_ids));
        let assignment: Vec<String> = self
            .assignment
            .iter()
            .map(|a| a.map_or("-".to_string(), |l| l.to_string()))
            .collect();
        let _ = writeln!(s, "assignment = {}", assignment.join(" "));
        let _ = writeln!(s, "dead_clusters = {}", list(&self.dead_clusters));
        for (i, r) in self.contingency.iter().enumerate() {
            let row: Vec<String> = r.iter().map(u64::to_string).collect();
            let _ = writeln!(s, "contingency.{i} = {}", row.join(" "));
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = BTreeMap::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::format("report", format!("line without '=': {line:?}")))?;
            kv.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |k: &str| kv.get(k).ok_or_else(|| Error::format(k, "missing"));
        let float = |k: &str| get(k)?.parse::<f64>().map_err(|e| Error::format(k, e.to_string()));
        let ints = |k: &str| -> Result<Vec<u64>> {
            get(k)?
                .split_whitespace()
                .map(|t| t.parse().map_err(|_| Error::format(k, format!("bad integer {t:?}"))))
                .collect()
        };
        let usizes = |k: &str| ints(k).map(|v| v.into_iter().map(|x| x as usize).collect());
        let k = get("clusters")?
            .parse::<usize>()
            .map_err(|e| Error::format("clusters", e.to_string()))?;
        let assignment = get("assignment")?
            .split_whitespace()
            .map(|t| match t {
                "-" => Ok(None),
                _ => t.parse().map(Some).map_err(|_| Error::format("assignment", format!("bad entry {t:?}"))),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ClusterReport {
            contingency: (0..k).map(|i| ints(&format!("contingency.{i}"))).collect::<Result<_>>()?,
            true_ids: usizes("labels")?,
            acc: float("acc")?,
            purity: float("purity")?,
            nmi: float("nmi")?,
            ari: float("ari")?,
            assignment,
            dead_clusters: usizes("dead_clusters")?,
        })
    }
}

// ---------------------------------------------------------------------------
// K-means
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct KMeans {
    pub labels: Vec<usize>,
    /// `K x d`.
    pub centroids: Array,
    pub inertia: f64,
    /// Inertia after each assignment step of the winning restart.
    pub trace: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid per row (lowest index on ties) and the inertia.
fn nearest(x: &Array, centroids: &[Vec<f64>]) -> (Vec<usize>, Vec<f64>) {
    (0..x.rows())
        .map(|i| {
            let row = x.row(i);
            let mut best = (0, f64::INFINITY);
            for (c, m) in centroids.iter().enumerate() {
                let d = sq_dist(row, m);
                if d < best.1 {
                    best = (c, d);
                }
            }
            best
        })
        .unzip()
}

fn plus_plus_seed<R: Rng + ?Sized>(x: &Array, k: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let n = x.rows();
    let mut centroids = vec![x.row(rng.random_range(0..n)).to_vec()];
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(x.row(i), &centroids[0])).collect();
    while centroids.len() < k {
        let next = match WeightedIndex::new(&d2) {
            Ok(w) => w.sample(rng),
            // every point coincides with a centroid
            Err(_) => rng.random_range(0..n),
        };
        centroids.push(x.row(next).to_vec());
        let last = centroids.last().unwrap();
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(x.row(i), last));
        }
    }
    centroids
}

fn lloyd<R: Rng + ?Sized>(x: &Array, k: usize, max_iters: usize, rng: &mut R) -> KMeans {
    let (n, d) = (x.rows(), x.cols());
    let mut centroids = plus_plus_seed(x, k, rng);
    let (mut labels, mut dist) = nearest(x, &centroids);
    let mut trace = vec![dist.iter().sum::<f64>()];
    for _ in 0..max_iters {
        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for i in 0..n {
            counts[labels[i]] += 1;
            for (s, v) in sums[labels[i]].iter_mut().zip(x.row(i)) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            } else {
                // reseed to the point farthest from its current centroid
                let far = (0..n).max_by(|&a, &b| dist[a].total_cmp(&dist[b])).unwrap();
                centroids[c] = x.row(far).to_vec();
                dist[far] = 0.0;
            }
        }
        let (new_labels, new_dist) = nearest(x, &centroids);
        let inertia = new_dist.iter().sum::<f64>();
        debug_assert!(inertia <= trace.last().unwrap() * (1.0 + 1e-12) + 1e-12);
        trace.push(inertia);
        dist = new_dist;
        let done = new_labels == labels;
        labels = new_labels;
        if done {
            break;
        }
    }
    let mut centroid_data = Vec::with_capacity(k * d);
    for c in &centroids {
        centroid_data.extend_from_slice(c);
    }
    KMeans {
        labels,
        centroids: Array::new(vec![k, d], centroid_data).expect("k x d"),
        inertia: *trace.last().unwrap(),
        trace,
    }
}

/// Lloyd's algorithm with k-means++ seeding; best of `n_init` restarts by
/// inertia.
pub fn kmeans<R: Rng + ?Sized>(x: &Array, k: usize, max_iters: usize, n_init: usize, rng: &mut R) -> Result<KMeans> {
    if x.rank() != 2 || x.rows() == 0 {
        return Err(Error::dim(format!("kmeans needs a non-empty N x d matrix, got {:?}", x.shape())));
    }
    if k == 0 || k > x.rows() || n_init == 0 {
        return Err(Error::Config(format!(
            "kmeans needs 1 <= K <= N and n_init >= 1 (K {k}, N {}, n_init {n_init})",
            x.rows()
        )));
    }
    let mut best: Option<KMeans> = None;
    for _ in 0..n_init {
        let run = lloyd(x, k, max_iters, rng);
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    Ok(best.unwrap())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_gmm;
    use crate::nets::MlpSpec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn permutations(n: usize) -> Vec<Vec<usize>> {
        if n == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for p in permutations(n - 1) {
            for i in 0..=p.len() {
                let mut q = p.clone();
                q.insert(i, n - 1);
                out.push(q);
            }
        }
        out
    }

    #[test]
    fn argmax_tie_rule() {
        assert_eq!(argmax(&[0.1, 0.7, 0.2]), 1);
        assert_eq!(argmax(&[0.5, 0.5]), 0);
    }

    #[test]
    fn zero_encoder_assigns_cluster_zero() {
        let e = NetworkParams::zeros(MlpSpec::encoder(3, &[5], 4, 2)).unwrap();
        let x = Array::from_rows(&[vec![1.0, 2.0, 3.0], vec![-1.0, 0.5, 9.0]]).unwrap();
        assert_eq!(assign(&e, &x).unwrap(), vec![0, 0]);
        let bad = Array::zeros(&[2, 2]);
        assert!(matches!(assign(&e, &bad), Err(Error::Dimension(_))));
    }

    #[test]
    fn hungarian_examples() {
        let (col, cost) = hungarian(&[vec![4.0, 1.0], vec![2.0, 0.0]]).unwrap();
        assert_eq!(col, vec![1, 0]);
        assert_eq!(cost, 3.0);
        let diag = vec![vec![0.0, 5.0, 5.0], vec![5.0, 0.0, 5.0], vec![5.0, 5.0, 0.0]];
        assert_eq!(hungarian(&diag).unwrap().0, vec![0, 1, 2]);
        assert!(matches!(hungarian(&[vec![1.0, 2.0]]), Err(Error::Dimension(_))));
    }

    #[test]
    fn hungarian_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let perms = permutations(6);
        for _ in 0..20 {
            let c: Vec<Vec<f64>> = (0..6).map(|_| (0..6).map(|_| rng.random_range(-5.0..5.0)).collect()).collect();
            let brute = perms
                .iter()
                .map(|p| p.iter().enumerate().map(|(i, &j)| c[i][j]).sum::<f64>())
                .fold(f64::INFINITY, f64::min);
            let (_, cost) = hungarian(&c).unwrap();
            assert!((cost - brute).abs() < 1e-12);
        }
    }

    fn expand(counts: &[Vec<u64>]) -> (Vec<usize>, Vec<usize>) {
        let (mut p, mut t) = (Vec::new(), Vec::new());
        for (i, r) in counts.iter().enumerate() {
            for (j, &c) in r.iter().enumerate() {
                for _ in 0..c {
                    p.push(i);
                    t.push(j);
                }
            }
        }
        (p, t)
    }

    #[test]
    fn acc_examples() {
        let (p, t) = expand(&[vec![5, 1], vec![2, 4]]);
        assert_eq!(acc(&p, &t).unwrap(), 0.75);
        assert_eq!(acc(&[2, 2, 0, 0], &[0, 0, 1, 1]).unwrap(), 1.0);
        assert_eq!(acc(&[0, 0, 0, 0], &[0, 0, 1, 1]).unwrap(), 0.5);
        assert!(matches!(acc(&[0], &[0, 1]), Err(Error::Dimension(_))));
        assert_eq!(purity(&[0, 0, 0, 1], &[0, 0, 1, 2]).unwrap(), 0.75);
    }

    #[test]
    fn nmi_examples() {
        assert_eq!(nmi(&[0, 0, 1, 1], &[1, 1, 0, 0]).unwrap(), 1.0);
        let (p, t) = expand(&[vec![2, 2], vec![3, 3]]);
        assert!(nmi(&p, &t).unwrap().abs() < 1e-15);
        assert_eq!(nmi(&[0, 0, 0], &[1, 1, 1]).unwrap(), 1.0);
        assert_eq!(nmi(&[0, 0, 0, 0], &[0, 0, 1, 1]).unwrap(), 0.0);

        // direct entropy sums for [[5,1],[2,4]]
        let (p, t) = expand(&[vec![5, 1], vec![2, 4]]);
        let n = 12.0f64;
        let h = |v: &[f64]| -v.iter().map(|c| c / n * (c / n).ln()).sum::<f64>();
        let (a, b) = ([6.0, 6.0], [7.0, 5.0]);
        let cells = [(5.0, 6.0, 7.0), (1.0, 6.0, 5.0), (2.0, 6.0, 7.0), (4.0, 6.0, 5.0)];
        let mi: f64 = cells.iter().map(|(c, ai, bj)| c / n * (n * c / (ai * bj)).ln()).sum();
        let oracle = mi / ((h(&a) + h(&b)) / 2.0);
        assert!((nmi(&p, &t).unwrap() - oracle).abs() < 1e-12);
    }

    fn ari_pairs_oracle(p: &[usize], t: &[usize]) -> f64 {
        // count agreeing pairs directly
        let n = p.len();
        let (mut both, mut sp, mut st) = (0f64, 0f64, 0f64);
        for i in 0..n {
            for j in i + 1..n {
                let a = p[i] == p[j];
                let b = t[i] == t[j];
                both += (a && b) as u8 as f64;
                sp += a as u8 as f64;
                st += b as u8 as f64;
            }
        }
        let total = (n * (n - 1) / 2) as f64;
        let e = sp * st / total;
        (both - e) / ((sp + st) / 2.0 - e)
    }

    #[test]
    fn ari_examples() {
        assert_eq!(ari(&[0, 0, 1, 1], &[0, 0, 1, 1]).unwrap(), 1.0);
        assert_eq!(ari(&[0, 0, 0, 0], &[0, 0, 1, 1]).unwrap(), 0.0);
        let (p, t) = expand(&[vec![2, 1], vec![1, 2]]);
        assert!((ari(&p, &t).unwrap() - ari_pairs_oracle(&p, &t)).abs() < 1e-15);
        assert_eq!(ari(&[0, 1, 2], &[5, 6, 7]).unwrap(), 1.0);
    }

    #[test]
    fn ari_of_independent_partitions_centres_on_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mean: f64 = (0..1000)
            .map(|_| {
                let p: Vec<usize> = (0..200).map(|_| rng.random_range(0..4)).collect();
                let t: Vec<usize> = (0..200).map(|_| rng.random_range(0..4)).collect();
                ari(&p, &t).unwrap()
            })
            .sum::<f64>()
            / 1000.0;
        assert!(mean.abs() <= 0.02, "{mean}");
    }

    #[test]
    fn report_round_trips_and_pads_dead_clusters() {
        let pred = [0, 0, 2, 2, 2];
        let truth = [1, 1, 3, 3, 1];
        let r = ClusterReport::new(&pred, &truth, 4).unwrap();
        assert_eq!(r.contingency, vec![vec![2, 0], vec![0, 0], vec![1, 2], vec![0, 0]]);
        assert_eq!(r.dead_clusters, vec![1, 3]);
        assert_eq!(r.assignment[0], Some(1));
        assert_eq!(r.assignment[2], Some(3));
        assert_eq!(r.acc, 0.8);
        assert_eq!(r.contingency.iter().flatten().sum::<u64>(), 5);
        assert_eq!(ClusterReport::parse(&r.to_text()).unwrap(), r);
        assert!(matches!(ClusterReport::parse("acc = 1\n"), Err(Error::Format { .. })));
    }

    #[test]
    fn kmeans_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Array::from_rows(&[vec![0.0, 0.0], vec![0.0, 1.0], vec![10.0, 0.0], vec![10.0, 1.0]]).unwrap();
        let km = kmeans(&x, 2, 100, 3, &mut rng).unwrap();
        assert_eq!(km.labels[0], km.labels[1]);
        assert_ne!(km.labels[0], km.labels[2]);
        let c = km.centroids.row(km.labels[0]);
        assert_eq!(c, &[0.0, 0.5]);
        let full = kmeans(&x, 4, 100, 1, &mut rng).unwrap();
        assert_eq!(full.inertia, 0.0);
        assert!(matches!(kmeans(&x, 5, 10, 1, &mut rng), Err(Error::Config(_))));
    }

    #[test]
    fn kmeans_inertia_never_increases_and_recovers_mixture() {
        let ds = synth_gmm(3, 2, 500, 6.0, 1.0, 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let km = kmeans(&ds.x, 3, 300, 5, &mut rng).unwrap();
        for w in km.trace.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-12));
        }
        assert!(acc(&km.labels, ds.labels.as_ref().unwrap()).unwrap() >= 0.99);
    }

    #[test]
    fn embedding_export_layout() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let e = NetworkParams::init(MlpSpec::encoder(3, &[4], 2, 2), 0.5, &mut rng).unwrap();
        let x = Array::from_rows(&[vec![0.1, 0.2, 0.3], vec![-1.0, 0.0, 1.0]]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.csv");
        export_embeddings(&e, &x, Some(&[4, 5]), &p).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0], "index,zn0,zn1,p0,p1,cluster,label");
        let enc = encoder_forward(&e.frozen(), &Tensor::constant(x.clone())).unwrap();
        for (i, line) in lines[1..].iter().enumerate() {
            let cells: Vec<&str> = line.split(',').collect();
            assert_eq!(cells.len(), 2 + 2 + 2 + 1);
            let zn0: f64 = cells[1].parse().unwrap();
            let p1: f64 = cells[4].parse().unwrap();
            assert_eq!(zn0, enc.zn.value().get2(i, 0));
            assert_eq!(p1, enc.zc_prob.value().get2(i, 1));
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use rand::Rng;

        proptest! {
            #![proptest_config(ProptestConfig { cases: 64, ..ProptestConfig::default() })]

            #[test]
            fn acc_equals_brute_force_and_is_permutation_invariant(
                k in 1usize..=5,
                seed in any::<u64>(),
            ) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let n = 30;
                let p: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
                let t: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
                let brute = permutations(k).iter().map(|perm| {
                    p.iter().zip(&t).filter(|(a, b)| perm[**a] == **b).count()
                }).max().unwrap() as f64 / n as f64;
                let a = acc(&p, &t).unwrap();
                prop_assert_eq!(a, brute);
                let shift: Vec<usize> = p.iter().map(|&x| (x + 1) % k + 10).collect();
                prop_assert_eq!(acc(&shift, &t).unwrap(), a);
                prop_assert!((0.0..=1.0).contains(&a));
            }

            #[test]
            fn nmi_and_ari_symmetric_and_self_one(seed in any::<u64>()) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let p: Vec<usize> = (0..40).map(|_| rng.random_range(0..4)).collect();
                let t: Vec<usize> = (0..40).map(|_| rng.random_range(0..3)).collect();
                prop_assert!((nmi(&p, &t).unwrap() - nmi(&t, &p).unwrap()).abs() < 1e-15);
                prop_assert!((ari(&p, &t).unwrap() - ari(&t, &p).unwrap()).abs() < 1e-15);
                prop_assert!((ari(&p, &t).unwrap() - ari_pairs_oracle(&p, &t)).abs() < 1e-12);
                prop_assert_eq!(ari(&p, &p).unwrap(), 1.0);
                prop_assert!((nmi(&p, &p).unwrap() - 1.0).abs() < 1e-15);
                let v = nmi(&p, &t).unwrap();
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }
    }
}
