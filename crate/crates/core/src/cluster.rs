//! Point estimation from plateau samples: agglomerative average-linkage
//! (UPGMA) clustering with a distance-threshold cut, plus plain averaging as
//! the degraded baseline.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// How to turn plateau samples into a single parameter vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PointEstimateMethod {
    /// Arithmetic mean of all samples.
    Mean,
    /// Centroid of the largest cluster.
    LargestCluster,
}

/// One merge in the dendrogram. Leaves are numbered `0..n`; the cluster
/// created by merge `i` gets label `n + i`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MergeStep<F> {
    pub left: usize,
    pub right: usize,
    pub distance: F,
    pub size: usize,
}

/// Result of a threshold-cut clustering.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterResult<F> {
    /// Sample index to cluster id.
    pub assignments: Vec<usize>,
    pub cluster_sizes: Vec<usize>,
    /// Arithmetic mean of each cluster's member samples.
    pub centroids: Vec<Vec<F>>,
    /// Id of the largest cluster (ties broken towards the lexicographically
    /// smallest centroid unless re-broken by a score).
    pub chosen: usize,
}

fn euclidean<F: Scalar>(a: &[F], b: &[F], scales: Option<&[F]>) -> F {
    let mut acc = F::zero();
    for d in 0..a.len() {
        let mut diff = a[d] - b[d];
        if let Some(s) = scales {
            diff = diff * s[d];
        }
        acc = acc + diff * diff;
    }
    acc.sqrt()
}

/// Average-linkage agglomerative state with a nearest-neighbour cache; the
/// Lance-Williams update keeps merges quadratic overall.
struct Agglomerator<F> {
    dist: Vec<F>,
    n: usize,
    active: Vec<bool>,
    sizes: Vec<usize>,
    labels: Vec<usize>,
    nearest: Vec<Option<(F, usize)>>,
}

impl<F: Scalar> Agglomerator<F> {
    fn new(samples: &[Vec<F>], scales: Option<&[F]>) -> Self {
        let n = samples.len();
        let mut dist = vec![F::zero(); n * n];
        for i in 0..n {
            for j in i + 1..n {
                let d = euclidean(&samples[i], &samples[j], scales);
                dist[i * n + j] = d;
                dist[j * n + i] = d;
            }
        }
        let mut agg = Agglomerator {
            dist,
            n,
            active: vec![true; n],
            sizes: vec![1; n],
            labels: (0..n).collect(),
            nearest: vec![None; n],
        };
        for i in 0..n {
            agg.nearest[i] = agg.scan_nearest(i);
        }
        agg
    }

    fn d(&self, i: usize, j: usize) -> F {
        self.dist[i * self.n + j]
    }

    fn scan_nearest(&self, i: usize) -> Option<(F, usize)> {
        let mut best: Option<(F, usize)> = None;
        for j in 0..self.n {
            if j == i || !self.active[j] {
                continue;
            }
            let d = self.d(i, j);
            if best.map_or(true, |(bd, _)| d < bd) {
                best = Some((d, j));
            }
        }
        best
    }

    /// Closest active pair, ties broken by slot index for determinism.
    fn closest_pair(&self) -> Option<(F, usize, usize)> {
        let mut best: Option<(F, usize, usize)> = None;
        for i in 0..self.n {
            if !self.active[i] {
                continue;
            }
            if let Some((d, j)) = self.nearest[i] {
                if best.map_or(true, |(bd, _, _)| d < bd) {
                    best = Some((d, i, j));
                }
            }
        }
        best
    }

    /// Merges slot `j` into slot `i` with the average-linkage update and
    /// returns the merged cluster's size.
    fn merge(&mut self, i: usize, j: usize, next_label: usize) -> usize {
        let ni = F::from_count(self.sizes[i]);
        let nj = F::from_count(self.sizes[j]);
        let total = ni + nj;
        for k in 0..self.n {
            if !self.active[k] || k == i || k == j {
                continue;
            }
            let merged = (ni * self.d(i, k) + nj * self.d(j, k)) / total;
            self.dist[i * self.n + k] = merged;
            self.dist[k * self.n + i] = merged;
        }
        self.active[j] = false;
        self.sizes[i] += self.sizes[j];
        self.labels[i] = next_label;
        self.nearest[i] = self.scan_nearest(i);
        for k in 0..self.n {
            if !self.active[k] || k == i {
                continue;
            }
            match self.nearest[k] {
                Some((_, t)) if t == i || t == j => self.nearest[k] = self.scan_nearest(k),
                Some((bd, _)) if self.d(k, i) < bd => {
                    self.nearest[k] = Some((self.d(k, i), i));
                }
                None => self.nearest[k] = self.scan_nearest(k),
                _ => {}
            }
        }
        self.sizes[i]
    }
}

/// Full average-linkage dendrogram over the samples.
pub fn upgma_dendrogram<F: Scalar>(
    samples: &[Vec<F>],
    scales: Option<&[F]>,
) -> Result<Vec<MergeStep<F>>> {
    check_samples(samples, scales)?;
    let n = samples.len();
    let mut agg = Agglomerator::new(samples, scales);
    let mut merges = Vec::with_capacity(n.saturating_sub(1));
    for step in 0..n.saturating_sub(1) {
        let (d, i, j) = agg.closest_pair().expect("pairs remain");
        let (left, right) = {
            let (a, b) = (agg.labels[i], agg.labels[j]);
            if a <= b {
                (a, b)
            } else {
                (b, a)
            }
        };
        let size = agg.merge(i, j, n + step);
        merges.push(MergeStep {
            left,
            right,
            distance: d,
            size,
        });
    }
    Ok(merges)
}

fn check_samples<F: Scalar>(samples: &[Vec<F>], scales: Option<&[F]>) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::EmptyInput("cluster samples"));
    }
    let dim = samples[0].len();
    if samples.iter().any(|s| s.len() != dim) {
        return Err(Error::dimension("ragged cluster samples".to_string()));
    }
    if let Some(s) = scales {
        if s.len() != dim {
            return Err(Error::dimension(
                "scale vector does not match sample dimension".to_string(),
            ));
        }
    }
    Ok(())
}

fn centroid<F: Scalar>(samples: &[Vec<F>], members: &[usize]) -> Vec<F> {
    let dim = samples[0].len();
    let count = F::from_count(members.len());
    let mut mean = vec![F::zero(); dim];
    for &m in members {
        for d in 0..dim {
            mean[d] += samples[m][d];
        }
    }
    for v in &mut mean {
        *v = *v / count;
    }
    mean
}

fn lex_less<F: Scalar>(a: &[F], b: &[F]) -> bool {
    for (x, y) in a.iter().zip(b) {
        if x < y {
            return true;
        }
        if x > y {
            return false;
        }
    }
    false
}

/// Average-linkage clustering, merging until the next merge distance would
/// exceed `merge_threshold`. Centroids are arithmetic means. `scales`
/// optionally rescales each dimension before the Euclidean metric.
pub fn upgma_cluster_scaled<F: Scalar>(
    samples: &[Vec<F>],
    merge_threshold: F,
    scales: Option<&[F]>,
) -> Result<ClusterResult<F>> {
    check_samples(samples, scales)?;
    if !(merge_threshold > F::zero()) {
        return Err(Error::config("merge threshold must be positive".to_string()));
    }
    let n = samples.len();
    let mut member_lists: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
    let mut agg = Agglomerator::new(samples, scales);
    let mut remaining = n;
    while remaining > 1 {
        let (d, i, j) = agg.closest_pair().expect("pairs remain");
        if d > merge_threshold {
            break;
        }
        let moved = std::mem::take(&mut member_lists[j]);
        member_lists[i].extend(moved);
        agg.merge(i, j, 0);
        remaining -= 1;
    }

    let mut assignments = vec![0usize; n];
    let mut cluster_sizes = Vec::new();
    let mut centroids = Vec::new();
    for members in member_lists.iter().filter(|m| !m.is_empty()) {
        let id = cluster_sizes.len();
        for &m in members {
            assignments[m] = id;
        }
        cluster_sizes.push(members.len());
        centroids.push(centroid(samples, members));
    }

    let max_size = *cluster_sizes.iter().max().expect("nonempty");
    let chosen = (0..cluster_sizes.len())
        .filter(|&c| cluster_sizes[c] == max_size)
        .min_by(|&a, &b| {
            if lex_less(&centroids[a], &centroids[b]) {
                std::cmp::Ordering::Less
            } else {
                std::cmp::Ordering::Greater
            }
        })
        .expect("nonempty");

    Ok(ClusterResult {
        assignments,
        cluster_sizes,
        centroids,
        chosen,
    })
}

/// [`upgma_cluster_scaled`] with no per-dimension scaling.
pub fn upgma_cluster<F: Scalar>(
    samples: &[Vec<F>],
    merge_threshold: F,
) -> Result<ClusterResult<F>> {
    upgma_cluster_scaled(samples, merge_threshold, None)
}

/// Point estimate with the deterministic tie-break (lexicographically
/// smallest centroid among the largest clusters).
pub fn point_estimate<F: Scalar>(
    samples: &[Vec<F>],
    method: PointEstimateMethod,
    merge_threshold: F,
) -> Result<Vec<F>> {
    point_estimate_with(samples, method, merge_threshold, |_| F::zero())
}

/// Point estimate where ties between equally large clusters are broken by
/// the higher `score` of their centroids (the harness scores with the
/// expected-reward estimator).
pub fn point_estimate_with<F: Scalar>(
    samples: &[Vec<F>],
    method: PointEstimateMethod,
    merge_threshold: F,
    score: impl Fn(&[F]) -> F,
) -> Result<Vec<F>> {
    if samples.is_empty() {
        return Err(Error::EmptyInput("point-estimate samples"));
    }
    match method {
        PointEstimateMethod::Mean => {
            let members: Vec<usize> = (0..samples.len()).collect();
            Ok(centroid(samples, &members))
        }
        PointEstimateMethod::LargestCluster => {
            let result = upgma_cluster(samples, merge_threshold)?;
            let max_size = result.cluster_sizes[result.chosen];
            let tied: Vec<usize> = (0..result.cluster_sizes.len())
                .filter(|&c| result.cluster_sizes[c] == max_size)
                .collect();
            if tied.len() == 1 {
                return Ok(result.centroids[result.chosen].clone());
            }
            let best = tied
                .into_iter()
                .map(|c| (c, score(&result.centroids[c])))
                .max_by(|(ca, sa), (cb, sb)| {
                    sa.partial_cmp(sb)
                        .unwrap_or(std::cmp::Ordering::Equal)
                        .then_with(|| {
                            // equal scores: prefer lexicographically smaller
                            if lex_less(&result.centroids[*cb], &result.centroids[*ca]) {
                                std::cmp::Ordering::Less
                            } else {
                                std::cmp::Ordering::Greater
                            }
                        })
                })
                .map(|(c, _)| c)
                .expect("nonempty tie set");
            Ok(result.centroids[best].clone())
        }
    }
}
