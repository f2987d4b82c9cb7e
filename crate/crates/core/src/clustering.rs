//! Balanced k-means over the rows of an FFN input projection.
//!
//! Each row of `W_in` stands for one neuron. Clustering rows groups neurons
//! with similar input weights, which is used as a proxy for neurons that fire
//! together. The result is always balanced: every cluster holds exactly
//! `rows / n_clusters` points.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{dot, Matrix, RngState};

pub const MAX_LLOYD_ITERS: usize = 100;
const MAX_SWAP_PASSES: usize = 1000;

/// Assignment of each neuron to one of `n_clusters` equally sized groups.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    assignment: Vec<usize>,
    n_clusters: usize,
}

impl Partition {
    /// Validates range and balance.
    pub fn new(assignment: Vec<usize>, n_clusters: usize) -> Result<Self> {
        if n_clusters == 0 {
            return Err(Error::InvalidArgument("partition needs at least one cluster".into()));
        }
        if !assignment.len().is_multiple_of(n_clusters) {
            return Err(Error::Unbalanced(format!(
                "{} items cannot be split into {} equal clusters",
                assignment.len(),
                n_clusters
            )));
        }
        let cap = assignment.len() / n_clusters;
        let mut counts = vec![0usize; n_clusters];
        for &a in &assignment {
            if a >= n_clusters {
                return Err(Error::InvalidArgument(format!("cluster index {a} >= {n_clusters}")));
            }
            counts[a] += 1;
        }
        if let Some((c, &n)) = counts.iter().enumerate().find(|(_, &n)| n != cap) {
            return Err(Error::Unbalanced(format!("cluster {c} holds {n}, expected {cap}")));
        }
        Ok(Self { assignment, n_clusters })
    }

    /// Neuron `j` goes to cluster `j / (len / n)`.
    pub fn contiguous(len: usize, n_clusters: usize) -> Result<Self> {
        if n_clusters == 0 || !len.is_multiple_of(n_clusters) {
            return Err(Error::Unbalanced(format!("{len} items into {n_clusters} clusters")));
        }
        let size = len / n_clusters;
        Self::new((0..len).map(|j| j / size).collect(), n_clusters)
    }

    /// Uniformly random balanced partition.
    pub fn random(len: usize, n_clusters: usize, rng: &mut RngState) -> Result<Self> {
        let mut p = Self::contiguous(len, n_clusters)?;
        rng.shuffle(&mut p.assignment);
        Ok(p)
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn n_clusters(&self) -> usize {
        self.n_clusters
    }

    pub fn len(&self) -> usize {
        self.assignment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignment.is_empty()
    }

    pub fn cluster_size(&self) -> usize {
        self.assignment.len() / self.n_clusters
    }

    /// Member indices of each cluster, ascending.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::with_capacity(self.cluster_size()); self.n_clusters];
        for (j, &c) in self.assignment.iter().enumerate() {
            out[c].push(j);
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum InitKind {
    Random,
    WarmStart,
}

#[derive(Clone, Debug)]
pub enum KMeansInit<'a> {
    /// Centroids seeded from distinct random rows.
    Random,
    /// Centroids seeded from the means of an earlier partition's clusters,
    /// evaluated on the current rows.
    FromPartition(&'a Partition),
}

#[derive(Clone, Debug)]
pub struct ClusteringOutcome {
    pub partition: Partition,
    pub centroids: Matrix,
    pub wcss: f64,
    pub init_kind: InitKind,
    /// WCSS after every Lloyd iteration, before balancing.
    pub lloyd_trace: Vec<f64>,
}

/// Within-cluster sum of squared deviations from cluster means.
pub fn wcss(points: &Matrix, partition: &Partition) -> Result<f64> {
    if partition.len() != points.rows() {
        return Err(Error::InvalidArgument(format!(
            "partition covers {} rows, points have {}",
            partition.len(),
            points.rows()
        )));
    }
    wcss_of_labels(points, partition.assignment(), partition.n_clusters())
}

fn wcss_of_labels(points: &Matrix, labels: &[usize], k: usize) -> Result<f64> {
    let means = cluster_means(points, labels, k, None);
    let mut counts = vec![0usize; k];
    labels.iter().for_each(|&l| counts[l] += 1);
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(Error::InvalidArgument(format!("cluster {c} is empty")));
    }
    let mut total = 0.0;
    for (i, &l) in labels.iter().enumerate() {
        total += sq_dist(points.row(i), means.row(l));
    }
    Ok(total)
}

#[inline]
fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        s += d * d;
    }
    s
}

/// Per-cluster means. Empty clusters take the row from `fallback` if given,
/// zeros otherwise.
fn cluster_means(points: &Matrix, labels: &[usize], k: usize, fallback: Option<&Matrix>) -> Matrix {
    let d = points.cols();
    let mut sums = Matrix::zeros(k, d);
    let mut counts = vec![0usize; k];
    for (i, &l) in labels.iter().enumerate() {
        counts[l] += 1;
        for (s, v) in sums.row_mut(l).iter_mut().zip(points.row(i)) {
            *s += v;
        }
    }
    for (c, &n) in counts.iter().enumerate() {
        if n == 0 {
            if let Some(f) = fallback {
                sums.row_mut(c).copy_from_slice(f.row(c));
            }
            continue;
        }
        let inv = 1.0 / n as f64;
        sums.row_mut(c).iter_mut().for_each(|s| *s *= inv);
    }
    sums
}

fn nearest(point: &[f64], centroids: &Matrix) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for c in 0..centroids.rows() {
        let d = sq_dist(point, centroids.row(c));
        if d < best_d {
            best_d = d;
            best = c;
        }
    }
    best
}

/// Balanced k-means: Lloyd iterations to a fixed point (at most
/// [`MAX_LLOYD_ITERS`]), then one capacity-constrained greedy assignment
/// followed by improving pairwise swaps.
///
/// The greedy pass sorts all `(point, cluster)` squared distances to the
/// Lloyd centroids ascending, ties broken by point then cluster index, and
/// assigns each pair whose point is free and whose cluster has room. Swaps
/// exchange two points in different clusters whenever that strictly lowers
/// WCSS. This is a heuristic; it does not guarantee the balanced optimum.
pub fn balanced_kmeans(
    points: &Matrix,
    n_clusters: usize,
    init: KMeansInit<'_>,
    rng: &mut RngState,
) -> Result<ClusteringOutcome> {
    let rows = points.rows();
    if n_clusters == 0 || n_clusters > rows {
        return Err(Error::InvalidArgument(format!(
            "cannot form {n_clusters} clusters from {rows} points"
        )));
    }
    if !rows.is_multiple_of(n_clusters) {
        return Err(Error::Unbalanced(format!(
            "{rows} points are not divisible into {n_clusters} clusters"
        )));
    }
    let (mut centroids, init_kind) = match init {
        KMeansInit::Random => {
            let mut idx: Vec<usize> = (0..rows).collect();
            rng.shuffle(&mut idx);
            idx.truncate(n_clusters);
            (points.select_rows(&idx), InitKind::Random)
        }
        KMeansInit::FromPartition(prev) => {
            if prev.len() != rows || prev.n_clusters() != n_clusters {
                return Err(Error::InvalidArgument(format!(
                    "warm-start partition has {} items / {} clusters, expected {rows} / {n_clusters}",
                    prev.len(),
                    prev.n_clusters()
                )));
            }
            (
                cluster_means(points, prev.assignment(), n_clusters, None),
                InitKind::WarmStart,
            )
        }
    };

    let mut labels: Vec<usize> = (0..rows).map(|i| nearest(points.row(i), &centroids)).collect();
    let mut lloyd_trace = Vec::new();
    for _ in 0..MAX_LLOYD_ITERS {
        centroids = cluster_means(points, &labels, n_clusters, Some(&centroids));
        lloyd_trace.push(sse_to(points, &labels, &centroids));
        let next: Vec<usize> = (0..rows).map(|i| nearest(points.row(i), &centroids)).collect();
        if next == labels {
            break;
        }
        labels = next;
    }

    let mut balanced = greedy_capacity_assign(points, &centroids, rows / n_clusters);
    swap_refine(points, &mut balanced, n_clusters);

    let partition = Partition::new(balanced, n_clusters)?;
    let centroids = cluster_means(points, partition.assignment(), n_clusters, None);
    let wcss = wcss(points, &partition)?;
    Ok(ClusteringOutcome {
        partition,
        centroids,
        wcss,
        init_kind,
        lloyd_trace,
    })
}

fn sse_to(points: &Matrix, labels: &[usize], centroids: &Matrix) -> f64 {
    labels
        .iter()
        .enumerate()
        .map(|(i, &l)| sq_dist(points.row(i), centroids.row(l)))
        .sum()
}

fn greedy_capacity_assign(points: &Matrix, centroids: &Matrix, cap: usize) -> Vec<usize> {
    let (rows, k) = (points.rows(), centroids.rows());
    let mut pairs: Vec<(f64, usize, usize)> = Vec::with_capacity(rows * k);
    for i in 0..rows {
        for c in 0..k {
            pairs.push((sq_dist(points.row(i), centroids.row(c)), i, c));
        }
    }
    pairs.sort_by(|a, b| {
        a.0.partial_cmp(&b.0)
            .unwrap_or(Ordering::Equal)
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });
    let mut labels = vec![usize::MAX; rows];
    let mut load = vec![0usize; k];
    let mut placed = 0;
    for (_, i, c) in pairs {
        if labels[i] == usize::MAX && load[c] < cap {
            labels[i] = c;
            load[c] += 1;
            placed += 1;
            if placed == rows {
                break;
            }
        }
    }
    labels
}

/// First-improvement pairwise swaps on a balanced labelling.
///
/// For clusters of equal size `m` with member sum `S` and squared-norm sum
/// `Q`, WCSS is `Q − |S|²/m`. Swapping `i ∈ A` with `j ∈ B` leaves every `Q`
/// total unchanged across the two clusters, so the change reduces to
/// `−2/m · [(S_A − S_B)·(x_j − x_i) + |x_i − x_j|²]`.
fn swap_refine(points: &Matrix, labels: &mut [usize], k: usize) {
    let rows = points.rows();
    if k < 2 {
        return;
    }
    let m = (rows / k) as f64;
    let scale: f64 = points.as_slice().iter().map(|v| v * v).sum::<f64>().max(1e-300);
    let tol = 1e-12 * scale;
    let norms: Vec<f64> = (0..rows).map(|i| dot(points.row(i), points.row(i))).collect();
    for _ in 0..MAX_SWAP_PASSES {
        // proj[i][c] = x_i · S_c, rebuilt each pass to avoid drift
        let sums = cluster_sums(points, labels, k);
        let mut proj = vec![0.0; rows * k];
        for i in 0..rows {
            for c in 0..k {
                proj[i * k + c] = dot(points.row(i), sums.row(c));
            }
        }
        let mut improved = false;
        for i in 0..rows {
            for j in (i + 1)..rows {
                let (a, b) = (labels[i], labels[j]);
                if a == b {
                    continue;
                }
                let gij = dot(points.row(i), points.row(j));
                // (S_A − S_B)·(x_j − x_i)
                let cross = proj[j * k + a] - proj[i * k + a] - proj[j * k + b] + proj[i * k + b];
                let dist = norms[i] + norms[j] - 2.0 * gij;
                let delta = -2.0 / m * (cross + dist);
                if delta < -tol {
                    labels[i] = b;
                    labels[j] = a;
                    // S_A += x_j − x_i, S_B += x_i − x_j
                    for r in 0..rows {
                        let shift = dot(points.row(r), points.row(j)) - dot(points.row(r), points.row(i));
                        proj[r * k + a] += shift;
                        proj[r * k + b] -= shift;
                    }
                    improved = true;
                }
            }
        }
        if !improved {
            break;
        }
    }
}

fn cluster_sums(points: &Matrix, labels: &[usize], k: usize) -> Matrix {
    let mut sums = Matrix::zeros(k, points.cols());
    for (i, &l) in labels.iter().enumerate() {
        for (s, v) in sums.row_mut(l).iter_mut().zip(points.row(i)) {
            *s += v;
        }
    }
    sums
}

/// Clusters `w_in` from a random start and, when `prev` is given, also from
/// `prev`'s cluster means, keeping whichever has lower WCSS (ties go to the
/// warm start). The random run always draws from `rng` first, so the call
/// without `prev` consumes exactly the stream of a single random run.
pub fn cluster_with_warmstart(
    w_in: &Matrix,
    n_clusters: usize,
    prev: Option<&Partition>,
    rng: &mut RngState,
) -> Result<ClusteringOutcome> {
    let random = balanced_kmeans(w_in, n_clusters, KMeansInit::Random, rng)?;
    let Some(prev) = prev else {
        return Ok(random);
    };
    let warm = balanced_kmeans(w_in, n_clusters, KMeansInit::FromPartition(prev), rng)?;
    Ok(if warm.wcss <= random.wcss { warm } else { random })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pts<R: AsRef<[f64]>>(rows: &[R]) -> Matrix {
        Matrix::from_rows(rows)
    }

    #[test]
    fn wcss_small_cases() {
        let p = pts(&[&[0.0], &[2.0]]);
        assert_eq!(wcss(&p, &Partition::new(vec![0, 0], 1).unwrap()).unwrap(), 2.0);
        let same = pts(&[[1.5, 2.0]; 4]);
        assert_eq!(wcss(&same, &Partition::new(vec![0, 1, 1, 0], 2).unwrap()).unwrap(), 0.0);
    }

    #[test]
    fn partition_rejects_unbalanced() {
        assert!(matches!(Partition::new(vec![0, 0, 0, 1], 2), Err(Error::Unbalanced(_))));
        assert!(Partition::new(vec![0, 1, 2], 2).is_err());
        assert!(Partition::contiguous(6, 4).is_err());
    }

    #[test]
    fn single_cluster_takes_everything() {
        let mut rng = RngState::new(1);
        let p = pts(&[&[0.0, 1.0], &[2.0, 3.0], &[4.0, -1.0]]);
        let out = balanced_kmeans(&p, 1, KMeansInit::Random, &mut rng).unwrap();
        assert_eq!(out.partition.assignment(), &[0, 0, 0]);
        // total variance around the grand mean (2, 1)
        assert!((out.wcss - (4.0 + 0.0 + 4.0 + 0.0 + 4.0 + 4.0)).abs() < 1e-12);
    }

    #[test]
    fn errors_on_bad_cluster_counts() {
        let mut rng = RngState::new(1);
        let p = pts(&[&[0.0], &[1.0], &[2.0]]);
        assert!(balanced_kmeans(&p, 4, KMeansInit::Random, &mut rng).is_err());
        assert!(matches!(
            balanced_kmeans(&p, 2, KMeansInit::Random, &mut rng),
            Err(Error::Unbalanced(_))
        ));
    }

    #[test]
    fn identical_points_have_zero_wcss() {
        let mut rng = RngState::new(4);
        let p = pts(&[[0.5, 0.5]; 6]);
        let out = balanced_kmeans(&p, 3, KMeansInit::Random, &mut rng).unwrap();
        assert_eq!(out.wcss, 0.0);
        assert_eq!(out.partition.cluster_size(), 2);
    }

    #[test]
    fn no_prev_equals_single_random_run() {
        let mut rng = RngState::new(77);
        let w: Vec<f64> = (0..32).map(|_| rng.normal()).collect();
        let w = Matrix::from_vec(16, 2, w).unwrap();
        let a = cluster_with_warmstart(&w, 4, None, &mut RngState::new(5)).unwrap();
        let b = balanced_kmeans(&w, 4, KMeansInit::Random, &mut RngState::new(5)).unwrap();
        assert_eq!(a.partition, b.partition);
        assert_eq!(a.wcss, b.wcss);
        assert_eq!(a.init_kind, InitKind::Random);
    }
}
