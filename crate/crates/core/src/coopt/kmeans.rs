//! Lloyd's k-means with k-means++ seeding and silhouette-based choice of k.

use rand::Rng;

use crate::portfolio::squared_distance;
use crate::rng::{rng_for, stream};

pub const RESTARTS: usize = 10;
const MAX_ITERATIONS: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansFit {
    pub assignment: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub inertia: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Clustering {
    pub assignment: Vec<usize>,
    pub chosen_k: usize,
    pub silhouette: f64,
    pub inertia: f64,
    /// Set when there were too few points for any candidate k and every
    /// point became its own cluster.
    pub trivial: bool,
}

fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centroids.iter().enumerate() {
        let d = squared_distance(point, c);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

fn plus_plus_init<R: Rng>(points: &[Vec<f64>], k: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let mut centroids = vec![points[rng.random_range(0..points.len())].clone()];
    let mut dist: Vec<f64> = points.iter().map(|p| squared_distance(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = dist.iter().sum();
        let next = if total <= 0.0 {
            rng.random_range(0..points.len())
        } else {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = points.len() - 1;
            for (i, d) in dist.iter().enumerate() {
                if target < *d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            chosen
        };
        centroids.push(points[next].clone());
        for (d, p) in dist.iter_mut().zip(points) {
            *d = d.min(squared_distance(p, centroids.last().unwrap()));
        }
    }
    centroids
}

fn lloyd(points: &[Vec<f64>], mut centroids: Vec<Vec<f64>>) -> KMeansFit {
    let dim = points[0].len();
    let k = centroids.len();
    let mut assignment = vec![usize::MAX; points.len()];
    for _ in 0..MAX_ITERATIONS {
        let mut changed = false;
        for (a, p) in assignment.iter_mut().zip(points) {
            let (c, _) = nearest(p, &centroids);
            if *a != c {
                *a = c;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (&a, p) in assignment.iter().zip(points) {
            counts[a] += 1;
            for (s, x) in sums[a].iter_mut().zip(p) {
                *s += x;
            }
        }
        for c in 0..k {
            // empty clusters keep their previous centroid
            if counts[c] > 0 {
                centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
    }
    let inertia = assignment.iter().zip(points).map(|(&a, p)| squared_distance(p, &centroids[a])).sum();
    KMeansFit { assignment, centroids, inertia }
}

/// Best-inertia fit over [`RESTARTS`] seeded k-means++ initializations.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64) -> KMeansFit {
    assert!(k >= 1 && k <= points.len(), "k must lie in 1..=n");
    let mut best: Option<KMeansFit> = None;
    for restart in 0..RESTARTS {
        let mut rng = rng_for(seed, &[stream::KMEANS, k as u64, restart as u64]);
        let fit = lloyd(points, plus_plus_init(points, k, &mut rng));
        if best.as_ref().is_none_or(|b| fit.inertia < b.inertia) {
            best = Some(fit);
        }
    }
    best.expect("at least one restart")
}

/// Mean silhouette coefficient; singleton clusters score 0.
pub fn silhouette(points: &[Vec<f64>], assignment: &[usize]) -> f64 {
    let n = points.len();
    let k = assignment.iter().max().map_or(0, |m| m + 1);
    if n < 2 || k < 2 {
        return 0.0;
    }
    let mut sizes = vec![0usize; k];
    for &a in assignment {
        sizes[a] += 1;
    }
    let mut total = 0.0;
    let mut sums = vec![0.0; k];
    for i in 0..n {
        sums.iter_mut().for_each(|s| *s = 0.0);
        for j in 0..n {
            if i != j {
                sums[assignment[j]] += squared_distance(&points[i], &points[j]).sqrt();
            }
        }
        let own = assignment[i];
        if sizes[own] <= 1 {
            continue;
        }
        let a = sums[own] / (sizes[own] - 1) as f64;
        let b = (0..k)
            .filter(|&c| c != own && sizes[c] > 0)
            .map(|c| sums[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        if b.is_finite() {
            let m = a.max(b);
            if m > 0.0 {
                total += (b - a) / m;
            }
        }
    }
    total / n as f64
}

/// Fit every candidate k below the point count and keep the one with the
/// highest mean silhouette (ties to the smaller k).
pub fn kmeans_with_silhouette(points: &[Vec<f64>], candidate_ks: &[usize], seed: u64) -> Clustering {
    let n = points.len();
    let mut ks: Vec<usize> = candidate_ks.iter().copied().filter(|&k| k >= 1 && k < n).collect();
    ks.sort_unstable();
    ks.dedup();
    if ks.is_empty() {
        return Clustering { assignment: (0..n).collect(), chosen_k: n, silhouette: 0.0, inertia: 0.0, trivial: true };
    }
    let mut best: Option<Clustering> = None;
    for k in ks {
        let fit = kmeans(points, k, seed);
        let s = silhouette(points, &fit.assignment);
        if best.as_ref().is_none_or(|b| s > b.silhouette) {
            best = Some(Clustering { assignment: fit.assignment, chosen_k: k, silhouette: s, inertia: fit.inertia, trivial: false });
        }
    }
    best.expect("nonempty candidates")
}
