//! Lloyd's algorithm with k-means++ seeding, best of several seedings.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const MAX_ITERS: usize = 300;
/// Independent k-means++ seedings per fit; the lowest final inertia wins.
pub const RESTARTS: usize = 10;

#[derive(Debug, Clone)]
pub struct KMeansFit {
    pub centroids: Vec<f64>,
    pub labels: Vec<usize>,
    pub inertia: f64,
    /// Inertia after seeding, then after every Lloyd update.
    pub history: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

#[inline]
pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index and squared distance of the nearest centroid; ties go to the lowest index.
pub fn assign_nearest(centroids: &[f64], dim: usize, v: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, c) in centroids.chunks_exact(dim).enumerate() {
        let d = squared_distance(v, c);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

fn assign_all(points: &[f64], centroids: &[f64], dim: usize, labels: &mut [usize], dists: &mut [f64]) -> f64 {
    let mut inertia = 0.0;
    for (i, p) in points.chunks_exact(dim).enumerate() {
        let (k, d) = assign_nearest(centroids, dim, p);
        labels[i] = k;
        dists[i] = d;
        inertia += d;
    }
    inertia
}

fn plus_plus(points: &[f64], dim: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let m = points.len() / dim;
    let mut centroids = Vec::with_capacity(k * dim);
    let first = rng.gen_range(0..m);
    centroids.extend_from_slice(&points[first * dim..(first + 1) * dim]);
    let mut d2: Vec<f64> = points.chunks_exact(dim).map(|p| squared_distance(p, &centroids[..dim])).collect();
    for _ in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.gen::<f64>() * total;
            let mut idx = m - 1;
            for (i, &w) in d2.iter().enumerate() {
                if r < w {
                    idx = i;
                    break;
                }
                r -= w;
            }
            idx
        } else {
            rng.gen_range(0..m)
        };
        let c = points[pick * dim..(pick + 1) * dim].to_vec();
        for (p, d) in points.chunks_exact(dim).zip(d2.iter_mut()) {
            *d = d.min(squared_distance(p, &c));
        }
        centroids.extend(c);
    }
    centroids
}

/// Clusters `points` (`M × dim`, row-major) into `k` groups.
pub fn kmeans_fit(points: &[f64], dim: usize, k: usize, seed: u64, max_iters: usize) -> Result<KMeansFit> {
    if dim == 0 || points.len() % dim != 0 {
        return Err(Error::DimensionMismatch { expected: dim, found: points.len() });
    }
    let m = points.len() / dim;
    if k < 2 {
        return Err(Error::config(format!("K must be at least 2, got {k}")));
    }
    if m < k {
        return Err(Error::config(format!("need at least K={k} vectors, got {m}")));
    }
    if points.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("k-means input".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<KMeansFit> = None;
    for _ in 0..RESTARTS {
        let init = plus_plus(points, dim, k, &mut rng);
        let fit = lloyd(points, dim, k, init, max_iters);
        if best.as_ref().map_or(true, |b| fit.inertia < b.inertia) {
            best = Some(fit);
        }
    }
    Ok(best.expect("at least one restart"))
}

/// Lloyd iterations from the given centroids.
pub fn lloyd(points: &[f64], dim: usize, k: usize, mut centroids: Vec<f64>, max_iters: usize) -> KMeansFit {
    let m = points.len() / dim;
    let mut labels = vec![0usize; m];
    let mut dists = vec![0.0; m];
    let mut inertia = assign_all(points, &centroids, dim, &mut labels, &mut dists);
    let mut history = vec![inertia];
    let mut prev_labels = labels.clone();
    let mut converged = false;
    let mut iterations = 0;

    while iterations < max_iters {
        iterations += 1;
        // update step
        let mut sums = vec![0.0; k * dim];
        let mut counts = vec![0usize; k];
        for (i, p) in points.chunks_exact(dim).enumerate() {
            let l = labels[i];
            counts[l] += 1;
            for (s, v) in sums[l * dim..(l + 1) * dim].iter_mut().zip(p) {
                *s += v;
            }
        }
        let mut taken = vec![false; m];
        for c in 0..k {
            if counts[c] > 0 {
                let inv = 1.0 / counts[c] as f64;
                for (dst, s) in centroids[c * dim..(c + 1) * dim].iter_mut().zip(&sums[c * dim..(c + 1) * dim]) {
                    *dst = s * inv;
                }
            } else {
                // reseed at the point farthest from its own centroid
                let far = (0..m)
                    .filter(|&i| !taken[i])
                    .max_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(b.cmp(&a)))
                    .unwrap();
                taken[far] = true;
                dists[far] = 0.0;
                centroids[c * dim..(c + 1) * dim].copy_from_slice(&points[far * dim..(far + 1) * dim]);
            }
        }
        // assignment step
        inertia = assign_all(points, &centroids, dim, &mut labels, &mut dists);
        history.push(inertia);
        if labels == prev_labels {
            converged = true;
            break;
        }
        prev_labels.copy_from_slice(&labels);
    }

    KMeansFit { centroids, labels, inertia, history, iterations, converged }
}
