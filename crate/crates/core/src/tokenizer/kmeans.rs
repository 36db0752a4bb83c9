//! Weighted k-means with k-means++ seeding.
//!
//! Duplicate points are collapsed into one weighted point, which gives the
//! same Lloyd fixed point as clustering the raw multiset.

use rand::Rng;

use crate::error::{Result, VocError};

pub const MAX_ITERS: usize = 100;
pub const SHIFT_TOL: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct KMeans {
    pub centroids: Vec<Vec<f64>>,
    pub iterations: usize,
    /// Weighted sum of squared distances to the assigned centroid.
    pub inertia: f64,
}

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest centroid; ties go to the lowest index.
pub fn nearest(centroids: &[Vec<f64>], x: &[f64]) -> (usize, f64) {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, c) in centroids.iter().enumerate() {
        let d = sq_dist(c, x);
        if d < best_d {
            best = i;
            best_d = d;
        }
    }
    (best, best_d)
}

fn weighted_pick<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if *w > 0.0 {
            if u < *w {
                return i;
            }
            u -= w;
        }
    }
    weights.iter().rposition(|w| *w > 0.0).unwrap_or(0)
}

/// `points` must be distinct; `weights` are their multiplicities.
pub fn kmeans<R: Rng + ?Sized>(
    points: &[Vec<f64>],
    weights: &[f64],
    k: usize,
    rng: &mut R,
) -> Result<KMeans> {
    if k < 2 {
        return Err(VocError::InvalidInput(
            "codebook size must be at least 2".into(),
        ));
    }
    if points.len() < k {
        return Err(VocError::DegenerateCorpus(format!(
            "{} distinct vectors cannot fill {k} centroids",
            points.len()
        )));
    }
    // k-means++ seeding
    let mut centroids = vec![points[weighted_pick(weights, rng)].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let scores: Vec<f64> = d2.iter().zip(weights).map(|(d, w)| d * w).collect();
        let next = points[weighted_pick(&scores, rng)].clone();
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &next));
        }
        centroids.push(next);
    }

    let dim = points[0].len();
    let mut assign = vec![0usize; points.len()];
    let mut iterations = 0;
    for _ in 0..MAX_ITERS {
        iterations += 1;
        for (a, p) in assign.iter_mut().zip(points) {
            *a = nearest(&centroids, p).0;
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut mass = vec![0.0; k];
        for ((p, w), &a) in points.iter().zip(weights).zip(&assign) {
            mass[a] += w;
            for (s, x) in sums[a].iter_mut().zip(p) {
                *s += w * x;
            }
        }
        let mut next: Vec<Vec<f64>> = sums
            .into_iter()
            .zip(&mass)
            .map(|(s, m)| s.into_iter().map(|x| x / m).collect())
            .collect();
        // an empty cluster takes the point contributing the most distortion
        for c in 0..k {
            if mass[c] == 0.0 {
                let (far, _) = points
                    .iter()
                    .zip(weights)
                    .enumerate()
                    .map(|(i, (p, w))| (i, w * nearest(&centroids, p).1))
                    .fold(
                        (0, f64::NEG_INFINITY),
                        |acc, x| if x.1 > acc.1 { x } else { acc },
                    );
                next[c] = points[far].clone();
            }
        }
        let shift = centroids
            .iter()
            .zip(&next)
            .map(|(a, b)| sq_dist(a, b).sqrt())
            .fold(0.0, f64::max);
        centroids = next;
        if shift < SHIFT_TOL {
            break;
        }
    }
    let inertia = points
        .iter()
        .zip(weights)
        .map(|(p, w)| w * nearest(&centroids, p).1)
        .sum();
    Ok(KMeans {
        centroids,
        iterations,
        inertia,
    })
}
