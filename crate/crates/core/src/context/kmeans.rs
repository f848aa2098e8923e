//! k-means++ with Lloyd refinement and restarts.

use rand::Rng as _;

use crate::error::{CbsaError, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const RESTARTS: usize = 10;
pub const MAX_ITERS: usize = 300;
pub const REL_TOL: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct Clustering {
    pub assignment: Vec<usize>,
    pub inertia: f64,
    pub centroids: Vec<Vec<f64>>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid, lowest id on ties.
fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, sq_dist(point, &centroids[0]));
    for (c, centroid) in centroids.iter().enumerate().skip(1) {
        let d = sq_dist(point, centroid);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn plus_plus_seed(points: &[&[f64]], k: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut centroids = vec![points[rng.random_range(0..n)].to_vec()];
    while centroids.len() < k {
        let weights: Vec<f64> = points.iter().map(|p| nearest(p, &centroids).1).collect();
        let total: f64 = weights.iter().sum();
        let pick = if total <= 0.0 {
            rng.random_range(0..n)
        } else {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = n - 1;
            for (i, w) in weights.iter().enumerate() {
                acc += w;
                if acc > target {
                    chosen = i;
                    break;
                }
            }
            chosen
        };
        centroids.push(points[pick].to_vec());
    }
    centroids
}

fn lloyd(points: &[&[f64]], mut centroids: Vec<Vec<f64>>) -> Clustering {
    let (n, k, dim) = (points.len(), centroids.len(), points[0].len());
    let mut prev = f64::INFINITY;
    let mut assignment = vec![0; n];
    let mut inertia = 0.0;
    for _ in 0..MAX_ITERS {
        inertia = 0.0;
        for (i, p) in points.iter().enumerate() {
            let (c, d) = nearest(p, &centroids);
            assignment[i] = c;
            inertia += d;
        }
        if inertia == 0.0 || (prev.is_finite() && (prev - inertia).abs() <= REL_TOL * prev) {
            break;
        }
        prev = inertia;

        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (i, p) in points.iter().enumerate() {
            counts[assignment[i]] += 1;
            for (s, v) in sums[assignment[i]].iter_mut().zip(p.iter()) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
        // Empty clusters move to the point farthest from its own centroid.
        for c in 0..k {
            if counts[c] == 0 {
                let mut far = (0, -1.0);
                for (i, p) in points.iter().enumerate() {
                    let d = sq_dist(p, &centroids[assignment[i]]);
                    if d > far.1 {
                        far = (i, d);
                    }
                }
                counts[assignment[far.0]] -= 1;
                assignment[far.0] = c;
                counts[c] = 1;
                centroids[c] = points[far.0].to_vec();
            }
        }
    }
    Clustering {
        assignment,
        inertia,
        centroids,
    }
}

/// Best of `RESTARTS` k-means++ runs by inertia; the earliest restart wins ties.
pub fn kmeans(points: &Tensor, k: usize, rng: &mut Rng) -> Result<Clustering> {
    let n = points.rows();
    if k == 0 || k > n {
        return Err(CbsaError::Spec(format!("cannot form {k} clusters from {n} points")));
    }
    let rows: Vec<&[f64]> = (0..n).map(|i| points.row(i)).collect();
    let mut best: Option<Clustering> = None;
    for _ in 0..RESTARTS {
        let run = lloyd(&rows, plus_plus_seed(&rows, k, rng));
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

/// Renames clusters in order of first appearance, so point 0 is in cluster 0.
pub fn canonical_labels(assignment: &[usize]) -> Vec<usize> {
    let mut map: Vec<(usize, usize)> = Vec::new();
    assignment
        .iter()
        .map(|&a| match map.iter().find(|(from, _)| *from == a) {
            Some(&(_, to)) => to,
            None => {
                let to = map.len();
                map.push((a, to));
                to
            }
        })
        .collect()
}
