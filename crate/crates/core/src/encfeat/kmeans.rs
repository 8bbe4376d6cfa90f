//! Lloyd's k-means with seeded initialization from data points, deterministic
//! tie-breaking, and empty-cluster repair.

use rand::Rng;

use super::EncoderError;
use crate::rng;

#[derive(Clone, Debug)]
pub struct KmeansResult {
    pub centroids: Vec<Vec<f64>>,
    /// Cluster index per input point, in input order.
    pub assignments: Vec<usize>,
    /// Sum of squared distances from each point to its centroid.
    pub inertia: f64,
}

const MAX_ITERATIONS: usize = 300;
const TAG_KMEANS_INIT: u64 = 0x4b4d_0001;

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64) -> Result<KmeansResult, EncoderError> {
    Ok(kmeans_with_history(points, k, seed)?.0)
}

/// Like [`kmeans`] but also reports the inertia after every assignment step.
fn kmeans_with_history(
    points: &[Vec<f64>],
    k: usize,
    seed: u64,
) -> Result<(KmeansResult, Vec<f64>), EncoderError> {
    if k == 0 {
        return Err(EncoderError::ZeroClusters);
    }
    if points.len() < k {
        return Err(EncoderError::TooFewPoints { points: points.len(), k });
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(EncoderError::MixedPointDims);
    }

    // initial centroids: k distinct points, chosen by partial Fisher-Yates
    let mut init_rng = rng::stream(seed, TAG_KMEANS_INIT);
    let mut pool: Vec<usize> = (0..points.len()).collect();
    for i in 0..k {
        let j = init_rng.gen_range(i..pool.len());
        pool.swap(i, j);
    }
    let mut centroids: Vec<Vec<f64>> = pool[..k].iter().map(|&i| points[i].clone()).collect();

    let mut assignments = vec![usize::MAX; points.len()];
    let mut history = Vec::new();
    for _ in 0..MAX_ITERATIONS {
        let (changed, inertia) = assign(points, &centroids, &mut assignments);
        history.push(inertia);
        if !changed {
            break;
        }
        repair_empty_clusters(points, &mut centroids, &mut assignments, k);
        update_centroids(points, &assignments, &mut centroids, dim);
    }

    // if the iteration cap was hit mid-update, restore the fixpoint pairing of
    // assignments to the final centroids, repairing any stragglers
    let (changed, mut inertia) = assign(points, &centroids, &mut assignments);
    if changed {
        repair_empty_clusters(points, &mut centroids, &mut assignments, k);
        inertia = points
            .iter()
            .zip(&assignments)
            .map(|(p, &a)| squared_distance(p, &centroids[a]))
            .sum();
    }
    history.push(inertia);

    Ok((KmeansResult { centroids, assignments, inertia }, history))
}

/// Nearest-centroid assignment. Ties keep the current assignment (so repaired
/// clusters hold their seed point among duplicates), then favor the lowest
/// index. Returns whether anything moved, plus the resulting inertia.
fn assign(points: &[Vec<f64>], centroids: &[Vec<f64>], assignments: &mut [usize]) -> (bool, f64) {
    let mut changed = false;
    let mut inertia = 0.0;
    for (i, point) in points.iter().enumerate() {
        let current = assignments[i];
        let mut best = 0usize;
        let mut best_dist = f64::INFINITY;
        for (c, centroid) in centroids.iter().enumerate() {
            let d = squared_distance(point, centroid);
            if d < best_dist || (d == best_dist && c == current) {
                best = c;
                best_dist = d;
            }
        }
        if best != current {
            assignments[i] = best;
            changed = true;
        }
        inertia += best_dist;
    }
    (changed, inertia)
}

/// Reseeds each empty cluster's centroid at the point currently farthest from
/// its own centroid, claiming that point for the empty cluster.
fn repair_empty_clusters(
    points: &[Vec<f64>],
    centroids: &mut [Vec<f64>],
    assignments: &mut [usize],
    k: usize,
) {
    let mut counts = vec![0usize; k];
    for &a in assignments.iter() {
        counts[a] += 1;
    }
    let mut claimed = vec![false; points.len()];
    for cluster in 0..k {
        if counts[cluster] > 0 {
            continue;
        }
        let mut farthest = None;
        let mut farthest_dist = -1.0;
        for (i, point) in points.iter().enumerate() {
            // only raid clusters that can spare a point
            if claimed[i] || counts[assignments[i]] <= 1 {
                continue;
            }
            let d = squared_distance(point, &centroids[assignments[i]]);
            if d > farthest_dist {
                farthest = Some(i);
                farthest_dist = d;
            }
        }
        if let Some(i) = farthest {
            counts[assignments[i]] -= 1;
            counts[cluster] += 1;
            assignments[i] = cluster;
            centroids[cluster] = points[i].clone();
            claimed[i] = true;
        }
    }
}

fn update_centroids(
    points: &[Vec<f64>],
    assignments: &[usize],
    centroids: &mut [Vec<f64>],
    dim: usize,
) {
    let k = centroids.len();
    let mut counts = vec![0usize; k];
    for c in centroids.iter_mut() {
        c.iter_mut().for_each(|v| *v = 0.0);
    }
    for (point, &a) in points.iter().zip(assignments) {
        counts[a] += 1;
        for (acc, v) in centroids[a].iter_mut().zip(point) {
            *acc += v;
        }
    }
    for (c, &count) in centroids.iter_mut().zip(&counts) {
        if count > 0 {
            c.iter_mut().for_each(|v| *v /= count as f64);
        } else {
            // empty after repair can only mean more clusters than points; keep
            // the previous centroid rather than dividing by zero
            debug_assert!(dim == 0 || points.len() < k);
        }
    }
}
