//! k-means with k-means++ seeding, used only to initialize allocations.

use rand::Rng;

const MAX_LLOYD: usize = 100;
const MAX_RESEEDS: usize = 10;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn seed_centers<R: Rng + ?Sized>(points: &[Vec<f64>], k: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut centers = vec![points[rng.random_range(0..n)].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, d) in d2.iter().enumerate() {
                if target < *d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centers.push(points[pick].clone());
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, &centers[centers.len() - 1]));
        }
    }
    centers
}

fn nearest(p: &[f64], centers: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (k, c) in centers.iter().enumerate() {
        let d = sq_dist(p, c);
        if d < best_d {
            best_d = d;
            best = k;
        }
    }
    best
}

fn lloyd(points: &[Vec<f64>], mut centers: Vec<Vec<f64>>) -> Vec<usize> {
    let dim = points[0].len();
    let k = centers.len();
    let mut labels: Vec<usize> = points.iter().map(|p| nearest(p, &centers)).collect();
    for _ in 0..MAX_LLOYD {
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &l) in points.iter().zip(&labels) {
            counts[l] += 1;
            for (s, v) in sums[l].iter_mut().zip(p) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                centers[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
        let next: Vec<usize> = points.iter().map(|p| nearest(p, &centers)).collect();
        if next == labels {
            break;
        }
        labels = next;
    }
    labels
}

fn counts(labels: &[usize], k: usize) -> Vec<usize> {
    let mut c = vec![0; k];
    for &l in labels {
        c[l] += 1;
    }
    c
}

/// Cluster labels in `0..k`, every cluster non-empty. Requires
/// `points.len() >= k >= 1`.
pub fn kmeans<R: Rng + ?Sized>(points: &[Vec<f64>], k: usize, rng: &mut R) -> Vec<usize> {
    assert!(k >= 1 && points.len() >= k);
    if k == 1 {
        return vec![0; points.len()];
    }
    let mut labels = Vec::new();
    for _ in 0..=MAX_RESEEDS {
        labels = lloyd(points, seed_centers(points, k, rng));
        if counts(&labels, k).iter().all(|&c| c > 0) {
            return labels;
        }
    }
    // still empty: move the point farthest from its center out of the
    // largest cluster
    loop {
        let c = counts(&labels, k);
        let Some(empty) = c.iter().position(|&v| v == 0) else {
            return labels;
        };
        let largest = (0..k).max_by_key(|&j| (c[j], std::cmp::Reverse(j))).unwrap();
        let members: Vec<usize> = (0..points.len()).filter(|&i| labels[i] == largest).collect();
        let dim = points[0].len();
        let mut center = vec![0.0; dim];
        for &i in &members {
            for (s, v) in center.iter_mut().zip(&points[i]) {
                *s += v / members.len() as f64;
            }
        }
        let far = *members
            .iter()
            .max_by(|&&a, &&b| sq_dist(&points[a], &center).total_cmp(&sq_dist(&points[b], &center)))
            .unwrap();
        labels[far] = empty;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{substream, Block};

    #[test]
    fn separates_obvious_clusters() {
        let mut pts = Vec::new();
        for i in 0..20 {
            pts.push(vec![i as f64 * 0.01, 0.0]);
            pts.push(vec![10.0 + i as f64 * 0.01, 5.0]);
        }
        let labels = kmeans(&pts, 2, &mut substream(1, Block::Test, 0, 0));
        for pair in labels.chunks(2) {
            assert_ne!(pair[0], pair[1]);
        }
        let first = labels[0];
        assert!(labels.iter().step_by(2).all(|&l| l == first));
    }

    #[test]
    fn duplicates_never_leave_empty_clusters() {
        let pts = vec![vec![1.0]; 6];
        let labels = kmeans(&pts, 3, &mut substream(2, Block::Test, 0, 0));
        assert!(counts(&labels, 3).iter().all(|&c| c > 0));
    }

    #[test]
    fn k_equals_n() {
        let pts: Vec<Vec<f64>> = (0..4).map(|i| vec![i as f64]).collect();
        let mut labels = kmeans(&pts, 4, &mut substream(3, Block::Test, 0, 0));
        labels.sort();
        assert_eq!(labels, vec![0, 1, 2, 3]);
    }
}
