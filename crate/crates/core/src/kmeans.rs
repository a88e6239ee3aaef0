//! Lloyd's k-means with k-means++ seeding, specialised to low-dimensional
//! channel features.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const MAX_ITERATIONS: usize = 100;
pub const TOLERANCE: f64 = 1e-6;

fn dist2<const D: usize>(a: &[f64; D], b: &[f64; D]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest<const D: usize>(p: &[f64; D], centroids: &[[f64; D]]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centroids.iter().enumerate() {
        let d = dist2(p, c);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

fn seed_plus_plus<const D: usize>(points: &[[f64; D]], k: usize, rng: &mut ChaCha8Rng) -> Vec<[f64; D]> {
    let mut centroids = Vec::with_capacity(k);
    centroids.push(points[rng.random_range(0..points.len())]);
    let mut d2: Vec<f64> = points.iter().map(|p| dist2(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = points.len() - 1;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        } else {
            rng.random_range(0..points.len())
        };
        let c = points[pick];
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(dist2(p, &c));
        }
        centroids.push(c);
    }
    centroids
}

/// Cluster assignment for every point. Clusters may end up empty only when
/// there are fewer distinct points than `k`.
pub fn kmeans<const D: usize>(points: &[[f64; D]], k: usize, seed: u64) -> Vec<usize> {
    assert!(k >= 1 && k <= points.len(), "k must be in 1..=n");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = seed_plus_plus(points, k, &mut rng);
    let mut assign = vec![0usize; points.len()];

    for _ in 0..MAX_ITERATIONS {
        for (a, p) in assign.iter_mut().zip(points) {
            *a = nearest(p, &centroids).0;
        }

        let mut sums = vec![[0.0f64; D]; k];
        let mut counts = vec![0usize; k];
        for (&a, p) in assign.iter().zip(points) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(p) {
                *s += v;
            }
        }

        let mut movement = 0.0f64;
        for c in 0..k {
            let next = if counts[c] > 0 {
                let mut m = sums[c];
                m.iter_mut().for_each(|v| *v /= counts[c] as f64);
                m
            } else {
                // Re-seed an empty cluster at the point farthest from its centroid.
                let (far, d) = points
                    .iter()
                    .enumerate()
                    .map(|(i, p)| (i, dist2(p, &centroids[assign[i]])))
                    .fold((0, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
                if d > 0.0 {
                    assign[far] = c;
                    points[far]
                } else {
                    centroids[c]
                }
            };
            movement = movement.max(dist2(&next, &centroids[c]).sqrt());
            centroids[c] = next;
        }
        if movement < TOLERANCE {
            break;
        }
    }

    for (a, p) in assign.iter_mut().zip(points) {
        *a = nearest(p, &centroids).0;
    }
    assign
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn separates_obvious_clusters() {
        let pts = [[0.0, 1.0], [0.0, 1.1], [10.0, 20.0], [10.0, 21.0]];
        let a = kmeans(&pts, 2, 7);
        assert_eq!(a[0], a[1]);
        assert_eq!(a[2], a[3]);
        assert_ne!(a[0], a[2]);
    }

    #[test]
    fn identical_points_collapse() {
        let pts = [[1.0, 2.0]; 5];
        let a = kmeans(&pts, 3, 1);
        assert!(a.iter().all(|&x| x == a[0]));
    }

    #[test]
    fn deterministic() {
        let pts: Vec<[f64; 2]> = (0..50).map(|i| [(i * 7 % 13) as f64, (i * 3 % 11) as f64]).collect();
        assert_eq!(kmeans(&pts, 5, 42), kmeans(&pts, 5, 42));
    }
}
