//! Lloyd's k-means with k-means++ seeding.

use rand::Rng as _;

use super::{squared_l2, IndexError};
use crate::par::{self, Execution};
use crate::rng;

pub const DEFAULT_KMEANS_ITERS: usize = 25;

const KMEANS_STREAM: u64 = 0x4b4d_4541;

/// Index and squared distance of the nearest centroid; ties go to the lowest index.
pub fn nearest_centroid(centroids: &[f32], dim: usize, v: &[f32]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centroids.chunks_exact(dim).enumerate() {
        let d = squared_l2(v, c);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

/// Trains `k` centroids on row-major `N × dim` data.
pub fn kmeans_train(
    data: &[f32],
    dim: usize,
    k: usize,
    iters: usize,
    seed: u64,
) -> Result<Vec<f32>, IndexError> {
    kmeans_train_with(data, dim, k, iters, seed, Execution::default())
}

pub fn kmeans_train_with(
    data: &[f32],
    dim: usize,
    k: usize,
    iters: usize,
    seed: u64,
    exec: Execution,
) -> Result<Vec<f32>, IndexError> {
    if dim == 0 || !data.len().is_multiple_of(dim) {
        return Err(IndexError::InvalidParameter(format!(
            "data length {} is not a multiple of dim {dim}",
            data.len()
        )));
    }
    if k == 0 {
        return Err(IndexError::InvalidParameter("k must be >= 1".into()));
    }
    let n = data.len() / dim;
    if n < k {
        return Err(IndexError::TooFewPoints { have: n, need: k });
    }
    let point = |i: usize| &data[i * dim..(i + 1) * dim];
    let mut r = rng::stream(seed, &[KMEANS_STREAM]);

    // k-means++ seeding
    let mut chosen = vec![false; n];
    let first = r.random_range(0..n);
    chosen[first] = true;
    let mut centroids: Vec<f32> = point(first).to_vec();
    let mut d2 = par::map_range(exec, n, |i| squared_l2(point(i), point(first)));
    for _ in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = r.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            let mut last_positive = 0;
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 {
                    acc += w;
                    last_positive = i;
                    if acc > target {
                        pick = Some(i);
                        break;
                    }
                }
            }
            pick.unwrap_or(last_positive)
        } else {
            // every point coincides with a centroid: take the next unused one
            chosen.iter().position(|&c| !c).unwrap_or(0)
        };
        chosen[pick] = true;
        let c = point(pick).to_vec();
        let updated = par::map_range(exec, n, |i| d2[i].min(squared_l2(point(i), &c)));
        d2 = updated;
        centroids.extend_from_slice(&c);
    }

    let mut assign: Vec<usize> = Vec::new();
    for _ in 0..iters {
        let nearest = par::map_range(exec, n, |i| nearest_centroid(&centroids, dim, point(i)));
        let new_assign: Vec<usize> = nearest.iter().map(|a| a.0).collect();
        let mut sums = vec![0.0f64; k * dim];
        let mut counts = vec![0usize; k];
        for (i, &c) in new_assign.iter().enumerate() {
            counts[c] += 1;
            for (s, &v) in sums[c * dim..(c + 1) * dim].iter_mut().zip(point(i)) {
                *s += v as f64;
            }
        }
        let empties: Vec<usize> = (0..k).filter(|&c| counts[c] == 0).collect();
        if empties.is_empty() && new_assign == assign {
            break;
        }
        for c in 0..k {
            if counts[c] > 0 {
                let inv = 1.0 / counts[c] as f64;
                for (dst, s) in centroids[c * dim..(c + 1) * dim].iter_mut().zip(&sums[c * dim..]) {
                    *dst = (s * inv) as f32;
                }
            }
        }
        // Re-seed each empty cluster at the point farthest from its centroid.
        let mut dist: Vec<f64> = nearest.iter().map(|a| a.1).collect();
        for c in empties {
            let mut far = 0;
            for (i, &d) in dist.iter().enumerate() {
                if d > dist[far] {
                    far = i;
                }
            }
            centroids[c * dim..(c + 1) * dim].copy_from_slice(point(far));
            dist[far] = -1.0;
        }
        assign = new_assign;
    }
    Ok(centroids)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn single_cluster_is_the_mean() {
        let data = [1.0f32, 2.0, 3.0, 4.0, 5.0, 9.0];
        let c = kmeans_train(&data, 2, 1, 5, 0).unwrap();
        assert_eq!(c, vec![3.0, 5.0]);
    }

    #[test]
    fn k_equals_n_memorizes_points() {
        let data: Vec<f32> = (0..20).map(|i| (i * i % 7) as f32 + i as f32 * 0.1).collect();
        let c = kmeans_train(&data, 2, 10, 10, 4).unwrap();
        let mut got: Vec<Vec<f32>> = c.chunks(2).map(|x| x.to_vec()).collect();
        let mut want: Vec<Vec<f32>> = data.chunks(2).map(|x| x.to_vec()).collect();
        got.sort_by(|a, b| a.partial_cmp(b).unwrap());
        want.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(got, want);
    }

    #[test]
    fn duplicate_points_do_not_break_seeding() {
        let data = vec![1.0f32; 12];
        let c = kmeans_train(&data, 3, 4, 5, 1).unwrap();
        assert!(c.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn too_few_points() {
        assert!(matches!(
            kmeans_train(&[0.0; 4], 2, 3, 5, 0),
            Err(IndexError::TooFewPoints { have: 2, need: 3 })
        ));
    }

    #[test]
    fn deterministic_and_mode_independent() {
        let mut r = rng::stream(9, &[]);
        let data: Vec<f32> = (0..3000).map(|_| r.random_range(-1.0..1.0)).collect();
        let a = kmeans_train_with(&data, 3, 16, 25, 5, Execution::Parallel).unwrap();
        let b = kmeans_train_with(&data, 3, 16, 25, 5, Execution::Sequential).unwrap();
        assert_eq!(a, b);
    }

    // Oracle: the per-blob sample mean. With well-separated blobs each
    // centroid converges to its blob's sample mean, which is itself within
    // 3σ/sqrt(n) of the true center.
    #[test]
    fn two_blobs_recover_their_means() {
        let sigma = 0.5;
        let per_blob = 500;
        let centers = [[-10.0f64, 0.0], [10.0, 5.0]];
        let mut r = rng::stream(77, &[]);
        let noise = Normal::new(0.0, sigma).unwrap();
        let mut data = Vec::new();
        for c in &centers {
            for _ in 0..per_blob {
                data.push((c[0] + noise.sample(&mut r)) as f32);
                data.push((c[1] + noise.sample(&mut r)) as f32);
            }
        }
        let cents = kmeans_train(&data, 2, 2, 25, 3).unwrap();
        let tol = 3.0 * sigma / (per_blob as f64).sqrt();
        for c in &centers {
            let ok = cents.chunks(2).any(|k| {
                (k[0] as f64 - c[0]).abs() < tol && (k[1] as f64 - c[1]).abs() < tol
            });
            assert!(ok, "no centroid near {c:?}: {cents:?}");
        }
        for (b, k) in cents.chunks(2).enumerate() {
            let blob = if k[0] < 0.0 { 0 } else { 1 };
            let pts = &data[blob * per_blob * 2..(blob + 1) * per_blob * 2];
            let mean: Vec<f64> = (0..2)
                .map(|d| pts.iter().skip(d).step_by(2).map(|&v| v as f64).sum::<f64>() / per_blob as f64)
                .collect();
            assert!((k[0] as f64 - mean[0]).abs() < 1e-4 && (k[1] as f64 - mean[1]).abs() < 1e-4, "{b}");
        }
    }
}
