use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, WeightedIndex};

use super::{CodebookError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct KMeans {
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    /// Inertia after every centroid update; non-increasing.
    pub inertia: Vec<f64>,
    pub iterations: usize,
}

impl KMeans {
    pub fn final_inertia(&self) -> f64 {
        self.inertia.last().copied().unwrap_or(0.0)
    }

    /// Member of each cluster nearest its centroid (smallest index on ties).
    pub fn representatives(&self, points: &[Vec<f64>]) -> Vec<usize> {
        (0..self.centroids.len())
            .map(|c| {
                let mut best = (usize::MAX, f64::INFINITY);
                for (i, p) in points.iter().enumerate() {
                    if self.assignments[i] == c {
                        let d = sq_dist(p, &self.centroids[c]);
                        if d < best.1 {
                            best = (i, d);
                        }
                    }
                }
                best.0
            })
            .collect()
    }
}

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, cen) in centroids.iter().enumerate() {
        let d = sq_dist(p, cen);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn inertia(points: &[Vec<f64>], assign: &[usize], centroids: &[Vec<f64>]) -> f64 {
    points
        .iter()
        .zip(assign)
        .map(|(p, &c)| sq_dist(p, &centroids[c]))
        .sum()
}

/// k-means++ seeding: centres are distinct point indices.
fn seed_centroids(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut chosen = vec![rng.gen_range(0..n)];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &points[chosen[0]])).collect();
    while chosen.len() < k {
        let weights: Vec<f64> = (0..n)
            .map(|i| if chosen.contains(&i) { 0.0 } else { d2[i] })
            .collect();
        let next = match WeightedIndex::new(&weights) {
            Ok(dist) => dist.sample(rng),
            // every remaining point coincides with a centre
            Err(_) => (0..n).find(|i| !chosen.contains(i)).expect("k <= n"),
        };
        chosen.push(next);
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, &points[next]));
        }
    }
    chosen.into_iter().map(|i| points[i].clone()).collect()
}

/// Move the worst-fit point of a multi-member cluster into each empty
/// cluster, which then sits exactly on that point.
fn repair_empty(
    points: &[Vec<f64>],
    assign: &mut [usize],
    centroids: &mut [Vec<f64>],
) -> Result<()> {
    let k = centroids.len();
    loop {
        let mut sizes = vec![0usize; k];
        for &a in assign.iter() {
            sizes[a] += 1;
        }
        let Some(empty) = sizes.iter().position(|&s| s == 0) else {
            return Ok(());
        };
        let donor = (0..points.len())
            .filter(|&i| sizes[assign[i]] > 1)
            .fold(None::<(usize, f64)>, |best, i| {
                let d = sq_dist(&points[i], &centroids[assign[i]]);
                match best {
                    Some((_, bd)) if d <= bd => best,
                    _ => Some((i, d)),
                }
            })
            .ok_or(CodebookError::EmptyCluster { cluster: empty })?;
        assign[donor.0] = empty;
        centroids[empty] = points[donor.0].clone();
    }
}

/// Lloyd's algorithm with k-means++ seeding. Stops when assignments are
/// stable or after `max_iters` updates.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64, max_iters: usize) -> Result<KMeans> {
    let n = points.len();
    if k == 0 || k > n {
        return Err(CodebookError::Config(format!("k-means needs 1 <= k <= n, got k={k}, n={n}")));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(CodebookError::Config("points have ragged dimensions".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = seed_centroids(points, k, &mut rng);
    let mut assign: Vec<usize> = vec![usize::MAX; n];
    let mut history = Vec::new();
    let mut iterations = 0;
    for _ in 0..max_iters.max(1) {
        let mut next: Vec<usize> = points.iter().map(|p| nearest(p, &centroids).0).collect();
        repair_empty(points, &mut next, &mut centroids)?;
        let stable = next == assign;
        assign = next;
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &c) in points.iter().zip(&assign) {
            counts[c] += 1;
            for (s, x) in sums[c].iter_mut().zip(p) {
                *s += x;
            }
        }
        for c in 0..k {
            centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
        }
        history.push(inertia(points, &assign, &centroids));
        iterations += 1;
        if stable {
            break;
        }
    }
    Ok(KMeans {
        assignments: assign,
        centroids,
        inertia: history,
        iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::Normal;

    #[test]
    fn k_equals_n_has_zero_inertia() {
        let pts: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64, (i * i) as f64]).collect();
        let km = kmeans(&pts, 6, 3, 100).unwrap();
        assert_eq!(km.final_inertia(), 0.0);
        let mut a = km.assignments.clone();
        a.sort_unstable();
        a.dedup();
        assert_eq!(a.len(), 6);
    }

    #[test]
    fn too_many_clusters_is_error() {
        let pts = vec![vec![0.0], vec![1.0]];
        assert!(matches!(kmeans(&pts, 3, 0, 10), Err(CodebookError::Config(_))));
    }

    #[test]
    fn two_blobs_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let noise = Normal::new(0.0, 0.01).unwrap();
        let pts: Vec<Vec<f64>> = (0..200)
            .map(|i| {
                let cx = if i % 2 == 0 { 10.0 } else { -10.0 };
                vec![cx + noise.sample(&mut rng), noise.sample(&mut rng)]
            })
            .collect();
        let km = kmeans(&pts, 2, 9, 100).unwrap();
        let mut xs: Vec<f64> = km.centroids.iter().map(|c| c[0]).collect();
        xs.sort_by(f64::total_cmp);
        assert!((xs[0] + 10.0).abs() < 0.1 && (xs[1] - 10.0).abs() < 0.1);
        for c in &km.centroids {
            assert!(c[1].abs() < 0.1);
        }
    }

    #[test]
    fn inertia_never_increases() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pts: Vec<Vec<f64>> = (0..80).map(|_| (0..3).map(|_| rng.gen::<f64>()).collect()).collect();
        let km = kmeans(&pts, 5, 2, 100).unwrap();
        for w in km.inertia.windows(2) {
            assert!(w[1] <= w[0] + 1e-12);
        }
    }

    #[test]
    fn identical_points_fill_every_cluster() {
        let pts = vec![vec![1.5, -2.0]; 10];
        let km = kmeans(&pts, 4, 0, 100).unwrap();
        let reps = km.representatives(&pts);
        assert_eq!(reps.len(), 4);
        let mut r = reps.clone();
        r.sort_unstable();
        r.dedup();
        assert_eq!(r.len(), 4);
    }
}
