//! Starting memberships for variational EM: spectral clustering of `log(1 + Y)`.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;

use crate::math;
use crate::model::ObservedNetwork;

/// Hard labels from k-means on the leading eigenvectors (by absolute eigenvalue).
pub fn spectral_labels<R: Rng + ?Sized>(net: &ObservedNetwork, k: usize, rng: &mut R) -> Vec<usize> {
    let n = net.n();
    let a = DMatrix::from_fn(n, n, |i, j| (1.0 + net.count(i, j) as f64).ln());
    spectral_labels_of(a, k, rng)
}

/// Spectral labels of an arbitrary symmetric affinity matrix.
pub fn spectral_labels_of<R: Rng + ?Sized>(a: DMatrix<f64>, k: usize, rng: &mut R) -> Vec<usize> {
    let n = a.nrows();
    if k <= 1 || n == 0 {
        return vec![0; n];
    }
    let eig = SymmetricEigen::new(a);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| {
        eig.eigenvalues[y]
            .abs()
            .partial_cmp(&eig.eigenvalues[x].abs())
            .unwrap()
            .then(x.cmp(&y))
    });
    let dims = k.min(n);
    let points: Vec<Vec<f64>> = (0..n)
        .map(|i| order[..dims].iter().map(|&c| eig.eigenvectors[(i, c)]).collect())
        .collect();
    kmeans(&points, k, 10, rng)
}

/// Lloyd's algorithm with k-means++ seeding; best of `repeats` by inertia.
pub fn kmeans<R: Rng + ?Sized>(points: &[Vec<f64>], k: usize, repeats: usize, rng: &mut R) -> Vec<usize> {
    let n = points.len();
    let mut best = (f64::INFINITY, vec![0; n]);
    for _ in 0..repeats.max(1) {
        let (inertia, labels) = kmeans_once(points, k, rng);
        if inertia < best.0 {
            best = (inertia, labels);
        }
    }
    best.1
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn kmeans_once<R: Rng + ?Sized>(points: &[Vec<f64>], k: usize, rng: &mut R) -> (f64, Vec<usize>) {
    let n = points.len();
    let dim = points[0].len();
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(k);
    centers.push(points[rng.random_range(0..n)].clone());
    while centers.len() < k {
        let d2: Vec<f64> = points
            .iter()
            .map(|p| centers.iter().map(|c| dist2(p, c)).fold(f64::INFINITY, f64::min))
            .collect();
        let idx = if d2.iter().sum::<f64>() > 0.0 {
            math::sample_categorical(&d2, rng)
        } else {
            rng.random_range(0..n)
        };
        centers.push(points[idx].clone());
    }
    let mut labels = vec![0usize; n];
    for _ in 0..100 {
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (c, center) in centers.iter().enumerate() {
                let dd = dist2(p, center);
                if dd < best_d {
                    best_d = dd;
                    best = c;
                }
            }
            if labels[i] != best {
                labels[i] = best;
                changed = true;
            }
        }
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
            } else {
                // reseed an empty cluster at the point farthest from its center
                let far = (0..n)
                    .max_by(|&x, &y| {
                        dist2(&points[x], &centers[labels[x]])
                            .partial_cmp(&dist2(&points[y], &centers[labels[y]]))
                            .unwrap()
                    })
                    .unwrap();
                centers[c] = points[far].clone();
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    let inertia = points
        .iter()
        .zip(&labels)
        .map(|(p, &l)| dist2(p, &centers[l]))
        .sum();
    (inertia, labels)
}

/// Soft memberships concentrated on `labels`.
pub fn tau_from_labels(labels: &[usize], k: usize, smoothing: f64) -> DMatrix<f64> {
    let n = labels.len();
    DMatrix::from_fn(n, k, |i, c| {
        let base = smoothing / k as f64;
        if labels[i] == c {
            1.0 - smoothing + base
        } else {
            base
        }
    })
}

/// Mixes each row of `tau` with an independent flat Dirichlet draw.
pub fn perturb_tau<R: Rng + ?Sized>(tau: &DMatrix<f64>, mix: f64, rng: &mut R) -> DMatrix<f64> {
    let k = tau.ncols();
    let mut out = tau.clone();
    for i in 0..tau.nrows() {
        let g = math::sample_dirichlet(&vec![1.0; k], rng);
        for c in 0..k {
            out[(i, c)] = (1.0 - mix) * tau[(i, c)] + mix * g[c];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn kmeans_separates_obvious_clusters() {
        let pts: Vec<Vec<f64>> = (0..20)
            .map(|i| if i < 10 { vec![0.0 + i as f64 * 0.01] } else { vec![5.0 + i as f64 * 0.01] })
            .collect();
        let labels = kmeans(&pts, 2, 3, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(labels[..10].iter().all(|&l| l == labels[0]));
        assert!(labels[10..].iter().all(|&l| l == labels[10]));
        assert_ne!(labels[0], labels[10]);
    }

    #[test]
    fn tau_rows_sum_to_one() {
        let t = tau_from_labels(&[0, 1, 2, 1], 3, 0.1);
        for i in 0..4 {
            assert!((t.row(i).sum() - 1.0).abs() < 1e-15);
        }
        let p = perturb_tau(&t, 0.5, &mut ChaCha8Rng::seed_from_u64(1));
        for i in 0..4 {
            assert!((p.row(i).sum() - 1.0).abs() < 1e-12);
        }
    }
}
