//! Summaries of weighted particle systems: posterior over the number of blocks,
//! model averaging, the block-constant graphon, latent positions and the
//! mutual information of the memberships.

use std::collections::HashMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SbmError};
use crate::math;
use crate::model::ModelParams;

pub const DEFAULT_GRID: usize = 200;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KEntry {
    pub k: usize,
    pub log_evidence: f64,
    pub prior: f64,
    pub probability: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KPosterior {
    pub entries: Vec<KEntry>,
}

impl KPosterior {
    pub fn probability(&self, k: usize) -> Option<f64> {
        self.entries.iter().find(|e| e.k == k).map(|e| e.probability)
    }

    /// The most probable `K` (smallest on ties).
    pub fn mode(&self) -> usize {
        let mut best = &self.entries[0];
        for e in &self.entries[1..] {
            if e.probability > best.probability {
                best = e;
            }
        }
        best.k
    }
}

/// `p(K | Y) ∝ prior(K) p(Y | K)`. A missing prior means uniform over the given `K`s.
pub fn k_posterior(evidences: &[(usize, f64)], prior: Option<&[f64]>) -> Result<KPosterior> {
    if evidences.is_empty() {
        return Err(SbmError::InvalidParameter("no candidate K".into()));
    }
    let uniform = vec![1.0 / evidences.len() as f64; evidences.len()];
    let prior = prior.unwrap_or(&uniform);
    if prior.len() != evidences.len() || prior.iter().any(|&p| !(p >= 0.0)) {
        return Err(SbmError::InvalidParameter("prior over K must be nonnegative, one value per K".into()));
    }
    let log_post: Vec<f64> = evidences.iter().zip(prior).map(|(&(_, le), &p)| p.ln() + le).collect();
    let mut probs = vec![0.0; log_post.len()];
    let lse = math::normalize_log_weights(&log_post, &mut probs);
    if !lse.is_finite() {
        return Err(SbmError::NonFinite("posterior over K".into()));
    }
    Ok(KPosterior {
        entries: evidences
            .iter()
            .zip(prior)
            .zip(probs)
            .map(|((&(k, le), &pr), p)| KEntry {
                k,
                log_evidence: le,
                prior: pr,
                probability: p,
            })
            .collect(),
    })
}

/// A weighted sample of some vector quantity.
#[derive(Debug, Clone)]
pub struct WeightedSample {
    pub values: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
}

impl WeightedSample {
    pub fn mean(&self) -> Vec<f64> {
        let dim = self.values.first().map_or(0, |v| v.len());
        let mut m = vec![0.0; dim];
        for (v, &w) in self.values.iter().zip(&self.weights) {
            for (a, b) in m.iter_mut().zip(v) {
                *a += w * b;
            }
        }
        m
    }

    /// Weighted covariance (weights taken as normalized probabilities).
    pub fn covariance(&self) -> DMatrix<f64> {
        let mean = self.mean();
        let dim = mean.len();
        let total: f64 = self.weights.iter().sum();
        let mut c = DMatrix::zeros(dim, dim);
        for (v, &w) in self.values.iter().zip(&self.weights) {
            for a in 0..dim {
                for b in 0..dim {
                    c[(a, b)] += w * (v[a] - mean[a]) * (v[b] - mean[b]);
                }
            }
        }
        c / total
    }

    pub fn correlation(&self) -> DMatrix<f64> {
        correlation_from_covariance(&self.covariance())
    }
}

pub fn correlation_from_covariance(c: &DMatrix<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(c.nrows(), c.ncols(), |a, b| c[(a, b)] / (c[(a, a)] * c[(b, b)]).sqrt())
}

/// Pools per-`K` samples with weights `p(K | Y) W^{m,K}`.
pub fn model_average(samples: &[(usize, WeightedSample)], kpost: &KPosterior) -> WeightedSample {
    let mut values = Vec::new();
    let mut weights = Vec::new();
    for (k, s) in samples {
        let pk = kpost.probability(*k).unwrap_or(0.0);
        for (v, &w) in s.values.iter().zip(&s.weights) {
            values.push(v.clone());
            weights.push(pk * w);
        }
    }
    WeightedSample { values, weights }
}

/// Block order used for display: increasing `alpha_kk`, ties by decreasing `nu_k`.
/// `perm[new] = old`.
pub fn canonical_order(theta: &ModelParams) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..theta.k()).collect();
    perm.sort_by(|&a, &b| {
        theta.alpha[(a, a)]
            .total_cmp(&theta.alpha[(b, b)])
            .then(theta.nu[b].total_cmp(&theta.nu[a]))
            .then(a.cmp(&b))
    });
    perm
}

/// Block-constant graphon of one parameter value on a `grid x grid` lattice of cell midpoints.
pub fn particle_graphon(theta: &ModelParams, grid: usize) -> DMatrix<f64> {
    let perm = canonical_order(theta);
    let mut cum = Vec::with_capacity(perm.len());
    let mut acc = 0.0;
    for &b in &perm {
        acc += theta.nu[b];
        cum.push(acc);
    }
    let block_of = |u: f64| perm[cum.partition_point(|&c| c < u).min(perm.len() - 1)];
    let blocks: Vec<usize> = (0..grid).map(|g| block_of((g as f64 + 0.5) / grid as f64)).collect();
    DMatrix::from_fn(grid, grid, |a, b| theta.alpha[(blocks[a], blocks[b])])
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GraphonEstimate {
    pub grid: usize,
    #[serde(skip)]
    pub values: DMatrix<f64>,
}

/// Pointwise weighted mean of particle graphons.
pub fn graphon_mean<'a>(thetas: impl IntoIterator<Item = &'a ModelParams>, weights: &[f64], grid: usize) -> GraphonEstimate {
    let mut values = DMatrix::zeros(grid, grid);
    for (theta, &w) in thetas.into_iter().zip(weights) {
        if w != 0.0 {
            values += particle_graphon(theta, grid) * w;
        }
    }
    GraphonEstimate { grid, values }
}

/// Averages conditional graphons over `K`.
pub fn graphon_mean_over_k(per_k: &[(usize, GraphonEstimate)], kpost: &KPosterior) -> Result<GraphonEstimate> {
    let grid = per_k
        .first()
        .map(|(_, g)| g.grid)
        .ok_or_else(|| SbmError::InvalidParameter("no graphons to average".into()))?;
    let mut values = DMatrix::zeros(grid, grid);
    for (k, g) in per_k {
        if g.grid != grid {
            return Err(SbmError::Dimension("graphons on different grids".into()));
        }
        values += &g.values * kpost.probability(*k).unwrap_or(0.0);
    }
    Ok(GraphonEstimate { grid, values })
}

/// Posterior mean of each node's latent position: the midpoint of its block's
/// interval under the canonical order, averaged over particles.
pub fn latent_coordinates<'a>(particles: impl IntoIterator<Item = (&'a [usize], &'a ModelParams)>, weights: &[f64]) -> Vec<f64> {
    let mut out: Vec<f64> = Vec::new();
    for ((z, theta), &w) in particles.into_iter().zip(weights) {
        if out.is_empty() {
            out = vec![0.0; z.len()];
        }
        let perm = canonical_order(theta);
        let mut mid = vec![0.0; perm.len()];
        let mut acc = 0.0;
        for &b in &perm {
            mid[b] = acc + 0.5 * theta.nu[b];
            acc += theta.nu[b];
        }
        for (o, &zi) in out.iter_mut().zip(z) {
            *o += w * mid[zi];
        }
    }
    out
}

/// Plug-in mutual information of the memberships under the weighted particle
/// distribution: `sum_m W_m [log p(Z^m) - sum_i log p_i(Z^m_i)]`, clipped at zero.
pub fn mutual_information_estimate(zs: &[&[usize]], weights: &[f64]) -> f64 {
    if zs.is_empty() {
        return 0.0;
    }
    let n = zs[0].len();
    let k = zs.iter().flat_map(|z| z.iter()).max().map_or(1, |m| m + 1);
    let mut joint: HashMap<&[usize], f64> = HashMap::new();
    let mut marg = vec![0.0; n * k];
    for (z, &w) in zs.iter().zip(weights) {
        *joint.entry(z).or_insert(0.0) += w;
        for (i, &zi) in z.iter().enumerate() {
            marg[i * k + zi] += w;
        }
    }
    let mut mi = 0.0;
    for (z, &w) in zs.iter().zip(weights) {
        if w == 0.0 {
            continue;
        }
        let mut term = joint[z].ln();
        for (i, &zi) in z.iter().enumerate() {
            term -= marg[i * k + zi].ln();
        }
        mi += w * term;
    }
    mi.max(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn theta2(nu: [f64; 2], a: [f64; 3]) -> ModelParams {
        ModelParams::new(nu.to_vec(), DMatrix::from_row_slice(2, 2, &[a[0], a[1], a[1], a[2]]), vec![]).unwrap()
    }

    #[test]
    fn weighted_correlation_matches_unweighted_duplicates() {
        // Weight 2 on a point is the same as listing it twice.
        let w = WeightedSample { values: vec![vec![0.0, 1.0], vec![1.0, 3.0], vec![2.0, 2.0]], weights: vec![0.5, 0.25, 0.25] };
        let u = WeightedSample {
            values: vec![vec![0.0, 1.0], vec![0.0, 1.0], vec![1.0, 3.0], vec![2.0, 2.0]],
            weights: vec![0.25; 4],
        };
        assert_relative_eq!(w.covariance(), u.covariance(), epsilon = 1e-14);
        let r = w.correlation();
        assert_relative_eq!(r[(0, 0)], 1.0, epsilon = 1e-14);
        assert!(r[(0, 1)].abs() <= 1.0);
        // Exact value: var = 0.6875, 0.6875, cov = 0.4375.
        assert_relative_eq!(w.covariance()[(0, 1)], 0.4375, epsilon = 1e-14);
        assert_relative_eq!(r[(0, 1)], 0.4375 / 0.6875, epsilon = 1e-14);
    }

    #[test]
    fn k_posterior_examples() {
        let p = k_posterior(&[(3, -12.0)], None).unwrap();
        assert_eq!(p.probability(3), Some(1.0));
        let p = k_posterior(&[(1, -5.0), (2, -5.0), (3, -5.0)], None).unwrap();
        for k in 1..=3 {
            assert_relative_eq!(p.probability(k).unwrap(), 1.0 / 3.0, epsilon = 1e-15);
        }
        let ev = [(1, -100.0), (2, -98.5), (3, -99.0)];
        let prior = [0.2, 0.5, 0.3];
        let a = k_posterior(&ev, Some(&prior)).unwrap();
        let shifted: Vec<(usize, f64)> = ev.iter().map(|&(k, e)| (k, e + 1234.5)).collect();
        let b = k_posterior(&shifted, Some(&prior)).unwrap();
        let total: f64 = ev.iter().zip(&prior).map(|(&(_, e), p)| p * (e + 100.0f64).exp()).sum();
        for ((ea, eb), (&(_, e), p)) in a.entries.iter().zip(&b.entries).zip(ev.iter().zip(&prior)) {
            assert_relative_eq!(ea.probability, eb.probability, epsilon = 1e-12);
            assert_relative_eq!(ea.probability, p * (e + 100.0f64).exp() / total, epsilon = 1e-10);
        }
        assert_relative_eq!(a.entries.iter().map(|e| e.probability).sum::<f64>(), 1.0, epsilon = 1e-12);
        assert_eq!(a.mode(), 2);
    }

    #[test]
    fn model_average_identities() {
        let s1 = WeightedSample { values: vec![vec![1.0], vec![3.0]], weights: vec![0.25, 0.75] };
        let s2 = WeightedSample { values: vec![vec![-1.0], vec![0.0], vec![2.0]], weights: vec![0.5, 0.2, 0.3] };
        let kp = k_posterior(&[(1, -3.0), (2, -2.2)], None).unwrap();
        let pooled = model_average(&[(1, s1.clone()), (2, s2.clone())], &kp);
        assert_relative_eq!(pooled.weights.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        let expected = kp.probability(1).unwrap() * s1.mean()[0] + kp.probability(2).unwrap() * s2.mean()[0];
        assert_relative_eq!(pooled.mean()[0], expected, epsilon = 1e-12);

        let sure = k_posterior(&[(1, 0.0), (2, f64::NEG_INFINITY)], None).unwrap();
        let only = model_average(&[(1, s1.clone()), (2, s2)], &sure);
        assert_relative_eq!(only.mean()[0], s1.mean()[0], epsilon = 1e-15);

        let same = model_average(&[(1, s1.clone()), (2, s1.clone())], &kp);
        assert_relative_eq!(same.mean()[0], s1.mean()[0], epsilon = 1e-12);
    }

    #[test]
    fn graphon_geometry() {
        let one = ModelParams::new(vec![1.0], DMatrix::from_element(1, 1, 0.7), vec![]).unwrap();
        assert!(particle_graphon(&one, 10).iter().all(|&v| v == 0.7));

        let t = theta2([0.5, 0.5], [1.0, 2.0, 3.0]);
        let g = particle_graphon(&t, 4);
        // grid midpoints 0.125, 0.375, 0.625, 0.875
        assert_eq!(g[(0, 0)], 1.0);
        assert_eq!(g[(1, 3)], 2.0);
        assert_eq!(g[(3, 3)], 3.0);
        // labels swapped: same graphon
        assert_eq!(particle_graphon(&t.permuted(&[1, 0]), 4), g);
        assert_eq!(g, g.transpose());
    }

    #[test]
    fn graphon_integral_matches_block_sum() {
        let t = theta2([0.37, 0.63], [0.4, -1.1, 2.5]);
        let grid = 400;
        let g = particle_graphon(&t, grid);
        let riemann = g.sum() / (grid * grid) as f64;
        let exact: f64 = (0..2)
            .flat_map(|a| (0..2).map(move |b| (a, b)))
            .map(|(a, b)| t.nu[a] * t.nu[b] * t.alpha[(a, b)])
            .sum();
        assert!((riemann - exact).abs() < 4.0 * 3.6 / grid as f64);
    }

    #[test]
    fn graphon_mean_is_weighted_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let thetas: Vec<ModelParams> = (0..5)
            .map(|_| {
                let v: f64 = rng.random_range(0.1..0.9);
                theta2([v, 1.0 - v], [rng.random(), rng.random(), rng.random()])
            })
            .collect();
        let w = [0.1, 0.3, 0.2, 0.25, 0.15];
        let est = graphon_mean(&thetas, &w, 16);
        let mut brute = DMatrix::zeros(16, 16);
        for (t, &wm) in thetas.iter().zip(&w) {
            brute += particle_graphon(t, 16) * wm;
        }
        assert!((est.values - brute).abs().max() < 1e-12);
        let single = graphon_mean(&thetas[..1], &[1.0], 16);
        assert_eq!(single.values, particle_graphon(&thetas[0], 16));
    }

    #[test]
    fn latent_coordinate_examples() {
        let one = ModelParams::new(vec![1.0], DMatrix::from_element(1, 1, 0.0), vec![]).unwrap();
        let z = [0usize, 0, 0];
        assert_eq!(latent_coordinates([(&z[..], &one)], &[1.0]), vec![0.5; 3]);

        let t = theta2([0.4, 0.6], [0.0, 0.0, 1.0]);
        let z = [1usize, 0];
        let u = latent_coordinates([(&z[..], &t)], &[1.0]);
        assert_relative_eq!(u[0], 0.7, epsilon = 1e-15);
        assert_relative_eq!(u[1], 0.2, epsilon = 1e-15);

        let t2 = theta2([0.5, 0.5], [2.0, 0.0, 1.0]);
        let u2 = latent_coordinates([(&z[..], &t2)], &[1.0]);
        let avg = latent_coordinates([(&z[..], &t), (&z[..], &t2)], &[0.3, 0.7]);
        for i in 0..2 {
            assert_relative_eq!(avg[i], 0.3 * u[i] + 0.7 * u2[i], epsilon = 1e-12);
        }
    }

    #[test]
    fn mutual_information_examples() {
        let a = [0usize, 0];
        let b = [1usize, 1];
        assert_relative_eq!(mutual_information_estimate(&[&a, &b], &[0.5, 0.5]), 2f64.ln(), epsilon = 1e-12);
        assert_eq!(mutual_information_estimate(&[&a, &a, &a], &[0.2, 0.3, 0.5]), 0.0);

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = 10_000;
        let zs: Vec<Vec<usize>> = (0..m).map(|_| (0..3).map(|_| rng.random_range(0..2)).collect()).collect();
        let refs: Vec<&[usize]> = zs.iter().map(|z| z.as_slice()).collect();
        let mi = mutual_information_estimate(&refs, &vec![1.0 / m as f64; m]);
        assert!(mi <= 0.05 * 3.0);
        assert!(mi >= 0.0);
    }
}
