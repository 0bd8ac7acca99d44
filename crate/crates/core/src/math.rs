//! Small numeric building blocks shared by the model, the proxy and the sampler.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use statrs::function::gamma::ln_gamma;

use crate::error::{Result, SbmError};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// `log(sum(exp(xs)))`, returning `-inf` for an empty slice or all `-inf` inputs.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    let s: f64 = xs.iter().map(|x| (x - max).exp()).sum();
    max + s.ln()
}

/// Normalizes log weights in place into probabilities and returns `log(sum(exp))`.
pub fn normalize_log_weights(log_w: &[f64], out: &mut [f64]) -> f64 {
    let lse = log_sum_exp(log_w);
    for (o, l) in out.iter_mut().zip(log_w) {
        *o = (l - lse).exp();
    }
    lse
}

/// `log(y!)`.
pub fn ln_factorial(y: u32) -> f64 {
    if y < 2 {
        0.0
    } else {
        ln_gamma(y as f64 + 1.0)
    }
}

/// Dirichlet log-density; `-inf` whenever some coordinate is on the simplex boundary.
pub fn dirichlet_log_pdf(x: &[f64], alpha: &[f64]) -> f64 {
    debug_assert_eq!(x.len(), alpha.len());
    if x.iter().any(|&v| !(v > 0.0)) {
        return f64::NEG_INFINITY;
    }
    let a0: f64 = alpha.iter().sum();
    let mut lp = ln_gamma(a0);
    for (&v, &a) in x.iter().zip(alpha) {
        lp += (a - 1.0) * v.ln() - ln_gamma(a);
    }
    lp
}

/// Draws from a Dirichlet distribution by normalizing independent Gamma variates.
pub fn sample_dirichlet<R: Rng + ?Sized>(alpha: &[f64], rng: &mut R) -> Vec<f64> {
    let mut g: Vec<f64> = alpha
        .iter()
        .map(|&a| {
            Gamma::new(a, 1.0)
                .expect("Dirichlet parameters must be positive")
                .sample(rng)
        })
        .collect();
    let s: f64 = g.iter().sum();
    if s > 0.0 {
        g.iter_mut().for_each(|v| *v /= s);
    } else {
        // every Gamma draw underflowed: fall back to the largest parameter
        let k = argmax(alpha);
        g.iter_mut().for_each(|v| *v = 0.0);
        g[k] = 1.0;
    }
    g
}

/// Draws an index from unnormalized log-probabilities.
pub fn sample_log_categorical<R: Rng + ?Sized>(log_p: &[f64], rng: &mut R) -> usize {
    let max = log_p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let probs: Vec<f64> = log_p.iter().map(|l| (l - max).exp()).collect();
    sample_categorical(&probs, rng)
}

/// Draws an index proportionally to nonnegative (unnormalized) probabilities.
pub fn sample_categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let total: f64 = probs.iter().sum();
    let u = rng.random::<f64>() * total;
    let mut acc = 0.0;
    for (k, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return k;
        }
    }
    // rounding at the top end
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// SplitMix64 finalizer, used to derive independent stream seeds.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A reproducible generator for the stream identified by `(seed, a, b)`.
///
/// Streams depend only on the key, so work scheduled across threads draws the
/// same numbers regardless of execution order.
pub fn stream_rng(seed: u64, a: u64, b: u64) -> ChaCha8Rng {
    let key = mix64(mix64(mix64(seed) ^ a.wrapping_mul(0xD6E8_FEB8_6659_FD93)) ^ b);
    ChaCha8Rng::seed_from_u64(key)
}

/// Multivariate normal with a cached Cholesky factor.
#[derive(Debug, Clone)]
pub struct Gaussian {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
    log_det: f64,
}

impl Gaussian {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        if cov.nrows() != mean.len() || cov.ncols() != mean.len() {
            return Err(SbmError::Dimension(format!(
                "covariance is {}x{}, mean has length {}",
                cov.nrows(),
                cov.ncols(),
                mean.len()
            )));
        }
        if !is_symmetric(&cov, 1e-9) {
            return Err(SbmError::InvalidParameter(
                "covariance matrix is not symmetric".into(),
            ));
        }
        let chol = Cholesky::new(cov.clone()).ok_or_else(|| {
            SbmError::NotPositiveDefinite("Cholesky factorization of covariance failed".into())
        })?;
        let log_det = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        Ok(Self {
            mean,
            cov,
            chol,
            log_det,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    /// Lower-triangular Cholesky factor of the covariance.
    pub fn chol_l(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    pub fn precision(&self) -> DMatrix<f64> {
        self.chol.inverse()
    }

    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    /// `(x - mean)^T cov^{-1} (x - mean)`.
    pub fn mahalanobis_sq(&self, x: &[f64]) -> f64 {
        let diff = DVector::from_iterator(x.len(), x.iter().zip(self.mean.iter()).map(|(a, b)| a - b));
        let l = self.chol.l_dirty();
        let z = l
            .solve_lower_triangular(&diff)
            .expect("Cholesky factor has a nonzero diagonal");
        z.norm_squared()
    }

    pub fn log_pdf(&self, x: &[f64]) -> f64 {
        -0.5 * (self.dim() as f64 * LN_2PI + self.log_det + self.mahalanobis_sq(x))
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let z = DVector::from_iterator(
            self.dim(),
            (0..self.dim()).map(|_| rng.sample::<f64, _>(StandardNormal)),
        );
        let x = &self.mean + self.chol.l_dirty().lower_triangle() * z;
        x.iter().copied().collect()
    }
}

pub fn is_symmetric(m: &DMatrix<f64>, tol: f64) -> bool {
    if m.nrows() != m.ncols() {
        return false;
    }
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let scale = 1.0_f64.max(m[(i, j)].abs()).max(m[(j, i)].abs());
            if (m[(i, j)] - m[(j, i)]).abs() > tol * scale {
                return false;
            }
        }
    }
    true
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}
