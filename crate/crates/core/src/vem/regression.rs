//! Weighted Poisson regression over packed `gamma = (alpha, beta)`.
//!
//! For fixed memberships `tau`, the part of the ELBO that depends on `gamma` is
//!
//! `Q(gamma) = sum_{i<j} sum_{a<=b} w_ij^{ab} (Y_ij eta_ij^{ab} - exp(eta_ij^{ab}))`
//!
//! with `eta_ij^{ab} = alpha_ab + x_ij^T beta`, `w_ij^{aa} = tau_ia tau_ja` and
//! `w_ij^{ab} = tau_ia tau_jb + tau_ib tau_ja` for `a < b`.

use nalgebra::{DMatrix, DVector};

use crate::model::{alpha_index, gamma_dim, pairs, ObservedNetwork};

pub struct WeightedPoisson<'a> {
    net: &'a ObservedNetwork,
    k: usize,
    n_alpha: usize,
    /// `[p * n_alpha + alpha_index(a, b)]`
    weights: Vec<f64>,
}

impl<'a> WeightedPoisson<'a> {
    pub fn new(net: &'a ObservedNetwork, tau: &DMatrix<f64>) -> Self {
        let k = tau.ncols();
        let n_alpha = k * (k + 1) / 2;
        let mut weights = vec![0.0; net.n_pairs() * n_alpha];
        for (i, j, p) in pairs(net.n()) {
            let w = &mut weights[p * n_alpha..(p + 1) * n_alpha];
            for a in 0..k {
                w[alpha_index(k, a, a)] += tau[(i, a)] * tau[(j, a)];
                for b in (a + 1)..k {
                    w[alpha_index(k, a, b)] += tau[(i, a)] * tau[(j, b)] + tau[(i, b)] * tau[(j, a)];
                }
            }
        }
        Self {
            net,
            k,
            n_alpha,
            weights,
        }
    }

    pub fn dim(&self) -> usize {
        gamma_dim(self.k, self.net.d())
    }

    fn offsets(&self, gamma: &[f64]) -> Vec<f64> {
        self.net.covariates().offsets(&gamma[self.n_alpha..])
    }

    pub fn objective(&self, gamma: &[f64]) -> f64 {
        let off = self.offsets(gamma);
        let mut q = 0.0;
        for p in 0..self.net.n_pairs() {
            let y = self.net.counts()[p] as f64;
            let w = &self.weights[p * self.n_alpha..(p + 1) * self.n_alpha];
            for (ab, &wab) in w.iter().enumerate() {
                if wab == 0.0 {
                    continue;
                }
                let eta = gamma[ab] + off[p];
                q += wab * (y * eta - eta.exp());
            }
        }
        q
    }

    pub fn gradient(&self, gamma: &[f64]) -> DVector<f64> {
        let d = self.net.d();
        let off = self.offsets(gamma);
        let mut g = DVector::zeros(self.dim());
        for p in 0..self.net.n_pairs() {
            let y = self.net.counts()[p] as f64;
            let w = &self.weights[p * self.n_alpha..(p + 1) * self.n_alpha];
            let mut resid_sum = 0.0;
            for (ab, &wab) in w.iter().enumerate() {
                let r = wab * (y - (gamma[ab] + off[p]).exp());
                g[ab] += r;
                resid_sum += r;
            }
            if d > 0 {
                let x = self.net.covariates().row(p);
                for r in 0..d {
                    g[self.n_alpha + r] += resid_sum * x[r];
                }
            }
        }
        g
    }

    /// Hessian of `Q`; identical to the `gamma` block of the ELBO Hessian.
    pub fn hessian(&self, gamma: &[f64]) -> DMatrix<f64> {
        let d = self.net.d();
        let na = self.n_alpha;
        let off = self.offsets(gamma);
        let mut h = DMatrix::zeros(self.dim(), self.dim());
        for p in 0..self.net.n_pairs() {
            let w = &self.weights[p * na..(p + 1) * na];
            let x = self.net.covariates().row(p);
            let mut rate_sum = 0.0;
            for (ab, &wab) in w.iter().enumerate() {
                let c = wab * (gamma[ab] + off[p]).exp();
                h[(ab, ab)] -= c;
                for r in 0..d {
                    h[(ab, na + r)] -= c * x[r];
                }
                rate_sum += c;
            }
            for r in 0..d {
                for s in r..d {
                    h[(na + r, na + s)] -= rate_sum * x[r] * x[s];
                }
            }
        }
        // mirror the upper triangle so the result is exactly symmetric
        for r in 0..self.dim() {
            for s in (r + 1)..self.dim() {
                h[(s, r)] = h[(r, s)];
            }
        }
        h
    }
}
