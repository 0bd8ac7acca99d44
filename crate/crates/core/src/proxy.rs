//! Factorized approximation of the posterior built from a variational fit.
//!
//! `p~(Z, theta) = prod_i tau_{i Z_i} * N(gamma; mean, cov) * Dir(nu; e0 + N~)`, where the
//! Gaussian combines the prior on `gamma` with a second-order expansion of the ELBO
//! around the variational estimate.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SbmError};
use crate::math::{self, Gaussian};
use crate::model::{LatentAssignment, ModelParams, ObservedNetwork, PriorHyper};
use crate::vem::{regression::WeightedPoisson, VariationalFit};

const TAU_FLOOR: f64 = 1e-12;
const EIG_FLOOR: f64 = 1e-10;
const RIDGE: f64 = 1e-8;

/// Second derivative of the ELBO with respect to packed `gamma = (alpha, beta)`.
pub fn hessian_gamma(net: &ObservedNetwork, theta: &ModelParams, tau: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if tau.nrows() != net.n() || tau.ncols() != theta.k() {
        return Err(SbmError::Dimension(format!(
            "tau is {}x{}, expected {}x{}",
            tau.nrows(),
            tau.ncols(),
            net.n(),
            theta.k()
        )));
    }
    let h = WeightedPoisson::new(net, tau).hessian(&theta.gamma());
    if h.iter().any(|v| !v.is_finite()) {
        return Err(SbmError::NonFinite("ELBO Hessian".into()));
    }
    Ok(h)
}

/// Second derivative of the ELBO with respect to `nu`, treating the coordinates as
/// free: `diag(-N~_k / nu_k^2)`. The proxy does not use it; the Dirichlet factor
/// plays that role.
pub fn hessian_nu(tau: &DMatrix<f64>, nu: &[f64]) -> DMatrix<f64> {
    let nt = crate::vem::n_tilde(tau);
    DMatrix::from_fn(nu.len(), nu.len(), |a, b| if a == b { -nt[a] / (nu[a] * nu[a]) } else { 0.0 })
}

/// Makes `-hessian` safely positive definite. Returns the ridge that was added
/// (zero when none was needed).
pub fn repair_precision(precision: &mut DMatrix<f64>) -> f64 {
    let dim = precision.nrows();
    if dim == 0 {
        return 0.0;
    }
    let min_eig = SymmetricEigen::new(precision.clone()).eigenvalues.min();
    if min_eig >= EIG_FLOOR {
        return 0.0;
    }
    let ridge = RIDGE + min_eig.abs();
    for i in 0..dim {
        precision[(i, i)] += ridge;
    }
    ridge
}

/// Gaussian combination of the prior `N(gamma0, V0)` with a data term of the given
/// precision centered at `gamma_tilde`. Returns `(mean, cov)`.
pub fn combine_gaussian(
    gamma0: &DVector<f64>,
    v0: &DMatrix<f64>,
    gamma_tilde: &DVector<f64>,
    data_precision: &DMatrix<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let v0_inv = v0
        .clone()
        .cholesky()
        .ok_or_else(|| SbmError::NotPositiveDefinite("prior covariance".into()))?
        .inverse();
    let precision = math::symmetrize(&(&v0_inv + data_precision));
    let ch = precision
        .clone()
        .cholesky()
        .ok_or_else(|| SbmError::NotPositiveDefinite("proxy precision".into()))?;
    let cov = math::symmetrize(&ch.inverse());
    let rhs = &v0_inv * gamma0 + data_precision * gamma_tilde;
    let mean = ch.solve(&rhs);
    Ok((mean, cov))
}

/// The approximate posterior used as the starting point of the tempering path.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "ProxyRepr", into = "ProxyRepr")]
pub struct ProxyPosterior {
    tau: DMatrix<f64>,
    log_tau: DMatrix<f64>,
    gamma: Gaussian,
    dirichlet_param: Vec<f64>,
    d: usize,
    warnings: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct ProxyRepr {
    tau: Vec<Vec<f64>>,
    gamma_mean: Vec<f64>,
    gamma_cov: Vec<Vec<f64>>,
    dirichlet_param: Vec<f64>,
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

fn from_rows(r: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>> {
    let nrows = r.len();
    let ncols = r.first().map_or(0, |x| x.len());
    if r.iter().any(|x| x.len() != ncols) {
        return Err(SbmError::Dimension(format!("{what} has ragged rows")));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| r[i][j]))
}

impl TryFrom<ProxyRepr> for ProxyPosterior {
    type Error = SbmError;

    fn try_from(r: ProxyRepr) -> Result<Self> {
        let tau = from_rows(&r.tau, "tau")?;
        let cov = from_rows(&r.gamma_cov, "gamma_cov")?;
        let k = tau.ncols();
        if r.dirichlet_param.len() != k {
            return Err(SbmError::Dimension(format!(
                "dirichlet_param has length {}, tau has {k} columns",
                r.dirichlet_param.len()
            )));
        }
        let n_alpha = k * (k + 1) / 2;
        if r.gamma_mean.len() < n_alpha {
            return Err(SbmError::Dimension("gamma_mean shorter than the block effects".into()));
        }
        let d = r.gamma_mean.len() - n_alpha;
        let gamma = Gaussian::new(DVector::from_vec(r.gamma_mean), cov)?;
        Self::from_parts(tau, gamma, r.dirichlet_param, d, Vec::new())
    }
}

impl From<ProxyPosterior> for ProxyRepr {
    fn from(p: ProxyPosterior) -> Self {
        Self {
            tau: rows(&p.tau),
            gamma_mean: p.gamma.mean().iter().copied().collect(),
            gamma_cov: rows(p.gamma.cov()),
            dirichlet_param: p.dirichlet_param,
        }
    }
}

/// Clips memberships to `[1e-12, 1 - 1e-12]` and renormalizes rows.
pub fn floor_tau(tau: &DMatrix<f64>) -> DMatrix<f64> {
    let mut t = tau.map(|v| v.clamp(TAU_FLOOR, 1.0 - TAU_FLOOR));
    if t.ncols() == 1 {
        t.fill(1.0);
        return t;
    }
    for i in 0..t.nrows() {
        let s = t.row(i).sum();
        t.row_mut(i).iter_mut().for_each(|v| *v /= s);
    }
    t
}

impl ProxyPosterior {
    pub fn from_parts(
        tau: DMatrix<f64>,
        gamma: Gaussian,
        dirichlet_param: Vec<f64>,
        d: usize,
        warnings: Vec<String>,
    ) -> Result<Self> {
        let k = tau.ncols();
        if gamma.dim() != k * (k + 1) / 2 + d {
            return Err(SbmError::Dimension(format!(
                "gamma has dimension {}, expected {}",
                gamma.dim(),
                k * (k + 1) / 2 + d
            )));
        }
        if dirichlet_param.iter().any(|&a| !(a > 0.0 && a.is_finite())) {
            return Err(SbmError::InvalidParameter("Dirichlet parameters must be positive".into()));
        }
        if tau.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(SbmError::InvalidParameter("tau entries must be nonnegative".into()));
        }
        let tau = floor_tau(&tau);
        Ok(Self {
            log_tau: tau.map(f64::ln),
            tau,
            gamma,
            dirichlet_param,
            d,
            warnings,
        })
    }

    pub fn n(&self) -> usize {
        self.tau.nrows()
    }

    pub fn k(&self) -> usize {
        self.tau.ncols()
    }

    pub fn d(&self) -> usize {
        self.d
    }

    /// Floored memberships.
    pub fn tau(&self) -> &DMatrix<f64> {
        &self.tau
    }

    pub fn log_tau(&self, i: usize, k: usize) -> f64 {
        self.log_tau[(i, k)]
    }

    pub fn gamma(&self) -> &Gaussian {
        &self.gamma
    }

    pub fn gamma_mean(&self) -> &DVector<f64> {
        self.gamma.mean()
    }

    pub fn gamma_cov(&self) -> &DMatrix<f64> {
        self.gamma.cov()
    }

    pub fn dirichlet_param(&self) -> &[f64] {
        &self.dirichlet_param
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    /// `log p~(Z, theta)`.
    pub fn log_density(&self, z: &[usize], theta: &ModelParams) -> f64 {
        let lz: f64 = z.iter().enumerate().map(|(i, &k)| self.log_tau[(i, k)]).sum();
        lz + self.gamma.log_pdf(&theta.gamma()) + math::dirichlet_log_pdf(&theta.nu, &self.dirichlet_param)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (LatentAssignment, ModelParams) {
        let k = self.k();
        let z: Vec<usize> = (0..self.n())
            .map(|i| {
                let row: Vec<f64> = self.tau.row(i).iter().copied().collect();
                math::sample_categorical(&row, rng)
            })
            .collect();
        let gamma = self.gamma.sample(rng);
        let nu = math::sample_dirichlet(&self.dirichlet_param, rng);
        let (alpha, beta) = crate::model::gamma_unpack(&gamma, k, self.d).expect("dimension checked at construction");
        (LatentAssignment(z), ModelParams { nu, alpha, beta })
    }
}

/// Builds the approximate posterior from a variational fit.
///
/// The ELBO is expanded to second order in `gamma` around the fit, the expansion is
/// combined with the Gaussian prior, proportions get the conjugate Dirichlet update
/// and memberships keep their variational probabilities.
pub fn build_proxy(net: &ObservedNetwork, fit: &VariationalFit, hyper: &PriorHyper) -> Result<ProxyPosterior> {
    assemble(net, fit, hyper, false)
}

/// Like [`build_proxy`] for a fit of the penalized objective (see
/// [`crate::vem::fit_map`]): the expansion point is not a stationary point of the
/// ELBO, so its gradient enters the Gaussian mean, which then sits at the fit.
pub fn build_proxy_map(net: &ObservedNetwork, fit: &VariationalFit, hyper: &PriorHyper) -> Result<ProxyPosterior> {
    assemble(net, fit, hyper, true)
}

fn assemble(net: &ObservedNetwork, fit: &VariationalFit, hyper: &PriorHyper, with_gradient: bool) -> Result<ProxyPosterior> {
    hyper.check_params(&fit.theta)?;
    let h = hessian_gamma(net, &fit.theta, &fit.tau)?;
    let mut precision = -h;
    let mut warnings = Vec::new();
    let ridge = repair_precision(&mut precision);
    if ridge > 0.0 {
        let msg = format!("ELBO Hessian not negative definite; ridge {ridge:.3e} added");
        log::warn!("{msg}");
        warnings.push(msg);
    }
    let gamma = fit.theta.gamma();
    let mut center = DVector::from_column_slice(&gamma);
    if with_gradient {
        // J(g) ~ J(c) + grad'(g - c) - (g - c)' P (g - c) / 2 is a Gaussian centered at c + P^-1 grad
        let grad = WeightedPoisson::new(net, &fit.tau).gradient(&gamma);
        let shift = precision
            .clone()
            .cholesky()
            .ok_or_else(|| SbmError::NotPositiveDefinite("ELBO precision".into()))?
            .solve(&grad);
        center += shift;
    }
    let (mean, cov) = combine_gaussian(hyper.gamma_prior().mean(), &hyper.v0, &center, &precision)?;
    let dirichlet_param: Vec<f64> = hyper.e0.iter().zip(&fit.n_tilde).map(|(e, n)| e + n).collect();
    ProxyPosterior::from_parts(
        fit.tau.clone(),
        Gaussian::new(mean, cov)?,
        dirichlet_param,
        net.d(),
        warnings,
    )
}

pub fn proxy_log_density(p: &ProxyPosterior, z: &[usize], theta: &ModelParams) -> f64 {
    p.log_density(z, theta)
}

pub fn proxy_sample<R: Rng + ?Sized>(p: &ProxyPosterior, rng: &mut R) -> (LatentAssignment, ModelParams) {
    p.sample(rng)
}
