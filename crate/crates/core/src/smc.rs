//! Adaptive tempered sequential Monte Carlo from a reference distribution to the
//! exact posterior `p(Z, theta | Y)`.
//!
//! The path is geometric: `log pi_rho = log ref + rho * log r` with
//! `r = pi(theta) p_theta(Y, Z) / ref(Z, theta)`. The reference is either the
//! variational proxy or the prior `pi(theta) p_theta(Z)`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SbmError};
use crate::math::{self, stream_rng};
use crate::model::{
    self, complete_log_likelihood_with_offsets, data_log_likelihood_with_offsets, pair_index,
    LatentAssignment, ModelParams, ObservedNetwork, PriorHyper,
};
use crate::posterior::mutual_information_estimate;
use crate::proxy::ProxyPosterior;

/// Smallest admissible temperature increment.
pub const RHO_FLOOR: f64 = 1e-10;
const TARGET_ACCEPTANCE: f64 = 0.234;
const RESAMPLE_STREAM: u64 = u64::MAX;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SmcConfig {
    /// Number of particles `M`.
    pub particles: usize,
    /// Fraction of `M` the conditional ESS must keep when choosing the next temperature.
    pub cess_fraction: f64,
    /// Resample when `ESS < ess_fraction * M`.
    pub ess_fraction: f64,
    /// Kernel sweeps per temperature.
    pub sweeps: usize,
    /// Absolute tolerance of the temperature bisection.
    pub rho_tol: f64,
    pub seed: u64,
    /// Guard against runs that never reach `rho = 1`.
    pub max_steps: usize,
}

impl Default for SmcConfig {
    fn default() -> Self {
        Self {
            particles: 2000,
            cess_fraction: 0.9,
            ess_fraction: 0.8,
            sweeps: 3,
            rho_tol: 1e-8,
            seed: 0,
            max_steps: 100_000,
        }
    }
}

impl SmcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.particles < 2 {
            return Err(SbmError::InvalidParameter("at least 2 particles are required".into()));
        }
        for (name, v) in [("cess_fraction", self.cess_fraction), ("ess_fraction", self.ess_fraction)] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(SbmError::InvalidParameter(format!("{name} must lie in (0, 1], got {v}")));
            }
        }
        if !(self.rho_tol > 0.0) {
            return Err(SbmError::InvalidParameter("rho_tol must be positive".into()));
        }
        Ok(())
    }
}

/// Where the tempering path starts.
#[derive(Debug, Clone, Copy)]
pub enum StartDistribution<'a> {
    Proxy(&'a ProxyPosterior),
    /// `pi(theta) p_theta(Z)`.
    Prior,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Particle {
    pub z: LatentAssignment,
    pub theta: ModelParams,
    /// `log r(Z, theta)`.
    pub log_r: f64,
}

/// One row of the tempering trace. Row 0 describes the initial system at `rho = 0`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TemperStep {
    pub h: usize,
    pub rho: f64,
    pub cess: f64,
    pub ess: f64,
    pub resampled: bool,
    pub floor_increment: bool,
    pub log_evidence_increment: f64,
    /// Mean acceptance rate of the `gamma` random-walk moves.
    pub acceptance: f64,
    pub proposal_scale: f64,
    pub mutual_information: f64,
    /// `sum_m W_m log r_m` after the move.
    pub mean_log_r: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TemperTrace {
    pub steps: Vec<TemperStep>,
}

impl TemperTrace {
    /// Number of tempering steps `H`.
    pub fn len(&self) -> usize {
        self.steps.len().saturating_sub(1)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn rhos(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.rho).collect()
    }
}

#[derive(Debug, Clone)]
pub struct SmcOutput {
    pub particles: Vec<Particle>,
    /// Normalized weights.
    pub weights: Vec<f64>,
    pub trace: TemperTrace,
    pub log_evidence: f64,
    pub log_evidence_path: f64,
    pub warnings: Vec<String>,
}

impl SmcOutput {
    pub fn steps(&self) -> usize {
        self.trace.len()
    }
}

/// `log ref(Z, theta)` for the chosen start.
pub fn log_reference(start: &StartDistribution, hyper: &PriorHyper, z: &[usize], theta: &ModelParams) -> f64 {
    match start {
        StartDistribution::Proxy(p) => p.log_density(z, theta),
        StartDistribution::Prior => {
            model::log_prior(theta, hyper) + z.iter().map(|&k| theta.nu[k].ln()).sum::<f64>()
        }
    }
}

/// `log pi(theta) + log p_theta(Y, Z)`.
pub fn log_target(net: &ObservedNetwork, hyper: &PriorHyper, z: &[usize], theta: &ModelParams) -> f64 {
    model::log_prior(theta, hyper) + model::complete_log_likelihood(net, z, theta)
}

pub fn log_ratio(
    net: &ObservedNetwork,
    start: &StartDistribution,
    hyper: &PriorHyper,
    z: &[usize],
    theta: &ModelParams,
) -> f64 {
    match start {
        // the prior factors cancel exactly
        StartDistribution::Prior => {
            let off = net.covariates().offsets(&theta.beta);
            data_log_likelihood_with_offsets(net, z, &theta.alpha, &off)
        }
        StartDistribution::Proxy(_) => log_target(net, hyper, z, theta) - log_reference(start, hyper, z, theta),
    }
}

/// Unnormalized log-density of the intermediate distribution at temperature `rho`.
pub fn tempered_log_density(
    rho: f64,
    start: &StartDistribution,
    hyper: &PriorHyper,
    net: &ObservedNetwork,
    z: &[usize],
    theta: &ModelParams,
) -> f64 {
    let lref = log_reference(start, hyper, z, theta);
    let ltarget = log_target(net, hyper, z, theta);
    (1.0 - rho) * lref + rho * ltarget
}

/// Conditional effective sample size for moving from `rho_prev` to `rho`.
pub fn cess(rho: f64, rho_prev: f64, weights: &[f64], log_r: &[f64]) -> f64 {
    let delta = rho - rho_prev;
    let m = weights.len() as f64;
    if delta == 0.0 {
        return m;
    }
    let mut a = Vec::with_capacity(weights.len());
    let mut b = Vec::with_capacity(weights.len());
    for (&w, &lr) in weights.iter().zip(log_r) {
        if w > 0.0 {
            a.push(w.ln() + delta * lr);
            b.push(w.ln() + 2.0 * delta * lr);
        }
    }
    let v = m * (2.0 * math::log_sum_exp(&a) - math::log_sum_exp(&b)).exp();
    v.min(m)
}

/// Next temperature: the largest `rho` with `cess >= fraction * M`, found by
/// bisection. The second value is true when only the floor increment was possible.
pub fn find_next_rho(rho_prev: f64, weights: &[f64], log_r: &[f64], fraction: f64, tol: f64) -> (f64, bool) {
    let target = fraction * weights.len() as f64;
    if cess(1.0, rho_prev, weights, log_r) >= target {
        return (1.0, false);
    }
    let mut lo = (rho_prev + RHO_FLOOR).min(1.0);
    if cess(lo, rho_prev, weights, log_r) < target {
        return (lo, true);
    }
    // invariant: cess(lo) >= target > cess(hi)
    let mut hi = 1.0;
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        if cess(mid, rho_prev, weights, log_r) >= target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    (lo, false)
}

/// `(sum W)^2 / sum W^2`.
pub fn ess(weights: &[f64]) -> f64 {
    let s: f64 = weights.iter().sum();
    let s2: f64 = weights.iter().map(|w| w * w).sum();
    s * s / s2
}

/// Multiplies normalized weights by `r^delta`; returns the new normalized weights
/// and `log sum_m W_m r_m^delta`.
pub fn reweight(weights: &[f64], log_r: &[f64], delta: f64) -> (Vec<f64>, f64) {
    let lw: Vec<f64> = weights
        .iter()
        .zip(log_r)
        .map(|(&w, &lr)| if w > 0.0 { w.ln() + delta * lr } else { f64::NEG_INFINITY })
        .collect();
    let mut out = vec![0.0; lw.len()];
    let lse = math::normalize_log_weights(&lw, &mut out);
    (out, lse)
}

/// Ancestor indices of `M` iid draws from the weighted empirical distribution.
pub fn resample_multinomial<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> Vec<usize> {
    resample_multinomial_n(weights, weights.len(), rng)
}

/// `count` multinomial draws of indices with probabilities proportional to `weights`.
pub fn resample_multinomial_n<R: Rng + ?Sized>(weights: &[f64], count: usize, rng: &mut R) -> Vec<usize> {
    let m = weights.len();
    let mut cdf = Vec::with_capacity(m);
    let mut acc = 0.0;
    for &w in weights {
        acc += w;
        cdf.push(acc);
    }
    (0..count)
        .map(|_| {
            let u = rng.random::<f64>() * acc;
            cdf.partition_point(|&c| c <= u).min(m - 1)
        })
        .collect()
}

/// Random-walk proposal for `gamma`: `gamma' = gamma + chol * eps`.
#[derive(Debug, Clone)]
pub struct GammaProposal {
    chol: DMatrix<f64>,
}

impl GammaProposal {
    /// Covariance `(2.38^2 / dim) * scale * cov`.
    pub fn new(cov: &DMatrix<f64>, scale: f64) -> Result<Self> {
        let dim = cov.nrows();
        let c = cov * (2.38 * 2.38 / dim.max(1) as f64 * scale);
        let chol = c
            .cholesky()
            .ok_or_else(|| SbmError::NotPositiveDefinite("proposal covariance".into()))?
            .l();
        Ok(Self { chol })
    }

    fn propose<R: Rng + ?Sized>(&self, gamma: &[f64], rng: &mut R) -> Vec<f64> {
        let dim = gamma.len();
        let eps = DVector::from_iterator(dim, (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)));
        let step = &self.chol * eps;
        gamma.iter().zip(step.iter()).map(|(g, s)| g + s).collect()
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct KernelStats {
    pub accepted: usize,
    pub proposed: usize,
}

/// Log-density of the `gamma` coordinates at temperature `rho` (terms constant in
/// `gamma` are dropped).
fn gamma_log_density(
    rho: f64,
    start: &StartDistribution,
    hyper: &PriorHyper,
    net: &ObservedNetwork,
    z: &[usize],
    gamma: &[f64],
) -> f64 {
    let (alpha, beta) = model::gamma_unpack(gamma, hyper.k(), hyper.d()).expect("gamma dimension");
    let prior = hyper.gamma_prior().log_pdf(gamma);
    let off = net.covariates().offsets(&beta);
    let ll = data_log_likelihood_with_offsets(net, z, &alpha, &off);
    let reference = match start {
        StartDistribution::Proxy(p) => p.gamma().log_pdf(gamma),
        StartDistribution::Prior => prior,
    };
    (1.0 - rho) * reference + rho * (prior + ll)
}

/// Systematic-scan Gibbs update of every membership at temperature `rho`.
pub fn update_memberships<R: Rng + ?Sized>(
    rho: f64,
    start: &StartDistribution,
    net: &ObservedNetwork,
    z: &mut [usize],
    theta: &ModelParams,
    rng: &mut R,
) -> Result<()> {
    let n = net.n();
    let k = theta.k();
    if k == 1 {
        return Ok(());
    }
    let counts = net.counts();
    let off = net.covariates().offsets(&theta.beta);
    let exp_off: Vec<f64> = off.iter().map(|o| o.exp()).collect();
    let exp_alpha = theta.alpha.map(f64::exp);
    let log_nu: Vec<f64> = theta.nu.iter().map(|v| v.ln()).collect();
    let mut log_p = vec![0.0; k];
    for i in 0..n {
        for (c, lp) in log_p.iter_mut().enumerate() {
            let mut ll = 0.0;
            for j in 0..n {
                if j == i {
                    continue;
                }
                let p = pair_index(n, i, j);
                ll += counts[p] as f64 * theta.alpha[(c, z[j])] - exp_alpha[(c, z[j])] * exp_off[p];
            }
            *lp = match start {
                StartDistribution::Proxy(px) => (1.0 - rho) * px.log_tau(i, c) + rho * (log_nu[c] + ll),
                StartDistribution::Prior => log_nu[c] + rho * ll,
            };
        }
        if log_p.iter().any(|v| v.is_nan()) || log_p.iter().all(|&v| v == f64::NEG_INFINITY) {
            return Err(SbmError::NonFinite(format!("tempered membership conditional of node {}", i + 1)));
        }
        z[i] = math::sample_log_categorical(&log_p, rng);
    }
    Ok(())
}

/// Dirichlet parameter of the tempered conditional of `nu` given `Z`.
pub fn nu_conditional_param(rho: f64, start: &StartDistribution, hyper: &PriorHyper, z: &[usize]) -> Vec<f64> {
    let k = hyper.k();
    let nz = model::block_counts(z, k);
    (0..k)
        .map(|c| {
            let target = hyper.e0[c] + nz[c] as f64;
            match start {
                StartDistribution::Proxy(px) => (1.0 - rho) * px.dirichlet_param()[c] + rho * target,
                StartDistribution::Prior => target,
            }
        })
        .collect()
}

/// Exact Gibbs update of `nu`.
pub fn update_proportions<R: Rng + ?Sized>(
    rho: f64,
    start: &StartDistribution,
    hyper: &PriorHyper,
    z: &[usize],
    theta: &mut ModelParams,
    rng: &mut R,
) {
    if hyper.k() > 1 {
        theta.nu = math::sample_dirichlet(&nu_conditional_param(rho, start, hyper, z), rng);
    }
}

/// One random-walk Metropolis update of `gamma`; returns whether it was accepted.
#[allow(clippy::too_many_arguments)]
pub fn update_gamma<R: Rng + ?Sized>(
    rho: f64,
    start: &StartDistribution,
    hyper: &PriorHyper,
    net: &ObservedNetwork,
    z: &[usize],
    theta: &mut ModelParams,
    proposal: &GammaProposal,
    rng: &mut R,
) -> Result<bool> {
    let gamma = theta.gamma();
    let current = gamma_log_density(rho, start, hyper, net, z, &gamma);
    if !current.is_finite() {
        return Err(SbmError::NonFinite("tempered density at the current state".into()));
    }
    let cand = proposal.propose(&gamma, rng);
    let proposed = gamma_log_density(rho, start, hyper, net, z, &cand);
    if proposed.is_finite() && rng.random::<f64>().ln() < proposed - current {
        let (alpha, beta) = model::gamma_unpack(&cand, hyper.k(), hyper.d())?;
        theta.alpha = alpha;
        theta.beta = beta;
        return Ok(true);
    }
    Ok(false)
}

/// One application of the tempered kernel: `sweeps` rounds of Gibbs on `Z`, Gibbs
/// on `nu` and random-walk Metropolis on `gamma`. Leaves `pi_rho` invariant and
/// refreshes `log_r`.
#[allow(clippy::too_many_arguments)]
pub fn kernel_step<R: Rng + ?Sized>(
    rho: f64,
    start: &StartDistribution,
    hyper: &PriorHyper,
    net: &ObservedNetwork,
    particle: &mut Particle,
    sweeps: usize,
    proposal: &GammaProposal,
    rng: &mut R,
) -> Result<KernelStats> {
    let mut stats = KernelStats::default();
    let Particle { z, theta, .. } = particle;
    for _ in 0..sweeps {
        update_memberships(rho, start, net, &mut z.0, theta, rng)?;
        update_proportions(rho, start, hyper, z, theta, rng);
        stats.proposed += 1;
        if update_gamma(rho, start, hyper, net, z, theta, proposal, rng)? {
            stats.accepted += 1;
        }
    }
    particle.log_r = log_ratio(net, start, hyper, &particle.z, &particle.theta);
    Ok(stats)
}

/// Weighted empirical covariance of the particles' `gamma`, with a small ridge.
fn particle_gamma_cov(particles: &[Particle], weights: &[f64]) -> DMatrix<f64> {
    let dim = particles[0].theta.gamma_dim();
    let gammas: Vec<DVector<f64>> = particles.iter().map(|p| DVector::from_vec(p.theta.gamma())).collect();
    let mut mean = DVector::zeros(dim);
    for (g, &w) in gammas.iter().zip(weights) {
        mean += g * w;
    }
    let mut cov = DMatrix::zeros(dim, dim);
    for (g, &w) in gammas.iter().zip(weights) {
        let c = g - &mean;
        cov += &c * c.transpose() * w;
    }
    let scale = cov.diagonal().max().max(1e-6);
    cov + DMatrix::identity(dim, dim) * (1e-6 * scale)
}

fn initial_particles(
    net: &ObservedNetwork,
    start: &StartDistribution,
    hyper: &PriorHyper,
    cfg: &SmcConfig,
) -> Vec<Particle> {
    (0..cfg.particles)
        .into_par_iter()
        .map(|m| {
            let mut rng = stream_rng(cfg.seed, 0, m as u64);
            let (z, theta) = match start {
                StartDistribution::Proxy(p) => p.sample(&mut rng),
                StartDistribution::Prior => {
                    let theta = hyper.sample(&mut rng);
                    let z = (0..net.n()).map(|_| math::sample_categorical(&theta.nu, &mut rng)).collect();
                    (LatentAssignment(z), theta)
                }
            };
            let log_r = log_ratio(net, start, hyper, &z, &theta);
            Particle { z, theta, log_r }
        })
        .collect()
}

fn mean_log_r(particles: &[Particle], weights: &[f64]) -> f64 {
    particles.iter().zip(weights).map(|(p, w)| w * p.log_r).sum()
}

fn mi_of(particles: &[Particle], weights: &[f64]) -> f64 {
    let zs: Vec<&[usize]> = particles.iter().map(|p| p.z.labels()).collect();
    mutual_information_estimate(&zs, weights)
}

/// Runs the sampler from `start` to the posterior.
pub fn run_smc(
    net: &ObservedNetwork,
    start: StartDistribution,
    hyper: &PriorHyper,
    cfg: &SmcConfig,
) -> Result<SmcOutput> {
    cfg.validate()?;
    if hyper.d() != net.d() {
        return Err(SbmError::Dimension(format!(
            "prior has {} regression coefficients, network has {} covariates",
            hyper.d(),
            net.d()
        )));
    }
    if let StartDistribution::Proxy(p) = start {
        if p.n() != net.n() || p.k() != hyper.k() || p.d() != net.d() {
            return Err(SbmError::Dimension("proxy does not match the network or prior".into()));
        }
    }
    let m = cfg.particles;
    let mut warnings = Vec::new();
    let mut particles = initial_particles(net, &start, hyper, cfg);
    if let Some(p) = particles.iter().find(|p| p.log_r.is_nan() || p.log_r == f64::INFINITY) {
        return Err(SbmError::NonFinite(format!("initial log ratio {}", p.log_r)));
    }
    let mut weights = vec![1.0 / m as f64; m];
    let mut trace = TemperTrace {
        steps: vec![TemperStep {
            h: 0,
            rho: 0.0,
            cess: m as f64,
            ess: m as f64,
            resampled: false,
            floor_increment: false,
            log_evidence_increment: 0.0,
            acceptance: f64::NAN,
            proposal_scale: 1.0,
            mutual_information: mi_of(&particles, &weights),
            mean_log_r: mean_log_r(&particles, &weights),
        }],
    };
    let mut rho = 0.0;
    let mut log_scale: f64 = 0.0;
    let mut h = 0;
    while rho < 1.0 {
        h += 1;
        if h > cfg.max_steps {
            return Err(SbmError::Stalled(format!(
                "temperature {rho:.3e} after {} steps",
                cfg.max_steps
            )));
        }
        let log_r: Vec<f64> = particles.iter().map(|p| p.log_r).collect();
        let (next, floored) = find_next_rho(rho, &weights, &log_r, cfg.cess_fraction, cfg.rho_tol);
        if floored {
            let msg = format!("step {h}: degenerate ratios, temperature advanced by the floor increment");
            log::warn!("{msg}");
            warnings.push(msg);
        }
        let step_cess = cess(next, rho, &weights, &log_r);
        let (new_w, incr) = reweight(&weights, &log_r, next - rho);
        if !incr.is_finite() {
            return Err(SbmError::NonFinite(format!("log evidence increment at step {h}")));
        }
        weights = new_w;
        rho = next;
        let step_ess = ess(&weights);
        let resampled = step_ess < cfg.ess_fraction * m as f64;
        if resampled {
            let idx = resample_multinomial(&weights, &mut stream_rng(cfg.seed, h as u64, RESAMPLE_STREAM));
            particles = idx.iter().map(|&a| particles[a].clone()).collect();
            weights = vec![1.0 / m as f64; m];
        }

        let cov = particle_gamma_cov(&particles, &weights);
        let scale = log_scale.exp();
        let proposal = GammaProposal::new(&cov, scale)?;
        let stats: Vec<Result<KernelStats>> = particles
            .par_iter_mut()
            .enumerate()
            .map(|(i, p)| {
                let mut rng = stream_rng(cfg.seed, h as u64, i as u64);
                kernel_step(rho, &start, hyper, net, p, cfg.sweeps, &proposal, &mut rng)
            })
            .collect();
        let mut acc = 0usize;
        let mut prop = 0usize;
        for s in stats {
            let s = s?;
            acc += s.accepted;
            prop += s.proposed;
        }
        let acceptance = if prop > 0 { acc as f64 / prop as f64 } else { f64::NAN };
        if acceptance.is_finite() {
            log_scale += (acceptance - TARGET_ACCEPTANCE) / (h as f64).powf(0.6);
        }
        trace.steps.push(TemperStep {
            h,
            rho,
            cess: step_cess,
            ess: step_ess,
            resampled,
            floor_increment: floored,
            log_evidence_increment: incr,
            acceptance,
            proposal_scale: scale,
            mutual_information: mi_of(&particles, &weights),
            mean_log_r: mean_log_r(&particles, &weights),
        });
        log::debug!("step {h}: rho={rho:.6} ess={step_ess:.1} acc={acceptance:.3}");
    }
    Ok(SmcOutput {
        log_evidence: log_evidence_product(&trace),
        log_evidence_path: log_evidence_path_sampling(&trace),
        particles,
        weights,
        trace,
        warnings,
    })
}

/// `sum_h log sum_m W_{h-1} r_{h-1}^{rho_h - rho_{h-1}}`.
pub fn log_evidence_product(trace: &TemperTrace) -> f64 {
    trace.steps.iter().skip(1).map(|s| s.log_evidence_increment).sum()
}

/// Trapezoidal path-sampling estimate `sum_h (rho_h - rho_{h-1}) (U_h + U_{h-1}) / 2`.
pub fn log_evidence_path_sampling(trace: &TemperTrace) -> f64 {
    trace
        .steps
        .windows(2)
        .map(|w| 0.5 * (w[1].rho - w[0].rho) * (w[1].mean_log_r + w[0].mean_log_r))
        .sum()
}

/// Complete log-likelihood used by particle diagnostics.
pub fn particle_log_joint(net: &ObservedNetwork, hyper: &PriorHyper, p: &Particle) -> f64 {
    let off = net.covariates().offsets(&p.theta.beta);
    model::log_prior(&p.theta, hyper) + complete_log_likelihood_with_offsets(net, &p.z, &p.theta, &off)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{simulate, Covariates};
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn cess_examples() {
        let w = [0.5, 0.5];
        let lr = [0.0, 4f64.ln()];
        assert_eq!(cess(0.3, 0.3, &w, &lr), 2.0);
        assert_relative_eq!(cess(1.0, 0.0, &w, &lr), 2.0 * 2.5 * 2.5 / 8.5, epsilon = 1e-12);
        assert_relative_eq!(cess(0.7, 0.1, &[0.2, 0.3, 0.5], &[1.5, 1.5, 1.5]), 3.0, epsilon = 1e-12);
    }

    #[test]
    fn find_next_rho_matches_grid_scan() {
        let w = [0.5, 0.5];
        let lr = [0.0, 4f64.ln()];
        let (rho, floored) = find_next_rho(0.0, &w, &lr, 0.9, 1e-8);
        assert!(!floored);
        // coarse scan to bracket, then a 1e-8 grid inside the bracket
        let coarse = (0..=10_000)
            .map(|i| i as f64 * 1e-4)
            .take_while(|&r| cess(r, 0.0, &w, &lr) >= 1.8)
            .last()
            .unwrap();
        let fine = (0..=20_000)
            .map(|i| coarse + i as f64 * 1e-8)
            .take_while(|&r| cess(r, 0.0, &w, &lr) >= 1.8)
            .last()
            .unwrap();
        assert!((rho - fine).abs() <= 2e-8, "{rho} vs {fine}");
        assert!(cess(rho, 0.0, &w, &lr) >= 1.8 - 1e-6);
    }

    #[test]
    fn find_next_rho_edge_cases() {
        assert_eq!(find_next_rho(0.2, &[0.25; 4], &[3.0; 4], 0.9, 1e-8), (1.0, false));
        let (rho, floored) = find_next_rho(0.2, &[0.5, 0.5], &[0.0, 200.0], 1.0 - 1e-15, 1e-8);
        assert_eq!(rho, 0.2 + RHO_FLOOR);
        let _ = floored;
        let (rho, floored) = find_next_rho(0.0, &[0.5, 0.5], &[0.0, 1e14], 0.9, 1e-8);
        assert!(floored);
        assert_eq!(rho, RHO_FLOOR);
    }

    #[test]
    fn ess_examples() {
        assert_relative_eq!(ess(&[0.25; 4]), 4.0);
        assert_relative_eq!(ess(&[1.0, 0.0, 0.0]), 1.0);
        assert_relative_eq!(ess(&[0.75, 0.25]), 1.6, epsilon = 1e-12);
    }

    #[test]
    fn resampling_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(resample_multinomial(&[0.0, 1.0, 0.0], &mut rng), vec![1, 1, 1]);
        let m = 10;
        let runs = 10_000;
        let mut copies = 0usize;
        for _ in 0..runs {
            copies += resample_multinomial(&vec![0.1; m], &mut rng).iter().filter(|&&a| a == 0).count();
        }
        let mean = copies as f64 / runs as f64;
        let se = (0.9f64 / runs as f64).sqrt();
        assert!((mean - 1.0).abs() < 4.0 * se, "{mean}");
    }

    #[test]
    fn reweight_is_deterministic_and_normalized() {
        let w = [0.1, 0.2, 0.7];
        let lr = [-1.0, 0.5, 2.0];
        let (a, la) = reweight(&w, &lr, 0.3);
        let (b, lb) = reweight(&w, &lr, 0.3);
        assert_eq!(a, b);
        assert_eq!(la, lb);
        assert_relative_eq!(a.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        let direct: f64 = w.iter().zip(&lr).map(|(w, l)| w * (0.3 * l).exp()).sum();
        assert_relative_eq!(la, direct.ln(), epsilon = 1e-12);
    }

    #[test]
    fn evidence_estimators_on_constant_ratio() {
        let c = -3.7;
        let mk = |h, rho, incr| TemperStep {
            h,
            rho,
            cess: 1.0,
            ess: 1.0,
            resampled: false,
            floor_increment: false,
            log_evidence_increment: incr,
            acceptance: 0.0,
            proposal_scale: 1.0,
            mutual_information: 0.0,
            mean_log_r: c,
        };
        let trace = TemperTrace {
            steps: vec![mk(0, 0.0, 0.0), mk(1, 0.25, 0.25 * c), mk(2, 0.6, 0.35 * c), mk(3, 1.0, 0.4 * c)],
        };
        assert_relative_eq!(log_evidence_path_sampling(&trace), c, epsilon = 1e-12);
        assert_relative_eq!(log_evidence_product(&trace), c, epsilon = 1e-12);
        let single = TemperTrace {
            steps: vec![mk(0, 0.0, 0.0), TemperStep { mean_log_r: 1.0, ..mk(1, 1.0, c) }],
        };
        assert_relative_eq!(log_evidence_path_sampling(&single), 0.5 * (1.0 + c));
        assert_relative_eq!(log_evidence_product(&single), c);
    }

    fn toy(seed: u64) -> (ObservedNetwork, PriorHyper) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let hyper = PriorHyper::simulation_design(2, 1);
        let theta = ModelParams::new(vec![0.5, 0.5], DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 2.0]), vec![0.5]).unwrap();
        let x = Covariates::gaussian(6, 1, 0.5, &mut rng);
        let (_, net) = simulate(&theta, &x, &mut rng).unwrap();
        (net, hyper)
    }

    #[test]
    fn tempered_density_endpoints_and_linearity() {
        let (net, hyper) = toy(1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let theta = hyper.sample(&mut rng);
        let z = vec![0, 1, 1, 0, 1, 0];
        let start = StartDistribution::Prior;
        let l0 = tempered_log_density(0.0, &start, &hyper, &net, &z, &theta);
        let l1 = tempered_log_density(1.0, &start, &hyper, &net, &z, &theta);
        let lh = tempered_log_density(0.5, &start, &hyper, &net, &z, &theta);
        assert_eq!(l0, log_reference(&start, &hyper, &z, &theta));
        assert_eq!(l1, log_target(&net, &hyper, &z, &theta));
        assert_relative_eq!(lh, 0.5 * (l0 + l1), epsilon = 1e-10);
        assert_relative_eq!(
            log_ratio(&net, &start, &hyper, &z, &theta),
            l1 - l0,
            epsilon = 1e-9
        );
    }

    #[test]
    fn prior_start_on_empty_data_finishes_in_one_step() {
        // with no pairs the ratio is identically 1
        let net = ObservedNetwork::new(1, vec![], Covariates::empty(1)).unwrap();
        let hyper = PriorHyper::simulation_design(2, 0);
        let cfg = SmcConfig { particles: 50, seed: 3, ..Default::default() };
        let out = run_smc(&net, StartDistribution::Prior, &hyper, &cfg).unwrap();
        assert_eq!(out.steps(), 1);
        assert_eq!(out.trace.rhos(), vec![0.0, 1.0]);
        assert_relative_eq!(out.log_evidence, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn run_is_reproducible_and_well_formed() {
        let (net, hyper) = toy(5);
        let cfg = SmcConfig { particles: 200, seed: 11, ..Default::default() };
        let a = run_smc(&net, StartDistribution::Prior, &hyper, &cfg).unwrap();
        let b = run_smc(&net, StartDistribution::Prior, &hyper, &cfg).unwrap();
        assert_eq!(a.weights, b.weights);
        assert_eq!(a.log_evidence, b.log_evidence);
        let rhos = a.trace.rhos();
        assert_eq!(rhos[0], 0.0);
        assert_eq!(*rhos.last().unwrap(), 1.0);
        assert!(rhos.windows(2).all(|w| w[1] > w[0]));
        assert_relative_eq!(a.weights.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        for p in &a.particles {
            let lr = log_ratio(&net, &StartDistribution::Prior, &hyper, &p.z, &p.theta);
            assert!((p.log_r - lr).abs() < 1e-9);
        }
        for s in &a.trace.steps[1..] {
            assert!(s.log_evidence_increment.is_finite());
            assert!(s.floor_increment || s.rho == 1.0 || s.cess >= 0.9 * 200.0 - 1e-6);
        }
    }

    #[test]
    fn nu_gibbs_matches_conjugate_moments() {
        let hyper = PriorHyper::new(vec![0.0; 3], DMatrix::identity(3, 3), vec![2.0, 3.0]).unwrap();
        let z = [0, 0, 1];
        let mut theta = ModelParams::new(vec![0.5, 0.5], DMatrix::zeros(2, 2), vec![]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let draws = 100_000;
        let (mut sum, mut sum2) = (0.0, 0.0);
        for _ in 0..draws {
            update_proportions(1.0, &StartDistribution::Prior, &hyper, &z, &mut theta, &mut rng);
            sum += theta.nu[0];
            sum2 += theta.nu[0] * theta.nu[0];
        }
        // Dirichlet(4, 4): mean 1/2, variance 1/36
        let (mean, var) = (0.5, 1.0 / 36.0);
        let emp = sum / draws as f64;
        assert!((emp - mean).abs() < 4.0 * (var / draws as f64).sqrt());
        assert!((sum2 / draws as f64 - emp * emp - var).abs() < 0.03 * var);
    }
}
