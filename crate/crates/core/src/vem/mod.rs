//! Variational EM for the Poisson block model with covariates.
//!
//! The E-step replaces `p(Z | Y, theta)` by a mean-field distribution with
//! memberships `tau`; the M-step is closed form in `nu` and a weighted Poisson
//! regression in `gamma = (alpha, beta)`, solved by Newton's method.

mod init;
pub mod regression;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;

use crate::error::{Result, SbmError};
use crate::math::{self, stream_rng};
use crate::model::{self, pairs, ModelParams, ObservedNetwork, PriorHyper};

pub use init::{kmeans, perturb_tau, spectral_labels, spectral_labels_of, tau_from_labels};
use regression::WeightedPoisson;

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct VemConfig {
    pub tol_tau: f64,
    pub tol_elbo: f64,
    pub tol_grad: f64,
    pub max_em: usize,
    pub max_fixed_point: usize,
    pub max_newton: usize,
    pub restarts: usize,
}

impl Default for VemConfig {
    fn default() -> Self {
        Self {
            tol_tau: 1e-6,
            tol_elbo: 1e-8,
            tol_grad: 1e-8,
            max_em: 200,
            max_fixed_point: 100,
            max_newton: 100,
            restarts: 5,
        }
    }
}

/// Result of variational EM.
#[derive(Debug, Clone)]
pub struct VariationalFit {
    /// `n x K` membership probabilities.
    pub tau: DMatrix<f64>,
    pub theta: ModelParams,
    /// ELBO at `(theta, tau)`.
    pub elbo: f64,
    /// Column sums of `tau`.
    pub n_tilde: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    /// ELBO after initialization and after every EM iteration.
    pub elbo_trace: Vec<f64>,
    pub restart: usize,
    pub warnings: Vec<String>,
}

impl VariationalFit {
    pub fn k(&self) -> usize {
        self.tau.ncols()
    }

    /// Most probable block of each node.
    pub fn hard_assignment(&self) -> Vec<usize> {
        (0..self.tau.nrows())
            .map(|i| {
                let row: Vec<f64> = self.tau.row(i).iter().copied().collect();
                math::argmax(&row)
            })
            .collect()
    }

    /// Relabels blocks so that new block `k` is old block `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let k = self.k();
        let tau = DMatrix::from_fn(self.tau.nrows(), k, |i, c| self.tau[(i, perm[c])]);
        Self {
            n_tilde: perm.iter().map(|&p| self.n_tilde[p]).collect(),
            tau,
            theta: self.theta.permuted(perm),
            ..self.clone()
        }
    }

    /// Relabels blocks to maximize the prior density of the estimate.
    ///
    /// The ELBO is invariant under relabeling but an asymmetric prior is not; the
    /// approximate posterior must sit in the labeling the prior favors. Exhaustive
    /// for `K <= 8`, otherwise the fit is returned unchanged.
    pub fn aligned_to_prior(&self, hyper: &PriorHyper) -> Self {
        let k = self.k();
        if k > 8 {
            let mut out = self.clone();
            out.warnings
                .push(format!("label alignment skipped for K={k} (more than 8 blocks)"));
            return out;
        }
        let mut best_perm: Vec<usize> = (0..k).collect();
        let mut best = model::log_prior(&self.theta, hyper);
        for perm in permutations(k) {
            let lp = model::log_prior(&self.theta.permuted(&perm), hyper);
            if lp > best {
                best = lp;
                best_perm = perm;
            }
        }
        self.permuted(&best_perm)
    }
}

/// All permutations of `0..k` in lexicographic order.
pub fn permutations(k: usize) -> Vec<Vec<usize>> {
    fn rec(prefix: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
        if prefix.len() == used.len() {
            out.push(prefix.clone());
            return;
        }
        for c in 0..used.len() {
            if !used[c] {
                used[c] = true;
                prefix.push(c);
                rec(prefix, used, out);
                prefix.pop();
                used[c] = false;
            }
        }
    }
    let mut out = Vec::new();
    rec(&mut Vec::with_capacity(k), &mut vec![false; k], &mut out);
    out
}

fn check_tau(net: &ObservedNetwork, tau: &DMatrix<f64>, k: usize) -> Result<()> {
    if tau.nrows() != net.n() || tau.ncols() != k {
        return Err(SbmError::Dimension(format!(
            "tau is {}x{}, expected {}x{k}",
            tau.nrows(),
            tau.ncols(),
            net.n()
        )));
    }
    Ok(())
}

/// Evidence lower bound `J(Y; theta, tau)`, with `0 log 0 = 0`.
pub fn elbo(net: &ObservedNetwork, theta: &ModelParams, tau: &DMatrix<f64>) -> f64 {
    let k = theta.k();
    let offsets = net.covariates().offsets(&theta.beta);
    let exp_alpha = theta.alpha.map(f64::exp);
    let mut j = 0.0;
    for i in 0..net.n() {
        for c in 0..k {
            let t = tau[(i, c)];
            if t > 0.0 {
                j += t * (theta.nu[c].ln() - t.ln());
            }
        }
    }
    for (i, jj, p) in pairs(net.n()) {
        let mut rate = 0.0;
        let mut lin = 0.0;
        for a in 0..k {
            let ta = tau[(i, a)];
            if ta == 0.0 {
                continue;
            }
            for b in 0..k {
                let w = ta * tau[(jj, b)];
                rate += w * exp_alpha[(a, b)];
                lin += w * theta.alpha[(a, b)];
            }
        }
        let y = net.counts()[p] as f64;
        j += -offsets[p].exp() * rate + y * (lin + offsets[p]) - net.log_factorials()[p];
    }
    j
}

/// Unnormalized log-memberships of node `i` given everyone else.
fn node_log_tau(
    net: &ObservedNetwork,
    i: usize,
    log_nu: &[f64],
    exp_off: &[f64],
    s: &DMatrix<f64>,
    t: &DMatrix<f64>,
    out: &mut [f64],
) {
    let n = net.n();
    out.copy_from_slice(log_nu);
    for j in 0..n {
        if j == i {
            continue;
        }
        let p = model::pair_index(n, i, j);
        let y = net.counts()[p] as f64;
        for (c, o) in out.iter_mut().enumerate() {
            *o += -exp_off[p] * s[(j, c)] + y * t[(j, c)];
        }
    }
}

fn softmax_into(log_p: &[f64], out: &mut [f64]) {
    let max = log_p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, l) in out.iter_mut().zip(log_p) {
        *o = (l - max).exp();
        sum += *o;
    }
    out.iter_mut().for_each(|o| *o /= sum);
}

struct FixedPointState {
    exp_off: Vec<f64>,
    log_nu: Vec<f64>,
    exp_alpha: DMatrix<f64>,
    s: DMatrix<f64>,
    t: DMatrix<f64>,
}

impl FixedPointState {
    fn new(net: &ObservedNetwork, theta: &ModelParams, tau: &DMatrix<f64>) -> Result<Self> {
        let offsets = net.covariates().offsets(&theta.beta);
        if offsets.iter().any(|o| !o.is_finite()) || theta.alpha.iter().any(|a| !a.is_finite()) {
            return Err(SbmError::NonFinite("log-rates in the VE step".into()));
        }
        let exp_alpha = theta.alpha.map(f64::exp);
        let s = tau * exp_alpha.transpose();
        let t = tau * theta.alpha.transpose();
        Ok(Self {
            exp_off: offsets.iter().map(|o| o.exp()).collect(),
            log_nu: theta.nu.iter().map(|v| v.ln()).collect(),
            exp_alpha,
            s,
            t,
            // s[j][c] = sum_l tau_jl exp(alpha_cl), t[j][c] = sum_l tau_jl alpha_cl
        })
    }

    fn refresh_row(&mut self, theta: &ModelParams, tau: &DMatrix<f64>, i: usize) {
        let k = theta.k();
        for c in 0..k {
            let mut sv = 0.0;
            let mut tv = 0.0;
            for l in 0..k {
                sv += tau[(i, l)] * self.exp_alpha[(c, l)];
                tv += tau[(i, l)] * theta.alpha[(c, l)];
            }
            self.s[(i, c)] = sv;
            self.t[(i, c)] = tv;
        }
    }
}

/// Largest componentwise gap between `tau` and its own fixed-point update
/// (each row recomputed from the others, without updating in place).
pub fn fixed_point_residual(net: &ObservedNetwork, theta: &ModelParams, tau: &DMatrix<f64>) -> Result<f64> {
    let k = theta.k();
    let st = FixedPointState::new(net, theta, tau)?;
    let mut log_t = vec![0.0; k];
    let mut row = vec![0.0; k];
    let mut worst: f64 = 0.0;
    for i in 0..net.n() {
        node_log_tau(net, i, &st.log_nu, &st.exp_off, &st.s, &st.t, &mut log_t);
        softmax_into(&log_t, &mut row);
        for c in 0..k {
            worst = worst.max((row[c] - tau[(i, c)]).abs());
        }
    }
    Ok(worst)
}

/// Fixed-point (coordinate ascent) update of the memberships for fixed `theta`.
///
/// Rows are updated in sequence, each to its exact optimum given the others, so
/// every row update increases the ELBO.
pub fn ve_step(
    net: &ObservedNetwork,
    theta: &ModelParams,
    tau_init: &DMatrix<f64>,
    cfg: &VemConfig,
) -> Result<DMatrix<f64>> {
    let k = theta.k();
    check_tau(net, tau_init, k)?;
    if k == 1 {
        return Ok(DMatrix::from_element(net.n(), 1, 1.0));
    }
    let mut tau = tau_init.clone();
    let mut st = FixedPointState::new(net, theta, &tau)?;
    let mut log_t = vec![0.0; k];
    let mut row = vec![0.0; k];
    for _ in 0..cfg.max_fixed_point {
        let mut max_change: f64 = 0.0;
        for i in 0..net.n() {
            node_log_tau(net, i, &st.log_nu, &st.exp_off, &st.s, &st.t, &mut log_t);
            if log_t.iter().all(|l| *l == f64::NEG_INFINITY) || log_t.iter().any(|l| l.is_nan()) {
                return Err(SbmError::NonFinite(format!("membership log-odds of node {}", i + 1)));
            }
            softmax_into(&log_t, &mut row);
            for c in 0..k {
                max_change = max_change.max((row[c] - tau[(i, c)]).abs());
                tau[(i, c)] = row[c];
            }
            st.refresh_row(theta, &tau, i);
        }
        if max_change < cfg.tol_tau {
            break;
        }
    }
    if elbo(net, theta, &tau) < elbo(net, theta, tau_init) {
        // only reachable through rounding
        return Ok(tau_init.clone());
    }
    Ok(tau)
}

/// Outcome of the M-step.
#[derive(Debug, Clone)]
pub struct MStep {
    pub theta: ModelParams,
    /// Max-norm of the gradient of the weighted Poisson objective at the returned `gamma`.
    pub gradient_norm: f64,
    pub newton_iterations: usize,
    pub ridge: bool,
    pub warnings: Vec<String>,
}

/// Column sums of `tau`.
pub fn n_tilde(tau: &DMatrix<f64>) -> Vec<f64> {
    (0..tau.ncols()).map(|c| tau.column(c).sum()).collect()
}

fn max_norm(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}

/// Maximizes the ELBO in `theta` for fixed memberships.
pub fn m_step(
    net: &ObservedNetwork,
    tau: &DMatrix<f64>,
    theta_init: &ModelParams,
    cfg: &VemConfig,
) -> Result<MStep> {
    m_step_impl(net, tau, theta_init, cfg, None)
}

/// Maximizes `J + log pi(theta)` in `theta` for fixed memberships (the M-step of
/// the penalized, maximum a posteriori variant).
pub fn m_step_map(
    net: &ObservedNetwork,
    tau: &DMatrix<f64>,
    theta_init: &ModelParams,
    hyper: &PriorHyper,
    cfg: &VemConfig,
) -> Result<MStep> {
    hyper.check_params(theta_init)?;
    m_step_impl(net, tau, theta_init, cfg, Some(hyper))
}

fn m_step_impl(
    net: &ObservedNetwork,
    tau: &DMatrix<f64>,
    theta_init: &ModelParams,
    cfg: &VemConfig,
    prior: Option<&PriorHyper>,
) -> Result<MStep> {
    let k = theta_init.k();
    check_tau(net, tau, k)?;
    let n = net.n() as f64;
    let nt = n_tilde(tau);
    let nu: Vec<f64> = match prior {
        Some(h) if h.e0.iter().all(|&e| e >= 1.0) => {
            let denom = n + h.e0.iter().sum::<f64>() - k as f64;
            nt.iter().zip(&h.e0).map(|(v, e)| (v + e - 1.0) / denom).collect()
        }
        _ => nt.iter().map(|v| v / n).collect(),
    };
    let mut warnings = Vec::new();
    let degenerate = prior.is_none() && nt.iter().any(|&v| v < 1e-6);
    if degenerate {
        warnings.push("a block has fewer than 1e-6 expected members; Newton Hessian ridged".into());
    }

    let problem = WeightedPoisson::new(net, tau);
    let penalty = prior.map(|h| {
        let g = h.gamma_prior();
        (g.mean().clone(), g.precision())
    });
    let objective = |g: &[f64]| {
        let mut q = problem.objective(g);
        if let Some((m, p)) = &penalty {
            let diff = DVector::from_column_slice(g) - m;
            q -= 0.5 * diff.dot(&(p * &diff));
        }
        q
    };
    let gradient = |g: &[f64]| {
        let mut grad = problem.gradient(g);
        if let Some((m, p)) = &penalty {
            grad -= p * (DVector::from_column_slice(g) - m);
        }
        grad
    };
    let hessian = |g: &[f64]| {
        let mut h = problem.hessian(g);
        if let Some((_, p)) = &penalty {
            h -= p;
        }
        h
    };

    let mut gamma = theta_init.gamma();
    let mut q = objective(&gamma);
    if !q.is_finite() {
        return Err(SbmError::NonFinite("weighted Poisson objective at the starting point".into()));
    }
    let mut grad = gradient(&gamma);
    let mut iterations = 0;
    let mut ridge_used = degenerate;
    while max_norm(&grad) >= cfg.tol_grad && iterations < cfg.max_newton {
        iterations += 1;
        let neg_h = -hessian(&gamma);
        let dim = neg_h.nrows();
        let mut ridge = if degenerate { 1e-8 } else { 0.0 };
        let step = loop {
            let m = &neg_h + DMatrix::identity(dim, dim) * ridge;
            if let Some(ch) = m.cholesky() {
                break ch.solve(&grad);
            }
            ridge_used = true;
            ridge = if ridge == 0.0 { 1e-8 } else { ridge * 10.0 };
            if ridge > 1e8 {
                return Err(SbmError::NotPositiveDefinite("M-step Hessian".into()));
            }
        };
        // Once the predicted gain is below the objective's rounding error the
        // comparison q(cand) >= q is noise; take the full Newton step.
        let decrement = grad.dot(&step);
        if decrement.abs() < 1e-10 * (1.0 + q.abs()) {
            let cand: Vec<f64> = gamma.iter().zip(step.iter()).map(|(g, s)| g + s).collect();
            let qc = objective(&cand);
            let gc = gradient(&cand);
            if qc.is_finite() && max_norm(&gc) < max_norm(&grad) {
                gamma = cand;
                q = qc;
                grad = gc;
                continue;
            }
        }
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let cand: Vec<f64> = gamma.iter().zip(step.iter()).map(|(g, s)| g + t * s).collect();
            let qc = objective(&cand);
            if qc.is_finite() && qc >= q {
                gamma = cand;
                q = qc;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        grad = gradient(&gamma);
        if !accepted {
            // no representable ascent step left
            break;
        }
    }
    if ridge_used && !degenerate {
        warnings.push("M-step Hessian was singular; ridge added".into());
    }
    Ok(MStep {
        theta: ModelParams::from_gamma(nu, &gamma, net.d())?,
        gradient_norm: max_norm(&grad),
        newton_iterations: iterations,
        ridge: ridge_used,
        warnings,
    })
}

/// Starting parameters: uniform proportions, flat block effects at the log mean count.
fn default_theta(net: &ObservedNetwork, k: usize) -> ModelParams {
    let mean = net.counts().iter().map(|&y| y as f64).sum::<f64>() / net.n_pairs().max(1) as f64;
    ModelParams {
        nu: vec![1.0 / k as f64; k],
        alpha: DMatrix::from_element(k, k, (mean + 0.5).ln()),
        beta: vec![0.0; net.d()],
    }
}

/// Runs EM from a given starting `tau`.
pub fn run_em(
    net: &ObservedNetwork,
    tau0: DMatrix<f64>,
    cfg: &VemConfig,
    restart: usize,
) -> Result<VariationalFit> {
    let k = tau0.ncols();
    let first = m_step(net, &tau0, &default_theta(net, k), cfg)?;
    let mut warnings = first.warnings;
    let mut theta = first.theta;
    let mut tau = tau0;
    let mut j = elbo(net, &theta, &tau);
    if !j.is_finite() {
        return Err(SbmError::NonFinite("initial ELBO".into()));
    }
    let mut trace = vec![j];
    let mut converged = false;
    let mut iterations = 0;
    while iterations < cfg.max_em {
        iterations += 1;
        tau = ve_step(net, &theta, &tau, cfg)?;
        let ms = m_step(net, &tau, &theta, cfg)?;
        for w in ms.warnings {
            if !warnings.contains(&w) {
                warnings.push(w);
            }
        }
        theta = ms.theta;
        let j_new = elbo(net, &theta, &tau);
        if !j_new.is_finite() {
            return Err(SbmError::NonFinite(format!("ELBO at iteration {iterations}")));
        }
        trace.push(j_new);
        let delta = j_new - j;
        j = j_new;
        if delta.abs() < cfg.tol_elbo {
            converged = true;
            break;
        }
    }
    Ok(VariationalFit {
        n_tilde: n_tilde(&tau),
        tau,
        theta,
        elbo: j,
        converged,
        iterations,
        elbo_trace: trace,
        restart,
        warnings,
    })
}

/// Penalized variational EM: maximizes `J + log pi(theta)` by alternating the usual
/// VE-step with [`m_step_map`]. Starts from `fit` and from every single-block
/// assignment (which a small, prior-dominated network may favor); the best
/// penalized objective wins. The returned `elbo` is the unpenalized ELBO.
pub fn fit_map(
    net: &ObservedNetwork,
    fit: &VariationalFit,
    hyper: &PriorHyper,
    cfg: &VemConfig,
) -> Result<VariationalFit> {
    let k = fit.k();
    let mut starts = vec![fit.tau.clone()];
    if k > 1 {
        for c in 0..k {
            starts.push(tau_from_labels(&vec![c; net.n()], k, 0.1));
        }
    }
    let results: Vec<Result<(f64, VariationalFit)>> = starts
        .into_par_iter()
        .map(|tau| run_map_em(net, tau, fit, hyper, cfg))
        .collect();
    let mut best: Option<(f64, VariationalFit)> = None;
    for r in results {
        match r {
            Ok((obj, f)) => {
                if best.as_ref().map_or(true, |(b, _)| obj > *b) {
                    best = Some((obj, f));
                }
            }
            Err(e) => log::warn!("penalized EM start failed: {e}"),
        }
    }
    best.map(|(_, f)| f).ok_or(SbmError::AllRestartsFailed(k + 1))
}

fn run_map_em(
    net: &ObservedNetwork,
    tau0: DMatrix<f64>,
    fit: &VariationalFit,
    hyper: &PriorHyper,
    cfg: &VemConfig,
) -> Result<(f64, VariationalFit)> {
    let mut tau = tau0;
    let mut warnings = fit.warnings.clone();
    let objective = |theta: &ModelParams, tau: &DMatrix<f64>| elbo(net, theta, tau) + model::log_prior(theta, hyper);
    let mut theta = m_step_map(net, &tau, &fit.theta, hyper, cfg)?.theta;
    let mut j = objective(&theta, &tau);
    let mut trace = vec![j];
    let mut converged = false;
    let mut iterations = 0;
    while iterations < cfg.max_em {
        iterations += 1;
        tau = ve_step(net, &theta, &tau, cfg)?;
        let ms = m_step_map(net, &tau, &theta, hyper, cfg)?;
        for w in ms.warnings {
            if !warnings.contains(&w) {
                warnings.push(w);
            }
        }
        theta = ms.theta;
        let j_new = objective(&theta, &tau);
        if !j_new.is_finite() {
            return Err(SbmError::NonFinite(format!("penalized ELBO at iteration {iterations}")));
        }
        trace.push(j_new);
        let delta = j_new - j;
        j = j_new;
        if delta.abs() < cfg.tol_elbo {
            converged = true;
            break;
        }
    }
    let out = VariationalFit {
        n_tilde: n_tilde(&tau),
        elbo: elbo(net, &theta, &tau),
        tau,
        theta,
        converged,
        iterations,
        elbo_trace: trace,
        restart: fit.restart,
        warnings,
    };
    Ok((j, out))
}

/// Spectral labels of `log(1 + Y) - log(1 + mu)`, where `mu` is the single-block
/// fit with covariates. Strong covariate effects otherwise dominate the
/// leading eigenvectors of the raw counts.
fn adjusted_spectral_labels<R: Rng + ?Sized>(
    net: &ObservedNetwork,
    k: usize,
    cfg: &VemConfig,
    rng: &mut R,
) -> Option<Vec<usize>> {
    let n = net.n();
    let ones = DMatrix::from_element(n, 1, 1.0);
    let base = m_step(net, &ones, &default_theta(net, 1), cfg).ok()?.theta;
    let offsets = net.covariates().offsets(&base.beta);
    let mut a = DMatrix::zeros(n, n);
    for (i, j, p) in pairs(n) {
        let mu = (base.alpha[(0, 0)] + offsets[p]).exp();
        let r = (1.0 + net.count(i, j) as f64).ln() - (1.0 + mu).ln();
        a[(i, j)] = r;
        a[(j, i)] = r;
    }
    if a.iter().any(|v| !v.is_finite()) {
        return None;
    }
    Some(spectral_labels_of(a, k, rng))
}

/// Variational EM with restarts, run in parallel; the fit with the largest ELBO wins.
/// Restart 0 starts from spectral clustering of `log(1 + Y)`, restart 1 from the
/// covariate-adjusted variant, and later restarts from Dirichlet-perturbed copies of
/// these two (alternating).
pub fn fit_vem<R: Rng + ?Sized>(
    net: &ObservedNetwork,
    k: usize,
    cfg: &VemConfig,
    rng: &mut R,
) -> Result<VariationalFit> {
    Ok(fit_vem_all(net, k, cfg, rng)?.0)
}

/// Like [`fit_vem`] but also returns the ELBO reached by every restart
/// (`None` for restarts that failed).
pub fn fit_vem_all<R: Rng + ?Sized>(
    net: &ObservedNetwork,
    k: usize,
    cfg: &VemConfig,
    rng: &mut R,
) -> Result<(VariationalFit, Vec<Option<f64>>)> {
    if k == 0 {
        return Err(SbmError::InvalidParameter("K must be at least 1".into()));
    }
    if k > net.n() {
        return Err(SbmError::InvalidParameter(format!(
            "K={k} exceeds the number of nodes {}",
            net.n()
        )));
    }
    let seed: u64 = rng.random();
    let raw = tau_from_labels(&spectral_labels(net, k, &mut stream_rng(seed, 0, 0)), k, 0.1);
    let adjusted = if k > 1 {
        adjusted_spectral_labels(net, k, cfg, &mut stream_rng(seed, 0, 1)).map(|l| tau_from_labels(&l, k, 0.1))
    } else {
        None
    };
    let restarts = cfg.restarts.max(1);
    let results: Vec<Result<VariationalFit>> = (0..restarts)
        .into_par_iter()
        .map(|r| {
            // even restarts build on the raw spectral start, odd ones on the covariate-adjusted one
            let base = match (&adjusted, r % 2) {
                (Some(a), 1) => a,
                _ => &raw,
            };
            let tau0 = if r <= 1 || k == 1 {
                base.clone()
            } else {
                perturb_tau(base, 0.5, &mut stream_rng(seed, 1, r as u64))
            };
            run_em(net, tau0, cfg, r)
        })
        .collect();
    let elbos: Vec<Option<f64>> = results.iter().map(|r| r.as_ref().ok().map(|f| f.elbo)).collect();
    let mut best: Option<VariationalFit> = None;
    for res in results {
        match res {
            Ok(fit) => {
                if best.as_ref().map_or(true, |b| fit.elbo > b.elbo) {
                    best = Some(fit);
                }
            }
            Err(e) => log::warn!("variational restart failed: {e}"),
        }
    }
    best.map(|b| (b, elbos)).ok_or(SbmError::AllRestartsFailed(restarts))
}

/// ELBO-based integrated classification likelihood:
/// `J - (K(K+1)/2 + d)/2 * log(n(n-1)/2) - (K-1)/2 * log(n)`.
pub fn pseudo_icl(fit: &VariationalFit, net: &ObservedNetwork) -> f64 {
    let k = fit.k() as f64;
    let n = net.n() as f64;
    let n_gamma = k * (k + 1.0) / 2.0 + net.d() as f64;
    fit.elbo - 0.5 * n_gamma * (n * (n - 1.0) / 2.0).ln() - 0.5 * (k - 1.0) * n.ln()
}

/// Adjusted Rand index between two labelings.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len());
    let ka = a.iter().max().map_or(0, |m| m + 1);
    let kb = b.iter().max().map_or(0, |m| m + 1);
    let mut table = vec![vec![0u64; kb]; ka];
    for (&x, &y) in a.iter().zip(b) {
        table[x][y] += 1;
    }
    let c2 = |v: u64| (v * v.saturating_sub(1)) as f64 / 2.0;
    let sum_ij: f64 = table.iter().flatten().map(|&v| c2(v)).sum();
    let sum_a: f64 = table.iter().map(|row| c2(row.iter().sum())).sum();
    let sum_b: f64 = (0..kb).map(|j| c2(table.iter().map(|row| row[j]).sum())).sum();
    let total = c2(a.len() as u64);
    let expected = sum_a * sum_b / total;
    let max = 0.5 * (sum_a + sum_b);
    if (max - expected).abs() < f64::EPSILON {
        return 1.0;
    }
    (sum_ij - expected) / (max - expected)
}
