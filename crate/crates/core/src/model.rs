//! The generative model: data containers, parameters, prior, likelihoods, simulation,
//! and brute-force enumeration oracles over latent assignments.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SbmError};
use crate::math::{self, Gaussian};

/// Default cap on the number of assignments visited by the enumeration oracles.
pub const DEFAULT_ENUMERATION_CAP: u64 = 1 << 20;

/// Largest interaction count accepted in a network.
pub const MAX_COUNT: u64 = (1 << 31) - 1;

/// Index of the unordered pair `{i, j}` (`i != j`) in row-major upper-triangle order.
#[inline]
pub fn pair_index(n: usize, i: usize, j: usize) -> usize {
    let (a, b) = if i < j { (i, j) } else { (j, i) };
    debug_assert!(a != b && b < n);
    a * (2 * n - a - 1) / 2 + (b - a - 1)
}

#[inline]
pub fn n_pairs(n: usize) -> usize {
    n * n.saturating_sub(1) / 2
}

/// Iterator over `(i, j, pair_index)` for `i < j`.
pub fn pairs(n: usize) -> impl Iterator<Item = (usize, usize, usize)> {
    (0..n)
        .flat_map(move |i| ((i + 1)..n).map(move |j| (i, j)))
        .enumerate()
        .map(|(p, (i, j))| (i, j, p))
}

/// Per-pair covariate vectors of a common length `d`, stored for `i < j` only.
#[derive(Debug, Clone, PartialEq)]
pub struct Covariates {
    n: usize,
    d: usize,
    values: Vec<f64>,
}

impl Covariates {
    /// `values` holds `n(n-1)/2` consecutive rows of length `d` in pair order.
    pub fn new(n: usize, d: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != n_pairs(n) * d {
            return Err(SbmError::Dimension(format!(
                "expected {} covariate values for n={n}, d={d}, got {}",
                n_pairs(n) * d,
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(SbmError::NonFinite(format!("covariate value {v}")));
        }
        Ok(Self { n, d, values })
    }

    pub fn empty(n: usize) -> Self {
        Self {
            n,
            d: 0,
            values: Vec::new(),
        }
    }

    /// Independent `N(0, sd^2)` entries.
    pub fn gaussian<R: Rng + ?Sized>(n: usize, d: usize, sd: f64, rng: &mut R) -> Self {
        let values = (0..n_pairs(n) * d)
            .map(|_| sd * rng.sample::<f64, _>(rand_distr::StandardNormal))
            .collect();
        Self { n, d, values }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn row(&self, p: usize) -> &[f64] {
        &self.values[p * self.d..(p + 1) * self.d]
    }

    pub fn get(&self, i: usize, j: usize) -> &[f64] {
        self.row(pair_index(self.n, i, j))
    }

    /// `x_ij^T beta` for every pair.
    pub fn offsets(&self, beta: &[f64]) -> Vec<f64> {
        assert_eq!(beta.len(), self.d, "beta length must equal covariate dimension");
        if self.d == 0 {
            return vec![0.0; n_pairs(self.n)];
        }
        self.values
            .chunks_exact(self.d)
            .map(|x| x.iter().zip(beta).map(|(a, b)| a * b).sum())
            .collect()
    }
}

/// A symmetric count network without self-loops, plus pair covariates.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservedNetwork {
    n: usize,
    counts: Vec<u32>,
    log_fact: Vec<f64>,
    covariates: Covariates,
}

impl ObservedNetwork {
    /// Builds a network from pair-ordered counts (`i < j`).
    pub fn new(n: usize, counts: Vec<u32>, covariates: Covariates) -> Result<Self> {
        if counts.len() != n_pairs(n) {
            return Err(SbmError::Dimension(format!(
                "expected {} pair counts for n={n}, got {}",
                n_pairs(n),
                counts.len()
            )));
        }
        if covariates.n() != n {
            return Err(SbmError::Dimension(format!(
                "covariates are for n={}, network has n={n}",
                covariates.n()
            )));
        }
        if let Some(&c) = counts.iter().find(|&&c| c as u64 > MAX_COUNT) {
            return Err(SbmError::InvalidParameter(format!("count {c} exceeds 2^31-1")));
        }
        let log_fact = counts.iter().map(|&y| math::ln_factorial(y)).collect();
        Ok(Self {
            n,
            counts,
            log_fact,
            covariates,
        })
    }

    /// Builds a network from a dense matrix, checking symmetry and the zero diagonal.
    pub fn from_dense(y: &[Vec<u64>], covariates: Covariates) -> Result<Self> {
        let n = y.len();
        for (i, row) in y.iter().enumerate() {
            if row.len() != n {
                return Err(SbmError::Dimension(format!(
                    "row {} has {} entries, expected {n}",
                    i + 1,
                    row.len()
                )));
            }
            if row[i] != 0 {
                return Err(SbmError::Input(format!(
                    "diagonal entry ({0},{0}) is {1}, expected 0",
                    i + 1,
                    row[i]
                )));
            }
        }
        let mut counts = Vec::with_capacity(n_pairs(n));
        for (i, j, _) in pairs(n) {
            if y[i][j] != y[j][i] {
                return Err(SbmError::Input(format!(
                    "asymmetric counts: Y[{},{}]={} but Y[{},{}]={}",
                    i + 1,
                    j + 1,
                    y[i][j],
                    j + 1,
                    i + 1,
                    y[j][i]
                )));
            }
            if y[i][j] > MAX_COUNT {
                return Err(SbmError::InvalidParameter(format!(
                    "count {} at ({},{}) exceeds 2^31-1",
                    y[i][j],
                    i + 1,
                    j + 1
                )));
            }
            counts.push(y[i][j] as u32);
        }
        Self::new(n, counts, covariates)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.covariates.d()
    }

    pub fn n_pairs(&self) -> usize {
        self.counts.len()
    }

    pub fn counts(&self) -> &[u32] {
        &self.counts
    }

    /// `log(Y_ij!)` per pair.
    pub fn log_factorials(&self) -> &[f64] {
        &self.log_fact
    }

    pub fn covariates(&self) -> &Covariates {
        &self.covariates
    }

    pub fn count(&self, i: usize, j: usize) -> u32 {
        if i == j {
            0
        } else {
            self.counts[pair_index(self.n, i, j)]
        }
    }

    pub fn to_dense(&self) -> Vec<Vec<u64>> {
        let mut y = vec![vec![0u64; self.n]; self.n];
        for (i, j, p) in pairs(self.n) {
            y[i][j] = self.counts[p] as u64;
            y[j][i] = self.counts[p] as u64;
        }
        y
    }
}

/// Model parameters `theta = (nu, alpha, beta)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ParamsRepr", into = "ParamsRepr")]
pub struct ModelParams {
    /// Block proportions, on the simplex.
    pub nu: Vec<f64>,
    /// Symmetric block interaction matrix.
    pub alpha: DMatrix<f64>,
    /// Regression coefficients.
    pub beta: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ParamsRepr {
    nu: Vec<f64>,
    alpha: Vec<Vec<f64>>,
    beta: Vec<f64>,
}

impl TryFrom<ParamsRepr> for ModelParams {
    type Error = SbmError;

    fn try_from(r: ParamsRepr) -> Result<Self> {
        let k = r.alpha.len();
        if r.alpha.iter().any(|row| row.len() != k) {
            return Err(SbmError::Dimension("alpha must be square".into()));
        }
        let alpha = DMatrix::from_fn(k, k, |a, b| r.alpha[a][b]);
        ModelParams::new(r.nu, alpha, r.beta)
    }
}

impl From<ModelParams> for ParamsRepr {
    fn from(p: ModelParams) -> Self {
        let k = p.k();
        Self {
            alpha: (0..k).map(|a| (0..k).map(|b| p.alpha[(a, b)]).collect()).collect(),
            nu: p.nu,
            beta: p.beta,
        }
    }
}

impl ModelParams {
    pub fn new(nu: Vec<f64>, alpha: DMatrix<f64>, beta: Vec<f64>) -> Result<Self> {
        let p = Self { nu, alpha, beta };
        p.validate()?;
        Ok(p)
    }

    /// Checks shape, simplex and symmetry constraints.
    ///
    /// Proportions may sit on the simplex boundary; densities there evaluate to `-inf`.
    pub fn validate(&self) -> Result<()> {
        let k = self.nu.len();
        if k == 0 {
            return Err(SbmError::InvalidParameter("K must be at least 1".into()));
        }
        if self.alpha.nrows() != k || self.alpha.ncols() != k {
            return Err(SbmError::Dimension(format!(
                "alpha is {}x{}, expected {k}x{k}",
                self.alpha.nrows(),
                self.alpha.ncols()
            )));
        }
        if self.nu.iter().any(|v| !(*v >= 0.0)) {
            return Err(SbmError::InvalidParameter("negative or NaN proportion".into()));
        }
        let s: f64 = self.nu.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(SbmError::InvalidParameter(format!(
                "proportions sum to {s}, expected 1"
            )));
        }
        for a in 0..k {
            for b in 0..k {
                if !self.alpha[(a, b)].is_finite() {
                    return Err(SbmError::NonFinite(format!("alpha[{a},{b}]")));
                }
                if self.alpha[(a, b)] != self.alpha[(b, a)] {
                    return Err(SbmError::InvalidParameter("alpha is not symmetric".into()));
                }
            }
        }
        if self.beta.iter().any(|v| !v.is_finite()) {
            return Err(SbmError::NonFinite("beta".into()));
        }
        Ok(())
    }

    /// Builds parameters from proportions and a packed `gamma = (alpha, beta)`.
    pub fn from_gamma(nu: Vec<f64>, gamma: &[f64], d: usize) -> Result<Self> {
        let (alpha, beta) = gamma_unpack(gamma, nu.len(), d)?;
        Ok(Self { nu, alpha, beta })
    }

    pub fn k(&self) -> usize {
        self.nu.len()
    }

    pub fn d(&self) -> usize {
        self.beta.len()
    }

    pub fn gamma(&self) -> Vec<f64> {
        gamma_pack(&self.alpha, &self.beta).expect("alpha is square by construction")
    }

    pub fn gamma_dim(&self) -> usize {
        gamma_dim(self.k(), self.d())
    }

    /// `(K-1) + K(K+1)/2 + d`.
    pub fn free_parameter_count(&self) -> usize {
        self.k() - 1 + self.gamma_dim()
    }

    /// Relabels blocks so that new block `k` is old block `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let k = self.k();
        assert_eq!(perm.len(), k);
        Self {
            nu: perm.iter().map(|&p| self.nu[p]).collect(),
            alpha: DMatrix::from_fn(k, k, |a, b| self.alpha[(perm[a], perm[b])]),
            beta: self.beta.clone(),
        }
    }
}

/// Number of packed entries in `gamma`.
pub fn gamma_dim(k: usize, d: usize) -> usize {
    k * (k + 1) / 2 + d
}

/// Position of `alpha[a][b]` in the packed vector (upper triangle, row-major).
#[inline]
pub fn alpha_index(k: usize, a: usize, b: usize) -> usize {
    let (a, b) = if a <= b { (a, b) } else { (b, a) };
    a * (2 * k - a + 1) / 2 + (b - a)
}

/// Packs `[a_11, a_12, .., a_1K, a_22, .., a_KK, b_1, .., b_d]`.
pub fn gamma_pack(alpha: &DMatrix<f64>, beta: &[f64]) -> Result<Vec<f64>> {
    let k = alpha.nrows();
    if alpha.ncols() != k {
        return Err(SbmError::Dimension("alpha must be square".into()));
    }
    let mut g = Vec::with_capacity(gamma_dim(k, beta.len()));
    for a in 0..k {
        for b in a..k {
            g.push(alpha[(a, b)]);
        }
    }
    g.extend_from_slice(beta);
    Ok(g)
}

/// Inverse of [`gamma_pack`].
pub fn gamma_unpack(gamma: &[f64], k: usize, d: usize) -> Result<(DMatrix<f64>, Vec<f64>)> {
    if gamma.len() != gamma_dim(k, d) {
        return Err(SbmError::Dimension(format!(
            "gamma has length {}, expected {} for K={k}, d={d}",
            gamma.len(),
            gamma_dim(k, d)
        )));
    }
    let mut alpha = DMatrix::zeros(k, k);
    let mut idx = 0;
    for a in 0..k {
        for b in a..k {
            alpha[(a, b)] = gamma[idx];
            alpha[(b, a)] = gamma[idx];
            idx += 1;
        }
    }
    Ok((alpha, gamma[idx..].to_vec()))
}

/// Prior hyperparameters: `gamma ~ N(gamma0, V0)`, `nu ~ Dirichlet(e0)`.
#[derive(Debug, Clone)]
pub struct PriorHyper {
    pub gamma0: Vec<f64>,
    pub v0: DMatrix<f64>,
    pub e0: Vec<f64>,
    gaussian: Gaussian,
}

impl PriorHyper {
    pub fn new(gamma0: Vec<f64>, v0: DMatrix<f64>, e0: Vec<f64>) -> Result<Self> {
        let k = e0.len();
        if k == 0 {
            return Err(SbmError::InvalidParameter("e0 must be nonempty".into()));
        }
        if gamma0.len() < k * (k + 1) / 2 {
            return Err(SbmError::Dimension(format!(
                "gamma0 has length {}, too short for K={k}",
                gamma0.len()
            )));
        }
        if e0.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(SbmError::InvalidParameter("all e0 entries must be positive".into()));
        }
        let gaussian = Gaussian::new(DVector::from_vec(gamma0.clone()), v0.clone())?;
        Ok(Self {
            gamma0,
            v0,
            e0,
            gaussian,
        })
    }

    /// Prior used by the simulation design, generalized to any `(K, d)`.
    ///
    /// Diagonal block effects have means spread evenly over `[1, 3]` (2 when `K = 1`),
    /// off-diagonal means are 0, regression means are `(1.1, 2.2, 0.1, -0.3)` padded
    /// with zeros, `V0 = 0.1 I` and `e0 = (3, .., 3)`. For `K = 2, d = 4` this is
    /// `gamma0 = (1, 0, 3, 1.1, 2.2, 0.1, -0.3)`.
    pub fn simulation_design(k: usize, d: usize) -> Self {
        const BETA: [f64; 4] = [1.1, 2.2, 0.1, -0.3];
        let mut alpha = DMatrix::zeros(k, k);
        for a in 0..k {
            alpha[(a, a)] = if k == 1 {
                2.0
            } else {
                1.0 + 2.0 * a as f64 / (k - 1) as f64
            };
        }
        let beta: Vec<f64> = (0..d).map(|r| BETA.get(r).copied().unwrap_or(0.0)).collect();
        let gamma0 = gamma_pack(&alpha, &beta).unwrap();
        let dim = gamma0.len();
        Self::new(gamma0, DMatrix::identity(dim, dim) * 0.1, vec![3.0; k])
            .expect("design hyperparameters are valid")
    }

    pub fn k(&self) -> usize {
        self.e0.len()
    }

    pub fn d(&self) -> usize {
        self.gamma0.len() - self.k() * (self.k() + 1) / 2
    }

    pub fn gamma_prior(&self) -> &Gaussian {
        &self.gaussian
    }

    pub fn check_params(&self, theta: &ModelParams) -> Result<()> {
        if theta.k() != self.k() || theta.d() != self.d() {
            return Err(SbmError::Dimension(format!(
                "parameters have K={}, d={}; prior has K={}, d={}",
                theta.k(),
                theta.d(),
                self.k(),
                self.d()
            )));
        }
        Ok(())
    }

    /// Draws `theta` from the prior.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> ModelParams {
        let nu = math::sample_dirichlet(&self.e0, rng);
        let gamma = self.gaussian.sample(rng);
        ModelParams::from_gamma(nu, &gamma, self.d()).expect("prior dimensions are consistent")
    }
}

/// Log prior density; `-inf` when `nu` lies on the simplex boundary.
pub fn log_prior(theta: &ModelParams, hyper: &PriorHyper) -> f64 {
    debug_assert!(hyper.check_params(theta).is_ok());
    let lp_nu = math::dirichlet_log_pdf(&theta.nu, &hyper.e0);
    if lp_nu == f64::NEG_INFINITY {
        log::debug!("proportions on the simplex boundary: prior density is zero");
        return f64::NEG_INFINITY;
    }
    hyper.gaussian.log_pdf(&theta.gamma()) + lp_nu
}

/// Block memberships, stored 0-based (`0..K`).
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LatentAssignment(pub Vec<usize>);

impl LatentAssignment {
    pub fn new(labels: Vec<usize>, k: usize) -> Result<Self> {
        if let Some((i, &z)) = labels.iter().enumerate().find(|(_, &z)| z >= k) {
            return Err(SbmError::InvalidParameter(format!(
                "node {} has block {} outside 1..={k}",
                i + 1,
                z + 1
            )));
        }
        Ok(Self(labels))
    }

    pub fn labels(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Number of nodes in each block.
    pub fn block_counts(&self, k: usize) -> Vec<usize> {
        block_counts(&self.0, k)
    }
}

impl std::ops::Deref for LatentAssignment {
    type Target = [usize];

    fn deref(&self) -> &[usize] {
        &self.0
    }
}

pub fn block_counts(z: &[usize], k: usize) -> Vec<usize> {
    let mut c = vec![0; k];
    for &zi in z {
        c[zi] += 1;
    }
    c
}

/// `log p_theta(Y, Z)` given precomputed pair offsets `x_ij^T beta`.
pub fn complete_log_likelihood_with_offsets(
    net: &ObservedNetwork,
    z: &[usize],
    theta: &ModelParams,
    offsets: &[f64],
) -> f64 {
    let mut ll: f64 = z.iter().map(|&zi| theta.nu[zi].ln()).sum();
    ll += data_log_likelihood_with_offsets(net, z, &theta.alpha, offsets);
    ll
}

/// `log p_{Z,theta}(Y)`, the Poisson part of the complete likelihood.
pub fn data_log_likelihood_with_offsets(
    net: &ObservedNetwork,
    z: &[usize],
    alpha: &DMatrix<f64>,
    offsets: &[f64],
) -> f64 {
    let counts = net.counts();
    let lf = net.log_factorials();
    let mut ll = 0.0;
    for (i, j, p) in pairs(net.n()) {
        let eta = alpha[(z[i], z[j])] + offsets[p];
        ll += -eta.exp() + counts[p] as f64 * eta - lf[p];
    }
    ll
}

/// Complete log-likelihood `log p_theta(Y, Z)`.
pub fn complete_log_likelihood(net: &ObservedNetwork, z: &[usize], theta: &ModelParams) -> f64 {
    debug_assert_eq!(z.len(), net.n());
    let offsets = net.covariates().offsets(&theta.beta);
    complete_log_likelihood_with_offsets(net, z, theta, &offsets)
}

/// Visits every assignment in `{0..K}^n` in lexicographic order.
fn for_each_assignment(n: usize, k: usize, mut f: impl FnMut(&[usize])) {
    let mut z = vec![0usize; n];
    loop {
        f(&z);
        let mut pos = n;
        loop {
            if pos == 0 {
                return;
            }
            pos -= 1;
            z[pos] += 1;
            if z[pos] < k {
                break;
            }
            z[pos] = 0;
        }
    }
}

fn check_cap(n: usize, k: usize, cap: u64) -> Result<()> {
    let configs = (k as f64).powi(n as i32);
    if configs > cap as f64 {
        return Err(SbmError::EnumerationCap { configs, cap });
    }
    Ok(())
}

/// Per-pair, per-block-pair Poisson log-densities, laid out `[p][a*K + b]`.
fn pair_log_density_table(net: &ObservedNetwork, theta: &ModelParams) -> Vec<f64> {
    let k = theta.k();
    let offsets = net.covariates().offsets(&theta.beta);
    let mut table = vec![0.0; net.n_pairs() * k * k];
    for p in 0..net.n_pairs() {
        let y = net.counts()[p] as f64;
        for a in 0..k {
            for b in 0..k {
                let eta = theta.alpha[(a, b)] + offsets[p];
                table[p * k * k + a * k + b] = -eta.exp() + y * eta - net.log_factorials()[p];
            }
        }
    }
    table
}

/// Evaluates `log p_theta(Y, Z)` for every assignment.
fn enumerate_complete(net: &ObservedNetwork, theta: &ModelParams, cap: u64) -> Result<Vec<f64>> {
    let (n, k) = (net.n(), theta.k());
    check_cap(n, k, cap)?;
    let table = pair_log_density_table(net, theta);
    let log_nu: Vec<f64> = theta.nu.iter().map(|v| v.ln()).collect();
    let mut out = Vec::with_capacity(k.pow(n as u32));
    for_each_assignment(n, k, |z| {
        let mut ll: f64 = z.iter().map(|&zi| log_nu[zi]).sum();
        for (i, j, p) in pairs(n) {
            ll += table[p * k * k + z[i] * k + z[j]];
        }
        out.push(ll);
    });
    Ok(out)
}

/// Exact `log p_theta(Y)` by summing over all `K^n` assignments.
pub fn log_likelihood_enumerate(net: &ObservedNetwork, theta: &ModelParams) -> Result<f64> {
    log_likelihood_enumerate_with_cap(net, theta, DEFAULT_ENUMERATION_CAP)
}

pub fn log_likelihood_enumerate_with_cap(
    net: &ObservedNetwork,
    theta: &ModelParams,
    cap: u64,
) -> Result<f64> {
    Ok(math::log_sum_exp(&enumerate_complete(net, theta, cap)?))
}

/// Exact `p(Z | Y, theta)` over all assignments.
#[derive(Debug, Clone)]
pub struct AssignmentPosterior {
    pub k: usize,
    pub assignments: Vec<Vec<usize>>,
    pub probs: Vec<f64>,
}

impl AssignmentPosterior {
    /// `P(Z_i = k | Y, theta)` as an `n x K` matrix.
    pub fn marginals(&self) -> DMatrix<f64> {
        let n = self.assignments.first().map_or(0, |z| z.len());
        let mut m = DMatrix::zeros(n, self.k);
        for (z, &p) in self.assignments.iter().zip(&self.probs) {
            for (i, &zi) in z.iter().enumerate() {
                m[(i, zi)] += p;
            }
        }
        m
    }
}

pub fn posterior_enumerate(net: &ObservedNetwork, theta: &ModelParams) -> Result<AssignmentPosterior> {
    posterior_enumerate_with_cap(net, theta, DEFAULT_ENUMERATION_CAP)
}

pub fn posterior_enumerate_with_cap(
    net: &ObservedNetwork,
    theta: &ModelParams,
    cap: u64,
) -> Result<AssignmentPosterior> {
    let (n, k) = (net.n(), theta.k());
    let lls = enumerate_complete(net, theta, cap)?;
    let mut probs = vec![0.0; lls.len()];
    math::normalize_log_weights(&lls, &mut probs);
    let mut assignments = Vec::with_capacity(lls.len());
    for_each_assignment(n, k, |z| assignments.push(z.to_vec()));
    Ok(AssignmentPosterior {
        k,
        assignments,
        probs,
    })
}

/// Draws `Z` and then `Y | Z` from the model, with covariates held fixed.
pub fn simulate<R: Rng + ?Sized>(
    theta: &ModelParams,
    covariates: &Covariates,
    rng: &mut R,
) -> Result<(LatentAssignment, ObservedNetwork)> {
    theta.validate()?;
    if covariates.d() != theta.d() {
        return Err(SbmError::Dimension(format!(
            "covariates have d={}, beta has length {}",
            covariates.d(),
            theta.d()
        )));
    }
    let n = covariates.n();
    let z: Vec<usize> = (0..n)
        .map(|_| math::sample_categorical(&theta.nu, rng))
        .collect();
    let offsets = covariates.offsets(&theta.beta);
    let mut counts = Vec::with_capacity(n_pairs(n));
    for (i, j, p) in pairs(n) {
        let rate = (theta.alpha[(z[i], z[j])] + offsets[p]).exp();
        let y = if rate > 0.0 && rate.is_finite() {
            Poisson::new(rate)
                .map_err(|e| SbmError::NonFinite(format!("Poisson rate {rate}: {e}")))?
                .sample(rng)
        } else if rate == 0.0 {
            0.0
        } else {
            return Err(SbmError::NonFinite(format!("Poisson rate {rate}")));
        };
        counts.push(y.min(MAX_COUNT as f64) as u32);
    }
    let net = ObservedNetwork::new(n, counts, covariates.clone())?;
    Ok((LatentAssignment(z), net))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::{any, prop_assert_eq, proptest};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn two_node(y: u32) -> ObservedNetwork {
        ObservedNetwork::new(2, vec![y], Covariates::empty(2)).unwrap()
    }

    fn one_block(alpha: f64) -> ModelParams {
        ModelParams::new(vec![1.0], DMatrix::from_element(1, 1, alpha), vec![]).unwrap()
    }

    #[test]
    fn pair_index_is_dense_and_ordered() {
        let n = 7;
        let idx: Vec<usize> = pairs(n).map(|(i, j, p)| {
            assert_eq!(pair_index(n, i, j), p);
            assert_eq!(pair_index(n, j, i), p);
            p
        }).collect();
        assert_eq!(idx, (0..n_pairs(n)).collect::<Vec<_>>());
    }

    #[test]
    fn gamma_pack_orders_upper_triangle_then_beta() {
        let alpha = DMatrix::from_element(1, 1, 2.0);
        assert_eq!(gamma_pack(&alpha, &[]).unwrap(), vec![2.0]);
        let alpha = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 3.0]);
        assert_eq!(gamma_pack(&alpha, &[4.0]).unwrap(), vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(alpha_index(3, 1, 2), 4);
        assert_eq!(alpha_index(3, 2, 1), 4);
        assert_eq!(alpha_index(3, 2, 2), 5);
        assert!(gamma_unpack(&[1.0, 2.0], 2, 0).is_err());
    }

    proptest! {
        #[test]
        fn gamma_round_trip(k in 1usize..5, d in 0usize..4, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut alpha = DMatrix::zeros(k, k);
            for a in 0..k {
                for b in a..k {
                    let v: f64 = rng.random_range(-5.0..5.0);
                    alpha[(a, b)] = v;
                    alpha[(b, a)] = v;
                }
            }
            let beta: Vec<f64> = (0..d).map(|_| rng.random_range(-5.0..5.0)).collect();
            let g = gamma_pack(&alpha, &beta).unwrap();
            prop_assert_eq!(g.len(), gamma_dim(k, d));
            let (a2, b2) = gamma_unpack(&g, k, d).unwrap();
            prop_assert_eq!(a2, alpha);
            prop_assert_eq!(b2, beta);
        }
    }

    #[test]
    fn complete_log_likelihood_identity_cases() {
        let theta = one_block(0.0);
        assert_relative_eq!(complete_log_likelihood(&two_node(0), &[0, 0], &theta), -1.0, epsilon = 1e-15);
        assert_relative_eq!(
            complete_log_likelihood(&two_node(2), &[0, 0], &theta),
            -1.0 - 2f64.ln(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn free_parameter_count() {
        let theta = ModelParams::new(vec![0.5, 0.5], DMatrix::zeros(2, 2), vec![0.0; 4]).unwrap();
        assert_eq!(theta.free_parameter_count(), 1 + 3 + 4);
    }

    #[test]
    fn params_reject_invalid() {
        assert!(ModelParams::new(vec![0.3, 0.3], DMatrix::zeros(2, 2), vec![]).is_err());
        let asym = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 2.0, 0.0]);
        assert!(ModelParams::new(vec![0.5, 0.5], asym, vec![]).is_err());
        assert!(ModelParams::new(vec![1.0], DMatrix::zeros(2, 2), vec![]).is_err());
    }

    #[test]
    fn params_json_round_trip() {
        let theta = ModelParams::new(
            vec![0.25, 0.75],
            DMatrix::from_row_slice(2, 2, &[0.1, -0.2, -0.2, 1.0 / 3.0]),
            vec![std::f64::consts::PI],
        )
        .unwrap();
        let s = serde_json::to_string(&theta).unwrap();
        let back: ModelParams = serde_json::from_str(&s).unwrap();
        assert_eq!(back, theta);
    }

    #[test]
    fn enumeration_single_block_equals_complete() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Covariates::gaussian(5, 2, 0.5, &mut rng);
        let theta = ModelParams::new(vec![1.0], DMatrix::from_element(1, 1, 0.7), vec![0.3, -0.4]).unwrap();
        let (z, net) = simulate(&theta, &x, &mut rng).unwrap();
        assert_relative_eq!(
            log_likelihood_enumerate(&net, &theta).unwrap(),
            complete_log_likelihood(&net, &z, &theta),
            epsilon = 1e-12
        );
        let post = posterior_enumerate(&net, &theta).unwrap();
        assert_eq!(post.probs, vec![1.0]);
    }

    #[test]
    fn enumeration_exchangeable_blocks() {
        let net = two_node(3);
        let theta = ModelParams::new(vec![0.5, 0.5], DMatrix::from_element(2, 2, 0.4), vec![]).unwrap();
        // four equally likely assignments, each with the same complete likelihood
        let cll = complete_log_likelihood(&net, &[0, 1], &theta);
        assert_relative_eq!(
            log_likelihood_enumerate(&net, &theta).unwrap(),
            cll + 4f64.ln(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn enumeration_cap_is_enforced() {
        let net = ObservedNetwork::new(21, vec![0; n_pairs(21)], Covariates::empty(21)).unwrap();
        let theta = ModelParams::new(vec![0.5, 0.5], DMatrix::zeros(2, 2), vec![]).unwrap();
        assert!(matches!(
            log_likelihood_enumerate(&net, &theta),
            Err(SbmError::EnumerationCap { .. })
        ));
        assert!(log_likelihood_enumerate_with_cap(&net, &theta, 1 << 21).is_ok());
    }

    #[test]
    fn prior_at_mode() {
        let hyper = PriorHyper::new(vec![0.3, -0.1, 2.0, 0.5], DMatrix::identity(4, 4), vec![1.0, 1.0]).unwrap();
        let theta = ModelParams::from_gamma(vec![0.5, 0.5], &hyper.gamma0, 1).unwrap();
        let expected = -(4.0 / 2.0) * (2.0 * std::f64::consts::PI).ln();
        assert_relative_eq!(log_prior(&theta, &hyper), expected, epsilon = 1e-12);
        let boundary = ModelParams::from_gamma(vec![0.0, 1.0], &hyper.gamma0, 1).unwrap();
        assert_eq!(log_prior(&boundary, &hyper), f64::NEG_INFINITY);
    }

    #[test]
    fn prior_rejects_bad_hyper() {
        assert!(PriorHyper::new(vec![0.0], DMatrix::identity(1, 1), vec![0.0]).is_err());
        assert!(PriorHyper::new(vec![0.0], DMatrix::from_element(1, 1, -1.0), vec![1.0]).is_err());
    }

    #[test]
    fn simulation_design_matches_reference_vector() {
        let h = PriorHyper::simulation_design(2, 4);
        assert_eq!(h.gamma0, vec![1.0, 0.0, 3.0, 1.1, 2.2, 0.1, -0.3]);
        assert_eq!(h.e0, vec![3.0, 3.0]);
        assert_eq!(h.v0, DMatrix::identity(7, 7) * 0.1);
        assert_eq!(h.d(), 4);
    }

    #[test]
    fn simulate_zero_beta_ignores_covariates() {
        let theta = ModelParams::new(
            vec![0.4, 0.6],
            DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 2.0]),
            vec![0.0, 0.0],
        )
        .unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(99);
        let x1 = Covariates::gaussian(15, 2, 1.0, &mut r);
        let x2 = Covariates::gaussian(15, 2, 3.0, &mut r);
        let (z1, n1) = simulate(&theta, &x1, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let (z2, n2) = simulate(&theta, &x2, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(z1, z2);
        assert_eq!(n1.counts(), n2.counts());
    }

    #[test]
    fn simulate_is_reproducible() {
        let theta = PriorHyper::simulation_design(2, 4).sample(&mut ChaCha8Rng::seed_from_u64(1));
        let x = Covariates::gaussian(20, 4, 0.4, &mut ChaCha8Rng::seed_from_u64(2));
        let a = simulate(&theta, &x, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = simulate(&theta, &x, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn permutation_relabels_consistently() {
        let theta = ModelParams::new(
            vec![0.2, 0.3, 0.5],
            DMatrix::from_row_slice(3, 3, &[1.0, 2.0, 3.0, 2.0, 4.0, 5.0, 3.0, 5.0, 6.0]),
            vec![],
        )
        .unwrap();
        let perm = [2, 0, 1];
        let p = theta.permuted(&perm);
        assert_eq!(p.nu, vec![0.5, 0.2, 0.3]);
        assert_eq!(p.alpha[(0, 0)], 6.0);
        assert_eq!(p.alpha[(0, 1)], 3.0);
        assert_eq!(p.alpha[(1, 2)], 2.0);
    }
}
