//! Simulation-based calibration: draw `theta` from the prior, simulate a network,
//! sample the posterior, and check that the rank of the truth within the sample is
//! uniform for a battery of label-invariant functions `Phi`.

use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Result, SbmError};
use crate::math::{mix64, stream_rng};
use crate::model::{simulate, Covariates, ModelParams, ObservedNetwork, PriorHyper};
use crate::proxy::build_proxy;
use crate::smc::{resample_multinomial_n, run_smc, SmcConfig, StartDistribution};
use crate::vem::VemConfig;
use crate::workflow::fit_aligned;

/// Number of bins used by [`kl_to_uniform`] in the summaries.
pub const DEFAULT_BINS: usize = 20;

/// One function of the battery, a sum of label-invariant terms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Phi {
    pub name: String,
    /// `sum_r beta_r`
    pub sum_beta: bool,
    /// `beta_r` (0-based).
    pub beta: Option<usize>,
    /// `sum_k alpha_kk`
    pub diag_alpha: bool,
    /// `sum_{k,l} alpha_kl` over ordered pairs.
    pub sum_alpha: bool,
    /// `|nu_1 - nu_2|`, only meaningful for `K = 2`.
    pub nu_gap: bool,
}

impl Phi {
    fn named(name: &str) -> Self {
        Phi { name: name.to_string(), sum_beta: false, beta: None, diag_alpha: false, sum_alpha: false, nu_gap: false }
    }

    pub fn eval(&self, theta: &ModelParams) -> f64 {
        let mut v = 0.0;
        if self.sum_beta {
            v += theta.beta.iter().sum::<f64>();
        }
        if let Some(r) = self.beta {
            v += theta.beta[r];
        }
        if self.diag_alpha {
            v += theta.alpha.diagonal().sum();
        }
        if self.sum_alpha {
            v += theta.alpha.sum();
        }
        if self.nu_gap {
            v += (theta.nu[0] - theta.nu[1]).abs();
        }
        v
    }
}

/// The battery for `K` blocks and `d` covariates.
///
/// For `K = 2, d = 4` these are the fourteen functions
/// `Phi1 = sum beta`, `Phi2 = |nu1 - nu2|`, `Phi3..Phi6 = beta_1..beta_4`,
/// `Phi7 = alpha_11 + alpha_22`, `Phi8 = sum alpha`, `Phi9..Phi12 = sum alpha + beta_r`,
/// `Phi13 = alpha_11 + alpha_22 + sum beta`, `Phi14 = sum alpha + sum beta + |nu1 - nu2|`.
/// Otherwise the diagonal sum runs over all `K` blocks, the proportion gap is dropped
/// unless `K = 2`, and functions of missing covariates are dropped. Names keep the
/// canonical numbering.
pub fn phi_battery(k: usize, d: usize) -> Vec<Phi> {
    let mut out = Vec::new();
    if d > 0 {
        out.push(Phi { sum_beta: true, ..Phi::named("Phi1") });
    }
    if k == 2 {
        out.push(Phi { nu_gap: true, ..Phi::named("Phi2") });
    }
    for r in 0..d.min(4) {
        out.push(Phi { beta: Some(r), ..Phi::named(&format!("Phi{}", 3 + r)) });
    }
    out.push(Phi { diag_alpha: true, ..Phi::named("Phi7") });
    out.push(Phi { sum_alpha: true, ..Phi::named("Phi8") });
    for r in 0..d.min(4) {
        out.push(Phi { sum_alpha: true, beta: Some(r), ..Phi::named(&format!("Phi{}", 9 + r)) });
    }
    if d > 0 {
        out.push(Phi { diag_alpha: true, sum_beta: true, ..Phi::named("Phi13") });
    }
    out.push(Phi { sum_alpha: true, sum_beta: true, nu_gap: k == 2, ..Phi::named("Phi14") });
    out
}

/// Number of sample members with `Phi(theta_m) < Phi(theta_true)` (strict).
pub fn u_statistic(phi: &Phi, theta_true: &ModelParams, sample: &[ModelParams]) -> usize {
    let truth = phi.eval(theta_true);
    sample.iter().filter(|t| phi.eval(t) < truth).count()
}

/// KL divergence of the binned empirical distribution of `u` (values in `0..=m`)
/// from the uniform, with 0.5 added to every bin count.
pub fn kl_to_uniform(u: &[usize], m: usize, bins: usize) -> Result<f64> {
    if bins < 2 {
        return Err(SbmError::InvalidParameter(format!("need at least 2 bins, got {bins}")));
    }
    let mut counts = vec![0.5; bins];
    for &v in u {
        if v > m {
            return Err(SbmError::InvalidParameter(format!("rank {v} exceeds {m}")));
        }
        counts[v * bins / (m + 1)] += 1.0;
    }
    let total: f64 = counts.iter().sum();
    Ok(counts
        .iter()
        .map(|c| {
            let p = c / total;
            p * (p * bins as f64).ln()
        })
        .sum())
}

/// Kolmogorov–Smirnov distance between the ecdf of `u` and the discrete uniform on
/// `0..=m`, with the asymptotic p-value (Stephens' small-sample correction).
pub fn ks_uniform(u: &[usize], m: usize) -> (f64, f64) {
    let s = u.len();
    if s == 0 {
        return (0.0, 1.0);
    }
    let mut counts = vec![0usize; m + 1];
    for &v in u {
        counts[v.min(m)] += 1;
    }
    let mut cum = 0usize;
    let mut dist: f64 = 0.0;
    for (v, c) in counts.iter().enumerate() {
        cum += c;
        let emp = cum as f64 / s as f64;
        let unif = (v + 1) as f64 / (m + 1) as f64;
        dist = dist.max((emp - unif).abs());
    }
    let sq = (s as f64).sqrt();
    (dist, kolmogorov_sf((sq + 0.12 + 0.11 / sq) * dist))
}

/// `P(K > x)` for the Kolmogorov distribution.
pub fn kolmogorov_sf(x: f64) -> f64 {
    if x < 0.2 {
        return 1.0;
    }
    let mut sum = 0.0;
    for j in 1..=100 {
        let term = (-2.0 * (j * j) as f64 * x * x).exp();
        sum += if j % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// Pearson chi-square test of `u` against the uniform on `0..=m`; returns the p-value.
pub fn chi_square_uniform(u: &[usize], m: usize) -> f64 {
    let mut counts = vec![0.0; m + 1];
    for &v in u {
        counts[v.min(m)] += 1.0;
    }
    let expected = u.len() as f64 / (m + 1) as f64;
    let stat: f64 = counts.iter().map(|c| (c - expected).powi(2) / expected).sum();
    let dist = ChiSquared::new(m as f64).expect("positive degrees of freedom");
    1.0 - dist.cdf(stat)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SbcMethod {
    /// Draws from the proxy posterior alone.
    ProxyOnly,
    /// Tempered sampler started at the proxy.
    SmcFromApprox,
    /// Tempered sampler started at the prior.
    SmcFromPrior,
    /// Prior draws that ignore the data (calibrated, but uninformative).
    PriorOnly,
}

impl SbcMethod {
    pub fn name(self) -> &'static str {
        match self {
            SbcMethod::ProxyOnly => "proxy-only",
            SbcMethod::SmcFromApprox => "smc-from-approx",
            SbcMethod::SmcFromPrior => "smc-from-prior",
            SbcMethod::PriorOnly => "prior-only",
        }
    }
}

impl std::str::FromStr for SbcMethod {
    type Err = SbmError;

    fn from_str(s: &str) -> Result<Self> {
        [SbcMethod::ProxyOnly, SbcMethod::SmcFromApprox, SbcMethod::SmcFromPrior, SbcMethod::PriorOnly]
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| SbmError::Input(format!("unknown SBC method '{s}'")))
    }
}

/// Replicate layout shared by every sampler.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SbcDesign {
    pub replicates: usize,
    pub n: usize,
    /// Standard deviation of the fixed covariates.
    pub covariate_sd: f64,
    pub seed: u64,
    pub bins: usize,
}

impl Default for SbcDesign {
    fn default() -> Self {
        SbcDesign { replicates: 50, n: 20, covariate_sd: 0.4, seed: 0, bins: DEFAULT_BINS }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SbcRecord {
    pub replicate: usize,
    pub phi_name: String,
    pub method: String,
    #[serde(rename = "U")]
    pub u: usize,
    #[serde(rename = "M")]
    pub m: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SbcSummary {
    pub phi_name: String,
    pub method: String,
    #[serde(rename = "KL")]
    pub kl: f64,
    pub ks_distance: f64,
    pub ks_pvalue: f64,
    pub replicates: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SbcFailure {
    pub replicate: usize,
    pub method: String,
    pub message: String,
}

#[derive(Debug, Clone)]
pub struct SbcResult {
    pub battery: Vec<Phi>,
    pub records: Vec<SbcRecord>,
    pub summary: Vec<SbcSummary>,
    pub failures: Vec<SbcFailure>,
}

impl SbcResult {
    /// U values for one function and method, in replicate order.
    pub fn u_values(&self, phi_name: &str, method: &str) -> Vec<usize> {
        self.records
            .iter()
            .filter(|r| r.phi_name == phi_name && r.method == method)
            .map(|r| r.u)
            .collect()
    }

    pub fn summary_for(&self, phi_name: &str, method: &str) -> Option<&SbcSummary> {
        self.summary.iter().find(|s| s.phi_name == phi_name && s.method == method)
    }
}

/// A posterior sampler: given the simulated network and a seed, returns unweighted
/// draws of `theta`.
pub type Sampler<'a> = dyn Fn(&ObservedNetwork, u64) -> Result<Vec<ModelParams>> + Sync + 'a;

/// Runs the calibration scheme with arbitrary samplers, each labelled by a name.
pub fn sbc_run_with(design: &SbcDesign, hyper: &PriorHyper, samplers: &[(&str, &Sampler)]) -> Result<SbcResult> {
    if design.replicates == 0 || design.n < 2 {
        return Err(SbmError::InvalidParameter("need at least one replicate and n >= 2".into()));
    }
    let battery = phi_battery(hyper.k(), hyper.d());
    let x = Covariates::gaussian(design.n, hyper.d(), design.covariate_sd, &mut stream_rng(design.seed, 0, 0));

    let per_rep: Vec<(Vec<SbcRecord>, Vec<SbcFailure>)> = (0..design.replicates)
        .into_par_iter()
        .map(|s| {
            let mut rng = stream_rng(design.seed, s as u64 + 1, 0);
            let theta = hyper.sample(&mut rng);
            let mut records = Vec::new();
            let mut failures = Vec::new();
            let net = match simulate(&theta, &x, &mut rng) {
                Ok((_, net)) => net,
                Err(e) => {
                    for (name, _) in samplers {
                        failures.push(SbcFailure { replicate: s, method: name.to_string(), message: e.to_string() });
                    }
                    return (records, failures);
                }
            };
            let rep_seed = mix64(design.seed ^ mix64(s as u64 + 1));
            for (name, sampler) in samplers {
                match sampler(&net, rep_seed) {
                    Ok(sample) if !sample.is_empty() => {
                        for phi in &battery {
                            records.push(SbcRecord {
                                replicate: s,
                                phi_name: phi.name.clone(),
                                method: name.to_string(),
                                u: u_statistic(phi, &theta, &sample),
                                m: sample.len(),
                            });
                        }
                    }
                    Ok(_) => failures.push(SbcFailure {
                        replicate: s,
                        method: name.to_string(),
                        message: "sampler returned no draws".into(),
                    }),
                    Err(e) => {
                        log::warn!("replicate {s}, {name}: {e}");
                        failures.push(SbcFailure { replicate: s, method: name.to_string(), message: e.to_string() });
                    }
                }
            }
            (records, failures)
        })
        .collect();

    let mut records = Vec::new();
    let mut failures = Vec::new();
    for (r, f) in per_rep {
        records.extend(r);
        failures.extend(f);
    }
    if !failures.is_empty() {
        log::warn!("{} sampler runs failed and were skipped", failures.len());
    }

    let mut summary = Vec::new();
    for phi in &battery {
        for (name, _) in samplers {
            let rows: Vec<&SbcRecord> =
                records.iter().filter(|r| r.phi_name == phi.name && r.method == *name).collect();
            if rows.is_empty() {
                continue;
            }
            let m = rows[0].m;
            let u: Vec<usize> = rows.iter().map(|r| r.u).collect();
            let (ks_distance, ks_pvalue) = ks_uniform(&u, m);
            summary.push(SbcSummary {
                phi_name: phi.name.clone(),
                method: name.to_string(),
                kl: kl_to_uniform(&u, m, design.bins)?,
                ks_distance,
                ks_pvalue,
                replicates: u.len(),
            });
        }
    }
    Ok(SbcResult { battery, records, summary, failures })
}

fn resample_thetas(out: &crate::smc::SmcOutput, count: usize, rng: &mut ChaCha8Rng) -> Vec<ModelParams> {
    resample_multinomial_n(&out.weights, count, rng).into_iter().map(|i| out.particles[i].theta.clone()).collect()
}

/// Runs the calibration scheme for the built-in methods. Each method yields `draws`
/// unweighted parameter draws; weighted particle systems are resampled first.
pub fn sbc_run(
    design: &SbcDesign,
    hyper: &PriorHyper,
    methods: &[SbcMethod],
    draws: usize,
    vem: &VemConfig,
    smc: &SmcConfig,
) -> Result<SbcResult> {
    if draws == 0 {
        return Err(SbmError::InvalidParameter("draws must be positive".into()));
    }
    smc.validate()?;
    let samplers: Vec<(SbcMethod, Box<Sampler>)> = methods
        .iter()
        .map(|&method| {
            let f: Box<Sampler> = Box::new(move |net: &ObservedNetwork, seed: u64| {
                let mut rng = stream_rng(seed, method as u64 + 1, 1);
                let smc_cfg = SmcConfig { seed: mix64(seed ^ (method as u64 + 1)), ..smc.clone() };
                match method {
                    SbcMethod::PriorOnly => Ok((0..draws).map(|_| hyper.sample(&mut rng)).collect()),
                    SbcMethod::ProxyOnly => {
                        let fit = fit_aligned(net, hyper, vem, seed)?;
                        let proxy = build_proxy(net, &fit, hyper)?;
                        Ok((0..draws).map(|_| proxy.sample(&mut rng).1).collect())
                    }
                    SbcMethod::SmcFromApprox => {
                        let fit = fit_aligned(net, hyper, vem, seed)?;
                        let proxy = build_proxy(net, &fit, hyper)?;
                        let out = run_smc(net, StartDistribution::Proxy(&proxy), hyper, &smc_cfg)?;
                        Ok(resample_thetas(&out, draws, &mut rng))
                    }
                    SbcMethod::SmcFromPrior => {
                        let out = run_smc(net, StartDistribution::Prior, hyper, &smc_cfg)?;
                        Ok(resample_thetas(&out, draws, &mut rng))
                    }
                }
            });
            (method, f)
        })
        .collect();
    let named: Vec<(&str, &Sampler)> = samplers.iter().map(|(m, f)| (m.name(), f.as_ref())).collect();
    sbc_run_with(design, hyper, &named)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};

    fn theta(nu: [f64; 2], alpha: [f64; 4], beta: Vec<f64>) -> ModelParams {
        ModelParams::new(nu.to_vec(), DMatrix::from_row_slice(2, 2, &alpha), beta).unwrap()
    }

    fn by_name<'a>(b: &'a [Phi], name: &str) -> &'a Phi {
        b.iter().find(|p| p.name == name).unwrap()
    }

    #[test]
    fn canonical_battery_has_fourteen_functions() {
        let b = phi_battery(2, 4);
        assert_eq!(b.len(), 14);
        let names: Vec<String> = (1..=14).map(|i| format!("Phi{i}")).collect();
        assert_eq!(b.iter().map(|p| p.name.clone()).collect::<Vec<_>>(), names);
    }

    #[test]
    fn battery_values() {
        let b = phi_battery(2, 4);
        let t = theta([0.3, 0.7], [1.0, 2.0, 2.0, 3.0], vec![0.5, -1.0, 2.0, 0.25]);
        assert!((by_name(&b, "Phi2").eval(&t) - 0.4).abs() < 1e-12);
        assert_eq!(by_name(&b, "Phi8").eval(&t), 8.0);
        assert_eq!(by_name(&b, "Phi7").eval(&t), 4.0);
        assert_eq!(by_name(&b, "Phi1").eval(&t), 1.75);
        assert_eq!(by_name(&b, "Phi4").eval(&t), -1.0);
        assert_eq!(by_name(&b, "Phi10").eval(&t), 7.0);
        assert_eq!(by_name(&b, "Phi11").eval(&t), 10.0);
        assert_eq!(by_name(&b, "Phi13").eval(&t), 5.75);
        assert!((by_name(&b, "Phi14").eval(&t) - (8.0 + 1.75 + 0.4)).abs() < 1e-12);
    }

    #[test]
    fn generalized_battery_drops_missing_terms() {
        let names = |k, d| phi_battery(k, d).into_iter().map(|p| p.name).collect::<Vec<_>>();
        assert_eq!(names(3, 1), ["Phi1", "Phi3", "Phi7", "Phi8", "Phi9", "Phi13", "Phi14"]);
        assert_eq!(names(1, 0), ["Phi7", "Phi8", "Phi14"]);
        assert!(phi_battery(3, 2).iter().all(|p| !p.nu_gap));
        assert_eq!(phi_battery(2, 6).len(), 14);
    }

    #[test]
    fn battery_is_label_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let hyper = PriorHyper::simulation_design(2, 4);
        let b = phi_battery(2, 4);
        for _ in 0..20 {
            let t = hyper.sample(&mut rng);
            for perm in [[0, 1], [1, 0]] {
                let p = t.permuted(&perm);
                for phi in &b {
                    assert!((phi.eval(&t) - phi.eval(&p)).abs() < 1e-12, "{}", phi.name);
                }
            }
        }
        let hyper3 = PriorHyper::simulation_design(3, 2);
        let t = hyper3.sample(&mut rng);
        for phi in phi_battery(3, 2) {
            assert!((phi.eval(&t) - phi.eval(&t.permuted(&[2, 0, 1]))).abs() < 1e-12);
        }
    }

    #[test]
    fn u_statistic_extremes_and_ties() {
        let phi = &phi_battery(2, 1)[0];
        let t = theta([0.5, 0.5], [0.0; 4], vec![1.0]);
        let below: Vec<_> = (0..5).map(|i| theta([0.5, 0.5], [0.0; 4], vec![i as f64 * 0.1])).collect();
        let above: Vec<_> = (0..5).map(|i| theta([0.5, 0.5], [0.0; 4], vec![2.0 + i as f64])).collect();
        assert_eq!(u_statistic(phi, &t, &below), 5);
        assert_eq!(u_statistic(phi, &t, &above), 0);
        assert_eq!(u_statistic(phi, &t, &[t.clone(), t.clone()]), 0);
    }

    #[test]
    fn u_statistic_uniform_for_iid_draws() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let hyper = PriorHyper::simulation_design(2, 1);
        let phi = &phi_battery(2, 1)[0];
        let u: Vec<usize> = (0..2000)
            .map(|_| {
                let truth = hyper.sample(&mut rng);
                let sample: Vec<_> = (0..20).map(|_| hyper.sample(&mut rng)).collect();
                u_statistic(phi, &truth, &sample)
            })
            .collect();
        assert!(u.iter().all(|&v| v <= 20));
        let p = chi_square_uniform(&u, 20);
        assert!(p > 0.01, "p = {p}");
    }

    #[test]
    fn kl_examples() {
        let uniform: Vec<usize> = (0..20).flat_map(|v| std::iter::repeat(v).take(500)).collect();
        assert!(kl_to_uniform(&uniform, 19, 20).unwrap() < 1e-3);
        let spike = vec![3usize; 100];
        let kl = kl_to_uniform(&spike, 19, 20).unwrap();
        let (hi, lo) = (100.5 / 110.0, 0.5 / 110.0);
        let closed = hi * (hi * 20.0f64).ln() + 19.0 * lo * (lo * 20.0f64).ln();
        assert!((kl - closed).abs() < 1e-12);
        // Smoothing pulls the degenerate case below log 20.
        assert!(kl < 20f64.ln() && kl > 0.8 * 20f64.ln());
        assert!(kl_to_uniform(&[1], 5, 1).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let u: Vec<usize> = (0..30).map(|_| rng.random_range(0..=40)).collect();
            assert!(kl_to_uniform(&u, 40, 20).unwrap() >= 0.0);
        }
    }

    #[test]
    fn ks_distance_and_pvalue() {
        let u: Vec<usize> = (0..=99).collect();
        let (d, p) = ks_uniform(&u, 99);
        assert!(d < 1e-12 && p > 0.99);
        let (d, p) = ks_uniform(&[0; 50], 99);
        assert!((d - 0.99).abs() < 1e-12 && p < 1e-10);
        // Known value of the Kolmogorov survival function.
        assert!((kolmogorov_sf(1.36) - 0.0494).abs() < 1e-3);
    }

    #[test]
    fn method_names_round_trip() {
        for m in [SbcMethod::ProxyOnly, SbcMethod::SmcFromApprox, SbcMethod::SmcFromPrior, SbcMethod::PriorOnly] {
            assert_eq!(m.name().parse::<SbcMethod>().unwrap(), m);
        }
        assert!("exact".parse::<SbcMethod>().is_err());
    }

    #[test]
    fn sbc_is_reproducible_and_bounded() {
        let hyper = PriorHyper::simulation_design(2, 1);
        let design = SbcDesign { replicates: 4, n: 8, seed: 3, ..Default::default() };
        let smc = SmcConfig { particles: 100, ..Default::default() };
        let methods = [SbcMethod::ProxyOnly, SbcMethod::SmcFromApprox];
        let a = sbc_run(&design, &hyper, &methods, 50, &VemConfig::default(), &smc).unwrap();
        let b = sbc_run(&design, &hyper, &methods, 50, &VemConfig::default(), &smc).unwrap();
        assert_eq!(a.records, b.records);
        assert!(a.records.iter().all(|r| r.u <= r.m && r.m == 50));
        assert_eq!(a.records.len(), (4 * 2 - a.failures.len()) * phi_battery(2, 1).len());
        assert!(a.summary.iter().all(|s| s.kl >= 0.0));
    }
}
