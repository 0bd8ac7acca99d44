//! End-to-end pipelines: variational fit, proxy, tempered sampler, and the
//! sweep over the number of blocks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::math::mix64;
use crate::model::{ObservedNetwork, PriorHyper};
use crate::posterior::{k_posterior, KPosterior};
use crate::proxy::{build_proxy, build_proxy_map, ProxyPosterior};
use crate::smc::{run_smc, SmcConfig, SmcOutput, StartDistribution};
use crate::vem::{fit_map, fit_vem, pseudo_icl, VariationalFit, VemConfig};

const VEM_STREAM: u64 = 0x5645_4d00;

/// Output of a posterior run for one `K`.
#[derive(Debug, Clone)]
pub struct PosteriorRun {
    pub k: usize,
    /// Variational fit, relabeled to agree with the prior.
    pub fit: VariationalFit,
    pub pseudo_icl: f64,
    /// `None` in from-prior mode.
    pub proxy: Option<ProxyPosterior>,
    pub smc: SmcOutput,
}

/// Variational fit for `K` blocks, seeded from `seed`, with labels aligned to the prior.
pub fn fit_aligned(
    net: &ObservedNetwork,
    hyper: &PriorHyper,
    vem: &VemConfig,
    seed: u64,
) -> Result<VariationalFit> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix64(seed ^ VEM_STREAM));
    let fit = fit_vem(net, hyper.k(), vem, &mut rng)?;
    Ok(fit.aligned_to_prior(hyper))
}

/// Where the tempered sampler starts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Start {
    /// Proxy built from the variational EM estimate.
    #[default]
    Proxy,
    /// Proxy built from the penalized (prior-aware) variational estimate.
    MapProxy,
    /// The prior, `pi(theta) p_theta(Z)`.
    Prior,
}

/// Builds the proxy for `start` (`None` for [`Start::Prior`]).
pub fn make_proxy(
    net: &ObservedNetwork,
    fit: &VariationalFit,
    hyper: &PriorHyper,
    vem: &VemConfig,
    start: Start,
) -> Result<Option<ProxyPosterior>> {
    match start {
        Start::Prior => Ok(None),
        Start::Proxy => build_proxy(net, fit, hyper).map(Some),
        Start::MapProxy => {
            let map = fit_map(net, fit, hyper, vem)?;
            build_proxy_map(net, &map, hyper).map(Some)
        }
    }
}

/// Fit, proxy and tempered sampler for the number of blocks fixed by `hyper`.
pub fn sample_posterior(
    net: &ObservedNetwork,
    hyper: &PriorHyper,
    vem: &VemConfig,
    smc: &SmcConfig,
    start: Start,
) -> Result<PosteriorRun> {
    let fit = fit_aligned(net, hyper, vem, smc.seed)?;
    let icl = pseudo_icl(&fit, net);
    let proxy = make_proxy(net, &fit, hyper, vem, start)?;
    let out = match &proxy {
        Some(p) => run_smc(net, StartDistribution::Proxy(p), hyper, smc)?,
        None => run_smc(net, StartDistribution::Prior, hyper, smc)?,
    };
    Ok(PosteriorRun { k: hyper.k(), fit, pseudo_icl: icl, proxy, smc: out })
}

#[derive(Debug, Clone)]
pub struct KSelection {
    pub runs: Vec<PosteriorRun>,
    pub posterior: KPosterior,
}

impl KSelection {
    /// `K` with the largest pseudo-ICL.
    pub fn icl_choice(&self) -> usize {
        let mut best = &self.runs[0];
        for r in &self.runs[1..] {
            if r.pseudo_icl > best.pseudo_icl {
                best = r;
            }
        }
        best.k
    }
}

/// Runs [`sample_posterior`] for every `K` and forms the posterior over `K` from the
/// product evidence estimates. `hyper_for` supplies the prior for each `K`;
/// `prior_k` defaults to uniform.
pub fn select_k(
    net: &ObservedNetwork,
    ks: &[usize],
    hyper_for: impl Fn(usize) -> Result<PriorHyper> + Sync,
    prior_k: Option<&[f64]>,
    vem: &VemConfig,
    smc: &SmcConfig,
    start: Start,
) -> Result<KSelection> {
    let runs: Vec<PosteriorRun> = ks
        .par_iter()
        .map(|&k| {
            let cfg = SmcConfig { seed: mix64(smc.seed ^ (k as u64).wrapping_mul(0x9E37_79B9)), ..smc.clone() };
            sample_posterior(net, &hyper_for(k)?, vem, &cfg, start)
        })
        .collect::<Result<_>>()?;
    let evidences: Vec<(usize, f64)> = runs.iter().map(|r| (r.k, r.smc.log_evidence)).collect();
    let posterior = k_posterior(&evidences, prior_k)?;
    Ok(KSelection { runs, posterior })
}
