use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use sbmreg::model::{ModelParams, ObservedNetwork, PriorHyper};
use sbmreg::proxy::build_proxy;
use sbmreg::smc::SmcConfig;
use sbmreg::validation::{chi_square_uniform, sbc_run, sbc_run_with, SbcDesign, SbcMethod, Sampler};
use sbmreg::vem::VemConfig;
use sbmreg::workflow::fit_aligned;

// Draws that ignore the data are exactly calibrated: the true parameter and the
// draws are then iid from the prior.
#[test]
fn prior_draws_are_calibrated() {
    let hyper = PriorHyper::simulation_design(2, 1);
    let design = SbcDesign { replicates: 200, n: 6, seed: 11, ..Default::default() };
    let res = sbc_run(&design, &hyper, &[SbcMethod::PriorOnly], 20, &VemConfig::default(), &SmcConfig::default()).unwrap();
    assert!(res.failures.is_empty());
    for phi in &res.battery {
        let p = chi_square_uniform(&res.u_values(&phi.name, "prior-only"), 20);
        assert!(p > 1e-4, "{}: p = {p}", phi.name);
    }
}

// A sampler whose spread is ten times too narrow must be rejected.
#[test]
fn overconfident_sampler_is_flagged() {
    let hyper = PriorHyper::simulation_design(2, 2);
    let vem = VemConfig::default();
    let narrow = |net: &ObservedNetwork, seed: u64| {
        let fit = fit_aligned(net, &hyper, &vem, seed)?;
        let proxy = build_proxy(net, &fit, &hyper)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mean = proxy.gamma_mean().clone();
        (0..100)
            .map(|_| {
                let (_, theta) = proxy.sample(&mut rng);
                let g = &mean + (DVector::from_vec(theta.gamma()) - &mean) * 0.1;
                ModelParams::from_gamma(theta.nu.clone(), g.as_slice(), 2)
            })
            .collect()
    };
    let design = SbcDesign { replicates: 60, n: 15, seed: 5, ..Default::default() };
    let samplers: [(&str, &Sampler); 1] = [("narrow", &narrow)];
    let res = sbc_run_with(&design, &hyper, &samplers).unwrap();
    let beta2 = res.summary_for("Phi4", "narrow").unwrap();
    assert!(beta2.ks_pvalue < 1e-3, "{beta2:?}");
}

// With one block and no covariates the posterior is one-dimensional and the
// sampler started from the prior must be calibrated.
#[test]
fn smc_from_prior_is_calibrated_for_one_block() {
    let hyper = PriorHyper::simulation_design(1, 0);
    let design = SbcDesign { replicates: 150, n: 10, seed: 2, ..Default::default() };
    let smc = SmcConfig { particles: 200, ..Default::default() };
    let res = sbc_run(&design, &hyper, &[SbcMethod::SmcFromPrior], 20, &VemConfig::default(), &smc).unwrap();
    assert!(res.failures.is_empty());
    for phi in &res.battery {
        let p = chi_square_uniform(&res.u_values(&phi.name, "smc-from-prior"), 20);
        assert!(p > 1e-4, "{}: p = {p}", phi.name);
    }
}
