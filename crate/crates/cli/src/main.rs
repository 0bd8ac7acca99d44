//! `sbmreg`: fit, sample and validate Poisson block models with pair covariates.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use sbmreg::io;
use sbmreg::model::{simulate, Covariates, ObservedNetwork, PriorHyper};
use sbmreg::posterior::{
    correlation_from_covariance, graphon_mean, latent_coordinates, model_average, WeightedSample, DEFAULT_GRID,
};
use sbmreg::smc::SmcConfig;
use sbmreg::validation::{sbc_run, SbcDesign, SbcMethod};
use sbmreg::vem::{fit_vem_all, pseudo_icl, VemConfig};
use sbmreg::workflow::{sample_posterior, select_k, PosteriorRun, Start};
use sbmreg::SbmError;

#[derive(Parser)]
#[command(name = "sbmreg", version, about = "Bayesian Poisson stochastic block model with covariates")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Master seed; every random stream is derived from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Maximum number of worker threads.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// TOML configuration file (command-line flags take precedence).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, short, global = true)]
    out: Option<PathBuf>,
    /// More log output (repeatable).
    #[arg(long, short, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Subcommand)]
enum Command {
    /// Draw parameters (or read them) and simulate a network with covariates.
    Simulate(SimulateArgs),
    /// Variational EM over a range of K, with the pseudo-ICL table.
    FitVem(FitVemArgs),
    /// Tempered SMC sampling of the posterior for one K.
    Sample(SampleArgs),
    /// Posterior over K from the evidence estimates, with model averaging.
    SelectK(SelectKArgs),
    /// Residual graphon and latent coordinates from a particle file.
    Graphon(GraphonArgs),
    /// Simulation-based calibration.
    Sbc(SbcArgs),
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long, default_value_t = 2)]
    k: usize,
    #[arg(long, default_value_t = 40)]
    n: usize,
    #[arg(long, default_value_t = 4)]
    d: usize,
    /// Prior hyperparameters (JSON); default is the simulation design for (K, d).
    #[arg(long)]
    hyper: Option<PathBuf>,
    /// Fixed parameters (JSON) instead of a prior draw.
    #[arg(long)]
    theta: Option<PathBuf>,
    /// Standard deviation of the Gaussian covariates.
    #[arg(long)]
    covariate_sd: Option<f64>,
}

#[derive(Args)]
struct DataArgs {
    /// Dense CSV or `n=`-headed edge list.
    #[arg(long)]
    network: PathBuf,
    /// Long CSV `i,j,x1,...,xd`; omit for no covariates.
    #[arg(long)]
    covariates: Option<PathBuf>,
}

#[derive(Args, Default)]
struct SmcArgs {
    /// Number of particles M.
    #[arg(long)]
    particles: Option<usize>,
    /// Conditional-ESS fraction for choosing temperatures.
    #[arg(long)]
    cess: Option<f64>,
    /// ESS fraction below which particles are resampled.
    #[arg(long)]
    ess: Option<f64>,
    /// Kernel sweeps per temperature.
    #[arg(long)]
    sweeps: Option<usize>,
    /// Variational EM restarts.
    #[arg(long)]
    restarts: Option<usize>,
}

#[derive(Args)]
struct FitVemArgs {
    #[command(flatten)]
    data: DataArgs,
    /// K values: `3`, `1-4` or `1,2,5`.
    #[arg(long, default_value = "1-4")]
    k: String,
    #[arg(long)]
    restarts: Option<usize>,
}

#[derive(Args)]
struct SampleArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    k: usize,
    #[arg(long)]
    hyper: Option<PathBuf>,
    /// Start the tempering path at the prior.
    #[arg(long, conflicts_with = "start")]
    from_prior: bool,
    /// Starting distribution: proxy, map-proxy or prior.
    #[arg(long, value_parser = parse_start)]
    start: Option<Start>,
    #[command(flatten)]
    smc: SmcArgs,
}

#[derive(Args)]
struct SelectKArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value = "1-4")]
    k: String,
    /// Hyperparameter files, one per K: a path containing `{K}`, e.g. `prior_k{K}.json`.
    #[arg(long)]
    hyper: Option<String>,
    #[arg(long, value_parser = parse_start)]
    start: Option<Start>,
    #[arg(long)]
    from_prior: bool,
    #[command(flatten)]
    smc: SmcArgs,
}

#[derive(Args)]
struct GraphonArgs {
    /// Particle file written by `sample`.
    #[arg(long)]
    particles: PathBuf,
    #[arg(long)]
    grid: Option<usize>,
}

#[derive(Args)]
struct SbcArgs {
    #[arg(long, default_value_t = 2)]
    k: usize,
    #[arg(long, default_value_t = 4)]
    d: usize,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    replicates: Option<usize>,
    /// Posterior draws per replicate (defaults to the particle count).
    #[arg(long)]
    draws: Option<usize>,
    /// Comma-separated: proxy-only, smc-from-approx, smc-from-prior, prior-only.
    #[arg(long, default_value = "proxy-only,smc-from-approx")]
    methods: String,
    #[arg(long)]
    hyper: Option<PathBuf>,
    #[arg(long)]
    covariate_sd: Option<f64>,
    #[command(flatten)]
    smc: SmcArgs,
}

/// Contents of the `--config` file. Every table is optional.
#[derive(Debug, Default, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    seed: Option<u64>,
    threads: Option<usize>,
    out: Option<PathBuf>,
    grid: Option<usize>,
    start: Option<Start>,
    vem: VemConfig,
    smc: SmcConfig,
    sbc: SbcDesign,
}

/// Prior hyperparameters as stored in JSON. `v0` is a matrix or a multiple of the identity.
#[derive(Debug, Deserialize)]
struct HyperSpec {
    gamma0: Vec<f64>,
    v0: V0Spec,
    e0: Vec<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum V0Spec {
    Scale(f64),
    Matrix(Vec<Vec<f64>>),
}

fn parse_start(s: &str) -> Result<Start, String> {
    match s {
        "proxy" => Ok(Start::Proxy),
        "map-proxy" => Ok(Start::MapProxy),
        "prior" => Ok(Start::Prior),
        other => Err(format!("unknown start '{other}' (expected proxy, map-proxy or prior)")),
    }
}

fn parse_k_range(s: &str) -> anyhow::Result<Vec<usize>> {
    let bad = || SbmError::Input(format!("bad K specification '{s}'"));
    let ks: Vec<usize> = if let Some((a, b)) = s.split_once('-') {
        let (a, b): (usize, usize) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
        (a..=b).collect()
    } else {
        s.split(',').map(|t| t.trim().parse().map_err(|_| bad())).collect::<Result<_, _>>()?
    };
    if ks.is_empty() || ks.contains(&0) {
        return Err(SbmError::Input(format!("K values must be >= 1, got '{s}'")).into());
    }
    Ok(ks)
}

fn load_hyper(path: Option<&Path>, k: usize, d: usize) -> anyhow::Result<PriorHyper> {
    let Some(path) = path else {
        return Ok(PriorHyper::simulation_design(k, d));
    };
    let spec: HyperSpec = io::read_json(path)?;
    let dim = spec.gamma0.len();
    let v0 = match spec.v0 {
        V0Spec::Scale(s) => DMatrix::identity(dim, dim) * s,
        V0Spec::Matrix(rows) => {
            if rows.len() != dim || rows.iter().any(|r| r.len() != dim) {
                return Err(SbmError::Input(format!("{}: v0 must be {dim}x{dim}", path.display())).into());
            }
            DMatrix::from_fn(dim, dim, |a, b| rows[a][b])
        }
    };
    let hyper = PriorHyper::new(spec.gamma0, v0, spec.e0)?;
    if hyper.k() != k || hyper.d() != d {
        return Err(SbmError::Input(format!(
            "{}: hyperparameters are for K={}, d={}, but K={k}, d={d} was requested",
            path.display(),
            hyper.k(),
            hyper.d()
        ))
        .into());
    }
    Ok(hyper)
}

/// Effective settings after layering defaults, the config file and flags.
struct Run {
    seed: u64,
    out: PathBuf,
    threads: Option<usize>,
    file: FileConfig,
    inputs: Vec<PathBuf>,
    outputs: Vec<String>,
}

impl Run {
    fn new(common: &Common) -> anyhow::Result<Self> {
        let file: FileConfig = match &common.config {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                toml::from_str(&text).map_err(|e| SbmError::Input(format!("{}: {e}", p.display())))?
            }
            None => FileConfig::default(),
        };
        let mut inputs = Vec::new();
        if let Some(p) = &common.config {
            inputs.push(p.clone());
        }
        Ok(Run {
            seed: common.seed.or(file.seed).unwrap_or(0),
            out: common.out.clone().or_else(|| file.out.clone()).unwrap_or_else(|| PathBuf::from(".")),
            threads: common.threads.or(file.threads),
            file,
            inputs,
            outputs: Vec::new(),
        })
    }

    fn input(&mut self, p: &Path) -> PathBuf {
        self.inputs.push(p.to_path_buf());
        p.to_path_buf()
    }

    fn output(&mut self, name: &str) -> PathBuf {
        self.outputs.push(name.to_string());
        self.out.join(name)
    }

    fn vem(&self, restarts: Option<usize>) -> VemConfig {
        let mut v = self.file.vem.clone();
        if let Some(r) = restarts {
            v.restarts = r;
        }
        v
    }

    fn smc(&self, a: &SmcArgs) -> anyhow::Result<SmcConfig> {
        let mut c = self.file.smc.clone();
        c.seed = self.seed;
        if let Some(v) = a.particles {
            c.particles = v;
        }
        if let Some(v) = a.cess {
            c.cess_fraction = v;
        }
        if let Some(v) = a.ess {
            c.ess_fraction = v;
        }
        if let Some(v) = a.sweeps {
            c.sweeps = v;
        }
        c.validate()?;
        Ok(c)
    }

    fn load_data(&mut self, data: &DataArgs) -> anyhow::Result<ObservedNetwork> {
        let net = io::load_network(&self.input(&data.network))?;
        let x = match &data.covariates {
            Some(p) => Some(io::load_covariates(&self.input(p), net.n())?),
            None => None,
        };
        Ok(io::with_covariates(net, x)?)
    }

    fn finish(self, command: &str, settings: serde_json::Value) -> anyhow::Result<()> {
        let mut inputs = Vec::new();
        for p in &self.inputs {
            let bytes = std::fs::read(p).with_context(|| format!("hashing {}", p.display()))?;
            inputs.push(json!({ "path": p.display().to_string(), "sha256": hex::encode(Sha256::digest(&bytes)) }));
        }
        let manifest = json!({
            "command": command,
            "version": env!("CARGO_PKG_VERSION"),
            "seed": self.seed,
            "threads": self.threads,
            "settings": settings,
            "config": self.file,
            "inputs": inputs,
            "outputs": self.outputs,
        });
        io::write_json(&self.out.join("manifest.json"), &manifest)?;
        Ok(())
    }
}

fn start_of(from_prior: bool, start: Option<Start>, file: &FileConfig) -> Start {
    if from_prior {
        Start::Prior
    } else {
        start.or(file.start).unwrap_or_default()
    }
}

fn start_name(s: Start) -> &'static str {
    match s {
        Start::Proxy => "proxy",
        Start::MapProxy => "map-proxy",
        Start::Prior => "prior",
    }
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

fn beta_sample(run: &PosteriorRun) -> WeightedSample {
    WeightedSample {
        values: run.smc.particles.iter().map(|p| p.theta.beta.clone()).collect(),
        weights: run.smc.weights.clone(),
    }
}

/// Posterior mean and correlation of beta under the proxy and under the particles.
fn beta_summary(run: &PosteriorRun) -> serde_json::Value {
    let d = run.fit.theta.d();
    if d == 0 {
        return serde_json::Value::Null;
    }
    let smc = beta_sample(run);
    let proxy = run.proxy.as_ref().map(|p| {
        let g = p.gamma_mean().len();
        let cov = p.gamma_cov().view((g - d, g - d), (d, d)).into_owned();
        json!({
            "mean": p.gamma_mean().rows(g - d, d).iter().collect::<Vec<_>>(),
            "correlation": rows(&correlation_from_covariance(&cov)),
        })
    });
    json!({
        "proxy": proxy,
        "smc": { "mean": smc.mean(), "correlation": rows(&smc.correlation()) },
    })
}

fn cmd_simulate(mut run: Run, a: &SimulateArgs) -> anyhow::Result<()> {
    if a.n < 2 || a.k == 0 {
        bail!(SbmError::Input("simulate needs n >= 2 and K >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(run.seed);
    let theta = match &a.theta {
        Some(p) => {
            let t = io::read_params(&run.input(p))?;
            if t.k() != a.k || t.d() != a.d {
                bail!(SbmError::Input(format!(
                    "{}: parameters have K={}, d={}, but K={}, d={} was requested",
                    p.display(),
                    t.k(),
                    t.d(),
                    a.k,
                    a.d
                )));
            }
            t
        }
        None => {
            let hyper_path = a.hyper.as_deref().map(|p| run.input(p));
            load_hyper(hyper_path.as_deref(), a.k, a.d)?.sample(&mut rng)
        }
    };
    let sd = a.covariate_sd.unwrap_or(run.file.sbc.covariate_sd);
    let x = Covariates::gaussian(a.n, a.d, sd, &mut rng);
    let (z, net) = simulate(&theta, &x, &mut rng)?;
    io::write_network(&run.output("network.csv"), &net)?;
    io::write_covariates(&run.output("covariates.csv"), &x)?;
    io::write_params(&run.output("theta.json"), &theta)?;
    io::write_assignment(&run.output("assignment.csv"), &z)?;
    run.finish("simulate", json!({ "k": a.k, "n": a.n, "d": a.d, "covariate_sd": sd }))
}

fn cmd_fit_vem(mut run: Run, a: &FitVemArgs) -> anyhow::Result<()> {
    let net = run.load_data(&a.data)?;
    let ks = parse_k_range(&a.k)?;
    let vem = run.vem(a.restarts);
    let mut table = Vec::new();
    for &k in &ks {
        let mut rng = ChaCha8Rng::seed_from_u64(sbmreg::math::mix64(run.seed ^ k as u64));
        let (best, restart_elbos) = fit_vem_all(&net, k, &vem, &mut rng)?;
        let icl = pseudo_icl(&best, &net);
        table.push(vec![k as f64, best.elbo, icl, best.converged as u8 as f64, best.iterations as f64]);
        let path = run.output(&format!("fit_k{k}.json"));
        io::write_json(
            &path,
            &json!({
                "k": k,
                "theta": best.theta,
                "tau": rows(&best.tau),
                "elbo": best.elbo,
                "pseudo_icl": icl,
                "converged": best.converged,
                "restart": best.restart,
                "restart_elbos": restart_elbos,
                "warnings": best.warnings,
            }),
        )?;
    }
    io::write_table(&run.output("icl.csv"), &["k", "elbo", "pseudo_icl", "converged", "iterations"], &table)?;
    let best_k = table.iter().max_by(|x, y| x[2].total_cmp(&y[2])).map(|r| r[0] as usize);
    println!("pseudo-ICL selects K = {}", best_k.unwrap_or(0));
    run.finish("fit-vem", json!({ "k": ks, "vem": vem }))
}

fn cmd_sample(mut run: Run, a: &SampleArgs) -> anyhow::Result<()> {
    let net = run.load_data(&a.data)?;
    let hyper_path = a.hyper.as_deref().map(|p| run.input(p));
    let hyper = load_hyper(hyper_path.as_deref(), a.k, net.d())?;
    let vem = run.vem(a.smc.restarts);
    let smc = run.smc(&a.smc)?;
    let start = start_of(a.from_prior, a.start, &run.file);
    let res = sample_posterior(&net, &hyper, &vem, &smc, start)?;
    if let Some(p) = &res.proxy {
        io::write_proxy(&run.output("proxy.json"), p)?;
    }
    io::write_particles(&run.output("particles.jsonl"), &res.smc.particles, &res.smc.weights)?;
    io::write_trace(&run.output("trace.csv"), &res.smc.trace)?;
    let evidence = json!({
        "k": a.k,
        "start": start_name(start),
        "log_evidence_product": res.smc.log_evidence,
        "log_evidence_path_sampling": res.smc.log_evidence_path,
        "steps": res.smc.steps(),
        "pseudo_icl": res.pseudo_icl,
        "beta": beta_summary(&res),
        "warnings": res.smc.warnings,
    });
    io::write_json(&run.output("evidence.json"), &evidence)?;
    println!(
        "K = {}: log evidence {:.4} (path sampling {:.4}) in {} steps",
        a.k,
        res.smc.log_evidence,
        res.smc.log_evidence_path,
        res.smc.steps()
    );
    run.finish("sample", json!({ "k": a.k, "start": start_name(start), "vem": vem, "smc": smc }))
}

fn cmd_select_k(mut run: Run, a: &SelectKArgs) -> anyhow::Result<()> {
    let net = run.load_data(&a.data)?;
    let ks = parse_k_range(&a.k)?;
    let vem = run.vem(a.smc.restarts);
    let smc = run.smc(&a.smc)?;
    let start = start_of(a.from_prior, a.start, &run.file);
    let d = net.d();
    let mut hypers = Vec::with_capacity(ks.len());
    for &k in &ks {
        let path = match &a.hyper {
            Some(t) if !t.contains("{K}") => {
                return Err(SbmError::Input(format!("--hyper '{t}' must contain {{K}}")).into());
            }
            Some(t) => Some(run.input(Path::new(&t.replace("{K}", &k.to_string())))),
            None => None,
        };
        hypers.push((k, load_hyper(path.as_deref(), k, d)?));
    }
    let hyper_for = |k: usize| Ok(hypers.iter().find(|(j, _)| *j == k).expect("loaded above").1.clone());
    let sel = select_k(&net, &ks, hyper_for, None, &vem, &smc, start)?;
    io::write_k_posterior(&run.output("k_posterior.csv"), &sel.posterior)?;
    let per_k: Vec<serde_json::Value> = sel
        .runs
        .iter()
        .map(|r| {
            json!({
                "k": r.k,
                "log_evidence_product": r.smc.log_evidence,
                "log_evidence_path_sampling": r.smc.log_evidence_path,
                "pseudo_icl": r.pseudo_icl,
                "steps": r.smc.steps(),
                "beta": beta_summary(r),
            })
        })
        .collect();
    let mut averaged = serde_json::Value::Null;
    if d > 0 {
        let samples: Vec<(usize, WeightedSample)> = sel.runs.iter().map(|r| (r.k, beta_sample(r))).collect();
        let avg = model_average(&samples, &sel.posterior);
        let mut header = vec!["k".to_string(), "weight".to_string()];
        header.extend((1..=d).map(|r| format!("beta{r}")));
        let header: Vec<&str> = header.iter().map(String::as_str).collect();
        let mut table = Vec::new();
        for (k, s) in &samples {
            let pk = sel.posterior.probability(*k).unwrap_or(0.0);
            for (v, w) in s.values.iter().zip(&s.weights) {
                let mut row = vec![*k as f64, pk * w];
                row.extend(v);
                table.push(row);
            }
        }
        io::write_table(&run.output("beta_average.csv"), &header, &table)?;
        averaged = json!({ "mean": avg.mean(), "correlation": rows(&avg.correlation()) });
    }
    let mode = sel.posterior.mode();
    let summary = json!({
        "posterior_mode": mode,
        "pseudo_icl_choice": sel.icl_choice(),
        "runs": per_k,
        "model_averaged_beta": averaged,
    });
    io::write_json(&run.output("selection.json"), &summary)?;
    for e in &sel.posterior.entries {
        println!("K = {}: p(K | Y) = {:.4}", e.k, e.probability);
    }
    println!("posterior mode K = {mode}, pseudo-ICL choice K = {}", sel.icl_choice());
    run.finish("select-k", json!({ "k": ks, "start": start_name(start), "vem": vem, "smc": smc }))
}

fn cmd_graphon(mut run: Run, a: &GraphonArgs) -> anyhow::Result<()> {
    let (particles, weights) = io::read_particles(&run.input(&a.particles))?;
    if particles.is_empty() {
        bail!(SbmError::Input(format!("{}: no particles", a.particles.display())));
    }
    let grid = a.grid.or(run.file.grid).unwrap_or(DEFAULT_GRID);
    if grid == 0 {
        bail!(SbmError::Input("grid must be positive".into()));
    }
    let g = graphon_mean(particles.iter().map(|p| &p.theta), &weights, grid);
    io::write_graphon(&run.output("graphon.csv"), &g)?;
    run.outputs.push("graphon.csv.json".into());
    let u = latent_coordinates(particles.iter().map(|p| (p.z.labels(), &p.theta)), &weights);
    io::write_latent_coordinates(&run.output("latent.csv"), &u)?;
    run.finish("graphon", json!({ "grid": grid }))
}

fn cmd_sbc(mut run: Run, a: &SbcArgs) -> anyhow::Result<()> {
    let hyper_path = a.hyper.as_deref().map(|p| run.input(p));
    let hyper = load_hyper(hyper_path.as_deref(), a.k, a.d)?;
    let methods: Vec<SbcMethod> = a.methods.split(',').map(|m| m.trim().parse()).collect::<Result<_, _>>()?;
    let mut design = run.file.sbc.clone();
    design.seed = run.seed;
    if let Some(v) = a.n {
        design.n = v;
    }
    if let Some(v) = a.replicates {
        design.replicates = v;
    }
    if let Some(v) = a.covariate_sd {
        design.covariate_sd = v;
    }
    let vem = run.vem(a.smc.restarts);
    let smc = run.smc(&a.smc)?;
    let draws = a.draws.unwrap_or(smc.particles);
    let res = sbc_run(&design, &hyper, &methods, draws, &vem, &smc)?;
    io::write_sbc_records(&run.output("sbc_tidy.csv"), &res.records)?;
    io::write_sbc_summary(&run.output("sbc_summary.csv"), &res.summary)?;
    io::write_json(&run.output("sbc_failures.json"), &res.failures)?;
    for s in &res.summary {
        println!("{:6} {:16} KL {:.4}  KS {:.3} (p = {:.3})", s.phi_name, s.method, s.kl, s.ks_distance, s.ks_pvalue);
    }
    if !res.failures.is_empty() {
        eprintln!("{} sampler runs failed and were skipped", res.failures.len());
    }
    run.finish("sbc", json!({ "design": design, "draws": draws, "methods": a.methods, "vem": vem, "smc": smc }))
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let run = Run::new(&cli.common)?;
    if let Some(t) = run.threads {
        rayon::ThreadPoolBuilder::new().num_threads(t.max(1)).build_global()?;
    }
    std::fs::create_dir_all(&run.out).with_context(|| format!("creating {}", run.out.display()))?;
    match &cli.command {
        Command::Simulate(a) => cmd_simulate(run, a),
        Command::FitVem(a) => cmd_fit_vem(run, a),
        Command::Sample(a) => cmd_sample(run, a),
        Command::SelectK(a) => cmd_select_k(run, a),
        Command::Graphon(a) => cmd_graphon(run, a),
        Command::Sbc(a) => cmd_sbc(run, a),
    }
}

/// 2 for bad input, 3 for numerical failure.
fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if let Some(s) = cause.downcast_ref::<SbmError>() {
            return if s.is_input_error() { 2 } else { 3 };
        }
        if cause.is::<std::io::Error>() || cause.is::<toml::de::Error>() {
            return 2;
        }
    }
    3
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.common.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
