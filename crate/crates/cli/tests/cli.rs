use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::tempdir;

fn sbmreg(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sbmreg"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = sbmreg(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn manifest(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

#[test]
fn simulate_is_byte_identical_for_a_seed() {
    let dir = tempdir().unwrap();
    let hyper = r#"{"gamma0": [1, 0, 3, 1.1, 2.2, 0.1, -0.3], "v0": 0.1, "e0": [3, 3]}"#;
    fs::write(dir.path().join("design.json"), hyper).unwrap();
    let args = |o: &'static str| ["simulate", "--k", "2", "--n", "40", "--d", "4", "--hyper", "design.json", "--seed", "1", "-o", o];
    ok(dir.path(), &args("a"));
    ok(dir.path(), &args("b"));
    for f in ["network.csv", "covariates.csv", "theta.json", "assignment.csv", "manifest.json"] {
        let a = fs::read(dir.path().join("a").join(f)).unwrap();
        let b = fs::read(dir.path().join("b").join(f)).unwrap();
        assert_eq!(a, b, "{f} differs");
    }
    ok(dir.path(), &["simulate", "--n", "40", "--seed", "2", "-o", "c"]);
    assert_ne!(
        fs::read(dir.path().join("a/network.csv")).unwrap(),
        fs::read(dir.path().join("c/network.csv")).unwrap()
    );
    let m = manifest(&dir.path().join("a"));
    assert_eq!(m["seed"], 1);
    assert_eq!(m["inputs"][0]["path"], "design.json");
    assert_eq!(m["inputs"][0]["sha256"].as_str().unwrap().len(), 64);
}

#[test]
fn manifest_hash_tracks_input_bytes() {
    let dir = tempdir().unwrap();
    let d = dir.path();
    ok(d, &["simulate", "--n", "8", "--d", "1", "--seed", "3", "-o", "sim"]);
    let fit = |o: &'static str| ["fit-vem", "--network", "sim/network.csv", "--covariates", "sim/covariates.csv", "--k", "1-2", "-o", o];
    ok(d, &fit("f1"));
    ok(d, &fit("f2"));
    let h = |o: &str| manifest(&d.join(o))["inputs"][0]["sha256"].as_str().unwrap().to_string();
    assert_eq!(h("f1"), h("f2"));
    let mut text = fs::read_to_string(d.join("sim/network.csv")).unwrap();
    text.push('\n');
    fs::write(d.join("sim/network.csv"), text).unwrap();
    ok(d, &fit("f3"));
    assert_ne!(h("f1"), h("f3"));
    let icl = fs::read_to_string(d.join("f1/icl.csv")).unwrap();
    assert_eq!(icl.lines().count(), 3);
    assert!(icl.starts_with("k,elbo,pseudo_icl"));
    assert!(d.join("f1/fit_k2.json").exists());
}

#[test]
fn bad_input_exits_with_code_2_and_position() {
    let dir = tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("asym.csv"), "0,1,0\n2,0,0\n0,0,0\n").unwrap();
    let out = sbmreg(d, &["sample", "--network", "asym.csv", "--k", "2"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("asym.csv:2:1") && err.contains("Y[1,2]") && err.contains("Y[2,1]"), "{err}");

    fs::write(d.join("y.csv"), "0,1\n1,0\n").unwrap();
    let out = sbmreg(d, &["sample", "--network", "y.csv", "--k", "1", "--particles", "1"]);
    assert_eq!(out.status.code(), Some(2));
    let out = sbmreg(d, &["fit-vem", "--network", "y.csv", "--k", "0-2"]);
    assert_eq!(out.status.code(), Some(2));
    let out = sbmreg(d, &["fit-vem", "--network", "missing.csv"]);
    assert_eq!(out.status.code(), Some(2));
    fs::write(d.join("bad.toml"), "particles = 3\n").unwrap();
    let out = sbmreg(d, &["fit-vem", "--network", "y.csv", "--config", "bad.toml"]);
    assert_eq!(out.status.code(), Some(2));
    fs::write(d.join("x.csv"), "i,j,x1\n").unwrap();
    let out = sbmreg(d, &["fit-vem", "--network", "y.csv", "--covariates", "x.csv"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing pair (1, 2)"));
}

#[test]
fn flags_override_config_which_overrides_defaults() {
    let dir = tempdir().unwrap();
    let d = dir.path();
    ok(d, &["simulate", "--n", "8", "--d", "1", "--seed", "4", "-o", "sim"]);
    fs::write(d.join("run.toml"), "seed = 9\n[smc]\nparticles = 60\nsweeps = 2\n").unwrap();
    let base = ["sample", "--network", "sim/network.csv", "--covariates", "sim/covariates.csv", "--k", "2", "--config", "run.toml"];
    let mut a = base.to_vec();
    a.extend(["-o", "cfg"]);
    ok(d, &a);
    let m = manifest(&d.join("cfg"));
    assert_eq!(m["seed"], 9);
    assert_eq!(m["settings"]["smc"]["particles"], 60);
    assert_eq!(m["settings"]["smc"]["sweeps"], 2);
    assert_eq!(m["settings"]["smc"]["cess_fraction"], 0.9);
    let mut b = base.to_vec();
    b.extend(["-o", "flag", "--particles", "40", "--seed", "5"]);
    ok(d, &b);
    let m = manifest(&d.join("flag"));
    assert_eq!(m["seed"], 5);
    assert_eq!(m["settings"]["smc"]["particles"], 40);
    assert_eq!(m["settings"]["smc"]["sweeps"], 2);
    let lines = fs::read_to_string(d.join("flag/particles.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 40);
}

#[test]
fn sample_graphon_select_k_and_sbc_pipelines() {
    let dir = tempdir().unwrap();
    let d = dir.path();
    ok(d, &["simulate", "--n", "10", "--d", "2", "--seed", "7", "-o", "sim"]);
    let data = ["--network", "sim/network.csv", "--covariates", "sim/covariates.csv"];

    let mut s = vec!["sample", "--k", "2", "--particles", "100", "-o", "s"];
    s.extend(data);
    ok(d, &s);
    for f in ["proxy.json", "particles.jsonl", "trace.csv", "evidence.json"] {
        assert!(d.join("s").join(f).exists(), "{f}");
    }
    let ev: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("s/evidence.json")).unwrap()).unwrap();
    assert!(ev["log_evidence_product"].as_f64().unwrap().is_finite());
    assert!(ev["log_evidence_path_sampling"].as_f64().unwrap().is_finite());
    assert_eq!(ev["start"], "proxy");
    assert_eq!(ev["beta"]["smc"]["correlation"].as_array().unwrap().len(), 2);

    let mut p = vec!["sample", "--k", "2", "--particles", "100", "--from-prior", "-o", "p"];
    p.extend(data);
    ok(d, &p);
    assert!(!d.join("p/proxy.json").exists());
    let trace = fs::read_to_string(d.join("p/trace.csv")).unwrap();
    assert!(trace.starts_with("h,rho,cess,ess,resampled"));
    assert!(trace.lines().last().unwrap().split(',').nth(1).unwrap() == "1.0");

    ok(d, &["graphon", "--particles", "s/particles.jsonl", "--grid", "12", "-o", "g"]);
    assert_eq!(fs::read_to_string(d.join("g/graphon.csv")).unwrap().lines().count(), 1 + 144);
    assert!(d.join("g/graphon.csv.json").exists());
    assert_eq!(fs::read_to_string(d.join("g/latent.csv")).unwrap().lines().count(), 11);

    let mut k = vec!["select-k", "--k", "1-2", "--particles", "100", "-o", "k"];
    k.extend(data);
    let out = ok(d, &k);
    assert!(String::from_utf8_lossy(&out.stdout).contains("posterior mode K ="));
    let kp = fs::read_to_string(d.join("k/k_posterior.csv")).unwrap();
    assert!(kp.starts_with("k,log_evidence,prior,probability"));
    let total: f64 = kp.lines().skip(1).map(|l| l.split(',').nth(3).unwrap().parse::<f64>().unwrap()).sum();
    assert!((total - 1.0).abs() < 1e-12);
    assert!(d.join("k/beta_average.csv").exists());

    ok(d, &["sbc", "--k", "2", "--d", "1", "--n", "6", "--replicates", "3", "--particles", "50", "-o", "sbc"]);
    let tidy = fs::read_to_string(d.join("sbc/sbc_tidy.csv")).unwrap();
    assert!(tidy.starts_with("replicate,phi_name,method,U,M"));
    let summary = fs::read_to_string(d.join("sbc/sbc_summary.csv")).unwrap();
    assert!(summary.starts_with("phi_name,method,KL,ks_distance"));
}

#[test]
fn thread_count_does_not_change_results() {
    let dir = tempdir().unwrap();
    let d = dir.path();
    ok(d, &["simulate", "--n", "10", "--d", "1", "--seed", "8", "-o", "sim"]);
    let run = |t: &'static str, o: &'static str| {
        ok(d, &["sample", "--network", "sim/network.csv", "--covariates", "sim/covariates.csv", "--k", "2", "--particles", "80", "--threads", t, "-o", o]);
        fs::read(d.join(o).join("particles.jsonl")).unwrap()
    };
    assert_eq!(run("1", "t1"), run("3", "t3"));
}

#[test]
fn select_k_reads_one_prior_file_per_k() {
    let dir = tempdir().unwrap();
    let d = dir.path();
    ok(d, &["simulate", "--n", "8", "--d", "1", "--seed", "6", "-o", "sim"]);
    fs::write(d.join("prior_k1.json"), r#"{"gamma0": [1, 0.5], "v0": 0.5, "e0": [2]}"#).unwrap();
    fs::write(d.join("prior_k2.json"), r#"{"gamma0": [1, 0, 2, 0.5], "v0": 0.5, "e0": [2, 2]}"#).unwrap();
    let args = |h: &'static str, o: &'static str| {
        ["select-k", "--network", "sim/network.csv", "--covariates", "sim/covariates.csv", "--k", "1-2", "--particles", "60", "--hyper", h, "-o", o]
    };
    ok(d, &args("prior_k{K}.json", "k"));
    let inputs: Vec<String> = manifest(&d.join("k"))["inputs"]
        .as_array()
        .unwrap()
        .iter()
        .map(|i| i["path"].as_str().unwrap().to_string())
        .collect();
    assert!(inputs.contains(&"prior_k1.json".to_string()) && inputs.contains(&"prior_k2.json".to_string()), "{inputs:?}");
    assert_eq!(sbmreg(d, &args("prior_k1.json", "bad")).status.code(), Some(2));
}
