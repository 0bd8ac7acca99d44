//! Reading and writing networks, covariates and every inference artifact.
//!
//! Node indices and block labels are 1-based in all files.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SbmError};
use crate::model::{n_pairs, pair_index, Covariates, LatentAssignment, ModelParams, ObservedNetwork};
use crate::posterior::{GraphonEstimate, KPosterior};
use crate::proxy::ProxyPosterior;
use crate::smc::{Particle, TemperTrace};
use crate::validation::{SbcRecord, SbcSummary};

fn parse_err(path: &Path, line: usize, column: usize, message: impl Into<String>) -> SbmError {
    SbmError::Parse { path: path.display().to_string(), line, column, message: message.into() }
}

fn csv_err(path: &Path, e: csv::Error) -> SbmError {
    let line = e.position().map_or(0, |p| p.line() as usize);
    parse_err(path, line, 0, e.to_string())
}

fn parse_count(path: &Path, line: usize, column: usize, field: &str) -> Result<u32> {
    field
        .trim()
        .parse::<u32>()
        .map_err(|_| parse_err(path, line, column, format!("'{}' is not a nonnegative integer count", field.trim())))
}

/// Loads a network from a dense CSV (`n` rows of `n` counts) or an edge list whose
/// first line is `n=<count>` followed by tab-separated `i j count` lines.
pub fn load_network(path: &Path) -> Result<ObservedNetwork> {
    let text = fs::read_to_string(path)?;
    let first = text.lines().find(|l| !l.trim().is_empty()).unwrap_or("");
    if first.trim_start().starts_with("n=") {
        parse_edge_list(path, &text)
    } else {
        parse_dense(path, &text)
    }
}

fn reader(text: &str, delimiter: u8) -> csv::Reader<&[u8]> {
    csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .delimiter(delimiter)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes())
}

fn parse_dense(path: &Path, text: &str) -> Result<ObservedNetwork> {
    let mut rows: Vec<(usize, Vec<u32>)> = Vec::new();
    for rec in reader(text, b',').records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.len() == 1 && rec[0].is_empty() {
            continue;
        }
        let row = rec
            .iter()
            .enumerate()
            .map(|(c, f)| parse_count(path, line, c + 1, f))
            .collect::<Result<Vec<u32>>>()?;
        rows.push((line, row));
    }
    let n = rows.len();
    if n < 2 {
        return Err(parse_err(path, 1, 1, format!("need at least 2 nodes, found {n} rows")));
    }
    for (line, row) in &rows {
        if row.len() != n {
            return Err(parse_err(path, *line, row.len().min(n) + 1, format!("row has {} entries, expected {n}", row.len())));
        }
    }
    let mut counts = vec![0u32; n_pairs(n)];
    for i in 0..n {
        let (line, row) = &rows[i];
        if row[i] != 0 {
            return Err(parse_err(path, *line, i + 1, format!("diagonal entry Y[{},{}] = {} must be 0", i + 1, i + 1, row[i])));
        }
        for j in i + 1..n {
            let (upper, lower) = (row[j], rows[j].1[i]);
            if upper != lower {
                return Err(parse_err(
                    path,
                    rows[j].0,
                    i + 1,
                    format!("asymmetric counts: Y[{},{}] = {upper} but Y[{},{}] = {lower}", i + 1, j + 1, j + 1, i + 1),
                ));
            }
            counts[pair_index(n, i, j)] = upper;
        }
    }
    ObservedNetwork::new(n, counts, Covariates::empty(n))
}

fn parse_edge_list(path: &Path, text: &str) -> Result<ObservedNetwork> {
    let mut lines = text.lines().enumerate().skip_while(|(_, l)| l.trim().is_empty());
    let (hline, header) = lines.next().expect("caller checked the header");
    let n: usize = header
        .trim()
        .strip_prefix("n=")
        .and_then(|s| s.trim().parse().ok())
        .ok_or_else(|| parse_err(path, hline + 1, 1, format!("bad header '{}', expected n=<count>", header.trim())))?;
    if n < 2 {
        return Err(parse_err(path, hline + 1, 1, "need at least 2 nodes"));
    }
    let mut counts = vec![0u32; n_pairs(n)];
    let mut seen: Vec<Option<usize>> = vec![None; n_pairs(n)];
    for (idx, raw) in lines {
        let line = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = raw.split('\t').collect();
        if fields.len() != 3 {
            return Err(parse_err(path, line, 1, format!("expected 3 tab-separated fields, found {}", fields.len())));
        }
        let node = |c: usize| -> Result<usize> {
            let v: usize = fields[c]
                .trim()
                .parse()
                .map_err(|_| parse_err(path, line, c + 1, format!("'{}' is not a node index", fields[c].trim())))?;
            if v == 0 || v > n {
                return Err(parse_err(path, line, c + 1, format!("node {v} outside 1..={n}")));
            }
            Ok(v - 1)
        };
        let (i, j) = (node(0)?, node(1)?);
        let y = parse_count(path, line, 3, fields[2])?;
        if i == j {
            if y != 0 {
                return Err(parse_err(path, line, 3, format!("self-loop count Y[{},{}] = {y} must be 0", i + 1, i + 1)));
            }
            continue;
        }
        let p = pair_index(n, i.min(j), i.max(j));
        if let Some(prev) = seen[p] {
            if counts[p] != y {
                return Err(parse_err(
                    path,
                    line,
                    3,
                    format!("asymmetric counts for pair ({}, {}): {} on line {prev}, {y} here", i + 1, j + 1, counts[p]),
                ));
            }
        }
        seen[p] = Some(line);
        counts[p] = y;
    }
    ObservedNetwork::new(n, counts, Covariates::empty(n))
}

/// Loads pair covariates from a CSV with header `i,j,x1,...,xd` and one row per
/// pair `i < j`.
pub fn load_covariates(path: &Path, n: usize) -> Result<Covariates> {
    let text = fs::read_to_string(path)?;
    let mut rdr = reader(&text, b',');
    let mut records = rdr.records();
    let header = loop {
        match records.next() {
            None => return Err(parse_err(path, 1, 1, "empty covariate file")),
            Some(r) => {
                let r = r.map_err(|e| csv_err(path, e))?;
                if !(r.len() == 1 && r[0].is_empty()) {
                    break r;
                }
            }
        }
    };
    let hline = header.position().map_or(1, |p| p.line() as usize);
    if header.len() < 2 || &header[0] != "i" || &header[1] != "j" {
        return Err(parse_err(path, hline, 1, "header must start with 'i,j'"));
    }
    for (c, name) in header.iter().enumerate().skip(2) {
        if name != format!("x{}", c - 1) {
            return Err(parse_err(path, hline, c + 1, format!("expected column 'x{}', found '{name}'", c - 1)));
        }
    }
    let d = header.len() - 2;
    let mut values = vec![0.0; n_pairs(n) * d];
    let mut seen: Vec<Option<usize>> = vec![None; n_pairs(n)];
    for rec in records {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.len() == 1 && rec[0].is_empty() {
            continue;
        }
        if rec.len() != d + 2 {
            return Err(parse_err(path, line, rec.len().min(d + 2) + 1, format!("expected {} fields, found {}", d + 2, rec.len())));
        }
        let node = |c: usize| -> Result<usize> {
            let v: usize = rec[c].parse().map_err(|_| parse_err(path, line, c + 1, format!("'{}' is not a node index", &rec[c])))?;
            if v == 0 || v > n {
                return Err(parse_err(path, line, c + 1, format!("node {v} outside 1..={n}")));
            }
            Ok(v)
        };
        let (i, j) = (node(0)?, node(1)?);
        if j <= i {
            return Err(parse_err(path, line, 2, format!("pair ({i}, {j}) must have i < j")));
        }
        let p = pair_index(n, i - 1, j - 1);
        if let Some(prev) = seen[p] {
            return Err(parse_err(path, line, 1, format!("duplicate pair ({i}, {j}), first given on line {prev}")));
        }
        seen[p] = Some(line);
        for r in 0..d {
            let v: f64 = rec[r + 2]
                .parse()
                .map_err(|_| parse_err(path, line, r + 3, format!("'{}' is not a number", &rec[r + 2])))?;
            if !v.is_finite() {
                return Err(parse_err(path, line, r + 3, "covariate values must be finite"));
            }
            values[p * d + r] = v;
        }
    }
    for i in 0..n {
        for j in i + 1..n {
            if seen[pair_index(n, i, j)].is_none() {
                return Err(SbmError::Input(format!("{}: missing pair ({}, {})", path.display(), i + 1, j + 1)));
            }
        }
    }
    Covariates::new(n, d, values)
}

/// Attaches covariates (or none) to a loaded network.
pub fn with_covariates(net: ObservedNetwork, covariates: Option<Covariates>) -> Result<ObservedNetwork> {
    let n = net.n();
    let x = covariates.unwrap_or_else(|| Covariates::empty(n));
    ObservedNetwork::new(n, net.counts().to_vec(), x)
}

fn create(path: &Path) -> Result<fs::File> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    Ok(fs::File::create(path)?)
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    Ok(csv::Writer::from_writer(create(path)?))
}

fn write_rows<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = csv_writer(path)?;
    for r in rows {
        w.serialize(r).map_err(|e| SbmError::Input(format!("{}: {e}", path.display())))?;
    }
    w.flush()?;
    Ok(())
}

fn read_rows<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    rdr.deserialize().map(|r| r.map_err(|e| csv_err(path, e))).collect()
}

/// Writes the count matrix as a dense CSV.
pub fn write_network(path: &Path, net: &ObservedNetwork) -> Result<()> {
    let mut f = create(path)?;
    for row in net.to_dense() {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        writeln!(f, "{}", line.join(","))?;
    }
    Ok(())
}

/// Writes covariates in the long `i,j,x1,...,xd` format.
pub fn write_covariates(path: &Path, x: &Covariates) -> Result<()> {
    let mut w = csv_writer(path)?;
    let io_err = |e: csv::Error| SbmError::Input(e.to_string());
    let mut header = vec!["i".to_string(), "j".to_string()];
    header.extend((1..=x.d()).map(|r| format!("x{r}")));
    w.write_record(&header).map_err(io_err)?;
    for (i, j, p) in crate::model::pairs(x.n()) {
        let mut rec = vec![(i + 1).to_string(), (j + 1).to_string()];
        rec.extend(x.row(p).iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(io_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut f = create(path)?;
    serde_json::to_writer_pretty(&mut f, value)?;
    writeln!(f)?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| parse_err(path, e.line(), e.column(), e.to_string()))
}

pub fn write_params(path: &Path, theta: &ModelParams) -> Result<()> {
    write_json(path, theta)
}

pub fn read_params(path: &Path) -> Result<ModelParams> {
    read_json(path)
}

pub fn write_proxy(path: &Path, proxy: &ProxyPosterior) -> Result<()> {
    write_json(path, proxy)
}

pub fn read_proxy(path: &Path) -> Result<ProxyPosterior> {
    read_json(path)
}

/// Writes memberships as `node,block` (both 1-based).
pub fn write_assignment(path: &Path, z: &[usize]) -> Result<()> {
    #[derive(Serialize)]
    struct Row {
        node: usize,
        block: usize,
    }
    write_rows(path, z.iter().enumerate().map(|(i, &b)| Row { node: i + 1, block: b + 1 }))
}

/// One line of the particle file.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct ParticleLine {
    weight: f64,
    log_r: f64,
    z: Vec<usize>,
    theta: ModelParams,
}

/// Writes weighted particles as JSON lines with 1-based memberships.
pub fn write_particles(path: &Path, particles: &[Particle], weights: &[f64]) -> Result<()> {
    if particles.len() != weights.len() {
        return Err(SbmError::Dimension("one weight per particle required".into()));
    }
    let mut f = std::io::BufWriter::new(create(path)?);
    for (p, &w) in particles.iter().zip(weights) {
        let line = ParticleLine {
            weight: w,
            log_r: p.log_r,
            z: p.z.iter().map(|b| b + 1).collect(),
            theta: p.theta.clone(),
        };
        serde_json::to_writer(&mut f, &line)?;
        writeln!(f)?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_particles(path: &Path) -> Result<(Vec<Particle>, Vec<f64>)> {
    let f = BufReader::new(fs::File::open(path)?);
    let mut particles = Vec::new();
    let mut weights = Vec::new();
    for (idx, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ParticleLine =
            serde_json::from_str(&line).map_err(|e| parse_err(path, idx + 1, e.column(), e.to_string()))?;
        let k = rec.theta.k();
        if rec.z.iter().any(|&b| b == 0 || b > k) {
            return Err(parse_err(path, idx + 1, 1, format!("block labels must lie in 1..={k}")));
        }
        let z = LatentAssignment::new(rec.z.iter().map(|b| b - 1).collect(), k)?;
        particles.push(Particle { z, theta: rec.theta, log_r: rec.log_r });
        weights.push(rec.weight);
    }
    Ok((particles, weights))
}

pub fn write_trace(path: &Path, trace: &TemperTrace) -> Result<()> {
    write_rows(path, &trace.steps)
}

pub fn read_trace(path: &Path) -> Result<TemperTrace> {
    Ok(TemperTrace { steps: read_rows(path)? })
}

/// Writes the graphon as `u,v,phi` on cell midpoints, plus a JSON sidecar
/// (`<path>.json`) with the grid metadata.
pub fn write_graphon(path: &Path, g: &GraphonEstimate) -> Result<()> {
    #[derive(Serialize)]
    struct Row {
        u: f64,
        v: f64,
        phi: f64,
    }
    let grid = g.grid;
    let mid = |a: usize| (a as f64 + 0.5) / grid as f64;
    write_rows(
        path,
        (0..grid).flat_map(|a| (0..grid).map(move |b| (a, b))).map(|(a, b)| Row { u: mid(a), v: mid(b), phi: g.values[(a, b)] }),
    )?;
    let mut sidecar = path.as_os_str().to_owned();
    sidecar.push(".json");
    write_json(Path::new(&sidecar), &serde_json::json!({ "grid": grid, "points": "cell midpoints", "columns": ["u", "v", "phi"] }))
}

pub fn read_graphon(path: &Path) -> Result<GraphonEstimate> {
    #[derive(Deserialize)]
    struct Row {
        phi: f64,
    }
    let rows: Vec<Row> = read_rows(path)?;
    let grid = (rows.len() as f64).sqrt().round() as usize;
    if grid * grid != rows.len() {
        return Err(SbmError::Input(format!("{}: {} rows is not a square grid", path.display(), rows.len())));
    }
    let values = nalgebra::DMatrix::from_fn(grid, grid, |a, b| rows[a * grid + b].phi);
    Ok(GraphonEstimate { grid, values })
}

/// Writes the latent coordinates `U_i` as `node,U`.
pub fn write_latent_coordinates(path: &Path, u: &[f64]) -> Result<()> {
    #[derive(Serialize)]
    struct Row {
        node: usize,
        #[serde(rename = "U")]
        u: f64,
    }
    write_rows(path, u.iter().enumerate().map(|(i, &u)| Row { node: i + 1, u }))
}

pub fn write_k_posterior(path: &Path, kpost: &KPosterior) -> Result<()> {
    write_rows(path, &kpost.entries)
}

pub fn read_k_posterior(path: &Path) -> Result<KPosterior> {
    Ok(KPosterior { entries: read_rows(path)? })
}

pub fn write_sbc_records(path: &Path, records: &[SbcRecord]) -> Result<()> {
    write_rows(path, records)
}

pub fn read_sbc_records(path: &Path) -> Result<Vec<SbcRecord>> {
    read_rows(path)
}

pub fn write_sbc_summary(path: &Path, summary: &[SbcSummary]) -> Result<()> {
    write_rows(path, summary)
}

/// Writes any table given as a header and rows of numbers.
pub fn write_table(path: &Path, header: &[&str], rows: &[Vec<f64>]) -> Result<()> {
    let mut w = csv_writer(path)?;
    let io_err = |e: csv::Error| SbmError::Input(e.to_string());
    w.write_record(header).map_err(io_err)?;
    for r in rows {
        w.write_record(r.iter().map(|v| v.to_string())).map_err(io_err)?;
    }
    w.flush()?;
    Ok(())
}
