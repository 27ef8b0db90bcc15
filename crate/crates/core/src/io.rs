//! File formats: model definition files, trajectory dumps, density-path and
//! pairing tables, moment reports, rate-function reports and propagator
//! checkpoints.
//!
//! All floating-point CSV payloads are serialized with 17 significant
//! digits, so reading a file back reproduces the in-memory values bitwise.

use crate::hydro::{DensityPath, Provenance};
use crate::ldp::LdpReport;
use crate::mdp::Propagator;
use crate::model::{
    InitialLaw, Kernel, ModelBundle, ModelError, RateModel, ScalingSchedule, TorusFunction,
};
use crate::oracle::MomentReport;
use crate::ssa::{Trajectory, Transition};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IoError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Formats a float with 17 significant digits (bitwise round-trippable).
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

/// SHA-256 hex digest of a serializable value's canonical JSON form.
pub fn content_hash<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_string(value).expect("hashable values serialize");
    let mut hasher = Sha256::new();
    hasher.update(json.as_bytes());
    hex_digest(&hasher.finalize())
}

fn hex_digest(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

// ---------------------------------------------------------------------------
// Model files
// ---------------------------------------------------------------------------

/// On-disk model description. Every field accepts a constant, a built-in
/// expression such as `"1+0.5*cos(2*pi*u)"`, or an explicit sample list.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelFile {
    pub model: ModelSection,
    pub initial: InitialSection,
    pub scaling: ScalingSection,
    pub grid: GridSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda1: Option<FieldSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda2: Option<FieldSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda_kernel: Option<Vec<Vec<f64>>>,
    pub psi: FieldSpec,
    pub phi: FieldSpec,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InitialSection {
    pub rho0: FieldSpec,
    pub rho1: FieldSpec,
    pub rho2: FieldSpec,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScalingSection {
    pub a: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridSection {
    pub m: usize,
}

/// A scalar field given as a constant, a builtin trigonometric-polynomial
/// expression in `u`, or explicit grid samples.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FieldSpec {
    Constant(f64),
    Expression(String),
    Samples(Vec<f64>),
}

impl FieldSpec {
    pub fn build(&self, m: usize) -> Result<TorusFunction, IoError> {
        match self {
            FieldSpec::Constant(c) => Ok(TorusFunction::constant(m, *c)),
            FieldSpec::Samples(values) => {
                if values.len() != m {
                    return Err(IoError::Parse(format!(
                        "sample list of length {} does not match grid M = {m}",
                        values.len()
                    )));
                }
                Ok(TorusFunction::from_samples(values.clone()))
            }
            FieldSpec::Expression(text) => {
                let terms = parse_expression(text)?;
                Ok(TorusFunction::from_fn(m, |u| {
                    terms.iter().map(|t| t.eval(u)).sum()
                }))
            }
        }
    }
}

/// One additive term of a builtin expression: `coefficient`, optionally
/// times `cos(k*pi*u)` or `sin(k*pi*u)`.
#[derive(Debug, Clone, Copy)]
struct ExprTerm {
    coefficient: f64,
    trig: Option<(bool, f64)>, // (is_sin, k)
}

impl ExprTerm {
    fn eval(&self, u: f64) -> f64 {
        match self.trig {
            None => self.coefficient,
            Some((is_sin, k)) => {
                let arg = k * std::f64::consts::PI * u;
                self.coefficient * if is_sin { arg.sin() } else { arg.cos() }
            }
        }
    }
}

/// Parses the builtin expression grammar: a signed sum of terms
/// `c`, `c*cos(k*pi*u)`, `c*sin(k*pi*u)`, `cos(k*pi*u)`, `sin(k*pi*u)`.
fn parse_expression(text: &str) -> Result<Vec<ExprTerm>, IoError> {
    let cleaned: String = text.chars().filter(|c| !c.is_whitespace()).collect();
    if cleaned.is_empty() {
        return Err(IoError::Parse("empty expression".into()));
    }
    // Split on top-level '+' and '-' signs (no parenthesized sums allowed
    // except inside trig arguments, which contain no +/-).
    let mut terms = Vec::new();
    let mut start = 0usize;
    let bytes = cleaned.as_bytes();
    let mut depth = 0i32;
    for (i, &b) in bytes.iter().enumerate() {
        match b {
            b'(' => depth += 1,
            b')' => depth -= 1,
            b'+' | b'-' if depth == 0 && i > 0 && !matches!(bytes[i - 1], b'e' | b'E') => {
                terms.push(cleaned[start..i].to_string());
                start = i;
            }
            _ => {}
        }
    }
    terms.push(cleaned[start..].to_string());
    terms
        .into_iter()
        .filter(|t| !t.is_empty() && t != "+")
        .map(|t| parse_term(&t))
        .collect()
}

fn parse_term(term: &str) -> Result<ExprTerm, IoError> {
    let bad = |msg: &str| IoError::Parse(format!("term `{term}`: {msg}"));
    let (sign, body) = match term.strip_prefix('-') {
        Some(rest) => (-1.0, rest),
        None => (1.0, term.strip_prefix('+').unwrap_or(term)),
    };
    if let Some(idx) = body.find("cos(").or_else(|| body.find("sin(")) {
        let is_sin = body[idx..].starts_with("sin");
        let coeff_text = body[..idx].trim_end_matches('*');
        let coefficient = if coeff_text.is_empty() {
            1.0
        } else {
            coeff_text
                .parse::<f64>()
                .map_err(|_| bad("bad coefficient"))?
        };
        let arg = body[idx + 4..]
            .strip_suffix(')')
            .ok_or_else(|| bad("unterminated trig argument"))?;
        let k_text = arg
            .strip_suffix("*pi*u")
            .or_else(|| arg.strip_suffix("pi*u").map(|s| s.trim_end_matches('*')))
            .ok_or_else(|| bad("trig argument must end in `*pi*u`"))?;
        let k = if k_text.is_empty() {
            1.0
        } else {
            k_text.parse::<f64>().map_err(|_| bad("bad frequency"))?
        };
        Ok(ExprTerm {
            coefficient: sign * coefficient,
            trig: Some((is_sin, k)),
        })
    } else {
        let coefficient = body.parse::<f64>().map_err(|_| bad("bad constant"))?;
        Ok(ExprTerm {
            coefficient: sign * coefficient,
            trig: None,
        })
    }
}

/// Builds a validated bundle from a parsed model file.
pub fn build_bundle(file: &ModelFile) -> Result<ModelBundle, IoError> {
    let m = file.grid.m;
    let psi = file.model.psi.build(m)?;
    let phi = file.model.phi.build(m)?;
    let lambda = match (&file.model.lambda1, &file.model.lambda2, &file.model.lambda_kernel) {
        (Some(l1), Some(l2), None) => Kernel::Product {
            lambda1: l1.build(m)?,
            lambda2: l2.build(m)?,
        },
        (Some(l1), Some(l2), Some(samples)) => {
            // A kernel tagged as product form must match lambda1 * lambda2.
            let lambda1 = l1.build(m)?;
            let lambda2 = l2.build(m)?;
            RateModel::verify_product_form(samples, &lambda1, &lambda2)?;
            Kernel::Product { lambda1, lambda2 }
        }
        (None, None, Some(samples)) => {
            if samples.len() != m || samples.iter().any(|row| row.len() != m) {
                return Err(IoError::Parse("lambda_kernel must be an MxM sample grid".into()));
            }
            Kernel::Samples {
                values: samples.clone(),
            }
        }
        _ => {
            return Err(IoError::Parse(
                "specify either lambda1 + lambda2 or lambda_kernel".into(),
            ))
        }
    };
    let model = RateModel { lambda, psi, phi };
    let law = InitialLaw {
        rho0: file.initial.rho0.build(m)?,
        rho1: file.initial.rho1.build(m)?,
        rho2: file.initial.rho2.build(m)?,
    };
    let schedule = ScalingSchedule::new(file.scaling.a)?;
    Ok(ModelBundle::new(model, law, schedule)?)
}

pub fn read_model_file(path: &Path) -> Result<ModelBundle, IoError> {
    let text = std::fs::read_to_string(path)?;
    let file: ModelFile =
        toml::from_str(&text).map_err(|e| IoError::Parse(format!("model file: {e}")))?;
    build_bundle(&file)
}

// ---------------------------------------------------------------------------
// Trajectories
// ---------------------------------------------------------------------------

/// Manifest accompanying a trajectory dump.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrajectoryManifest {
    pub n: usize,
    pub horizon: f64,
    pub seed: u64,
    pub model_hash: String,
    pub tilt_hash: Option<String>,
}

/// Writes `time,vertex,transition` rows plus a JSON manifest next to them.
pub fn write_trajectory(
    dir: &Path,
    stem: &str,
    traj: &Trajectory,
    manifest: &TrajectoryManifest,
) -> Result<(), IoError> {
    std::fs::create_dir_all(dir)?;
    let csv_path = dir.join(format!("{stem}.csv"));
    let mut w = BufWriter::new(std::fs::File::create(&csv_path)?);
    writeln!(w, "time,vertex,transition")?;
    for e in &traj.events {
        writeln!(w, "{},{},{}", fmt_f64(e.time), e.vertex, e.transition.label())?;
    }
    w.flush()?;
    let mut wi = BufWriter::new(std::fs::File::create(
        dir.join(format!("{stem}.initial.csv")),
    )?);
    writeln!(wi, "vertex,state")?;
    for (i, s) in traj.initial.states.iter().enumerate() {
        writeln!(wi, "{i},{}", *s as u8)?;
    }
    wi.flush()?;
    let manifest_path = dir.join(format!("{stem}.manifest.json"));
    std::fs::write(&manifest_path, serde_json::to_string_pretty(manifest)?)?;
    Ok(())
}

pub fn read_trajectory(dir: &Path, stem: &str) -> Result<(Trajectory, TrajectoryManifest), IoError> {
    let manifest: TrajectoryManifest = serde_json::from_str(&std::fs::read_to_string(
        dir.join(format!("{stem}.manifest.json")),
    )?)?;
    let initial_text = std::fs::read_to_string(dir.join(format!("{stem}.initial.csv")))?;
    let mut states = vec![crate::ssa::State::Susceptible; manifest.n];
    for line in initial_text.lines().skip(1) {
        let mut parts = line.split(',');
        let i: usize = parts
            .next()
            .and_then(|p| p.parse().ok())
            .ok_or_else(|| IoError::Parse("bad initial row".into()))?;
        let s: u8 = parts
            .next()
            .and_then(|p| p.parse().ok())
            .ok_or_else(|| IoError::Parse("bad initial state".into()))?;
        states[i] = crate::ssa::State::from_u8(s);
    }
    let reader = BufReader::new(std::fs::File::open(dir.join(format!("{stem}.csv")))?);
    let mut events = Vec::new();
    for line in reader.lines().skip(1) {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split(',');
        let time: f64 = parts
            .next()
            .and_then(|p| p.parse().ok())
            .ok_or_else(|| IoError::Parse("bad event time".into()))?;
        let vertex: u32 = parts
            .next()
            .and_then(|p| p.parse().ok())
            .ok_or_else(|| IoError::Parse("bad vertex".into()))?;
        let transition = parts
            .next()
            .and_then(Transition::from_label)
            .ok_or_else(|| IoError::Parse("bad transition label".into()))?;
        events.push(crate::ssa::Event {
            time,
            vertex,
            transition,
        });
    }
    Ok((
        Trajectory {
            initial: crate::ssa::Configuration { states },
            events,
            horizon: manifest.horizon,
        },
        manifest,
    ))
}

/// Writes pairing rows `time,k,test_id,value`.
pub fn write_pairings(
    path: &Path,
    times: &[f64],
    pairings: &[[Vec<f64>; 3]],
) -> Result<(), IoError> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "time,k,test_id,value")?;
    for (test_id, per_test) in pairings.iter().enumerate() {
        for (k, series) in per_test.iter().enumerate() {
            for (ti, value) in series.iter().enumerate() {
                writeln!(w, "{},{},{test_id},{}", fmt_f64(times[ti]), k + 1, fmt_f64(*value))?;
            }
        }
    }
    Ok(w.flush()?)
}

// ---------------------------------------------------------------------------
// Density paths
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DensityPathMeta {
    pub m: usize,
    pub dt: f64,
    pub provenance: Provenance,
    pub model_hash: String,
}

/// Writes `t,u,w1,w2,w3` rows plus the JSON metadata.
pub fn write_density_path(
    dir: &Path,
    stem: &str,
    path: &DensityPath,
    model_hash: &str,
) -> Result<(), IoError> {
    std::fs::create_dir_all(dir)?;
    let mut w = BufWriter::new(std::fs::File::create(dir.join(format!("{stem}.csv")))?);
    writeln!(w, "t,u,w1,w2,w3")?;
    let m = path.m();
    for (j, slice) in path.w.iter().enumerate() {
        for x in 0..m {
            writeln!(
                w,
                "{},{},{},{},{}",
                fmt_f64(path.times[j]),
                fmt_f64(x as f64 / m as f64),
                fmt_f64(slice[0][x]),
                fmt_f64(slice[1][x]),
                fmt_f64(slice[2][x]),
            )?;
        }
    }
    w.flush()?;
    let meta = DensityPathMeta {
        m,
        dt: path.dt(),
        provenance: path.provenance,
        model_hash: model_hash.to_string(),
    };
    std::fs::write(
        dir.join(format!("{stem}.meta.json")),
        serde_json::to_string_pretty(&meta)?,
    )?;
    Ok(())
}

pub fn read_density_path(dir: &Path, stem: &str) -> Result<DensityPath, IoError> {
    let meta: DensityPathMeta = serde_json::from_str(&std::fs::read_to_string(
        dir.join(format!("{stem}.meta.json")),
    )?)?;
    let reader = BufReader::new(std::fs::File::open(dir.join(format!("{stem}.csv")))?);
    let mut times: Vec<f64> = Vec::new();
    let mut w: Vec<[Vec<f64>; 3]> = Vec::new();
    for line in reader.lines().skip(1) {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != 5 {
            return Err(IoError::Parse("density row needs 5 columns".into()));
        }
        let t: f64 = cells[0].parse().map_err(|_| IoError::Parse("bad t".into()))?;
        if times.last().map_or(true, |last| *last != t) {
            times.push(t);
            w.push([Vec::with_capacity(meta.m), Vec::with_capacity(meta.m), Vec::with_capacity(meta.m)]);
        }
        let slice = w.last_mut().unwrap();
        for k in 0..3 {
            let v: f64 = cells[2 + k]
                .parse()
                .map_err(|_| IoError::Parse("bad density value".into()))?;
            slice[k].push(v);
        }
    }
    Ok(DensityPath {
        times,
        w,
        provenance: meta.provenance,
    })
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

/// Writes moment rows `time,i,j,k1,k2,value`, with `i = j` rows carrying the
/// per-vertex means.
pub fn write_moment_report(path: &Path, report: &MomentReport) -> Result<(), IoError> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "time,i,j,k1,k2,value")?;
    for (ti, t) in report.times.iter().enumerate() {
        for i in 0..report.n {
            for k in 0..4 {
                writeln!(
                    w,
                    "{},{i},{i},{k},{k},{}",
                    fmt_f64(*t),
                    fmt_f64(report.means[ti][k][i])
                )?;
            }
        }
        for (pair_idx, &(i, j)) in report.pairs.iter().enumerate() {
            for k1 in 0..4 {
                for k2 in 0..4 {
                    writeln!(
                        w,
                        "{},{i},{j},{k1},{k2},{}",
                        fmt_f64(*t),
                        fmt_f64(report.second[ti][pair_idx][k1][k2])
                    )?;
                }
            }
        }
    }
    Ok(w.flush()?)
}

/// LDP report JSON payload: `{I1, l1, B1, B2, B3}`.
pub fn write_ldp_report(path: &Path, report: &LdpReport) -> Result<(), IoError> {
    #[derive(Serialize)]
    struct Payload<'a> {
        #[serde(rename = "I1")]
        i1: f64,
        l1: f64,
        #[serde(rename = "B1")]
        b1: f64,
        #[serde(rename = "B2")]
        b2: f64,
        #[serde(rename = "B3")]
        b3: f64,
        #[serde(skip_serializing_if = "Option::is_none")]
        traces_csv: Option<&'a str>,
    }
    std::fs::write(
        path,
        serde_json::to_string_pretty(&Payload {
            i1: report.i1,
            l1: report.l1,
            b1: report.b1,
            b2: report.b2,
            b3: report.b3,
            traces_csv: None,
        })?,
    )?;
    Ok(())
}

/// Writes the per-time-slice integrand traces `t,integrand_B1,...`.
pub fn write_ldp_traces(path: &Path, report: &LdpReport) -> Result<(), IoError> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "t,integrand_B1,integrand_B2,integrand_B3")?;
    for trace in &report.traces {
        writeln!(
            w,
            "{},{},{},{}",
            fmt_f64(trace.t),
            fmt_f64(trace.integrand_b1),
            fmt_f64(trace.integrand_b2),
            fmt_f64(trace.integrand_b3)
        )?;
    }
    Ok(w.flush()?)
}

/// Rate report for the initial/dynamic closed forms.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClosedFormReport {
    #[serde(rename = "I_ini")]
    pub i_ini: f64,
    #[serde(rename = "I_dyn")]
    pub i_dyn: f64,
    pub chain_margin: f64,
    pub derivative_margin: f64,
}

/// Hitting/contraction report JSON payload.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JReport {
    #[serde(rename = "J_contra_1")]
    pub j_contra_1: f64,
    pub derivative_at_tau: f64,
    #[serde(rename = "J_hit_coefficient")]
    pub j_hit_coefficient: f64,
    #[serde(rename = "denominator_B12_part")]
    pub denominator_b12_part: f64,
    #[serde(rename = "denominator_B10_part")]
    pub denominator_b10_part: f64,
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), IoError> {
    std::fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Propagator checkpoints
// ---------------------------------------------------------------------------

/// Binary dump of the propagator checkpoints: a little-endian header
/// `[magic, m, node_count, stride]` (u64 each) followed by the times and the
/// row-major checkpoint matrices.
pub fn write_propagator_checkpoints(path: &Path, prop: &Propagator) -> Result<(), IoError> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    let m = prop.m() as u64;
    let count = prop.checkpoints().len() as u64;
    for header in [
        0x5345_4952_5052_4f50u64,
        m,
        count,
        prop.stride() as u64,
        prop.times().len() as u64,
    ] {
        w.write_all(&header.to_le_bytes())?;
    }
    for t in prop.times() {
        w.write_all(&t.to_le_bytes())?;
    }
    for cp in prop.checkpoints() {
        for r in 0..cp.nrows() {
            for c in 0..cp.ncols() {
                w.write_all(&cp[(r, c)].to_le_bytes())?;
            }
        }
    }
    Ok(w.flush()?)
}

/// Reads back the checkpoint dump: `(m, stride, times, matrices)`.
pub fn read_propagator_checkpoints(
    path: &Path,
) -> Result<(usize, usize, Vec<f64>, Vec<nalgebra::DMatrix<f64>>), IoError> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let mut u64buf = [0u8; 8];
    let mut read_u64 = |r: &mut BufReader<std::fs::File>| -> Result<u64, IoError> {
        r.read_exact(&mut u64buf)?;
        Ok(u64::from_le_bytes(u64buf))
    };
    let magic = read_u64(&mut r)?;
    if magic != 0x5345_4952_5052_4f50 {
        return Err(IoError::Parse("bad propagator checkpoint magic".into()));
    }
    let m = read_u64(&mut r)? as usize;
    let count = read_u64(&mut r)? as usize;
    let stride = read_u64(&mut r)? as usize;
    let times_len = read_u64(&mut r)? as usize;
    let mut f64buf = [0u8; 8];
    let mut times = Vec::with_capacity(times_len);
    for _ in 0..times_len {
        r.read_exact(&mut f64buf)?;
        times.push(f64::from_le_bytes(f64buf));
    }
    let dim = 3 * m;
    let mut matrices = Vec::with_capacity(count);
    for _ in 0..count {
        let mut mat = nalgebra::DMatrix::zeros(dim, dim);
        for row in 0..dim {
            for col in 0..dim {
                r.read_exact(&mut f64buf)?;
                mat[(row, col)] = f64::from_le_bytes(f64buf);
            }
        }
        matrices.push(mat);
    }
    Ok((m, stride, times, matrices))
}
