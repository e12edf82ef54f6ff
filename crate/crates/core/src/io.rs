//! File formats: long-format data, model documents, chain output and reports.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::marglik::MarglikMethod;
use crate::mixture::ThetaDraw;
use crate::model::{EffectLayout, GlmmParams, ModelConfig, Observation, TimeUnit};
use crate::ped::PedRecord;
use crate::postprocess::{Assignment, ComponentProbs, CurvePoint, DeferredAssignment};
use crate::priors::PriorSpec;
use crate::sampler::{AcceptanceSummary, ChainSample, Draw, McmcConfig};

pub const ALLOCPROB_MAGIC: &[u8; 4] = b"LMXP";
pub const ALLOCPROB_VERSION: u16 = 1;
pub const ALLOCPROB_HEADER_LEN: usize = 16;

#[derive(Debug, Deserialize)]
struct LongRow {
    subject: String,
    marker: String,
    time: f64,
    value: f64,
}

/// Reads `subject,marker,time,value` rows, converting times to months.
pub fn read_long_csv_from<R: Read>(reader: R, unit: TimeUnit) -> Result<Vec<Observation>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    for col in ["subject", "marker", "time", "value"] {
        if !headers.iter().any(|h| h == col) {
            return Err(Error::Validation(format!("data file is missing the '{col}' column")));
        }
    }
    let mut out = Vec::new();
    for (line, row) in rdr.deserialize::<LongRow>().enumerate() {
        let row = row.map_err(|e| Error::Validation(format!("data row {}: {e}", line + 2)))?;
        out.push(Observation {
            subject: row.subject,
            marker: row.marker,
            time: unit.to_months(row.time),
            value: row.value,
        });
    }
    Ok(out)
}

pub fn read_long_csv(path: &Path, unit: TimeUnit) -> Result<Vec<Observation>> {
    read_long_csv_from(BufReader::new(File::open(path)?), unit)
}

/// Writes observations with times in months.
pub fn write_long_csv(path: &Path, observations: &[Observation]) -> Result<()> {
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    w.write_record(["subject", "marker", "time", "value"])?;
    for o in observations {
        w.write_record([
            o.subject.clone(),
            o.marker.clone(),
            o.time.to_string(),
            o.value.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_model(path: &Path) -> Result<ModelConfig> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Validation(format!("model file {}: {e}", path.display())))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")?;
    f.flush()?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

/// Column names of `params.csv`: iteration, weights, means, `vech(D_k)`
/// (lower triangle, column by column), fixed effects, dispersions and the
/// diagonal of the hyper-scale matrix.
pub fn params_header(layout: &EffectLayout, k: usize) -> Vec<String> {
    let names = &layout.effect_names;
    let q = layout.q;
    let mut h = vec!["iteration".to_string()];
    h.extend((1..=k).map(|c| format!("w[{c}]")));
    for c in 1..=k {
        h.extend(names.iter().map(|n| format!("mu[{c}][{n}]")));
    }
    for c in 1..=k {
        for j in 0..q {
            for i in j..q {
                h.push(format!("D[{c}][{}][{}]", names[i], names[j]));
            }
        }
    }
    for names in &layout.fixed_names {
        h.extend(names.iter().map(|f| format!("alpha[{f}]")));
    }
    for (r, id) in layout.marker_ids.iter().enumerate() {
        if layout.families[r].has_dispersion() {
            h.push(format!("phi[{id}]"));
        }
    }
    h.extend(names.iter().map(|n| format!("xi[{n}]")));
    h
}

/// Raw sweep index (1-based) at which draw `m` was stored.
pub fn stored_iteration(config: &McmcConfig, m: usize) -> u64 {
    config.burnin_sweeps() + ((m + 1) * config.thin) as u64
}

fn draw_row(layout: &EffectLayout, d: &Draw) -> Vec<f64> {
    let q = layout.q;
    let mut row = d.theta.weights.clone();
    for mu in &d.theta.means {
        row.extend(mu.iter());
    }
    for cov in &d.theta.covs {
        for j in 0..q {
            for i in j..q {
                row.push(cov[(i, j)]);
            }
        }
    }
    for a in &d.psi.alpha {
        row.extend(a);
    }
    for (r, phi) in d.psi.phi.iter().enumerate() {
        if layout.families[r].has_dispersion() {
            row.push(phi.unwrap_or(f64::NAN));
        }
    }
    row.extend(&d.hyper_scale);
    row
}

/// Writes one row per kept draw. Values use the shortest representation that
/// parses back to the same `f64`.
pub fn write_params_csv<W: Write>(out: W, chain: &ChainSample, layout: &EffectLayout) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(params_header(layout, chain.k))?;
    for (m, d) in chain.draws.iter().enumerate() {
        let mut rec = vec![stored_iteration(&chain.config, m).to_string()];
        rec.extend(draw_row(layout, d).iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Parses `params.csv` back into draws (with their iteration numbers).
pub fn read_params_csv<R: Read>(input: R, layout: &EffectLayout, k: usize) -> Result<(Vec<u64>, Vec<Draw>)> {
    let mut rdr = csv::Reader::from_reader(input);
    let expected = params_header(layout, k);
    let got: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if got != expected {
        return Err(Error::Validation(
            "params.csv columns do not match the model and K".into(),
        ));
    }
    let q = layout.q;
    let mut iters = Vec::new();
    let mut draws = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let vals: Vec<f64> = rec
            .iter()
            .map(|s| {
                s.parse::<f64>()
                    .map_err(|e| Error::Validation(format!("params.csv value '{s}': {e}")))
            })
            .collect::<Result<_>>()?;
        iters.push(vals[0] as u64);
        let mut it = vals[1..].iter().copied();
        let mut take = |n: usize| -> Vec<f64> { it.by_ref().take(n).collect() };
        let weights = take(k);
        let means = (0..k).map(|_| DVector::from_vec(take(q))).collect();
        let covs = (0..k)
            .map(|_| {
                let v = take(q * (q + 1) / 2);
                let mut c = DMatrix::zeros(q, q);
                let mut idx = 0;
                for j in 0..q {
                    for i in j..q {
                        c[(i, j)] = v[idx];
                        c[(j, i)] = v[idx];
                        idx += 1;
                    }
                }
                c
            })
            .collect();
        let alpha = layout.fixed_dims.iter().map(|&p| take(p)).collect();
        let phi = layout
            .families
            .iter()
            .map(|f| f.has_dispersion().then(|| take(1)[0]))
            .collect();
        let hyper_scale = take(q);
        draws.push(Draw {
            psi: GlmmParams { alpha, phi },
            theta: ThetaDraw { weights, means, covs },
            hyper_scale,
        });
    }
    Ok((iters, draws))
}

/// Dense `N x K x M` block of probabilities in the allocprob.bin layout.
#[derive(Debug, Clone, PartialEq)]
pub struct AllocProbBlock {
    pub n: usize,
    pub k: usize,
    pub m: usize,
    /// Entry `(i, k, m)` at `(i * K + k) * M + m`.
    pub values: Vec<f64>,
}

impl AllocProbBlock {
    pub fn from_chain(chain: &ChainSample) -> Self {
        let (n, k, m) = (chain.n_subjects, chain.k, chain.m());
        let mut values = vec![0.0; n * k * m];
        for (d, p) in chain.alloc_probs.iter().enumerate() {
            for (ik, v) in p.iter().enumerate() {
                values[ik * m + d] = *v;
            }
        }
        Self { n, k, m, values }
    }

    pub fn from_probs(probs: &ComponentProbs) -> Self {
        Self {
            n: probs.n,
            k: probs.k,
            m: probs.m,
            values: probs.p_draws.clone(),
        }
    }

    /// Per-draw `N x K` matrices, as stored on a chain.
    pub fn to_draw_matrices(&self) -> Vec<Vec<f64>> {
        (0..self.m)
            .map(|d| (0..self.n * self.k).map(|ik| self.values[ik * self.m + d]).collect())
            .collect()
    }
}

/// Header: magic `LMXP`, u16 version, u32 N, u16 K, u32 M (little endian),
/// then the values as little-endian f64.
pub fn write_allocprob<W: Write>(mut out: W, block: &AllocProbBlock) -> Result<()> {
    let n = u32::try_from(block.n).map_err(|_| Error::Validation("N too large for allocprob.bin".into()))?;
    let k = u16::try_from(block.k).map_err(|_| Error::Validation("K too large for allocprob.bin".into()))?;
    let m = u32::try_from(block.m).map_err(|_| Error::Validation("M too large for allocprob.bin".into()))?;
    out.write_all(ALLOCPROB_MAGIC)?;
    out.write_all(&ALLOCPROB_VERSION.to_le_bytes())?;
    out.write_all(&n.to_le_bytes())?;
    out.write_all(&k.to_le_bytes())?;
    out.write_all(&m.to_le_bytes())?;
    for v in &block.values {
        out.write_all(&v.to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_allocprob<R: Read>(mut input: R) -> Result<AllocProbBlock> {
    let mut head = [0u8; ALLOCPROB_HEADER_LEN];
    input.read_exact(&mut head)?;
    if &head[0..4] != ALLOCPROB_MAGIC {
        return Err(Error::Validation("allocprob.bin: bad magic".into()));
    }
    let version = u16::from_le_bytes([head[4], head[5]]);
    if version != ALLOCPROB_VERSION {
        return Err(Error::Validation(format!(
            "allocprob.bin: unsupported version {version}"
        )));
    }
    let n = u32::from_le_bytes(head[6..10].try_into().expect("4 bytes")) as usize;
    let k = u16::from_le_bytes([head[10], head[11]]) as usize;
    let m = u32::from_le_bytes(head[12..16].try_into().expect("4 bytes")) as usize;
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    if bytes.len() != n * k * m * 8 {
        return Err(Error::Validation(format!(
            "allocprob.bin: expected {} values, found {} bytes",
            n * k * m,
            bytes.len()
        )));
    }
    let values = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok(AllocProbBlock { n, k, m, values })
}

/// Everything needed to reproduce a fit and to reload its output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitManifest {
    pub version: String,
    pub command: Vec<String>,
    /// Copy of the input data (months) stored next to the output.
    pub data_file: String,
    pub model_file: String,
    pub time_unit: TimeUnit,
    pub k: usize,
    pub n_subjects: usize,
    pub n_observations: usize,
    pub q: usize,
    pub kept: usize,
    pub seed: u64,
    pub config: McmcConfig,
    pub prior: PriorSpec,
    pub marglik: MarglikMethod,
    pub acceptance: AcceptanceSummary,
    pub proposal_log_scales_after_burnin: Vec<f64>,
    pub relabel_rounds: usize,
    pub relabel_converged: bool,
    pub threads: usize,
}

/// One row of classification.csv.
pub struct ClassificationRow<'a> {
    pub subject: &'a str,
    pub pi_hat: &'a [f64],
    pub hpd: &'a [(f64, f64)],
    pub assignment: Assignment,
    pub deferred: Option<&'a DeferredAssignment>,
}

/// Columns: subject, `pi_k`, `hpd_lo_k`, `hpd_hi_k`, 1-based assignment
/// (empty when deferred), deferred flag, tie flag.
pub fn write_classification<W: Write>(out: W, k: usize, rows: &[ClassificationRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut head = vec!["subject".to_string()];
    head.extend((1..=k).map(|c| format!("pi_{c}")));
    for c in 1..=k {
        head.push(format!("hpd_lo_{c}"));
        head.push(format!("hpd_hi_{c}"));
    }
    head.extend(["assignment", "deferred", "tie"].map(String::from));
    w.write_record(&head)?;
    for r in rows {
        let mut rec = vec![r.subject.to_string()];
        rec.extend(r.pi_hat.iter().map(|v| v.to_string()));
        for (lo, hi) in r.hpd {
            rec.push(lo.to_string());
            rec.push(hi.to_string());
        }
        let (assigned, deferred) = match r.deferred {
            Some(d) => (
                d.cluster.map(|c| (c + 1).to_string()).unwrap_or_default(),
                d.cluster.is_none(),
            ),
            None => ((r.assignment.cluster + 1).to_string(), false),
        };
        rec.push(assigned);
        rec.push(u8::from(deferred).to_string());
        rec.push(u8::from(r.assignment.tie).to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Columns: K, PED, E[D], p_opt, estimator, mc_se, method, selected, flags.
pub fn write_ped_csv<W: Write>(out: W, records: &[PedRecord], selected: Option<usize>) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "K",
        "PED",
        "E[D]",
        "p_opt",
        "estimator",
        "mc_se",
        "method",
        "selected",
        "flags",
    ])?;
    for r in records {
        w.write_record([
            r.k.to_string(),
            r.ped.to_string(),
            r.expected_deviance.to_string(),
            r.p_opt.to_string(),
            r.estimator.as_str().to_string(),
            r.mc_se.to_string(),
            serde_json::to_value(r.method)?.as_str().unwrap_or_default().to_string(),
            u8::from(selected == Some(r.k)).to_string(),
            r.flags.join(";"),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Columns: subject, 1-based true cluster, one column per random effect.
pub fn write_truth_csv<W: Write>(
    out: W,
    subjects: &[String],
    truth: &[usize],
    b: &[Vec<f64>],
    effect_names: &[String],
) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut head = vec!["subject".to_string(), "cluster".to_string()];
    head.extend(effect_names.iter().cloned());
    w.write_record(&head)?;
    for ((s, t), bi) in subjects.iter().zip(truth).zip(b) {
        let mut rec = vec![s.clone(), (t + 1).to_string()];
        rec.extend(bi.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_curves_csv<W: Write>(out: W, points: &[CurvePoint]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["marker", "cluster", "time", "mean"])?;
    for p in points {
        w.write_record([
            p.marker.clone(),
            (p.cluster + 1).to_string(),
            p.time.to_string(),
            p.mean.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
