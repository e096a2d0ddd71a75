//! Dataset pipeline, estimator evaluation and single-record comparison.

use std::fmt::Write as _;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gen::MethodMix;
use crate::net::MlpModel;
use crate::rie::{rie_clean, RieConfig};
use crate::rng::{derive_seed, Rng};
use crate::sampling::{make_record, SampleRecord};

pub const MANIFEST_FORMAT_VERSION: u32 = 1;

/// Redraws allowed for one record before the run is aborted.
pub const RECORD_RETRIES: u64 = 5;

const T_STREAM: u64 = 0;
const RECORD_STREAM: u64 = 1;
const WRITE_CHUNK: usize = 256;

fn default_step() -> usize {
    1
}

/// Everything needed to regenerate a dataset byte for byte.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub n: usize,
    /// T is drawn uniformly from `t_min, t_min + t_step, …, ≤ t_max`.
    pub t_min: usize,
    pub t_max: usize,
    #[serde(default = "default_step")]
    pub t_step: usize,
    pub method_mix: MethodMix,
    pub count: usize,
    pub master_seed: u64,
}

impl DatasetManifest {
    pub fn new(n: usize, t_min: usize, t_max: usize, method_mix: MethodMix, count: usize, master_seed: u64) -> Result<Self> {
        let m = Self {
            format_version: MANIFEST_FORMAT_VERSION,
            n,
            t_min,
            t_max,
            t_step: 1,
            method_mix,
            count,
            master_seed,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn with_step(mut self, t_step: usize) -> Result<Self> {
        self.t_step = t_step;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.format_version != MANIFEST_FORMAT_VERSION {
            return Err(Error::precondition(format!(
                "unsupported manifest version {}",
                self.format_version
            )));
        }
        if self.n == 0 {
            return Err(Error::precondition("dimension n must be at least 1"));
        }
        if self.t_min < self.n.max(2) {
            return Err(Error::precondition(format!(
                "t_min = {} must be at least max(n, 2) = {} so that q ≤ 1",
                self.t_min,
                self.n.max(2)
            )));
        }
        if self.t_max < self.t_min {
            return Err(Error::precondition(format!("t_max = {} is below t_min = {}", self.t_max, self.t_min)));
        }
        if self.t_step == 0 {
            return Err(Error::precondition("t_step must be at least 1"));
        }
        if self.count == 0 {
            return Err(Error::precondition("count must be at least 1"));
        }
        // Deserialization bypasses the mix constructor.
        MethodMix::new(self.method_mix.weights())?;
        Ok(())
    }

    /// Sample count of record `index`.
    pub fn t_for(&self, index: u64) -> usize {
        let steps = ((self.t_max - self.t_min) / self.t_step) as u64;
        let k = Rng::new(derive_seed(self.master_seed, T_STREAM, index)).int_inclusive(0, steps);
        self.t_min + k as usize * self.t_step
    }

    /// Record `index`, redrawn with a fresh seed when generation fails.
    pub fn record(&self, index: u64) -> Result<SampleRecord> {
        let t = self.t_for(index);
        let mut last = None;
        for attempt in 0..=RECORD_RETRIES {
            let seed = derive_seed(self.master_seed, RECORD_STREAM + attempt, index);
            match make_record(self.n, t, &self.method_mix, seed) {
                Ok(r) => return Ok(r),
                Err(e) => {
                    log::warn!("record {index} attempt {attempt} (seed {seed}) rejected: {e}");
                    last = Some(e);
                }
            }
        }
        let e = last.expect("at least one attempt");
        Err(Error::Domain(format!(
            "record {index} failed after {RECORD_RETRIES} redraws: {e}"
        )))
    }
}

/// Location of the manifest written next to a dataset file.
pub fn manifest_path(dataset: &Path) -> PathBuf {
    let mut s = dataset.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

/// All records of a manifest, in memory.
pub fn generate_records(manifest: &DatasetManifest) -> Result<Vec<SampleRecord>> {
    manifest.validate()?;
    (0..manifest.count as u64).into_par_iter().map(|i| manifest.record(i)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GenerateSummary {
    /// Records found complete on disk before this run.
    pub resumed_from: usize,
    pub written: usize,
}

/// Writes the manifest's records to `path` as JSON lines, with the manifest
/// itself in a sidecar file.
///
/// If `path` already holds a prefix of the same dataset, generation resumes
/// after the last complete record; the finished file is identical to an
/// uninterrupted run.
pub fn generate_dataset(manifest: &DatasetManifest, path: &Path) -> Result<GenerateSummary> {
    manifest.validate()?;
    let sidecar = manifest_path(path);
    let mut resumed_from = 0;
    let mut file = if path.exists() {
        let existing: DatasetManifest = serde_json::from_str(&std::fs::read_to_string(&sidecar).map_err(|e| {
            Error::precondition(format!(
                "{} exists without a readable manifest ({e}); remove it to regenerate",
                path.display()
            ))
        })?)?;
        if &existing != manifest {
            return Err(Error::precondition(format!(
                "{} was generated from a different manifest; remove it to regenerate",
                path.display()
            )));
        }
        let (complete, keep_bytes) = complete_prefix(path)?;
        if complete > manifest.count {
            return Err(Error::precondition(format!(
                "{} holds {complete} records, more than the manifest's {}",
                path.display(),
                manifest.count
            )));
        }
        resumed_from = complete;
        let mut f = OpenOptions::new().write(true).open(path)?;
        f.set_len(keep_bytes)?;
        f.seek(SeekFrom::End(0))?;
        f
    } else {
        std::fs::write(&sidecar, serde_json::to_string_pretty(manifest)? + "\n")?;
        File::create(path)?
    };
    if resumed_from > 0 {
        log::info!("resuming {} at record {resumed_from}", path.display());
    }

    let mut out = BufWriter::new(&mut file);
    let mut next = resumed_from;
    while next < manifest.count {
        let end = (next + WRITE_CHUNK).min(manifest.count);
        let lines: Vec<String> = (next as u64..end as u64)
            .into_par_iter()
            .map(|i| manifest.record(i).and_then(|r| Ok(serde_json::to_string(&r)?)))
            .collect::<Result<_>>()?;
        for line in lines {
            out.write_all(line.as_bytes())?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        next = end;
    }
    Ok(GenerateSummary {
        resumed_from,
        written: manifest.count - resumed_from,
    })
}

/// Number of complete, parseable lines and the byte length they occupy.
fn complete_prefix(path: &Path) -> Result<(usize, u64)> {
    let mut reader = BufReader::new(File::open(path)?);
    let mut count = 0;
    let mut bytes = 0u64;
    let mut line = String::new();
    loop {
        line.clear();
        let read = reader.read_line(&mut line)?;
        if read == 0 || !line.ends_with('\n') || serde_json::from_str::<SampleRecord>(&line).is_err() {
            break;
        }
        count += 1;
        bytes += read as u64;
    }
    Ok((count, bytes))
}

/// Reads and validates every record of a dataset file.
pub fn read_dataset(path: &Path) -> Result<Vec<SampleRecord>> {
    let reader = BufReader::new(File::open(path)?);
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: SampleRecord =
            serde_json::from_str(&line).map_err(|e| Error::Parse { line: i + 1, msg: e.to_string() })?;
        record
            .validate()
            .map_err(|e| Error::Parse { line: i + 1, msg: e.to_string() })?;
        records.push(record);
    }
    Ok(records)
}

/// Anything that maps a sample spectrum observed at noise ratio `q` to an
/// estimate of the true spectrum.
pub trait SpectrumEstimator: Sync {
    fn estimate(&self, sample_spectrum: &[f64], q: f64) -> Result<Vec<f64>>;
}

/// The raw sample spectrum, sorted.
#[derive(Debug, Clone, Copy, Default)]
pub struct SampleEstimator;

impl SpectrumEstimator for SampleEstimator {
    fn estimate(&self, sample_spectrum: &[f64], _q: f64) -> Result<Vec<f64>> {
        Ok(sorted(sample_spectrum))
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RieEstimator(pub RieConfig);

impl SpectrumEstimator for RieEstimator {
    fn estimate(&self, sample_spectrum: &[f64], q: f64) -> Result<Vec<f64>> {
        Ok(rie_clean(sample_spectrum, q, &self.0)?.values)
    }
}

impl SpectrumEstimator for MlpModel {
    fn estimate(&self, sample_spectrum: &[f64], q: f64) -> Result<Vec<f64>> {
        Ok(self.clean(sample_spectrum, q, true)?.values)
    }
}

fn sorted(v: &[f64]) -> Vec<f64> {
    let mut v = v.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

/// Mean squared difference between two spectra, both sorted first.
pub fn spectrum_mse(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch { expected: b.len(), found: a.len() });
    }
    if a.is_empty() {
        return Err(Error::precondition("empty spectrum"));
    }
    Ok(spectrum_sq_dist(a, b) / a.len() as f64)
}

/// Euclidean distance between two spectra, both sorted first.
pub fn spectrum_l2(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch { expected: b.len(), found: a.len() });
    }
    Ok(spectrum_sq_dist(a, b).sqrt())
}

fn spectrum_sq_dist(a: &[f64], b: &[f64]) -> f64 {
    sorted(a).iter().zip(sorted(b)).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Mean and standard error of the mean.
fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalRow {
    pub t: usize,
    pub q: f64,
    pub mse_sample: f64,
    pub mse_rie: f64,
    pub mse_model: f64,
    pub count: usize,
    pub se_sample: f64,
    pub se_rie: f64,
    pub se_model: f64,
}

/// Aggregate of one estimator over the rows: the mean of the row means and
/// the standard error of that mean.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aggregate {
    pub mean: f64,
    pub se: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub sample: Aggregate,
    pub rie: Aggregate,
    pub model: Aggregate,
}

pub const EVAL_CSV_HEADER: &str = "t,q,mse_sample,mse_rie,mse_model,count";

impl EvalReport {
    fn from_rows(rows: Vec<EvalRow>) -> Self {
        let agg = |mean: fn(&EvalRow) -> f64, se: fn(&EvalRow) -> f64| {
            let k = rows.len() as f64;
            Aggregate {
                mean: rows.iter().map(mean).sum::<f64>() / k,
                se: rows.iter().map(|r| se(r).powi(2)).sum::<f64>().sqrt() / k,
            }
        };
        let sample = agg(|r| r.mse_sample, |r| r.se_sample);
        let rie = agg(|r| r.mse_rie, |r| r.se_rie);
        let model = agg(|r| r.mse_model, |r| r.se_model);
        Self { rows, sample, rie, model }
    }

    /// Fraction of rows where the model's MSE is below the RIE's.
    pub fn model_beats_rie_fraction(&self) -> f64 {
        self.rows.iter().filter(|r| r.mse_model < r.mse_rie).count() as f64 / self.rows.len() as f64
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(EVAL_CSV_HEADER);
        s.push('\n');
        for r in &self.rows {
            writeln!(s, "{},{:?},{:?},{:?},{:?},{}", r.t, r.q, r.mse_sample, r.mse_rie, r.mse_model, r.count).unwrap();
        }
        s
    }
}

/// Per-T mean squared errors of the raw sample spectrum, RIE and `model`
/// against the true spectrum. Grid values without records are skipped.
pub fn evaluate(
    model: &dyn SpectrumEstimator,
    records: &[SampleRecord],
    t_grid: &[usize],
    rie: &RieConfig,
) -> Result<EvalReport> {
    let rie = RieEstimator(*rie);
    let mut rows = Vec::new();
    for &t in t_grid {
        let cell: Vec<&SampleRecord> = records.iter().filter(|r| r.t == t).collect();
        if cell.is_empty() {
            log::warn!("no records with T = {t}; row omitted");
            continue;
        }
        let errors: Vec<[f64; 3]> = cell
            .par_iter()
            .map(|r| {
                Ok([
                    spectrum_mse(&r.sample_spectrum, &r.true_spectrum)?,
                    spectrum_mse(&rie.estimate(&r.sample_spectrum, r.q)?, &r.true_spectrum)?,
                    spectrum_mse(&model.estimate(&r.sample_spectrum, r.q)?, &r.true_spectrum)?,
                ])
            })
            .collect::<Result<_>>()?;
        let column = |k: usize| mean_se(&errors.iter().map(|e| e[k]).collect::<Vec<_>>());
        let (mse_sample, se_sample) = column(0);
        let (mse_rie, se_rie) = column(1);
        let (mse_model, se_model) = column(2);
        rows.push(EvalRow {
            t,
            q: cell[0].q,
            mse_sample,
            mse_rie,
            mse_model,
            count: cell.len(),
            se_sample,
            se_rie,
            se_model,
        });
    }
    if rows.is_empty() {
        return Err(Error::precondition("no records match any T in the grid"));
    }
    Ok(EvalReport::from_rows(rows))
}

/// Distinct T values present in `records`, ascending.
pub fn distinct_t(records: &[SampleRecord]) -> Vec<usize> {
    let mut ts: Vec<usize> = records.iter().map(|r| r.t).collect();
    ts.sort_unstable();
    ts.dedup();
    ts
}

/// Parses `a:b:step` (inclusive range) or a comma-separated list.
pub fn parse_t_grid(s: &str) -> Result<Vec<usize>> {
    let bad = |e: std::num::ParseIntError| Error::precondition(format!("bad T grid {s:?}: {e}"));
    let grid: Vec<usize> = if s.contains(':') {
        let parts: Vec<usize> = s.split(':').map(|p| p.trim().parse().map_err(bad)).collect::<Result<_>>()?;
        let (lo, hi, step) = match parts[..] {
            [lo, hi] => (lo, hi, 1),
            [lo, hi, step] => (lo, hi, step),
            _ => return Err(Error::precondition(format!("bad T grid {s:?}: expected lo:hi[:step]"))),
        };
        if step == 0 || hi < lo {
            return Err(Error::precondition(format!("bad T grid {s:?}: empty range")));
        }
        (lo..=hi).step_by(step).collect()
    } else {
        s.split(',').map(|p| p.trim().parse().map_err(bad)).collect::<Result<_>>()?
    };
    if grid.is_empty() {
        return Err(Error::precondition("empty T grid"));
    }
    Ok(grid)
}

/// The three estimates for one record and their distances to the truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub truth: Vec<f64>,
    pub sample: Vec<f64>,
    pub rie: Vec<f64>,
    pub model: Vec<f64>,
    pub l2_sample: f64,
    pub l2_rie: f64,
    pub l2_model: f64,
}

impl Comparison {
    /// One row per eigenvalue index: `index,true,sample,rie,model`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("index,true,sample,rie,model\n");
        for i in 0..self.truth.len() {
            writeln!(
                s,
                "{i},{:?},{:?},{:?},{:?}",
                self.truth[i], self.sample[i], self.rie[i], self.model[i]
            )
            .unwrap();
        }
        s
    }
}

pub fn compare_single(record: &SampleRecord, model: &dyn SpectrumEstimator, rie: &RieConfig) -> Result<Comparison> {
    let truth = sorted(&record.true_spectrum);
    let sample = sorted(&record.sample_spectrum);
    let rie = sorted(&RieEstimator(*rie).estimate(&sample, record.q)?);
    let model = sorted(&model.estimate(&sample, record.q)?);
    Ok(Comparison {
        l2_sample: spectrum_l2(&sample, &truth)?,
        l2_rie: spectrum_l2(&rie, &truth)?,
        l2_model: spectrum_l2(&model, &truth)?,
        truth,
        sample,
        rie,
        model,
    })
}

/// `epoch,loss` CSV of a training history.
pub fn loss_history_csv(history: &[f64]) -> String {
    let mut s = String::from("epoch,loss\n");
    for (i, l) in history.iter().enumerate() {
        writeln!(s, "{},{l:?}", i + 1).unwrap();
    }
    s
}
