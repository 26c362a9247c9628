//! Files in and out: client CSVs, label files, the JSON run config,
//! synthetic blob benchmarks and the run artifacts.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{FmtcError, Result};
use crate::graph::DataMatrix;
use crate::metrics::LabelVector;
use crate::orchestrator::{ConvergenceTrace, HyperParams};

pub const SCHEMA_VERSION: u32 = 1;

fn parse_err(path: &Path, message: String) -> FmtcError {
    FmtcError::Parse {
        path: path.to_path_buf(),
        message,
    }
}

/// Reads a rectangular numeric CSV of any shape. A first line with any
/// non-numeric cell is treated as a header and skipped.
pub fn read_csv_matrix(path: &Path) -> Result<DMatrix<f64>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => FmtcError::io(path, io),
            other => parse_err(path, format!("{other:?}")),
        })?;
    let mut values = Vec::new();
    let mut width = None;
    let mut rows = 0;
    for (idx, record) in reader.records().enumerate() {
        let record = record.map_err(|e| parse_err(path, e.to_string()))?;
        let line = record.position().map_or(idx as u64 + 1, |p| p.line());
        if record.iter().all(|c| c.is_empty()) {
            continue;
        }
        let parsed: Vec<std::result::Result<f64, _>> =
            record.iter().map(str::parse::<f64>).collect();
        if rows == 0 && width.is_none() && parsed.iter().any(|v| v.is_err()) {
            // header
            width = Some(record.len());
            continue;
        }
        let expected = *width.get_or_insert(record.len());
        if record.len() != expected {
            return Err(parse_err(
                path,
                format!(
                    "line {line}: expected {expected} fields, found {}",
                    record.len()
                ),
            ));
        }
        for (col, (cell, v)) in record.iter().zip(parsed).enumerate() {
            match v {
                Ok(v) if v.is_finite() => values.push(v),
                _ => {
                    return Err(parse_err(
                        path,
                        format!(
                            "line {line}, row {}, column {}: not a finite number: {cell:?}",
                            rows + 1,
                            col + 1
                        ),
                    ))
                }
            }
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(parse_err(path, "no numeric rows".into()));
    }
    Ok(DMatrix::from_row_slice(rows, width.unwrap_or(0), &values))
}

/// One non-negative integer per line; blank lines are ignored.
pub fn load_labels(path: &Path) -> Result<LabelVector> {
    let text = fs::read_to_string(path).map_err(|e| FmtcError::io(path, e))?;
    let mut labels = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let v = line.parse::<usize>().map_err(|_| {
            parse_err(
                path,
                format!("line {}: not a non-negative integer: {line:?}", i + 1),
            )
        })?;
        labels.push(v);
    }
    if labels.is_empty() {
        return Err(parse_err(path, "no labels".into()));
    }
    Ok(LabelVector::new(labels))
}

/// Loads one client's samples and, optionally, its labels.
pub fn load_client_csv(
    path: &Path,
    labels: Option<&Path>,
) -> Result<(DataMatrix, Option<LabelVector>)> {
    let x = DataMatrix::new(read_csv_matrix(path)?).map_err(|e| parse_err(path, e.to_string()))?;
    let labels = match labels {
        Some(lp) => {
            let l = load_labels(lp)?;
            if l.len() != x.rows() {
                return Err(parse_err(
                    lp,
                    format!(
                        "{} labels for {} samples in {}",
                        l.len(),
                        x.rows(),
                        path.display()
                    ),
                ));
            }
            Some(l)
        }
        None => None,
    };
    Ok((x, labels))
}

fn create_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| FmtcError::io(dir, e))?;
        }
    }
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    create_parent(path)?;
    fs::write(path, text).map_err(|e| FmtcError::io(path, e))
}

/// Writes a matrix as headerless CSV with round-trip float formatting.
pub fn write_matrix_csv(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    let mut out = String::new();
    for i in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols()).map(|j| format!("{:?}", m[(i, j)])).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    write_text(path, &out)
}

pub fn write_labels(path: &Path, labels: &[usize]) -> Result<()> {
    let mut out = String::with_capacity(labels.len() * 2);
    for l in labels {
        out.push_str(&l.to_string());
        out.push('\n');
    }
    write_text(path, &out)
}

/// One JSON object per round.
pub fn write_trace(path: &Path, trace: &ConvergenceTrace) -> Result<()> {
    create_parent(path)?;
    let file = fs::File::create(path).map_err(|e| FmtcError::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for r in &trace.records {
        let line = serde_json::to_string(r).map_err(|e| FmtcError::Internal(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| FmtcError::io(path, e))?;
    }
    w.flush().map_err(|e| FmtcError::io(path, e))
}

pub fn read_trace(path: &Path) -> Result<ConvergenceTrace> {
    let text = fs::read_to_string(path).map_err(|e| FmtcError::io(path, e))?;
    let records = text
        .lines()
        .enumerate()
        .map(|(i, line)| {
            serde_json::from_str(line).map_err(|e| parse_err(path, format!("line {}: {e}", i + 1)))
        })
        .collect::<Result<_>>()?;
    Ok(ConvergenceTrace { records })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text =
        serde_json::to_string_pretty(value).map_err(|e| FmtcError::Internal(e.to_string()))?;
    text.push('\n');
    write_text(path, &text)
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| FmtcError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| parse_err(path, e.to_string()))
}

/// Gaussian blob benchmark with per-client heterogeneity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub clients: usize,
    pub clusters: usize,
    pub features: usize,
    /// Samples per client.
    pub samples: usize,
    /// Minimum distance between cluster means, in within-cluster std units.
    pub separation: f64,
    /// Length of the random offset added to every mean of a client.
    pub mean_shift: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.clients == 0 || self.clusters == 0 || self.features == 0 || self.samples == 0 {
            return Err(FmtcError::InvalidParameter(
                "clients, clusters, features and samples must all be positive".into(),
            ));
        }
        if self.clusters > self.samples {
            return Err(FmtcError::InvalidParameter(format!(
                "{} clusters need at least as many samples per client, got {}",
                self.clusters, self.samples
            )));
        }
        if self.samples < 2 {
            return Err(FmtcError::InvalidParameter(
                "need at least 2 samples per client".into(),
            ));
        }
        if !(self.separation > 0.0) || !self.separation.is_finite() {
            return Err(FmtcError::InvalidParameter(format!(
                "separation must be > 0, got {}",
                self.separation
            )));
        }
        if !(self.mean_shift >= 0.0) || !self.mean_shift.is_finite() {
            return Err(FmtcError::InvalidParameter(format!(
                "mean_shift must be >= 0, got {}",
                self.mean_shift
            )));
        }
        Ok(())
    }
}

fn random_unit(rng: &mut impl Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Means at scaled `±e_i` (pairwise distance at least `sep`), then random
/// points accepted only if far enough from all earlier means.
fn cluster_means(spec: &SyntheticSpec, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let d = spec.features;
    let sep = spec.separation;
    let scale = sep / std::f64::consts::SQRT_2;
    let mut means: Vec<Vec<f64>> = Vec::with_capacity(spec.clusters);
    for c in 0..spec.clusters.min(2 * d) {
        let mut v = vec![0.0; d];
        v[c % d] = if c < d { scale } else { -scale };
        means.push(v);
    }
    let mut radius = sep;
    while means.len() < spec.clusters {
        let cand: Vec<f64> = random_unit(rng, d)
            .into_iter()
            .map(|x| x * radius)
            .collect();
        let far = means.iter().all(|m| {
            m.iter()
                .zip(&cand)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt()
                >= sep
        });
        if far {
            means.push(cand);
        } else {
            radius *= 1.01;
        }
    }
    means
}

/// Per client: balanced isotropic unit-variance blobs around shared means,
/// all shifted by a client-specific offset of length `mean_shift`, in
/// shuffled order. Bit-identical for a fixed spec.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Vec<(DataMatrix, LabelVector)>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let means = cluster_means(spec, &mut rng);
    let d = spec.features;
    (0..spec.clients)
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(t as u64 + 1);
            let shift: Vec<f64> = random_unit(&mut rng, d)
                .into_iter()
                .map(|x| x * spec.mean_shift)
                .collect();
            let mut labels: Vec<usize> = (0..spec.samples).map(|i| i % spec.clusters).collect();
            labels.shuffle(&mut rng);
            let mut values = Vec::with_capacity(spec.samples * d);
            for &l in &labels {
                for j in 0..d {
                    let noise: f64 = rng.sample(StandardNormal);
                    values.push(means[l][j] + shift[j] + noise);
                }
            }
            Ok((
                DataMatrix::from_rows(spec.samples, d, &values)?,
                LabelVector::new(labels),
            ))
        })
        .collect()
}

/// Deterministic train/test partition of `0..n`; both index lists sorted.
pub fn split_indices(n: usize, test_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let n_test = (n as f64 * test_fraction).round() as usize;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut test = idx[..n_test].to_vec();
    let mut train = idx[n_test..].to_vec();
    test.sort_unstable();
    train.sort_unstable();
    (train, test)
}

/// Everything a `run` needs. Serialized as one flat JSON object: the run
/// fields below plus every [`HyperParams`] field.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub hyper: HyperParams,
    pub data_paths: Vec<PathBuf>,
    pub label_paths: Option<Vec<PathBuf>>,
    pub output_dir: PathBuf,
    /// Held-out share of every client's samples for out-of-sample scoring.
    pub test_fraction: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunFields {
    schema_version: u32,
    data_paths: Vec<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label_paths: Option<Vec<PathBuf>>,
    output_dir: PathBuf,
    #[serde(default = "default_test_fraction")]
    test_fraction: f64,
}

fn default_test_fraction() -> f64 {
    0.2
}

const RUN_KEYS: [&str; 5] = [
    "schema_version",
    "data_paths",
    "label_paths",
    "output_dir",
    "test_fraction",
];

impl RunConfig {
    pub fn new(data_paths: Vec<PathBuf>, output_dir: PathBuf) -> Self {
        RunConfig {
            hyper: HyperParams::default(),
            data_paths,
            label_paths: None,
            output_dir,
            test_fraction: default_test_fraction(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.hyper
            .validate()
            .map_err(|e| FmtcError::Config(e.to_string()))?;
        if self.data_paths.is_empty() {
            return Err(FmtcError::Config(
                "data_paths must list at least one file".into(),
            ));
        }
        if let Some(l) = &self.label_paths {
            if l.len() != self.data_paths.len() {
                return Err(FmtcError::Config(format!(
                    "label_paths has {} entries but data_paths has {}",
                    l.len(),
                    self.data_paths.len()
                )));
            }
        }
        if !(0.0..=0.5).contains(&self.test_fraction) {
            return Err(FmtcError::Config(format!(
                "test_fraction must be in [0, 0.5], got {}",
                self.test_fraction
            )));
        }
        Ok(())
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let value: Value =
            serde_json::from_str(text).map_err(|e| FmtcError::Config(e.to_string()))?;
        let Value::Object(mut all) = value else {
            return Err(FmtcError::Config("top level must be a JSON object".into()));
        };
        let mut run = Map::new();
        for key in RUN_KEYS {
            if let Some(v) = all.remove(key) {
                run.insert(key.to_string(), v);
            }
        }
        let run: RunFields = serde_json::from_value(Value::Object(run))
            .map_err(|e| FmtcError::Config(e.to_string()))?;
        if run.schema_version != SCHEMA_VERSION {
            return Err(FmtcError::Config(format!(
                "unsupported schema_version {}, expected {SCHEMA_VERSION}",
                run.schema_version
            )));
        }
        let hyper: HyperParams = serde_json::from_value(Value::Object(all))
            .map_err(|e| FmtcError::Config(e.to_string()))?;
        let cfg = RunConfig {
            hyper,
            data_paths: run.data_paths,
            label_paths: run.label_paths,
            output_dir: run.output_dir,
            test_fraction: run.test_fraction,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads a config file. Relative paths inside it are resolved against
    /// the directory holding the file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| FmtcError::io(path, e))?;
        let mut cfg = Self::from_json_str(&text).map_err(|e| match e {
            FmtcError::Config(msg) => FmtcError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })?;
        let base = path.parent().unwrap_or(Path::new(""));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        cfg.data_paths.iter_mut().for_each(resolve);
        if let Some(l) = cfg.label_paths.as_mut() {
            l.iter_mut().for_each(resolve);
        }
        resolve(&mut cfg.output_dir);
        Ok(cfg)
    }

    pub fn to_json_string(&self) -> Result<String> {
        let internal = |e: serde_json::Error| FmtcError::Internal(e.to_string());
        let run = RunFields {
            schema_version: SCHEMA_VERSION,
            data_paths: self.data_paths.clone(),
            label_paths: self.label_paths.clone(),
            output_dir: self.output_dir.clone(),
            test_fraction: self.test_fraction,
        };
        let Value::Object(mut obj) = serde_json::to_value(run).map_err(internal)? else {
            unreachable!("struct serializes to an object")
        };
        let Value::Object(hyper) = serde_json::to_value(&self.hyper).map_err(internal)? else {
            unreachable!("struct serializes to an object")
        };
        obj.extend(hyper);
        serde_json::to_string_pretty(&Value::Object(obj)).map_err(internal)
    }
}
