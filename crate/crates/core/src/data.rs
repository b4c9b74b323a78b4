//! Dataset loading, splitting, downloading, and synthetic generators.

use std::collections::HashSet;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::{CellValue, EncoderError, Row};
use crate::smr::SmrConfig;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
    #[error("{path}: no column named {column:?}")]
    MissingTarget { path: PathBuf, column: String },
    #[error("{path}: row {row} has non-numeric target {value:?}")]
    NonNumericTarget { path: PathBuf, row: usize, value: String },
    #[error("dataset {name:?} has {rows} rows, needs more than {needed}")]
    TooSmall { name: String, rows: usize, needed: usize },
    #[error("split needs at least one dataset")]
    NoDatasets,
    #[error("GET {url}: {msg}")]
    Http { url: String, status: Option<u16>, msg: String },
    #[error("manifest {path}: {msg}")]
    Manifest { path: PathBuf, msg: String },
    #[error(transparent)]
    Encoder(#[from] EncoderError),
}

pub type Result<T, E = DataError> = std::result::Result<T, E>;

/// Cell strings that load as [`CellValue::Missing`].
pub const DEFAULT_NA: [&str; 4] = ["", "NA", "NaN", "?"];

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    /// Feature columns, in file order; the target is excluded.
    pub columns: Vec<String>,
    pub rows: Vec<Row>,
    pub target: String,
    pub y: Vec<f64>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn mean_target(&self) -> f64 {
        self.y.iter().sum::<f64>() / self.y.len() as f64
    }

    /// Builds a dataset from numeric feature columns.
    pub fn from_numeric(name: &str, columns: &[&str], features: &[Vec<f64>], target: &str, y: Vec<f64>) -> Result<Self> {
        let rows = features
            .iter()
            .map(|f| Row::new(columns.iter().zip(f).map(|(c, &v)| (c.to_string(), CellValue::Number(v))).collect()))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Dataset { name: name.into(), columns: columns.iter().map(|c| c.to_string()).collect(), rows, target: target.into(), y })
    }
}

fn numeral() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^[+-]?(\d+\.?\d*|\.\d+)([eE][+-]?\d+)?$").expect("valid regex"))
}

/// Classifies one raw cell.
pub fn parse_cell(raw: &str, na: &HashSet<String>) -> CellValue {
    let s = raw.trim();
    if na.contains(s) {
        return CellValue::Missing;
    }
    if numeral().is_match(s) {
        if let Ok(v) = s.parse::<f64>() {
            if v.is_finite() {
                return CellValue::Number(v);
            }
        }
    }
    CellValue::Text(raw.to_string())
}

pub fn na_set<S: AsRef<str>>(literals: &[S]) -> HashSet<String> {
    literals.iter().map(|s| s.as_ref().to_string()).collect()
}

/// Reads a headed CSV. Values pass through unnormalized and no row is dropped.
pub fn load_csv(path: &Path, target: &str, na: &HashSet<String>) -> Result<Dataset> {
    let csv_err = |source| DataError::Csv { path: path.to_path_buf(), source };
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path).map_err(csv_err)?;
    let header: Vec<String> = reader.headers().map_err(csv_err)?.iter().map(|h| h.trim().to_string()).collect();
    let t = header
        .iter()
        .position(|h| h == target)
        .ok_or_else(|| DataError::MissingTarget { path: path.to_path_buf(), column: target.into() })?;
    let mut rows = Vec::new();
    let mut y = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(csv_err)?;
        let mut pairs = Vec::with_capacity(header.len() - 1);
        for (j, raw) in record.iter().enumerate() {
            if j == t {
                match parse_cell(raw, na) {
                    CellValue::Number(v) => y.push(v),
                    _ => return Err(DataError::NonNumericTarget { path: path.to_path_buf(), row: i + 1, value: raw.into() }),
                }
            } else {
                pairs.push((header[j].clone(), parse_cell(raw, na)));
            }
        }
        rows.push(Row::new(pairs)?);
    }
    let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let columns = header.iter().enumerate().filter(|(j, _)| *j != t).map(|(_, h)| h.clone()).collect();
    Ok(Dataset { name, columns, rows, target: target.into(), y })
}

/// Reads a headed CSV as feature rows only, skipping `drop` if present.
pub fn load_features(path: &Path, drop: Option<&str>, na: &HashSet<String>) -> Result<(Vec<String>, Vec<Row>)> {
    let csv_err = |source| DataError::Csv { path: path.to_path_buf(), source };
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path).map_err(csv_err)?;
    let header: Vec<String> = reader.headers().map_err(csv_err)?.iter().map(|h| h.trim().to_string()).collect();
    let keep: Vec<usize> = (0..header.len()).filter(|&j| Some(header[j].as_str()) != drop).collect();
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(csv_err)?;
        let pairs = keep.iter().map(|&j| (header[j].clone(), parse_cell(record.get(j).unwrap_or(""), na))).collect();
        rows.push(Row::new(pairs)?);
    }
    Ok((keep.iter().map(|&j| header[j].clone()).collect(), rows))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSpec {
    /// Fraction of the smallest dataset used for each of val and test.
    pub eval_fraction: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec { eval_fraction: 0.2, seed: 0 }
    }
}

/// Row indices of one dataset's splits.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Common eval size: `floor(fraction * smallest size)`.
pub fn eval_size(sizes: &[usize], fraction: f64) -> usize {
    let min = sizes.iter().copied().min().unwrap_or(0);
    (fraction * min as f64).floor() as usize
}

/// Random disjoint val/test samples of equal size for every dataset; the rest trains.
pub fn split(sizes: &[(&str, usize)], spec: &SplitSpec) -> Result<Vec<Split>> {
    if sizes.is_empty() {
        return Err(DataError::NoDatasets);
    }
    let n = sizes.iter().map(|(_, s)| *s).collect::<Vec<_>>();
    let ne = eval_size(&n, spec.eval_fraction);
    for &(name, rows) in sizes {
        if ne == 0 || rows <= 2 * ne {
            return Err(DataError::TooSmall { name: name.into(), rows, needed: 2 * ne.max(1) });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    Ok(sizes
        .iter()
        .map(|&(_, rows)| {
            let mut idx: Vec<usize> = (0..rows).collect();
            idx.shuffle(&mut rng);
            let test = idx[..ne].to_vec();
            let val = idx[ne..2 * ne].to_vec();
            let mut train = idx[2 * ne..].to_vec();
            train.sort_unstable();
            Split { train, val, test }
        })
        .collect())
}

/// Downloads `url` to `dest` byte for byte. Returns the byte count.
pub fn fetch_http(url: &str, dest: &Path) -> Result<u64> {
    let http_err = |status, msg: String| DataError::Http { url: url.into(), status, msg };
    let response = ureq::get(url).call().map_err(|e| match e {
        ureq::Error::StatusCode(code) => http_err(Some(code), format!("HTTP status {code}")),
        other => http_err(None, other.to_string()),
    })?;
    let io_err = |source| DataError::Io { path: dest.to_path_buf(), source };
    if let Some(parent) = dest.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(io_err)?;
    }
    let tmp = dest.with_extension("part");
    let mut out = BufWriter::new(File::create(&tmp).map_err(io_err)?);
    let mut body = response.into_body().into_reader();
    let bytes = io::copy(&mut body, &mut out).map_err(|e| http_err(None, e.to_string()))?;
    out.flush().map_err(io_err)?;
    drop(out);
    std::fs::rename(&tmp, dest).map_err(io_err)?;
    log::info!("fetched {url} -> {} ({bytes} bytes)", dest.display());
    Ok(bytes)
}

/// One entry of a dataset manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSource {
    pub name: String,
    /// Local CSV path, relative to the manifest's directory.
    #[serde(default)]
    pub path: Option<PathBuf>,
    /// Download location used when `path` is absent or missing.
    #[serde(default)]
    pub url: Option<String>,
    pub target: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    #[serde(rename = "dataset")]
    pub datasets: Vec<DatasetSource>,
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(path).map_err(|source| DataError::Io { path: path.into(), source })?;
    let bad = |msg: String| DataError::Manifest { path: path.into(), msg };
    let mut m: Manifest = toml::from_str(&text).map_err(|e| bad(e.to_string()))?;
    let base = path.parent().unwrap_or(Path::new("."));
    for d in &mut m.datasets {
        if d.path.is_none() && d.url.is_none() {
            return Err(bad(format!("dataset {:?} needs a path or a url", d.name)));
        }
        if let Some(p) = &d.path {
            if p.is_relative() {
                d.path = Some(base.join(p));
            }
        }
    }
    Ok(m)
}

impl DatasetSource {
    /// Local file for this dataset: `path` if given, else `<cache>/<name>.csv`.
    pub fn local_path(&self, cache: &Path) -> PathBuf {
        self.path.clone().unwrap_or_else(|| cache.join(format!("{}.csv", self.name)))
    }

    /// Loads the dataset, downloading it first if needed.
    pub fn load(&self, cache: &Path, na: &HashSet<String>) -> Result<Dataset> {
        let path = self.local_path(cache);
        if !path.exists() {
            if let Some(url) = &self.url {
                fetch_http(url, &path)?;
            }
        }
        let mut d = load_csv(&path, &self.target, na)?;
        d.name = self.name.clone();
        Ok(d)
    }
}

/// Labels of the number-property task, in output order.
pub const NUMBER_LABELS: [&str; 6] = ["even", "odd", "real", "integer", "big", "small"];

pub fn number_labels(v: f64) -> [bool; 6] {
    let integer = v.fract() == 0.0;
    let even = integer && (v as i64) % 2 == 0;
    let odd = integer && !even;
    let big = v.abs() > 50.0;
    [even, odd, !integer, integer, big, !big]
}

#[derive(Debug, Clone, PartialEq)]
pub struct NumberSample {
    pub value: f64,
    pub labels: [bool; 6],
}

/// Train and validation sets of 1000 numbers each in `[-100, 100]`, half integers.
pub fn gen_number_properties(seed: u64) -> (Vec<NumberSample>, Vec<NumberSample>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |n: usize| -> Vec<NumberSample> {
        (0..n)
            .map(|i| {
                let value = if i % 2 == 0 {
                    rng.random_range(-100i64..=100) as f64
                } else {
                    loop {
                        let v: f64 = rng.random_range(-100.0..100.0);
                        if v.fract() != 0.0 {
                            break v;
                        }
                    }
                };
                NumberSample { value, labels: number_labels(value) }
            })
            .collect()
    };
    let train = draw(1000);
    let val = draw(1000);
    (train, val)
}

/// Input representations compared on the number-property task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NumberEncoding {
    /// Sign bit, 7 integer bits, 24 fractional bits.
    Smr,
    /// The 32-bit IEEE-754 pattern, most significant bit first.
    Ieee754,
    /// The value itself.
    Raw,
}

impl NumberEncoding {
    pub const SMR: SmrConfig = SmrConfig { high: 7, low: 24 };

    pub fn width(self) -> usize {
        match self {
            NumberEncoding::Smr | NumberEncoding::Ieee754 => 32,
            NumberEncoding::Raw => 1,
        }
    }

    pub fn encode(self, v: f64) -> Vec<f64> {
        match self {
            NumberEncoding::Smr => {
                let (bits, _) = Self::SMR.encode_saturating(v).expect("finite input");
                bits.to_floats::<f64>()
            }
            NumberEncoding::Ieee754 => {
                let b = (v as f32).to_bits();
                (0..32).rev().map(|i| ((b >> i) & 1) as f64).collect()
            }
            NumberEncoding::Raw => vec![v],
        }
    }
}

/// Two tables with the same 3-column linear structure but different column
/// names, targets in `[1, 10]` and `[1e3, 1e6]`.
pub fn gen_two_scale_regression(seed: u64, rows: usize) -> Result<(Dataset, Dataset)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.02).expect("valid std");
    let mut make = |name: &str, cols: [&str; 3], lo: f64, hi: f64| {
        let mut feats = Vec::with_capacity(rows);
        let mut y = Vec::with_capacity(rows);
        for _ in 0..rows {
            let x: Vec<f64> = (0..3).map(|_| (rng.random_range(0.0..1.0f64) * 64.0).round() / 64.0).collect();
            let u = (0.5 * x[0] + 0.3 * x[1] + 0.2 * x[2] + noise.sample(&mut rng)).clamp(0.0, 1.0);
            feats.push(x);
            y.push(lo + (hi - lo) * u);
        }
        Dataset::from_numeric(name, &cols, &feats, "y", y)
    };
    let small = make("small_scale", ["rating", "effort", "quality"], 1.0, 10.0)?;
    let large = make("large_scale", ["floor area", "lot size", "location score"], 1e3, 1e6)?;
    Ok((small, large))
}

/// `rows` samples of `y = x1 + 2 x2` with `x` uniform in `[0, 16)` on a 1/16 grid.
pub fn gen_linear_table(seed: u64, rows: usize) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut feats = Vec::with_capacity(rows);
    let mut y = Vec::with_capacity(rows);
    for _ in 0..rows {
        let x1 = rng.random_range(0..256) as f64 / 16.0;
        let x2 = rng.random_range(0..256) as f64 / 16.0;
        feats.push(vec![x1, x2]);
        y.push(x1 + 2.0 * x2);
    }
    Dataset::from_numeric("linear", &["x1", "x2"], &feats, "y", y)
}

/// Writes `(rows, predictions)` as CSV with a trailing `prediction` column.
pub fn write_predictions(path: &Path, columns: &[String], rows: &[Row], preds: &[f64]) -> Result<()> {
    let csv_err = |source| DataError::Csv { path: path.to_path_buf(), source };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let mut header: Vec<&str> = columns.iter().map(String::as_str).collect();
    header.push("prediction");
    w.write_record(&header).map_err(csv_err)?;
    for (row, p) in rows.iter().zip(preds) {
        let mut rec: Vec<String> = columns
            .iter()
            .map(|c| match row.get(c) {
                Some(CellValue::Number(v)) => v.to_string(),
                Some(CellValue::Text(s)) => s.clone(),
                Some(CellValue::Missing) | None => String::new(),
            })
            .collect();
        rec.push(p.to_string());
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush().map_err(|source| DataError::Io { path: path.into(), source })?;
    Ok(())
}
