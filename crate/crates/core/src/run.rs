//! End-to-end runs driven by a [`RunConfig`]: dataset loading, per-seed
//! training with checkpoints, checkpoint evaluation and the ablations.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

use crate::ablation::{self, AblationKind, Variant};
use crate::autodiff::{AutodiffError, Float};
use crate::checkpoint::{self, CheckpointError};
use crate::config::{ConfigError, RunConfig};
use crate::data::{self, gen_linear_table, gen_two_scale_regression, split, DataError, Dataset};
use crate::encoder::EncoderError;
use crate::metrics::{DatasetScore, MetricError, Report};
use crate::model::{BasisTransformer, ModelError};
use crate::train::{self, TaskData, TrainError, TrainSinks};

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl RunError {
    /// Process exit code: 2 config, 3 data, 4 numeric failure, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) => 2,
            RunError::Train(TrainError::Config(_)) | RunError::Model(ModelError::Config(_)) => 2,
            RunError::Data(_) | RunError::Encoder(_) => 3,
            RunError::Train(TrainError::NonFinite { .. }) | RunError::Train(TrainError::Autodiff(AutodiffError::NonFinite { .. })) => 4,
            RunError::Train(TrainError::Encoder(_)) => 3,
            _ => 1,
        }
    }
}

type Result<T, E = RunError> = std::result::Result<T, E>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RunError + '_ {
    move |source| RunError::Io { path: path.to_path_buf(), source }
}

/// The built-in collection used when no manifest is configured: the two-scale
/// tables and the linear table.
pub fn synthetic_datasets(seed: u64, rows: usize) -> Result<Vec<Dataset>> {
    let (small, large) = gen_two_scale_regression(seed, rows)?;
    Ok(vec![small, large, gen_linear_table(seed, rows)?])
}

pub fn load_datasets(cfg: &RunConfig) -> Result<Vec<Dataset>> {
    match &cfg.data {
        None => synthetic_datasets(cfg.split.seed, cfg.ablation.synthetic_rows),
        Some(path) => {
            let manifest = data::read_manifest(path)?;
            let na: HashSet<String> = data::na_set(&cfg.na_values);
            Ok(manifest.datasets.iter().map(|d| d.load(&cfg.cache_dir, &na)).collect::<Result<Vec<_>, _>>()?)
        }
    }
}

/// Downloads every manifest entry that has a URL and no local file yet.
pub fn fetch_all(cfg: &RunConfig) -> Result<Vec<(String, PathBuf, u64)>> {
    let path = cfg.data.as_ref().ok_or_else(|| ConfigError::Invalid { field: "data".into(), msg: "fetch needs a dataset manifest".into() })?;
    let manifest = data::read_manifest(path)?;
    let mut out = Vec::new();
    for d in &manifest.datasets {
        let dest = d.local_path(&cfg.cache_dir);
        if let Some(url) = &d.url {
            if !dest.exists() {
                let bytes = data::fetch_http(url, &dest)?;
                log::info!("fetched {} ({bytes} bytes) to {}", d.name, dest.display());
                out.push((d.name.clone(), dest, bytes));
            }
        }
    }
    Ok(out)
}

/// Tokenized splits of every dataset plus the held-out test rows.
pub struct Prepared {
    pub tasks: Vec<TaskData>,
    pub tests: Vec<(Vec<crate::encoder::TokenizedRow>, Vec<f64>)>,
}

pub fn prepare<T: Float>(model: &BasisTransformer<T>, datasets: &[Dataset], cfg: &RunConfig) -> Result<Prepared> {
    let sizes: Vec<(&str, usize)> = datasets.iter().map(|d| (d.name.as_str(), d.len())).collect();
    let splits = split(&sizes, &cfg.split)?;
    let rt = model.encoder.row_tokenizer();
    let mut tasks = Vec::new();
    let mut tests = Vec::new();
    for (d, s) in datasets.iter().zip(&splits) {
        let (task, test_rows, test_y) = TaskData::from_split(&rt, d, s)?;
        tasks.push(task);
        tests.push((test_rows, test_y));
    }
    Ok(Prepared { tasks, tests })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TestScore {
    pub dataset: String,
    pub r2: Option<f64>,
}

pub fn test_scores<T: Float>(model: &BasisTransformer<T>, prepared: &Prepared, batch: usize) -> Result<Vec<TestScore>> {
    prepared
        .tasks
        .iter()
        .zip(&prepared.tests)
        .map(|(task, (rows, y))| {
            let pred = train::predict(model, rows, batch)?;
            Ok(TestScore { dataset: task.name.clone(), r2: crate::metrics::r2(y, &pred).ok() })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeedRun {
    pub seed: u64,
    pub best_stride: usize,
    pub best_val_r2: f64,
    pub steps: u64,
    pub test: Vec<TestScore>,
}

pub fn seed_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed_{seed}"))
}

/// Trains one seed. Writes `metrics.jsonl` and `best.ckpt` under `seed_<n>/`.
pub fn train_seed<T: Float>(cfg: &RunConfig, datasets: &[Dataset], seed: u64, out: &Path) -> Result<SeedRun> {
    let dir = seed_dir(out, seed);
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let mut model = BasisTransformer::<T>::new(&cfg.model, &cfg.text, seed)?;
    log::info!("seed {seed}: {} parameters", model.num_params());
    let prepared = prepare(&model, datasets, cfg)?;
    let tc = train::TrainConfig { seed, ..cfg.train.clone() };
    let sinks = TrainSinks { metric_log: Some(dir.join("metrics.jsonl")), checkpoint: Some(dir.join("best.ckpt")) };
    let outcome = train::train_loop(&mut model, &prepared.tasks, &tc, &sinks)?;
    model.params.restore(&outcome.best).map_err(ModelError::from)?;
    let test = test_scores(&model, &prepared, tc.eval_batch_size)?;
    Ok(SeedRun { seed, best_stride: outcome.best_stride, best_val_r2: outcome.best_score, steps: outcome.steps, test })
}

/// Per-dataset R² across seeds; datasets whose R² is undefined are skipped.
pub fn collect_scores(runs: &[Vec<TestScore>]) -> Vec<DatasetScore> {
    let mut out: Vec<DatasetScore> = Vec::new();
    for run in runs {
        for t in run {
            let Some(r2) = t.r2 else { continue };
            match out.iter_mut().find(|d| d.dataset == t.dataset) {
                Some(d) => d.r2.push(r2),
                None => out.push(DatasetScore::new(t.dataset.clone(), vec![r2])),
            }
        }
    }
    out
}

/// Trains every configured seed and writes `report.txt` and `runs.json`.
pub fn train_all<T: Float>(cfg: &RunConfig, out: &Path) -> Result<(Vec<SeedRun>, String)> {
    let datasets = load_datasets(cfg)?;
    fs::create_dir_all(out).map_err(io_err(out))?;
    let mut runs = Vec::new();
    for &seed in &cfg.seeds {
        runs.push(train_seed::<T>(cfg, &datasets, seed, out)?);
    }
    let scores = collect_scores(&runs.iter().map(|r| r.test.clone()).collect::<Vec<_>>());
    let report = Report { model: "basis", scores: &scores }.to_string();
    let path = out.join("report.txt");
    fs::write(&path, &report).map_err(io_err(&path))?;
    let path = out.join("runs.json");
    fs::write(&path, serde_json::to_string_pretty(&runs).expect("serializable")).map_err(io_err(&path))?;
    Ok((runs, report))
}

/// Scores a checkpoint on the configured test splits without modifying anything.
pub fn eval_checkpoint<T: Float>(cfg: &RunConfig, ckpt: &Path) -> Result<(Vec<TestScore>, String)> {
    let (model, _) = checkpoint::load::<T>(ckpt)?;
    let datasets = load_datasets(cfg)?;
    let prepared = prepare(&model, &datasets, cfg)?;
    let test = test_scores(&model, &prepared, cfg.train.eval_batch_size)?;
    let scores = collect_scores(std::slice::from_ref(&test));
    let report = Report { model: "basis", scores: &scores }.to_string();
    Ok((test, report))
}

/// Decoded predictions for every row of `input`, written as CSV to `dest`.
pub fn predict_csv<T: Float>(cfg: &RunConfig, ckpt: &Path, input: &Path, target: Option<&str>, dest: &Path) -> Result<usize> {
    let (model, _) = checkpoint::load::<T>(ckpt)?;
    let na = data::na_set(&cfg.na_values);
    let (columns, rows) = data::load_features(input, target, &na)?;
    let rt = model.encoder.row_tokenizer();
    let tokens = rows.iter().map(|r| rt.tokenize_row(r)).collect::<Result<Vec<_>, _>>()?;
    let preds = train::predict(&model, &tokens, cfg.train.eval_batch_size)?;
    data::write_predictions(dest, &columns, &rows, &preds)?;
    Ok(preds.len())
}

/// Runs one ablation and writes its curves and summary under `out/<kind>/`.
pub fn ablate<T: Float>(cfg: &RunConfig, kind: AblationKind, out: &Path) -> Result<String> {
    let ab = &cfg.ablation;
    let dir = out.join(match kind {
        AblationKind::Numeric => "numeric",
        AblationKind::Gamma => "gamma",
        AblationKind::Blocks => "blocks",
        AblationKind::Loss => "loss",
    });
    if kind == AblationKind::Numeric {
        let curves = ablation::run_numeric(&ab.numeric)?;
        return ablation::write_numeric(&dir, &curves).map_err(io_err(&dir));
    }
    let variants: Vec<Variant> = match kind {
        AblationKind::Gamma => ablation::gamma_variants(&ab.model, &ab.train),
        AblationKind::Blocks => ablation::block_variants(&ab.model, &ab.train),
        _ => ablation::loss_variants(&ab.model, &ab.train),
    };
    let datasets = match (kind, &cfg.data) {
        (AblationKind::Loss, _) | (_, None) => {
            let (small, large) = gen_two_scale_regression(cfg.split.seed, ab.synthetic_rows)?;
            vec![small, large]
        }
        (_, Some(_)) => load_datasets(cfg)?,
    };
    let mut results = Vec::new();
    for v in variants {
        let runs = ablation::run_variant::<T>(&v, &datasets, &ab.text, &cfg.seeds, &cfg.split)?;
        results.push((v, runs));
    }
    ablation::write_variants(&dir, &results).map_err(io_err(&dir))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn exit_codes_follow_error_class() {
        assert_eq!(RunError::Config(ConfigError::Invalid { field: "x".into(), msg: "y".into() }).exit_code(), 2);
        assert_eq!(RunError::Data(DataError::NoDatasets).exit_code(), 3);
        assert_eq!(RunError::Train(TrainError::NonFinite { what: "loss", step: 3 }).exit_code(), 4);
        assert_eq!(RunError::Train(TrainError::Config("bad".into())).exit_code(), 2);
    }

    #[test]
    fn scores_group_by_dataset() {
        let run = |a: f64, b: Option<f64>| vec![TestScore { dataset: "a".into(), r2: Some(a) }, TestScore { dataset: "b".into(), r2: b }];
        let s = collect_scores(&[run(0.1, Some(0.5)), run(0.3, None)]);
        assert_eq!(s, vec![DatasetScore::new("a", vec![0.1, 0.3]), DatasetScore::new("b", vec![0.5])]);
    }

    #[test]
    fn tiny_train_then_eval_is_read_only() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = RunConfig { seeds: vec![1], ..RunConfig::default() };
        cfg.model = ModelConfig { dim: 8, n_heads: 2, basis_len: 2, ctx_layers: 0, n_blocks: 1, ..ModelConfig::small() };
        cfg.text = cfg.ablation.text.clone();
        cfg.ablation.synthetic_rows = 40;
        cfg.train = train::TrainConfig { n_strides: 2, stride_size: 3, batch_size: 8, ..cfg.train.clone() };
        let (runs, report) = train_all::<f64>(&cfg, dir.path()).unwrap();
        assert_eq!(runs[0].steps, 6);
        assert!(report.contains("linear"));
        let lines = fs::read_to_string(seed_dir(dir.path(), 1).join("metrics.jsonl")).unwrap();
        assert_eq!(lines.lines().filter(|l| l.contains("\"split\":\"val\"")).count(), 2 * 3);
        let ckpt = seed_dir(dir.path(), 1).join("best.ckpt");
        let before = fs::read(&ckpt).unwrap();
        let (a, ra) = eval_checkpoint::<f64>(&cfg, &ckpt).unwrap();
        let (b, rb) = eval_checkpoint::<f64>(&cfg, &ckpt).unwrap();
        assert_eq!((a, ra), (b, rb));
        assert_eq!(fs::read(&ckpt).unwrap(), before);
    }
}
