//! Ablation harnesses: numeric input encodings on the number-property task,
//! and model/loss variants trained on shared tabular datasets.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::nn::Linear;
use crate::autodiff::{Float, ParamStore, Tape, Tensor};
use crate::data::{gen_number_properties, split, Dataset, NumberEncoding, NumberSample, SplitSpec};
use crate::encoder::TextEncoderSpec;
use crate::metrics;
use crate::model::{BasisTransformer, HeadMode, ModelConfig};
use crate::train::{self, optimizer_step, LossMode, RunState, StrideRecord, TaskData, TrainConfig, TrainError, TrainSinks};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationKind {
    Numeric,
    Gamma,
    Blocks,
    Loss,
}

impl std::str::FromStr for AblationKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "numeric" => Ok(AblationKind::Numeric),
            "gamma" => Ok(AblationKind::Gamma),
            "blocks" => Ok(AblationKind::Blocks),
            "loss" => Ok(AblationKind::Loss),
            other => Err(format!("unknown ablation kind {other:?} (expected numeric, gamma, blocks or loss)")),
        }
    }
}

pub const GAMMA_SWEEP: [f64; 7] = [0.0, 0.1, 0.2, 0.3, 0.4, 0.45, 0.5];
pub const BLOCK_SWEEP: [usize; 6] = [1, 2, 3, 4, 5, 6];

/// Settings of the number-property MLP comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NumericAblation {
    pub seeds: Vec<u64>,
    pub epochs: usize,
    pub batch_size: usize,
    pub hidden: usize,
    pub learning_rate: f64,
}

impl Default for NumericAblation {
    fn default() -> Self {
        NumericAblation { seeds: (0..10).collect(), epochs: 250, batch_size: 100, hidden: 64, learning_rate: 1e-3 }
    }
}

/// Validation cross entropy (mean per label) after each epoch of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NumericCurve {
    pub encoding: NumberEncoding,
    pub seed: u64,
    pub val_ce: Vec<f64>,
}

/// Bit encodings get two hidden layers, the raw scalar three.
fn mlp_widths(encoding: NumberEncoding, hidden: usize) -> Vec<usize> {
    let layers = if encoding == NumberEncoding::Raw { 3 } else { 2 };
    let mut w = vec![encoding.width()];
    w.extend(std::iter::repeat_n(hidden, layers));
    w.push(crate::data::NUMBER_LABELS.len());
    w
}

fn number_tensors(samples: &[NumberSample], encoding: NumberEncoding) -> (Tensor<f64>, Tensor<f64>) {
    let width = encoding.width();
    let x: Vec<f64> = samples.iter().flat_map(|s| encoding.encode(s.value)).collect();
    let y: Vec<f64> = samples.iter().flat_map(|s| s.labels.iter().map(|&b| b as u8 as f64)).collect();
    let n = samples.len();
    (Tensor::new(vec![n, width], x).expect("sized"), Tensor::new(vec![n, 6], y).expect("sized"))
}

fn rows(t: &Tensor<f64>, idx: &[usize]) -> Tensor<f64> {
    let w = t.shape()[1];
    let data = idx.iter().flat_map(|&i| t.data()[i * w..(i + 1) * w].iter().copied()).collect();
    Tensor::new(vec![idx.len(), w], data).expect("sized")
}

/// Trains one MLP and returns its per-epoch validation cross entropy.
/// Encodings of equal width start from identical weights for a given seed.
pub fn train_number_mlp(cfg: &NumericAblation, encoding: NumberEncoding, seed: u64) -> Result<NumericCurve, TrainError> {
    let (train_set, val_set) = gen_number_properties(seed);
    let (x, y) = number_tensors(&train_set, encoding);
    let (vx, vy) = number_tensors(&val_set, encoding);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::<f64>::new();
    let widths = mlp_widths(encoding, cfg.hidden);
    let layers = widths
        .windows(2)
        .enumerate()
        .map(|(i, w)| Linear::new(&mut store, &format!("mlp.{i}"), w[0], w[1], true, &mut rng))
        .collect::<Result<Vec<_>, _>>()?;
    let forward = |tape: &mut Tape<f64>, store: &ParamStore<f64>, input: Tensor<f64>| -> Result<_, TrainError> {
        let mut h = tape.constant(input);
        for (i, layer) in layers.iter().enumerate() {
            h = layer.forward(tape, store, h)?;
            if i + 1 < layers.len() {
                h = tape.gelu(h)?;
            }
        }
        Ok(h)
    };
    let opt = TrainConfig { learning_rate: cfg.learning_rate, weight_decay: 0.0, ..TrainConfig::default() };
    let mut state = RunState::new(&store, cfg.learning_rate);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let labels = crate::data::NUMBER_LABELS.len() as f64;
    let mut val_ce = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let mut tape = Tape::new();
            let logits = forward(&mut tape, &store, rows(&x, chunk))?;
            let per_sample = tape.bce_with_logits(logits, &rows(&y, chunk))?;
            let loss = tape.mean_all(per_sample)?;
            store.zero_grad();
            tape.backward(loss, &mut store)?;
            optimizer_step(&mut state, &mut store, &opt)?;
        }
        let mut tape = Tape::new();
        let logits = forward(&mut tape, &store, vx.clone())?;
        let per_sample = tape.bce_with_logits(logits, &vy)?;
        let total: f64 = tape.value(per_sample).data().iter().sum();
        val_ce.push(total / (val_set.len() as f64 * labels));
    }
    Ok(NumericCurve { encoding, seed, val_ce })
}

pub fn run_numeric(cfg: &NumericAblation) -> Result<Vec<NumericCurve>, TrainError> {
    let mut out = Vec::new();
    for &seed in &cfg.seeds {
        for enc in [NumberEncoding::Smr, NumberEncoding::Ieee754, NumberEncoding::Raw] {
            let curve = train_number_mlp(cfg, enc, seed)?;
            log::info!("numeric {enc:?} seed {seed}: final val ce {:.4}", curve.val_ce.last().copied().unwrap_or(f64::NAN));
            out.push(curve);
        }
    }
    Ok(out)
}

/// Mean and standard error over seeds at one point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSe {
    pub mean: f64,
    pub se: f64,
    pub n: usize,
}

impl MeanSe {
    pub fn of(xs: &[f64]) -> Self {
        let n = xs.len();
        MeanSe { mean: metrics::mean(xs), se: metrics::std_dev(xs, 1) / (n as f64).sqrt(), n }
    }
}

/// Per-encoding validation cross entropy at `epoch` (1-based).
pub fn numeric_summary(curves: &[NumericCurve], encoding: NumberEncoding, epoch: usize) -> MeanSe {
    let xs: Vec<f64> = curves.iter().filter(|c| c.encoding == encoding).filter_map(|c| c.val_ce.get(epoch - 1).copied()).collect();
    MeanSe::of(&xs)
}

/// Writes `numeric_curves.csv` (epoch, encoding, seed, val_ce) and a summary table.
pub fn write_numeric(dir: &Path, curves: &[NumericCurve]) -> std::io::Result<String> {
    fs::create_dir_all(dir)?;
    let mut csv = String::from("epoch,encoding,seed,val_ce\n");
    for c in curves {
        for (e, v) in c.val_ce.iter().enumerate() {
            writeln!(csv, "{},{},{},{v}", e + 1, encoding_name(c.encoding), c.seed).expect("string write");
        }
    }
    fs::write(dir.join("numeric_curves.csv"), csv)?;
    let epochs = curves.iter().map(|c| c.val_ce.len()).min().unwrap_or(0);
    let mut report = format!("{:<10} {:>12} {:>10}\n", "encoding", "val_ce", "se");
    if epochs > 0 {
        for enc in [NumberEncoding::Smr, NumberEncoding::Ieee754, NumberEncoding::Raw] {
            let s = numeric_summary(curves, enc, epochs);
            writeln!(report, "{:<10} {:>12.5} {:>10.5}", encoding_name(enc), s.mean, s.se).expect("string write");
        }
    }
    fs::write(dir.join("numeric_summary.txt"), &report)?;
    Ok(report)
}

fn encoding_name(e: NumberEncoding) -> &'static str {
    match e {
        NumberEncoding::Smr => "smr",
        NumberEncoding::Ieee754 => "ieee754",
        NumberEncoding::Raw => "raw",
    }
}

/// One model/training configuration of a sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct Variant {
    pub label: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

pub fn gamma_variants(model: &ModelConfig, train: &TrainConfig) -> Vec<Variant> {
    GAMMA_SWEEP
        .iter()
        .map(|&gamma| Variant { label: format!("gamma={gamma}"), model: model.clone(), train: TrainConfig { gamma, ..train.clone() } })
        .collect()
}

pub fn block_variants(model: &ModelConfig, train: &TrainConfig) -> Vec<Variant> {
    BLOCK_SWEEP
        .iter()
        .map(|&n| Variant { label: format!("blocks={n}"), model: ModelConfig { n_blocks: n, ..model.clone() }, train: train.clone() })
        .collect()
}

pub fn loss_variants(model: &ModelConfig, train: &TrainConfig) -> Vec<Variant> {
    vec![
        Variant {
            label: "bce_smr".into(),
            model: ModelConfig { head: HeadMode::SmrLogits, ..model.clone() },
            train: TrainConfig { loss_mode: LossMode::BceSmr, ..train.clone() },
        },
        Variant {
            label: "mse_scalar".into(),
            model: ModelConfig { head: HeadMode::Scalar, ..model.clone() },
            train: TrainConfig { loss_mode: LossMode::MseScalar, ..train.clone() },
        },
    ]
}

/// Outcome of one variant, seed and dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantScore {
    pub variant: String,
    pub seed: u64,
    pub dataset: String,
    pub mean_target: f64,
    /// Mean per-sample training loss of the untrained model on the training split.
    pub initial_loss: f64,
    pub val_r2: Option<f64>,
    pub test_r2: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct VariantRun {
    pub scores: Vec<VariantScore>,
    pub log: Vec<StrideRecord>,
}

/// Trains `variant` once per seed on all datasets together and scores the
/// best checkpoint on each dataset's test split.
pub fn run_variant<T: Float>(
    variant: &Variant,
    datasets: &[Dataset],
    text: &TextEncoderSpec,
    seeds: &[u64],
    split_spec: &SplitSpec,
) -> Result<Vec<VariantRun>, TrainError> {
    let sizes: Vec<(&str, usize)> = datasets.iter().map(|d| (d.name.as_str(), d.len())).collect();
    let splits = split(&sizes, split_spec).map_err(|e| TrainError::Config(e.to_string()))?;
    let mut runs = Vec::new();
    for &seed in seeds {
        let mut model = BasisTransformer::<T>::new(&variant.model, text, seed)?;
        let rt = model.encoder.row_tokenizer();
        let mut tasks = Vec::new();
        let mut tests = Vec::new();
        for (d, s) in datasets.iter().zip(&splits) {
            let (task, test, test_y) = TaskData::from_split(&rt, d, s)?;
            tasks.push(task);
            tests.push((test, test_y));
        }
        let cfg = TrainConfig { seed, ..variant.train.clone() };
        let initial: Vec<f64> =
            tasks.iter().map(|t| train::evaluate(&model, &t.train, &t.train_y, &cfg).map(|r| r.1)).collect::<Result<_, _>>()?;
        let outcome = train::train_loop(&mut model, &tasks, &cfg, &TrainSinks::default())?;
        model.params.restore(&outcome.best).map_err(crate::model::ModelError::from)?;
        let mut scores = Vec::new();
        for (((d, task), (test, test_y)), init) in datasets.iter().zip(&tasks).zip(&tests).zip(initial) {
            let val_pred = train::predict(&model, &task.val, cfg.eval_batch_size)?;
            let test_pred = train::predict(&model, test, cfg.eval_batch_size)?;
            scores.push(VariantScore {
                variant: variant.label.clone(),
                seed,
                dataset: d.name.clone(),
                mean_target: d.mean_target(),
                initial_loss: init,
                val_r2: metrics::r2(&task.val_y, &val_pred).ok(),
                test_r2: metrics::r2(test_y, &test_pred).ok(),
            });
        }
        log::info!("{} seed {seed}: {:?}", variant.label, scores.iter().map(|s| s.test_r2).collect::<Vec<_>>());
        runs.push(VariantRun { scores, log: outcome.log });
    }
    Ok(runs)
}

/// Writes per-variant curves (`curves_<label>.jsonl`), `scores.csv` and a
/// summary of test NNSE per variant and dataset, sorted by log mean target.
pub fn write_variants(dir: &Path, results: &[(Variant, Vec<VariantRun>)]) -> std::io::Result<String> {
    fs::create_dir_all(dir)?;
    let mut scores_csv = String::from("variant,seed,dataset,log10_mean_target,initial_loss,val_r2,test_r2,test_nnse\n");
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut report = format!("{:<16} {:<16} {:>16} {:>10} {:>10}\n", "variant", "dataset", "log10_mean_y", "nnse", "se");
    for (variant, runs) in results {
        let mut curves = String::new();
        for (run, score) in runs.iter().zip(runs.iter().map(|r| r.scores.first().map(|s| s.seed))) {
            for rec in &run.log {
                let mut v = serde_json::to_value(rec).map_err(std::io::Error::other)?;
                v["seed"] = serde_json::json!(score);
                curves.push_str(&v.to_string());
                curves.push('\n');
            }
            for s in &run.scores {
                writeln!(
                    scores_csv,
                    "{},{},{},{},{},{},{},{}",
                    s.variant,
                    s.seed,
                    s.dataset,
                    s.mean_target.abs().log10(),
                    s.initial_loss,
                    opt(s.val_r2),
                    opt(s.test_r2),
                    opt(s.test_r2.map(metrics::nnse))
                )
                .expect("string write");
            }
        }
        let label: String = variant.label.chars().map(|c| if c.is_ascii_alphanumeric() || c == '.' { c } else { '_' }).collect();
        fs::write(dir.join(format!("curves_{label}.jsonl")), curves)?;
        let mut datasets: Vec<(String, f64)> = Vec::new();
        for s in runs.iter().flat_map(|r| &r.scores) {
            if !datasets.iter().any(|(n, _)| n == &s.dataset) {
                datasets.push((s.dataset.clone(), s.mean_target));
            }
        }
        datasets.sort_by(|a, b| a.1.abs().total_cmp(&b.1.abs()));
        for (name, mean_target) in datasets {
            let xs: Vec<f64> =
                runs.iter().flat_map(|r| &r.scores).filter(|s| s.dataset == name).filter_map(|s| s.test_r2.map(metrics::nnse)).collect();
            let ms = MeanSe::of(&xs);
            writeln!(report, "{:<16} {:<16} {:>16.3} {:>10.4} {:>10.4}", variant.label, name, mean_target.abs().log10(), ms.mean, ms.se)
                .expect("string write");
        }
    }
    fs::write(dir.join("scores.csv"), scores_csv)?;
    fs::write(dir.join("summary.txt"), &report)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn widths_follow_encoding() {
        assert_eq!(mlp_widths(NumberEncoding::Smr, 16), vec![32, 16, 16, 6]);
        assert_eq!(mlp_widths(NumberEncoding::Ieee754, 16), vec![32, 16, 16, 6]);
        assert_eq!(mlp_widths(NumberEncoding::Raw, 16), vec![1, 16, 16, 16, 6]);
    }

    #[test]
    fn sweeps_cover_their_grids() {
        let (m, t) = (ModelConfig::default(), TrainConfig::default());
        let g = gamma_variants(&m, &t);
        assert_eq!(g.iter().map(|v| v.train.gamma).collect::<Vec<_>>(), GAMMA_SWEEP);
        assert!(g.iter().any(|v| v.train.gamma == 0.5));
        assert_eq!(block_variants(&m, &t).iter().map(|v| v.model.n_blocks).collect::<Vec<_>>(), vec![1, 2, 3, 4, 5, 6]);
        let l = loss_variants(&m, &t);
        assert_eq!((l[1].model.head, l[1].train.loss_mode), (HeadMode::Scalar, LossMode::MseScalar));
        assert!("bogus".parse::<AblationKind>().is_err());
        assert_eq!("loss".parse::<AblationKind>(), Ok(AblationKind::Loss));
    }

    #[test]
    fn short_numeric_run_learns() {
        let cfg = NumericAblation { seeds: vec![0], epochs: 5, ..Default::default() };
        let c = train_number_mlp(&cfg, NumberEncoding::Smr, 0).unwrap();
        assert_eq!(c.val_ce.len(), 5);
        assert!(c.val_ce[4] < c.val_ce[0]);
        assert!(c.val_ce[0] < std::f64::consts::LN_2 * 1.5);
    }
}
