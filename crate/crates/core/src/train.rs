//! Losses, adaptive loss reweighing, AdamW, and the multi-task stride loop.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::nn::ForwardCtx;
use crate::autodiff::{AutodiffError, Float, ParamStore, Tape, Tensor, Var};
use crate::checkpoint::{self, CheckpointError};
use crate::data::{Dataset, Split};
use crate::encoder::{EncoderError, RowTokenizer, TokenizedBatch, TokenizedRow};
use crate::metrics;
use crate::model::{BasisTransformer, HeadMode, ModelError};
use crate::smr::{SmrConfig, SmrError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid train config: {0}")]
    Config(String),
    #[error("dataset {0:?} has an empty training split")]
    EmptySplit(String),
    #[error("no datasets to train on")]
    NoDatasets,
    #[error("non-finite {what} at step {step}")]
    NonFinite { what: &'static str, step: u64 },
    #[error("loss mode {loss:?} does not fit head {head:?}")]
    HeadMismatch { loss: LossMode, head: HeadMode },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Smr(#[from] SmrError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("metric log: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    #[default]
    BceSmr,
    MseScalar,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_opt: f64,
    pub max_grad_norm: f64,
    /// Learning-rate multiplier applied after every stride.
    pub lr_decay_mult: f64,
    pub gamma: f64,
    pub eps_g: f64,
    /// When false every sample gets the constant weight one half.
    pub reweigh: bool,
    pub batch_size: usize,
    pub n_strides: usize,
    pub stride_size: usize,
    pub seed: u64,
    pub loss_mode: LossMode,
    /// Also score the training split after every stride.
    pub eval_train: bool,
    pub eval_batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            weight_decay: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps_opt: 1e-8,
            max_grad_norm: 1.0,
            lr_decay_mult: 0.985,
            gamma: 0.2,
            eps_g: 1e-8,
            reweigh: true,
            batch_size: 64,
            n_strides: 200,
            stride_size: 200,
            seed: 0,
            loss_mode: LossMode::BceSmr,
            eval_train: false,
            eval_batch_size: 256,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(TrainError::Config(m));
        if !(0.0..=0.5).contains(&self.gamma) {
            return fail(format!("gamma {} outside [0, 0.5]", self.gamma));
        }
        if self.eps_g.is_nan() || self.eps_g <= 0.0 {
            return fail(format!("eps_g {} must be positive", self.eps_g));
        }
        if self.stride_size == 0 {
            return fail("stride_size must be at least 1".into());
        }
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return fail("batch_size and eval_batch_size must be at least 1".into());
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return fail(format!("learning_rate {} must be positive", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return fail("beta1 and beta2 must lie in [0, 1)".into());
        }
        if !(self.eps_opt > 0.0) {
            return fail("eps_opt must be positive".into());
        }
        if !(self.max_grad_norm > 0.0) {
            return fail("max_grad_norm must be positive".into());
        }
        if !(self.weight_decay >= 0.0) {
            return fail("weight_decay must be non-negative".into());
        }
        if !(self.lr_decay_mult > 0.0 && self.lr_decay_mult <= 1.0) {
            return fail(format!("lr_decay_mult {} outside (0, 1]", self.lr_decay_mult));
        }
        Ok(())
    }

    pub fn total_steps(&self) -> u64 {
        (self.n_strides * self.stride_size) as u64
    }
}

/// Encodes targets as `B x (1+h+l)` bit tensors.
pub fn smr_targets<T: Float>(smr: &SmrConfig, y: &[f64]) -> Result<Tensor<T>> {
    let mut data = Vec::with_capacity(y.len() * smr.width());
    for &v in y {
        let (bits, _) = smr.encode_saturating(v)?;
        data.extend(bits.to_floats::<T>());
    }
    Ok(Tensor::new(vec![y.len(), smr.width()], data)?)
}

/// Per-sample sum of bitwise BCE between `logits` (`[B, 1+h+l]`) and the SMR of `y`.
pub fn bce_smr_loss<T: Float>(tape: &mut Tape<T>, logits: Var, y: &[f64], smr: &SmrConfig) -> Result<Var> {
    let targets = smr_targets(smr, y)?;
    Ok(tape.bce_with_logits(logits, &targets)?)
}

/// Per-sample squared error of a `[B, 1]` prediction.
pub fn mse_scalar_loss<T: Float>(tape: &mut Tape<T>, pred: Var, y: &[f64]) -> Result<Var> {
    if let Some(v) = y.iter().find(|v| !v.is_finite()) {
        return Err(SmrError::NonFinite(*v).into());
    }
    let b = y.len();
    let pred = tape.reshape(pred, &[b])?;
    let t = tape.constant(Tensor::new(vec![b], y.iter().map(|&v| T::from_f64_lossy(v)).collect())?);
    let d = tape.sub(pred, t)?;
    Ok(tape.mul(d, d)?)
}

/// Bounded similarity of magnitudes, ignoring sign: 1 when equal.
pub fn magnitude_agreement(y: f64, y_hat: f64, eps_g: f64) -> f64 {
    let (a, b) = (y.abs(), y_hat.abs());
    (a.min(b) + eps_g) / (a.max(b) + eps_g)
}

/// Sample weight in `[gamma, 1 - gamma]`, decreasing in `g`.
pub fn reweigh_weight(g: f64, gamma: f64) -> f64 {
    (1.0 - g) * (1.0 - 2.0 * gamma) + gamma
}

/// Mean of `weights * per_sample`; the weights carry no gradient.
pub fn reweigh<T: Float>(tape: &mut Tape<T>, per_sample: Var, weights: &[f64]) -> Result<Var> {
    let w = tape.constant(Tensor::new(vec![weights.len()], weights.iter().map(|&v| T::from_f64_lossy(v)).collect())?);
    let l = tape.mul(per_sample, w)?;
    Ok(tape.mean_all(l)?)
}

/// Adam moments and step count for one parameter store.
#[derive(Debug, Clone)]
pub struct RunState<T> {
    pub step: u64,
    pub lr: f64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Float> RunState<T> {
    pub fn new(store: &ParamStore<T>, lr: f64) -> Self {
        let zeros = || store.iter().map(|(_, p)| vec![T::zero(); p.value.len()]).collect();
        RunState { step: 0, lr, m: zeros(), v: zeros() }
    }
}

/// Global-norm clipping followed by a decoupled-weight-decay Adam update.
/// Returns the gradient norm before clipping.
pub fn optimizer_step<T: Float>(state: &mut RunState<T>, store: &mut ParamStore<T>, cfg: &TrainConfig) -> Result<f64> {
    let norm = store.grad_norm();
    if !norm.is_finite() {
        return Err(TrainError::NonFinite { what: "gradient", step: state.step });
    }
    let clip = if norm > cfg.max_grad_norm { cfg.max_grad_norm / norm } else { 1.0 };
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let lr = T::from_f64_lossy(state.lr);
    let decay = T::from_f64_lossy(1.0 - state.lr * cfg.weight_decay);
    let (b1, b2) = (T::from_f64_lossy(cfg.beta1), T::from_f64_lossy(cfg.beta2));
    let (one_b1, one_b2) = (T::from_f64_lossy(1.0 - cfg.beta1), T::from_f64_lossy(1.0 - cfg.beta2));
    let (bc1, bc2) = (T::from_f64_lossy(bc1), T::from_f64_lossy(bc2));
    let eps = T::from_f64_lossy(cfg.eps_opt);
    let clip = T::from_f64_lossy(clip);
    for (i, p) in store.iter_mut().enumerate() {
        if !p.trainable {
            continue;
        }
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        let grad = p.grad.data();
        let value = p.value.data_mut();
        for j in 0..value.len() {
            let g = grad[j] * clip;
            m[j] = b1 * m[j] + one_b1 * g;
            v[j] = b2 * v[j] + one_b2 * g * g;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            value[j] = value[j] * decay - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(norm)
}

/// One dataset's tokenized splits.
#[derive(Debug, Clone)]
pub struct TaskData {
    pub name: String,
    pub train: Vec<TokenizedRow>,
    pub train_y: Vec<f64>,
    pub val: Vec<TokenizedRow>,
    pub val_y: Vec<f64>,
}

impl TaskData {
    /// Tokenizes one dataset's train and val rows; test rows are returned separately.
    pub fn from_split(rt: &RowTokenizer, d: &Dataset, split: &Split) -> Result<(Self, Vec<TokenizedRow>, Vec<f64>)> {
        let take = |idx: &[usize]| -> Result<(Vec<TokenizedRow>, Vec<f64>)> {
            let rows = idx.iter().map(|&i| rt.tokenize_row(&d.rows[i])).collect::<Result<Vec<_>, _>>()?;
            Ok((rows, idx.iter().map(|&i| d.y[i]).collect()))
        };
        let (train, train_y) = take(&split.train)?;
        let (val, val_y) = take(&split.val)?;
        let (test, test_y) = take(&split.test)?;
        Ok((TaskData { name: d.name.clone(), train, train_y, val, val_y }, test, test_y))
    }

    /// Every row trains; nothing is held out.
    pub fn train_only(rt: &RowTokenizer, d: &Dataset) -> Result<Self> {
        let train = d.rows.iter().map(|r| rt.tokenize_row(r)).collect::<Result<Vec<_>, _>>()?;
        Ok(TaskData { name: d.name.clone(), train, train_y: d.y.clone(), val: Vec::new(), val_y: Vec::new() })
    }
}

/// One line of the metric log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrideRecord {
    pub stride: usize,
    pub dataset: String,
    pub split: String,
    /// `None` when the split's targets are constant.
    pub r2: Option<f64>,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub best: Vec<Tensor<T>>,
    /// 1-based stride of the best snapshot; 0 if no stride improved on the start.
    pub best_stride: usize,
    pub best_score: f64,
    pub log: Vec<StrideRecord>,
    pub steps: u64,
}

/// Output destinations of a training run.
#[derive(Debug, Clone, Default)]
pub struct TrainSinks {
    pub metric_log: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

/// Builds the batch loss. Returns the scalar loss var and per-sample losses.
pub fn batch_loss<T: Float>(
    model: &BasisTransformer<T>,
    tape: &mut Tape<T>,
    batch: &TokenizedBatch,
    y: &[f64],
    cfg: &TrainConfig,
    ctx: &ForwardCtx,
) -> Result<(Var, Var)> {
    let out = model.forward(tape, batch, ctx)?;
    let per_sample = match (cfg.loss_mode, model.config.head) {
        (LossMode::BceSmr, HeadMode::SmrLogits) => bce_smr_loss(tape, out, y, &model.config.smr)?,
        (LossMode::MseScalar, HeadMode::Scalar) => mse_scalar_loss(tape, out, y)?,
        (loss, head) => return Err(TrainError::HeadMismatch { loss, head }),
    };
    let weights: Vec<f64> = if cfg.reweigh {
        let pred = model.decode(tape.value(out).data())?;
        y.iter().zip(&pred).map(|(&t, &p)| reweigh_weight(magnitude_agreement(t, p, cfg.eps_g), cfg.gamma)).collect()
    } else {
        vec![0.5; y.len()]
    };
    let loss = reweigh(tape, per_sample, &weights)?;
    Ok((loss, per_sample))
}

/// Decoded predictions and mean unweighted per-sample loss.
pub fn evaluate<T: Float>(
    model: &BasisTransformer<T>,
    rows: &[TokenizedRow],
    y: &[f64],
    cfg: &TrainConfig,
) -> Result<(Vec<f64>, f64)> {
    let mut preds = Vec::with_capacity(rows.len());
    let mut total = 0.0;
    for (chunk, ys) in rows.chunks(cfg.eval_batch_size).zip(y.chunks(cfg.eval_batch_size)) {
        let refs: Vec<&TokenizedRow> = chunk.iter().collect();
        let batch = TokenizedBatch::new(&refs)?;
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, &batch, &ForwardCtx::eval())?;
        let per_sample = match model.config.head {
            HeadMode::SmrLogits => bce_smr_loss(&mut tape, out, ys, &model.config.smr)?,
            HeadMode::Scalar => mse_scalar_loss(&mut tape, out, ys)?,
        };
        total += tape.value(per_sample).data().iter().map(|v| v.to_f64_lossy()).sum::<f64>();
        preds.extend(model.decode(tape.value(out).data())?);
    }
    Ok((preds, total / rows.len().max(1) as f64))
}

/// Predictions only, in row order.
pub fn predict<T: Float>(model: &BasisTransformer<T>, rows: &[TokenizedRow], batch_size: usize) -> Result<Vec<f64>> {
    let mut preds = Vec::with_capacity(rows.len());
    for chunk in rows.chunks(batch_size.max(1)) {
        let refs: Vec<&TokenizedRow> = chunk.iter().collect();
        let batch = TokenizedBatch::new(&refs)?;
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, &batch, &ForwardCtx::eval())?;
        preds.extend(model.decode(tape.value(out).data())?);
    }
    Ok(preds)
}

fn score_split<T: Float>(
    model: &BasisTransformer<T>,
    stride: usize,
    name: &str,
    split: &str,
    rows: &[TokenizedRow],
    y: &[f64],
    cfg: &TrainConfig,
) -> Result<StrideRecord> {
    let (pred, loss) = evaluate(model, rows, y, cfg)?;
    Ok(StrideRecord { stride, dataset: name.to_string(), split: split.to_string(), r2: metrics::r2(y, &pred).ok(), loss })
}

/// Cycles through a shuffled permutation of one dataset's training rows.
struct Sampler {
    order: Vec<usize>,
    cursor: usize,
}

impl Sampler {
    fn next_batch(&mut self, size: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let size = size.min(self.order.len());
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.cursor == self.order.len() {
                self.order.shuffle(rng);
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }
}

/// Stride-at-a-time driver behind [`train_loop`]. Each step samples one
/// dataset uniformly and a batch from it; after each stride every dataset is
/// validated and the parameters with the best mean validation R² are kept.
pub struct Trainer<'a, T> {
    tasks: &'a [TaskData],
    cfg: &'a TrainConfig,
    sinks: &'a TrainSinks,
    rng: ChaCha8Rng,
    samplers: Vec<Sampler>,
    state: RunState<T>,
    log_file: Option<BufWriter<File>>,
    stride: usize,
    outcome: TrainOutcome<T>,
}

impl<'a, T: Float> Trainer<'a, T> {
    pub fn new(model: &BasisTransformer<T>, tasks: &'a [TaskData], cfg: &'a TrainConfig, sinks: &'a TrainSinks) -> Result<Self> {
        cfg.validate()?;
        if tasks.is_empty() {
            return Err(TrainError::NoDatasets);
        }
        for t in tasks {
            if t.train.is_empty() {
                return Err(TrainError::EmptySplit(t.name.clone()));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let samplers = tasks
            .iter()
            .map(|t| {
                let mut order: Vec<usize> = (0..t.train.len()).collect();
                order.shuffle(&mut rng);
                Sampler { order, cursor: 0 }
            })
            .collect();
        let log_file = match &sinks.metric_log {
            Some(p) => Some(BufWriter::new(File::create(p)?)),
            None => None,
        };
        Ok(Trainer {
            tasks,
            cfg,
            sinks,
            rng,
            samplers,
            state: RunState::new(&model.params, cfg.learning_rate),
            log_file,
            stride: 0,
            outcome: TrainOutcome {
                best: model.params.values(),
                best_stride: 0,
                best_score: f64::NEG_INFINITY,
                log: Vec::new(),
                steps: 0,
            },
        })
    }

    pub fn strides_done(&self) -> usize {
        self.stride
    }

    pub fn steps(&self) -> u64 {
        self.state.step
    }

    fn step(&mut self, model: &mut BasisTransformer<T>, stride_loss: &mut [(f64, usize)]) -> Result<()> {
        let ti = self.rng.random_range(0..self.tasks.len());
        let task = &self.tasks[ti];
        let idx = self.samplers[ti].next_batch(self.cfg.batch_size, &mut self.rng);
        let rows: Vec<&TokenizedRow> = idx.iter().map(|&i| &task.train[i]).collect();
        let y: Vec<f64> = idx.iter().map(|&i| task.train_y[i]).collect();
        let batch = TokenizedBatch::new(&rows)?;
        let ctx = ForwardCtx::train(model.config.dropout, self.cfg.seed, self.state.step);
        let mut tape = Tape::new();
        let (loss, _) = batch_loss(model, &mut tape, &batch, &y, self.cfg, &ctx)?;
        let value = tape.value(loss).item().to_f64_lossy();
        if !value.is_finite() {
            return Err(TrainError::NonFinite { what: "loss", step: self.state.step });
        }
        stride_loss[ti].0 += value;
        stride_loss[ti].1 += 1;
        model.params.zero_grad();
        tape.backward(loss, &mut model.params)?;
        optimizer_step(&mut self.state, &mut model.params, self.cfg)?;
        Ok(())
    }

    /// Runs one stride plus its validation pass and returns the stride's records.
    pub fn run_stride(&mut self, model: &mut BasisTransformer<T>) -> Result<Vec<StrideRecord>> {
        let cfg = self.cfg;
        self.stride += 1;
        let stride = self.stride;
        let mut stride_loss = vec![(0.0, 0usize); self.tasks.len()];
        for _ in 0..cfg.stride_size {
            self.step(model, &mut stride_loss)?;
        }
        self.state.lr *= cfg.lr_decay_mult;

        let mut records = Vec::new();
        let mut val_scores = Vec::new();
        for (ti, task) in self.tasks.iter().enumerate() {
            if cfg.eval_train {
                records.push(score_split(model, stride, &task.name, "train", &task.train, &task.train_y, cfg)?);
            } else if stride_loss[ti].1 > 0 {
                let (sum, n) = stride_loss[ti];
                records.push(StrideRecord { stride, dataset: task.name.clone(), split: "train_batch".into(), r2: None, loss: sum / n as f64 });
            }
            if !task.val.is_empty() {
                let rec = score_split(model, stride, &task.name, "val", &task.val, &task.val_y, cfg)?;
                val_scores.push(rec.r2.unwrap_or(f64::NEG_INFINITY));
                records.push(rec);
            }
        }
        if let Some(f) = self.log_file.as_mut() {
            for r in &records {
                serde_json::to_writer(&mut *f, r).map_err(std::io::Error::other)?;
                f.write_all(b"\n")?;
            }
            f.flush()?;
        }
        self.outcome.log.extend(records.iter().cloned());

        let score = if val_scores.is_empty() { f64::NEG_INFINITY } else { metrics::mean(&val_scores) };
        let out = &mut self.outcome;
        if out.best_stride == 0 || score > out.best_score {
            out.best_score = score;
            out.best_stride = stride;
            out.best = model.params.values();
            if let Some(path) = &self.sinks.checkpoint {
                let meta = serde_json::json!({ "stride": stride, "step": self.state.step, "val_mean_r2": score, "seed": cfg.seed });
                checkpoint::save(model, meta, path)?;
            }
        }
        log::info!("stride {stride}/{} step {} lr {:.3e} mean val r2 {score:.4}", cfg.n_strides, self.state.step, self.state.lr);
        Ok(records)
    }

    pub fn finish(mut self) -> TrainOutcome<T> {
        self.outcome.steps = self.state.step;
        self.outcome
    }
}

/// Trains for `n_strides * stride_size` steps; see [`Trainer`].
pub fn train_loop<T: Float>(
    model: &mut BasisTransformer<T>,
    tasks: &[TaskData],
    cfg: &TrainConfig,
    sinks: &TrainSinks,
) -> Result<TrainOutcome<T>> {
    let mut trainer = Trainer::new(model, tasks, cfg, sinks)?;
    for _ in 0..cfg.n_strides {
        trainer.run_stride(model)?;
    }
    Ok(trainer.finish())
}
