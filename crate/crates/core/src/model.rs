//! The basis transformer.
//!
//! Each block compresses the column-name and entry-value sequences onto a
//! fixed number of basis queries, mixes the two, squeezes every column to a
//! single latent vector, lets columns attend to each other, and expands the
//! result back into queries for the next block.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::nn::{ForwardCtx, LayerNorm, Linear, Mlp, MultiHeadAttention};
use crate::autodiff::{AutodiffError, Float, KeyMask, ParamId, ParamStore, Tape, Var};
use crate::encoder::{EmbeddingTable, EncodedRowBatch, EncoderError, RowEncoder, TextBackend, TextEncoderSpec, TokenizedBatch};
use crate::smr::{SmrConfig, SmrError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("batch has no columns")]
    NoColumns,
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Smr(#[from] SmrError),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum HeadMode {
    /// `1 + h + l` bit logits.
    #[default]
    SmrLogits,
    /// A single unbounded scalar.
    Scalar,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub dim: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    /// Number of basis queries per column.
    pub basis_len: usize,
    /// Latent compression ratio: each column is squeezed to `ratio * dim`.
    pub ratio: usize,
    pub ctx_layers: usize,
    pub dropout: f64,
    /// Hidden width of every MLP as a multiple of its input width.
    pub mlp_ratio: usize,
    pub smr: SmrConfig,
    pub head: HeadMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            dim: 144,
            n_blocks: 4,
            n_heads: 8,
            basis_len: 64,
            ratio: 6,
            ctx_layers: 9,
            dropout: 0.0,
            mlp_ratio: 4,
            smr: SmrConfig { high: 29, low: 14 },
            head: HeadMode::SmrLogits,
        }
    }
}

impl ModelConfig {
    /// A desk-scale configuration: D=32, 2 blocks, 4 heads, 8 basis queries, h=8, l=4.
    pub fn small() -> Self {
        ModelConfig {
            dim: 32,
            n_blocks: 2,
            n_heads: 4,
            basis_len: 8,
            ratio: 2,
            ctx_layers: 1,
            dropout: 0.0,
            mlp_ratio: 2,
            smr: SmrConfig { high: 8, low: 4 },
            head: HeadMode::SmrLogits,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(ModelError::Config(m));
        if self.dim == 0 {
            return fail("dim must be positive".into());
        }
        if self.n_heads == 0 || self.dim % self.n_heads != 0 {
            return fail(format!("dim {} is not divisible by n_heads {}", self.dim, self.n_heads));
        }
        if self.n_blocks == 0 {
            return fail("n_blocks must be at least 1".into());
        }
        if self.ratio == 0 {
            return fail("ratio must be at least 1".into());
        }
        if self.basis_len == 0 {
            return fail("basis_len must be at least 1".into());
        }
        if self.mlp_ratio == 0 {
            return fail("mlp_ratio must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        self.smr.validate()?;
        Ok(())
    }

    pub fn output_width(&self) -> usize {
        match self.head {
            HeadMode::SmrLogits => self.smr.width(),
            HeadMode::Scalar => 1,
        }
    }

    fn latent(&self) -> usize {
        self.ratio * self.dim
    }

    /// Exact number of scalars in a model built from this config, given
    /// the token table shape.
    pub fn param_count(&self, vocab: usize, text_dim: usize) -> usize {
        let d = self.dim;
        let m = self.mlp_ratio;
        let rd = self.latent();
        let flat = self.basis_len * d;
        let basis_comp = 3 * LayerNorm::num_params(d) + MultiHeadAttention::num_params(d) + Mlp::num_params(d, m * d);
        let mixture = 3 * LayerNorm::num_params(d) + 2 * MultiHeadAttention::num_params(d);
        let ctx_layer = 2 * LayerNorm::num_params(rd) + MultiHeadAttention::num_params(rd) + Mlp::num_params(rd, m * rd);
        let branch = LayerNorm::num_params(d) + Mlp::num_params(d, m * d);
        let mut total = RowEncoder::num_params(vocab, text_dim, d, self.smr) + 2 * flat;
        for b in 0..self.n_blocks {
            let branches = if b + 1 == self.n_blocks { 1 } else { 2 };
            total += 2 * basis_comp
                + mixture
                + Linear::num_params(flat, rd, true)
                + self.ctx_layers * ctx_layer
                + Linear::num_params(rd, flat, true)
                + branches * branch;
        }
        total + Linear::num_params(flat, d, true) + Linear::num_params(d, self.output_width(), true)
    }
}

/// Shape of the token table implied by a text spec.
pub fn text_table_shape(spec: &TextEncoderSpec) -> Result<(usize, usize)> {
    Ok(match &spec.backend {
        TextBackend::Hashed { vocab_buckets, embed_dim } => (*vocab_buckets, *embed_dim),
        TextBackend::TableFile { path } => {
            let t = EmbeddingTable::read(path)?;
            (t.vocab_size, t.dim)
        }
    })
}

/// Pre-norm residual cross attention: `x + Attn(LN(x), LN(kv))`.
#[derive(Debug, Clone)]
struct CrossLayer {
    name: String,
    ln_q: LayerNorm,
    ln_kv: LayerNorm,
    attn: MultiHeadAttention,
}

impl CrossLayer {
    fn new<T: Float>(store: &mut ParamStore<T>, name: &str, dim: usize, heads: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(CrossLayer {
            name: name.to_string(),
            ln_q: LayerNorm::new(store, &format!("{name}.ln_q"), dim)?,
            ln_kv: LayerNorm::new(store, &format!("{name}.ln_kv"), dim)?,
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, heads, rng)?,
        })
    }

    fn forward<T: Float>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        kv: Var,
        mask: Option<&KeyMask>,
        ctx: &ForwardCtx,
    ) -> Result<Var> {
        let q = self.ln_q.forward(tape, store, x)?;
        let kv = self.ln_kv.forward(tape, store, kv)?;
        let y = self.attn.forward(tape, store, q, kv, mask, ctx)?;
        let y = ctx.apply_dropout(tape, y, &format!("{}.out", self.name))?;
        Ok(tape.add(x, y)?)
    }
}

/// Pre-norm residual self attention: `x + Attn(LN(x), LN(x))`.
#[derive(Debug, Clone)]
struct SelfLayer {
    name: String,
    ln: LayerNorm,
    attn: MultiHeadAttention,
}

impl SelfLayer {
    fn new<T: Float>(store: &mut ParamStore<T>, name: &str, dim: usize, heads: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(SelfLayer {
            name: name.to_string(),
            ln: LayerNorm::new(store, &format!("{name}.ln"), dim)?,
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, heads, rng)?,
        })
    }

    fn forward<T: Float>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var, ctx: &ForwardCtx) -> Result<Var> {
        let h = self.ln.forward(tape, store, x)?;
        let y = self.attn.forward(tape, store, h, h, None, ctx)?;
        let y = ctx.apply_dropout(tape, y, &format!("{}.out", self.name))?;
        Ok(tape.add(x, y)?)
    }
}

/// Pre-norm residual MLP: `x + MLP(LN(x))`.
#[derive(Debug, Clone)]
struct FeedForward {
    name: String,
    ln: LayerNorm,
    mlp: Mlp,
}

impl FeedForward {
    fn new<T: Float>(store: &mut ParamStore<T>, name: &str, dim: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(FeedForward {
            name: name.to_string(),
            ln: LayerNorm::new(store, &format!("{name}.ln"), dim)?,
            mlp: Mlp::new(store, &format!("{name}.mlp"), dim, hidden, rng)?,
        })
    }

    fn forward<T: Float>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var, ctx: &ForwardCtx) -> Result<Var> {
        let h = self.ln.forward(tape, store, x)?;
        let y = self.mlp.forward(tape, store, h, ctx)?;
        let y = ctx.apply_dropout(tape, y, &format!("{}.out", self.name))?;
        Ok(tape.add(x, y)?)
    }
}

/// Cross attention from basis queries onto one token sequence, then an MLP.
#[derive(Debug, Clone)]
pub struct BasisComp {
    cross: CrossLayer,
    ff: FeedForward,
}

impl BasisComp {
    pub fn new<T: Float>(store: &mut ParamStore<T>, name: &str, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(BasisComp {
            cross: CrossLayer::new(store, &format!("{name}.cross"), cfg.dim, cfg.n_heads, rng)?,
            ff: FeedForward::new(store, &format!("{name}.ff"), cfg.dim, cfg.mlp_ratio * cfg.dim, rng)?,
        })
    }

    /// `q: [..., L_b, D]`, `x: [..., L_x, D]` -> `[..., L_b, D]`.
    pub fn forward<T: Float>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        q: Var,
        x: Var,
        mask: Option<&KeyMask>,
        ctx: &ForwardCtx,
    ) -> Result<Var> {
        let z = self.cross.forward(tape, store, q, x, mask, ctx)?;
        self.ff.forward(tape, store, z, ctx)
    }
}

/// Column-name summaries attend to value summaries, followed by self attention.
#[derive(Debug, Clone)]
pub struct LatentMixture {
    cross: CrossLayer,
    mix: SelfLayer,
}

impl LatentMixture {
    pub fn new<T: Float>(store: &mut ParamStore<T>, name: &str, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(LatentMixture {
            cross: CrossLayer::new(store, &format!("{name}.cross"), cfg.dim, cfg.n_heads, rng)?,
            mix: SelfLayer::new(store, &format!("{name}.self"), cfg.dim, cfg.n_heads, rng)?,
        })
    }

    pub fn forward<T: Float>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, z_col: Var, z_val: Var, ctx: &ForwardCtx) -> Result<Var> {
        if tape.shape(z_col) != tape.shape(z_val) {
            return Err(AutodiffError::ShapeMismatch {
                op: "latent_mixture",
                lhs: tape.shape(z_col).to_vec(),
                rhs: tape.shape(z_val).to_vec(),
            }
            .into());
        }
        let z = self.cross.forward(tape, store, z_col, z_val, None, ctx)?;
        self.mix.forward(tape, store, z, ctx)
    }
}

/// Flattens the basis axis and projects each column to `r * D`.
#[derive(Debug, Clone)]
pub struct LatentComp {
    pub proj: Linear,
}

impl LatentComp {
    pub fn new<T: Float>(store: &mut ParamStore<T>, name: &str, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(LatentComp { proj: Linear::new(store, &format!("{name}.proj"), cfg.basis_len * cfg.dim, cfg.latent(), true, rng)? })
    }

    /// `[..., L_b, D]` -> `[..., r D]`.
    pub fn forward<T: Float>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, z: Var) -> Result<Var> {
        let shape = tape.shape(z).to_vec();
        let r = shape.len();
        if r < 2 {
            return Err(AutodiffError::InvalidArgument { op: "latent_comp", msg: format!("rank {r} input") }.into());
        }
        let mut flat = shape[..r - 2].to_vec();
        flat.push(shape[r - 2] * shape[r - 1]);
        let z = tape.reshape(z, &flat)?;
        Ok(self.proj.forward(tape, store, z)?)
    }
}

/// Self attention across columns.
#[derive(Debug, Clone)]
pub struct LatentContext {
    layers: Vec<(SelfLayer, FeedForward)>,
}

impl LatentContext {
    pub fn new<T: Float>(store: &mut ParamStore<T>, name: &str, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let rd = cfg.latent();
        let layers = (0..cfg.ctx_layers)
            .map(|i| {
                Ok((
                    SelfLayer::new(store, &format!("{name}.{i}.attn"), rd, cfg.n_heads, rng)?,
                    FeedForward::new(store, &format!("{name}.{i}.ff"), rd, cfg.mlp_ratio * rd, rng)?,
                ))
            })
            .collect::<Result<_>>()?;
        Ok(LatentContext { layers })
    }

    /// `[..., C, r D]`, shape preserved.
    pub fn forward<T: Float>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, mut z: Var, ctx: &ForwardCtx) -> Result<Var> {
        for (attn, ff) in &self.layers {
            z = attn.forward(tape, store, z, ctx)?;
            z = ff.forward(tape, store, z, ctx)?;
        }
        Ok(z)
    }
}

/// Expands each column's latent vector back into one or two query sequences.
#[derive(Debug, Clone)]
pub struct LatentDecomp {
    pub up: Linear,
    branches: Vec<FeedForward>,
    basis_len: usize,
    dim: usize,
}

impl LatentDecomp {
    pub fn new<T: Float>(store: &mut ParamStore<T>, name: &str, cfg: &ModelConfig, last: bool, rng: &mut ChaCha8Rng) -> Result<Self> {
        let up = Linear::new(store, &format!("{name}.up"), cfg.latent(), cfg.basis_len * cfg.dim, true, rng)?;
        let n = if last { 1 } else { 2 };
        let branches = (0..n)
            .map(|i| FeedForward::new(store, &format!("{name}.branch{i}"), cfg.dim, cfg.mlp_ratio * cfg.dim, rng))
            .collect::<Result<_>>()?;
        Ok(LatentDecomp { up, branches, basis_len: cfg.basis_len, dim: cfg.dim })
    }

    pub fn is_final(&self) -> bool {
        self.branches.len() == 1
    }

    /// `[..., r D]` -> one or two `[..., L_b, D]` tensors.
    pub fn forward<T: Float>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, z: Var, ctx: &ForwardCtx) -> Result<Vec<Var>> {
        let u = self.up.forward(tape, store, z)?;
        let mut shape = tape.shape(u).to_vec();
        shape.pop();
        shape.extend([self.basis_len, self.dim]);
        let u = tape.reshape(u, &shape)?;
        self.branches.iter().map(|b| b.forward(tape, store, u, ctx)).collect()
    }
}

#[derive(Debug, Clone)]
pub struct BtBlock {
    pub comp_col: BasisComp,
    pub comp_val: BasisComp,
    pub mixture: LatentMixture,
    pub comp: LatentComp,
    pub context: LatentContext,
    pub decomp: LatentDecomp,
}

impl BtBlock {
    fn new<T: Float>(store: &mut ParamStore<T>, name: &str, cfg: &ModelConfig, last: bool, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(BtBlock {
            comp_col: BasisComp::new(store, &format!("{name}.comp_col"), cfg, rng)?,
            comp_val: BasisComp::new(store, &format!("{name}.comp_val"), cfg, rng)?,
            mixture: LatentMixture::new(store, &format!("{name}.mixture"), cfg, rng)?,
            comp: LatentComp::new(store, &format!("{name}.lcomp"), cfg, rng)?,
            context: LatentContext::new(store, &format!("{name}.context"), cfg, rng)?,
            decomp: LatentDecomp::new(store, &format!("{name}.decomp"), cfg, last, rng)?,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn forward<T: Float>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        q_col: Var,
        q_val: Var,
        batch: &EncodedRowBatch,
        ctx: &ForwardCtx,
    ) -> Result<Vec<Var>> {
        let z_col = self.comp_col.forward(tape, store, q_col, batch.names, Some(&batch.name_mask), ctx)?;
        let z_val = self.comp_val.forward(tape, store, q_val, batch.values, Some(&batch.value_mask), ctx)?;
        let z = self.mixture.forward(tape, store, z_col, z_val, ctx)?;
        let z = self.comp.forward(tape, store, z)?;
        let z = self.context.forward(tape, store, z, ctx)?;
        self.decomp.forward(tape, store, z, ctx)
    }
}

/// The full model, owning its parameters.
#[derive(Debug, Clone)]
pub struct BasisTransformer<T: Float> {
    pub config: ModelConfig,
    pub text: TextEncoderSpec,
    pub params: ParamStore<T>,
    pub encoder: RowEncoder,
    pub query_col: ParamId,
    pub query_val: ParamId,
    pub blocks: Vec<BtBlock>,
    pub downscale: Linear,
    pub head: Linear,
}

impl<T: Float> BasisTransformer<T> {
    pub fn new(config: &ModelConfig, text: &TextEncoderSpec, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let d = config.dim;
        let encoder = RowEncoder::new(&mut params, text, d, config.smr, &mut rng)?;
        let std = 1.0 / (d as f64).sqrt();
        let query_col = params.insert_normal("queries.col", &[config.basis_len, d], std, &mut rng)?;
        let query_val = params.insert_normal("queries.val", &[config.basis_len, d], std, &mut rng)?;
        let blocks = (0..config.n_blocks)
            .map(|i| BtBlock::new(&mut params, &format!("block{i}"), config, i + 1 == config.n_blocks, &mut rng))
            .collect::<Result<_>>()?;
        let downscale = Linear::new(&mut params, "downscale", config.basis_len * d, d, true, &mut rng)?;
        // Zero-initialized so every bit starts at probability one half.
        let head = Linear::with_std(&mut params, "head", d, config.output_width(), true, 0.0, &mut rng)?;
        Ok(BasisTransformer { config: config.clone(), text: text.clone(), params, encoder, query_col, query_val, blocks, downscale, head })
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    /// Embeds a tokenized batch and runs the model; returns `[B, width]` logits.
    pub fn forward(&self, tape: &mut Tape<T>, batch: &TokenizedBatch, ctx: &ForwardCtx) -> Result<Var> {
        let enc = self.encoder.embed(tape, &self.params, batch)?;
        self.forward_encoded(tape, &enc, ctx)
    }

    pub fn forward_encoded(&self, tape: &mut Tape<T>, batch: &EncodedRowBatch, ctx: &ForwardCtx) -> Result<Var> {
        let c = batch.columns.len();
        if c == 0 {
            return Err(ModelError::NoColumns);
        }
        let store = &self.params;
        let lead = [batch.batch, c];
        let q = tape.param(store, self.query_col);
        let mut q_col = tape.broadcast(q, &lead)?;
        let q = tape.param(store, self.query_val);
        let mut q_val = tape.broadcast(q, &lead)?;
        let mut out = None;
        for block in &self.blocks {
            let qs = block.forward(tape, store, q_col, q_val, batch, ctx)?;
            if block.decomp.is_final() {
                out = Some(qs[0]);
            } else {
                q_col = qs[0];
                q_val = qs[1];
            }
        }
        let z = out.expect("last block is final");
        let z = tape.mean(z, 1)?;
        let z = tape.reshape(z, &[batch.batch, self.config.basis_len * self.config.dim])?;
        let z = self.downscale.forward(tape, store, z)?;
        Ok(self.head.forward(tape, store, z)?)
    }

    /// Converts output rows to scalar predictions.
    pub fn decode(&self, outputs: &[T]) -> Result<Vec<f64>> {
        let w = self.config.output_width();
        outputs
            .chunks(w)
            .map(|row| match self.config.head {
                HeadMode::SmrLogits => {
                    let z: Vec<f64> = row.iter().map(|v| v.to_f64_lossy()).collect();
                    Ok(self.config.smr.decode_logits(&z)?)
                }
                HeadMode::Scalar => Ok(row[0].to_f64_lossy()),
            })
            .collect()
    }
}
