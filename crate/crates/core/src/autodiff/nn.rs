//! Parameterized layers built from tape primitives.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{AutodiffError, Float, KeyMask, ParamId, ParamStore, Result, Tape, Tensor, Var};

/// Train/eval switch plus the key for deterministic dropout masks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForwardCtx {
    pub train: bool,
    pub dropout: f64,
    pub seed: u64,
    pub step: u64,
}

impl ForwardCtx {
    pub fn eval() -> Self {
        ForwardCtx { train: false, dropout: 0.0, seed: 0, step: 0 }
    }

    pub fn train(dropout: f64, seed: u64, step: u64) -> Self {
        ForwardCtx { train: true, dropout, seed, step }
    }

    /// Keep pattern for one dropout site, a pure function of `(seed, step, path)`.
    pub fn keep_mask(&self, path: &str, len: usize) -> Option<Vec<bool>> {
        if !self.train || self.dropout <= 0.0 {
            return None;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(site_key(self.seed, self.step, path));
        Some((0..len).map(|_| rng.random::<f64>() >= self.dropout).collect())
    }

    pub fn apply_dropout<T: Float>(&self, tape: &mut Tape<T>, x: Var, path: &str) -> Result<Var> {
        let len = tape.value(x).len();
        match self.keep_mask(path, len) {
            Some(keep) => tape.dropout(x, self.dropout, Some(&keep)),
            None => Ok(x),
        }
    }
}

fn site_key(seed: u64, step: u64, path: &str) -> u64 {
    // FNV-1a over the path, then mixed with seed and step.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in path.bytes().chain(seed.to_le_bytes()).chain(step.to_le_bytes()) {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// `y = x W + b` with `W: [in, out]`, initialized `N(0, 1/in)`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<T: Float, R: Rng>(store: &mut ParamStore<T>, name: &str, fan_in: usize, fan_out: usize, bias: bool, rng: &mut R) -> Result<Self> {
        let std = 1.0 / (fan_in as f64).sqrt();
        Self::with_std(store, name, fan_in, fan_out, bias, std, rng)
    }

    pub fn with_std<T: Float, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = if std == 0.0 {
            store.insert(format!("{name}.weight"), Tensor::zeros(&[fan_in, fan_out]))?
        } else {
            store.insert_normal(format!("{name}.weight"), &[fan_in, fan_out], std, rng)?
        };
        let bias = if bias { Some(store.insert(format!("{name}.bias"), Tensor::zeros(&[fan_out]))?) } else { None };
        Ok(Linear { weight, bias, fan_in, fan_out })
    }

    pub fn forward<T: Float>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = self.bias.map(|b| tape.param(store, b));
        tape.linear(x, w, b)
    }

    pub fn num_params(fan_in: usize, fan_out: usize, bias: bool) -> usize {
        fan_in * fan_out + if bias { fan_out } else { 0 }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<T: Float>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Result<Self> {
        let gain = store.insert(format!("{name}.gain"), Tensor::full(&[dim], T::one()))?;
        let bias = store.insert(format!("{name}.bias"), Tensor::zeros(&[dim]))?;
        Ok(LayerNorm { gain, bias })
    }

    pub fn forward<T: Float>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gain);
        let b = tape.param(store, self.bias);
        tape.layer_norm(x, g, b)
    }

    pub fn num_params(dim: usize) -> usize {
        2 * dim
    }
}

/// Two-layer GELU feed-forward network.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub name: String,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<T: Float, R: Rng>(store: &mut ParamStore<T>, name: &str, dim: usize, hidden: usize, rng: &mut R) -> Result<Self> {
        Ok(Mlp {
            name: name.to_string(),
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, hidden, true, rng)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, dim, true, rng)?,
        })
    }

    pub fn forward<T: Float>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var, ctx: &ForwardCtx) -> Result<Var> {
        let h = self.fc1.forward(tape, store, x)?;
        let h = tape.gelu(h)?;
        let h = ctx.apply_dropout(tape, h, &format!("{}.hidden", self.name))?;
        self.fc2.forward(tape, store, h)
    }

    pub fn num_params(dim: usize, hidden: usize) -> usize {
        Linear::num_params(dim, hidden, true) + Linear::num_params(hidden, dim, true)
    }
}

/// Scaled dot-product attention with per-head projections and an output map.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub name: String,
    pub heads: usize,
    pub dim: usize,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
}

impl MultiHeadAttention {
    pub fn new<T: Float, R: Rng>(store: &mut ParamStore<T>, name: &str, dim: usize, heads: usize, rng: &mut R) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(AutodiffError::InvalidArgument {
                op: "multi_head_attention",
                msg: format!("dimension {dim} is not divisible by {heads} heads"),
            });
        }
        Ok(MultiHeadAttention {
            name: name.to_string(),
            heads,
            dim,
            query: Linear::new(store, &format!("{name}.query"), dim, dim, true, rng)?,
            key: Linear::new(store, &format!("{name}.key"), dim, dim, true, rng)?,
            value: Linear::new(store, &format!("{name}.value"), dim, dim, true, rng)?,
            out: Linear::new(store, &format!("{name}.out"), dim, dim, true, rng)?,
        })
    }

    pub fn num_params(dim: usize) -> usize {
        4 * Linear::num_params(dim, dim, true)
    }

    /// `[..., L, D] -> [..., H, L, D/H]`
    fn split_heads<T: Float>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        let r = shape.len();
        let mut split = shape[..r - 1].to_vec();
        split.extend([self.heads, self.dim / self.heads]);
        let x = tape.reshape(x, &split)?;
        tape.transpose(x, r - 2, r - 1)
    }

    /// Attends from `query` (`[..., Lq, D]`) over `kv` (`[..., Lk, D]`).
    ///
    /// Leading axes are independent. `mask`, if given, has one group of
    /// `Lk` keep flags per leading index.
    pub fn forward<T: Float>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        query: Var,
        kv: Var,
        mask: Option<&KeyMask>,
        ctx: &ForwardCtx,
    ) -> Result<Var> {
        let qs = tape.shape(query).to_vec();
        let ks = tape.shape(kv).to_vec();
        let rank = qs.len();
        if rank < 2 || ks.len() != rank || qs[..rank - 2] != ks[..rank - 2] || qs[rank - 1] != self.dim || ks[rank - 1] != self.dim {
            return Err(AutodiffError::ShapeMismatch { op: "multi_head_attention", lhs: qs, rhs: ks });
        }
        let q = self.query.forward(tape, store, query)?;
        let k = self.key.forward(tape, store, kv)?;
        let v = self.value.forward(tape, store, kv)?;
        let q = self.split_heads(tape, q)?;
        let k = self.split_heads(tape, k)?;
        let v = self.split_heads(tape, v)?;
        // [..., H, dh, Lk]
        let kt = tape.transpose(k, rank - 1, rank)?;
        let scores = tape.matmul(q, kt)?;
        let scale = T::from_f64_lossy(1.0 / ((self.dim / self.heads) as f64).sqrt());
        let scores = tape.scale(scores, scale)?;
        let att = tape.softmax(scores, mask)?;
        let att = ctx.apply_dropout(tape, att, &format!("{}.attention", self.name))?;
        let o = tape.matmul(att, v)?;
        let o = tape.transpose(o, rank - 2, rank - 1)?;
        let o = tape.reshape(o, &qs)?;
        self.out.forward(tape, store, o)
    }
}
