use std::collections::HashMap;

use super::{AutodiffError, Float, ParamId, ParamStore, Result, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Per-key keep flags for masked softmax.
///
/// `keep` is laid out as `[groups, len]`; each group covers `repeat`
/// consecutive softmax rows (e.g. every head and query of one column).
#[derive(Debug, Clone, PartialEq)]
pub struct KeyMask {
    pub keep: Vec<bool>,
    pub len: usize,
}

impl KeyMask {
    pub fn all(groups: usize, len: usize) -> Self {
        KeyMask { keep: vec![true; groups * len], len }
    }

    pub fn groups(&self) -> usize {
        self.keep.len() / self.len.max(1)
    }
}

enum Op<T> {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    MatMul { a: Var, b: Var, batch: usize, m: usize, k: usize, n: usize, shared_b: bool },
    Reshape(Var),
    Transpose { x: Var, ax0: usize, ax1: usize },
    Concat { xs: Vec<Var>, axis: usize },
    Mean { x: Var, axis: usize },
    Sum(Var),
    Sigmoid(Var),
    Gelu(Var),
    Softmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, rstd: Vec<T> },
    Dropout { x: Var, mask: Vec<T> },
    Bce { x: Var, targets: Vec<T> },
    Gather { x: Var, index: Vec<Option<usize>> },
    Broadcast(Var),
}

impl<T> Op<T> {
    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf | Op::Param(_) => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::MatMul { a, b, .. } => vec![*a, *b],
            Op::Scale(x, _)
            | Op::Reshape(x)
            | Op::Sum(x)
            | Op::Sigmoid(x)
            | Op::Gelu(x)
            | Op::Softmax(x)
            | Op::Broadcast(x) => vec![*x],
            Op::Transpose { x, .. }
            | Op::Mean { x, .. }
            | Op::Dropout { x, .. }
            | Op::Bce { x, .. }
            | Op::Gather { x, .. } => vec![*x],
            Op::Concat { xs, .. } => xs.clone(),
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param(_) => "param",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::MatMul { .. } => "matmul",
            Op::Reshape(_) => "reshape",
            Op::Transpose { .. } => "transpose",
            Op::Concat { .. } => "concat",
            Op::Mean { .. } => "mean",
            Op::Sum(_) => "sum",
            Op::Sigmoid(_) => "sigmoid",
            Op::Gelu(_) => "gelu",
            Op::Softmax(_) => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Dropout { .. } => "dropout",
            Op::Bce { .. } => "bce_with_logits",
            Op::Gather { .. } => "gather_rows",
            Op::Broadcast(_) => "broadcast",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    finite: bool,
}

/// Gradients of leaf values after a backward pass.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Float> Gradients<T> {
    /// Gradient of a leaf; `None` when the leaf does not influence the loss.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

/// Records one forward computation for reverse-mode differentiation.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
}

impl<T: Float> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

const LN_EPS: f64 = 1e-5;
const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

fn suffix_reps(op: &'static str, a: &[usize], b: &[usize]) -> Result<usize> {
    if b.len() > a.len() || a[a.len() - b.len()..] != *b {
        return Err(AutodiffError::ShapeMismatch { op, lhs: a.to_vec(), rhs: b.to_vec() });
    }
    Ok(a[..a.len() - b.len()].iter().product())
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let pre = shape[..axis].iter().product();
    let post = shape[axis + 1..].iter().product();
    (pre, shape[axis], post)
}

/// Copies `src` laid out as `[pre, d0, mid, d1, post]` into `[pre, d1, mid, d0, post]`.
fn swap_axes<T: Copy>(src: &[T], dst: &mut [T], pre: usize, d0: usize, mid: usize, d1: usize, post: usize) {
    for p in 0..pre {
        for i in 0..d0 {
            for m in 0..mid {
                for j in 0..d1 {
                    let s = (((p * d0 + i) * mid + m) * d1 + j) * post;
                    let d = (((p * d1 + j) * mid + m) * d0 + i) * post;
                    dst[d..d + post].copy_from_slice(&src[s..s + post]);
                }
            }
        }
    }
}

fn sigmoid<T: Float>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

fn accumulate<'g, T: Float>(grads: &'g mut [Option<Vec<T>>], v: Var, len: usize) -> &'g mut [T] {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

impl<T: Float> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), params: HashMap::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Result<Var> {
        let parents = op.parents();
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        let inputs_finite = parents.iter().all(|p| self.nodes[p.0].finite);
        let finite = if cfg!(debug_assertions) || !inputs_finite { value.all_finite() } else { true };
        if cfg!(debug_assertions) && inputs_finite && !finite {
            return Err(AutodiffError::NonFinite { op: op.name() });
        }
        self.nodes.push(Node { value, op, requires_grad, finite });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A constant input.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        let finite = value.all_finite();
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: false, finite });
        Var(self.nodes.len() - 1)
    }

    /// An input whose gradient is tracked (for gradient checks).
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        let finite = value.all_finite();
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: true, finite });
        Var(self.nodes.len() - 1)
    }

    /// Loads a parameter; repeated loads of the same id share one node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let p = store.get(id);
        let value = p.value.clone();
        let finite = value.all_finite();
        self.nodes.push(Node { value, op: Op::Param(id), requires_grad: p.trainable, finite });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T) -> Result<(Tensor<T>, usize)> {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let reps = suffix_reps(name, av.shape(), bv.shape())?;
        let bl = bv.len();
        let mut out = Vec::with_capacity(av.len());
        for r in 0..reps {
            let chunk = &av.data()[r * bl..(r + 1) * bl];
            out.extend(chunk.iter().zip(bv.data()).map(|(&x, &y)| f(x, y)));
        }
        Ok((Tensor::new(av.shape().to_vec(), out)?, reps))
    }

    /// `a + b`, broadcasting `b` over the leading axes of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, _) = self.binary(a, b, "add", |x, y| x + y)?;
        self.push(t, Op::Add(a, b))
    }

    /// `a - b`, broadcasting `b` over the leading axes of `a`.
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, _) = self.binary(a, b, "sub", |x, y| x - y)?;
        self.push(t, Op::Sub(a, b))
    }

    /// Elementwise `a * b`, broadcasting `b` over the leading axes of `a`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, _) = self.binary(a, b, "mul", |x, y| x * y)?;
        self.push(t, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let t = Tensor::new(xv.shape().to_vec(), xv.data().iter().map(|&v| v * s).collect())?;
        self.push(t, Op::Scale(x, s))
    }

    /// Matrix product over the trailing two axes.
    ///
    /// `b` is either rank 2 (shared by every leading index of `a`) or has
    /// exactly the leading axes of `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let ash = self.shape(a).to_vec();
        let bsh = self.shape(b).to_vec();
        let mismatch = || AutodiffError::ShapeMismatch { op: "matmul", lhs: ash.clone(), rhs: bsh.clone() };
        if ash.len() < 2 || bsh.len() < 2 {
            return Err(mismatch());
        }
        let (m, k) = (ash[ash.len() - 2], ash[ash.len() - 1]);
        let (kb, n) = (bsh[bsh.len() - 2], bsh[bsh.len() - 1]);
        if k != kb {
            return Err(mismatch());
        }
        let lead = &ash[..ash.len() - 2];
        let shared_b = bsh.len() == 2;
        if !shared_b && lead != &bsh[..bsh.len() - 2] {
            return Err(mismatch());
        }
        let batch: usize = lead.iter().product();
        let mut out = vec![T::zero(); batch * m * n];
        let ad = self.nodes[a.0].value.data();
        let bd = self.nodes[b.0].value.data();
        unsafe {
            if shared_b {
                T::gemm(batch * m, k, n, T::one(), ad.as_ptr(), k as isize, 1, bd.as_ptr(), n as isize, 1, T::zero(), out.as_mut_ptr(), n as isize, 1);
            } else {
                for i in 0..batch {
                    T::gemm(
                        m,
                        k,
                        n,
                        T::one(),
                        ad.as_ptr().add(i * m * k),
                        k as isize,
                        1,
                        bd.as_ptr().add(i * k * n),
                        n as isize,
                        1,
                        T::zero(),
                        out.as_mut_ptr().add(i * m * n),
                        n as isize,
                        1,
                    );
                }
            }
        }
        let mut shape = lead.to_vec();
        shape.extend([m, n]);
        let t = Tensor::new(shape, out)?;
        self.push(t, Op::MatMul { a, b, batch, m, k, n, shared_b })
    }

    /// `x W + b` with `W: [in, out]` and `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add(y, b),
            None => Ok(y),
        }
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        if shape.iter().product::<usize>() != xv.len() {
            return Err(AutodiffError::ShapeMismatch { op: "reshape", lhs: xv.shape().to_vec(), rhs: shape.to_vec() });
        }
        let t = xv.clone().reshaped(shape.to_vec());
        self.push(t, Op::Reshape(x))
    }

    /// Swaps two axes.
    pub fn transpose(&mut self, x: Var, ax0: usize, ax1: usize) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let shape = xv.shape().to_vec();
        if ax0 >= shape.len() || ax1 >= shape.len() {
            return Err(AutodiffError::InvalidArgument {
                op: "transpose",
                msg: format!("axes ({ax0}, {ax1}) out of range for rank {}", shape.len()),
            });
        }
        let (lo, hi) = (ax0.min(ax1), ax0.max(ax1));
        if lo == hi {
            let t = xv.clone();
            return self.push(t, Op::Reshape(x));
        }
        let mut out_shape = shape.clone();
        out_shape.swap(lo, hi);
        let mut out = vec![T::zero(); xv.len()];
        let pre = shape[..lo].iter().product();
        let mid = shape[lo + 1..hi].iter().product();
        let post = shape[hi + 1..].iter().product();
        swap_axes(xv.data(), &mut out, pre, shape[lo], mid, shape[hi], post);
        let t = Tensor::new(out_shape, out)?;
        self.push(t, Op::Transpose { x, ax0: lo, ax1: hi })
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*xs.first().ok_or(AutodiffError::InvalidArgument {
            op: "concat",
            msg: "no inputs".into(),
        })?)
        .to_vec();
        if axis >= first.len() {
            return Err(AutodiffError::InvalidArgument { op: "concat", msg: format!("axis {axis} out of range") });
        }
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            let compatible = s.len() == first.len() && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(AutodiffError::ShapeMismatch { op: "concat", lhs: first.clone(), rhs: s.to_vec() });
            }
            total += s[axis];
        }
        let (pre, _, post) = split_axis(&first, axis);
        let mut out = Vec::with_capacity(pre * total * post);
        for p in 0..pre {
            for &x in xs {
                let xv = &self.nodes[x.0].value;
                let chunk = xv.shape()[axis] * post;
                out.extend_from_slice(&xv.data()[p * chunk..(p + 1) * chunk]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let t = Tensor::new(shape, out)?;
        self.push(t, Op::Concat { xs: xs.to_vec(), axis })
    }

    /// Mean over one axis, which is removed.
    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        if axis >= xv.rank() {
            return Err(AutodiffError::InvalidArgument { op: "mean", msg: format!("axis {axis} out of range") });
        }
        let (pre, n, post) = split_axis(xv.shape(), axis);
        let inv = T::one() / T::from_f64_lossy(n as f64);
        let mut out = vec![T::zero(); pre * post];
        for p in 0..pre {
            for i in 0..n {
                let src = &xv.data()[(p * n + i) * post..(p * n + i + 1) * post];
                for (o, &s) in out[p * post..(p + 1) * post].iter_mut().zip(src) {
                    *o += s;
                }
            }
        }
        out.iter_mut().for_each(|o| *o *= inv);
        let mut shape = xv.shape().to_vec();
        shape.remove(axis);
        let t = Tensor::new(shape, out)?;
        self.push(t, Op::Mean { x, axis })
    }

    /// Sum of every element, as a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.nodes[x.0].value.data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    /// Mean of every element, as a scalar.
    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = self.nodes[x.0].value.len();
        let s = self.sum(x)?;
        self.scale(s, T::one() / T::from_f64_lossy(n as f64))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let t = Tensor::new(xv.shape().to_vec(), xv.data().iter().map(|&z| sigmoid(z)).collect())?;
        self.push(t, Op::Sigmoid(x))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let c = T::from_f64_lossy(SQRT_2_OVER_PI);
        let a = T::from_f64_lossy(GELU_C);
        let half = T::from_f64_lossy(0.5);
        let data = xv.data().iter().map(|&v| half * v * (T::one() + (c * (v + a * v * v * v)).tanh())).collect();
        let t = Tensor::new(xv.shape().to_vec(), data)?;
        self.push(t, Op::Gelu(x))
    }

    /// Softmax over the last axis; dropped keys receive an additive `-1e9`.
    pub fn softmax(&mut self, x: Var, mask: Option<&KeyMask>) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let len = *xv.shape().last().ok_or(AutodiffError::InvalidArgument { op: "softmax", msg: "scalar input".into() })?;
        let rows = xv.len() / len.max(1);
        let repeat = match mask {
            Some(m) => {
                if m.len != len || m.groups() == 0 || rows % m.groups() != 0 {
                    return Err(AutodiffError::InvalidArgument {
                        op: "softmax",
                        msg: format!("mask of {} groups x {} keys does not tile {rows} rows of {len}", m.groups(), m.len),
                    });
                }
                rows / m.groups()
            }
            None => rows,
        };
        let bias = T::mask_bias();
        let mut out = xv.data().to_vec();
        for r in 0..rows {
            let row = &mut out[r * len..(r + 1) * len];
            if let Some(m) = mask {
                let keep = &m.keep[(r / repeat) * len..(r / repeat + 1) * len];
                if !keep.iter().any(|&k| k) {
                    return Err(AutodiffError::FullyMasked { row: r });
                }
                for (v, &k) in row.iter_mut().zip(keep) {
                    if !k {
                        *v += bias;
                    }
                }
            }
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            row.iter_mut().for_each(|v| *v /= total);
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        self.push(t, Op::Softmax(x))
    }

    /// Layer normalization over the last axis with learnable gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let d = *xv.shape().last().unwrap_or(&0);
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(AutodiffError::ShapeMismatch {
                op: "layer_norm",
                lhs: xv.shape().to_vec(),
                rhs: self.shape(gain).to_vec(),
            });
        }
        let g = self.nodes[gain.0].value.data();
        let b = self.nodes[bias.0].value.data();
        let rows = xv.len() / d;
        let inv_d = T::one() / T::from_f64_lossy(d as f64);
        let eps = T::from_f64_lossy(LN_EPS);
        let mut xhat = vec![T::zero(); xv.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xv.len()];
        for r in 0..rows {
            let row = &xv.data()[r * d..(r + 1) * d];
            let mu = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() * inv_d;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mu) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        self.push(t, Op::LayerNorm { x, gain, bias, xhat, rstd })
    }

    /// Inverted dropout with an externally supplied keep pattern.
    ///
    /// Identity (no node recorded) when `rate == 0` or `keep` is `None`.
    pub fn dropout(&mut self, x: Var, rate: f64, keep: Option<&[bool]>) -> Result<Var> {
        let Some(keep) = keep else { return Ok(x) };
        if rate <= 0.0 {
            return Ok(x);
        }
        if !(0.0..1.0).contains(&rate) {
            return Err(AutodiffError::InvalidArgument { op: "dropout", msg: format!("rate {rate} not in [0, 1)") });
        }
        let xv = &self.nodes[x.0].value;
        if keep.len() != xv.len() {
            return Err(AutodiffError::InvalidArgument { op: "dropout", msg: "keep pattern length".into() });
        }
        let s = T::from_f64_lossy(1.0 / (1.0 - rate));
        let mask: Vec<T> = keep.iter().map(|&k| if k { s } else { T::zero() }).collect();
        let data = xv.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let t = Tensor::new(xv.shape().to_vec(), data)?;
        self.push(t, Op::Dropout { x, mask })
    }

    /// Binary cross entropy with logits, summed over the last axis.
    pub fn bce_with_logits(&mut self, x: Var, targets: &Tensor<T>) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        if xv.shape() != targets.shape() || xv.rank() == 0 {
            return Err(AutodiffError::ShapeMismatch {
                op: "bce_with_logits",
                lhs: xv.shape().to_vec(),
                rhs: targets.shape().to_vec(),
            });
        }
        let k = *xv.shape().last().unwrap();
        let rows = xv.len() / k.max(1);
        let mut out = vec![T::zero(); rows];
        for r in 0..rows {
            let mut acc = T::zero();
            for j in 0..k {
                let z = xv.data()[r * k + j];
                let t = targets.data()[r * k + j];
                acc += z.max(T::zero()) - z * t + (-z.abs()).exp().ln_1p();
            }
            out[r] = acc;
        }
        let shape = xv.shape()[..xv.rank() - 1].to_vec();
        let t = Tensor::new(shape, out)?;
        self.push(t, Op::Bce { x, targets: targets.data().to_vec() })
    }

    /// Selects rows along axis 0; `None` yields a zero row.
    pub fn gather_rows(&mut self, x: Var, index: &[Option<usize>]) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        if xv.rank() == 0 {
            return Err(AutodiffError::InvalidArgument { op: "gather_rows", msg: "scalar input".into() });
        }
        let n = xv.shape()[0];
        let w = xv.len() / n.max(1);
        let mut out = vec![T::zero(); index.len() * w];
        for (i, idx) in index.iter().enumerate() {
            if let Some(r) = *idx {
                if r >= n {
                    return Err(AutodiffError::InvalidArgument { op: "gather_rows", msg: format!("row {r} >= {n}") });
                }
                out[i * w..(i + 1) * w].copy_from_slice(&xv.data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = xv.shape().to_vec();
        shape[0] = index.len();
        let t = Tensor::new(shape, out)?;
        self.push(t, Op::Gather { x, index: index.to_vec() })
    }

    /// Repeats `x` over new leading axes.
    pub fn broadcast(&mut self, x: Var, leading: &[usize]) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let reps: usize = leading.iter().product();
        let mut out = Vec::with_capacity(reps * xv.len());
        for _ in 0..reps {
            out.extend_from_slice(xv.data());
        }
        let mut shape = leading.to_vec();
        shape.extend_from_slice(xv.shape());
        let t = Tensor::new(shape, out)?;
        self.push(t, Op::Broadcast(x))
    }

    /// Reverse pass from a scalar `loss`. Parameter gradients are added to
    /// `store`; gradients of other leaves are returned.
    pub fn backward(&self, loss: Var, store: &mut ParamStore<T>) -> Result<Gradients<T>> {
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(AutodiffError::NotScalar(lv.shape().to_vec()));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(AutodiffError::Detached);
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let g = match &node.op {
                Op::Leaf => continue,
                Op::Param(id) => {
                    if let Some(g) = grads[i].take() {
                        let p = store.get_mut(*id);
                        for (acc, v) in p.grad.data_mut().iter_mut().zip(&g) {
                            *acc += *v;
                        }
                    }
                    continue;
                }
                _ => match grads[i].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            self.backward_op(i, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn backward_op(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf | Op::Param(_) => unreachable!(),
            Op::Add(a, b) | Op::Sub(a, b) => {
                let negate = matches!(node.op, Op::Sub(..));
                if wants(*a) {
                    let ga = accumulate(grads, *a, g.len());
                    ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
                }
                if wants(*b) {
                    let bl = val(*b).len();
                    let gb = accumulate(grads, *b, bl);
                    for chunk in g.chunks(bl) {
                        for (x, &y) in gb.iter_mut().zip(chunk) {
                            if negate {
                                *x -= y
                            } else {
                                *x += y
                            }
                        }
                    }
                }
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (val(*a).data(), val(*b).data());
                let bl = bd.len();
                if wants(*a) {
                    let ga = accumulate(grads, *a, g.len());
                    for (idx, x) in ga.iter_mut().enumerate() {
                        *x += g[idx] * bd[idx % bl];
                    }
                }
                if wants(*b) {
                    let gb = accumulate(grads, *b, bl);
                    for (idx, (&gv, &av)) in g.iter().zip(ad).enumerate() {
                        gb[idx % bl] += gv * av;
                    }
                }
            }
            Op::Scale(x, s) => {
                let gx = accumulate(grads, *x, g.len());
                gx.iter_mut().zip(g).for_each(|(a, &b)| *a += b * *s);
            }
            Op::MatMul { a, b, batch, m, k, n, shared_b } => {
                let (batch, m, k, n) = (*batch, *m, *k, *n);
                let ad = val(*a).data();
                let bd = val(*b).data();
                if wants(*a) {
                    let ga = accumulate(grads, *a, ad.len());
                    // dA = dC B^T
                    unsafe {
                        if *shared_b {
                            T::gemm(batch * m, n, k, T::one(), g.as_ptr(), n as isize, 1, bd.as_ptr(), 1, n as isize, T::one(), ga.as_mut_ptr(), k as isize, 1);
                        } else {
                            for bi in 0..batch {
                                T::gemm(
                                    m,
                                    n,
                                    k,
                                    T::one(),
                                    g.as_ptr().add(bi * m * n),
                                    n as isize,
                                    1,
                                    bd.as_ptr().add(bi * k * n),
                                    1,
                                    n as isize,
                                    T::one(),
                                    ga.as_mut_ptr().add(bi * m * k),
                                    k as isize,
                                    1,
                                );
                            }
                        }
                    }
                }
                if wants(*b) {
                    let gb = accumulate(grads, *b, bd.len());
                    // dB = A^T dC
                    unsafe {
                        if *shared_b {
                            T::gemm(k, batch * m, n, T::one(), ad.as_ptr(), 1, k as isize, g.as_ptr(), n as isize, 1, T::one(), gb.as_mut_ptr(), n as isize, 1);
                        } else {
                            for bi in 0..batch {
                                T::gemm(
                                    k,
                                    m,
                                    n,
                                    T::one(),
                                    ad.as_ptr().add(bi * m * k),
                                    1,
                                    k as isize,
                                    g.as_ptr().add(bi * m * n),
                                    n as isize,
                                    1,
                                    T::one(),
                                    gb.as_mut_ptr().add(bi * k * n),
                                    n as isize,
                                    1,
                                );
                            }
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                let gx = accumulate(grads, *x, g.len());
                gx.iter_mut().zip(g).for_each(|(a, &b)| *a += b);
            }
            Op::Transpose { x, ax0, ax1 } => {
                let out_shape = node.value.shape();
                let pre = out_shape[..*ax0].iter().product();
                let mid = out_shape[ax0 + 1..*ax1].iter().product();
                let post = out_shape[ax1 + 1..].iter().product();
                let mut back = vec![T::zero(); g.len()];
                swap_axes(g, &mut back, pre, out_shape[*ax0], mid, out_shape[*ax1], post);
                let gx = accumulate(grads, *x, g.len());
                gx.iter_mut().zip(&back).for_each(|(a, &b)| *a += b);
            }
            Op::Concat { xs, axis } => {
                let (pre, total, post) = split_axis(node.value.shape(), *axis);
                let mut offset = 0;
                for &x in xs {
                    let d = val(x).shape()[*axis];
                    if wants(x) {
                        let gx = accumulate(grads, x, pre * d * post);
                        for p in 0..pre {
                            let src = &g[(p * total + offset) * post..(p * total + offset + d) * post];
                            for (a, &b) in gx[p * d * post..(p + 1) * d * post].iter_mut().zip(src) {
                                *a += b;
                            }
                        }
                    }
                    offset += d;
                }
            }
            Op::Mean { x, axis } => {
                let (pre, n, post) = split_axis(val(*x).shape(), *axis);
                let inv = T::one() / T::from_f64_lossy(n as f64);
                let gx = accumulate(grads, *x, pre * n * post);
                for p in 0..pre {
                    for i in 0..n {
                        for j in 0..post {
                            gx[(p * n + i) * post + j] += g[p * post + j] * inv;
                        }
                    }
                }
            }
            Op::Sum(x) => {
                let gx = accumulate(grads, *x, val(*x).len());
                gx.iter_mut().for_each(|a| *a += g[0]);
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                let gx = accumulate(grads, *x, g.len());
                for ((a, &gv), &yv) in gx.iter_mut().zip(g).zip(y) {
                    *a += gv * yv * (T::one() - yv);
                }
            }
            Op::Gelu(x) => {
                let xd = val(*x).data();
                let c = T::from_f64_lossy(SQRT_2_OVER_PI);
                let a3 = T::from_f64_lossy(GELU_C);
                let half = T::from_f64_lossy(0.5);
                let three = T::from_f64_lossy(3.0);
                let gx = accumulate(grads, *x, g.len());
                for ((acc, &gv), &v) in gx.iter_mut().zip(g).zip(xd) {
                    let t = (c * (v + a3 * v * v * v)).tanh();
                    let dt = c * (T::one() + three * a3 * v * v);
                    let d = half * (T::one() + t) + half * v * (T::one() - t * t) * dt;
                    *acc += gv * d;
                }
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let len = *node.value.shape().last().unwrap();
                let gx = accumulate(grads, *x, g.len());
                for r in 0..y.len() / len {
                    let ys = &y[r * len..(r + 1) * len];
                    let gs = &g[r * len..(r + 1) * len];
                    let dot: T = ys.iter().zip(gs).map(|(&a, &b)| a * b).sum();
                    for j in 0..len {
                        gx[r * len + j] += ys[j] * (gs[j] - dot);
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let gd = val(*gain).data();
                let d = gd.len();
                let rows = xhat.len() / d;
                if wants(*gain) {
                    let gg = accumulate(grads, *gain, d);
                    for r in 0..rows {
                        for j in 0..d {
                            gg[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                }
                if wants(*bias) {
                    let gb = accumulate(grads, *bias, d);
                    for r in 0..rows {
                        for j in 0..d {
                            gb[j] += g[r * d + j];
                        }
                    }
                }
                if wants(*x) {
                    let inv_d = T::one() / T::from_f64_lossy(d as f64);
                    let gx = accumulate(grads, *x, xhat.len());
                    let mut dxhat = vec![T::zero(); d];
                    for r in 0..rows {
                        let mut mean_dx = T::zero();
                        let mut mean_dxx = T::zero();
                        for j in 0..d {
                            dxhat[j] = g[r * d + j] * gd[j];
                            mean_dx += dxhat[j];
                            mean_dxx += dxhat[j] * xhat[r * d + j];
                        }
                        mean_dx *= inv_d;
                        mean_dxx *= inv_d;
                        for j in 0..d {
                            gx[r * d + j] += rstd[r] * (dxhat[j] - mean_dx - xhat[r * d + j] * mean_dxx);
                        }
                    }
                }
            }
            Op::Dropout { x, mask } => {
                let gx = accumulate(grads, *x, g.len());
                for ((a, &gv), &m) in gx.iter_mut().zip(g).zip(mask) {
                    *a += gv * m;
                }
            }
            Op::Bce { x, targets } => {
                let xd = val(*x).data();
                let k = xd.len() / g.len().max(1);
                let gx = accumulate(grads, *x, xd.len());
                for (idx, a) in gx.iter_mut().enumerate() {
                    *a += g[idx / k] * (sigmoid(xd[idx]) - targets[idx]);
                }
            }
            Op::Gather { x, index } => {
                let xl = val(*x).len();
                let w = g.len() / index.len().max(1);
                let gx = accumulate(grads, *x, xl);
                for (i, idx) in index.iter().enumerate() {
                    if let Some(r) = *idx {
                        for j in 0..w {
                            gx[r * w + j] += g[i * w + j];
                        }
                    }
                }
            }
            Op::Broadcast(x) => {
                let xl = val(*x).len();
                let gx = accumulate(grads, *x, xl);
                for chunk in g.chunks(xl) {
                    gx.iter_mut().zip(chunk).for_each(|(a, &b)| *a += b);
                }
            }
        }
    }
}
