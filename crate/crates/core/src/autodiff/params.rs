use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{AutodiffError, Float, Result, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A named trainable tensor and its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    /// Frozen parameters are read by the forward pass but never updated.
    pub trainable: bool,
}

/// Owns every parameter of a model, addressed by unique dotted paths.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Float> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new(), by_name: HashMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(AutodiffError::DuplicateName(name));
        }
        let id = ParamId(self.params.len());
        let grad = Tensor::zeros(value.shape());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter { name, value, grad, trainable: true });
        Ok(id)
    }

    /// Inserts a tensor drawn from `N(0, std^2)`.
    pub fn insert_normal<R: Rng>(&mut self, name: impl Into<String>, shape: &[usize], std: f64, rng: &mut R) -> Result<ParamId> {
        let dist = Normal::new(0.0, std).map_err(|e| AutodiffError::InvalidArgument { op: "init", msg: e.to_string() })?;
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::from_f64_lossy(dist.sample(rng))).collect();
        self.insert(name, Tensor::new(shape.to_vec(), data)?)
    }

    pub fn freeze(&mut self, id: ParamId) {
        self.params[id.0].trainable = false;
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.by_name.get(name).copied().ok_or_else(|| AutodiffError::UnknownParameter(name.to_string()))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    /// Total scalar count over all parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn num_trainable_scalars(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = T::zero());
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .flat_map(|p| p.grad.data().iter())
            .map(|g| {
                let g = g.to_f64_lossy();
                g * g
            })
            .sum::<f64>()
            .sqrt()
    }

    /// Snapshot of all parameter values, in id order.
    pub fn values(&self) -> Vec<Tensor<T>> {
        self.params.iter().map(|p| p.value.clone()).collect()
    }

    pub fn restore(&mut self, values: &[Tensor<T>]) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(AutodiffError::InvalidArgument {
                op: "restore",
                msg: format!("expected {} tensors, got {}", self.params.len(), values.len()),
            });
        }
        for (p, v) in self.params.iter_mut().zip(values) {
            if p.value.shape() != v.shape() {
                return Err(AutodiffError::ShapeMismatch {
                    op: "restore",
                    lhs: p.value.shape().to_vec(),
                    rhs: v.shape().to_vec(),
                });
            }
            p.value = v.clone();
        }
        Ok(())
    }
}
