//! Test-only oracles shared by integration tests.
#![allow(dead_code)]

use basis::autodiff::{ParamStore, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// `||a - b|| / (||a|| + ||b||)`, zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na + nb == 0.0 {
        0.0
    } else {
        diff / (na + nb)
    }
}

/// Central differences of a scalar function of several tensors.
pub fn numeric_gradients(f: &dyn Fn(&[Tensor<f64>]) -> f64, inputs: &[Tensor<f64>], step: f64) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    for i in 0..inputs.len() {
        let mut g = vec![0.0; inputs[i].len()];
        for j in 0..inputs[i].len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += step;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= step;
            g[j] = (f(&plus) - f(&minus)) / (2.0 * step);
        }
        out.push(g);
    }
    out
}

/// Builds `sum(op(inputs) * weights)` on a fresh tape and compares the
/// analytic input gradients against central differences. Returns the worst
/// relative error over inputs.
pub fn check_op(build: &dyn Fn(&mut Tape<f64>, &[Var]) -> Var, inputs: &[Tensor<f64>], seed: u64) -> f64 {
    check_op_with(build, inputs, seed, &ParamStore::new())
}

/// [`check_op`] for builders that read parameters from `store`.
pub fn check_op_with(build: &dyn Fn(&mut Tape<f64>, &[Var]) -> Var, inputs: &[Tensor<f64>], seed: u64, store: &ParamStore<f64>) -> f64 {
    let weights = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = build(&mut tape, &vars);
        random_tensor(&mut rng(seed), tape.shape(out), 1.0)
    };
    let eval = |ins: &[Tensor<f64>], track: bool| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ins.iter().map(|t| if track { tape.input(t.clone()) } else { tape.constant(t.clone()) }).collect();
        let out = build(&mut tape, &vars);
        let w = tape.constant(weights.clone());
        let prod = tape.mul(out, w).unwrap();
        let loss = tape.sum(prod).unwrap();
        (tape, vars, loss)
    };
    let (tape, vars, loss) = eval(inputs, true);
    let mut store = store.clone();
    let grads = tape.backward(loss, &mut store).unwrap();
    let f = |ins: &[Tensor<f64>]| {
        let (tape, _, loss) = eval(ins, false);
        tape.value(loss).item()
    };
    let numeric = numeric_gradients(&f, inputs, 1e-5);
    vars.iter()
        .zip(&numeric)
        .map(|(v, n)| {
            let a = grads.get(*v).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; n.len()]);
            relative_error(&a, n)
        })
        .fold(0.0, f64::max)
}
