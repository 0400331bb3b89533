//! Finite-difference oracle shared by unit tests.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-6;

/// Norm-wise relative error between two gradient vectors.
pub fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n) * (a - n)).sum::<f64>().sqrt();
    let scale: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt()
        + numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
    if scale < 1e-300 {
        diff
    } else {
        diff / scale
    }
}

/// Central differences of the scalar produced by `build` with respect to
/// every input, compared against the analytic gradient. Returns the worst
/// relative error over the inputs.
pub fn gradcheck<F>(inputs: &[Tensor], build: F) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.constant(t.clone())).collect();
        let out = build(&mut g, &vars).expect("forward");
        g.value(out)[0]
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone().with_requires_grad(true))).collect();
    let out = build(&mut g, &vars).expect("forward");
    g.backward(out).expect("backward");
    let mut worst: f64 = 0.0;
    for (i, v) in vars.iter().enumerate() {
        let analytic = g.grad(*v).expect("leaf grad").to_vec();
        let mut numeric = vec![0.0; analytic.len()];
        let mut probe = inputs.to_vec();
        for j in 0..analytic.len() {
            let orig = inputs[i].data()[j];
            probe[i].data_mut()[j] = orig + FD_STEP;
            let up = eval(&probe);
            probe[i].data_mut()[j] = orig - FD_STEP;
            let down = eval(&probe);
            probe[i].data_mut()[j] = orig;
            numeric[j] = (up - down) / (2.0 * FD_STEP);
        }
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    worst
}

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}
