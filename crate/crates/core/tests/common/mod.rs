//! Finite-difference gradient oracle shared by the integration tests.
#![allow(dead_code)]

use leap_core::tape::{Tape, Var};
use leap_core::Tensor;
use rand::Rng;

pub fn random_tensor<R: Rng>(shape: &[usize], scale: f64, rng: &mut R) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

/// `|a - n| / max(|a|, |n|)`, with differences below `floor` in absolute
/// terms treated as exact.
pub fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
    let diff = (a - n).abs();
    if diff <= floor {
        0.0
    } else {
        diff / a.abs().max(n.abs())
    }
}

/// Central finite differences of `f` with respect to every entry of every
/// input, compared against the tape gradient. Returns the worst relative
/// error.
pub fn check_gradients<F>(inputs: &[Tensor], step: f64, f: F) -> f64
where
    F: Fn(&mut Tape<'_>, &[Var]) -> Var,
{
    let eval = |vals: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&mut tape, &vars);
        tape.value(out).data()[0]
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars);
    let grads = tape.backward(out).unwrap();

    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.wrt(vars[k]);
        for j in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[j] += step;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[j] -= step;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * step);
            worst = worst.max(rel_err(analytic.data()[j], numeric, 1e-10));
        }
    }
    worst
}
