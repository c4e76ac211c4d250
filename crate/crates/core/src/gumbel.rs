//! Gumbel-max sampling and its softmax relaxation.

use alloc::vec::Vec;

use rand::distributions::Open01;
use rand::{Rng, RngCore};

use crate::error::{Error, Result};
use crate::tape::PROB_FLOOR;

/// Source of standard Gumbel(0, 1) draws.
pub trait NoiseSource {
    fn gumbel(&mut self) -> f64;
}

/// Draws `-ln(-ln u)` with `u` uniform on the open interval (0, 1).
pub fn sample_gumbel<R: RngCore + ?Sized>(rng: &mut R) -> f64 {
    let u: f64 = rng.sample(Open01);
    -libm::log(-libm::log(u))
}

/// Adapts any random generator into a [`NoiseSource`].
#[derive(Debug, Clone)]
pub struct RngNoise<R>(pub R);

impl<R: RngCore> NoiseSource for RngNoise<R> {
    fn gumbel(&mut self) -> f64 {
        sample_gumbel(&mut self.0)
    }
}

impl<N: NoiseSource + ?Sized> NoiseSource for &mut N {
    fn gumbel(&mut self) -> f64 {
        (**self).gumbel()
    }
}

/// Replays a fixed list of noise values, cycling when exhausted. Used to
/// freeze the stochastic part of training for gradient checks.
#[derive(Debug, Clone)]
pub struct FixedNoise {
    values: Vec<f64>,
    cursor: usize,
}

impl FixedNoise {
    pub fn new(values: Vec<f64>) -> Self {
        assert!(!values.is_empty(), "fixed noise needs at least one value");
        FixedNoise { values, cursor: 0 }
    }

    pub fn rewind(&mut self) {
        self.cursor = 0;
    }
}

impl NoiseSource for FixedNoise {
    fn gumbel(&mut self) -> f64 {
        let v = self.values[self.cursor % self.values.len()];
        self.cursor += 1;
        v
    }
}

/// `y_i = softmax((ln pi_i + g_i) / tau)` for given noise `g`.
pub fn relaxed_sample(pi: &[f64], noise: &[f64], tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0) {
        return Err(Error::Parameter {
            name: "tau",
            value: tau,
        });
    }
    if pi.len() != noise.len() || pi.is_empty() {
        return Err(Error::Shape {
            op: "gumbel_softmax",
            lhs: alloc::vec![pi.len()],
            rhs: alloc::vec![noise.len()],
        });
    }
    let mut y: Vec<f64> = pi
        .iter()
        .zip(noise)
        .map(|(&p, &g)| (libm::log(p.max(PROB_FLOOR)) + g) / tau)
        .collect();
    crate::tensor::softmax_in_place(&mut y);
    Ok(y)
}

/// Draws one relaxed sample from `pi` at temperature `tau`.
pub fn gumbel_softmax_sample<N: NoiseSource + ?Sized>(
    pi: &[f64],
    tau: f64,
    noise: &mut N,
) -> Result<Vec<f64>> {
    let g: Vec<f64> = pi.iter().map(|_| noise.gumbel()).collect();
    relaxed_sample(pi, &g, tau)
}
