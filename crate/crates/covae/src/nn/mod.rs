//! Minimal neural-network toolkit the generative models are built from.
//!
//! Every network stores its parameters in one flat `Vec<f64>`; layers are
//! lightweight descriptors holding shapes plus offsets into that vector.
//! Each layer exposes `forward` (returning a cache of whatever the backward
//! pass needs) and `backward` (consuming the cache, accumulating parameter
//! gradients into a flat gradient vector, and returning the input gradient).
//! Inference with shared `&[f64]` parameters is reentrant; training is
//! single-writer by construction.

mod block;
mod conv;
mod dense;
mod ops;
mod resize;

pub use block::{ResBlock, ResBlockCache, Resize};
pub use conv::{Conv2d, Conv2dCache};
pub use dense::{Dense, DenseCache};
pub use ops::{dropout, relu, relu_backward, sigmoid, sigmoid_backward};
pub use resize::{avg_pool_2x, avg_pool_2x_backward, bilinear_up_2x, bilinear_up_2x_backward};

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Contiguous slice of a network's flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamRange {
    pub offset: usize,
    pub len: usize,
}

impl ParamRange {
    pub fn slice<'a>(&self, params: &'a [f64]) -> &'a [f64] {
        &params[self.offset..self.offset + self.len]
    }

    pub fn slice_mut<'a>(&self, params: &'a mut [f64]) -> &'a mut [f64] {
        &mut params[self.offset..self.offset + self.len]
    }
}

/// Hands out parameter ranges while a network is being laid out.
#[derive(Debug, Default)]
pub struct ParamAlloc {
    len: usize,
}

impl ParamAlloc {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn range(&mut self, len: usize) -> ParamRange {
        let r = ParamRange { offset: self.len, len };
        self.len += len;
        r
    }

    /// Total parameter count allocated so far.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

/// He-normal initialization: N(0, 2 / fan_in), the standard choice for
/// relu networks.
pub fn he_init(slice: &mut [f64], fan_in: usize, rng: &mut ChaCha8Rng) {
    let std = (2.0 / fan_in as f64).sqrt();
    for v in slice {
        *v = rng.sample::<f64, _>(StandardNormal) * std;
    }
}

/// Adam optimizer over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(n: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            params[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}
