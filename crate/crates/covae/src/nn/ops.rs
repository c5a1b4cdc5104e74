//! Pointwise activations and dropout.

use ndarray::Array3;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

/// Rectifier; the returned mask is 1 where the input was positive.
pub fn relu(x: &Array3<f64>) -> (Array3<f64>, Array3<f64>) {
    let mask = x.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
    (x * &mask, mask)
}

pub fn relu_backward(grad_out: &Array3<f64>, mask: &Array3<f64>) -> Array3<f64> {
    grad_out * mask
}

/// Logistic sigmoid; the cache is the output itself.
pub fn sigmoid(x: &Array3<f64>) -> (Array3<f64>, Array3<f64>) {
    let out = x.mapv(|v| 1.0 / (1.0 + (-v).exp()));
    (out.clone(), out)
}

pub fn sigmoid_backward(grad_out: &Array3<f64>, out: &Array3<f64>) -> Array3<f64> {
    grad_out * &out.mapv(|s| s * (1.0 - s))
}

/// Inverted dropout: zeroes entries with probability `rate` and scales
/// survivors by 1/(1-rate), so the expectation is the identity. Returns the
/// dropped output and the mask (already scaled) for the backward pass.
pub fn dropout(x: &Array3<f64>, rate: f64, rng: &mut ChaCha8Rng) -> (Array3<f64>, Array3<f64>) {
    assert!((0.0..1.0).contains(&rate));
    if rate == 0.0 {
        let mask = Array3::ones(x.dim());
        return (x.clone(), mask);
    }
    let scale = 1.0 / (1.0 - rate);
    let mask = Array3::from_shape_simple_fn(x.dim(), || {
        if rng.gen_bool(rate) {
            0.0
        } else {
            scale
        }
    });
    (x * &mask, mask)
}
