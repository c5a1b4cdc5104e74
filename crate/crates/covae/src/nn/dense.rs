//! Fully connected layer.

use ndarray::{Array1, ArrayView2};
use rand_chacha::ChaCha8Rng;

use super::{he_init, ParamAlloc, ParamRange};

/// Affine map `out = W x + b` with `W` of shape (out, in).
#[derive(Debug, Clone)]
pub struct Dense {
    pub dim_in: usize,
    pub dim_out: usize,
    w: ParamRange,
    b: ParamRange,
}

#[derive(Debug)]
pub struct DenseCache {
    x: Array1<f64>,
}

impl Dense {
    pub fn new(alloc: &mut ParamAlloc, dim_in: usize, dim_out: usize) -> Self {
        Self {
            dim_in,
            dim_out,
            w: alloc.range(dim_in * dim_out),
            b: alloc.range(dim_out),
        }
    }

    pub fn init(&self, params: &mut [f64], rng: &mut ChaCha8Rng) {
        he_init(self.w.slice_mut(params), self.dim_in, rng);
        self.b.slice_mut(params).fill(0.0);
    }

    fn weight<'a>(&self, params: &'a [f64]) -> ArrayView2<'a, f64> {
        ArrayView2::from_shape((self.dim_out, self.dim_in), self.w.slice(params))
            .expect("range length matches shape")
    }

    pub fn forward(&self, params: &[f64], x: &Array1<f64>) -> (Array1<f64>, DenseCache) {
        assert_eq!(x.len(), self.dim_in);
        let mut out = self.weight(params).dot(x);
        out += &Array1::from_vec(self.b.slice(params).to_vec());
        (out, DenseCache { x: x.clone() })
    }

    pub fn backward(
        &self,
        params: &[f64],
        cache: &DenseCache,
        grad_out: &Array1<f64>,
        grad_params: &mut [f64],
    ) -> Array1<f64> {
        assert_eq!(grad_out.len(), self.dim_out);
        let gw = self.w.slice_mut(grad_params);
        for i in 0..self.dim_out {
            let g = grad_out[i];
            for j in 0..self.dim_in {
                gw[i * self.dim_in + j] += g * cache.x[j];
            }
        }
        let gb = self.b.slice_mut(grad_params);
        for (i, g) in grad_out.iter().enumerate() {
            gb[i] += g;
        }
        self.weight(params).t().dot(grad_out)
    }
}
