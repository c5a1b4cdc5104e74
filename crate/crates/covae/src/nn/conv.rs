//! 2D convolution via im2col and a matrix product.

use ndarray::{Array2, Array3, ArrayView2};
use rand_chacha::ChaCha8Rng;

use super::{he_init, ParamAlloc, ParamRange};

/// Convolution with square kernel, "same" padding (k/2) and stride 1 or 2.
/// Feature maps are (channels, height, width).
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    w: ParamRange,
    b: ParamRange,
}

#[derive(Debug)]
pub struct Conv2dCache {
    x: Array3<f64>,
}

impl Conv2d {
    pub fn new(alloc: &mut ParamAlloc, cin: usize, cout: usize, k: usize, stride: usize) -> Self {
        assert!(k % 2 == 1, "odd kernels only");
        assert!(stride == 1 || stride == 2);
        Self {
            cin,
            cout,
            k,
            stride,
            pad: k / 2,
            w: alloc.range(cout * cin * k * k),
            b: alloc.range(cout),
        }
    }

    pub fn init(&self, params: &mut [f64], rng: &mut ChaCha8Rng) {
        he_init(self.w.slice_mut(params), self.cin * self.k * self.k, rng);
        self.b.slice_mut(params).fill(0.0);
    }

    /// All-zero weights and biases; used for heads that must start as the
    /// zero map.
    pub fn init_zero(&self, params: &mut [f64]) {
        self.w.slice_mut(params).fill(0.0);
        self.b.slice_mut(params).fill(0.0);
    }

    pub fn out_spatial(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.k) / self.stride + 1,
            (w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    fn weight_mat<'a>(&self, params: &'a [f64]) -> ArrayView2<'a, f64> {
        ArrayView2::from_shape((self.cout, self.cin * self.k * self.k), self.w.slice(params))
            .expect("range length matches shape")
    }

    fn im2col(&self, x: &Array3<f64>) -> Array2<f64> {
        let (cin, h, w) = x.dim();
        let (ho, wo) = self.out_spatial(h, w);
        let mut cols = Array2::zeros((cin * self.k * self.k, ho * wo));
        for c in 0..cin {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (c * self.k + ky) * self.k + kx;
                    for oy in 0..ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..wo {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            cols[(row, oy * wo + ox)] = x[(c, iy as usize, ix as usize)];
                        }
                    }
                }
            }
        }
        cols
    }

    pub fn forward(&self, params: &[f64], x: &Array3<f64>) -> (Array3<f64>, Conv2dCache) {
        let (cin, h, w) = x.dim();
        assert_eq!(cin, self.cin, "input channel mismatch");
        let (ho, wo) = self.out_spatial(h, w);
        let cols = self.im2col(x);
        let mut out_mat = self.weight_mat(params).dot(&cols);
        let bias = self.b.slice(params);
        for (c, mut row) in out_mat.rows_mut().into_iter().enumerate() {
            row += bias[c];
        }
        let out = out_mat
            .into_shape_with_order((self.cout, ho, wo))
            .expect("matrix reshapes to feature map");
        (out, Conv2dCache { x: x.clone() })
    }

    pub fn backward(
        &self,
        params: &[f64],
        cache: &Conv2dCache,
        grad_out: &Array3<f64>,
        grad_params: &mut [f64],
    ) -> Array3<f64> {
        let (cin, h, w) = cache.x.dim();
        let (cout, ho, wo) = grad_out.dim();
        assert_eq!(cout, self.cout);
        let gout_mat = ArrayView2::from_shape(
            (cout, ho * wo),
            grad_out.as_slice().expect("standard layout"),
        )
        .expect("shape matches");

        // Bias gradient: sum over spatial positions.
        let gb = self.b.slice_mut(grad_params);
        for (c, row) in gout_mat.rows().into_iter().enumerate() {
            gb[c] += row.sum();
        }

        // Weight gradient: grad_out (cout, N) x colsᵀ (N, cin k²).
        let cols = self.im2col(&cache.x);
        let gw_mat = gout_mat.dot(&cols.t());
        let gw = self.w.slice_mut(grad_params);
        for (g, acc) in gw_mat.iter().zip(gw.iter_mut()) {
            *acc += g;
        }

        // Input gradient: scatter Wᵀ grad_out back through the column map.
        let gcols = self.weight_mat(params).t().dot(&gout_mat);
        let mut gx = Array3::zeros((cin, h, w));
        for c in 0..cin {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (c * self.k + ky) * self.k + kx;
                    for oy in 0..ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..wo {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            gx[(c, iy as usize, ix as usize)] += gcols[(row, oy * wo + ox)];
                        }
                    }
                }
            }
        }
        gx
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::prelude::*;
    use rand_distr::StandardNormal;

    fn random_map(c: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Array3<f64> {
        Array3::from_shape_simple_fn((c, h, w), || rng.sample(StandardNormal))
    }

    /// Direct convolution loop, the oracle for the im2col path.
    fn conv_brute(
        x: &Array3<f64>,
        wt: &[f64],
        b: &[f64],
        cout: usize,
        k: usize,
        stride: usize,
    ) -> Array3<f64> {
        let (cin, h, w) = x.dim();
        let pad = k / 2;
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        let mut out = Array3::zeros((cout, ho, wo));
        for co in 0..cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b[co];
                    for ci in 0..cin {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                    let widx = ((co * cin + ci) * k + ky) * k + kx;
                                    acc += wt[widx] * x[(ci, iy as usize, ix as usize)];
                                }
                            }
                        }
                    }
                    out[(co, oy, ox)] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn centered_delta_kernel_is_identity() {
        let mut alloc = ParamAlloc::new();
        let conv = Conv2d::new(&mut alloc, 1, 1, 3, 1);
        let mut p = vec![0.0; alloc.len()];
        p[4] = 1.0; // kernel center
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = random_map(1, 5, 7, &mut rng);
        let (y, _) = conv.forward(&p, &x);
        assert_eq!(y.dim(), x.dim());
        for (a, b) in y.iter().zip(x.iter()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn matches_brute_force_over_shapes_and_strides() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for &(cin, cout, k, stride, h, w) in &[
            (1usize, 1usize, 3usize, 1usize, 6usize, 6usize),
            (2, 3, 3, 1, 5, 4),
            (3, 2, 3, 2, 8, 6),
            (2, 4, 1, 1, 7, 5),
            (4, 2, 5, 1, 9, 9),
            (2, 2, 3, 2, 6, 8),
        ] {
            let mut alloc = ParamAlloc::new();
            let conv = Conv2d::new(&mut alloc, cin, cout, k, stride);
            let mut p = vec![0.0; alloc.len()];
            conv.init(&mut p, &mut rng);
            let x = random_map(cin, h, w, &mut rng);
            let (y, _) = conv.forward(&p, &x);
            let oracle = conv_brute(&x, &p[..cout * cin * k * k], &p[cout * cin * k * k..], cout, k, stride);
            assert_eq!(y.dim(), oracle.dim());
            for (a, b) in y.iter().zip(oracle.iter()) {
                assert!((a - b).abs() < 1e-12, "conv mismatch for {:?}", (cin, cout, k, stride));
            }
        }
    }

    #[test]
    fn stride_two_halves_even_spatial_dims() {
        let mut alloc = ParamAlloc::new();
        let conv = Conv2d::new(&mut alloc, 2, 3, 3, 2);
        let mut p = vec![0.0; alloc.len()];
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        conv.init(&mut p, &mut rng);
        let x = random_map(2, 16, 8, &mut rng);
        let (y, _) = conv.forward(&p, &x);
        assert_eq!(y.dim(), (3, 8, 4));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(cin, cout, k, stride) in &[(2usize, 2usize, 3usize, 1usize), (2, 3, 3, 2), (3, 2, 1, 1)] {
            let mut alloc = ParamAlloc::new();
            let conv = Conv2d::new(&mut alloc, cin, cout, k, stride);
            let mut p = vec![0.0; alloc.len()];
            conv.init(&mut p, &mut rng);
            let x = random_map(cin, 6, 6, &mut rng);
            let (y0, cache) = conv.forward(&p, &x);
            let cot = Array3::from_shape_simple_fn(y0.dim(), || rng.sample::<f64, _>(StandardNormal));

            let loss = |p: &[f64], x: &Array3<f64>| {
                let (y, _) = conv.forward(p, x);
                y.iter().zip(cot.iter()).map(|(a, b)| a * b).sum::<f64>()
            };

            let mut gp = vec![0.0; p.len()];
            let gx = conv.backward(&p, &cache, &cot, &mut gp);

            let eps = 1e-6;
            // Probe a spread of parameters rather than all of them.
            for i in (0..p.len()).step_by(p.len() / 17 + 1) {
                let mut pp = p.clone();
                pp[i] += eps;
                let mut pm = p.clone();
                pm[i] -= eps;
                let fd = (loss(&pp, &x) - loss(&pm, &x)) / (2.0 * eps);
                assert!((gp[i] - fd).abs() < 1e-6, "param {i}: {} vs {fd}", gp[i]);
            }
            for i in (0..x.len()).step_by(7) {
                let mut xp = x.clone();
                xp.as_slice_mut().unwrap()[i] += eps;
                let mut xm = x.clone();
                xm.as_slice_mut().unwrap()[i] -= eps;
                let fd = (loss(&p, &xp) - loss(&p, &xm)) / (2.0 * eps);
                let got = gx.as_slice().unwrap()[i];
                assert!((got - fd).abs() < 1e-6, "input {i}: {got} vs {fd}");
            }
        }
    }
}
