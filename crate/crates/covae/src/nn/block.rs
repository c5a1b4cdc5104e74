//! Resnet-style block: a stride-1 convolution, a resizing stage, two more
//! convolutions and a relu, added to a resized (and channel-projected when
//! needed) copy of the block input.

use ndarray::Array3;
use rand_chacha::ChaCha8Rng;

use super::conv::{Conv2d, Conv2dCache};
use super::ops::{dropout, relu, relu_backward};
use super::resize::{
    avg_pool_2x, avg_pool_2x_backward, bilinear_up_2x, bilinear_up_2x_backward,
};
use super::ParamAlloc;

/// What the block does to the spatial dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Resize {
    /// Keep size; the resize stage is a stride-1 convolution.
    None,
    /// Double height/width by bilinear interpolation.
    Up,
    /// Halve height/width with a stride-2 convolution (skip path pools).
    Down,
}

#[derive(Debug, Clone)]
pub struct ResBlock {
    pub resize: Resize,
    conv_a: Conv2d,
    resize_conv: Option<Conv2d>,
    conv_b: Conv2d,
    conv_c: Conv2d,
    skip_proj: Option<Conv2d>,
}

#[derive(Debug)]
pub struct ResBlockCache {
    in_spatial: (usize, usize),
    a_spatial: (usize, usize),
    cache_a: Conv2dCache,
    cache_resize: Option<Conv2dCache>,
    cache_b: Conv2dCache,
    cache_c: Conv2dCache,
    relu_mask: Array3<f64>,
    dropout_mask: Option<Array3<f64>>,
    cache_skip: Option<Conv2dCache>,
}

impl ResBlock {
    pub fn new(alloc: &mut ParamAlloc, cin: usize, cout: usize, resize: Resize) -> Self {
        let conv_a = Conv2d::new(alloc, cin, cout, 3, 1);
        let resize_conv = match resize {
            Resize::Up => None,
            Resize::Down => Some(Conv2d::new(alloc, cout, cout, 3, 2)),
            Resize::None => Some(Conv2d::new(alloc, cout, cout, 3, 1)),
        };
        let conv_b = Conv2d::new(alloc, cout, cout, 3, 1);
        let conv_c = Conv2d::new(alloc, cout, cout, 3, 1);
        let skip_proj = (cin != cout).then(|| Conv2d::new(alloc, cin, cout, 1, 1));
        Self { resize, conv_a, resize_conv, conv_b, conv_c, skip_proj }
    }

    pub fn init(&self, params: &mut [f64], rng: &mut ChaCha8Rng) {
        self.conv_a.init(params, rng);
        if let Some(c) = &self.resize_conv {
            c.init(params, rng);
        }
        self.conv_b.init(params, rng);
        self.conv_c.init(params, rng);
        if let Some(c) = &self.skip_proj {
            c.init(params, rng);
        }
    }

    pub fn out_spatial(&self, h: usize, w: usize) -> (usize, usize) {
        match self.resize {
            Resize::None => (h, w),
            Resize::Up => (2 * h, 2 * w),
            Resize::Down => (h / 2, w / 2),
        }
    }

    /// Runs the block. Dropout fires only when an RNG is supplied with a
    /// positive rate (training mode); inference passes `None`.
    pub fn forward(
        &self,
        params: &[f64],
        x: &Array3<f64>,
        dropout_rate: f64,
        rng: Option<&mut ChaCha8Rng>,
    ) -> (Array3<f64>, ResBlockCache) {
        let (_, h, w) = x.dim();
        let (a, cache_a) = self.conv_a.forward(params, x);
        let a_spatial = (a.dim().1, a.dim().2);
        let (r, cache_resize) = match (&self.resize_conv, self.resize) {
            (None, Resize::Up) => (bilinear_up_2x(&a), None),
            (Some(conv), _) => {
                let (r, c) = conv.forward(params, &a);
                (r, Some(c))
            }
            _ => unreachable!("resize_conv is present except in up-sampling blocks"),
        };
        let (b, cache_b) = self.conv_b.forward(params, &r);
        let (c, cache_c) = self.conv_c.forward(params, &b);
        let (mut main, relu_mask) = relu(&c);
        let dropout_mask = match rng {
            Some(rng) if dropout_rate > 0.0 => {
                let (dropped, mask) = dropout(&main, dropout_rate, rng);
                main = dropped;
                Some(mask)
            }
            _ => None,
        };

        let skip_spatial = match self.resize {
            Resize::None => x.clone(),
            Resize::Up => bilinear_up_2x(x),
            Resize::Down => avg_pool_2x(x),
        };
        let (skip, cache_skip) = match &self.skip_proj {
            Some(proj) => {
                let (s, c) = proj.forward(params, &skip_spatial);
                (s, Some(c))
            }
            None => (skip_spatial, None),
        };

        let out = &main + &skip;
        (
            out,
            ResBlockCache {
                in_spatial: (h, w),
                a_spatial,
                cache_a,
                cache_resize,
                cache_b,
                cache_c,
                relu_mask,
                dropout_mask,
                cache_skip,
            },
        )
    }

    pub fn backward(
        &self,
        params: &[f64],
        cache: &ResBlockCache,
        grad_out: &Array3<f64>,
        grad_params: &mut [f64],
    ) -> Array3<f64> {
        // Skip branch.
        let gskip = match (&self.skip_proj, &cache.cache_skip) {
            (Some(proj), Some(c)) => proj.backward(params, c, grad_out, grad_params),
            _ => grad_out.clone(),
        };
        let gskip_in = match self.resize {
            Resize::None => gskip,
            Resize::Up => bilinear_up_2x_backward(&gskip, cache.in_spatial.0, cache.in_spatial.1),
            Resize::Down => avg_pool_2x_backward(&gskip),
        };

        // Main branch.
        let mut gm = grad_out.clone();
        if let Some(mask) = &cache.dropout_mask {
            gm = &gm * mask;
        }
        let gm = relu_backward(&gm, &cache.relu_mask);
        let gm = self.conv_c.backward(params, &cache.cache_c, &gm, grad_params);
        let gm = self.conv_b.backward(params, &cache.cache_b, &gm, grad_params);
        let gm = match (&self.resize_conv, &cache.cache_resize) {
            (Some(conv), Some(c)) => conv.backward(params, c, &gm, grad_params),
            _ => bilinear_up_2x_backward(&gm, cache.a_spatial.0, cache.a_spatial.1),
        };
        let gmain_in = self.conv_a.backward(params, &cache.cache_a, &gm, grad_params);

        gmain_in + gskip_in
    }
}
