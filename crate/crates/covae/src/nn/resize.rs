//! Parameter-free spatial resizing: bilinear 2x up-sampling and 2x2 average
//! pooling. Both are linear maps, so the backward passes are their exact
//! transposes.

use ndarray::Array3;

/// Source coordinate and interpolation weights for one output index under
/// the half-pixel-centers convention (matches common `align_corners=false`
/// resizing).
fn lerp_coords(out_i: usize, in_len: usize) -> (usize, usize, f64) {
    let src = (out_i as f64 + 0.5) / 2.0 - 0.5;
    let i0 = src.floor();
    let t = src - i0;
    let a = (i0.max(0.0) as usize).min(in_len - 1);
    let b = ((i0 + 1.0).max(0.0) as usize).min(in_len - 1);
    (a, b, t)
}

/// Doubles height and width by bilinear interpolation.
pub fn bilinear_up_2x(x: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = x.dim();
    let mut out = Array3::zeros((c, 2 * h, 2 * w));
    for oy in 0..2 * h {
        let (y0, y1, ty) = lerp_coords(oy, h);
        for ox in 0..2 * w {
            let (x0, x1, tx) = lerp_coords(ox, w);
            for ch in 0..c {
                let v00 = x[(ch, y0, x0)];
                let v01 = x[(ch, y0, x1)];
                let v10 = x[(ch, y1, x0)];
                let v11 = x[(ch, y1, x1)];
                out[(ch, oy, ox)] = (1.0 - ty) * ((1.0 - tx) * v00 + tx * v01)
                    + ty * ((1.0 - tx) * v10 + tx * v11);
            }
        }
    }
    out
}

/// Transpose of [`bilinear_up_2x`]: scatters output gradients back with the
/// same interpolation weights.
pub fn bilinear_up_2x_backward(grad_out: &Array3<f64>, in_h: usize, in_w: usize) -> Array3<f64> {
    let (c, oh, ow) = grad_out.dim();
    debug_assert_eq!((oh, ow), (2 * in_h, 2 * in_w));
    let mut gx = Array3::zeros((c, in_h, in_w));
    for oy in 0..oh {
        let (y0, y1, ty) = lerp_coords(oy, in_h);
        for ox in 0..ow {
            let (x0, x1, tx) = lerp_coords(ox, in_w);
            for ch in 0..c {
                let g = grad_out[(ch, oy, ox)];
                gx[(ch, y0, x0)] += (1.0 - ty) * (1.0 - tx) * g;
                gx[(ch, y0, x1)] += (1.0 - ty) * tx * g;
                gx[(ch, y1, x0)] += ty * (1.0 - tx) * g;
                gx[(ch, y1, x1)] += ty * tx * g;
            }
        }
    }
    gx
}

/// Halves height and width by averaging 2x2 cells (even dims required).
pub fn avg_pool_2x(x: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = x.dim();
    assert!(h % 2 == 0 && w % 2 == 0, "pooling needs even spatial dims");
    let mut out = Array3::zeros((c, h / 2, w / 2));
    for ch in 0..c {
        for oy in 0..h / 2 {
            for ox in 0..w / 2 {
                out[(ch, oy, ox)] = 0.25
                    * (x[(ch, 2 * oy, 2 * ox)]
                        + x[(ch, 2 * oy, 2 * ox + 1)]
                        + x[(ch, 2 * oy + 1, 2 * ox)]
                        + x[(ch, 2 * oy + 1, 2 * ox + 1)]);
            }
        }
    }
    out
}

/// Transpose of [`avg_pool_2x`].
pub fn avg_pool_2x_backward(grad_out: &Array3<f64>) -> Array3<f64> {
    let (c, ho, wo) = grad_out.dim();
    let mut gx = Array3::zeros((c, 2 * ho, 2 * wo));
    for ch in 0..c {
        for oy in 0..ho {
            for ox in 0..wo {
                let g = 0.25 * grad_out[(ch, oy, ox)];
                gx[(ch, 2 * oy, 2 * ox)] = g;
                gx[(ch, 2 * oy, 2 * ox + 1)] = g;
                gx[(ch, 2 * oy + 1, 2 * ox)] = g;
                gx[(ch, 2 * oy + 1, 2 * ox + 1)] = g;
            }
        }
    }
    gx
}
