//! Prior introspection: visualize learned pixel covariances as signed
//! colormap images (red = positive, blue = negative correlation with the
//! marked pixel).

use std::path::{Path, PathBuf};

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::model::{ModelParams, Stage};

use super::tensor_file::write_tensor;

/// Maps a value in [-1, 1] to a symmetric diverging blue-white-red color.
fn diverging(v: f64) -> image::Rgb<u8> {
    let v = v.clamp(-1.0, 1.0);
    let chan = |x: f64| (x * 255.0).round().clamp(0.0, 255.0) as u8;
    if v >= 0.0 {
        image::Rgb([255, chan(1.0 - v), chan(1.0 - v)])
    } else {
        image::Rgb([chan(1.0 + v), chan(1.0 + v), 255])
    }
}

/// Writes a magnitude image as an 8-bit grayscale PNG; [0, 1] maps
/// linearly to black..white, values outside are clamped.
pub fn save_grayscale_png(img: &Array2<f64>, path: &Path) -> Result<()> {
    let (h, w) = img.dim();
    let mut out = image::GrayImage::new(w as u32, h as u32);
    for i in 0..h {
        for j in 0..w {
            let v = (img[(i, j)].clamp(0.0, 1.0) * 255.0).round() as u8;
            out.put_pixel(j as u32, i as u32, image::Luma([v]));
        }
    }
    out.save(path).map_err(|e| Error::Config(format!("writing {}: {e}", path.display())))
}

/// Renders one covariance row (already image-shaped) normalized by its own
/// maximum magnitude; the probed pixel is marked in green. The PNG has
/// exactly the model's image dimensions.
fn render_row(row: &Array2<f64>, pixel: (usize, usize), path: &Path) -> Result<()> {
    let (h, w) = row.dim();
    let scale = row.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
    if scale == 0.0 || !scale.is_finite() {
        return Err(Error::Numeric(format!(
            "covariance row at {pixel:?} has no finite nonzero entries"
        )));
    }
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for i in 0..h {
        for j in 0..w {
            img.put_pixel(j as u32, i as u32, diverging(row[(i, j)] / scale));
        }
    }
    img.put_pixel(pixel.1 as u32, pixel.0 as u32, image::Rgb([0, 190, 0]));
    img.save(path).map_err(|e| Error::Config(format!("writing {}: {e}", path.display())))
}

/// Encodes `image`, decodes its covariance factor, and writes one colormap
/// PNG (plus the raw row as a tensor file) per requested pixel. Refuses
/// models without a trained covariance decoder.
pub fn run_introspection(
    params: &ModelParams,
    image: &Array2<f64>,
    pixels: &[(usize, usize)],
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    if params.stage != Stage::CovarianceTrained {
        return Err(Error::Stage(
            "introspection needs a covariance-trained checkpoint; this model has no \
             covariance decoder (identity-mode and stage-1 checkpoints cannot be introspected)"
                .into(),
        ));
    }
    let n = params.arch.image;
    if image.dim() != (n, n) {
        return Err(Error::ShapeMismatch(format!(
            "image is {:?}, model expects ({n}, {n})",
            image.dim()
        )));
    }
    if pixels.is_empty() {
        return Err(Error::Config("no pixels requested".into()));
    }
    std::fs::create_dir_all(out_dir)?;
    let z = params.encode(image)?.mu;
    let factor = params.decode_chol(&z)?;
    let mut written = Vec::with_capacity(pixels.len());
    for &(r, c) in pixels {
        if r >= n || c >= n {
            return Err(Error::IndexOutOfRange(format!(
                "pixel ({r}, {c}) outside a {n}x{n} image"
            )));
        }
        let row = factor.covariance_row((r, c))?;
        let png = out_dir.join(format!("cov_row_{r}_{c}.png"));
        render_row(&row, (r, c), &png)?;
        write_tensor(out_dir.join(format!("cov_row_{r}_{c}.cvrt")), &row.clone().into())?;
        written.push(png);
    }
    Ok(written)
}
