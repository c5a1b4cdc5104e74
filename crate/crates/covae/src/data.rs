//! Dataset pipeline: synthetic phantom generation for desk-scale runs and
//! ingestion of externally produced magnitude volumes.
//!
//! Both paths produce [`Dataset`]s whose images are `(H, W)` arrays of
//! `f64` in `[0, 1]`. Ingestion keeps images from the same volume in the
//! same split, so a model is never evaluated on slices adjacent to its
//! training data.

use ndarray::Array2;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{Error, Result};
use crate::harness::read_tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    SyntheticPhantom,
    ExternalMagnitude,
}

/// A homogeneous image collection: one split, one source kind.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Vec<Array2<f64>>,
    pub split: Split,
    pub provenance: Provenance,
    /// Source label per image: the originating volume's file stem, or the
    /// generator seed/index for phantoms. Used for split audits and
    /// manifest fingerprints.
    pub sources: Vec<String>,
}

impl Dataset {
    /// FNV-1a over image bits and source labels; stable across runs on the
    /// same data, recorded in training manifests.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut eat = |byte: u8| {
            h ^= byte as u64;
            h = h.wrapping_mul(0x100000001b3);
        };
        for (img, src) in self.images.iter().zip(&self.sources) {
            for b in src.as_bytes() {
                eat(*b);
            }
            for v in img.iter() {
                for b in v.to_le_bytes() {
                    eat(b);
                }
            }
        }
        h
    }
}

struct Ellipse {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    angle: f64,
    base: f64,
    grad_angle: f64,
    slope: f64,
}

impl Ellipse {
    /// Signed interior coordinate: < 1 inside, with the boundary at 1.
    fn radius2(&self, y: f64, x: f64) -> f64 {
        let (dy, dx) = (y - self.cy, x - self.cx);
        let (s, c) = self.angle.sin_cos();
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        (u / self.rx).powi(2) + (v / self.ry).powi(2)
    }

    fn intensity(&self, y: f64, x: f64, diag: f64) -> f64 {
        let (s, c) = self.grad_angle.sin_cos();
        let t = (c * (x - self.cx) + s * (y - self.cy)) / diag;
        (self.base + self.slope * t).max(0.05)
    }
}

/// Piecewise-smooth synthetic magnitude images: 2–5 rotated ellipses with
/// smooth interior intensity gradients and sharp boundaries on a black
/// background, linearly rescaled to [0, 1]. Deterministic per seed; use
/// disjoint seeds for train and test sets.
pub fn make_phantom_dataset(
    count: usize,
    h: usize,
    w: usize,
    seed: u64,
    split: Split,
) -> Result<Dataset> {
    if count == 0 || h == 0 || w == 0 {
        return Err(Error::Config("phantom dataset needs count, h, w >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let diag = ((h * h + w * w) as f64).sqrt();
    let mut images = Vec::with_capacity(count);
    let mut sources = Vec::with_capacity(count);
    for idx in 0..count {
        let n_ellipses = rng.gen_range(2..=5);
        let ellipses: Vec<Ellipse> = (0..n_ellipses)
            .map(|_| Ellipse {
                cy: rng.gen_range(0.25..0.75) * h as f64,
                cx: rng.gen_range(0.25..0.75) * w as f64,
                ry: rng.gen_range(0.06..0.28) * h as f64,
                rx: rng.gen_range(0.06..0.28) * w as f64,
                angle: rng.gen_range(0.0..std::f64::consts::PI),
                base: rng.gen_range(0.3..1.0),
                grad_angle: rng.gen_range(0.0..std::f64::consts::TAU),
                slope: rng.gen_range(-0.8..0.8),
            })
            .collect();
        let mut img = Array2::zeros((h, w));
        for ((y, x), px) in img.indexed_iter_mut() {
            let (yf, xf) = (y as f64 + 0.5, x as f64 + 0.5);
            for e in &ellipses {
                if e.radius2(yf, xf) < 1.0 {
                    *px = f64::max(*px, e.intensity(yf, xf, diag));
                }
            }
        }
        let max = img.iter().fold(0.0f64, |a, &b| a.max(b));
        if max > 0.0 {
            img.mapv_inplace(|v| v / max);
        }
        images.push(img);
        sources.push(format!("phantom-{seed}-{idx}"));
    }
    Ok(Dataset { images, split, provenance: Provenance::SyntheticPhantom, sources })
}

/// Per-axis overlap weights for area-average resampling: output cell `i`
/// covers source span [i*scale, (i+1)*scale).
fn area_weights(src: usize, dst: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let lo = i as f64 * scale;
            let hi = (i as f64 + 1.0) * scale;
            let mut w = Vec::new();
            let first = lo.floor() as usize;
            let last = (hi.ceil() as usize).min(src);
            for s in first..last {
                let overlap = hi.min(s as f64 + 1.0) - lo.max(s as f64);
                if overlap > 1e-12 {
                    w.push((s, overlap / scale));
                }
            }
            w
        })
        .collect()
}

/// Anti-aliased (area-average) resize. Exact block averaging when the
/// scale factor is an integer.
pub fn resize_area(img: &Array2<f64>, out_h: usize, out_w: usize) -> Array2<f64> {
    let (h, w) = img.dim();
    let wy = area_weights(h, out_h);
    let wx = area_weights(w, out_w);
    // Separable: rows first, then columns.
    let mut rows = Array2::<f64>::zeros((out_h, w));
    for (i, ws) in wy.iter().enumerate() {
        for &(s, wgt) in ws {
            for x in 0..w {
                rows[(i, x)] += wgt * img[(s, x)];
            }
        }
    }
    let mut out = Array2::<f64>::zeros((out_h, out_w));
    for (j, ws) in wx.iter().enumerate() {
        for &(s, wgt) in ws {
            for y in 0..out_h {
                out[(y, j)] += wgt * rows[(y, s)];
            }
        }
    }
    out
}

/// Linear rescale to [0, 1]; errors on constant input where the map is
/// undefined.
pub fn rescale_unit(img: &Array2<f64>, label: &str) -> Result<Array2<f64>> {
    let min = img.iter().copied().fold(f64::INFINITY, f64::min);
    let max = img.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(min.is_finite() && max.is_finite()) {
        return Err(Error::Numeric(format!("non-finite pixels in {label}")));
    }
    if max - min < 1e-12 {
        return Err(Error::Invariant(format!(
            "constant slice in {label}: linear rescale to [0, 1] is undefined"
        )));
    }
    Ok(img.mapv(|v| (v - min) / (max - min)))
}

/// Volumes ingested from a directory of tensor files (rank 3:
/// slices x H x W, or rank 2 for single-slice volumes), producing a
/// train/test pair. The middle half of each volume's slices is kept,
/// area-resized to `target x target`, and rescaled to [0, 1] per image.
/// Volumes are assigned to splits whole (every fifth volume by sorted
/// filename, at least one, goes to test), so no volume straddles the split.
pub fn ingest_magnitude_volumes(dir: impl AsRef<Path>, target: usize) -> Result<(Dataset, Dataset)> {
    let dir = dir.as_ref();
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => {
                Error::MissingArtifact(format!("volume directory {}", dir.display()))
            }
            _ => Error::Io(e),
        })?
        .filter_map(|entry| entry.ok().map(|d| d.path()))
        .filter(|p| p.is_file())
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::MissingArtifact(format!(
            "no volume files in {}",
            dir.display()
        )));
    }

    let n_test = (files.len() / 5).max(if files.len() >= 2 { 1 } else { 0 });
    let mut parts = [
        Dataset {
            images: Vec::new(),
            split: Split::Train,
            provenance: Provenance::ExternalMagnitude,
            sources: Vec::new(),
        },
        Dataset {
            images: Vec::new(),
            split: Split::Test,
            provenance: Provenance::ExternalMagnitude,
            sources: Vec::new(),
        },
    ];
    for (vol_idx, path) in files.iter().enumerate() {
        let label = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.display().to_string());
        let tensor = read_tensor(path)?;
        let vol = tensor.as_f64_any()?;
        let (slices, h, w) = match vol.ndim() {
            3 => {
                let d = vol.shape();
                (d[0], d[1], d[2])
            }
            2 => {
                let d = vol.shape();
                (1, d[0], d[1])
            }
            other => {
                return Err(Error::Corrupt {
                    path: path.display().to_string(),
                    reason: format!("volume tensor has rank {other}, expected 2 or 3"),
                })
            }
        };
        if slices == 0 || h == 0 || w == 0 {
            return Err(Error::Corrupt {
                path: path.display().to_string(),
                reason: "empty volume".into(),
            });
        }
        // Middle half of the stack, at least one slice.
        let keep = (slices / 2).max(1);
        let start = (slices - keep) / 2;
        // Every fifth volume to test; first test volume is index 4 (or the
        // last volume when there are fewer than five).
        let is_test = if files.len() < 5 {
            n_test > 0 && vol_idx == files.len() - 1
        } else {
            vol_idx % 5 == 4
        };
        let part = &mut parts[is_test as usize];
        for s in start..start + keep {
            let slice = vol
                .slice(ndarray::s![s, .., ..])
                .to_owned()
                .into_dimensionality::<ndarray::Ix2>()
                .expect("volume slice is 2-d");
            let _ = (h, w);
            let resized = resize_area(&slice, target, target);
            let img = rescale_unit(&resized, &format!("{label} slice {s}"))?;
            part.images.push(img);
            part.sources.push(label.clone());
        }
    }
    let [train, test] = parts;
    if train.images.is_empty() {
        return Err(Error::Invariant("volume split produced an empty train set".into()));
    }
    Ok((train, test))
}

/// Mean isotropic total variation per image; a cheap edge-content summary.
pub fn mean_total_variation(images: &[Array2<f64>]) -> f64 {
    let mut acc = 0.0;
    for img in images {
        let (h, w) = img.dim();
        let mut tv = 0.0;
        for y in 0..h {
            for x in 0..w {
                let dy = if y + 1 < h { img[(y + 1, x)] - img[(y, x)] } else { 0.0 };
                let dx = if x + 1 < w { img[(y, x + 1)] - img[(y, x)] } else { 0.0 };
                tv += (dy * dy + dx * dx).sqrt();
            }
        }
        acc += tv;
    }
    acc / images.len() as f64
}
