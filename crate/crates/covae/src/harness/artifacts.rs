//! File formats for datasets, measurements, and reconstruction results,
//! all built on the container format.

use std::path::Path;

use ndarray::{Array1, Array2, Array3, Axis};
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::container::Container;
use super::tensor_file::write_tensor;
use crate::data::{Dataset, Provenance, Split};
use crate::error::{Error, Result};
use crate::mri::{Measurement, SamplingMask};
use crate::recon::ReconResult;

fn path_str(path: &Path) -> String {
    path.display().to_string()
}

fn meta_field<T: serde::de::DeserializeOwned>(
    meta: &serde_json::Value,
    key: &str,
    path: &Path,
) -> Result<T> {
    let v = meta.get(key).ok_or_else(|| Error::Corrupt {
        path: path_str(path),
        reason: format!("metadata is missing {key:?}"),
    })?;
    serde_json::from_value(v.clone()).map_err(|e| Error::Corrupt {
        path: path_str(path),
        reason: format!("metadata field {key:?}: {e}"),
    })
}

fn expect_kind(meta: &serde_json::Value, kind: &str, path: &Path) -> Result<()> {
    let found: String = meta_field(meta, "kind", path)?;
    if found != kind {
        return Err(Error::Corrupt {
            path: path_str(path),
            reason: format!("expected a {kind} file, found kind {found:?}"),
        });
    }
    Ok(())
}

/// Saves a dataset as a single (N, H, W) tensor plus split/provenance
/// metadata and the per-image source labels.
pub fn save_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    if ds.images.is_empty() {
        return Err(Error::Invariant("refusing to save an empty dataset".into()));
    }
    let (h, w) = ds.images[0].dim();
    let mut stack = Array3::zeros((ds.images.len(), h, w));
    for (i, img) in ds.images.iter().enumerate() {
        if img.dim() != (h, w) {
            return Err(Error::ShapeMismatch(format!(
                "image {i} is {:?}, expected {:?}",
                img.dim(),
                (h, w)
            )));
        }
        stack.index_axis_mut(Axis(0), i).assign(img);
    }
    let mut c = Container::new(json!({
        "kind": "dataset",
        "split": ds.split,
        "provenance": ds.provenance,
        "sources": ds.sources,
        "fingerprint": format!("{:016x}", ds.fingerprint()),
    }));
    c.push("images", stack);
    c.save(path)
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let c = Container::load(path)?;
    expect_kind(&c.meta, "dataset", path)?;
    let split: Split = meta_field(&c.meta, "split", path)?;
    let provenance: Provenance = meta_field(&c.meta, "provenance", path)?;
    let sources: Vec<String> = meta_field(&c.meta, "sources", path)?;
    let stack = c.require("images")?.as_f64()?;
    if stack.ndim() != 3 {
        return Err(Error::Corrupt {
            path: path_str(path),
            reason: format!("images tensor has rank {}, expected 3", stack.ndim()),
        });
    }
    let images: Vec<Array2<f64>> = stack
        .axis_iter(Axis(0))
        .map(|img| {
            img.into_dimensionality::<ndarray::Ix2>()
                .expect("rank checked above")
                .to_owned()
        })
        .collect();
    Ok(Dataset { images, split, provenance, sources })
}

pub fn save_measurement(meas: &Measurement, path: impl AsRef<Path>) -> Result<()> {
    let mut c = Container::new(json!({
        "kind": "measurement",
        "mask_kind": meas.mask.kind(),
        "noise_std": meas.noise_std,
    }));
    c.push("values", Array1::from_vec(meas.values.clone()));
    c.push("keep", meas.mask.keep().clone());
    c.save(path)
}

pub fn load_measurement(path: impl AsRef<Path>) -> Result<Measurement> {
    let path = path.as_ref();
    let c = Container::load(path)?;
    expect_kind(&c.meta, "measurement", path)?;
    let mask_kind = meta_field(&c.meta, "mask_kind", path)?;
    let noise_std: f64 = meta_field(&c.meta, "noise_std", path)?;
    let keep = c
        .require("keep")?
        .as_bool()?
        .clone()
        .into_dimensionality::<ndarray::Ix2>()
        .map_err(|_| Error::Corrupt {
            path: path_str(path),
            reason: "keep tensor is not rank 2".into(),
        })?;
    let mask = SamplingMask::from_parts(mask_kind, keep)?;
    let values = c.require("values")?.as_c64()?.iter().copied().collect::<Vec<_>>();
    if values.len() != mask.kept_count() {
        return Err(Error::Corrupt {
            path: path_str(path),
            reason: format!(
                "{} stored values but the mask keeps {} frequencies",
                values.len(),
                mask.kept_count()
            ),
        });
    }
    Ok(Measurement { values, mask, noise_std })
}

/// Sidecar metadata written next to a reconstructed image.
#[derive(Debug, Serialize, Deserialize)]
pub struct ReconResultMeta {
    pub config: crate::recon::ReconConfig,
    pub iterations_used: usize,
    pub objective_trace: Vec<f64>,
    /// PSNR against ground truth when the caller knows it.
    pub psnr_db: Option<f64>,
}

/// Writes `<stem>.cvrt` (the image) and `<stem>.json` (trace + config);
/// returns the two paths.
pub fn save_recon_result(
    result: &ReconResult,
    psnr_db: Option<f64>,
    dir: impl AsRef<Path>,
    stem: &str,
) -> Result<(std::path::PathBuf, std::path::PathBuf)> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let image_path = dir.join(format!("{stem}.cvrt"));
    let meta_path = dir.join(format!("{stem}.json"));
    write_tensor(&image_path, &result.image.clone().into())?;
    let meta = ReconResultMeta {
        config: result.config.clone(),
        iterations_used: result.iterations_used,
        objective_trace: result.objective_trace.clone(),
        psnr_db,
    };
    let text = serde_json::to_string_pretty(&meta).map_err(|e| Error::Config(e.to_string()))?;
    std::fs::write(&meta_path, text)?;
    Ok((image_path, meta_path))
}
