//! TOML configuration schemas for the command-line driver. Every
//! subcommand accepts `--config <file>`; flags override file values.

use std::path::{Path, PathBuf};

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ArchConfig, CovMode};
use crate::mri::SamplingMask;
use crate::recon::ReconConfig;
use crate::train::{DenoiserConfig, TrainConfig};

/// Reads and parses a TOML config, returning the value plus the raw text
/// (the text is hashed into run manifests).
pub fn load_toml<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<(T, String)> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingArtifact(format!("config file {}", path.display()))
        } else {
            Error::Io(e)
        }
    })?;
    let value = toml::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    Ok((value, text))
}

/// Architecture selection: a preset name (`"desk"`, `"paper"`) or a full
/// inline table.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ArchChoice {
    Preset(String),
    Custom(ArchConfig),
}

impl Default for ArchChoice {
    fn default() -> Self {
        ArchChoice::Preset("desk".into())
    }
}

impl ArchChoice {
    pub fn resolve(&self) -> Result<ArchConfig> {
        match self {
            ArchChoice::Preset(name) => match name.as_str() {
                "desk" => Ok(ArchConfig::desk()),
                "paper" => Ok(ArchConfig::paper()),
                other => Err(Error::Config(format!(
                    "unknown architecture preset {other:?} (expected \"desk\" or \"paper\")"
                ))),
            },
            ArchChoice::Custom(cfg) => {
                cfg.validate()?;
                Ok(cfg.clone())
            }
        }
    }
}

/// `make-data`: synthesize phantoms or ingest external magnitude volumes.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataFileConfig {
    /// "phantom" (synthetic ellipse images) or "ingest" (directory of
    /// magnitude volume tensor files).
    #[serde(default = "default_data_kind")]
    pub kind: String,
    #[serde(default = "default_image_size")]
    pub image: usize,
    #[serde(default = "default_train_count")]
    pub train_count: usize,
    #[serde(default = "default_test_count")]
    pub test_count: usize,
    #[serde(default)]
    pub seed: u64,
    /// Directory of volumes, required for kind = "ingest".
    pub source_dir: Option<PathBuf>,
    pub out_train: PathBuf,
    pub out_test: PathBuf,
}

fn default_data_kind() -> String {
    "phantom".into()
}
fn default_image_size() -> usize {
    32
}
fn default_train_count() -> usize {
    256
}
fn default_test_count() -> usize {
    20
}

/// `train`: exactly one of `[vae]` / `[denoiser]` selects what to train.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainFileConfig {
    pub dataset: PathBuf,
    #[serde(default)]
    pub arch: ArchChoice,
    pub vae: Option<TrainConfig>,
    pub denoiser: Option<DenoiserTrainSection>,
    /// Checkpoint output path.
    pub out: PathBuf,
    /// Loss-curve CSV output path.
    pub curves: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DenoiserTrainSection {
    #[serde(default = "default_noise_level")]
    pub noise_level: f64,
    #[serde(flatten)]
    pub config: DenoiserConfig,
}

fn default_noise_level() -> f64 {
    0.05
}

impl TrainFileConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vae.is_some() == self.denoiser.is_some() {
            return Err(Error::Config(
                "exactly one of [vae] and [denoiser] must be present".into(),
            ));
        }
        Ok(())
    }
}

/// Sampling-mask description used by `reconstruct` when acquiring a fresh
/// measurement from a dataset image.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskSpecConfig {
    /// "radial", "cartesian", or "full".
    pub kind: String,
    #[serde(default = "default_spokes")]
    pub spokes: usize,
    #[serde(default = "default_center_rows")]
    pub center_rows: usize,
    #[serde(default = "default_row_prob")]
    pub row_prob: f64,
}

fn default_spokes() -> usize {
    25
}
fn default_center_rows() -> usize {
    4
}
fn default_row_prob() -> f64 {
    0.3
}

impl MaskSpecConfig {
    pub fn build(&self, h: usize, w: usize, seed: u64) -> Result<SamplingMask> {
        match self.kind.as_str() {
            "radial" => crate::mri::make_radial_mask(h, w, self.spokes),
            "cartesian" => {
                crate::mri::make_cartesian_mask(h, w, self.center_rows, self.row_prob, seed)
            }
            "full" => Ok(crate::mri::full_mask(h, w)),
            other => Err(Error::Config(format!(
                "unknown mask kind {other:?} (expected radial, cartesian, or full)"
            ))),
        }
    }
}

/// `reconstruct`: one measurement (from file, or acquired on the fly from
/// a dataset image), one method.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReconFileConfig {
    /// Model checkpoint, required by the generative methods.
    pub checkpoint: Option<PathBuf>,
    /// Denoiser checkpoint, required by pnp_admm.
    pub denoiser: Option<PathBuf>,
    /// Pre-acquired measurement file; mutually exclusive with `dataset`.
    pub measurement: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    #[serde(default)]
    pub image_index: usize,
    pub mask: Option<MaskSpecConfig>,
    #[serde(default)]
    pub noise: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub solver: ReconConfig,
    pub out_dir: PathBuf,
}

impl ReconFileConfig {
    pub fn validate(&self) -> Result<()> {
        match (&self.measurement, &self.dataset) {
            (Some(_), Some(_)) => Err(Error::Config(
                "give either a measurement file or a dataset, not both".into(),
            )),
            (None, None) => Err(Error::Config(
                "a measurement file or a dataset image is required".into(),
            )),
            (None, Some(_)) if self.mask.is_none() => Err(Error::Config(
                "acquiring from a dataset needs a [mask] table".into(),
            )),
            _ => Ok(()),
        }
    }
}

/// `introspect`: covariance-row visualizations for chosen pixels.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntrospectFileConfig {
    pub checkpoint: PathBuf,
    /// Image source: a dataset (with `image_index`) or a raw tensor file.
    pub dataset: Option<PathBuf>,
    #[serde(default)]
    pub image_index: usize,
    pub image: Option<PathBuf>,
    pub pixels: Vec<[usize; 2]>,
    pub out_dir: PathBuf,
}

impl IntrospectFileConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dataset.is_some() == self.image.is_some() {
            return Err(Error::Config(
                "give either a dataset or an image tensor, not both".into(),
            ));
        }
        if self.pixels.is_empty() {
            return Err(Error::Config("at least one pixel is required".into()));
        }
        Ok(())
    }
}

/// `sample`: draw latent vectors from the prior and decode them.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleFileConfig {
    pub checkpoint: PathBuf,
    #[serde(default = "default_sample_count")]
    pub count: usize,
    #[serde(default)]
    pub seed: u64,
    /// Residual model used when sampling: identity, diagonal, or covar.
    #[serde(default = "default_sample_mode")]
    pub mode: CovMode,
    #[serde(default = "default_rho")]
    pub rho: f64,
    pub out_dir: PathBuf,
}

fn default_sample_count() -> usize {
    9
}
fn default_sample_mode() -> CovMode {
    CovMode::Covar
}
fn default_rho() -> f64 {
    0.01
}
