//! Comparison sweeps: for every (noise, spokes) point and method, grid-search
//! the regularization parameters to maximize mean test PSNR (the same
//! optimistic oracle selection the evaluation protocol prescribes for all
//! methods equally), then record per-image scores, CSVs, and plots.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{CovMode, ModelParams};
use crate::mri::{acquire, make_radial_mask, Measurement};
use crate::recon::{
    psnr, reconstruct_gen_map, reconstruct_least_squares, reconstruct_narnhofer,
    reconstruct_pnp_admm, reconstruct_range, reconstruct_tv, Method, ReconConfig, ReconResult,
};
use crate::train::DenoiserParams;

use super::artifacts::load_dataset;
use super::manifest::RunManifest;
use super::plots::{line_plot_with_band, BandSeries};

/// Default logarithmic grids, one point per decade.
pub fn default_lambda_grid() -> Vec<f64> {
    vec![1e-4, 1e-3, 1e-2, 1e-1, 1.0, 10.0]
}

pub fn default_mu_grid() -> Vec<f64> {
    vec![1e-3, 1e-2, 1e-1, 1.0, 10.0]
}

pub fn default_alpha_grid() -> Vec<f64> {
    vec![1e-4, 1e-3, 1e-2, 1e-1, 1.0, 10.0]
}

/// One method entry of an experiment: which solver, which model artifacts,
/// and the parameter grid to search. Empty grids fall back to the
/// documented defaults for the parameters the method actually uses.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodSpec {
    pub method: Method,
    /// Display name; defaults to the method name (for the generative MAP
    /// method, "mean+<ablation mode>").
    pub label: Option<String>,
    pub ablation_mode: Option<CovMode>,
    pub checkpoint: Option<PathBuf>,
    pub denoiser: Option<PathBuf>,
    #[serde(default)]
    pub lambda_grid: Vec<f64>,
    #[serde(default)]
    pub mu_grid: Vec<f64>,
    #[serde(default)]
    pub alpha_grid: Vec<f64>,
    #[serde(default)]
    pub ls_iters_grid: Vec<usize>,
    /// Baseline solver settings (iteration budgets, tolerances, PnP
    /// constants…). Grid values override the matching fields per point.
    #[serde(default)]
    pub solver: ReconConfig,
}

impl MethodSpec {
    pub fn new(method: Method) -> Self {
        Self {
            method,
            label: None,
            ablation_mode: None,
            checkpoint: None,
            denoiser: None,
            lambda_grid: Vec::new(),
            mu_grid: Vec::new(),
            alpha_grid: Vec::new(),
            ls_iters_grid: Vec::new(),
            solver: ReconConfig::default(),
        }
    }

    pub fn label(&self) -> String {
        if let Some(l) = &self.label {
            return l.clone();
        }
        match self.method {
            Method::GenMap => format!("mean+{}", self.mode()),
            other => other.to_string(),
        }
    }

    fn mode(&self) -> CovMode {
        self.ablation_mode.unwrap_or(self.solver.ablation_mode)
    }

    /// The parameter grid for this method: the cartesian product of the
    /// grids its objective actually contains.
    fn grid(&self) -> Vec<GridPoint> {
        let or_default = |given: &Vec<f64>, def: Vec<f64>| {
            if given.is_empty() {
                def
            } else {
                given.clone()
            }
        };
        match self.method {
            Method::GenMap => {
                let lambdas = or_default(&self.lambda_grid, default_lambda_grid());
                let mus = or_default(&self.mu_grid, default_mu_grid());
                lambdas
                    .iter()
                    .flat_map(|&l| {
                        mus.iter().map(move |&m| GridPoint {
                            lambda: Some(l),
                            mu: Some(m),
                            ..GridPoint::default()
                        })
                    })
                    .collect()
            }
            Method::Range | Method::Narnhofer => or_default(&self.mu_grid, default_mu_grid())
                .into_iter()
                .map(|m| GridPoint { mu: Some(m), ..GridPoint::default() })
                .collect(),
            Method::Tv => or_default(&self.alpha_grid, default_alpha_grid())
                .into_iter()
                .map(|a| GridPoint { alpha: Some(a), ..GridPoint::default() })
                .collect(),
            Method::LeastSquares => {
                if self.ls_iters_grid.is_empty() {
                    vec![GridPoint::default()]
                } else {
                    self.ls_iters_grid
                        .iter()
                        .map(|&it| GridPoint { ls_iters: Some(it), ..GridPoint::default() })
                        .collect()
                }
            }
            Method::PnpAdmm => vec![GridPoint::default()],
        }
    }

    fn config_at(&self, point: &GridPoint) -> ReconConfig {
        let mut cfg = self.solver.clone();
        cfg.method = self.method;
        cfg.ablation_mode = self.mode();
        if let Some(l) = point.lambda {
            cfg.lambda = l;
        }
        if let Some(m) = point.mu {
            cfg.mu = m;
        }
        if let Some(a) = point.alpha {
            cfg.tv_weight = a;
        }
        if let Some(it) = point.ls_iters {
            cfg.ls_iters = it;
        }
        cfg
    }
}

/// One point of a method's regularization-parameter grid; axes a method
/// does not use stay `None`.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct GridPoint {
    pub lambda: Option<f64>,
    pub mu: Option<f64>,
    pub alpha: Option<f64>,
    pub ls_iters: Option<usize>,
}

impl GridPoint {
    pub fn describe(&self) -> String {
        let mut out = String::new();
        if let Some(l) = self.lambda {
            let _ = write!(out, "lambda={l} ");
        }
        if let Some(m) = self.mu {
            let _ = write!(out, "mu={m} ");
        }
        if let Some(a) = self.alpha {
            let _ = write!(out, "alpha={a} ");
        }
        if let Some(it) = self.ls_iters {
            let _ = write!(out, "ls_iters={it} ");
        }
        if out.is_empty() {
            out.push_str("defaults");
        }
        out.trim_end().to_string()
    }
}

/// A full comparison experiment: dataset, sweep axes, and methods.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub name: String,
    pub dataset: PathBuf,
    /// Number of test images used (0 = all images in the dataset).
    #[serde(default)]
    pub test_image_count: usize,
    #[serde(default)]
    pub seed: u64,
    pub spokes: Vec<usize>,
    pub noise: Vec<f64>,
    pub methods: Vec<MethodSpec>,
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        if self.spokes.is_empty() || self.noise.is_empty() {
            return Err(Error::Config("sweep axes must be nonempty".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::Config("at least one method is required".into()));
        }
        Ok(())
    }
}

/// One row of the emitted summary: the winning grid point per
/// (method, sweep point) with its scores.
#[derive(Debug, Clone, Serialize)]
pub struct SummaryRow {
    pub method: String,
    pub label: String,
    pub spokes: usize,
    pub noise: f64,
    pub chosen_params: String,
    pub mean_psnr: f64,
    pub std_psnr: f64,
    pub images_ok: usize,
    #[serde(skip)]
    pub per_image: Vec<(usize, f64)>,
}

#[derive(Debug)]
pub struct SweepReport {
    pub out_dir: PathBuf,
    pub summary: Vec<SummaryRow>,
    pub failures: Vec<String>,
}

impl SweepReport {
    /// Mean PSNR of a method label at one sweep point, if present.
    pub fn mean_psnr(&self, label: &str, spokes: usize, noise: f64) -> Option<f64> {
        self.summary
            .iter()
            .find(|r| r.label == label && r.spokes == spokes && (r.noise - noise).abs() < 1e-12)
            .map(|r| r.mean_psnr)
    }
}

struct LoadedMethod {
    spec: MethodSpec,
    label: String,
    model: Option<ModelParams>,
    denoiser: Option<DenoiserParams>,
}

impl LoadedMethod {
    fn load(spec: &MethodSpec) -> Result<Self> {
        let needs_model = matches!(
            spec.method,
            Method::GenMap | Method::Range | Method::Narnhofer
        );
        let model = if needs_model {
            let path = spec.checkpoint.as_ref().ok_or_else(|| {
                Error::Config(format!("method {} requires a checkpoint", spec.method))
            })?;
            Some(ModelParams::load(path)?)
        } else {
            None
        };
        let denoiser = if spec.method == Method::PnpAdmm {
            let path = spec.denoiser.as_ref().ok_or_else(|| {
                Error::Config("pnp_admm requires a denoiser checkpoint".into())
            })?;
            Some(DenoiserParams::load(path)?)
        } else {
            None
        };
        Ok(Self { spec: spec.clone(), label: spec.label(), model, denoiser })
    }

    fn with_model(spec: &MethodSpec, model: Option<ModelParams>, denoiser: Option<DenoiserParams>) -> Self {
        Self { spec: spec.clone(), label: spec.label(), model, denoiser }
    }

    fn reconstruct(&self, meas: &Measurement, cfg: &ReconConfig) -> Result<ReconResult> {
        let model = || {
            self.model
                .as_ref()
                .ok_or_else(|| Error::MissingArtifact(format!("{} has no model", self.label)))
        };
        let result = match self.spec.method {
            Method::GenMap => reconstruct_gen_map(meas, model()?, cfg)?,
            Method::Range => reconstruct_range(meas, model()?, cfg)?,
            Method::Narnhofer => reconstruct_narnhofer(meas, model()?, cfg)?,
            Method::LeastSquares => reconstruct_least_squares(meas, cfg)?,
            Method::Tv => reconstruct_tv(meas, cfg)?,
            Method::PnpAdmm => {
                let den = self.denoiser.as_ref().ok_or_else(|| {
                    Error::MissingArtifact(format!("{} has no denoiser", self.label))
                })?;
                let apply = |x: &Array2<f64>| den.apply(x);
                reconstruct_pnp_admm(meas, &apply, cfg)?
            }
        };
        // Descent methods must produce nonincreasing traces — hard invariant.
        if matches!(
            self.spec.method,
            Method::GenMap | Method::Range | Method::LeastSquares
        ) {
            check_monotone(&result.objective_trace, &self.label)?;
        }
        Ok(result)
    }
}

fn check_monotone(trace: &[f64], label: &str) -> Result<()> {
    for (i, w) in trace.windows(2).enumerate() {
        let slack = 1e-9 * w[0].abs().max(1.0);
        if w[1] > w[0] + slack {
            return Err(Error::Invariant(format!(
                "{label}: objective rose from {} to {} at step {i}",
                w[0], w[1]
            )));
        }
    }
    Ok(())
}

/// Seed for the measurement of image `img` at sweep point (`ni`, `si`):
/// stable across runs, distinct across points.
fn measurement_seed(base: u64, ni: usize, si: usize, img: usize) -> u64 {
    base.wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add((ni as u64) << 40)
        .wrapping_add((si as u64) << 20)
        .wrapping_add(img as u64)
}

/// Writes the exact data behind one band plot.
fn write_band_csv(path: &Path, x_name: &str, series: &[BandSeries]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Config(e.to_string()))?;
    w.write_record(["label", x_name, "mean_psnr", "std_psnr"])
        .map_err(|e| Error::Config(e.to_string()))?;
    for s in series {
        for i in 0..s.xs.len() {
            w.write_record([
                s.label.clone(),
                format!("{}", s.xs[i]),
                format!("{}", s.mean[i]),
                format!("{}", s.std[i]),
            ])
            .map_err(|e| Error::Config(e.to_string()))?;
        }
    }
    w.flush().map_err(|e| Error::Config(e.to_string()))?;
    Ok(())
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / values.len() as f64;
    (mean, var.sqrt())
}

/// Runs the experiment, writing `grid_log.csv`, `summary.csv`,
/// `per_image.csv`, plots, and a manifest into `out_dir`. Individual
/// reconstruction failures are recorded and skipped; the report carries
/// them so callers can exit nonzero.
pub fn run_sweep(spec: &ExperimentSpec, spec_text: &str, out_dir: &Path) -> Result<SweepReport> {
    let dataset = load_dataset(&spec.dataset)
        .map_err(|e| match e {
            Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => {
                Error::MissingArtifact(format!("dataset {}", spec.dataset.display()))
            }
            other => other,
        })?;
    run_sweep_on(spec, spec_text, out_dir, &dataset, None)
}

/// As [`run_sweep`], but with the dataset already in memory and optional
/// pre-loaded models keyed by method label (used by tests and callers that
/// just trained the models). Methods without a pre-loaded entry fall back
/// to their checkpoint path.
pub fn run_sweep_on(
    spec: &ExperimentSpec,
    spec_text: &str,
    out_dir: &Path,
    dataset: &Dataset,
    preloaded: Option<&[(String, ModelParams, Option<DenoiserParams>)]>,
) -> Result<SweepReport> {
    spec.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let keep = if spec.test_image_count == 0 {
        dataset.images.len()
    } else {
        spec.test_image_count.min(dataset.images.len())
    };
    let images = &dataset.images[..keep];
    if images.is_empty() {
        return Err(Error::Config("no test images".into()));
    }
    let n = images[0].nrows();

    let methods: Vec<LoadedMethod> = spec
        .methods
        .iter()
        .map(|m| {
            if let Some(pre) = preloaded {
                if let Some((_, model, den)) =
                    pre.iter().find(|(label, _, _)| *label == m.label())
                {
                    return Ok(LoadedMethod::with_model(m, Some(model.clone()), den.clone()));
                }
            }
            LoadedMethod::load(m)
        })
        .collect::<Result<_>>()?;

    let manifest = RunManifest::new(spec_text, spec.seed, Some(dataset.fingerprint()));
    manifest.write(out_dir.join("manifest.json"))?;

    let mut failures: Vec<String> = Vec::new();
    let mut summary: Vec<SummaryRow> = Vec::new();
    let mut grid_writer = csv::Writer::from_path(out_dir.join("grid_log.csv"))
        .map_err(|e| Error::Config(e.to_string()))?;
    grid_writer
        .write_record([
            "method", "label", "spokes", "noise", "params", "mean_psnr", "std_psnr", "images_ok",
        ])
        .map_err(|e| Error::Config(e.to_string()))?;

    for (ni, &noise) in spec.noise.iter().enumerate() {
        for (si, &spokes) in spec.spokes.iter().enumerate() {
            let mask = make_radial_mask(n, n, spokes)?;
            let measurements: Vec<Measurement> = images
                .iter()
                .enumerate()
                .map(|(ii, img)| {
                    acquire(img, &mask, noise, measurement_seed(spec.seed, ni, si, ii))
                })
                .collect::<Result<_>>()?;

            for method in &methods {
                let mut best: Option<(f64, GridPoint, Vec<(usize, f64)>)> = None;
                for point in method.spec.grid() {
                    let cfg = method.spec.config_at(&point);
                    let mut scores: Vec<(usize, f64)> = Vec::with_capacity(images.len());
                    for (ii, meas) in measurements.iter().enumerate() {
                        match method.reconstruct(meas, &cfg) {
                            Ok(res) => scores.push((ii, psnr(&res.image, &images[ii]))),
                            Err(e) => failures.push(format!(
                                "{} spokes={spokes} noise={noise} {} image={ii}: {e}",
                                method.label,
                                point.describe()
                            )),
                        }
                    }
                    let values: Vec<f64> = scores.iter().map(|(_, p)| *p).collect();
                    let (mean, std) = mean_std(&values);
                    grid_writer
                        .write_record([
                            method.spec.method.to_string(),
                            method.label.clone(),
                            spokes.to_string(),
                            format!("{noise}"),
                            point.describe(),
                            format!("{mean}"),
                            format!("{std}"),
                            scores.len().to_string(),
                        ])
                        .map_err(|e| Error::Config(e.to_string()))?;
                    let better = match &best {
                        None => !values.is_empty(),
                        Some((best_mean, _, _)) => !values.is_empty() && mean > *best_mean,
                    };
                    if better {
                        best = Some((mean, point, scores));
                    }
                }
                match best {
                    Some((mean, point, scores)) => {
                        let values: Vec<f64> = scores.iter().map(|(_, p)| *p).collect();
                        let (_, std) = mean_std(&values);
                        summary.push(SummaryRow {
                            method: method.spec.method.to_string(),
                            label: method.label.clone(),
                            spokes,
                            noise,
                            chosen_params: point.describe(),
                            mean_psnr: mean,
                            std_psnr: std,
                            images_ok: scores.len(),
                            per_image: scores,
                        });
                    }
                    None => failures.push(format!(
                        "{} spokes={spokes} noise={noise}: every grid point failed",
                        method.label
                    )),
                }
            }
        }
    }
    grid_writer.flush().map_err(|e| Error::Config(e.to_string()))?;

    let mut sw = csv::Writer::from_path(out_dir.join("summary.csv"))
        .map_err(|e| Error::Config(e.to_string()))?;
    sw.write_record([
        "method", "label", "spokes", "noise", "chosen_params", "mean_psnr", "std_psnr",
        "images_ok",
    ])
    .map_err(|e| Error::Config(e.to_string()))?;
    for r in &summary {
        sw.write_record([
            r.method.clone(),
            r.label.clone(),
            r.spokes.to_string(),
            format!("{}", r.noise),
            r.chosen_params.clone(),
            format!("{}", r.mean_psnr),
            format!("{}", r.std_psnr),
            r.images_ok.to_string(),
        ])
        .map_err(|e| Error::Config(e.to_string()))?;
    }
    sw.flush().map_err(|e| Error::Config(e.to_string()))?;

    let mut pw = csv::Writer::from_path(out_dir.join("per_image.csv"))
        .map_err(|e| Error::Config(e.to_string()))?;
    pw.write_record(["method", "label", "spokes", "noise", "image", "psnr"])
        .map_err(|e| Error::Config(e.to_string()))?;
    for r in &summary {
        for (ii, p) in &r.per_image {
            pw.write_record([
                r.method.clone(),
                r.label.clone(),
                r.spokes.to_string(),
                format!("{}", r.noise),
                ii.to_string(),
                format!("{p}"),
            ])
            .map_err(|e| Error::Config(e.to_string()))?;
        }
    }
    pw.flush().map_err(|e| Error::Config(e.to_string()))?;

    // Plots are derived artifacts: each PNG gets a CSV twin with exactly
    // the plotted series.
    if spec.spokes.len() >= 2 {
        for &noise in &spec.noise {
            let series: Vec<BandSeries> = methods
                .iter()
                .map(|m| {
                    let rows: Vec<&SummaryRow> = summary
                        .iter()
                        .filter(|r| r.label == m.label && (r.noise - noise).abs() < 1e-12)
                        .collect();
                    BandSeries {
                        label: m.label.clone(),
                        xs: rows.iter().map(|r| r.spokes as f64).collect(),
                        mean: rows.iter().map(|r| r.mean_psnr).collect(),
                        std: rows.iter().map(|r| r.std_psnr).collect(),
                    }
                })
                .filter(|s| !s.xs.is_empty())
                .collect();
            if !series.is_empty() {
                let stem = format!("psnr_vs_spokes_noise{noise}");
                write_band_csv(&out_dir.join(format!("{stem}.csv")), "spokes", &series)?;
                line_plot_with_band(
                    out_dir.join(format!("{stem}.png")),
                    &format!("{} (noise {noise})", spec.name),
                    "radial spokes",
                    "PSNR (dB)",
                    &series,
                )?;
            }
        }
    }
    if spec.noise.len() >= 2 {
        for &spokes in &spec.spokes {
            let series: Vec<BandSeries> = methods
                .iter()
                .map(|m| {
                    let rows: Vec<&SummaryRow> = summary
                        .iter()
                        .filter(|r| r.label == m.label && r.spokes == spokes)
                        .collect();
                    BandSeries {
                        label: m.label.clone(),
                        xs: rows.iter().map(|r| r.noise).collect(),
                        mean: rows.iter().map(|r| r.mean_psnr).collect(),
                        std: rows.iter().map(|r| r.std_psnr).collect(),
                    }
                })
                .filter(|s| !s.xs.is_empty())
                .collect();
            if !series.is_empty() {
                let stem = format!("psnr_vs_noise_spokes{spokes}");
                write_band_csv(&out_dir.join(format!("{stem}.csv")), "noise", &series)?;
                line_plot_with_band(
                    out_dir.join(format!("{stem}.png")),
                    &format!("{} ({spokes} spokes)", spec.name),
                    "measurement noise std",
                    "PSNR (dB)",
                    &series,
                )?;
            }
        }
    }

    if !failures.is_empty() {
        std::fs::write(out_dir.join("failures.txt"), failures.join("\n"))?;
    }
    Ok(SweepReport { out_dir: out_dir.to_path_buf(), summary, failures })
}
