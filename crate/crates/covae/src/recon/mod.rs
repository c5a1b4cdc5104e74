//! Reconstruction solvers: the generative MAP method and the comparison
//! suite (range search, decoder adaptation, early-stopped least squares,
//! total variation, plug-and-play ADMM), plus the shared data-fidelity
//! term and PSNR metric.

mod classical;
mod descent;
mod gen;

pub use classical::{reconstruct_least_squares, reconstruct_pnp_admm, reconstruct_tv};
pub use descent::{backtracking_descent, DescentOptions, DescentOutcome};
pub use gen::{
    gen_objective, gen_objective_x_grad, gen_objective_z_grad, reconstruct_gen_map,
    reconstruct_narnhofer, reconstruct_range,
};

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::CovMode;
use crate::mri::{adjoint, forward, Measurement};

/// Noise floor substituted for γ in the data term so noiseless
/// measurements keep a finite weight.
pub const GAMMA_FLOOR: f64 = 1e-4;

/// PSNR cap standing in for +∞ on (near-)identical images.
pub const PSNR_CAP_DB: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    GenMap,
    Range,
    Narnhofer,
    LeastSquares,
    Tv,
    PnpAdmm,
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gen_map" => Ok(Method::GenMap),
            "range" => Ok(Method::Range),
            "narnhofer" => Ok(Method::Narnhofer),
            "least_squares" => Ok(Method::LeastSquares),
            "tv" => Ok(Method::Tv),
            "pnp_admm" => Ok(Method::PnpAdmm),
            other => Err(Error::Config(format!(
                "unknown method {other:?} (expected gen_map, range, narnhofer, \
                 least_squares, tv, or pnp_admm)"
            ))),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::GenMap => "gen_map",
            Method::Range => "range",
            Method::Narnhofer => "narnhofer",
            Method::LeastSquares => "least_squares",
            Method::Tv => "tv",
            Method::PnpAdmm => "pnp_admm",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PnpConfig {
    pub sigma: f64,
    pub eta: f64,
    pub iters: usize,
}

impl Default for PnpConfig {
    fn default() -> Self {
        Self { sigma: 0.1, eta: 0.5, iters: 60 }
    }
}

/// Solver settings; each method reads the fields relevant to it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReconConfig {
    pub method: Method,
    /// Regularization weight λ on the generative term.
    pub lambda: f64,
    /// Latent weight μ.
    pub mu: f64,
    pub ablation_mode: CovMode,
    /// Isotropic residual variance used by identity mode.
    pub rho: f64,
    pub max_outer_iters: usize,
    pub tol: f64,
    /// TV weight α.
    pub tv_weight: f64,
    pub tv_iters: usize,
    pub pnp: PnpConfig,
    /// Early-stopping cap for least squares.
    pub ls_iters: usize,
    /// Latent-only iterations before decoder adaptation starts.
    pub narnhofer_phase1: usize,
    /// Step size of the decoder-weight updates in adaptation.
    pub narnhofer_lr: f64,
}

impl Default for ReconConfig {
    fn default() -> Self {
        Self {
            method: Method::GenMap,
            lambda: 1.0,
            mu: 0.1,
            ablation_mode: CovMode::Covar,
            rho: 0.01,
            max_outer_iters: 30,
            tol: 1e-6,
            tv_weight: 0.1,
            tv_iters: 500,
            pnp: PnpConfig::default(),
            ls_iters: 50,
            narnhofer_phase1: 1000,
            narnhofer_lr: 1e-3,
        }
    }
}

impl ReconConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda < 0.0 || self.mu < 0.0 || self.tv_weight < 0.0 {
            return Err(Error::Config("regularization weights must be nonnegative".into()));
        }
        if self.rho <= 0.0 || self.tol < 0.0 {
            return Err(Error::Config("rho must be positive and tol nonnegative".into()));
        }
        if self.pnp.sigma <= 0.0 || self.pnp.eta <= 0.0 {
            return Err(Error::Config("pnp sigma and eta must be positive".into()));
        }
        Ok(())
    }
}

/// One solver run: the image, the final latent vector for latent-space
/// methods, and the objective values in the order they were accepted.
#[derive(Debug, Clone)]
pub struct ReconResult {
    pub image: Array2<f64>,
    pub latent: Option<Array1<f64>>,
    pub objective_trace: Vec<f64>,
    pub iterations_used: usize,
    pub config: ReconConfig,
}

/// Effective noise scale of a measurement: its recorded std, floored.
pub fn gamma_of(meas: &Measurement) -> f64 {
    meas.noise_std.max(GAMMA_FLOOR)
}

/// Data fidelity (1 / 2γ²) ‖A x − y‖² with the complex ℓ2 norm.
pub fn data_term(x: &Array2<f64>, meas: &Measurement) -> Result<f64> {
    let g = gamma_of(meas);
    let fx = forward(x, &meas.mask)?;
    let ss: f64 = fx
        .iter()
        .zip(&meas.values)
        .map(|(a, b)| (a - b).norm_sqr())
        .sum();
    Ok(ss / (2.0 * g * g))
}

/// Gradient of [`data_term`] with respect to x: (1/γ²) Aᵀ(Ax − y).
pub fn data_term_grad(x: &Array2<f64>, meas: &Measurement) -> Result<Array2<f64>> {
    let g = gamma_of(meas);
    let fx = forward(x, &meas.mask)?;
    let r: Vec<_> = fx.iter().zip(&meas.values).map(|(a, b)| a - b).collect();
    Ok(adjoint(&r, &meas.mask)? / (g * g))
}

/// Peak signal-to-noise ratio in dB against a [0, 1]-ranged reference,
/// capped at [`PSNR_CAP_DB`]. Panics on shape mismatch.
pub fn psnr(x: &Array2<f64>, reference: &Array2<f64>) -> f64 {
    assert_eq!(x.dim(), reference.dim(), "psnr needs equal shapes");
    let mse = (x - reference).iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    if mse <= 0.0 {
        return PSNR_CAP_DB;
    }
    (10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB)
}
