//! Solvers built on the generative model: the MAP method with the
//! structured-covariance regularizer, plain range search, and range search
//! with decoder adaptation.

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::model::{CovMode, ModelParams, Stage};
use crate::mri::{adjoint, forward, Measurement};
use crate::nn::Adam;
use crate::sparse_gaussian::{nll, CholFactor};

use super::{
    backtracking_descent, data_term, data_term_grad, DescentOptions, ReconConfig, ReconResult,
};

/// Steps spent in each variable block per outer iteration.
const INNER_BUDGET: usize = 10;

fn check_setup(meas: &Measurement, params: &ModelParams, cfg: &ReconConfig) -> Result<()> {
    cfg.validate()?;
    let n = params.arch.image;
    if meas.mask.height() != n || meas.mask.width() != n {
        return Err(Error::ShapeMismatch(format!(
            "mask is {}x{}, model expects {n}x{n}",
            meas.mask.height(),
            meas.mask.width()
        )));
    }
    if cfg.lambda > 0.0
        && cfg.ablation_mode != CovMode::Identity
        && params.stage != Stage::CovarianceTrained
    {
        return Err(Error::Stage(format!(
            "{} mode needs a covariance-trained model",
            cfg.ablation_mode
        )));
    }
    Ok(())
}

/// MAP objective: data_term(x, y) + λ ( nll(x, G(z), Σ(z)) + (μ/2) ‖z‖² ).
/// With λ = 0 the generative part (and the model stage) is irrelevant.
pub fn gen_objective(
    x: &Array2<f64>,
    z: &Array1<f64>,
    meas: &Measurement,
    params: &ModelParams,
    cfg: &ReconConfig,
) -> Result<f64> {
    let data = data_term(x, meas)?;
    if cfg.lambda == 0.0 {
        return Ok(data);
    }
    let res = params.residual_nll(x, z, cfg.ablation_mode, cfg.rho)?;
    Ok(data + cfg.lambda * (res + cfg.mu / 2.0 * z.iter().map(|v| v * v).sum::<f64>()))
}

/// [`gen_objective`] and its gradient with respect to z at fixed x.
pub fn gen_objective_z_grad(
    x: &Array2<f64>,
    z: &Array1<f64>,
    meas: &Measurement,
    params: &ModelParams,
    cfg: &ReconConfig,
) -> Result<(f64, Array1<f64>)> {
    let data = data_term(x, meas)?;
    if cfg.lambda == 0.0 {
        return Ok((data, Array1::zeros(z.len())));
    }
    let (res, gres) = params.residual_nll_z_grad(x, z, cfg.ablation_mode, cfg.rho)?;
    let value = data + cfg.lambda * (res + cfg.mu / 2.0 * z.iter().map(|v| v * v).sum::<f64>());
    let grad = cfg.lambda * (gres + cfg.mu * z);
    Ok((value, grad))
}

/// [`gen_objective`] and its gradient with respect to x at fixed z.
pub fn gen_objective_x_grad(
    x: &Array2<f64>,
    z: &Array1<f64>,
    meas: &Measurement,
    params: &ModelParams,
    cfg: &ReconConfig,
) -> Result<(f64, Array2<f64>)> {
    let data = data_term(x, meas)?;
    let gdata = data_term_grad(x, meas)?;
    if cfg.lambda == 0.0 {
        return Ok((data, gdata));
    }
    let (mean, factor) = params.residual_model(z, cfg.ablation_mode)?;
    let res = fixed_nll(x, &mean, factor.as_ref(), cfg.rho)?;
    let gres = fixed_nll_grad_x(x, &mean, factor.as_ref(), cfg.rho)?;
    let value = data + cfg.lambda * (res + cfg.mu / 2.0 * z.iter().map(|v| v * v).sum::<f64>());
    Ok((value, gdata + cfg.lambda * &gres))
}

/// nll at a frozen residual model (mean, optional factor).
fn fixed_nll(
    x: &Array2<f64>,
    mean: &Array2<f64>,
    factor: Option<&CholFactor>,
    rho: f64,
) -> Result<f64> {
    match factor {
        None => Ok((x - mean).iter().map(|v| v * v).sum::<f64>() / (2.0 * rho)),
        Some(f) => nll(x, mean, f),
    }
}

fn fixed_nll_grad_x(
    x: &Array2<f64>,
    mean: &Array2<f64>,
    factor: Option<&CholFactor>,
    rho: f64,
) -> Result<Array2<f64>> {
    let r = x - mean;
    match factor {
        None => Ok(r / rho),
        Some(f) => f.apply(&f.apply_transpose(&r)?),
    }
}

fn divergence(context: &str, trace: &[f64]) -> Error {
    let tail: Vec<f64> = trace.iter().rev().take(4).rev().copied().collect();
    Error::Divergence(format!("{context}; last objective values {tail:?}"))
}

/// MAP reconstruction by alternating block descent: from x₀ = adjoint(y)
/// and z₀ = encode(x₀).mu, each outer iteration descends the latent block
/// then the image block until the joint relative decrease falls below
/// `tol` or `max_outer_iters` is reached.
pub fn reconstruct_gen_map(
    meas: &Measurement,
    params: &ModelParams,
    cfg: &ReconConfig,
) -> Result<ReconResult> {
    check_setup(meas, params, cfg)?;
    let mut x = adjoint(&meas.values, &meas.mask)?;
    let mut z = params.encode(&x)?.mu;
    let mut trace = vec![gen_objective(&x, &z, meas, params, cfg)?];
    if !trace[0].is_finite() {
        return Err(divergence("MAP objective non-finite at initialization", &trace));
    }
    let inner = DescentOptions { max_iters: INNER_BUDGET, tol: cfg.tol };
    let mut outer_used = 0;
    for _ in 0..cfg.max_outer_iters {
        outer_used += 1;
        let start = *trace.last().expect("trace nonempty");

        // Latent block.
        let xc = x.clone();
        let out = backtracking_descent(
            |zc| gen_objective(&xc, zc, meas, params, cfg).unwrap_or(f64::NAN),
            |zc| match gen_objective_z_grad(&xc, zc, meas, params, cfg) {
                Ok((_, g)) => g,
                Err(_) => Array1::from_elem(zc.len(), f64::NAN),
            },
            z,
            &inner,
        );
        z = out.x;
        trace.extend_from_slice(&out.trace[1..]);

        // Image block against the frozen residual model.
        let reg = if cfg.lambda > 0.0 {
            let (mean, factor) = params.residual_model(&z, cfg.ablation_mode)?;
            Some((mean, factor))
        } else {
            None
        };
        let zsq = z.iter().map(|v| v * v).sum::<f64>();
        let obj = |xc: &Array2<f64>| -> f64 {
            let Ok(data) = data_term(xc, meas) else { return f64::NAN };
            match &reg {
                None => data,
                Some((mean, factor)) => match fixed_nll(xc, mean, factor.as_ref(), cfg.rho) {
                    Ok(res) => data + cfg.lambda * (res + cfg.mu / 2.0 * zsq),
                    Err(_) => f64::NAN,
                },
            }
        };
        let out = backtracking_descent(
            obj,
            |xc| {
                let Ok(gdata) = data_term_grad(xc, meas) else {
                    return Array2::from_elem(xc.dim(), f64::NAN);
                };
                match &reg {
                    None => gdata,
                    Some((mean, factor)) => {
                        match fixed_nll_grad_x(xc, mean, factor.as_ref(), cfg.rho) {
                            Ok(gres) => gdata + cfg.lambda * &gres,
                            Err(_) => Array2::from_elem(xc.dim(), f64::NAN),
                        }
                    }
                }
            },
            x,
            &inner,
        );
        x = out.x;
        trace.extend_from_slice(&out.trace[1..]);

        let end = *trace.last().expect("trace nonempty");
        if !end.is_finite() {
            return Err(divergence("MAP objective diverged", &trace));
        }
        if start - end < cfg.tol * start.abs().max(1e-12) {
            break;
        }
    }
    Ok(ReconResult {
        image: x,
        latent: Some(z),
        objective_trace: trace,
        iterations_used: outer_used,
        config: cfg.clone(),
    })
}

/// Misfit of the decoded image against the measurement, ½ ‖A G(z) − y‖²
/// (unweighted), optionally with its z-gradient.
fn decoder_misfit(
    params: &ModelParams,
    weights: &[f64],
    z: &Array1<f64>,
    meas: &Measurement,
) -> f64 {
    let (g3, _) = params.mean_net.forward(weights, z, 0.0, None);
    let n = params.arch.image;
    let g = g3.into_shape_with_order((n, n)).expect("single channel");
    match forward(&g, &meas.mask) {
        Ok(fx) => {
            fx.iter()
                .zip(&meas.values)
                .map(|(a, b)| (a - b).norm_sqr())
                .sum::<f64>()
                / 2.0
        }
        Err(_) => f64::NAN,
    }
}

/// z-gradient of the misfit; also accumulates the decoder-weight gradient
/// when a buffer is supplied (used by the adaptation phase).
fn decoder_misfit_grad(
    params: &ModelParams,
    weights: &[f64],
    z: &Array1<f64>,
    meas: &Measurement,
    mut grad_weights: Option<&mut [f64]>,
) -> Array1<f64> {
    let (g3, cache) = params.mean_net.forward(weights, z, 0.0, None);
    let n = params.arch.image;
    let g = g3.into_shape_with_order((n, n)).expect("single channel");
    let Ok(fx) = forward(&g, &meas.mask) else {
        return Array1::from_elem(z.len(), f64::NAN);
    };
    let r: Vec<_> = fx.iter().zip(&meas.values).map(|(a, b)| a - b).collect();
    let Ok(gimg) = adjoint(&r, &meas.mask) else {
        return Array1::from_elem(z.len(), f64::NAN);
    };
    let gimg3 = gimg
        .into_shape_with_order((1, n, n))
        .expect("image becomes one-channel map");
    let mut scratch;
    let gw: &mut [f64] = match grad_weights.as_deref_mut() {
        Some(buf) => buf,
        None => {
            scratch = vec![0.0; params.mean_net.n_params];
            &mut scratch
        }
    };
    params.mean_net.backward(weights, &cache, &gimg3, gw)
}

/// Range search: min over z of ½ ‖A G(z) − y‖² + μ ‖z‖², initialized at
/// the encoding of the adjoint. The output is G(z*) by construction.
pub fn reconstruct_range(
    meas: &Measurement,
    params: &ModelParams,
    cfg: &ReconConfig,
) -> Result<ReconResult> {
    cfg.validate()?;
    let x0 = adjoint(&meas.values, &meas.mask)?;
    let z0 = params.encode(&x0)?.mu;
    let opts = DescentOptions { max_iters: cfg.max_outer_iters * INNER_BUDGET, tol: cfg.tol };
    let out = backtracking_descent(
        |z| {
            decoder_misfit(params, &params.mean_decoder, z, meas)
                + cfg.mu * z.iter().map(|v| v * v).sum::<f64>()
        },
        |z| {
            decoder_misfit_grad(params, &params.mean_decoder, z, meas, None) + 2.0 * cfg.mu * z
        },
        z0,
        &opts,
    );
    if !out.trace.last().expect("trace nonempty").is_finite() {
        return Err(divergence("range-search objective diverged", &out.trace));
    }
    let image = params.decode_mean(&out.x)?;
    Ok(ReconResult {
        image,
        latent: Some(out.x),
        objective_trace: out.trace,
        iterations_used: out.iterations,
        config: cfg.clone(),
    })
}

/// Range search followed by decoder adaptation: phase 1 descends the data
/// misfit in z alone (`narnhofer_phase1` iterations); phase 2 alternates
/// z-descent with adaptive first-order updates of a private copy of the
/// decoder weights. Returns the best iterate seen; the model's own weights
/// are never modified.
pub fn reconstruct_narnhofer(
    meas: &Measurement,
    params: &ModelParams,
    cfg: &ReconConfig,
) -> Result<ReconResult> {
    cfg.validate()?;
    let x0 = adjoint(&meas.values, &meas.mask)?;
    let z0 = params.encode(&x0)?.mu;

    // Phase 1: latent-only data descent.
    let phase1 = backtracking_descent(
        |z| decoder_misfit(params, &params.mean_decoder, z, meas),
        |z| decoder_misfit_grad(params, &params.mean_decoder, z, meas, None),
        z0,
        &DescentOptions { max_iters: cfg.narnhofer_phase1, tol: cfg.tol },
    );
    let mut trace = phase1.trace.clone();
    if !trace.last().expect("trace nonempty").is_finite() {
        return Err(divergence("adaptation phase 1 diverged", &trace));
    }

    // Phase 2: alternate z-steps with decoder-weight updates on a clone.
    let mut z = phase1.x;
    let mut theta = params.mean_decoder.clone();
    let mut best_val = *trace.last().expect("trace nonempty");
    let mut best = (z.clone(), theta.clone());
    let mut adam = Adam::new(params.mean_net.n_params, cfg.narnhofer_lr);
    let inner = DescentOptions { max_iters: INNER_BUDGET, tol: cfg.tol };
    for _ in 0..cfg.max_outer_iters {
        let theta_now = theta.clone();
        let out = backtracking_descent(
            |zc| decoder_misfit(params, &theta_now, zc, meas),
            |zc| decoder_misfit_grad(params, &theta_now, zc, meas, None),
            z,
            &inner,
        );
        z = out.x;
        trace.extend_from_slice(&out.trace[1..]);
        if *trace.last().expect("trace nonempty") < best_val {
            best_val = *trace.last().expect("trace nonempty");
            best = (z.clone(), theta.clone());
        }
        for _ in 0..INNER_BUDGET {
            let mut gtheta = vec![0.0; params.mean_net.n_params];
            decoder_misfit_grad(params, &theta, &z, meas, Some(&mut gtheta));
            adam.step(&mut theta, &gtheta);
            let val = decoder_misfit(params, &theta, &z, meas);
            trace.push(val);
            if val < best_val {
                best_val = val;
                best = (z.clone(), theta.clone());
            }
        }
        if !trace.last().expect("trace nonempty").is_finite() {
            return Err(divergence("adaptation phase 2 diverged", &trace));
        }
    }

    let (z_best, theta_best) = best;
    let n = params.arch.image;
    let (g3, _) = params.mean_net.forward(&theta_best, &z_best, 0.0, None);
    let image = g3.into_shape_with_order((n, n)).expect("single channel");
    Ok(ReconResult {
        image,
        latent: Some(z_best),
        objective_trace: trace,
        iterations_used: phase1.iterations + cfg.max_outer_iters,
        config: cfg.clone(),
    })
}
