//! Two-stage model training and the plug-and-play denoiser.
//!
//! Stage 1 fits the encoder and mean decoder under an isotropic residual
//! model (variance `rho`). Stage 2 freezes both and fits the covariance
//! decoder under the structured noise loss; a small uniform jitter is added
//! to the images there so the all-black background has nonzero variance and
//! the log-determinant stays bounded. The `diagonal` ablation trains the
//! covariance decoder with its off-diagonal channels masked to zero.

use ndarray::{Array1, Array2, Array3};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::harness::Container;
use crate::model::{
    sample_latent, ArchConfig, CovMode, EncoderOutput, ModelParams, Stage,
};
use crate::nn::{relu, relu_backward, Adam, Conv2d, Conv2dCache, ParamAlloc};
use crate::sparse_gaussian::{diag_activation_grad, nll, nll_grad_weights, CholFactor};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Isotropic residual variance in stage 1.
    pub rho: f64,
    pub epochs_stage1: usize,
    pub epochs_stage2: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Amplitude of the uniform background jitter added in stage 2.
    pub background_jitter: f64,
    pub seed: u64,
    /// `identity` skips stage 2; `diagonal` masks off-diagonal channels.
    pub ablation_mode: CovMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            rho: 0.01,
            epochs_stage1: 200,
            epochs_stage2: 200,
            batch_size: 16,
            learning_rate: 1e-4,
            background_jitter: 1e-3,
            seed: 0,
            ablation_mode: CovMode::Covar,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rho <= 0.0
            || self.learning_rate <= 0.0
            || self.background_jitter < 0.0
            || self.batch_size == 0
        {
            return Err(Error::Config(
                "training needs rho > 0, learning_rate > 0, jitter >= 0, batch_size >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// KL divergence from N(mu, diag(exp(log_var))) to the standard normal
/// prior: ½ Σ (mu² + exp(log_var) − 1 − log_var). Nonnegative, zero only
/// at the prior.
pub fn kl_term(enc: &EncoderOutput) -> f64 {
    enc.mu
        .iter()
        .zip(enc.log_var.iter())
        .map(|(&m, &lv)| m * m + lv.exp() - 1.0 - lv)
        .sum::<f64>()
        / 2.0
}

/// Gradients of [`kl_term`] with respect to (mu, log_var).
pub fn kl_grad(enc: &EncoderOutput) -> (Array1<f64>, Array1<f64>) {
    (enc.mu.clone(), enc.log_var.mapv(|lv| (lv.exp() - 1.0) / 2.0))
}

/// Stage-1 loss (constants dropped): ½ rho⁻¹ ‖x − G(z)‖² + KL, with
/// z = mu + exp(log_var/2) ⊙ u a single-sample latent estimate.
/// Deterministic given (params, x, u): dropout is a training-time detail
/// of [`train`] and is off here.
pub fn stage1_loss(
    params: &ModelParams,
    x: &Array2<f64>,
    u: &Array1<f64>,
    cfg: &TrainConfig,
) -> Result<f64> {
    stage1_step(params, x, u, cfg, None, None)
}

/// Stage-1 loss plus its analytic parameter gradients (encoder, mean
/// decoder), evaluated without dropout. Intended for gradient checks and
/// custom optimizers.
pub fn stage1_loss_grads(
    params: &ModelParams,
    x: &Array2<f64>,
    u: &Array1<f64>,
    cfg: &TrainConfig,
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let mut grad_enc = vec![0.0; params.encoder.len()];
    let mut grad_dec = vec![0.0; params.mean_decoder.len()];
    let loss = stage1_step(params, x, u, cfg, None, Some((&mut grad_enc, &mut grad_dec)))?;
    Ok((loss, grad_enc, grad_dec))
}

/// Shared forward(+backward) pass for stage 1. When gradient buffers are
/// given they receive accumulated parameter gradients; `dropout_rng`
/// additionally enables dropout for training steps.
fn stage1_step(
    params: &ModelParams,
    x: &Array2<f64>,
    u: &Array1<f64>,
    cfg: &TrainConfig,
    mut dropout_rng: Option<&mut ChaCha8Rng>,
    grads: Option<(&mut [f64], &mut [f64])>,
) -> Result<f64> {
    cfg.validate()?;
    let rate = if dropout_rng.is_some() { params.arch.dropout } else { 0.0 };
    let (enc, enc_cache) =
        params
            .enc_net
            .forward(&params.encoder, x, rate, dropout_rng.as_deref_mut());
    let z = sample_latent(&enc, u);
    let (g3, dec_cache) =
        params
            .mean_net
            .forward(&params.mean_decoder, &z, rate, dropout_rng.as_deref_mut());
    let (_, h, w) = g3.dim();
    let r = x - &g3.view().into_shape_with_order((h, w)).expect("single channel");
    let quad = r.iter().map(|v| v * v).sum::<f64>() / (2.0 * cfg.rho);
    let loss = quad + kl_term(&enc);

    if let Some((grad_enc, grad_dec)) = grads {
        // d loss / d G = (G − x) / rho.
        let gmean3 = (-&r / cfg.rho)
            .into_shape_with_order((1, h, w))
            .expect("image becomes one-channel map");
        let gz = params
            .mean_net
            .backward(&params.mean_decoder, &dec_cache, &gmean3, grad_dec);
        // z = mu + exp(lv/2) u: dz/dmu = 1, dz/dlv = exp(lv/2) u / 2.
        let (kl_mu, kl_lv) = kl_grad(&enc);
        let gmu = &gz + &kl_mu;
        let glv = &gz * &(enc.log_var.mapv(|lv| (lv / 2.0).exp()) * u / 2.0) + kl_lv;
        params
            .enc_net
            .backward(&params.encoder, &enc_cache, &gmu, &glv, grad_enc);
    }
    Ok(loss)
}

/// Stage-2 loss: nll(x, G(z), Sigma(z)) + KL with the encoder and mean
/// decoder frozen. In `diagonal` ablation the factor's off-diagonal
/// channels are forced to zero (and receive no gradient).
pub fn stage2_loss(
    params: &ModelParams,
    x: &Array2<f64>,
    u: &Array1<f64>,
    cfg: &TrainConfig,
) -> Result<f64> {
    stage2_step(params, x, u, cfg, None, None)
}

/// Stage-2 loss plus its analytic gradient with respect to the covariance
/// decoder parameters, evaluated without dropout.
pub fn stage2_loss_grads(
    params: &ModelParams,
    x: &Array2<f64>,
    u: &Array1<f64>,
    cfg: &TrainConfig,
) -> Result<(f64, Vec<f64>)> {
    let n = params
        .cov_decoder
        .as_ref()
        .ok_or_else(|| Error::Stage("stage 2 requires an attached covariance decoder".into()))?
        .len();
    let mut grad_cov = vec![0.0; n];
    let loss = stage2_step(params, x, u, cfg, None, Some(&mut grad_cov))?;
    Ok((loss, grad_cov))
}

fn stage2_step(
    params: &ModelParams,
    x: &Array2<f64>,
    u: &Array1<f64>,
    cfg: &TrainConfig,
    mut dropout_rng: Option<&mut ChaCha8Rng>,
    grad_cov: Option<&mut [f64]>,
) -> Result<f64> {
    cfg.validate()?;
    let cov_params = params
        .cov_decoder
        .as_deref()
        .ok_or_else(|| Error::Stage("stage 2 requires an attached covariance decoder".into()))?;
    let diagonal = cfg.ablation_mode == CovMode::Diagonal;

    // Frozen nets run in inference mode; only the covariance decoder sees
    // dropout.
    let enc = params.encode(x)?;
    let z = sample_latent(&enc, u);
    let mean = params.decode_mean(&z)?;

    let rate = if dropout_rng.is_some() { params.arch.dropout } else { 0.0 };
    let (raw3, cov_cache) = params
        .cov_net
        .forward(cov_params, &z, rate, dropout_rng.as_deref_mut());
    let mut raw = raw3.permuted_axes([1, 2, 0]).as_standard_layout().to_owned();
    let pattern = params.arch.pattern();
    let center = pattern.center_channel();
    if diagonal {
        for c in 0..pattern.offsets().len() {
            if c != center {
                raw.slice_mut(ndarray::s![.., .., c]).fill(0.0);
            }
        }
    }
    let factor = CholFactor::from_raw_channels(&raw, pattern, params.arch.diag_bound)?;
    let loss = nll(x, &mean, &factor)? + kl_term(&enc);

    if let Some(grad_cov) = grad_cov {
        let mut gw = nll_grad_weights(x, &mean, &factor)?;
        let n_channels = factor.pattern().offsets().len();
        for c in 0..n_channels {
            if c == center {
                for ((y, xx), g) in gw.slice_mut(ndarray::s![.., .., c]).indexed_iter_mut() {
                    *g *= diag_activation_grad(raw[(y, xx, c)], params.arch.diag_bound);
                }
            } else if diagonal {
                gw.slice_mut(ndarray::s![.., .., c]).fill(0.0);
            }
        }
        let graw3 = gw.permuted_axes([2, 0, 1]).as_standard_layout().to_owned();
        params.cov_net.backward(cov_params, &cov_cache, &graw3, grad_cov);
    }
    Ok(loss)
}

/// Model parameters plus the per-epoch mean training losses of each stage.
#[derive(Debug)]
pub struct TrainResult {
    pub params: ModelParams,
    pub stage1_curve: Vec<f64>,
    pub stage2_curve: Vec<f64>,
}

/// Per-item randomness for one gradient step, drawn sequentially so runs
/// are reproducible, then consumed in parallel.
struct ItemNoise {
    u: Array1<f64>,
    dropout_seed: u64,
    jitter: Option<Array2<f64>>,
}

fn draw_noise(
    rng: &mut ChaCha8Rng,
    latent: usize,
    image: usize,
    jitter: Option<f64>,
) -> ItemNoise {
    let u = Array1::from_shape_simple_fn(latent, || rng.sample(StandardNormal));
    let dropout_seed = rng.gen();
    let jitter = jitter.map(|amp| {
        Array2::from_shape_simple_fn((image, image), || rng.gen_range(0.0..amp))
    });
    ItemNoise { u, dropout_seed, jitter }
}

/// Two-stage training. Stage 1 fits encoder + mean decoder for
/// `epochs_stage1`; unless the ablation mode is `identity`, stage 2 then
/// attaches the covariance decoder and fits it for `epochs_stage2` with
/// the other networks frozen. Deterministic for a fixed seed.
pub fn train(dataset: &Dataset, arch: ArchConfig, cfg: &TrainConfig) -> Result<TrainResult> {
    cfg.validate()?;
    if dataset.images.is_empty() {
        return Err(Error::Config("training needs a nonempty dataset".into()));
    }
    for img in &dataset.images {
        if img.dim() != (arch.image, arch.image) {
            return Err(Error::ShapeMismatch(format!(
                "dataset image is {:?}, architecture expects {}x{}",
                img.dim(),
                arch.image,
                arch.image
            )));
        }
    }
    let mut params = ModelParams::init(arch, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5eed));
    let n = dataset.images.len();
    let latent = params.arch.latent;
    let image = params.arch.image;

    // Stage 1: encoder + mean decoder.
    let mut adam_enc = Adam::new(params.enc_net.n_params, cfg.learning_rate);
    let mut adam_dec = Adam::new(params.mean_net.n_params, cfg.learning_rate);
    let mut stage1_curve = Vec::with_capacity(cfg.epochs_stage1);
    for epoch in 0..cfg.epochs_stage1 {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut steps = 0;
        for batch in order.chunks(cfg.batch_size) {
            let noise: Vec<ItemNoise> = batch
                .iter()
                .map(|_| draw_noise(&mut rng, latent, image, None))
                .collect();
            let results: Vec<Result<(f64, Vec<f64>, Vec<f64>)>> = batch
                .par_iter()
                .zip(noise.par_iter())
                .map(|(&idx, noise)| {
                    let mut genc = vec![0.0; params.enc_net.n_params];
                    let mut gdec = vec![0.0; params.mean_net.n_params];
                    let mut drop_rng = ChaCha8Rng::seed_from_u64(noise.dropout_seed);
                    let loss = stage1_step(
                        &params,
                        &dataset.images[idx],
                        &noise.u,
                        cfg,
                        Some(&mut drop_rng),
                        Some((&mut genc, &mut gdec)),
                    )?;
                    Ok((loss, genc, gdec))
                })
                .collect();
            let mut genc = vec![0.0; params.enc_net.n_params];
            let mut gdec = vec![0.0; params.mean_net.n_params];
            let mut batch_loss = 0.0;
            for r in results {
                let (loss, ge, gd) = r?;
                batch_loss += loss;
                add_scaled(&mut genc, &ge, 1.0);
                add_scaled(&mut gdec, &gd, 1.0);
            }
            let scale = 1.0 / batch.len() as f64;
            batch_loss *= scale;
            if !batch_loss.is_finite() {
                return Err(Error::Divergence(format!(
                    "stage-1 loss became non-finite at epoch {epoch}"
                )));
            }
            scale_in_place(&mut genc, scale);
            scale_in_place(&mut gdec, scale);
            adam_enc.step(&mut params.encoder, &genc);
            adam_dec.step(&mut params.mean_decoder, &gdec);
            epoch_loss += batch_loss;
            steps += 1;
        }
        stage1_curve.push(epoch_loss / steps as f64);
    }

    // Stage 2: covariance decoder against frozen stage-1 weights.
    let mut stage2_curve = Vec::new();
    if cfg.ablation_mode != CovMode::Identity {
        params.attach_cov_decoder(cfg.seed.wrapping_add(1));
        stage2_curve = run_stage2_epochs(&mut params, dataset, cfg, &mut rng)?;
    }

    debug_assert_eq!(
        params.stage,
        if cfg.ablation_mode == CovMode::Identity {
            Stage::MeanTrained
        } else {
            Stage::CovarianceTrained
        }
    );
    Ok(TrainResult { params, stage1_curve, stage2_curve })
}

/// Attaches and fits a covariance decoder to an already mean-trained model,
/// leaving the encoder and mean decoder untouched. Lets several covariance
/// variants (`covar`, `diagonal`) share one first stage, which is valid
/// because stage 1 never reads the ablation mode.
pub fn train_stage2(
    base: &ModelParams,
    dataset: &Dataset,
    cfg: &TrainConfig,
) -> Result<TrainResult> {
    cfg.validate()?;
    if cfg.ablation_mode == CovMode::Identity {
        return Err(Error::Config(
            "stage 2 fits a covariance decoder; the identity mode has none".into(),
        ));
    }
    if dataset.images.is_empty() {
        return Err(Error::Config("training needs a nonempty dataset".into()));
    }
    for img in &dataset.images {
        if img.dim() != (base.arch.image, base.arch.image) {
            return Err(Error::ShapeMismatch(format!(
                "dataset image is {:?}, architecture expects {}x{}",
                img.dim(),
                base.arch.image,
                base.arch.image
            )));
        }
    }
    let mut params = base.to_mean_stage();
    params.attach_cov_decoder(cfg.seed.wrapping_add(1));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5eed2));
    let stage2_curve = run_stage2_epochs(&mut params, dataset, cfg, &mut rng)?;
    Ok(TrainResult { params, stage1_curve: Vec::new(), stage2_curve })
}

fn run_stage2_epochs(
    params: &mut ModelParams,
    dataset: &Dataset,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    let n = dataset.images.len();
    let latent = params.arch.latent;
    let image = params.arch.image;
    let mut adam_cov = Adam::new(params.cov_net.n_params, cfg.learning_rate);
    let mut stage2_curve = Vec::with_capacity(cfg.epochs_stage2);
    for epoch in 0..cfg.epochs_stage2 {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        let mut epoch_loss = 0.0;
        let mut steps = 0;
        for batch in order.chunks(cfg.batch_size) {
            let noise: Vec<ItemNoise> = batch
                .iter()
                .map(|_| draw_noise(rng, latent, image, Some(cfg.background_jitter)))
                .collect();
            let results: Vec<Result<(f64, Vec<f64>)>> = batch
                .par_iter()
                .zip(noise.par_iter())
                .map(|(&idx, noise)| {
                    let mut gcov = vec![0.0; params.cov_net.n_params];
                    let mut drop_rng = ChaCha8Rng::seed_from_u64(noise.dropout_seed);
                    let x = match &noise.jitter {
                        Some(j) => &dataset.images[idx] + j,
                        None => dataset.images[idx].clone(),
                    };
                    let loss = stage2_step(
                        params,
                        &x,
                        &noise.u,
                        cfg,
                        Some(&mut drop_rng),
                        Some(&mut gcov),
                    )?;
                    Ok((loss, gcov))
                })
                .collect();
            let mut gcov = vec![0.0; params.cov_net.n_params];
            let mut batch_loss = 0.0;
            for r in results {
                let (loss, g) = r?;
                batch_loss += loss;
                add_scaled(&mut gcov, &g, 1.0);
            }
            let scale = 1.0 / batch.len() as f64;
            batch_loss *= scale;
            if !batch_loss.is_finite() {
                return Err(Error::Divergence(format!(
                    "stage-2 loss became non-finite at epoch {epoch}"
                )));
            }
            scale_in_place(&mut gcov, scale);
            let cov = params.cov_decoder.as_mut().expect("attached by the caller");
            adam_cov.step(cov, &gcov);
            epoch_loss += batch_loss;
            steps += 1;
        }
        stage2_curve.push(epoch_loss / steps as f64);
    }
    Ok(stage2_curve)
}

fn add_scaled(acc: &mut [f64], g: &[f64], s: f64) {
    for (a, b) in acc.iter_mut().zip(g) {
        *a += s * b;
    }
}

fn scale_in_place(v: &mut [f64], s: f64) {
    for a in v {
        *a *= s;
    }
}

// ---------------------------------------------------------------------------
// Plug-and-play denoiser
// ---------------------------------------------------------------------------

/// Residual CNN denoiser: x − noise_estimate(x), with the final layer
/// zero-initialized so the untrained network is the identity map.
#[derive(Debug, Clone)]
pub struct DenoiserNet {
    convs: Vec<Conv2d>,
    pub n_params: usize,
}

pub struct DenoiserCache {
    convs: Vec<Conv2dCache>,
    relu_masks: Vec<Array3<f64>>,
}

impl DenoiserNet {
    pub fn new(channels: usize, layers: usize) -> Self {
        assert!(layers >= 2);
        let mut alloc = ParamAlloc::new();
        let mut convs = Vec::with_capacity(layers);
        convs.push(Conv2d::new(&mut alloc, 1, channels, 3, 1));
        for _ in 0..layers - 2 {
            convs.push(Conv2d::new(&mut alloc, channels, channels, 3, 1));
        }
        convs.push(Conv2d::new(&mut alloc, channels, 1, 3, 1));
        Self { convs, n_params: alloc.len() }
    }

    pub fn init(&self, params: &mut [f64], rng: &mut ChaCha8Rng) {
        let last = self.convs.len() - 1;
        for (i, c) in self.convs.iter().enumerate() {
            if i == last {
                c.init_zero(params);
            } else {
                c.init(params, rng);
            }
        }
    }

    /// Predicted noise component of `x`.
    pub fn forward(&self, params: &[f64], x: &Array2<f64>) -> (Array2<f64>, DenoiserCache) {
        let (h, w) = x.dim();
        let mut feat = x
            .to_owned()
            .into_shape_with_order((1, h, w))
            .expect("image becomes one-channel map");
        let mut convs = Vec::with_capacity(self.convs.len());
        let mut relu_masks = Vec::with_capacity(self.convs.len() - 1);
        let last = self.convs.len() - 1;
        for (i, c) in self.convs.iter().enumerate() {
            let (out, cache) = c.forward(params, &feat);
            convs.push(cache);
            feat = if i < last {
                let (activated, mask) = relu(&out);
                relu_masks.push(mask);
                activated
            } else {
                out
            };
        }
        let out = feat.into_shape_with_order((h, w)).expect("single channel");
        (out, DenoiserCache { convs, relu_masks })
    }

    pub fn backward(
        &self,
        params: &[f64],
        cache: &DenoiserCache,
        grad_out: &Array2<f64>,
        grad_params: &mut [f64],
    ) -> Array2<f64> {
        let (h, w) = grad_out.dim();
        let mut g = grad_out
            .to_owned()
            .into_shape_with_order((1, h, w))
            .expect("image becomes one-channel map");
        let last = self.convs.len() - 1;
        for (i, c) in self.convs.iter().enumerate().rev() {
            if i < last {
                g = relu_backward(&g, &cache.relu_masks[i]);
            }
            g = c.backward(params, &cache.convs[i], &g, grad_params);
        }
        g.into_shape_with_order((h, w)).expect("single channel")
    }
}

/// A trained denoiser: weights, architecture, and the noise level it was
/// fit for.
#[derive(Debug, Clone)]
pub struct DenoiserParams {
    pub net: DenoiserNet,
    pub weights: Vec<f64>,
    pub channels: usize,
    pub layers: usize,
    pub noise_level: f64,
}

const DENOISER_KIND: &str = "denoiser-checkpoint";

impl DenoiserParams {
    pub fn apply(&self, x: &Array2<f64>) -> Array2<f64> {
        let (noise, _) = self.net.forward(&self.weights, x);
        x - &noise
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let meta = serde_json::json!({
            "kind": DENOISER_KIND,
            "channels": self.channels,
            "layers": self.layers,
            "noise_level": self.noise_level,
        });
        let mut c = Container::new(meta);
        c.push("weights", Array1::from_vec(self.weights.clone()));
        c.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path_str = path.as_ref().display().to_string();
        let c = Container::load(path.as_ref())?;
        let corrupt = |reason: String| Error::Corrupt { path: path_str.clone(), reason };
        if c.meta["kind"] != DENOISER_KIND {
            return Err(corrupt(format!("not a denoiser checkpoint: kind = {}", c.meta["kind"])));
        }
        let channels = c.meta["channels"].as_u64().ok_or_else(|| corrupt("bad channels".into()))?
            as usize;
        let layers =
            c.meta["layers"].as_u64().ok_or_else(|| corrupt("bad layers".into()))? as usize;
        let noise_level = c.meta["noise_level"]
            .as_f64()
            .ok_or_else(|| corrupt("bad noise_level".into()))?;
        let net = DenoiserNet::new(channels, layers);
        let weights = c.require("weights")?.as_f64()?;
        if weights.len() != net.n_params {
            return Err(corrupt(format!(
                "denoiser has {} weights, architecture expects {}",
                weights.len(),
                net.n_params
            )));
        }
        Ok(Self {
            net,
            weights: weights.iter().copied().collect(),
            channels,
            layers,
            noise_level,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiserConfig {
    pub channels: usize,
    pub layers: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            channels: 32,
            layers: 7,
            epochs: 40,
            batch_size: 16,
            learning_rate: 1e-3,
            seed: 0,
        }
    }
}

/// Trains the residual denoiser on (clean, clean + N(0, noise_level²))
/// pairs with an L2 objective.
pub fn train_denoiser(
    dataset: &Dataset,
    noise_level: f64,
    cfg: &DenoiserConfig,
) -> Result<DenoiserParams> {
    if dataset.images.is_empty() {
        return Err(Error::Config("denoiser training needs a nonempty dataset".into()));
    }
    if noise_level < 0.0 {
        return Err(Error::Config("noise level must be nonnegative".into()));
    }
    let net = DenoiserNet::new(cfg.channels, cfg.layers);
    let mut weights = vec![0.0; net.n_params];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    net.init(&mut weights, &mut rng);
    let mut adam = Adam::new(net.n_params, cfg.learning_rate);
    let n = dataset.images.len();

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let noisy: Vec<Array2<f64>> = batch
                .iter()
                .map(|&idx| {
                    let img = &dataset.images[idx];
                    img + &Array2::from_shape_simple_fn(img.dim(), || {
                        noise_level * rng.sample::<f64, _>(StandardNormal)
                    })
                })
                .collect();
            let results: Vec<(f64, Vec<f64>)> = batch
                .par_iter()
                .zip(noisy.par_iter())
                .map(|(&idx, noisy)| {
                    let clean = &dataset.images[idx];
                    let mut grad = vec![0.0; net.n_params];
                    let (pred, cache) = net.forward(&weights, noisy);
                    let denoised = noisy - &pred;
                    let r = &denoised - clean;
                    let loss = r.iter().map(|v| v * v).sum::<f64>() / 2.0;
                    // d loss / d pred = -r.
                    net.backward(&weights, &cache, &(-&r), &mut grad);
                    (loss, grad)
                })
                .collect();
            let mut grad = vec![0.0; net.n_params];
            let mut batch_loss = 0.0;
            for (loss, g) in &results {
                batch_loss += loss;
                add_scaled(&mut grad, g, 1.0);
            }
            let scale = 1.0 / batch.len() as f64;
            if !(batch_loss * scale).is_finite() {
                return Err(Error::Divergence(format!(
                    "denoiser loss became non-finite at epoch {epoch}"
                )));
            }
            scale_in_place(&mut grad, scale);
            adam.step(&mut weights, &grad);
        }
    }
    Ok(DenoiserParams {
        net,
        weights,
        channels: cfg.channels,
        layers: cfg.layers,
        noise_level,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_phantom_dataset, Split};
    use crate::recon::psnr;
    use tempfile::tempdir;

    fn tiny_arch() -> ArchConfig {
        ArchConfig {
            image: 8,
            latent: 4,
            base: 2,
            dense_channels: 2,
            initial_channels: 4,
            up_channels: vec![4, 3],
            neighborhood: crate::model::NeighborhoodKind::Causal3x3,
            diag_bound: 3.0,
            dropout: 0.1,
        }
    }

    fn rand_image(n: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_simple_fn((n, n), || rng.gen_range(0.0..1.0))
    }

    fn rand_latent_noise(n: usize, seed: u64) -> Array1<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array1::from_shape_simple_fn(n, || rng.sample(StandardNormal))
    }

    #[test]
    fn kl_closed_forms() {
        let zero = EncoderOutput { mu: Array1::zeros(5), log_var: Array1::zeros(5) };
        assert_eq!(kl_term(&zero), 0.0);
        let unit = EncoderOutput {
            mu: Array1::from_vec(vec![1.0]),
            log_var: Array1::from_vec(vec![0.0]),
        };
        assert!((kl_term(&unit) - 0.5).abs() < 1e-15);
        // Positivity away from the prior.
        let off = EncoderOutput {
            mu: Array1::from_vec(vec![0.3, -0.2]),
            log_var: Array1::from_vec(vec![0.4, -0.7]),
        };
        assert!(kl_term(&off) > 0.0);
    }

    #[test]
    fn kl_matches_quadrature() {
        // KL(N(mu, s²) || N(0,1)) by trapezoid integration of q log(q/p).
        let (mu, lv) = (0.7_f64, -0.4_f64);
        let s = (lv / 2.0).exp();
        let lo = (mu - 12.0 * s).min(-12.0);
        let hi = (mu + 12.0 * s).max(12.0);
        let n = 400_001;
        let dz = (hi - lo) / (n - 1) as f64;
        let mut acc = 0.0;
        for i in 0..n {
            let z = lo + i as f64 * dz;
            let lq = -((z - mu) * (z - mu)) / (2.0 * s * s) - s.ln()
                - 0.5 * (2.0 * std::f64::consts::PI).ln();
            let lp = -z * z / 2.0 - 0.5 * (2.0 * std::f64::consts::PI).ln();
            let w = if i == 0 || i == n - 1 { 0.5 } else { 1.0 };
            acc += w * lq.exp() * (lq - lp);
        }
        let numeric = acc * dz;
        let enc = EncoderOutput {
            mu: Array1::from_vec(vec![mu]),
            log_var: Array1::from_vec(vec![lv]),
        };
        assert!(
            (kl_term(&enc) - numeric).abs() < 1e-6,
            "closed form {} vs quadrature {numeric}",
            kl_term(&enc)
        );
    }

    #[test]
    fn kl_gradient_matches_finite_differences() {
        let enc = EncoderOutput {
            mu: Array1::from_vec(vec![0.3, -1.1, 0.0]),
            log_var: Array1::from_vec(vec![0.2, -0.5, 1.3]),
        };
        let (gmu, glv) = kl_grad(&enc);
        let eps = 1e-6;
        for i in 0..3 {
            let mut p = enc.clone();
            p.mu[i] += eps;
            let mut m = enc.clone();
            m.mu[i] -= eps;
            let fd = (kl_term(&p) - kl_term(&m)) / (2.0 * eps);
            assert!((fd - gmu[i]).abs() < 1e-8);
            let mut p = enc.clone();
            p.log_var[i] += eps;
            let mut m = enc.clone();
            m.log_var[i] -= eps;
            let fd = (kl_term(&p) - kl_term(&m)) / (2.0 * eps);
            assert!((fd - glv[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn stage1_rho_scaling() {
        let params = ModelParams::init(tiny_arch(), 1).unwrap();
        let x = rand_image(8, 2);
        let u = rand_latent_noise(4, 3);
        let cfg1 = TrainConfig { rho: 0.02, ..TrainConfig::default() };
        let cfg2 = TrainConfig { rho: 0.04, ..TrainConfig::default() };
        let kl = kl_term(&params.encode(&x).unwrap());
        let q1 = stage1_loss(&params, &x, &u, &cfg1).unwrap() - kl;
        let q2 = stage1_loss(&params, &x, &u, &cfg2).unwrap() - kl;
        assert!((q1 - 2.0 * q2).abs() < 1e-9 * q1.abs(), "doubling rho must halve the quadratic");
    }

    #[test]
    fn stage1_gradients_match_finite_differences() {
        let mut params = ModelParams::init(tiny_arch(), 4).unwrap();
        let x = rand_image(8, 5);
        let u = rand_latent_noise(4, 6);
        let cfg = TrainConfig::default();
        let mut genc = vec![0.0; params.enc_net.n_params];
        let mut gdec = vec![0.0; params.mean_net.n_params];
        stage1_step(&params, &x, &u, &cfg, None, Some((&mut genc, &mut gdec))).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let eps = 1e-5;
        for _ in 0..12 {
            let i = rng.gen_range(0..genc.len());
            let orig = params.encoder[i];
            params.encoder[i] = orig + eps;
            let fp = stage1_loss(&params, &x, &u, &cfg).unwrap();
            params.encoder[i] = orig - eps;
            let fm = stage1_loss(&params, &x, &u, &cfg).unwrap();
            params.encoder[i] = orig;
            let fd = (fp - fm) / (2.0 * eps);
            assert!(
                (fd - genc[i]).abs() <= 1e-3 * genc[i].abs().max(1e-3),
                "encoder[{i}]: analytic {} vs fd {fd}",
                genc[i]
            );
        }
        for _ in 0..12 {
            let i = rng.gen_range(0..gdec.len());
            let orig = params.mean_decoder[i];
            params.mean_decoder[i] = orig + eps;
            let fp = stage1_loss(&params, &x, &u, &cfg).unwrap();
            params.mean_decoder[i] = orig - eps;
            let fm = stage1_loss(&params, &x, &u, &cfg).unwrap();
            params.mean_decoder[i] = orig;
            let fd = (fp - fm) / (2.0 * eps);
            assert!(
                (fd - gdec[i]).abs() <= 1e-3 * gdec[i].abs().max(1e-3),
                "decoder[{i}]: analytic {} vs fd {fd}",
                gdec[i]
            );
        }
    }

    #[test]
    fn stage2_at_identity_equals_stage1_with_unit_rho() {
        // Zero-initialized covariance head means L = I, so the structured
        // loss collapses to the isotropic one at rho = 1.
        let params = ModelParams::init_full(tiny_arch(), 8).unwrap();
        let x = rand_image(8, 9);
        let u = rand_latent_noise(4, 10);
        let cfg = TrainConfig { rho: 1.0, ..TrainConfig::default() };
        let s1 = stage1_loss(&params, &x, &u, &cfg).unwrap();
        let s2 = stage2_loss(&params, &x, &u, &cfg).unwrap();
        assert!((s1 - s2).abs() < 1e-10, "stage1 {s1} vs stage2 {s2}");
    }

    #[test]
    fn stage2_requires_covariance_decoder() {
        let params = ModelParams::init(tiny_arch(), 11).unwrap();
        let x = rand_image(8, 12);
        let u = rand_latent_noise(4, 13);
        assert!(matches!(
            stage2_loss(&params, &x, &u, &TrainConfig::default()),
            Err(Error::Stage(_))
        ));
    }

    #[test]
    fn stage2_gradients_match_finite_differences() {
        for mode in [CovMode::Covar, CovMode::Diagonal] {
            let mut params = ModelParams::init_full(tiny_arch(), 14).unwrap();
            // Move the covariance decoder off its zero-head initialization
            // so the test exercises a generic point.
            let mut wrng = ChaCha8Rng::seed_from_u64(15);
            for w in params.cov_decoder.as_mut().unwrap() {
                *w += 0.02 * wrng.sample::<f64, _>(StandardNormal);
            }
            let x = rand_image(8, 16);
            let u = rand_latent_noise(4, 17);
            let cfg = TrainConfig { ablation_mode: mode, ..TrainConfig::default() };
            let mut gcov = vec![0.0; params.cov_net.n_params];
            stage2_step(&params, &x, &u, &cfg, None, Some(&mut gcov)).unwrap();

            let mut rng = ChaCha8Rng::seed_from_u64(18);
            let eps = 1e-5;
            for _ in 0..15 {
                let i = rng.gen_range(0..gcov.len());
                let orig = params.cov_decoder.as_ref().unwrap()[i];
                params.cov_decoder.as_mut().unwrap()[i] = orig + eps;
                let fp = stage2_loss(&params, &x, &u, &cfg).unwrap();
                params.cov_decoder.as_mut().unwrap()[i] = orig - eps;
                let fm = stage2_loss(&params, &x, &u, &cfg).unwrap();
                params.cov_decoder.as_mut().unwrap()[i] = orig;
                let fd = (fp - fm) / (2.0 * eps);
                assert!(
                    (fd - gcov[i]).abs() <= 1e-3 * gcov[i].abs().max(1e-3),
                    "{mode} cov[{i}]: analytic {} vs fd {fd}",
                    gcov[i]
                );
            }
        }
    }

    #[test]
    fn diagonal_mode_matches_masked_oracle() {
        let mut params = ModelParams::init_full(tiny_arch(), 19).unwrap();
        let mut wrng = ChaCha8Rng::seed_from_u64(20);
        for w in params.cov_decoder.as_mut().unwrap() {
            *w += 0.05 * wrng.sample::<f64, _>(StandardNormal);
        }
        let x = rand_image(8, 21);
        let u = rand_latent_noise(4, 22);
        let cfg = TrainConfig { ablation_mode: CovMode::Diagonal, ..TrainConfig::default() };
        let loss = stage2_loss(&params, &x, &u, &cfg).unwrap();

        // Oracle via public APIs: zero the off-diagonal raw channels by
        // hand and rebuild the factor.
        let enc = params.encode(&x).unwrap();
        let z = sample_latent(&enc, &u);
        let mean = params.decode_mean(&z).unwrap();
        let mut raw = params.decode_chol_raw(&z).unwrap();
        let pattern = params.arch.pattern();
        for c in 0..pattern.offsets().len() {
            if c != pattern.center_channel() {
                raw.slice_mut(ndarray::s![.., .., c]).fill(0.0);
            }
        }
        let factor =
            CholFactor::from_raw_channels(&raw, pattern, params.arch.diag_bound).unwrap();
        let oracle = nll(&x, &mean, &factor).unwrap() + kl_term(&enc);
        assert!((loss - oracle).abs() < 1e-12);
    }

    #[test]
    fn smoke_training_descends_and_respects_ablation() {
        let ds = make_phantom_dataset(24, 8, 8, 31, Split::Train).unwrap();
        let cfg = TrainConfig {
            epochs_stage1: 30,
            epochs_stage2: 25,
            batch_size: 8,
            learning_rate: 1e-3,
            ablation_mode: CovMode::Covar,
            seed: 5,
            ..TrainConfig::default()
        };
        let result = train(&ds, tiny_arch(), &cfg).unwrap();
        assert_eq!(result.params.stage, Stage::CovarianceTrained);
        let s1 = &result.stage1_curve;
        assert!(
            s1.last().unwrap() < s1.first().unwrap(),
            "stage-1 loss must decrease: {s1:?}"
        );
        let s2 = &result.stage2_curve;
        let first: f64 = s2[..5].iter().sum::<f64>() / 5.0;
        let last: f64 = s2[s2.len() - 5..].iter().sum::<f64>() / 5.0;
        assert!(last < first, "stage-2 loss must decrease: first {first} last {last}");

        // Freezing contract: stage 2 must not touch stage-1 weights.
        let cfg_id = TrainConfig { ablation_mode: CovMode::Identity, ..cfg.clone() };
        let id_result = train(&ds, tiny_arch(), &cfg_id).unwrap();
        assert_eq!(id_result.params.stage, Stage::MeanTrained);
        assert!(id_result.params.cov_decoder.is_none());
        assert_eq!(id_result.params.encoder, result.params.encoder);
        assert_eq!(id_result.params.mean_decoder, result.params.mean_decoder);
    }

    #[test]
    fn stage2_continuation_shares_stage1_and_respects_modes() {
        let ds = make_phantom_dataset(12, 8, 8, 35, Split::Train).unwrap();
        let cfg = TrainConfig {
            epochs_stage1: 8,
            epochs_stage2: 6,
            batch_size: 4,
            learning_rate: 1e-3,
            ablation_mode: CovMode::Identity,
            seed: 2,
            ..TrainConfig::default()
        };
        let base = train(&ds, tiny_arch(), &cfg).unwrap().params;

        let cov_cfg = TrainConfig { ablation_mode: CovMode::Covar, ..cfg.clone() };
        let cov = train_stage2(&base, &ds, &cov_cfg).unwrap();
        assert_eq!(cov.params.stage, Stage::CovarianceTrained);
        assert!(cov.stage1_curve.is_empty());
        assert_eq!(cov.stage2_curve.len(), cfg.epochs_stage2);
        // Stage-1 weights frozen through the continuation.
        assert_eq!(cov.params.encoder, base.encoder);
        assert_eq!(cov.params.mean_decoder, base.mean_decoder);

        // Diagonal continuation leaves all off-diagonal channels at the
        // zero-initialized head output, so the factor stays diagonal.
        let diag_cfg = TrainConfig { ablation_mode: CovMode::Diagonal, ..cfg.clone() };
        let diag = train_stage2(&base, &ds, &diag_cfg).unwrap();
        let z = diag.params.encode(&ds.images[0]).unwrap().mu;
        let raw = diag.params.decode_chol_raw(&z).unwrap();
        let center = diag.params.arch.pattern().center_channel();
        let off_diag_max = raw
            .slice(ndarray::s![.., .., ..center])
            .iter()
            .fold(0.0_f64, |a, v| a.max(v.abs()));
        assert_eq!(off_diag_max, 0.0, "off-diagonal channels must stay zero");

        // Identity mode has no second stage to run.
        assert!(train_stage2(&base, &ds, &cfg).is_err());

        // Deterministic for a fixed seed.
        let again = train_stage2(&base, &ds, &cov_cfg).unwrap();
        assert_eq!(again.params.cov_decoder, cov.params.cov_decoder);
    }

    #[test]
    fn training_is_reproducible() {
        let ds = make_phantom_dataset(12, 8, 8, 33, Split::Train).unwrap();
        let cfg = TrainConfig {
            epochs_stage1: 4,
            epochs_stage2: 3,
            batch_size: 4,
            learning_rate: 1e-3,
            seed: 77,
            ..TrainConfig::default()
        };
        let a = train(&ds, tiny_arch(), &cfg).unwrap();
        let b = train(&ds, tiny_arch(), &cfg).unwrap();
        for (x, y) in a.stage1_curve.iter().zip(&b.stage1_curve) {
            assert!((x - y).abs() < 1e-12, "stage-1 curves differ: {x} vs {y}");
        }
        for (x, y) in a.stage2_curve.iter().zip(&b.stage2_curve) {
            assert!((x - y).abs() < 1e-12, "stage-2 curves differ: {x} vs {y}");
        }
    }

    #[test]
    fn denoiser_starts_as_identity_and_roundtrips() {
        let net = DenoiserNet::new(8, 4);
        let mut weights = vec![0.0; net.n_params];
        net.init(&mut weights, &mut ChaCha8Rng::seed_from_u64(1));
        let d = DenoiserParams {
            net,
            weights,
            channels: 8,
            layers: 4,
            noise_level: 0.0,
        };
        let x = rand_image(16, 2);
        let out = d.apply(&x);
        for (a, b) in out.iter().zip(x.iter()) {
            assert!((a - b).abs() < 1e-12, "zero-initialized head must be the identity");
        }
        assert_eq!(out.dim(), x.dim());

        let dir = tempdir().unwrap();
        let path = dir.path().join("denoiser.cvct");
        d.save(&path).unwrap();
        let e = DenoiserParams::load(&path).unwrap();
        assert_eq!(d.weights, e.weights);
        assert_eq!(e.channels, 8);
        assert_eq!(e.layers, 4);
    }

    #[test]
    fn denoiser_gradient_matches_finite_differences() {
        let net = DenoiserNet::new(4, 3);
        let mut weights = vec![0.0; net.n_params];
        net.init(&mut weights, &mut ChaCha8Rng::seed_from_u64(3));
        // Nudge the zero head so gradients flow everywhere.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for w in weights.iter_mut() {
            *w += 0.01 * rng.sample::<f64, _>(StandardNormal);
        }
        let noisy = rand_image(8, 5);
        let clean = rand_image(8, 6);
        let loss_at = |w: &[f64]| {
            let (pred, _) = net.forward(w, &noisy);
            let denoised = &noisy - &pred;
            (&denoised - &clean).iter().map(|v| v * v).sum::<f64>() / 2.0
        };
        let mut grad = vec![0.0; net.n_params];
        let (pred, cache) = net.forward(&weights, &noisy);
        let r = &(&noisy - &pred) - &clean;
        net.backward(&weights, &cache, &(-&r), &mut grad);

        let eps = 1e-6;
        for _ in 0..15 {
            let i = rng.gen_range(0..weights.len());
            let orig = weights[i];
            weights[i] = orig + eps;
            let fp = loss_at(&weights);
            weights[i] = orig - eps;
            let fm = loss_at(&weights);
            weights[i] = orig;
            let fd = (fp - fm) / (2.0 * eps);
            assert!(
                (fd - grad[i]).abs() <= 1e-4 * grad[i].abs().max(1e-3),
                "denoiser[{i}]: analytic {} vs fd {fd}",
                grad[i]
            );
        }
    }

    #[test]
    fn denoiser_training_gains_over_noisy_input() {
        let train_set = make_phantom_dataset(32, 16, 16, 41, Split::Train).unwrap();
        let val_set = make_phantom_dataset(6, 16, 16, 42, Split::Test).unwrap();
        let noise_level = 0.05;
        let cfg = DenoiserConfig {
            channels: 16,
            layers: 5,
            epochs: 60,
            batch_size: 8,
            learning_rate: 1e-3,
            seed: 9,
        };
        let d = train_denoiser(&train_set, noise_level, &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut gain = 0.0;
        for img in &val_set.images {
            let noisy = img
                + &Array2::from_shape_simple_fn(img.dim(), || {
                    noise_level * rng.sample::<f64, _>(StandardNormal)
                });
            let denoised = d.apply(&noisy);
            gain += psnr(&denoised, img) - psnr(&noisy, img);
        }
        gain /= val_set.images.len() as f64;
        assert!(gain > 2.0, "mean denoising gain {gain} dB");
    }
}
