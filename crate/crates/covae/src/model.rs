//! Encoder, mean decoder, and covariance decoder built from resnet-style
//! blocks, plus checkpoint serialization.
//!
//! Both decoders share one topology: a dense layer reshaped to a small
//! multi-channel image, a resnet block without resizing, a chain of 2x
//! up-sampling blocks, a final block without resizing, and a 1x1
//! convolution head. The mean decoder's head ends in a sigmoid so generated
//! images respect the [0, 1] data range; the covariance decoder's head is
//! linear (and zero-initialized, so the factor starts at the identity). The
//! encoder is the reversed topology with stride-2 down-sampling blocks and a
//! dense head emitting (mu, log_var).

use ndarray::{Array1, Array2, Array3};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{Error, Result};
use crate::harness::Container;
use crate::nn::{Conv2d, Conv2dCache, Dense, DenseCache, ParamAlloc, ResBlock, ResBlockCache, Resize};
use crate::sparse_gaussian::{
    diag_activation_grad, nll, nll_grad_mean, nll_grad_weights, CholFactor, SparsityPattern,
};

/// Hard clamp applied to the encoder's log-variance head.
pub const LOG_VAR_CLAMP: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NeighborhoodKind {
    Causal3x3,
    Causal5x5,
}

impl NeighborhoodKind {
    pub fn pattern(&self, h: usize, w: usize) -> SparsityPattern {
        match self {
            NeighborhoodKind::Causal3x3 => SparsityPattern::causal_3x3(h, w),
            NeighborhoodKind::Causal5x5 => SparsityPattern::causal_5x5(h, w),
        }
    }

    pub fn channels(&self) -> usize {
        match self {
            NeighborhoodKind::Causal3x3 => 5,
            NeighborhoodKind::Causal5x5 => 13,
        }
    }
}

/// Architecture hyperparameters; immutable once a model is created.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    /// Image height = width.
    pub image: usize,
    /// Latent dimension n.
    pub latent: usize,
    /// Spatial size of the decoder's dense-layer output.
    pub base: usize,
    /// Channel count of the dense-layer output.
    pub dense_channels: usize,
    /// Channels after the first (non-resizing) decoder block.
    pub initial_channels: usize,
    /// Channels of each up-sampling block, in decoder order.
    pub up_channels: Vec<usize>,
    pub neighborhood: NeighborhoodKind,
    pub diag_bound: f64,
    pub dropout: f64,
}

impl ArchConfig {
    /// Small configuration for tests and quick experiments: 32x32 images,
    /// latent 16, channel widths an eighth of the full-scale preset.
    pub fn desk() -> Self {
        Self {
            image: 32,
            latent: 16,
            base: 2,
            dense_channels: 2,
            initial_channels: 32,
            up_channels: vec![64, 32, 16, 8],
            neighborhood: NeighborhoodKind::Causal3x3,
            diag_bound: 3.0,
            dropout: 0.1,
        }
    }

    /// Full-scale configuration: 128x128 images, latent 100, dense output
    /// 8x8x16, blocks at 256/512/256/128/64 channels.
    pub fn paper() -> Self {
        Self {
            image: 128,
            latent: 100,
            base: 8,
            dense_channels: 16,
            initial_channels: 256,
            up_channels: vec![512, 256, 128, 64],
            neighborhood: NeighborhoodKind::Causal3x3,
            diag_bound: 3.0,
            dropout: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base * (1 << self.up_channels.len()) != self.image {
            return Err(Error::Config(format!(
                "base {} with {} up-sampling blocks gives {}, not image size {}",
                self.base,
                self.up_channels.len(),
                self.base * (1 << self.up_channels.len()),
                self.image
            )));
        }
        if self.latent == 0 || self.dense_channels == 0 || self.initial_channels == 0 {
            return Err(Error::Config("zero-sized architecture field".into()));
        }
        if self.up_channels.iter().any(|&c| c == 0) {
            return Err(Error::Config("zero-width up-sampling block".into()));
        }
        if self.diag_bound <= 0.0 || !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("diag_bound must be > 0 and dropout in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn pattern(&self) -> SparsityPattern {
        self.neighborhood.pattern(self.image, self.image)
    }
}

/// Dense head -> blocks -> 1x1 conv head, shared by both decoders.
#[derive(Debug, Clone)]
pub struct DecoderNet {
    dense: Dense,
    blocks: Vec<ResBlock>,
    head: Conv2d,
    base: usize,
    dense_channels: usize,
    pub out_channels: usize,
    sigmoid_head: bool,
    pub n_params: usize,
}

#[derive(Debug)]
pub struct DecoderCache {
    dense: DenseCache,
    blocks: Vec<ResBlockCache>,
    head: Conv2dCache,
    sigmoid_out: Option<Array3<f64>>,
}

impl DecoderNet {
    pub fn new(arch: &ArchConfig, out_channels: usize, sigmoid_head: bool) -> Self {
        let mut alloc = ParamAlloc::new();
        let dense = Dense::new(
            &mut alloc,
            arch.latent,
            arch.base * arch.base * arch.dense_channels,
        );
        let mut blocks = Vec::new();
        blocks.push(ResBlock::new(
            &mut alloc,
            arch.dense_channels,
            arch.initial_channels,
            Resize::None,
        ));
        let mut ch = arch.initial_channels;
        for &c in &arch.up_channels {
            blocks.push(ResBlock::new(&mut alloc, ch, c, Resize::Up));
            ch = c;
        }
        blocks.push(ResBlock::new(&mut alloc, ch, ch, Resize::None));
        let head = Conv2d::new(&mut alloc, ch, out_channels, 1, 1);
        Self {
            dense,
            blocks,
            head,
            base: arch.base,
            dense_channels: arch.dense_channels,
            out_channels,
            sigmoid_head,
            n_params: alloc.len(),
        }
    }

    /// He-initializes all layers; `zero_head` starts the 1x1 head (and thus
    /// the whole network output) at zero.
    pub fn init(&self, params: &mut [f64], rng: &mut ChaCha8Rng, zero_head: bool) {
        self.dense.init(params, rng);
        for b in &self.blocks {
            b.init(params, rng);
        }
        if zero_head {
            self.head.init_zero(params);
        } else {
            self.head.init(params, rng);
        }
    }

    pub fn forward(
        &self,
        params: &[f64],
        z: &Array1<f64>,
        dropout_rate: f64,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> (Array3<f64>, DecoderCache) {
        let (flat, dense_cache) = self.dense.forward(params, z);
        let mut h = flat
            .into_shape_with_order((self.dense_channels, self.base, self.base))
            .expect("dense output reshapes to the base feature map");
        let mut block_caches = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (next, cache) = b.forward(params, &h, dropout_rate, rng.as_deref_mut());
            h = next;
            block_caches.push(cache);
        }
        let (mut out, head_cache) = self.head.forward(params, &h);
        let sigmoid_out = if self.sigmoid_head {
            let (s, cache) = crate::nn::sigmoid(&out);
            out = s;
            Some(cache)
        } else {
            None
        };
        (
            out,
            DecoderCache { dense: dense_cache, blocks: block_caches, head: head_cache, sigmoid_out },
        )
    }

    /// Back-propagates an output-space gradient; accumulates parameter
    /// gradients into `grad_params` and returns the latent gradient.
    pub fn backward(
        &self,
        params: &[f64],
        cache: &DecoderCache,
        grad_out: &Array3<f64>,
        grad_params: &mut [f64],
    ) -> Array1<f64> {
        let mut g = grad_out.clone();
        if let Some(s) = &cache.sigmoid_out {
            g = crate::nn::sigmoid_backward(&g, s);
        }
        let mut g = self.head.backward(params, &cache.head, &g, grad_params);
        for (b, c) in self.blocks.iter().zip(&cache.blocks).rev() {
            g = b.backward(params, c, &g, grad_params);
        }
        let flat = g
            .into_shape_with_order(self.dense_channels * self.base * self.base)
            .expect("feature map flattens");
        self.dense.backward(params, &cache.dense, &flat, grad_params)
    }
}

/// Reversed decoder topology ending in a dense (mu, log_var) head.
#[derive(Debug, Clone)]
pub struct EncoderNet {
    blocks: Vec<ResBlock>,
    dense: Dense,
    latent: usize,
    base: usize,
    dense_channels: usize,
    pub n_params: usize,
}

#[derive(Debug)]
pub struct EncoderCache {
    blocks: Vec<ResBlockCache>,
    dense: DenseCache,
    clamp_mask: Array1<f64>,
}

/// Variational posterior parameters N(mu, diag(exp(log_var))).
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput {
    pub mu: Array1<f64>,
    pub log_var: Array1<f64>,
}

impl EncoderNet {
    pub fn new(arch: &ArchConfig) -> Self {
        let mut alloc = ParamAlloc::new();
        let n_up = arch.up_channels.len();
        let mut blocks = Vec::new();
        blocks.push(ResBlock::new(&mut alloc, 1, arch.up_channels[n_up - 1], Resize::None));
        let mut ch = arch.up_channels[n_up - 1];
        for i in (0..n_up).rev() {
            let target = if i == 0 { arch.initial_channels } else { arch.up_channels[i - 1] };
            blocks.push(ResBlock::new(&mut alloc, ch, target, Resize::Down));
            ch = target;
        }
        blocks.push(ResBlock::new(&mut alloc, ch, arch.dense_channels, Resize::None));
        let dense = Dense::new(
            &mut alloc,
            arch.base * arch.base * arch.dense_channels,
            2 * arch.latent,
        );
        Self {
            blocks,
            dense,
            latent: arch.latent,
            base: arch.base,
            dense_channels: arch.dense_channels,
            n_params: alloc.len(),
        }
    }

    pub fn init(&self, params: &mut [f64], rng: &mut ChaCha8Rng) {
        for b in &self.blocks {
            b.init(params, rng);
        }
        self.dense.init(params, rng);
    }

    pub fn forward(
        &self,
        params: &[f64],
        x: &Array2<f64>,
        dropout_rate: f64,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> (EncoderOutput, EncoderCache) {
        let (h, w) = x.dim();
        let mut feat = x
            .to_owned()
            .into_shape_with_order((1, h, w))
            .expect("image becomes a one-channel feature map");
        let mut block_caches = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (next, cache) = b.forward(params, &feat, dropout_rate, rng.as_deref_mut());
            feat = next;
            block_caches.push(cache);
        }
        let flat = feat
            .into_shape_with_order(self.dense_channels * self.base * self.base)
            .expect("feature map flattens");
        let (out, dense_cache) = self.dense.forward(params, &flat);
        let mu = out.slice(ndarray::s![..self.latent]).to_owned();
        let raw_lv = out.slice(ndarray::s![self.latent..]).to_owned();
        let clamp_mask = raw_lv.mapv(|v| if v.abs() < LOG_VAR_CLAMP { 1.0 } else { 0.0 });
        let log_var = raw_lv.mapv(|v| v.clamp(-LOG_VAR_CLAMP, LOG_VAR_CLAMP));
        (
            EncoderOutput { mu, log_var },
            EncoderCache { blocks: block_caches, dense: dense_cache, clamp_mask },
        )
    }

    /// Back-propagates gradients on (mu, log_var); returns the gradient with
    /// respect to the input image.
    pub fn backward(
        &self,
        params: &[f64],
        cache: &EncoderCache,
        grad_mu: &Array1<f64>,
        grad_log_var: &Array1<f64>,
        grad_params: &mut [f64],
    ) -> Array2<f64> {
        let mut gout = Array1::zeros(2 * self.latent);
        gout.slice_mut(ndarray::s![..self.latent]).assign(grad_mu);
        gout.slice_mut(ndarray::s![self.latent..])
            .assign(&(grad_log_var * &cache.clamp_mask));
        let gflat = self.dense.backward(params, &cache.dense, &gout, grad_params);
        let mut g = gflat
            .into_shape_with_order((self.dense_channels, self.base, self.base))
            .expect("flat gradient reshapes");
        for (b, c) in self.blocks.iter().zip(&cache.blocks).rev() {
            g = b.backward(params, c, &g, grad_params);
        }
        let (_, h, w) = g.dim();
        g.into_shape_with_order((h, w)).expect("one-channel map is an image")
    }
}

/// Reparameterization: z = mu + exp(log_var / 2) ⊙ u.
pub fn sample_latent(enc: &EncoderOutput, u: &Array1<f64>) -> Array1<f64> {
    &enc.mu + &(enc.log_var.mapv(|v| (v / 2.0).exp()) * u)
}

/// Training progress marker. The covariance decoder exists exactly when the
/// stage is `CovarianceTrained`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    MeanTrained,
    CovarianceTrained,
}

/// Residual model used when generating or scoring images.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovMode {
    /// Isotropic covariance rho * I.
    Identity,
    /// Learned factor restricted to its diagonal.
    Diagonal,
    /// Full learned factor.
    Covar,
}

impl std::str::FromStr for CovMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(CovMode::Identity),
            "diagonal" => Ok(CovMode::Diagonal),
            "covar" => Ok(CovMode::Covar),
            other => Err(Error::Config(format!(
                "unknown covariance mode {other:?} (expected identity, diagonal, or covar)"
            ))),
        }
    }
}

impl std::fmt::Display for CovMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            CovMode::Identity => "identity",
            CovMode::Diagonal => "diagonal",
            CovMode::Covar => "covar",
        })
    }
}

/// All parameters of one model: architecture, stage, and the flat weight
/// vectors of the three networks. Network descriptors are rebuilt from the
/// architecture and carry no state of their own.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub arch: ArchConfig,
    pub stage: Stage,
    pub encoder: Vec<f64>,
    pub mean_decoder: Vec<f64>,
    pub cov_decoder: Option<Vec<f64>>,
    pub enc_net: EncoderNet,
    pub mean_net: DecoderNet,
    pub cov_net: DecoderNet,
}

const CHECKPOINT_KIND: &str = "model-checkpoint";

impl ModelParams {
    /// Freshly initialized encoder and mean decoder; no covariance decoder
    /// yet (that is attached by the second training stage).
    pub fn init(arch: ArchConfig, seed: u64) -> Result<Self> {
        arch.validate()?;
        let enc_net = EncoderNet::new(&arch);
        let mean_net = DecoderNet::new(&arch, 1, true);
        let cov_net = DecoderNet::new(&arch, arch.neighborhood.channels(), false);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut encoder = vec![0.0; enc_net.n_params];
        enc_net.init(&mut encoder, &mut rng);
        let mut mean_decoder = vec![0.0; mean_net.n_params];
        mean_net.init(&mut mean_decoder, &mut rng, false);
        Ok(Self {
            arch,
            stage: Stage::MeanTrained,
            encoder,
            mean_decoder,
            cov_decoder: None,
            enc_net,
            mean_net,
            cov_net,
        })
    }

    /// Initializes and attaches the covariance decoder, advancing the stage.
    /// The 1x1 head starts at zero so the initial factor is the identity.
    pub fn attach_cov_decoder(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut w = vec![0.0; self.cov_net.n_params];
        self.cov_net.init(&mut w, &mut rng, true);
        self.cov_decoder = Some(w);
        self.stage = Stage::CovarianceTrained;
    }

    /// Convenience constructor with all three networks present.
    pub fn init_full(arch: ArchConfig, seed: u64) -> Result<Self> {
        let mut p = Self::init(arch, seed)?;
        p.attach_cov_decoder(seed.wrapping_add(1));
        Ok(p)
    }

    /// A copy at the mean-trained stage: encoder and mean decoder kept,
    /// the covariance decoder (if any) dropped. This is both the
    /// identity-ablation model and the base for a fresh covariance stage.
    pub fn to_mean_stage(&self) -> Self {
        Self { stage: Stage::MeanTrained, cov_decoder: None, ..self.clone() }
    }

    fn check_image(&self, x: &Array2<f64>) -> Result<()> {
        if x.dim() != (self.arch.image, self.arch.image) {
            return Err(Error::ShapeMismatch(format!(
                "image is {:?}, architecture expects {}x{}",
                x.dim(),
                self.arch.image,
                self.arch.image
            )));
        }
        Ok(())
    }

    fn check_latent(&self, z: &Array1<f64>) -> Result<()> {
        if z.len() != self.arch.latent {
            return Err(Error::ShapeMismatch(format!(
                "latent has length {}, architecture expects {}",
                z.len(),
                self.arch.latent
            )));
        }
        Ok(())
    }

    fn cov_weights(&self) -> Result<&[f64]> {
        match (&self.cov_decoder, self.stage) {
            (Some(w), Stage::CovarianceTrained) => Ok(w),
            _ => Err(Error::Stage("covariance not trained".into())),
        }
    }

    /// Inference-mode encoding (dropout off).
    pub fn encode(&self, x: &Array2<f64>) -> Result<EncoderOutput> {
        self.check_image(x)?;
        Ok(self.enc_net.forward(&self.encoder, x, 0.0, None).0)
    }

    /// Inference-mode mean decoding G(z).
    pub fn decode_mean(&self, z: &Array1<f64>) -> Result<Array2<f64>> {
        self.check_latent(z)?;
        let (out, _) = self.mean_net.forward(&self.mean_decoder, z, 0.0, None);
        let (_, h, w) = out.dim();
        Ok(out.into_shape_with_order((h, w)).expect("single channel"))
    }

    /// Raw covariance channels (H, W, C) before the diagonal activation.
    pub fn decode_chol_raw(&self, z: &Array1<f64>) -> Result<Array3<f64>> {
        self.check_latent(z)?;
        let (out, _) = self.cov_net.forward(self.cov_weights()?, z, 0.0, None);
        Ok(out
            .permuted_axes([1, 2, 0])
            .as_standard_layout()
            .to_owned())
    }

    /// The structured factor L(z).
    pub fn decode_chol(&self, z: &Array1<f64>) -> Result<CholFactor> {
        let raw = self.decode_chol_raw(z)?;
        CholFactor::from_raw_channels(&raw, self.arch.pattern(), self.arch.diag_bound)
    }

    /// Decodes both heads once: (G(z), L(z)).
    pub fn decode_pair(&self, z: &Array1<f64>) -> Result<(Array2<f64>, CholFactor)> {
        Ok((self.decode_mean(z)?, self.decode_chol(z)?))
    }

    /// Mean and residual factor for one covariance mode: no factor in
    /// identity mode, the diagonal restriction in diagonal mode, the full
    /// factor otherwise.
    pub fn residual_model(
        &self,
        z: &Array1<f64>,
        mode: CovMode,
    ) -> Result<(Array2<f64>, Option<CholFactor>)> {
        let mean = self.decode_mean(z)?;
        let factor = match mode {
            CovMode::Identity => None,
            CovMode::Diagonal => Some(self.decode_chol(z)?.diagonal_restriction()),
            CovMode::Covar => Some(self.decode_chol(z)?),
        };
        Ok((mean, factor))
    }

    /// nll(x, G(z), Sigma(z)) at fixed z in the given covariance mode.
    /// Identity mode drops the constant log-determinant of rho * I and
    /// keeps only ½ rho⁻¹ ‖x − G(z)‖².
    pub fn residual_nll(
        &self,
        x: &Array2<f64>,
        z: &Array1<f64>,
        mode: CovMode,
        rho: f64,
    ) -> Result<f64> {
        self.check_image(x)?;
        let (mean, factor) = self.residual_model(z, mode)?;
        match factor {
            None => {
                if rho <= 0.0 {
                    return Err(Error::Config("identity mode needs rho > 0".into()));
                }
                Ok((x - &mean).iter().map(|v| v * v).sum::<f64>() / (2.0 * rho))
            }
            Some(f) => nll(x, &mean, &f),
        }
    }

    /// [`Self::residual_nll`] plus its gradient with respect to z, chained
    /// through the decoders active in the given mode.
    pub fn residual_nll_z_grad(
        &self,
        x: &Array2<f64>,
        z: &Array1<f64>,
        mode: CovMode,
        rho: f64,
    ) -> Result<(f64, Array1<f64>)> {
        self.check_image(x)?;
        self.check_latent(z)?;
        let n = self.arch.image;

        let (mean3, mean_cache) = self.mean_net.forward(&self.mean_decoder, z, 0.0, None);
        let mean = mean3
            .clone()
            .into_shape_with_order((n, n))
            .expect("single channel");

        if mode == CovMode::Identity {
            if rho <= 0.0 {
                return Err(Error::Config("identity mode needs rho > 0".into()));
            }
            let r = x - &mean;
            let value = r.iter().map(|v| v * v).sum::<f64>() / (2.0 * rho);
            let gmean3 = (-&r / rho)
                .into_shape_with_order((1, n, n))
                .expect("image becomes one-channel map");
            let mut scratch = vec![0.0; self.mean_net.n_params];
            let gz =
                self.mean_net
                    .backward(&self.mean_decoder, &mean_cache, &gmean3, &mut scratch);
            return Ok((value, gz));
        }

        let cov_params = self.cov_weights()?;
        let diagonal = mode == CovMode::Diagonal;
        let (raw3, cov_cache) = self.cov_net.forward(cov_params, z, 0.0, None);
        let raw = raw3.permuted_axes([1, 2, 0]).as_standard_layout().to_owned();
        let pattern = self.arch.pattern();
        let center = pattern.center_channel();
        let factor = {
            let full = CholFactor::from_raw_channels(&raw, pattern, self.arch.diag_bound)?;
            if diagonal {
                full.diagonal_restriction()
            } else {
                full
            }
        };

        let value = nll(x, &mean, &factor)?;

        // Mean path: d nll / d G = -L Lᵀ (x - G).
        let gmean = nll_grad_mean(x, &mean, &factor)?;
        let gmean3 = gmean
            .into_shape_with_order((1, n, n))
            .expect("image becomes one-channel map");
        let mut scratch = vec![0.0; self.mean_net.n_params];
        let gz_mean = self.mean_net.backward(&self.mean_decoder, &mean_cache, &gmean3, &mut scratch);

        // Covariance path: gradient w.r.t. the weights, chained through the
        // diagonal activation on the center channel; in diagonal mode the
        // off-diagonal weights do not depend on the raw channels at all.
        let mut gw = nll_grad_weights(x, &mean, &factor)?;
        let n_channels = factor.pattern().offsets().len();
        for c in 0..n_channels {
            if c == center {
                for ((y, xx), graw) in gw.slice_mut(ndarray::s![.., .., c]).indexed_iter_mut() {
                    *graw *= diag_activation_grad(raw[(y, xx, c)], self.arch.diag_bound);
                }
            } else if diagonal {
                gw.slice_mut(ndarray::s![.., .., c]).fill(0.0);
            }
        }
        let graw3 = gw.permuted_axes([2, 0, 1]).as_standard_layout().to_owned();
        let mut scratch = vec![0.0; self.cov_net.n_params];
        let gz_cov = self.cov_net.backward(cov_params, &cov_cache, &graw3, &mut scratch);

        Ok((value, gz_mean + gz_cov))
    }

    /// nll(x, G(z), Sigma(z)) at fixed z with the full factor.
    pub fn nll_at(&self, x: &Array2<f64>, z: &Array1<f64>) -> Result<f64> {
        self.residual_nll(x, z, CovMode::Covar, 1.0)
    }

    /// nll(x, G(z), Sigma(z)) and its gradient with respect to z with the
    /// full factor.
    pub fn nll_z_grad(&self, x: &Array2<f64>, z: &Array1<f64>) -> Result<(f64, Array1<f64>)> {
        self.residual_nll_z_grad(x, z, CovMode::Covar, 1.0)
    }

    /// Draws x = G(z) + residual with the requested residual model.
    pub fn sample_image(
        &self,
        z: &Array1<f64>,
        u: &Array2<f64>,
        mode: CovMode,
        rho: f64,
    ) -> Result<Array2<f64>> {
        if u.dim() != (self.arch.image, self.arch.image) {
            return Err(Error::ShapeMismatch("noise image has wrong shape".into()));
        }
        let mean = self.decode_mean(z)?;
        let residual = match mode {
            CovMode::Identity => {
                if rho <= 0.0 {
                    return Err(Error::Config("identity mode needs rho > 0".into()));
                }
                u * rho.sqrt()
            }
            CovMode::Diagonal => self.decode_chol(z)?.diagonal_restriction().sample_residual(u)?,
            CovMode::Covar => self.decode_chol(z)?.sample_residual(u)?,
        };
        Ok(mean + residual)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let meta = serde_json::json!({
            "kind": CHECKPOINT_KIND,
            "arch": self.arch,
            "stage": self.stage,
        });
        let mut c = Container::new(meta);
        c.push("encoder", Array1::from_vec(self.encoder.clone()));
        c.push("mean_decoder", Array1::from_vec(self.mean_decoder.clone()));
        if let Some(w) = &self.cov_decoder {
            c.push("cov_decoder", Array1::from_vec(w.clone()));
        }
        c.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path_str = path.as_ref().display().to_string();
        let c = Container::load(path.as_ref())?;
        let corrupt = |reason: String| Error::Corrupt { path: path_str.clone(), reason };
        if c.meta["kind"] != CHECKPOINT_KIND {
            return Err(corrupt(format!("not a model checkpoint: kind = {}", c.meta["kind"])));
        }
        let arch: ArchConfig = serde_json::from_value(c.meta["arch"].clone())
            .map_err(|e| corrupt(format!("bad arch header: {e}")))?;
        arch.validate()?;
        let stage: Stage = serde_json::from_value(c.meta["stage"].clone())
            .map_err(|e| corrupt(format!("bad stage header: {e}")))?;

        let enc_net = EncoderNet::new(&arch);
        let mean_net = DecoderNet::new(&arch, 1, true);
        let cov_net = DecoderNet::new(&arch, arch.neighborhood.channels(), false);

        let vec_entry = |name: &str, expect: usize| -> Result<Vec<f64>> {
            let t = c.require(name)?;
            let a = t.as_f64()?;
            if a.len() != expect {
                return Err(corrupt(format!(
                    "{name} has {} weights, architecture expects {expect}",
                    a.len()
                )));
            }
            Ok(a.iter().copied().collect())
        };
        let encoder = vec_entry("encoder", enc_net.n_params)?;
        let mean_decoder = vec_entry("mean_decoder", mean_net.n_params)?;
        let cov_decoder = match stage {
            Stage::CovarianceTrained => Some(vec_entry("cov_decoder", cov_net.n_params)?),
            Stage::MeanTrained => {
                if c.get("cov_decoder").is_some() {
                    return Err(corrupt(
                        "mean-stage checkpoint carries covariance weights".into(),
                    ));
                }
                None
            }
        };
        Ok(Self { arch, stage, encoder, mean_decoder, cov_decoder, enc_net, mean_net, cov_net })
    }

    /// Loads and verifies the checkpoint was built for `expected` (useful
    /// when a config file and a checkpoint travel separately).
    pub fn load_with_arch(path: impl AsRef<Path>, expected: &ArchConfig) -> Result<Self> {
        let p = Self::load(path)?;
        if &p.arch != expected {
            return Err(Error::Config(format!(
                "checkpoint architecture {:?} does not match requested {:?}",
                p.arch, expected
            )));
        }
        Ok(p)
    }
}
