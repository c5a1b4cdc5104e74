//! Trains the residual CNN denoiser used by the plug-and-play solver and
//! measures its gain over the noisy input on held-out images.
//!
//! ```bash
//! cargo run --release --example train_denoiser
//! ```

use std::path::PathBuf;

use covae::data::{make_phantom_dataset, Split};
use covae::recon::psnr;
use covae::train::{train_denoiser, DenoiserConfig, DenoiserParams};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn main() -> covae::Result<()> {
    let out = PathBuf::from("target/example_out/train_denoiser");
    std::fs::create_dir_all(&out)?;

    let noise_level = 0.05;
    let train_set = make_phantom_dataset(48, 16, 16, 21, Split::Train)?;
    let held_out = make_phantom_dataset(6, 16, 16, 9021, Split::Test)?;

    let cfg = DenoiserConfig { channels: 16, layers: 5, epochs: 12, ..DenoiserConfig::default() };
    println!(
        "training a {}-layer, {}-channel residual denoiser at noise {noise_level}...",
        cfg.layers, cfg.channels
    );
    let params = train_denoiser(&train_set, noise_level, &cfg)?;

    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut noisy_psnr = 0.0;
    let mut denoised_psnr = 0.0;
    for img in &held_out.images {
        let noisy = img
            + &Array2::from_shape_simple_fn(img.dim(), || {
                noise_level * rng.sample::<f64, _>(StandardNormal)
            });
        noisy_psnr += psnr(&noisy, img);
        denoised_psnr += psnr(&params.apply(&noisy), img);
    }
    noisy_psnr /= held_out.images.len() as f64;
    denoised_psnr /= held_out.images.len() as f64;
    println!("held-out mean PSNR: noisy {noisy_psnr:.2} dB, denoised {denoised_psnr:.2} dB");

    let ckpt = out.join("denoiser.cvct");
    params.save(&ckpt)?;
    let back = DenoiserParams::load(&ckpt)?;
    assert_eq!(back.weights, params.weights);
    println!("checkpoint round-trips exactly: {}", ckpt.display());
    Ok(())
}
