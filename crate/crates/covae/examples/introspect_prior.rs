//! Visualizes what the covariance decoder learned: rows of the implied
//! pixel covariance matrix, reshaped into images (red = positive, blue =
//! negative correlation with the probed pixel, which is marked green).
//!
//! ```bash
//! cargo run --release --example introspect_prior
//! ```

use std::path::PathBuf;

use covae::data::{make_phantom_dataset, Split};
use covae::harness::run_introspection;
use covae::model::{ArchConfig, NeighborhoodKind};
use covae::train::{train, TrainConfig};

fn main() -> covae::Result<()> {
    let out = PathBuf::from("target/example_out/introspect_prior");
    std::fs::create_dir_all(&out)?;

    let arch = ArchConfig {
        image: 16,
        latent: 8,
        base: 2,
        dense_channels: 2,
        initial_channels: 8,
        up_channels: vec![16, 8, 8],
        neighborhood: NeighborhoodKind::Causal3x3,
        diag_bound: 3.0,
        dropout: 0.1,
    };
    let train_set = make_phantom_dataset(48, arch.image, arch.image, 51, Split::Train)?;
    let probe = make_phantom_dataset(1, arch.image, arch.image, 9051, Split::Test)?;

    println!("training (the covariance decoder is what we want to look at)...");
    let model = train(
        &train_set,
        arch,
        &TrainConfig {
            epochs_stage1: 40,
            epochs_stage2: 30,
            batch_size: 8,
            learning_rate: 1e-3,
            seed: 13,
            ..TrainConfig::default()
        },
    )?
    .params;

    // Probe a few pixels: an interior one, an edge-adjacent one, a corner.
    let n = model.arch.image;
    let pixels = [(n / 2, n / 2), (n / 4, 3 * n / 4), (1, 1)];
    let written = run_introspection(&model, &probe.images[0], &pixels, &out)?;
    for p in &written {
        println!("wrote {}", p.display());
    }
    println!(
        "each PNG is one row of the {0}x{0}-pixel covariance, reshaped to {1}x{1}",
        n * n,
        n
    );
    Ok(())
}
