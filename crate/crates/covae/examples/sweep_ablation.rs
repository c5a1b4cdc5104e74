//! Runs a compact comparison sweep: the generative MAP method under its
//! three residual models against total variation and least squares, over
//! two undersampling levels, with regularization weights grid-searched to
//! maximize mean test PSNR. Emits the CSV/plot/manifest bundle a full
//! evaluation would.
//!
//! ```bash
//! cargo run --release --example sweep_ablation
//! ```

use std::path::PathBuf;

use covae::data::{make_phantom_dataset, Split};
use covae::harness::sweep::{run_sweep_on, ExperimentSpec, MethodSpec};
use covae::model::{ArchConfig, CovMode, NeighborhoodKind};
use covae::recon::{Method, ReconConfig};
use covae::train::{train, TrainConfig};

fn main() -> covae::Result<()> {
    let out = PathBuf::from("target/example_out/sweep_ablation");
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
    let train_set = make_phantom_dataset(48, arch.image, arch.image, 41, Split::Train)?;
    let test_set = make_phantom_dataset(4, arch.image, arch.image, 9041, Split::Test)?;

    println!("training the structured-covariance model...");
    let model = train(
        &train_set,
        arch,
        &TrainConfig {
            epochs_stage1: 40,
            epochs_stage2: 25,
            batch_size: 8,
            learning_rate: 1e-3,
            seed: 7,
            ..TrainConfig::default()
        },
    )?
    .params;

    let solver = ReconConfig { max_outer_iters: 10, ..ReconConfig::default() };
    let gen_method = |mode: CovMode| MethodSpec {
        ablation_mode: Some(mode),
        lambda_grid: vec![0.03, 0.1, 0.3],
        mu_grid: vec![0.1],
        solver: solver.clone(),
        ..MethodSpec::new(Method::GenMap)
    };
    let spec = ExperimentSpec {
        name: "ablation (example scale)".into(),
        dataset: PathBuf::new(), // dataset passed in memory below
        test_image_count: 0,
        seed: 17,
        spokes: vec![6, 10],
        noise: vec![0.02],
        methods: vec![
            gen_method(CovMode::Covar),
            gen_method(CovMode::Diagonal),
            gen_method(CovMode::Identity),
            MethodSpec {
                alpha_grid: vec![0.01, 0.05],
                ..MethodSpec::new(Method::Tv)
            },
            MethodSpec::new(Method::LeastSquares),
        ],
    };
    // Models keyed by label skip checkpoint loading.
    let preloaded: Vec<(String, covae::model::ModelParams, Option<covae::train::DenoiserParams>)> =
        [CovMode::Covar, CovMode::Diagonal, CovMode::Identity]
            .iter()
            .map(|m| (format!("mean+{m}"), model.clone(), None))
            .collect();

    let spec_text = toml::to_string(&spec).map_err(|e| covae::Error::Config(e.to_string()))?;
    let report = run_sweep_on(&spec, &spec_text, &out, &test_set, Some(&preloaded))?;

    println!("\n{:<16} {:>7} {:>10} {:>8}", "method", "spokes", "PSNR (dB)", "picked");
    for row in &report.summary {
        println!(
            "{:<16} {:>7} {:>10.2} {:>8}",
            row.label, row.spokes, row.mean_psnr, row.chosen_params
        );
    }
    assert!(report.failures.is_empty(), "some reconstructions failed");
    println!("\nCSVs, plots, and manifest in {}", report.out_dir.display());
    Ok(())
}
