//! Thin command-line driver. All real work lives in the library; this
//! binary parses arguments, loads TOML configs, applies flag overrides,
//! and maps library errors to documented exit codes:
//!
//! - 0: success
//! - 2: usage error (unknown subcommand or flag)
//! - 3: missing artifact (dataset, checkpoint, config file)
//! - 4: invalid or corrupt configuration/file
//! - 5: numeric failure, divergence, or violated invariant
//! - 6: I/O failure

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use covae::data::{ingest_magnitude_volumes, make_phantom_dataset, Split};
use covae::error::{Error, Result};
use covae::harness::{
    config_hash, load_dataset, load_measurement, load_toml, loss_curve_plot, make_run_dir,
    run_introspection, run_sweep, save_dataset, save_grayscale_png, save_measurement,
    save_recon_result, write_tensor, DataFileConfig, ExperimentSpec, IntrospectFileConfig,
    ReconFileConfig, RunManifest, SampleFileConfig, TrainFileConfig,
};
use covae::model::{CovMode, ModelParams};
use covae::mri::acquire;
use covae::recon::{
    psnr, reconstruct_gen_map, reconstruct_least_squares, reconstruct_narnhofer,
    reconstruct_pnp_admm, reconstruct_range, reconstruct_tv, Method, ReconResult,
};
use covae::train::{train, train_denoiser, DenoiserParams};

#[derive(Parser)]
#[command(
    name = "covae",
    version,
    about = "Structured-covariance generative priors for undersampled MRI reconstruction"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic phantom datasets or ingest magnitude volumes.
    MakeData(MakeDataArgs),
    /// Train the two-stage generative model or the residual denoiser.
    Train(TrainArgs),
    /// Reconstruct one measurement with any method.
    Reconstruct(ReconstructArgs),
    /// Run a comparison sweep from an experiment file.
    Sweep(SweepArgs),
    /// Render learned covariance rows for chosen pixels.
    Introspect(IntrospectArgs),
    /// Draw samples from the trained model.
    Sample(SampleArgs),
}

#[derive(Args)]
struct MakeDataArgs {
    /// TOML config (kind, counts, sizes, output paths).
    #[arg(long)]
    config: PathBuf,
    /// Override the config's generator seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the train-split output path.
    #[arg(long)]
    out_train: Option<PathBuf>,
    /// Override the test-split output path.
    #[arg(long)]
    out_test: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// TOML config (dataset, architecture, [vae] or [denoiser] table).
    #[arg(long)]
    config: PathBuf,
    /// Override the training seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the residual-model ablation mode (identity, diagonal, covar).
    #[arg(long)]
    mode: Option<CovMode>,
    /// Override the checkpoint output path.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReconstructArgs {
    /// TOML config (measurement source, solver settings, output dir).
    #[arg(long)]
    config: PathBuf,
    /// Override the solver method.
    #[arg(long)]
    method: Option<Method>,
    /// Override the acquisition seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    /// Experiment TOML (dataset, sweep axes, methods and their grids).
    #[arg(long)]
    config: PathBuf,
    /// Base directory; the run directory (timestamp + config hash) is
    /// created inside it.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    /// Override the experiment seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct IntrospectArgs {
    /// TOML config (checkpoint, image source, pixel list, output dir).
    #[arg(long)]
    config: PathBuf,
    /// Override the output directory.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct SampleArgs {
    /// TOML config (checkpoint, count, residual mode, output dir).
    #[arg(long)]
    config: PathBuf,
    /// Override the sampling seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the number of samples.
    #[arg(long)]
    count: Option<usize>,
    /// Override the output directory.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::MakeData(args) => cmd_make_data(args),
        Command::Train(args) => cmd_train(args),
        Command::Reconstruct(args) => cmd_reconstruct(args),
        Command::Sweep(args) => cmd_sweep(args),
        Command::Introspect(args) => cmd_introspect(args),
        Command::Sample(args) => cmd_sample(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn cmd_make_data(args: MakeDataArgs) -> Result<()> {
    let (mut cfg, _text): (DataFileConfig, _) = load_toml(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(p) = args.out_train {
        cfg.out_train = p;
    }
    if let Some(p) = args.out_test {
        cfg.out_test = p;
    }
    let (train_ds, test_ds) = match cfg.kind.as_str() {
        "phantom" => {
            let train_ds =
                make_phantom_dataset(cfg.train_count, cfg.image, cfg.image, cfg.seed, Split::Train)?;
            // Disjoint seed stream for the held-out split.
            let test_ds = make_phantom_dataset(
                cfg.test_count,
                cfg.image,
                cfg.image,
                cfg.seed.wrapping_add(0x5eed_0f7e_57),
                Split::Test,
            )?;
            (train_ds, test_ds)
        }
        "ingest" => {
            let dir = cfg.source_dir.as_ref().ok_or_else(|| {
                Error::Config("kind = \"ingest\" requires source_dir".into())
            })?;
            ingest_magnitude_volumes(dir, cfg.image)?
        }
        other => {
            return Err(Error::Config(format!(
                "unknown data kind {other:?} (expected phantom or ingest)"
            )))
        }
    };
    save_dataset(&train_ds, &cfg.out_train)?;
    save_dataset(&test_ds, &cfg.out_test)?;
    println!(
        "wrote {} train images to {} and {} test images to {}",
        train_ds.images.len(),
        cfg.out_train.display(),
        test_ds.images.len(),
        cfg.out_test.display()
    );
    Ok(())
}

fn write_curves_csv(path: &PathBuf, stage1: &[f64], stage2: &[f64]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["stage", "epoch", "loss"]).map_err(csv_err)?;
    for (stage, curve) in [("1", stage1), ("2", stage2)] {
        for (epoch, loss) in curve.iter().enumerate() {
            w.write_record([stage, &epoch.to_string(), &loss.to_string()])
                .map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    Error::Config(format!("csv: {e}"))
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let (mut cfg, text): (TrainFileConfig, _) = load_toml(&args.config)?;
    cfg.validate()?;
    if let Some(p) = args.out {
        cfg.out = p;
    }
    let dataset = load_dataset(&cfg.dataset)?;
    if let Some(parent) = cfg.out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }

    if let Some(den) = &cfg.denoiser {
        let mut dcfg = den.config.clone();
        if let Some(seed) = args.seed {
            dcfg.seed = seed;
        }
        let params = train_denoiser(&dataset, den.noise_level, &dcfg)?;
        params.save(&cfg.out)?;
        println!("wrote denoiser checkpoint to {}", cfg.out.display());
    } else {
        let arch = cfg.arch.resolve()?;
        let mut vcfg = cfg.vae.clone().unwrap_or_default();
        if let Some(seed) = args.seed {
            vcfg.seed = seed;
        }
        if let Some(mode) = args.mode {
            vcfg.ablation_mode = mode;
        }
        let result = train(&dataset, arch, &vcfg)?;
        result.params.save(&cfg.out)?;
        if let Some(curves) = &cfg.curves {
            write_curves_csv(curves, &result.stage1_curve, &result.stage2_curve)?;
            let mut pairs: Vec<(&str, &[f64])> =
                vec![("stage 1 loss", result.stage1_curve.as_slice())];
            if !result.stage2_curve.is_empty() {
                pairs.push(("stage 2 loss", result.stage2_curve.as_slice()));
            }
            loss_curve_plot(
                curves.with_extension("png"),
                "training loss per epoch",
                &pairs,
            )?;
        }
        if let Some(manifest_path) = &cfg.manifest {
            let manifest =
                RunManifest::new(&text, vcfg.seed, Some(dataset.fingerprint()));
            manifest.write(manifest_path)?;
        }
        println!(
            "wrote {} checkpoint to {} (stage-1 final loss {:.4}{})",
            vcfg.ablation_mode,
            cfg.out.display(),
            result.stage1_curve.last().copied().unwrap_or(f64::NAN),
            result
                .stage2_curve
                .last()
                .map(|l| format!(", stage-2 final loss {l:.4}"))
                .unwrap_or_default()
        );
    }
    Ok(())
}

fn run_method(
    cfg: &ReconFileConfig,
    meas: &covae::mri::Measurement,
) -> Result<ReconResult> {
    let solver = &cfg.solver;
    let needs_model = matches!(
        solver.method,
        Method::GenMap | Method::Range | Method::Narnhofer
    );
    let model = if needs_model {
        let path = cfg.checkpoint.as_ref().ok_or_else(|| {
            Error::Config(format!("method {} requires a checkpoint", solver.method))
        })?;
        Some(ModelParams::load(path)?)
    } else {
        None
    };
    match solver.method {
        Method::GenMap => reconstruct_gen_map(meas, model.as_ref().unwrap(), solver),
        Method::Range => reconstruct_range(meas, model.as_ref().unwrap(), solver),
        Method::Narnhofer => reconstruct_narnhofer(meas, model.as_ref().unwrap(), solver),
        Method::LeastSquares => reconstruct_least_squares(meas, solver),
        Method::Tv => reconstruct_tv(meas, solver),
        Method::PnpAdmm => {
            let path = cfg.denoiser.as_ref().ok_or_else(|| {
                Error::Config("pnp_admm requires a denoiser checkpoint".into())
            })?;
            let den = DenoiserParams::load(path)?;
            let apply = |x: &Array2<f64>| den.apply(x);
            reconstruct_pnp_admm(meas, &apply, solver)
        }
    }
}

fn cmd_reconstruct(args: ReconstructArgs) -> Result<()> {
    let (mut cfg, text): (ReconFileConfig, _) = load_toml(&args.config)?;
    if let Some(m) = args.method {
        cfg.solver.method = m;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(p) = args.out_dir {
        cfg.out_dir = p;
    }
    cfg.validate()?;
    cfg.solver.validate()?;

    // Ground truth is known only when acquiring from a dataset image.
    let (meas, truth) = if let Some(path) = &cfg.measurement {
        (load_measurement(path)?, None)
    } else {
        let dataset = load_dataset(cfg.dataset.as_ref().expect("validated"))?;
        let image = dataset.images.get(cfg.image_index).ok_or_else(|| {
            Error::IndexOutOfRange(format!(
                "image {} of a {}-image dataset",
                cfg.image_index,
                dataset.images.len()
            ))
        })?;
        let mask_spec = cfg.mask.as_ref().expect("validated");
        let mask = mask_spec.build(image.nrows(), image.ncols(), cfg.seed)?;
        let meas = acquire(image, &mask, cfg.noise, cfg.seed)?;
        (meas, Some(image.clone()))
    };

    let result = run_method(&cfg, &meas)?;
    let psnr_db = truth.as_ref().map(|t| psnr(&result.image, t));

    std::fs::create_dir_all(&cfg.out_dir)?;
    save_measurement(&meas, cfg.out_dir.join("measurement.cvct"))?;
    let (image_path, meta_path) = save_recon_result(&result, psnr_db, &cfg.out_dir, "result")?;
    save_grayscale_png(&result.image, &cfg.out_dir.join("result.png"))?;
    RunManifest::new(&text, cfg.seed, None).write(cfg.out_dir.join("manifest.json"))?;

    println!(
        "method {}: {} iterations, final objective {:.6e}{}",
        cfg.solver.method,
        result.iterations_used,
        result.objective_trace.last().copied().unwrap_or(f64::NAN),
        psnr_db
            .map(|p| format!(", psnr {p:.2} dB"))
            .unwrap_or_default()
    );
    println!("wrote {} and {}", image_path.display(), meta_path.display());
    Ok(())
}

fn cmd_sweep(args: SweepArgs) -> Result<()> {
    let (mut spec, text): (ExperimentSpec, _) = load_toml(&args.config)?;
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    let run_dir = make_run_dir(&args.out, &text)?;
    println!("experiment {:?} (config {})", spec.name, &config_hash(&text)[..8]);
    println!("run directory: {}", run_dir.display());
    let report = run_sweep(&spec, &text, &run_dir)?;
    for row in &report.summary {
        println!(
            "{:<16} spokes={:<3} noise={:<7} psnr {:>6.2} ± {:.2} dB  ({})",
            row.label, row.spokes, row.noise, row.mean_psnr, row.std_psnr, row.chosen_params
        );
    }
    if report.failures.is_empty() {
        Ok(())
    } else {
        // Partial results are on disk; surface the failure count loudly.
        Err(Error::Invariant(format!(
            "{} reconstruction(s) failed; see {}",
            report.failures.len(),
            run_dir.join("failures.txt").display()
        )))
    }
}

fn cmd_introspect(args: IntrospectArgs) -> Result<()> {
    let (mut cfg, _text): (IntrospectFileConfig, _) = load_toml(&args.config)?;
    if let Some(p) = args.out_dir {
        cfg.out_dir = p;
    }
    cfg.validate()?;
    let params = ModelParams::load(&cfg.checkpoint)?;
    let image = if let Some(ds_path) = &cfg.dataset {
        let dataset = load_dataset(ds_path)?;
        dataset
            .images
            .get(cfg.image_index)
            .ok_or_else(|| {
                Error::IndexOutOfRange(format!(
                    "image {} of a {}-image dataset",
                    cfg.image_index,
                    dataset.images.len()
                ))
            })?
            .clone()
    } else {
        let t = covae::harness::read_tensor(cfg.image.as_ref().expect("validated"))?;
        t.as_f64_any()?
            .into_dimensionality()
            .map_err(|_| Error::ShapeMismatch("introspection image must be 2-D".into()))?
    };
    let pixels: Vec<(usize, usize)> = cfg.pixels.iter().map(|&[r, c]| (r, c)).collect();
    let written = run_introspection(&params, &image, &pixels, &cfg.out_dir)?;
    for p in &written {
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn cmd_sample(args: SampleArgs) -> Result<()> {
    let (mut cfg, _text): (SampleFileConfig, _) = load_toml(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(count) = args.count {
        cfg.count = count;
    }
    if let Some(p) = args.out_dir {
        cfg.out_dir = p;
    }
    if cfg.count == 0 {
        return Err(Error::Config("sample count must be >= 1".into()));
    }
    let params = ModelParams::load(&cfg.checkpoint)?;
    std::fs::create_dir_all(&cfg.out_dir)?;
    let n = params.arch.image;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for idx in 0..cfg.count {
        let z = Array1::from_shape_simple_fn(params.arch.latent, || {
            rng.sample::<f64, _>(StandardNormal)
        });
        let u = Array2::from_shape_simple_fn((n, n), || rng.sample::<f64, _>(StandardNormal));
        let mean = params.decode_mean(&z)?;
        let sample = params.sample_image(&z, &u, cfg.mode, cfg.rho)?;
        save_grayscale_png(&mean, &cfg.out_dir.join(format!("sample_{idx}_mean.png")))?;
        save_grayscale_png(&sample, &cfg.out_dir.join(format!("sample_{idx}.png")))?;
        write_tensor(
            cfg.out_dir.join(format!("sample_{idx}.cvrt")),
            &sample.into(),
        )?;
    }
    println!(
        "wrote {} {} sample(s) to {}",
        cfg.count,
        cfg.mode,
        cfg.out_dir.display()
    );
    Ok(())
}
