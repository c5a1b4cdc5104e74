//! TEMPORARY calibration harness for picking acceptance-scale constants.
//! Not part of the public example set; deleted before release.

use std::time::Instant;

use covae::data::{make_phantom_dataset, Split};
use covae::model::{ArchConfig, CovMode};
use covae::mri::{acquire, adjoint, make_radial_mask};
use covae::recon::{
    psnr, reconstruct_gen_map, reconstruct_pnp_admm, reconstruct_range, reconstruct_tv, Method,
    PnpConfig, ReconConfig,
};
use covae::train::{train, train_denoiser, train_stage2, DenoiserConfig, TrainConfig};

fn main() -> covae::Result<()> {
    let arch = ArchConfig::desk();
    let train_set = make_phantom_dataset(256, 32, 32, 101, Split::Train)?;
    let test_set = make_phantom_dataset(20, 32, 32, 90101, Split::Test)?;

    let cfg = TrainConfig {
        epochs_stage1: 120,
        epochs_stage2: 120,
        batch_size: 16,
        learning_rate: 1e-3,
        seed: 11,
        ..TrainConfig::default()
    };
    let t0 = Instant::now();
    let covar = train(&train_set, arch.clone(), &cfg)?;
    let t_train = t0.elapsed().as_secs_f64();
    println!(
        "train covar: {t_train:.0}s  s1 {:.1}->{:.1}  s2 {:.1}->{:.1}",
        covar.stage1_curve[0],
        covar.stage1_curve.last().unwrap(),
        covar.stage2_curve[0],
        covar.stage2_curve.last().unwrap()
    );

    let t0 = Instant::now();
    let diag_cfg = TrainConfig { ablation_mode: CovMode::Diagonal, ..cfg.clone() };
    let diag = train_stage2(&covar.params.to_mean_stage(), &train_set, &diag_cfg)?;
    println!(
        "train diagonal stage2: {:.0}s  s2 {:.1}->{:.1}",
        t0.elapsed().as_secs_f64(),
        diag.stage2_curve[0],
        diag.stage2_curve.last().unwrap()
    );

    let t0 = Instant::now();
    let denoiser = train_denoiser(
        &train_set,
        0.05,
        &DenoiserConfig { epochs: 30, ..DenoiserConfig::default() },
    )?;
    println!("train denoiser: {:.0}s", t0.elapsed().as_secs_f64());

    // Held-out nll: structured vs diagonal vs isotropic (identity), same
    // full-log-det convention.
    let rho = cfg.rho;
    let (mut s_cov, mut s_diag, mut s_id) = (0.0, 0.0, 0.0);
    for img in &test_set.images {
        let z = covar.params.encode(img)?.mu;
        s_cov += covar.params.residual_nll(img, &z, CovMode::Covar, rho)?;
        let zd = diag.params.encode(img)?.mu;
        s_diag += diag.params.residual_nll(img, &zd, CovMode::Diagonal, rho)?;
        let mean = covar.params.decode_mean(&z)?;
        let misfit: f64 = (img - &mean).iter().map(|r| r * r).sum();
        s_id += (img.len() as f64) * rho.ln() + misfit / (2.0 * rho);
    }
    let n = test_set.images.len() as f64;
    println!(
        "held-out nll: covar {:.1}  diag {:.1}  identity {:.1}",
        s_cov / n,
        s_diag / n,
        s_id / n
    );

    // Reconstruction pilot on 5 test images.
    let pilot = &test_set.images[..5];
    let noise = 0.05;
    for spokes in [5usize, 15, 25] {
        let mask = make_radial_mask(32, 32, spokes)?;
        let meas: Vec<_> = pilot
            .iter()
            .enumerate()
            .map(|(i, x)| acquire(x, &mask, noise, 1000 + i as u64).unwrap())
            .collect();
        let adj_psnr: f64 = meas
            .iter()
            .zip(pilot)
            .map(|(m, x)| psnr(&adjoint(&m.values, &m.mask).unwrap(), x))
            .sum::<f64>()
            / 5.0;
        print!("spokes {spokes:>2}: adj {adj_psnr:5.2}");

        for (label, model, mode) in [
            ("covar", &covar.params, CovMode::Covar),
            ("diag", &diag.params, CovMode::Diagonal),
            ("ident", &covar.params, CovMode::Identity),
        ] {
            let mut best = f64::NEG_INFINITY;
            let mut best_l = 0.0;
            for lambda in [0.03, 0.1, 0.3, 1.0] {
                let rc = ReconConfig {
                    method: Method::GenMap,
                    lambda,
                    mu: 0.1,
                    ablation_mode: mode,
                    max_outer_iters: 10,
                    ..ReconConfig::default()
                };
                let mean: f64 = meas
                    .iter()
                    .zip(pilot)
                    .map(|(m, x)| {
                        reconstruct_gen_map(m, model, &rc)
                            .map(|r| psnr(&r.image, x))
                            .unwrap_or(f64::NAN)
                    })
                    .sum::<f64>()
                    / 5.0;
                if mean > best {
                    best = mean;
                    best_l = lambda;
                }
            }
            print!("  {label} {best:5.2}(l={best_l})");
        }

        // Range search.
        let mut best = f64::NEG_INFINITY;
        let mut best_m = 0.0;
        for mu in [0.001, 0.01, 0.1] {
            let rc = ReconConfig {
                method: Method::Range,
                mu,
                max_outer_iters: 10,
                ..ReconConfig::default()
            };
            let mean: f64 = meas
                .iter()
                .zip(pilot)
                .map(|(m, x)| {
                    reconstruct_range(m, &covar.params, &rc)
                        .map(|r| psnr(&r.image, x))
                        .unwrap_or(f64::NAN)
                })
                .sum::<f64>()
                / 5.0;
            if mean > best {
                best = mean;
                best_m = mu;
            }
        }
        print!("  range {best:5.2}(m={best_m})");

        // TV.
        let mut best = f64::NEG_INFINITY;
        let mut best_a = 0.0;
        for alpha in [0.01, 0.03, 0.1, 0.3] {
            let rc = ReconConfig { method: Method::Tv, tv_weight: alpha, ..ReconConfig::default() };
            let mean: f64 = meas
                .iter()
                .zip(pilot)
                .map(|(m, x)| {
                    reconstruct_tv(m, &rc).map(|r| psnr(&r.image, x)).unwrap_or(f64::NAN)
                })
                .sum::<f64>()
                / 5.0;
            if mean > best {
                best = mean;
                best_a = alpha;
            }
        }
        println!("  tv {best:5.2}(a={best_a})");
    }

    // PnP calibration at 25 spokes.
    let mask = make_radial_mask(32, 32, 25)?;
    let meas: Vec<_> = pilot
        .iter()
        .enumerate()
        .map(|(i, x)| acquire(x, &mask, noise, 2000 + i as u64).unwrap())
        .collect();
    let adj_psnr: f64 = meas
        .iter()
        .zip(pilot)
        .map(|(m, x)| psnr(&adjoint(&m.values, &m.mask).unwrap(), x))
        .sum::<f64>()
        / 5.0;
    println!("pnp pilot, 25 spokes: adjoint {adj_psnr:.2}");
    for iters in [2usize, 3, 4, 6] {
        for eta in [0.2, 0.5, 1.0] {
            for sigma in [0.05, 0.1] {
                let rc = ReconConfig {
                    method: Method::PnpAdmm,
                    pnp: PnpConfig { sigma, eta, iters },
                    ..ReconConfig::default()
                };
                let apply = |x: &ndarray::Array2<f64>| denoiser.apply(x);
                let mean: f64 = meas
                    .iter()
                    .zip(pilot)
                    .map(|(m, x)| {
                        reconstruct_pnp_admm(m, &apply, &rc)
                            .map(|r| psnr(&r.image, x))
                            .unwrap_or(f64::NAN)
                    })
                    .sum::<f64>()
                    / 5.0;
                print!("  it{iters}/e{eta}/s{sigma}:{mean:5.2}");
            }
        }
        println!();
    }
    Ok(())
}
