//! Synthesizes a piecewise-smooth phantom dataset, prints summary
//! statistics, and writes train/test splits as container files.
//!
//! ```bash
//! cargo run --release --example make_phantoms
//! ```

use std::path::PathBuf;

use covae::data::{make_phantom_dataset, mean_total_variation, Split};
use covae::harness::{load_dataset, save_dataset};

fn main() -> covae::Result<()> {
    let out = PathBuf::from("target/example_out/make_phantoms");
    std::fs::create_dir_all(&out)?;

    // Disjoint seeds keep the splits non-overlapping.
    let train = make_phantom_dataset(64, 32, 32, 7, Split::Train)?;
    let test = make_phantom_dataset(8, 32, 32, 1007, Split::Test)?;

    for (name, ds) in [("train", &train), ("test", &test)] {
        let lo = ds.images.iter().flat_map(|i| i.iter()).cloned().fold(f64::INFINITY, f64::min);
        let hi = ds.images.iter().flat_map(|i| i.iter()).cloned().fold(0.0, f64::max);
        println!(
            "{name}: {} images of {:?}, range [{lo:.3}, {hi:.3}], mean TV {:.2}, fingerprint {:016x}",
            ds.images.len(),
            ds.images[0].dim(),
            mean_total_variation(&ds.images),
            ds.fingerprint(),
        );
    }

    let train_path = out.join("train.cvct");
    let test_path = out.join("test.cvct");
    save_dataset(&train, &train_path)?;
    save_dataset(&test, &test_path)?;

    // Round-trip check: the container format is exact for f64 images.
    let back = load_dataset(&train_path)?;
    assert_eq!(back.images.len(), train.images.len());
    assert_eq!(back.fingerprint(), train.fingerprint());
    println!("round-trip fingerprint matches");

    // ASCII-art preview of the first phantom.
    let shades = [' ', '.', ':', '-', '=', '+', '*', '#', '%', '@'];
    for row in train.images[0].rows() {
        let line: String = row
            .iter()
            .map(|&v| shades[((v * 9.0).round() as usize).min(9)])
            .collect();
        println!("|{line}|");
    }
    println!("wrote {} and {}", train_path.display(), test_path.display());
    Ok(())
}
