//! Unique, random and capped batches, exported as PGM files.

use std::collections::BTreeMap;

use mkor::datasets::netpbm::write_image;
use mkor::datasets::{load_mnist_dir, make_batch, mnist_dir, synth_dataset, BatchSpec};

fn main() -> mkor::Result<()> {
    let data = load_mnist_dir(mnist_dir(), false).unwrap_or_else(|e| {
        eprintln!("{}; using synthetic images", e);
        synth_dataset(10, 50, 28, 28, 1, 0)
    });
    for spec in [
        BatchSpec::unique(10, 1),
        BatchSpec::random(100, 1),
        BatchSpec::capped(100, 3, 1),
    ] {
        let batch = make_batch(&data, &spec)?;
        let mut hist = BTreeMap::new();
        for d in &batch {
            *hist.entry(d.label).or_insert(0) += 1;
        }
        let singletons = hist.values().filter(|&&n| n == 1).count();
        println!(
            "{:?} K={}: {} classes, {} singletons, {:?}",
            spec.regime,
            spec.size,
            hist.len(),
            singletons,
            hist
        );
    }

    let out = std::env::temp_dir().join("mkor_batch");
    std::fs::create_dir_all(&out).map_err(|e| mkor::MkorError::io(&out, e))?;
    for (i, d) in make_batch(&data, &BatchSpec::unique(10, 2))?.iter().enumerate() {
        write_image(out.join(format!("{:02}_label{}.pgm", i, d.label)), &d.image)?;
    }
    println!("wrote 10 images to {}", out.display());
    Ok(())
}
