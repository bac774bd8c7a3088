//! Inject, simulate one client and reconstruct, on MNIST when present.

use mkor::datasets::netpbm::write_image;
use mkor::datasets::{load_mnist_dir, make_batch, mnist_dir, synth_dataset, zero_border, BatchSpec};
use mkor::fl::{run_attack, AttackConfig};
use mkor::nn::{ModelConfig, Variant};

fn main() -> mkor::Result<()> {
    let variant = std::env::args()
        .nth(1)
        .map(|s| Variant::parse(&s))
        .transpose()?
        .unwrap_or(Variant::Lenet5Modified);
    let data = load_mnist_dir(mnist_dir(), false).unwrap_or_else(|_| {
        let mut d = synth_dataset(10, 20, 28, 28, 1, 0);
        d.iter_mut().for_each(|x| zero_border(&mut x.image, 4).unwrap());
        d
    });
    let batch = make_batch(&data, &BatchSpec::unique(10, 0))?;
    let out = run_attack(&AttackConfig::new(ModelConfig::new(variant, 10)), &batch)?;
    let s = out.report.score.as_ref().unwrap();
    for c in &s.per_class {
        println!("class {:>2}: SSIM {:.4}  PSNR {:.2}", c.label, c.ssim, c.psnr);
    }
    println!(
        "avg SSIM {:.4}, avg PSNR {:.2}, {:?}",
        s.avg_ssim, s.avg_psnr, out.timings
    );

    let dir = std::env::temp_dir().join("mkor_end_to_end");
    std::fs::create_dir_all(&dir).map_err(|e| mkor::MkorError::io(&dir, e))?;
    for (label, img) in &out.images {
        write_image(dir.join(format!("{}.pgm", label)), img)?;
    }
    println!("reconstructions in {}", dir.display());
    Ok(())
}
