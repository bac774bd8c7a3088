//! What clipping and Gaussian noise do to the uploaded gradient and to reconstructions.

use mkor::datasets::{load_mnist_dir, make_batch, mnist_dir, synth_dataset, zero_border, BatchSpec};
use mkor::fl::leakage::closed_form_leakage;
use mkor::fl::{leakage_decay_experiment, run_attack, AttackConfig};
use mkor::nn::{ModelConfig, Variant};

fn main() -> mkor::Result<()> {
    let data = load_mnist_dir(mnist_dir(), false).unwrap_or_else(|_| {
        let mut d = synth_dataset(10, 20, 28, 28, 1, 0);
        d.iter_mut().for_each(|x| zero_border(&mut x.image, 4).unwrap());
        d
    });
    let batch = make_batch(&data, &BatchSpec::random(100, 0))?;
    for (clip, sigma) in [(None, None), (Some(10.0), None), (None, Some(1e-2)), (None, Some(1e-1))] {
        let mut cfg = AttackConfig::new(ModelConfig::new(Variant::Lenet5Original, 10));
        cfg.defense.clip = clip;
        cfg.defense.sigma_dp = sigma;
        let out = run_attack(&cfg, &batch)?;
        let s = out.report.score.unwrap();
        println!(
            "clip {:?} noise {:?}: {} classes, avg SSIM {:.3}, avg PSNR {:.2}, clipped {}",
            clip,
            sigma,
            s.per_class.len(),
            s.avg_ssim,
            s.avg_psnr,
            out.client.clipped
        );
    }

    let curve = leakage_decay_experiment(8, &[2, 4, 16, 64, 256], 5000, 0)?;
    for p in &curve.points {
        println!(
            "K {:>3}: leakage {:.4} nats/dim (closed form {:.4})",
            p.k,
            p.sampled,
            closed_form_leakage(p.k)
        );
    }
    println!(
        "slopes: closed form {:.3}, sampled {:.3}",
        curve.closed_form_slope, curve.sampled_slope
    );
    Ok(())
}
