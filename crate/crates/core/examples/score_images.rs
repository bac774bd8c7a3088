//! SSIM and PSNR of progressively degraded images.

use mkor::datasets::{resize_nearest, synth_dataset, upscale_bilinear};
use mkor::metrics::{psnr, ssim};

fn main() -> mkor::Result<()> {
    let img = synth_dataset(1, 1, 32, 32, 3, 4).remove(0).image;
    println!("identity: SSIM {:.4}, PSNR {}", ssim(&img, &img)?, psnr(&img, &img)?);
    for side in [16, 8, 4] {
        let coarse = resize_nearest(&img, side, side)?;
        let back = upscale_bilinear(&coarse, 32, 32)?;
        println!(
            "via {}x{}: SSIM {:.4}, PSNR {:.2} dB",
            side,
            side,
            ssim(&img, &back)?,
            psnr(&img, &back)?
        );
    }
    let dark = img.map(|v| v * 0.5);
    println!(
        "half brightness: SSIM {:.4}, PSNR {:.2} dB",
        ssim(&img, &dark)?,
        psnr(&img, &dark)?
    );
    Ok(())
}
