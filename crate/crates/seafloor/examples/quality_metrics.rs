//! PSNR, SSIM and UIQM under growing additive noise.
//!
//!     cargo run --example quality_metrics

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use seafloor::imagecore::RasterImage;
use seafloor::metrics::{psnr, ssim, uiqm};

fn add_noise(img: &RasterImage, sigma: f64, seed: u64) -> RasterImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = img.clone();
    for v in out.data_mut() {
        let u1: f64 = rng.gen_range(1e-12..1.0);
        let u2: f64 = rng.gen();
        let g = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
        *v = (*v + sigma * g).clamp(0.0, 1.0);
    }
    out
}

fn main() -> seafloor::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let reference = RasterImage::from_fn(64, 64, 3, |y, x, c| {
        let wave = ((y as f64 / 6.0).sin() * (x as f64 / 9.0).cos() + 1.0) / 2.0;
        0.2 + 0.6 * wave * (1.0 - 0.2 * c as f64) + 0.05 * rng.gen::<f64>()
    });

    let base = uiqm(&reference)?;
    println!("reference UIQM {:.4} (uicm {:.4}, uism {:.4}, uiconm {:.4})",
        base.uiqm, base.uicm, base.uism, base.uiconm);
    println!("{:>8} {:>10} {:>8} {:>8}", "sigma", "psnr(dB)", "ssim", "uiqm");
    for (i, sigma) in [0.0, 0.01, 0.05, 0.1].into_iter().enumerate() {
        let test = add_noise(&reference, sigma, 10 + i as u64);
        let p = psnr(&reference, &test)?;
        let s = ssim(&reference, &test)?;
        let u = uiqm(&test)?;
        let p_str = if p.is_infinite() { "inf".to_string() } else { format!("{p:.2}") };
        println!("{sigma:>8.2} {p_str:>10} {s:>8.4} {:>8.4}", u.uiqm);
    }
    Ok(())
}
