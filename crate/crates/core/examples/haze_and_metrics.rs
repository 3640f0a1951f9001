//! Haze one scene at increasing densities, score the hazy image, and show
//! that inverting the scattering model with the true transmission and
//! atmospheric light restores it.
//!
//! cargo run --release --example haze_and_metrics

use gridhaze::haze::{
    apply_haze, invert_haze, procedural_scene, synthetic_depth, transmission, DepthKind, DEFAULT_T_FLOOR,
};
use gridhaze::loss::{psnr, ssim};

fn main() -> gridhaze::Result<()> {
    let clear = procedural_scene(64, 64, 5);
    let depth = synthetic_depth(64, 64, DepthKind::Fractal, 5)?;
    let airlight = 0.85;
    println!("beta   hazy PSNR   hazy SSIM   restored PSNR");
    for beta in [0.2f32, 0.6, 1.0, 1.4, 1.8] {
        let t = transmission(&depth, beta)?;
        let hazy = apply_haze(&clear, &t, airlight)?;
        let restored = invert_haze(&hazy, &t, airlight, DEFAULT_T_FLOOR)?;
        println!(
            "{beta:4.1}   {:8.2}    {:8.4}    {:10.2}",
            psnr(&hazy, &clear, 1.0)?,
            ssim(&hazy, &clear)?,
            psnr(&restored, &clear, 1.0)?
        );
    }
    Ok(())
}
