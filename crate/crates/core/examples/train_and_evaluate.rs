//! Train on procedurally generated indoor-protocol pairs and compare the
//! held-out PSNR / SSIM against the hazy inputs.
//!
//! cargo run --release --example train_and_evaluate -- [steps] [base_channels] [patch]

use std::time::Instant;

use gridhaze::haze::{procedural_dataset, SynthOptions};
use gridhaze::network::GridConfig;
use gridhaze::train::{evaluate, hazy_baseline, TrainConfig, Trainer};

fn main() -> gridhaze::Result<()> {
    let mut args = std::env::args().skip(1);
    let steps: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(2000);
    let base: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(8);
    let patch: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(32);

    let opts = SynthOptions::indoor();
    let train = procedural_dataset(16, 64, 64, &opts, 100)?;
    let test = procedural_dataset(4, 64, 64, &opts, 200)?;
    let grid = GridConfig::default()
        .with_base_channels(base)
        .with_growth(base)
        .with_rdb_layers(3);
    let config = TrainConfig {
        patch_size: patch,
        batch_size: 4,
        epochs: usize::MAX,
        max_steps: Some(steps),
        halve_every: 250,
        eval_every: Some((steps / 8).max(1)),
        ..TrainConfig::default()
    };

    let hazy = hazy_baseline(&test)?;
    println!("hazy inputs: {:.2} dB / {:.4}", hazy.mean_psnr, hazy.mean_ssim);
    let start = Instant::now();
    let mut trainer = Trainer::new(grid, config)?;
    trainer.fit(&train, Some(&test))?;
    for e in &trainer.log.evals {
        println!("step {:5}  {:.2} dB / {:.4}", e.step, e.psnr, e.ssim);
    }
    let report = evaluate(&trainer.model(), &test)?;
    println!(
        "dehazed: {:.2} dB / {:.4} (gain {:+.2} dB) in {:.0}s",
        report.mean_psnr,
        report.mean_ssim,
        report.mean_psnr - hazy.mean_psnr,
        start.elapsed().as_secs_f64()
    );
    Ok(())
}
