//! Overfit one synthetic 64x64 pair with a small grid and report PSNR as
//! training proceeds.
//!
//! cargo run --release --example overfit_pair -- [steps] [base_channels]

use std::time::Instant;

use gridhaze::haze::{procedural_dataset, SynthOptions};
use gridhaze::loss::psnr;
use gridhaze::network::{GridConfig, Model};
use gridhaze::train::{TrainConfig, Trainer};

fn main() -> gridhaze::Result<()> {
    let mut args = std::env::args().skip(1);
    let steps: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(1000);
    let base: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(8);

    let data = procedural_dataset(1, 64, 64, &SynthOptions::indoor(), 11)?;
    let pair = &data.pairs[0];
    let grid = GridConfig::default()
        .with_base_channels(base)
        .with_growth(base)
        .with_rdb_layers(3);
    let config = TrainConfig {
        patch_size: 64,
        batch_size: 1,
        epochs: steps,
        halve_every: usize::MAX,
        ..TrainConfig::default()
    };
    println!("{}", grid.summary());
    println!("hazy input: {:.2} dB", psnr(&pair.hazy, &pair.clear, 1.0)?);

    let mut trainer = Trainer::new(grid, config)?;
    let start = Instant::now();
    let chunk = (steps / 10).max(1);
    while trainer.step < steps {
        trainer.config.max_steps = Some((trainer.step + chunk).min(steps));
        trainer.fit(&data, None)?;
        let out = Model::new(trainer.grid.clone(), trainer.params.clone())?.dehaze(&pair.hazy)?;
        println!(
            "step {:5}  loss {:.5}  psnr {:.2} dB  ({:.1}s)",
            trainer.step,
            trainer.log.steps.last().map_or(0.0, |s| s.total),
            psnr(&out, &pair.clear, 1.0)?,
            start.elapsed().as_secs_f64()
        );
    }
    Ok(())
}
