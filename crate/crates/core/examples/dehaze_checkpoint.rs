//! Train briefly, save a checkpoint, reload it and dehaze an image whose
//! size is not a multiple of the grid's scale factor.
//!
//! cargo run --release --example dehaze_checkpoint

use gridhaze::haze::{procedural_dataset, SynthOptions};
use gridhaze::io::{load_checkpoint, save_checkpoint, write_image};
use gridhaze::loss::{psnr, ssim};
use gridhaze::network::{GridConfig, Model};
use gridhaze::train::{TrainConfig, Trainer};

fn main() -> gridhaze::Result<()> {
    let train = procedural_dataset(8, 48, 48, &SynthOptions::indoor(), 1)?;
    let grid = GridConfig::default()
        .with_base_channels(8)
        .with_growth(8)
        .with_rdb_layers(3);
    let config = TrainConfig {
        patch_size: 32,
        // 8 images in batches of 4: 800 steps, halved after 400.
        epochs: 400,
        halve_every: 200,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(grid, config)?;
    trainer.fit(&train, None)?;

    let dir = std::env::temp_dir().join("gridhaze-example");
    std::fs::create_dir_all(&dir).map_err(|e| gridhaze::Error::Io {
        path: dir.clone(),
        source: e,
    })?;
    let path = dir.join("model.gdhz");
    save_checkpoint(&trainer.checkpoint(), &path)?;
    let ckpt = load_checkpoint(&path)?;
    println!(
        "loaded step {} epoch {}: {}",
        ckpt.step,
        ckpt.epoch,
        ckpt.config.summary()
    );
    let model = Model::new(ckpt.config, ckpt.params)?;

    // 37 x 53 is reflect-padded to 40 x 56 internally and cropped back.
    let test = procedural_dataset(1, 37, 53, &SynthOptions::indoor(), 99)?;
    let pair = &test.pairs[0];
    let out = model.dehaze(&pair.hazy)?;
    println!("output {}", out.shape());
    println!(
        "hazy    {:.2} dB  SSIM {:.4}",
        psnr(&pair.hazy, &pair.clear, 1.0)?,
        ssim(&pair.hazy, &pair.clear)?
    );
    println!(
        "dehazed {:.2} dB  SSIM {:.4}",
        psnr(&out, &pair.clear, 1.0)?,
        ssim(&out, &pair.clear)?
    );
    write_image(&pair.hazy, dir.join("hazy.ppm"))?;
    write_image(&out, dir.join("dehazed.ppm"))?;
    println!("images in {}", dir.display());
    Ok(())
}
