//! Write procedural clear scenes, haze them under the indoor protocol and
//! print the resulting manifest.
//!
//! cargo run --release --example synthesize_dataset -- [out_dir]

use std::path::PathBuf;

use gridhaze::haze::{procedural_scene, synth_dataset, SynthOptions};
use gridhaze::io::write_image;

fn main() -> gridhaze::Result<()> {
    let out: PathBuf = std::env::args().nth(1).unwrap_or_else(|| "hazy-dataset".into()).into();
    let clear_dir = out.join("clear");
    std::fs::create_dir_all(&clear_dir).map_err(|e| gridhaze::Error::Io {
        path: clear_dir.clone(),
        source: e,
    })?;
    for i in 0..4 {
        write_image(&procedural_scene(48, 64, i), clear_dir.join(format!("scene_{i}.ppm")))?;
    }
    // Eight hazy versions cycle through the four scenes with fresh depth
    // and haze parameters each time.
    let manifest = synth_dataset(&clear_dir, &out, 8, &SynthOptions::indoor(), 7)?;
    print!("{}", manifest.to_text()?);
    println!("wrote {}", out.display());
    Ok(())
}
