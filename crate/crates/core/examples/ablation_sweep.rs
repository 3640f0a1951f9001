//! Train every network variant and the rows x columns sweep on the same
//! small budget and print the comparison tables.
//!
//! cargo run --release --example ablation_sweep -- [steps]

use gridhaze::haze::{procedural_dataset, SynthOptions};
use gridhaze::network::GridConfig;
use gridhaze::train::{run_ablation_suite, TrainConfig, Variant, TABLE_GRID_SIZES};

fn main() -> gridhaze::Result<()> {
    let steps = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(100);
    let opts = SynthOptions::indoor();
    let train = procedural_dataset(8, 32, 32, &opts, 3)?;
    let test = procedural_dataset(4, 32, 32, &opts, 4)?;
    let base = GridConfig::default()
        .with_base_channels(4)
        .with_growth(4)
        .with_rdb_layers(3);
    let config = TrainConfig {
        patch_size: 32,
        epochs: usize::MAX,
        max_steps: Some(steps),
        halve_every: usize::MAX,
        ..TrainConfig::default()
    };
    let report = run_ablation_suite(&base, &config, &train, &test, &Variant::ALL, &TABLE_GRID_SIZES)?;
    print!("{}", report.to_markdown());
    Ok(())
}
