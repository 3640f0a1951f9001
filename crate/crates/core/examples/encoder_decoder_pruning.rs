//! The encoder-decoder route is a sub-network of the grid: zeroing every
//! other junction's attention weights reproduces it exactly.
//!
//! cargo run --release --example encoder_decoder_pruning

use gridhaze::network::{
    apply_ablation, build, forward, mask_to_encoder_decoder, parameter_count, Ablation, Bound, GridConfig, ModelParams,
};
use gridhaze::{Graph, Tensor};

fn run(config: &GridConfig, params: &ModelParams, x: &Tensor<f32>) -> gridhaze::Result<Tensor<f32>> {
    let mut g = Graph::<f32>::new();
    let p = Bound::new(&mut g, params, false);
    let xv = g.constant(x.clone());
    let out = forward(&mut g, &p, config, xv)?;
    Ok(g.value(out.image).clone())
}

fn main() -> gridhaze::Result<()> {
    let full = GridConfig::default();
    let ed = apply_ablation(&full, Ablation::EncoderDecoder)?;
    for row in ed.active_junctions() {
        println!(
            "{}",
            row.iter().map(|&a| if a { " o" } else { " ." }).collect::<String>()
        );
    }

    let mut params = build(&full, 42)?;
    mask_to_encoder_decoder(&full, &mut params)?;
    let pruned: ModelParams = build(&ed, 0)?
        .into_keys()
        .map(|k| (k.clone(), params[&k].clone()))
        .collect();
    println!(
        "grid parameters {}, route parameters {}",
        parameter_count(&params),
        parameter_count(&pruned)
    );

    let x = Tensor::from_fn([1, 3, 24, 32], |_, c, y, x| {
        ((c + 1) * (y + 2 * x)) as f32 % 17.0 / 17.0
    });
    let diff = run(&full, &params, &x)?.max_abs_diff(&run(&ed, &pruned, &x)?);
    println!("masked grid vs encoder-decoder: max abs diff {diff:e}");
    Ok(())
}
