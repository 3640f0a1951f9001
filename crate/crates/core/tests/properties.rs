use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use gridhaze::haze::{procedural_dataset, transmission, SynthOptions};
use gridhaze::io::Checkpoint;
use gridhaze::network::{
    apply_ablation, build, forward, mask_to_encoder_decoder, Ablation, Bound, GridConfig, Head, ModelParams,
};
use gridhaze::train::{lr_schedule, sample_pair_patch};
use gridhaze::{Graph, Shape, Tensor};

fn random<T: gridhaze::tensor::Real>(shape: impl Into<Shape>, seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_, _, _, _| T::lit(rng.gen_range(-1.0..1.0)))
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn tiny(rows: usize, cols: usize) -> GridConfig {
    GridConfig::default()
        .with_grid(rows, cols)
        .with_base_channels(2)
        .with_growth(2)
        .with_rdb_layers(2)
}

fn run(config: &GridConfig, params: &ModelParams, x: &Tensor<f32>) -> (Tensor<f32>, Vec<(usize, usize, Shape)>) {
    let mut g = Graph::<f32>::new();
    let p = Bound::new(&mut g, params, false);
    let xv = g.constant(x.clone());
    let out = forward(&mut g, &p, config, xv).unwrap();
    let junctions = out.junctions.iter().map(|j| (j.row, j.col, j.shape)).collect();
    (g.value(out.image).clone(), junctions)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    /// <conv(x), y> = <x, conv_transpose(y)> for the stride-2 sampler
    /// geometry.
    #[test]
    fn transposed_conv_is_the_adjoint(ca in 1usize..4, cb in 1usize..4, h in 1usize..5, w in 1usize..5, seed: u64) {
        let (h, w) = (2 * h, 2 * w);
        let mut g = Graph::<f64>::new();
        let x = g.constant(random([1, ca, h, w], seed));
        let wt = g.constant(random([cb, ca, 3, 3], seed ^ 1));
        let y = random::<f64>([1, cb, h / 2, w / 2], seed ^ 2);
        let yv = g.constant(y.clone());
        let zb = g.constant(Tensor::zeros([1, cb, 1, 1]));
        let za = g.constant(Tensor::zeros([1, ca, 1, 1]));
        let cx = g.conv2d(x, wt, zb, 2, 1).unwrap();
        let ty = g.conv_transpose2d(yv, wt, za, 2, 1, 1).unwrap();
        prop_assert_eq!(g.shape(ty), g.shape(x));
        let lhs = dot(g.value(cx), &y);
        let rhs = dot(g.value(x), g.value(ty));
        prop_assert!((lhs - rhs).abs() <= 1e-10 * (1.0 + lhs.abs()), "{} vs {}", lhs, rhs);
    }

    /// Every junction at scale s has C_s channels and (h / 2^s, w / 2^s)
    /// extent, for any grid shape and input size.
    #[test]
    fn shape_law_holds_for_any_grid(rows in 1usize..4, half in 1usize..4, hm in 1usize..4, wm in 1usize..4, indirect: bool) {
        let config = tiny(rows, 2 * half).with_head(if indirect { Head::Indirect } else { Head::Direct });
        let m = config.size_multiple();
        let (h, w) = (hm * m * 2, wm * m * 2);
        let params = build(&config, 3).unwrap();
        let (y, junctions) = run(&config, &params, &random([1, 3, h, w], 4));
        prop_assert_eq!(y.shape(), Shape::new(1, 3, h, w));
        prop_assert_eq!(junctions.len(), rows * 2 * half);
        for (r, c, s) in junctions {
            prop_assert_eq!(s, Shape::new(1, config.channels(r), h >> r, w >> r), "junction ({}, {})", r, c);
        }
    }

    /// Masking the full grid's attention reproduces the encoder-decoder
    /// route for every grid size.
    #[test]
    fn masked_grid_matches_encoder_decoder(rows in 1usize..4, half in 1usize..4, seed in 0u64..1000) {
        let full = tiny(rows, 2 * half);
        let ed = apply_ablation(&full, Ablation::EncoderDecoder).unwrap();
        let mut params = build(&full, seed).unwrap();
        mask_to_encoder_decoder(&full, &mut params).unwrap();
        let ed_params: ModelParams = build(&ed, 0).unwrap().into_keys().map(|k| {
            let v = params[&k].clone();
            (k, v)
        }).collect();
        let x = random([1, 3, 16, 16], seed);
        let (a, _) = run(&full, &params, &x);
        let (b, _) = run(&ed, &ed_params, &x);
        prop_assert!(a.max_abs_diff(&b) <= 1e-6);
    }

    #[test]
    fn checkpoint_bytes_round_trip(seed: u64, step: u64, epoch: u64, rows in 1usize..3) {
        let config = tiny(rows, 2);
        let mut ckpt = Checkpoint::from_params(config.clone(), build(&config, seed).unwrap());
        ckpt.step = step;
        ckpt.epoch = epoch;
        ckpt.seed = seed;
        let bytes = ckpt.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        prop_assert_eq!(&back.to_bytes().unwrap(), &bytes);
        prop_assert_eq!(back.params, ckpt.params);
        prop_assert_eq!((back.step, back.epoch, back.seed), (step, epoch, seed));
    }

    #[test]
    fn schedule_is_a_halving_step_function(epoch in 0usize..500, every in 1usize..50) {
        let lr = lr_schedule(epoch, 1e-3, every).unwrap();
        let next = lr_schedule(epoch + 1, 1e-3, every).unwrap();
        if (epoch + 1) % every == 0 {
            prop_assert_eq!(next, lr / 2.0);
        } else {
            prop_assert_eq!(next, lr);
        }
    }

    /// Crops of hazy, clear and depth share a window: re-hazing the clear
    /// crop with the depth crop gives the hazy crop.
    #[test]
    fn pair_patches_stay_co_located(h in 16usize..28, w in 16usize..28, patch in 1usize..16, seed: u64) {
        let data = procedural_dataset(1, h, w, &SynthOptions::outdoor(), seed % 1000).unwrap();
        let p = sample_pair_patch(&data.pairs[0], patch, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let t = transmission(&p.depth, p.params.beta()).unwrap();
        let rehazed = gridhaze::haze::apply_haze(&p.clear, &t, p.params.airlight()).unwrap();
        prop_assert_eq!(rehazed, p.hazy);
    }
}
