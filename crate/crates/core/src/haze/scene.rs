use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Shape, Tensor};

/// Seeded clear test scene: a smooth two-color gradient background with a
/// few flat-colored rectangles and discs plus a faint stripe texture.
///
/// Stands in for real photographs when building desk-scale datasets.
pub fn procedural_scene(h: usize, w: usize, seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut color = || {
        [
            rng.gen_range(0.05..0.95f32),
            rng.gen_range(0.05..0.95f32),
            rng.gen_range(0.05..0.95f32),
        ]
    };
    let (top, bottom) = (color(), color());
    let mut img = Tensor::from_fn(Shape::new(1, 3, h, w), |_, c, y, _| {
        let t = y as f32 / (h.max(2) - 1) as f32;
        top[c] * (1.0 - t) + bottom[c] * t
    });

    let shapes = rng.gen_range(3..7);
    for _ in 0..shapes {
        let fill = [
            rng.gen_range(0.0..1.0f32),
            rng.gen_range(0.0..1.0f32),
            rng.gen_range(0.0..1.0f32),
        ];
        let cy = rng.gen_range(0.0..h as f32);
        let cx = rng.gen_range(0.0..w as f32);
        let ry = rng.gen_range(0.08..0.3f32) * h as f32;
        let rx = rng.gen_range(0.08..0.3f32) * w as f32;
        let disc = rng.gen_bool(0.5);
        for y in 0..h {
            for x in 0..w {
                let dy = (y as f32 - cy) / ry;
                let dx = (x as f32 - cx) / rx;
                let inside = if disc {
                    dy * dy + dx * dx <= 1.0
                } else {
                    dy.abs() <= 1.0 && dx.abs() <= 1.0
                };
                if inside {
                    for (c, &v) in fill.iter().enumerate() {
                        img.set(0, c, y, x, v);
                    }
                }
            }
        }
    }

    let freq = rng.gen_range(0.2..0.6f32);
    let angle = rng.gen_range(0.0..std::f32::consts::PI);
    let (sa, ca) = angle.sin_cos();
    for y in 0..h {
        for x in 0..w {
            let stripe = 0.04 * (freq * (x as f32 * ca + y as f32 * sa)).sin();
            for c in 0..3 {
                let v = img.at(0, c, y, x) + stripe;
                img.set(0, c, y, x, v.clamp(0.0, 1.0));
            }
        }
    }
    img
}
