//! Hand-crafted input stack: original, white balanced, contrast enhanced,
//! gamma corrected, twice gamma corrected, and grayscale.

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

pub const DERIVED_CHANNELS: usize = 16;

/// Rec. 601 luma weights.
pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DerivedInputOptions {
    pub gamma: f32,
    /// Fraction clipped at each end before the contrast stretch.
    pub clip: f32,
    pub min_gain: f32,
    pub max_gain: f32,
}

impl Default for DerivedInputOptions {
    fn default() -> Self {
        DerivedInputOptions {
            gamma: 0.7,
            clip: 0.01,
            min_gain: 0.5,
            max_gain: 2.0,
        }
    }
}

pub fn derived_inputs(image: &Tensor<f32>) -> Result<Tensor<f32>> {
    derived_inputs_with(image, &DerivedInputOptions::default())
}

/// `(n, 3, h, w) -> (n, 16, h, w)`, channel order
/// `[rgb, wb, ce, gc, gc∘gc, gray]`.
pub fn derived_inputs_with(image: &Tensor<f32>, opts: &DerivedInputOptions) -> Result<Tensor<f32>> {
    let s = image.shape();
    if s.c != 3 {
        return Err(Error::shape("derived_inputs", format!("expected 3 channels, got {s}")));
    }
    let mut items = Vec::with_capacity(s.n);
    for n in 0..s.n {
        let rgb = image.batch_item(n);
        let wb = white_balance(&rgb, opts);
        let ce = contrast_stretch(&rgb, opts.clip);
        let gc = rgb.map(|v| v.max(0.0).powf(opts.gamma));
        let gc2 = gc.map(|v| v.powf(opts.gamma));
        let gray = luma(&rgb);
        let mut data = Vec::with_capacity(DERIVED_CHANNELS * s.plane());
        for part in [&rgb, &wb, &ce, &gc, &gc2, &gray] {
            data.extend_from_slice(part.data());
        }
        items.push(Tensor::from_vec(Shape::new(1, DERIVED_CHANNELS, s.h, s.w), data)?);
    }
    Tensor::stack(&items)
}

fn luma(rgb: &Tensor<f32>) -> Tensor<f32> {
    let s = rgb.shape();
    Tensor::from_fn(Shape::new(1, 1, s.h, s.w), |_, _, y, x| {
        (0..3).map(|c| LUMA[c] * rgb.at(0, c, y, x) as f64).sum::<f64>() as f32
    })
}

/// Gray-world: scale each channel so its mean matches the mean luma.
fn white_balance(rgb: &Tensor<f32>, opts: &DerivedInputOptions) -> Tensor<f32> {
    let plane = rgb.shape().plane();
    let means: Vec<f64> = rgb
        .data()
        .chunks(plane)
        .map(|c| c.iter().map(|&v| v as f64).sum::<f64>() / plane as f64)
        .collect();
    let luma_mean: f64 = (0..3).map(|c| LUMA[c] * means[c]).sum();
    let gains: Vec<f64> = means
        .iter()
        .map(|&m| {
            let g = if m > 0.0 { luma_mean / m } else { 1.0 };
            g.clamp(opts.min_gain as f64, opts.max_gain as f64)
        })
        .collect();
    let mut out = rgb.clone();
    for (c, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
        for v in chunk {
            *v = (*v as f64 * gains[c]).clamp(0.0, 1.0) as f32;
        }
    }
    out
}

/// Min-max stretch between the `clip` and `1 - clip` quantiles of all
/// samples.
fn contrast_stretch(rgb: &Tensor<f32>, clip: f32) -> Tensor<f32> {
    let mut sorted = rgb.data().to_vec();
    sorted.sort_by(f32::total_cmp);
    let last = sorted.len() - 1;
    let lo = sorted[((last as f32) * clip).round() as usize];
    let hi = sorted[((last as f32) * (1.0 - clip)).round() as usize];
    if hi - lo <= f32::EPSILON {
        return rgb.clone();
    }
    rgb.map(|v| ((v - lo) / (hi - lo)).clamp(0.0, 1.0))
}
