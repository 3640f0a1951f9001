use crate::error::{Error, Result};
use crate::haze::LUMA;
use crate::tensor::{Shape, Tensor};

/// PSNR reported for identical images.
pub const PSNR_CAP: f64 = 100.0;

/// Side of the Gaussian SSIM window.
pub const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;

fn same_shape(op: &'static str, a: Shape, b: Shape) -> Result<()> {
    if a != b {
        return Err(Error::shape(op, format!("{a} vs {b}")));
    }
    Ok(())
}

/// `10 log10(peak^2 / mse)` over every element, capped at [`PSNR_CAP`].
pub fn psnr(a: &Tensor<f32>, b: &Tensor<f32>, peak: f64) -> Result<f64> {
    same_shape("psnr", a.shape(), b.shape())?;
    if a.is_empty() {
        return Err(Error::shape("psnr", "empty images".to_string()));
    }
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        / a.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (peak * peak / mse).log10()).min(PSNR_CAP))
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let mid = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - mid;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let sum: f64 = w.iter().sum();
    w.map(|v| v / sum)
}

/// Luma plane (Rec. 601) of batch item `n`, or the single channel as is.
fn luma(t: &Tensor<f32>, n: usize) -> Vec<f64> {
    let s = t.shape();
    let mut out = Vec::with_capacity(s.plane());
    for y in 0..s.h {
        for x in 0..s.w {
            out.push(if s.c == 1 {
                t.at(n, 0, y, x) as f64
            } else {
                (0..3).map(|c| LUMA[c] * t.at(n, c, y, x) as f64).sum()
            });
        }
    }
    out
}

/// Separable Gaussian filter over valid positions only.
fn filter(plane: &[f64], h: usize, w: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM over all fully contained 11x11 Gaussian windows of the luma
/// channel, averaged over the batch. Images are `(n, 3, h, w)` or
/// `(n, 1, h, w)` with values in `[0, peak]`, peak 1.
pub fn ssim(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    let s = a.shape();
    same_shape("ssim", s, b.shape())?;
    if s.c != 1 && s.c != 3 {
        return Err(Error::shape("ssim", format!("expected 1 or 3 channels, got {s}")));
    }
    if s.n == 0 || s.h < SSIM_WINDOW || s.w < SSIM_WINDOW {
        return Err(Error::shape(
            "ssim",
            format!("image {s} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"),
        ));
    }
    let c1 = (0.01f64).powi(2);
    let c2 = (0.03f64).powi(2);
    let k = gaussian_window();
    let mut total = 0.0;
    for n in 0..s.n {
        let (x, y) = (luma(a, n), luma(b, n));
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let [mx, my, sxx, syy, sxy] = [&x, &y, &xx, &yy, &xy].map(|p| filter(p, s.h, s.w, &k));
        let mut sum = 0.0;
        for i in 0..mx.len() {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cov = sxy[i] - ux * uy;
            sum += ((2.0 * ux * uy + c1) * (2.0 * cov + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
        }
        total += sum / mx.len() as f64;
    }
    Ok(total / s.n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: impl Into<Shape>, seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_, _, _, _| rng.gen_range(0.0..1.0))
    }

    #[test]
    fn psnr_reference_values() {
        let a = Tensor::full([1, 3, 4, 4], 0.2f32);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), 100.0);
        let zero = Tensor::zeros([1, 3, 4, 4]);
        let one = Tensor::full([1, 3, 4, 4], 1.0f32);
        assert!(psnr(&zero, &one, 1.0).unwrap().abs() < 1e-12);
        let tenth = Tensor::full([1, 3, 4, 4], 0.1f32);
        // mse = 0.01 up to f32 rounding of 0.1
        assert!((psnr(&zero, &tenth, 1.0).unwrap() - 20.0).abs() < 1e-5);
        assert!(psnr(&zero, &Tensor::zeros([1, 3, 4, 5]), 1.0).is_err());
    }

    #[test]
    fn psnr_decreases_with_noise_amplitude() {
        let base = random([1, 3, 8, 8], 1);
        let mut last = f64::INFINITY;
        for k in 1..10 {
            let noisy = base.map(|v| v + 0.02 * k as f32);
            let p = psnr(&base, &noisy, 1.0).unwrap();
            assert!(p < last);
            last = p;
        }
    }

    #[test]
    fn ssim_of_constant_images_has_closed_form() {
        let zero = Tensor::zeros([1, 3, 16, 16]);
        let one = Tensor::full([1, 3, 16, 16], 1.0f32);
        let c1 = 1e-4;
        let got = ssim(&zero, &one).unwrap();
        // Luma of white is 0.299 + 0.587 + 0.114 in f64, equal to 1 within rounding.
        assert!((got - c1 / (1.0 + c1)).abs() < 1e-9, "{got}");
    }

    #[test]
    fn ssim_window_and_channel_checks() {
        let small = Tensor::zeros([1, 3, 10, 16]);
        assert!(matches!(ssim(&small, &small), Err(Error::Shape { .. })));
        let two = Tensor::zeros([1, 2, 16, 16]);
        assert!(ssim(&two, &two).is_err());
        let gray = random([2, 1, 12, 12], 3);
        assert_eq!(ssim(&gray, &gray).unwrap(), 1.0);
    }

    #[test]
    fn gaussian_window_is_normalized_and_symmetric() {
        let w = gaussian_window();
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        for i in 0..SSIM_WINDOW {
            assert_eq!(w[i], w[SSIM_WINDOW - 1 - i]);
        }
    }

    proptest! {
        #[test]
        fn ssim_is_symmetric_and_one_on_self(seed in 0u64..500) {
            let a = random([1, 3, 14, 13], seed);
            let b = random([1, 3, 14, 13], seed + 1000);
            prop_assert_eq!(ssim(&a, &a).unwrap(), 1.0);
            let (ab, ba) = (ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
            prop_assert!((ab - ba).abs() < 1e-12);
            prop_assert!((-1.0..=1.0).contains(&ab));
        }
    }
}
