use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Per-pixel scene depth in arbitrary non-negative units.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    h: usize,
    w: usize,
    values: Vec<f32>,
}

impl DepthMap {
    pub fn new(h: usize, w: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != h * w {
            return Err(Error::shape(
                "depth",
                format!("{} values for a {h}x{w} map", values.len()),
            ));
        }
        if let Some(bad) = values.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::InvalidParameter(format!(
                "depth values must be finite and >= 0, found {bad}"
            )));
        }
        Ok(DepthMap { h, w, values })
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn at(&self, y: usize, x: usize) -> f32 {
        self.values[y * self.w + x]
    }

    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::from_vec(Shape::new(1, 1, self.h, self.w), self.values.clone()).expect("shape")
    }

    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<DepthMap> {
        let t = self.to_tensor().crop(y0, x0, h, w)?;
        DepthMap::new(h, w, t.into_data())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DepthKind {
    /// Linear from 0 at the left edge to 1 at the right edge.
    Ramp,
    /// Distance from a seeded center, normalized so the farthest pixel is 1.
    Radial,
    /// Multi-octave value noise normalized to `[0, 1]`.
    Fractal,
}

impl FromStr for DepthKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ramp" => Ok(DepthKind::Ramp),
            "radial" => Ok(DepthKind::Radial),
            "fractal" => Ok(DepthKind::Fractal),
            other => Err(Error::UnknownVariant(other.to_string())),
        }
    }
}

impl fmt::Display for DepthKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DepthKind::Ramp => "ramp",
            DepthKind::Radial => "radial",
            DepthKind::Fractal => "fractal",
        })
    }
}

/// Deterministic synthetic depth with values in `[0, 1]`.
pub fn synthetic_depth(h: usize, w: usize, kind: DepthKind, seed: u64) -> Result<DepthMap> {
    if h < 8 || w < 8 {
        return Err(Error::InvalidParameter(format!(
            "depth maps must be at least 8x8, got {h}x{w}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = match kind {
        DepthKind::Ramp => (0..h)
            .flat_map(|_| (0..w).map(move |x| x as f32 / (w - 1) as f32))
            .collect(),
        DepthKind::Radial => {
            let cy = rng.gen_range(0.0..(h - 1) as f64);
            let cx = rng.gen_range(0.0..(w - 1) as f64);
            let dist: Vec<f64> = (0..h)
                .flat_map(|y| (0..w).map(move |x| ((y as f64 - cy).powi(2) + (x as f64 - cx).powi(2)).sqrt()))
                .collect();
            normalize(&dist)
        }
        DepthKind::Fractal => normalize(&value_noise(h, w, &mut rng)),
    };
    DepthMap::new(h, w, values)
}

fn normalize(v: &[f64]) -> Vec<f32> {
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo <= f64::EPSILON {
        return vec![0.0; v.len()];
    }
    v.iter().map(|&x| ((x - lo) / (hi - lo)) as f32).collect()
}

/// Sum of four octaves of smoothstep-interpolated lattice noise.
fn value_noise(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    let mut cell = (h.max(w) as f64 / 2.0).max(2.0);
    let mut amplitude = 1.0;
    for _ in 0..4 {
        let gh = (h as f64 / cell).ceil() as usize + 2;
        let gw = (w as f64 / cell).ceil() as usize + 2;
        let lattice: Vec<f64> = (0..gh * gw).map(|_| rng.gen::<f64>()).collect();
        let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
        for y in 0..h {
            let fy = y as f64 / cell;
            let (y0, ty) = (fy.floor() as usize, smooth(fy.fract()));
            for x in 0..w {
                let fx = x as f64 / cell;
                let (x0, tx) = (fx.floor() as usize, smooth(fx.fract()));
                let g = |yy: usize, xx: usize| lattice[yy * gw + xx];
                let top = g(y0, x0) * (1.0 - tx) + g(y0, x0 + 1) * tx;
                let bottom = g(y0 + 1, x0) * (1.0 - tx) + g(y0 + 1, x0 + 1) * tx;
                out[y * w + x] += amplitude * (top * (1.0 - ty) + bottom * ty);
            }
        }
        cell = (cell / 2.0).max(1.0);
        amplitude *= 0.5;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ramp_runs_left_to_right() {
        let d = synthetic_depth(8, 11, DepthKind::Ramp, 0).unwrap();
        for y in 0..8 {
            assert_eq!(d.at(y, 0), 0.0);
            assert_eq!(d.at(y, 10), 1.0);
            for x in 1..11 {
                assert!(d.at(y, x) > d.at(y, x - 1));
            }
        }
    }

    #[test]
    fn deterministic_per_seed() {
        for kind in [DepthKind::Ramp, DepthKind::Radial, DepthKind::Fractal] {
            let a = synthetic_depth(16, 20, kind, 42).unwrap();
            let b = synthetic_depth(16, 20, kind, 42).unwrap();
            assert_eq!(a, b);
            assert!(a.values().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn fractal_seeds_differ() {
        let a = synthetic_depth(32, 32, DepthKind::Fractal, 1).unwrap();
        let b = synthetic_depth(32, 32, DepthKind::Fractal, 2).unwrap();
        let diff = a
            .values()
            .iter()
            .zip(b.values())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0f32, f32::max);
        assert!(diff > 0.1, "max diff {diff}");
    }

    #[test]
    fn rejects_small_maps_and_unknown_kinds() {
        assert!(synthetic_depth(7, 8, DepthKind::Ramp, 0).is_err());
        assert!(matches!("cubic".parse::<DepthKind>(), Err(Error::UnknownVariant(_))));
        assert_eq!("radial".parse::<DepthKind>().unwrap(), DepthKind::Radial);
    }

    #[test]
    fn depth_rejects_negative_values() {
        assert!(DepthMap::new(1, 2, vec![0.0, -0.1]).is_err());
    }
}
