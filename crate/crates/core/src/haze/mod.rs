//! Atmosphere scattering physics.
//!
//! A hazy observation of a clear scene `J` with depth `d` is
//! `I = J t + A (1 - t)` where `t = exp(-beta d)`. Images live in `[0, 1]`
//! and the atmospheric light `A` is a single scalar shared by all channels.

mod dataset;
mod depth;
mod derived;
mod scene;

pub use dataset::{
    load_manifest_dataset, procedural_dataset, synth_dataset, synthesize_pairs, Dataset, DatasetManifest,
    ManifestRecord, SynthOptions, MANIFEST_HEADER,
};
pub use depth::{synthetic_depth, DepthKind, DepthMap};
pub use derived::{derived_inputs, derived_inputs_with, DerivedInputOptions, DERIVED_CHANNELS, LUMA};
pub use scene::procedural_scene;

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Lower bound applied to the transmission before inverting the haze model.
pub const DEFAULT_T_FLOOR: f32 = 0.05;

/// Scattering coefficient and atmospheric light of one synthesized scene.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HazeParams {
    beta: f32,
    airlight: f32,
}

impl HazeParams {
    pub fn new(beta: f32, airlight: f32) -> Result<Self> {
        if !(beta.is_finite() && beta > 0.0) {
            return Err(Error::InvalidParameter(format!("beta must be positive, got {beta}")));
        }
        if !(airlight > 0.0 && airlight <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "atmospheric light must lie in (0, 1], got {airlight}"
            )));
        }
        Ok(HazeParams { beta, airlight })
    }

    pub fn beta(&self) -> f32 {
        self.beta
    }

    pub fn airlight(&self) -> f32 {
        self.airlight
    }
}

/// A clear image, its synthesized hazy counterpart and the provenance of
/// the haze.
#[derive(Clone, Debug, PartialEq)]
pub struct ScenePair {
    pub clear: Tensor<f32>,
    pub hazy: Tensor<f32>,
    pub params: HazeParams,
    pub depth: DepthMap,
}

impl ScenePair {
    /// Haze `clear` with `depth` and `params`.
    pub fn synthesize(clear: Tensor<f32>, depth: DepthMap, params: HazeParams) -> Result<Self> {
        let t = transmission(&depth, params.beta())?;
        let hazy = apply_haze(&clear, &t, params.airlight())?;
        Ok(ScenePair {
            clear,
            hazy,
            params,
            depth,
        })
    }

    pub fn height(&self) -> usize {
        self.clear.shape().h
    }

    pub fn width(&self) -> usize {
        self.clear.shape().w
    }
}

/// `t(x) = exp(-beta d(x))` as a `(1, 1, h, w)` tensor.
pub fn transmission(depth: &DepthMap, beta: f32) -> Result<Tensor<f32>> {
    if !(beta.is_finite() && beta > 0.0) {
        return Err(Error::InvalidParameter(format!("beta must be positive, got {beta}")));
    }
    let data = depth
        .values()
        .iter()
        .map(|&d| (-(beta as f64) * d as f64).exp() as f32)
        .collect();
    Tensor::from_vec(Shape::new(1, 1, depth.height(), depth.width()), data)
}

fn check_transmission(op: &'static str, image: Shape, t: Shape) -> Result<()> {
    if t.c != 1 || (t.h, t.w) != (image.h, image.w) || (t.n != 1 && t.n != image.n) {
        return Err(Error::shape(
            op,
            format!("transmission {t} does not cover image {image}"),
        ));
    }
    Ok(())
}

/// `I = J t + A (1 - t)` per channel. `t` is `(1 | n, 1, h, w)`.
pub fn apply_haze(clear: &Tensor<f32>, t: &Tensor<f32>, airlight: f32) -> Result<Tensor<f32>> {
    let s = clear.shape();
    check_transmission("apply_haze", s, t.shape())?;
    let tn = t.shape().n;
    let a = airlight as f64;
    Ok(Tensor::from_fn(s, |n, c, y, x| {
        let tt = t.at(n.min(tn - 1), 0, y, x) as f64;
        (clear.at(n, c, y, x) as f64 * tt + a * (1.0 - tt)) as f32
    }))
}

/// Recover `J = (I - A (1 - t')) / t'` with `t' = max(t, t_floor)`, clamped
/// to `[0, 1]`.
pub fn invert_haze(hazy: &Tensor<f32>, t: &Tensor<f32>, airlight: f32, t_floor: f32) -> Result<Tensor<f32>> {
    if !(t_floor > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "t_floor must be positive, got {t_floor}"
        )));
    }
    let s = hazy.shape();
    check_transmission("invert_haze", s, t.shape())?;
    let tn = t.shape().n;
    let a = airlight as f64;
    Ok(Tensor::from_fn(s, |n, c, y, x| {
        let tt = (t.at(n.min(tn - 1), 0, y, x) as f64).max(t_floor as f64);
        let j = (hazy.at(n, c, y, x) as f64 - a * (1.0 - tt)) / tt;
        j.clamp(0.0, 1.0) as f32
    }))
}
