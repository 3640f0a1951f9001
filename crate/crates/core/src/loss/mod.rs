//! Training losses and image-quality metrics.

mod metrics;

pub use metrics::{psnr, ssim, PSNR_CAP, SSIM_WINDOW};

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Graph, Real, Shape, Tensor, Var};

/// Weight of the perceptual term in the total loss.
pub const DEFAULT_LAMBDA: f64 = 0.04;

/// Seed of the frozen feature network used when none is given.
pub const FEATURE_NET_SEED: u64 = 0x5eed_f00d;

/// Loss values of one evaluation, as graph nodes.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub smooth_l1: Var,
    pub perceptual: Var,
    pub total: Var,
}

/// Frozen three-stage conv pyramid standing in for a pretrained feature
/// extractor. Stage 1 keeps full resolution with 16 channels, stages 2
/// and 3 halve the resolution on entry and reach 32 and 64 channels.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureNet {
    /// Per stage, two `(weight, bias)` convolutions.
    stages: Vec<[(Tensor<f32>, Tensor<f32>); 2]>,
}

const STAGE_CHANNELS: [usize; 3] = [16, 32, 64];

impl FeatureNet {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut conv = |c_out: usize, c_in: usize| {
            let bound = 1.0 / ((c_in * 9) as f32).sqrt();
            let w = Tensor::from_fn(Shape::new(c_out, c_in, 3, 3), |_, _, _, _| {
                rng.gen_range(-bound..=bound)
            });
            (w, Tensor::zeros(Shape::new(1, c_out, 1, 1)))
        };
        let mut c_in = 3;
        let stages = STAGE_CHANNELS
            .iter()
            .map(|&c| {
                let first = conv(c, c_in);
                let second = conv(c, c);
                c_in = c;
                [first, second]
            })
            .collect();
        FeatureNet { stages }
    }

    /// Smallest image side the three stages accept.
    pub const MIN_SIZE: usize = 4;

    /// Feature maps of every stage for `x`. The weights enter the graph as
    /// constants so no gradient reaches them.
    pub fn features<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Result<Vec<Var>> {
        let s = g.shape(x);
        if s.h < Self::MIN_SIZE || s.w < Self::MIN_SIZE {
            return Err(Error::shape(
                "perceptual",
                format!(
                    "image {s} is too small for three feature stages (need at least {0}x{0})",
                    Self::MIN_SIZE
                ),
            ));
        }
        let mut h = x;
        let mut out = Vec::with_capacity(3);
        for (j, stage) in self.stages.iter().enumerate() {
            for (k, (w, b)) in stage.iter().enumerate() {
                let stride = if j > 0 && k == 0 { 2 } else { 1 };
                let (wv, bv) = (g.constant(w.cast()), g.constant(b.cast()));
                let y = g.conv2d(h, wv, bv, stride, 1)?;
                h = g.relu(y);
            }
            out.push(h);
        }
        Ok(out)
    }
}

impl Default for FeatureNet {
    fn default() -> Self {
        FeatureNet::new(FEATURE_NET_SEED)
    }
}

/// Smooth L1 summed over channels, averaged over pixels and batch.
pub fn smooth_l1<T: Real>(g: &mut Graph<T>, pred: Var, target: Var) -> Result<Var> {
    g.smooth_l1(pred, target)
}

/// Sum over stages of the mean squared feature difference.
pub fn perceptual<T: Real>(g: &mut Graph<T>, pred: Var, target: Var, net: &FeatureNet) -> Result<Var> {
    let (ps, ts) = (g.shape(pred), g.shape(target));
    if ps != ts {
        return Err(Error::shape("perceptual", format!("{ps} vs {ts}")));
    }
    let fp = net.features(g, pred)?;
    let ft = net.features(g, target)?;
    let mut total: Option<Var> = None;
    for (a, b) in fp.into_iter().zip(ft) {
        let term = g.squared_error(a, b)?;
        total = Some(match total {
            None => term,
            Some(t) => g.add(t, term)?,
        });
    }
    Ok(total.expect("three stages"))
}

/// `L_s + lambda * L_p`. With `lambda == 0` the total is the smooth L1
/// node itself; the perceptual term is still evaluated for logging.
pub fn total_loss<T: Real>(
    g: &mut Graph<T>,
    pred: Var,
    target: Var,
    lambda: f64,
    net: &FeatureNet,
) -> Result<LossTerms> {
    if !lambda.is_finite() || lambda < 0.0 {
        return Err(Error::InvalidParameter(format!(
            "loss weight must be finite and non-negative, got {lambda}"
        )));
    }
    let ls = smooth_l1(g, pred, target)?;
    let lp = perceptual(g, pred, target, net)?;
    let total = if lambda == 0.0 {
        ls
    } else {
        let weighted = g.scale(lp, T::lit(lambda));
        g.add(ls, weighted)?
    };
    Ok(LossTerms {
        smooth_l1: ls,
        perceptual: lp,
        total,
    })
}

/// Evaluate the three losses on plain tensors, returning `(L_s, L_p, L)`.
pub fn loss_values(pred: &Tensor<f32>, target: &Tensor<f32>, lambda: f64, net: &FeatureNet) -> Result<(f64, f64, f64)> {
    let mut g = Graph::<f64>::new();
    let p = g.constant(pred.cast());
    let t = g.constant(target.cast());
    let terms = total_loss(&mut g, p, t, lambda, net)?;
    Ok((
        g.value(terms.smooth_l1).item(),
        g.value(terms.perceptual).item(),
        g.value(terms.total).item(),
    ))
}

/// Frozen feature weights by name, for inspection.
pub fn feature_weights(net: &FeatureNet) -> BTreeMap<String, Tensor<f32>> {
    let mut out = BTreeMap::new();
    for (j, stage) in net.stages.iter().enumerate() {
        for (k, (w, b)) in stage.iter().enumerate() {
            out.insert(format!("stage{}.conv{}.weight", j + 1, k + 1), w.clone());
            out.insert(format!("stage{}.conv{}.bias", j + 1, k + 1), b.clone());
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{check, Coords, COMPOSITE_TOL, DEFAULT_EPS};
    use proptest::prelude::*;
    use rand::Rng;

    fn uniform(shape: impl Into<Shape>, v: f32) -> Tensor<f32> {
        Tensor::full(shape, v)
    }

    fn ls(pred: &Tensor<f32>, gt: &Tensor<f32>) -> f64 {
        loss_values(pred, gt, 0.0, &FeatureNet::default()).unwrap().0
    }

    fn random(shape: impl Into<Shape>, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_, _, _, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn smooth_l1_branches() {
        let gt = uniform([2, 3, 4, 4], 0.25);
        assert_eq!(ls(&gt, &gt), 0.0);
        assert!((ls(&uniform([2, 3, 4, 4], 0.75), &gt) - 0.375).abs() < 1e-12);
        assert!((ls(&uniform([2, 3, 4, 4], 2.25), &gt) - 4.5).abs() < 1e-12);
    }

    #[test]
    fn smooth_l1_is_c1_at_the_threshold() {
        // Value and slope of the per-element term just either side of |e| = 1.
        let at = |e: f64| {
            let mut g = Graph::<f64>::new();
            let p = g.param(Tensor::full([1, 1, 1, 1], e));
            let t = g.constant(Tensor::zeros([1, 1, 1, 1]));
            let l = smooth_l1(&mut g, p, t).unwrap();
            g.backward(l).unwrap();
            (g.value(l).item(), g.grad(p).unwrap().item())
        };
        let (below, above) = (at(1.0 - 1e-9), at(1.0 + 1e-9));
        assert!((below.0 - 0.5).abs() < 1e-8 && (above.0 - 0.5).abs() < 1e-8);
        assert!((below.1 - 1.0).abs() < 1e-8 && (above.1 - 1.0).abs() < 1e-8);
    }

    #[test]
    fn lambda_zero_is_exactly_smooth_l1() {
        let net = FeatureNet::default();
        let a = random([1, 3, 8, 8], 1).cast::<f32>();
        let b = random([1, 3, 8, 8], 2).cast::<f32>();
        let (s, p, total) = loss_values(&a, &b, 0.0, &net).unwrap();
        assert_eq!(total.to_bits(), s.to_bits());
        assert!(p > 0.0);
        let (s4, p4, t4) = loss_values(&a, &b, DEFAULT_LAMBDA, &net).unwrap();
        assert!((t4 - (s4 + 0.04 * p4)).abs() < 1e-12);
        assert_eq!(loss_values(&a, &a, DEFAULT_LAMBDA, &net).unwrap(), (0.0, 0.0, 0.0));
    }

    #[test]
    fn perceptual_rejects_tiny_images() {
        let a = uniform([1, 3, 3, 8], 0.1);
        assert!(matches!(
            loss_values(&a, &a, 0.04, &FeatureNet::default()),
            Err(Error::Shape { .. })
        ));
        assert!(loss_values(&a, &uniform([1, 3, 8, 8], 0.0), 0.04, &FeatureNet::default()).is_err());
        assert!(loss_values(
            &uniform([1, 3, 8, 8], 0.0),
            &uniform([1, 3, 8, 8], 0.0),
            -1.0,
            &FeatureNet::default()
        )
        .is_err());
    }

    #[test]
    fn feature_stages_have_expected_dimensions() {
        let net = FeatureNet::default();
        let mut g = Graph::<f32>::new();
        let x = g.constant(uniform([2, 3, 16, 12], 0.5));
        let f = net.features(&mut g, x).unwrap();
        let shapes: Vec<Shape> = f.iter().map(|&v| g.shape(v)).collect();
        assert_eq!(
            shapes,
            vec![
                Shape::new(2, 16, 16, 12),
                Shape::new(2, 32, 8, 6),
                Shape::new(2, 64, 4, 3)
            ]
        );
        assert_eq!(feature_weights(&net).len(), 12);
        assert_eq!(net, FeatureNet::new(FEATURE_NET_SEED));
    }

    #[test]
    fn perceptual_gradient_matches_finite_differences() {
        let net = FeatureNet::default();
        let inputs = [random([1, 3, 8, 8], 3), random([1, 3, 8, 8], 4)];
        let r = check(
            "perceptual",
            &inputs,
            Coords::All,
            DEFAULT_EPS,
            COMPOSITE_TOL,
            |g, v| perceptual(g, v[0], v[1], &net),
        )
        .unwrap();
        assert!(r.passed(), "{r:?}");
        let r = check(
            "total_loss",
            &inputs,
            Coords::All,
            DEFAULT_EPS,
            COMPOSITE_TOL,
            |g, v| Ok(total_loss(g, v[0], v[1], DEFAULT_LAMBDA, &net)?.total),
        )
        .unwrap();
        assert!(r.passed(), "{r:?}");
    }

    proptest! {
        #[test]
        fn losses_are_non_negative(seed in 0u64..1000) {
            let a = random([1, 3, 8, 8], seed).cast::<f32>();
            let b = random([1, 3, 8, 8], seed + 1).cast::<f32>();
            let (s, p, t) = loss_values(&a, &b, DEFAULT_LAMBDA, &FeatureNet::default()).unwrap();
            prop_assert!(s > 0.0 && p >= 0.0 && t >= s);
        }
    }
}
