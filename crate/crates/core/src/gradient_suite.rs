//! Finite-difference verification of every differentiable operation, the
//! network blocks, the losses and the end-to-end reduced network.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::loss::{perceptual, total_loss, FeatureNet, DEFAULT_LAMBDA};
use crate::network::{build, forward, fuse, rdb_forward, Bound, GridConfig, Head};
use crate::tensor::gradcheck::{check, Coords, GradCheck, COMPOSITE_TOL, DEFAULT_EPS, PRIMITIVE_TOL};
use crate::tensor::{Graph, Shape, Tensor, Var};

/// Configuration of the network used for the end-to-end check: three
/// scales of 4, 8 and 16 channels.
pub fn reduced_config() -> GridConfig {
    GridConfig::default()
        .with_base_channels(4)
        .with_growth(4)
        .with_rdb_layers(3)
}

struct Draw(ChaCha8Rng);

impl Draw {
    fn uniform(&mut self, shape: impl Into<Shape>, lo: f64, hi: f64) -> Tensor<f64> {
        Tensor::from_fn(shape, |_, _, _, _| self.0.gen_range(lo..hi))
    }

    /// Values in `[-1, 1]` kept at least `margin` away from zero, so that
    /// kinks at zero are never straddled by the finite differences.
    fn away_from_zero(&mut self, shape: impl Into<Shape>, margin: f64) -> Tensor<f64> {
        Tensor::from_fn(shape, |_, _, _, _| {
            let v: f64 = self.0.gen_range(margin..1.0);
            if self.0.gen_bool(0.5) {
                v
            } else {
                -v
            }
        })
    }
}

/// Reduce `y` to a scalar with non-uniform upstream gradients.
fn probe(g: &mut Graph<f64>, y: Var, target: &Tensor<f64>) -> Result<Var> {
    let t = g.constant(target.clone());
    g.squared_error(y, t)
}

fn primitive(
    out: &mut Vec<GradCheck>,
    name: &str,
    inputs: Vec<Tensor<f64>>,
    target: Tensor<f64>,
    op: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
) -> Result<()> {
    out.push(check(
        name,
        &inputs,
        Coords::All,
        DEFAULT_EPS,
        PRIMITIVE_TOL,
        |g, v| {
            let y = op(g, v)?;
            probe(g, y, &target)
        },
    )?);
    Ok(())
}

/// Every engine primitive on random inputs in `[-1, 1]`.
pub fn primitive_checks(seed: u64) -> Result<Vec<GradCheck>> {
    let mut d = Draw(ChaCha8Rng::seed_from_u64(seed));
    let mut out = Vec::new();
    let x = [2, 3, 8, 8];

    for (stride, pad) in [(1, 1), (2, 1), (1, 0)] {
        let probe_shape = {
            let o = (8 + 2 * pad - 3) / stride + 1;
            Shape::new(2, 4, o, o)
        };
        primitive(
            &mut out,
            &format!("conv2d s{stride} p{pad}"),
            vec![
                d.uniform(x, -1.0, 1.0),
                d.uniform([4, 3, 3, 3], -1.0, 1.0),
                d.uniform([1, 4, 1, 1], -1.0, 1.0),
            ],
            d.uniform(probe_shape, -1.0, 1.0),
            move |g, v| g.conv2d(v[0], v[1], v[2], stride, pad),
        )?;
    }
    primitive(
        &mut out,
        "conv_transpose2d s2 p1 op1",
        vec![
            d.uniform([2, 4, 4, 4], -1.0, 1.0),
            d.uniform([4, 3, 3, 3], -1.0, 1.0),
            d.uniform([1, 3, 1, 1], -1.0, 1.0),
        ],
        d.uniform([2, 3, 8, 8], -1.0, 1.0),
        |g, v| g.conv_transpose2d(v[0], v[1], v[2], 2, 1, 1),
    )?;
    primitive(
        &mut out,
        "relu",
        vec![d.away_from_zero(x, 0.01)],
        d.uniform(x, -1.0, 1.0),
        |g, v| Ok(g.relu(v[0])),
    )?;
    primitive(
        &mut out,
        "sigmoid",
        vec![d.uniform(x, -1.0, 1.0)],
        d.uniform(x, -1.0, 1.0),
        |g, v| Ok(g.sigmoid(v[0])),
    )?;
    primitive(
        &mut out,
        "add",
        vec![d.uniform(x, -1.0, 1.0), d.uniform(x, -1.0, 1.0)],
        d.uniform(x, -1.0, 1.0),
        |g, v| g.add(v[0], v[1]),
    )?;
    primitive(
        &mut out,
        "scale",
        vec![d.uniform(x, -1.0, 1.0)],
        d.uniform(x, -1.0, 1.0),
        |g, v| Ok(g.scale(v[0], 0.7)),
    )?;
    primitive(
        &mut out,
        "concat_channels",
        vec![d.uniform(x, -1.0, 1.0), d.uniform([2, 2, 8, 8], -1.0, 1.0)],
        d.uniform([2, 5, 8, 8], -1.0, 1.0),
        |g, v| g.concat_channels(v[0], v[1]),
    )?;
    primitive(
        &mut out,
        "narrow_channels",
        vec![d.uniform(x, -1.0, 1.0)],
        d.uniform([2, 2, 8, 8], -1.0, 1.0),
        |g, v| g.narrow_channels(v[0], 1, 2),
    )?;
    primitive(
        &mut out,
        "scale_channel",
        vec![d.uniform(x, -1.0, 1.0), d.uniform([1, 3, 1, 1], -1.0, 1.0)],
        d.uniform(x, -1.0, 1.0),
        |g, v| g.scale_channel(v[0], v[1]),
    )?;
    primitive(
        &mut out,
        "scale_channel shared",
        vec![d.uniform(x, -1.0, 1.0), d.uniform([1, 1, 1, 1], -1.0, 1.0)],
        d.uniform(x, -1.0, 1.0),
        |g, v| g.scale_channel(v[0], v[1]),
    )?;
    primitive(
        &mut out,
        "mean_spatial",
        vec![d.uniform(x, -1.0, 1.0)],
        d.uniform([2, 3, 1, 1], -1.0, 1.0),
        |g, v| Ok(g.mean_spatial(v[0])),
    )?;

    // Scalar-valued primitives are checked directly.
    let inputs = [d.uniform(x, -1.0, 1.0)];
    out.push(check(
        "mean_all",
        &inputs,
        Coords::All,
        DEFAULT_EPS,
        PRIMITIVE_TOL,
        |g, v| Ok(g.mean_all(v[0])),
    )?);
    let inputs = [d.uniform(x, -1.0, 1.0), d.uniform(x, -1.0, 1.0)];
    out.push(check(
        "squared_error",
        &inputs,
        Coords::All,
        DEFAULT_EPS,
        PRIMITIVE_TOL,
        |g, v| g.squared_error(v[0], v[1]),
    )?);
    // Errors spread over both branches of the smooth L1 but away from |e| = 1.
    let target = d.uniform(x, -1.0, 1.0);
    let offsets = d
        .away_from_zero(x, 0.05)
        .map(|e| if e.abs() < 0.5 { e } else { e.signum() * (e.abs() + 0.6) });
    let pred = Tensor::from_vec(
        x,
        target.data().iter().zip(offsets.data()).map(|(t, e)| t + e).collect(),
    )?;
    out.push(check(
        "smooth_l1",
        &[pred, target],
        Coords::All,
        DEFAULT_EPS,
        PRIMITIVE_TOL,
        |g, v| g.smooth_l1(v[0], v[1]),
    )?);
    primitive(
        &mut out,
        "invert_haze",
        vec![
            d.uniform(x, 0.0, 1.0),
            d.uniform([2, 1, 8, 8], 0.2, 1.0),
            d.uniform([2, 1, 1, 1], 0.6, 1.0),
        ],
        d.uniform(x, -1.0, 1.0),
        |g, v| g.invert_haze(v[0], v[1], v[2], 0.05),
    )?;
    Ok(out)
}

fn named_check(
    name: &str,
    params: &BTreeMap<String, Tensor<f64>>,
    extra: Vec<Tensor<f64>>,
    coords: Coords,
    eps: f64,
    tolerance: f64,
    f: impl Fn(&mut Graph<f64>, &Bound, &[Var]) -> Result<Var>,
) -> Result<GradCheck> {
    let names: Vec<String> = params.keys().cloned().collect();
    let mut inputs = extra;
    let n_extra = inputs.len();
    inputs.extend(params.values().cloned());
    check(name, &inputs, coords, eps, tolerance, |g, v| {
        let vars = names.iter().cloned().zip(v[n_extra..].iter().copied()).collect();
        let bound = Bound::from_vars(vars);
        f(g, &bound, &v[..n_extra])
    })
}

fn params_f64(config: &GridConfig, seed: u64, prefix: &str) -> Result<BTreeMap<String, Tensor<f64>>> {
    Ok(build(config, seed)?
        .into_iter()
        .filter(|(k, _)| k.starts_with(prefix))
        .map(|(k, v)| (k, v.cast::<f64>()))
        .collect())
}

/// Residual dense block, attention fusion and both losses.
pub fn block_checks(seed: u64) -> Result<Vec<GradCheck>> {
    let mut d = Draw(ChaCha8Rng::seed_from_u64(seed ^ 0xb10c));
    let config = reduced_config();
    let mut out = Vec::new();

    let rdb = params_f64(&config, seed, "pre.rdb.")?;
    let target = d.uniform([1, 4, 8, 8], -1.0, 1.0);
    out.push(named_check(
        "residual dense block",
        &rdb,
        vec![d.uniform([1, 4, 8, 8], -1.0, 1.0)],
        Coords::All,
        DEFAULT_EPS,
        PRIMITIVE_TOL,
        |g, p, x| {
            let y = rdb_forward(g, p, "pre.rdb", config.rdb_layers, x[0])?;
            probe(g, y, &target)
        },
    )?);

    let target = d.uniform([2, 4, 6, 6], -1.0, 1.0);
    let inputs = [
        d.uniform([2, 4, 6, 6], -1.0, 1.0),
        d.uniform([2, 4, 6, 6], -1.0, 1.0),
        d.uniform([1, 4, 1, 1], -1.0, 1.0),
        d.uniform([1, 4, 1, 1], -1.0, 1.0),
    ];
    out.push(check(
        "attention fusion",
        &inputs,
        Coords::All,
        DEFAULT_EPS,
        PRIMITIVE_TOL,
        |g, v| {
            let y = fuse(g, v[0], v[1], Some((v[2], v[3])))?;
            probe(g, y, &target)
        },
    )?);

    let net = FeatureNet::default();
    let inputs = [d.uniform([1, 3, 8, 8], 0.0, 1.0), d.uniform([1, 3, 8, 8], 0.0, 1.0)];
    out.push(check(
        "perceptual loss",
        &inputs,
        Coords::All,
        DEFAULT_EPS,
        COMPOSITE_TOL,
        |g, v| perceptual(g, v[0], v[1], &net),
    )?);
    out.push(check(
        "total loss",
        &inputs,
        Coords::All,
        DEFAULT_EPS,
        COMPOSITE_TOL,
        |g, v| Ok(total_loss(g, v[0], v[1], DEFAULT_LAMBDA, &net)?.total),
    )?);
    Ok(out)
}

/// Full forward + loss + backward of the reduced network on a 16x16
/// input, for both output heads. Every input pixel is perturbed plus a
/// strided sample of each parameter tensor.
pub fn network_checks(seed: u64, samples_per_tensor: usize) -> Result<Vec<GradCheck>> {
    let mut d = Draw(ChaCha8Rng::seed_from_u64(seed ^ 0x0e2e));
    let net = FeatureNet::default();
    let mut out = Vec::new();
    for head in [Head::Direct, Head::Indirect] {
        let config = reduced_config().with_head(head);
        // Zero biases leave dead channels sitting exactly on relu kinks;
        // a generic point has small random biases and attention weights.
        let mut params = params_f64(&config, seed, "")?;
        for (name, t) in params.iter_mut() {
            if name.ends_with(".bias") {
                *t = d.uniform(t.shape(), -0.1, 0.1);
            } else if name.starts_with("grid.att.") {
                *t = d.uniform(t.shape(), 0.3, 0.7);
            }
        }
        let image = d.uniform([1, 3, 16, 16], 0.0, 1.0);
        let target = d.uniform([1, 3, 16, 16], 0.0, 1.0);
        let name = match head {
            Head::Direct => "network end-to-end (direct head)",
            Head::Indirect => "network end-to-end (indirect head)",
        };
        out.push(named_check(
            name,
            &params,
            vec![image],
            Coords::Sample(samples_per_tensor),
            DEFAULT_EPS,
            COMPOSITE_TOL,
            |g, p, x| {
                let y = forward(g, p, &config, x[0])?;
                let t = g.constant(target.clone());
                Ok(total_loss(g, y.image, t, DEFAULT_LAMBDA, &net)?.total)
            },
        )?);
    }
    Ok(out)
}

/// The complete suite.
pub fn run_gradient_suite(seed: u64) -> Result<Vec<GradCheck>> {
    let mut all = primitive_checks(seed)?;
    all.extend(block_checks(seed)?);
    all.extend(network_checks(seed, 24)?);
    Ok(all)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn primitives_pass() {
        for r in primitive_checks(1).unwrap() {
            assert!(r.passed(), "{r:?}");
        }
    }

    #[test]
    fn blocks_pass() {
        for r in block_checks(1).unwrap() {
            assert!(r.passed(), "{r:?}");
        }
    }

    #[test]
    fn reduced_network_passes() {
        for r in network_checks(2, 4).unwrap() {
            assert!(r.passed(), "{r:?}");
        }
    }

    #[test]
    fn a_wrong_gradient_is_caught() {
        // The squared term is computed off the tape, so the analytic
        // gradient misses it.
        let x = [Tensor::from_vec([1, 1, 1, 3], vec![0.3, -0.2, 0.7]).unwrap()];
        let r = check(
            "hidden dependency",
            &x,
            Coords::All,
            DEFAULT_EPS,
            PRIMITIVE_TOL,
            |g, v| {
                let sq = g.value(v[0]).map(|a| a * a);
                let c = g.constant(sq);
                let y = g.add(v[0], c)?;
                Ok(g.mean_all(y))
            },
        )
        .unwrap();
        assert!(!r.passed());
    }

    #[test]
    fn probes_across_a_kink_are_skipped() {
        let x = [Tensor::from_vec([1, 1, 1, 2], vec![1e-6, 0.5]).unwrap()];
        let r = check("kink", &x, Coords::All, 1e-3, PRIMITIVE_TOL, |g, v| {
            let y = g.relu(v[0]);
            Ok(g.mean_all(y))
        })
        .unwrap();
        assert_eq!((r.checked, r.skipped), (1, 1));
        assert!(r.passed());
    }
}
