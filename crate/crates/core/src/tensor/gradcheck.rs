//! Central finite-difference checks of the engine's analytic gradients.
//!
//! Checks run in `f64`. The reported error for one input tensor is
//! `max_i |analytic_i - numeric_i| / max_i max(|analytic_i|, |numeric_i|)`,
//! i.e. the worst deviation measured against that tensor's gradient scale;
//! the check's error is the maximum over its inputs. Each deviation is first
//! reduced by the rounding noise of the difference quotient, so tensors with
//! nearly vanishing gradients are not judged on cancellation error.
//!
//! A coordinate whose `+eps` or `-eps` probe lands in a different smooth
//! piece than the base point (a relu input changing sign, say) is skipped:
//! central differences are meaningless across a kink.

use super::{Graph, Tensor, Var};
use crate::error::Result;

pub const DEFAULT_EPS: f64 = 1e-4;
/// Tolerance for single primitives.
pub const PRIMITIVE_TOL: f64 = 1e-5;
/// Tolerance for composite graphs (losses, the full network).
pub const COMPOSITE_TOL: f64 = 1e-4;
/// Rounding error, in units of the loss's last place, assumed for one
/// evaluation of a deep graph.
pub const ROUNDOFF_ULPS: f64 = 16.0;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
    /// Number of compared coordinates.
    pub checked: usize,
    /// Coordinates skipped because a probe crossed a kink.
    pub skipped: usize,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_rel_err.is_finite() && self.max_rel_err <= self.tolerance
    }
}

/// Which coordinates of each input to perturb.
#[derive(Clone, Copy, Debug)]
pub enum Coords {
    All,
    /// At most this many, evenly strided through the tensor.
    Sample(usize),
}

impl Coords {
    fn pick(self, len: usize) -> Vec<usize> {
        match self {
            Coords::All => (0..len).collect(),
            Coords::Sample(k) if k >= len => (0..len).collect(),
            Coords::Sample(k) => {
                let stride = len as f64 / k as f64;
                // Offset by half a stride so samples avoid always hitting
                // index 0 of every tensor.
                (0..k).map(|i| ((i as f64 + 0.5) * stride) as usize).collect()
            }
        }
    }
}

/// Analytic gradients of `f` with respect to each of `inputs`.
pub fn analytic_grads<F>(inputs: &[Tensor<f64>], f: &F) -> Result<Vec<Tensor<f64>>>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    g.backward(loss)?;
    Ok(vars
        .iter()
        .map(|&v| g.grad(v).cloned().expect("tracked leaf"))
        .collect())
}

/// Value of the scalar `f` at `inputs`, evaluated without tracking.
pub fn evaluate<F>(inputs: &[Tensor<f64>], f: &F) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    Ok(evaluate_with_pattern(inputs, f)?.0)
}

fn evaluate_with_pattern<F>(inputs: &[Tensor<f64>], f: &F) -> Result<(f64, Vec<bool>)>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    Ok((g.value(loss).item(), g.branch_pattern()))
}

/// Compare analytic and central-difference gradients of the scalar `f`.
pub fn check<F>(name: &str, inputs: &[Tensor<f64>], coords: Coords, eps: f64, tolerance: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let analytic = analytic_grads(inputs, &f)?;
    let (_, base) = evaluate_with_pattern(inputs, &f)?;
    let mut worst = 0.0f64;
    let mut checked = 0;
    let mut skipped = 0;
    let mut probe = inputs.to_vec();
    for (i, grad) in analytic.iter().enumerate() {
        let mut max_diff = 0.0f64;
        let mut scale = 0.0f64;
        for j in coords.pick(inputs[i].len()) {
            let orig = inputs[i].data()[j];
            probe[i].data_mut()[j] = orig + eps;
            let (plus, plus_pattern) = evaluate_with_pattern(&probe, &f)?;
            probe[i].data_mut()[j] = orig - eps;
            let (minus, minus_pattern) = evaluate_with_pattern(&probe, &f)?;
            probe[i].data_mut()[j] = orig;
            if plus_pattern != base || minus_pattern != base {
                skipped += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * eps);
            // The difference quotient cannot resolve gradients below the
            // rounding noise of the two loss values.
            let noise = ROUNDOFF_ULPS * f64::EPSILON * plus.abs().max(minus.abs()) / eps;
            let a = grad.data()[j];
            max_diff = max_diff.max((a - numeric).abs() - noise);
            scale = scale.max(a.abs()).max(numeric.abs());
            checked += 1;
        }
        if scale > 0.0 {
            worst = worst.max(max_diff / scale);
        } else if max_diff > 0.0 {
            worst = f64::INFINITY;
        }
    }
    Ok(GradCheck {
        name: name.to_string(),
        max_rel_err: worst,
        tolerance,
        checked,
        skipped,
    })
}
