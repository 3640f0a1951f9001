use std::collections::BTreeMap;

use super::Tensor;
use crate::error::{Error, Result};

/// Adam hyperparameters. Defaults are `beta1 = 0.9`, `beta2 = 0.999`,
/// `eps = 1e-8`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment buffers for one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
}

/// Optimizer state for a named parameter set.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    /// Number of completed steps.
    pub t: u64,
    pub moments: BTreeMap<String, Moments>,
}

impl Default for AdamState {
    fn default() -> Self {
        AdamState::new(AdamConfig::default())
    }
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        AdamState {
            config,
            t: 0,
            moments: BTreeMap::new(),
        }
    }

    /// One bias-corrected Adam update over every named gradient.
    ///
    /// Gradients are validated before anything is touched: a non-finite or
    /// mis-shaped gradient aborts the step and leaves parameters, moments
    /// and `t` unchanged. Parameters without a gradient are not updated.
    pub fn step(
        &mut self,
        params: &mut BTreeMap<String, Tensor<f32>>,
        grads: &BTreeMap<String, Tensor<f32>>,
        lr: f32,
    ) -> Result<()> {
        for (name, g) in grads {
            let p = params
                .get(name)
                .ok_or_else(|| Error::InvalidParameter(format!("gradient for unknown parameter `{name}`")))?;
            if p.shape() != g.shape() {
                return Err(Error::shape(
                    "adam_step",
                    format!("`{name}`: parameter {} vs gradient {}", p.shape(), g.shape()),
                ));
            }
            if let Some(m) = self.moments.get(name) {
                if m.m.len() != p.len() {
                    return Err(Error::shape("adam_step", format!("`{name}`: stale moment buffers")));
                }
            }
            g.ensure_finite(&format!("gradient of `{name}`"))?;
        }

        self.t += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for (name, g) in grads {
            let p = params.get_mut(name).expect("checked above");
            let mom = self.moments.entry(name.clone()).or_insert_with(|| Moments {
                m: vec![0.0; g.len()],
                v: vec![0.0; g.len()],
            });
            adam_update(
                p.data_mut(),
                g.data(),
                &mut mom.m,
                &mut mom.v,
                lr,
                beta1,
                beta2,
                eps,
                bc1,
                bc2,
            );
        }
        Ok(())
    }
}

#[allow(clippy::too_many_arguments)]
#[inline]
fn adam_update(
    p: &mut [f32],
    g: &[f32],
    m: &mut [f32],
    v: &mut [f32],
    lr: f32,
    beta1: f32,
    beta2: f32,
    eps: f32,
    bc1: f32,
    bc2: f32,
) {
    for i in 0..p.len() {
        m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
        v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(name: &str, v: f32) -> BTreeMap<String, Tensor<f32>> {
        BTreeMap::from([(name.to_string(), Tensor::scalar(v))])
    }

    #[test]
    fn zero_gradient_leaves_params_but_counts_step() {
        let mut params = single("w", 1.5);
        let mut state = AdamState::default();
        state.step(&mut params, &single("w", 0.0), 0.1).unwrap();
        assert_eq!(params["w"].item(), 1.5);
        assert_eq!(state.t, 1);
        state.step(&mut params, &single("w", 0.0), 0.1).unwrap();
        assert_eq!(state.t, 2);
    }

    #[test]
    fn first_step_moves_by_lr_in_sign_direction() {
        for &g in &[0.37f32, -5.0, 1e-3] {
            let mut params = single("w", 0.0);
            let mut state = AdamState::new(AdamConfig {
                eps: 0.0,
                ..AdamConfig::default()
            });
            state.step(&mut params, &single("w", g), 0.01).unwrap();
            let moved = params["w"].item();
            assert!((moved + 0.01 * g.signum()).abs() < 1e-8, "g={g} moved {moved}");
        }
    }

    #[test]
    fn non_finite_gradient_aborts_without_side_effects() {
        let mut params = single("w", 2.0);
        let mut state = AdamState::default();
        let err = state.step(&mut params, &single("w", f32::NAN), 0.1).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }));
        assert_eq!(params["w"].item(), 2.0);
        assert_eq!(state.t, 0);
        assert!(state.moments.is_empty());
    }

    #[test]
    fn matches_directly_iterated_scalar_adam() {
        // Independent scalar iteration of the textbook recurrences in f64,
        // frozen against the tensor implementation on f(w) = (w - 3)^2.
        let (b1, b2, eps, lr) = (0.9f64, 0.999f64, 1e-8f64, 0.1f64);
        let (mut w, mut m, mut v) = (0.0f64, 0.0f64, 0.0f64);
        for t in 1..=1000 {
            let g = 2.0 * (w - 3.0);
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            w -= lr * (m / (1.0 - b1.powi(t))) / ((v / (1.0 - b2.powi(t))).sqrt() + eps);
        }
        assert!((w - 3.0).abs() <= 1e-2, "oracle itself ends at {w}");

        let mut params = single("w", 0.0);
        let mut state = AdamState::default();
        for _ in 0..1000 {
            let g = 2.0 * (params["w"].item() - 3.0);
            state.step(&mut params, &single("w", g), 0.1).unwrap();
        }
        let got = params["w"].item() as f64;
        assert!((got - 3.0).abs() <= 1e-2, "ended at {got}");
        assert!((got - w).abs() < 1e-3, "f32 run {got} vs f64 oracle {w}");
        assert_eq!(state.t, 1000);
    }
}
