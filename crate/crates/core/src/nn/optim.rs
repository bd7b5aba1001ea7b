use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Gradients, Network};
use crate::tensor::Tensor;

/// SGD with Nesterov momentum and L2 regularization.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub l2: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            momentum: 0.9,
            l2: 5e-4,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.momentum) || self.l2 < 0.0 {
            return Err(Error::Config(format!("invalid SGD config {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default)]
pub struct SgdState {
    velocity: Vec<Tensor>,
}

/// In-place Nesterov step.
///
/// With `d = g + l2·θ`: `v ← μ·v + d`, `θ ← θ − α·(d + μ·v)`.
pub fn sgd_step(
    net: &mut Network,
    grads: &Gradients,
    cfg: &SgdConfig,
    state: &mut SgdState,
) -> Result<()> {
    let mut params = net.params_mut();
    if params.len() != grads.tensors.len() {
        return Err(Error::Architecture(format!(
            "{} gradients for {} parameters",
            grads.tensors.len(),
            params.len()
        )));
    }
    if state.velocity.is_empty() {
        state.velocity = params
            .iter()
            .map(|p| Tensor::zeros(p.shape().to_vec()))
            .collect();
    }
    for ((p, g), v) in params
        .iter_mut()
        .zip(&grads.tensors)
        .zip(&mut state.velocity)
    {
        if p.shape() != g.shape() {
            return Err(Error::Architecture(format!(
                "gradient shape {:?} for parameter {:?}",
                g.shape(),
                p.shape()
            )));
        }
        let (p, v) = (p.data_mut(), v.data_mut());
        for ((pi, &gi), vi) in p.iter_mut().zip(g.data()).zip(v.iter_mut()) {
            let d = gi + cfg.l2 * *pi;
            *vi = cfg.momentum * *vi + d;
            *pi -= cfg.learning_rate * (d + cfg.momentum * *vi);
        }
    }
    Ok(())
}

/// Adam hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = 0.0..1.0;
        if !(self.learning_rate > 0.0)
            || !unit.contains(&self.beta1)
            || !unit.contains(&self.beta2)
            || !(self.eps > 0.0)
        {
            return Err(Error::Config(format!("invalid Adam config {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamState {
    pub fn steps(&self) -> u64 {
        self.t
    }
}

/// Bias-corrected Adam step on a flat parameter vector (minimizes).
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    cfg: &AdamConfig,
    state: &mut AdamState,
) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::Architecture(format!(
            "{} gradients for {} parameters",
            grads.len(),
            params.len()
        )));
    }
    if state.m.len() != params.len() {
        state.m = vec![0.0; params.len()];
        state.v = vec![0.0; params.len()];
        state.t = 0;
    }
    state.t += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.t as i32);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Layer;

    fn scalar_net(theta: f64) -> Network {
        Network::new(
            vec![1],
            vec![Layer::Linear {
                weight: Tensor::new([1, 1], vec![theta]).unwrap(),
            }],
        )
        .unwrap()
    }

    fn scalar_grads(g: f64) -> Gradients {
        Gradients {
            tensors: vec![Tensor::new([1, 1], vec![g]).unwrap()],
        }
    }

    fn theta(net: &Network) -> f64 {
        net.params()[0].data()[0]
    }

    #[test]
    fn plain_sgd_step() {
        let mut net = scalar_net(1.0);
        let cfg = SgdConfig {
            learning_rate: 0.1,
            momentum: 0.0,
            l2: 0.0,
        };
        sgd_step(&mut net, &scalar_grads(2.0), &cfg, &mut SgdState::default()).unwrap();
        assert_eq!(theta(&net), 0.8);
    }

    #[test]
    fn zero_grads_are_a_fixed_point() {
        let mut net = scalar_net(0.37);
        let cfg = SgdConfig {
            l2: 0.0,
            ..SgdConfig::default()
        };
        let mut state = SgdState::default();
        for _ in 0..5 {
            sgd_step(&mut net, &scalar_grads(0.0), &cfg, &mut state).unwrap();
        }
        assert_eq!(theta(&net), 0.37);
    }

    #[test]
    fn two_nesterov_steps_match_hand_unrolled() {
        let (alpha, mu, l2) = (0.1, 0.9, 5e-4);
        let cfg = SgdConfig {
            learning_rate: alpha,
            momentum: mu,
            l2,
        };
        let (g1, g2) = (0.5, -0.25);
        let mut net = scalar_net(1.0);
        let mut state = SgdState::default();
        sgd_step(&mut net, &scalar_grads(g1), &cfg, &mut state).unwrap();
        sgd_step(&mut net, &scalar_grads(g2), &cfg, &mut state).unwrap();

        let t0 = 1.0;
        let d1 = g1 + l2 * t0;
        let v1 = d1;
        let t1 = t0 - alpha * (d1 + mu * v1);
        let d2 = g2 + l2 * t1;
        let v2 = mu * v1 + d2;
        let t2 = t1 - alpha * (d2 + mu * v2);
        assert!((theta(&net) - t2).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_is_unit_scaled() {
        let cfg = AdamConfig::default();
        for g in [3.0, -0.02, 1e-3] {
            let mut p = [0.5];
            adam_step(&mut p, &[g], &cfg, &mut AdamState::default()).unwrap();
            assert!(((0.5 - p[0]).abs() - cfg.learning_rate).abs() < 1e-6);
            assert_eq!((0.5 - p[0]).signum(), g.signum());
        }
    }

    #[test]
    fn adam_zero_grads_fixed_point() {
        let mut p = [1.0, -2.0];
        let mut state = AdamState::default();
        for _ in 0..20 {
            adam_step(&mut p, &[0.0, 0.0], &AdamConfig::default(), &mut state).unwrap();
        }
        assert_eq!(p, [1.0, -2.0]);
    }

    #[test]
    fn adam_matches_reference_recurrence() {
        let cfg = AdamConfig {
            learning_rate: 0.05,
            ..AdamConfig::default()
        };
        let grads = [0.3, -1.2, 0.7, 0.0, 2.5];
        let mut p = [0.1];
        let mut state = AdamState::default();
        for g in grads {
            adam_step(&mut p, &[g], &cfg, &mut state).unwrap();
        }

        let (mut m, mut v, mut x) = (0.0f64, 0.0f64, 0.1f64);
        for (t, g) in grads.iter().enumerate() {
            let t = (t + 1) as i32;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            x -= 0.05 * mh / (vh.sqrt() + 1e-8);
        }
        assert!((p[0] - x).abs() < 1e-14);
        assert_eq!(state.steps(), 5);
    }

    #[test]
    fn config_validation() {
        assert!(SgdConfig::default().validate().is_ok());
        assert!(SgdConfig {
            momentum: 1.0,
            ..SgdConfig::default()
        }
        .validate()
        .is_err());
        assert!(SgdConfig {
            learning_rate: 0.0,
            ..SgdConfig::default()
        }
        .validate()
        .is_err());
        assert!(AdamConfig::default().validate().is_ok());
        assert!(AdamConfig {
            beta2: 1.0,
            ..AdamConfig::default()
        }
        .validate()
        .is_err());
    }
}
