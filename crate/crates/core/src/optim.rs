//! Adam with bias correction.

use crate::error::{Result, SirError};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig { lr, ..Self::default() }
    }
}

/// First and second moment estimates for a fixed list of parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl AdamState {
    /// Fresh zero moments shaped like `params`.
    pub fn new<'a>(config: AdamConfig, params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let (m, v) = params
            .into_iter()
            .map(|p| (Tensor::zeros(p.shape()), Tensor::zeros(p.shape())))
            .unzip();
        AdamState { config, m, v, t: 0 }
    }

    /// One update of every trainable parameter.
    ///
    /// Parameters with `requires_grad == false` are skipped entirely, and
    /// their moments stay untouched.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(SirError::shape(
                "adam_step",
                format!(
                    "state tracks {} tensors, got {} parameters and {} gradients",
                    self.m.len(),
                    params.len(),
                    grads.len()
                ),
            ));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.shape() != self.m[i].shape() {
                return Err(SirError::shape(
                    "adam_step",
                    format!("parameter {i}: {:?} vs gradient {:?}", p.shape(), g.shape()),
                ));
            }
        }

        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if !p.requires_grad() {
                continue;
            }
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mv = beta1 * *mv + (1.0 - beta1) * gv;
                *vv = beta2 * *vv + (1.0 - beta2) * gv * gv;
                let m_hat = *mv / bc1;
                let v_hat = *vv / bc2;
                *pv -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_param(v: f64) -> Tensor {
        Tensor::scalar(v).with_grad(true)
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = scalar_param(0.7);
        let mut st = AdamState::new(AdamConfig::default(), [&p]);
        st.step(&mut [&mut p], &[Tensor::scalar(0.0)]).unwrap();
        assert_eq!(p.data(), &[0.7]);
        assert_eq!(st.m[0].data(), &[0.0]);
        assert_eq!(st.v[0].data(), &[0.0]);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn first_step_moves_by_about_lr() {
        let mut p = scalar_param(0.0);
        let mut st = AdamState::new(AdamConfig::default(), [&p]);
        st.step(&mut [&mut p], &[Tensor::scalar(1.0)]).unwrap();
        // m̂ = 1, v̂ = 1 → Δ = -lr / (1 + eps).
        assert_eq!(p.data()[0], -1e-4 / (1.0 + 1e-8));
    }

    #[test]
    fn sign_flip_negates_update() {
        let mut a = scalar_param(0.25);
        let mut b = scalar_param(0.25);
        let mut sa = AdamState::new(AdamConfig::default(), [&a]);
        let mut sb = sa.clone();
        sa.step(&mut [&mut a], &[Tensor::scalar(0.3)]).unwrap();
        sb.step(&mut [&mut b], &[Tensor::scalar(-0.3)]).unwrap();
        assert_eq!(a.data()[0] - 0.25, -(b.data()[0] - 0.25));
    }

    #[test]
    fn frozen_tensors_are_untouched() {
        let mut frozen = Tensor::full([1, 1, 1, 3], 2.0);
        let mut live = scalar_param(1.0);
        let mut st = AdamState::new(AdamConfig::default(), [&frozen, &live]);
        for _ in 0..5 {
            st.step(&mut [&mut frozen, &mut live], &[Tensor::full([1, 1, 1, 3], 1.0), Tensor::scalar(1.0)])
                .unwrap();
        }
        assert_eq!(frozen.data(), &[2.0; 3]);
        assert_eq!(st.m[0].data(), &[0.0; 3]);
        assert!(live.data()[0] < 1.0);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = scalar_param(0.0);
        let mut st = AdamState::new(AdamConfig::default(), [&p]);
        assert!(st.step(&mut [&mut p], &[Tensor::zeros([1, 1, 1, 2])]).is_err());
        assert_eq!(st.t, 0);
    }
}
