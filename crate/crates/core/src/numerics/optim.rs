//! AdamW with decoupled weight decay.

use serde::{Deserialize, Serialize};

use super::float::Float;
use super::tensor::Tensor;
use super::NumericsError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { lr: 3e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.1 }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<(), NumericsError> {
        let ok = self.lr >= 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(NumericsError::InvalidConfig(format!("adamw {self:?}")))
        }
    }
}

/// Optimizer moments for an ordered list of parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState<T> {
    pub config: AdamWConfig,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    /// Parameters that receive weight decay; biases and norms usually do not.
    pub decay: Vec<bool>,
    pub t: u64,
}

impl<T: Float> AdamWState<T> {
    pub fn new(config: AdamWConfig, params: &[Tensor<T>], decay: Vec<bool>) -> Result<Self, NumericsError> {
        config.validate()?;
        if decay.len() != params.len() {
            return Err(NumericsError::ShapeMismatch {
                op: "adamw",
                detail: format!("{} decay flags for {} params", decay.len(), params.len()),
            });
        }
        let zeros = |p: &Tensor<T>| Tensor::zeros(p.shape());
        Ok(AdamWState {
            config,
            m: params.iter().map(zeros).collect(),
            v: params.iter().map(zeros).collect(),
            decay,
            t: 0,
        })
    }

    /// One update over all parameters. Nothing is modified on error.
    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>]) -> Result<(), NumericsError> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(NumericsError::ShapeMismatch {
                op: "adamw",
                detail: format!("{} params, {} grads, {} moments", params.len(), grads.len(), self.m.len()),
            });
        }
        for (k, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.shape() != self.m[k].shape() {
                return Err(NumericsError::ShapeMismatch {
                    op: "adamw",
                    detail: format!("param {k}: {:?} vs grad {:?}", p.shape(), g.shape()),
                });
            }
            if !g.is_finite() {
                return Err(NumericsError::NonFinite { op: "adamw" });
            }
        }
        let c = self.config;
        let t = self.t + 1;
        let (b1, b2) = (T::of_f64(c.beta1), T::of_f64(c.beta2));
        let one = T::one();
        let bc1 = T::of_f64(1.0 - c.beta1.powi(t.min(i32::MAX as u64) as i32));
        let bc2 = T::of_f64(1.0 - c.beta2.powi(t.min(i32::MAX as u64) as i32));
        let lr = T::of_f64(c.lr);
        let eps = T::of_f64(c.eps);

        let mut updated = Vec::with_capacity(params.len());
        let mut new_m = Vec::with_capacity(params.len());
        let mut new_v = Vec::with_capacity(params.len());
        for (k, (p, g)) in params.iter().zip(grads).enumerate() {
            let decay = if self.decay[k] { one - lr * T::of_f64(c.weight_decay) } else { one };
            let mut np = p.clone();
            let mut m = self.m[k].clone();
            let mut v = self.v[k].clone();
            for j in 0..np.numel() {
                let gj = g.data()[j];
                let mj = b1 * m.data()[j] + (one - b1) * gj;
                let vj = b2 * v.data()[j] + (one - b2) * gj * gj;
                m.data_mut()[j] = mj;
                v.data_mut()[j] = vj;
                let m_hat = mj / bc1;
                let v_hat = vj / bc2;
                let pj = np.data()[j] * decay - lr * m_hat / (v_hat.sqrt() + eps);
                np.data_mut()[j] = pj;
            }
            if !np.is_finite() {
                return Err(NumericsError::NonFinite { op: "adamw" });
            }
            updated.push(np);
            new_m.push(m);
            new_v.push(v);
        }
        for (p, np) in params.iter_mut().zip(updated) {
            *p = np;
        }
        self.m = new_m;
        self.v = new_v;
        self.t = t;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(p: f64, g: f64, lr: f64, wd: f64) -> f64 {
        let cfg = AdamWConfig { lr, weight_decay: wd, ..Default::default() };
        let mut params = vec![Tensor::<f64>::scalar(p)];
        let mut st = AdamWState::new(cfg, &params, vec![true]).unwrap();
        st.step(&mut params, &[Tensor::scalar(g)]).unwrap();
        assert_eq!(st.t, 1);
        params[0].item().unwrap()
    }

    #[test]
    fn decay_only_step() {
        let p = one_param(1.0, 0.0, 0.1, 0.1);
        assert!((p - 0.99).abs() < 1e-15, "{p}");
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let p = one_param(0.0, 2.0, 0.1, 0.0);
        assert!((p + 0.1).abs() < 1e-8, "{p}");
    }

    #[test]
    fn zero_lr_is_identity() {
        for g in [-3.0, 0.0, 7.5] {
            assert_eq!(one_param(0.7, g, 0.0, 0.1), 0.7);
        }
    }

    #[test]
    fn zero_decay_zero_grad_is_identity() {
        assert_eq!(one_param(-1.25, 0.0, 0.3, 0.0), -1.25);
    }

    #[test]
    fn rejects_mismatched_and_nonfinite_grads() {
        let cfg = AdamWConfig::default();
        let mut params = vec![Tensor::<f64>::zeros(&[2])];
        let mut st = AdamWState::new(cfg, &params, vec![true]).unwrap();
        assert!(st.step(&mut params, &[Tensor::zeros(&[3])]).is_err());
        let bad = Tensor::new(vec![2], vec![f64::NAN, 0.0]).unwrap();
        assert!(matches!(st.step(&mut params, &[bad]), Err(NumericsError::NonFinite { .. })));
        assert_eq!(st.t, 0);
    }
}
