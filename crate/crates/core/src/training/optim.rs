use hemoseg_autodiff::{Scalar, Tensor};

use crate::error::{data_err, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { beta1: 0.9, beta2: 0.999, epsilon: 1e-8, weight_decay: 1e-4 }
    }
}

/// AdamW with decoupled weight decay and bias-corrected moments.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    pub step: u64,
    /// Learning rate of the most recent step.
    pub lr: f64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(config: AdamWConfig, params: &[Tensor<T>]) -> Self {
        AdamW {
            config,
            step: 0,
            lr: 0.0,
            m: params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect(),
        }
    }

    /// `p <- p - lr*wd*p`, then the Adam update with bias correction.
    /// Every parameter must have a gradient.
    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Option<Tensor<T>>], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(data_err(format!(
                "optimizer tracks {} parameters, got {} parameters and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            match g {
                None => return Err(data_err(format!("missing gradient for trainable parameter {i}"))),
                Some(g) if g.shape() != p.shape() => {
                    return Err(data_err(format!("gradient {i} shape {:?} != {:?}", g.shape(), p.shape())))
                }
                _ => {}
            }
        }
        self.step += 1;
        self.lr = lr;
        let AdamWConfig { beta1, beta2, epsilon, weight_decay } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let decay = 1.0 - lr * weight_decay;
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            let g = g.as_ref().expect("checked above");
            for (((pv, &gv), mv), vv) in
                p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut())
            {
                let gv = gv.as_f64();
                let m_new = beta1 * mv.as_f64() + (1.0 - beta1) * gv;
                let v_new = beta2 * vv.as_f64() + (1.0 - beta2) * gv * gv;
                let update = lr * (m_new / bc1) / ((v_new / bc2).sqrt() + epsilon);
                *pv = T::from_f64_lossy(pv.as_f64() * decay - update);
                *mv = T::from_f64_lossy(m_new);
                *vv = T::from_f64_lossy(v_new);
            }
        }
        Ok(())
    }
}
