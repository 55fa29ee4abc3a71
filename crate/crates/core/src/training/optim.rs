use serde::{Deserialize, Serialize};

use crate::encoders::{ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::substrate::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.001,
        }
    }
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    lr_scale: Vec<f64>,
    step: u64,
}

impl AdamW {
    pub fn new(config: AdamWConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store.ids().map(|id| Tensor::zeros(store.get(id).shape())).collect();
        AdamW {
            config,
            lr_scale: vec![1.0; zeros.len()],
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    /// Multiplies the learning rate of one parameter.
    pub fn set_lr_scale(&mut self, id: ParamId, scale: f64) {
        self.lr_scale[id.index()] = scale;
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, id: ParamId) -> &Tensor {
        &self.m[id.index()]
    }

    pub fn second_moment(&self, id: ParamId) -> &Tensor {
        &self.v[id.index()]
    }

    /// One update of every parameter listed in `grads`.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)], lr: f64) -> Result<()> {
        if store.is_frozen() {
            return Err(Error::State("optimizer step on frozen parameters".into()));
        }
        for (id, g) in grads {
            if store.get(*id).shape() != g.shape() || self.m.get(id.index()).map(Tensor::shape) != Some(g.shape()) {
                return Err(Error::shape(format!(
                    "gradient {:?} does not match parameter {:?}",
                    g.shape(),
                    store.name(*id)
                )));
            }
        }
        self.step += 1;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (id, g) in grads {
            let i = id.index();
            let lr = lr * self.lr_scale[i];
            let theta = store.get_mut(*id)?;
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (((t, &gi), mi), vi) in theta.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                let old = *t;
                *t = old - lr * m_hat / (v_hat.sqrt() + eps) - lr * weight_decay * old;
            }
        }
        Ok(())
    }
}

/// Rescales `grads` in place so their global L2 norm is at most `max_norm`; returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [(ParamId, Tensor)], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|(_, g)| g.data().iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for (_, g) in grads.iter_mut() {
            for x in g.data_mut() {
                *x *= s;
            }
        }
    }
    norm
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub base_lr: f64,
    pub total_steps: u64,
}

/// Linear decay from `base_lr` at step 0 to zero at `total_steps`.
pub fn lr_at(step: u64, schedule: &Schedule) -> f64 {
    if schedule.total_steps == 0 {
        return 0.0;
    }
    if step > schedule.total_steps {
        log::warn!(
            "step {step} is past the schedule end {}; learning rate clamped to 0",
            schedule.total_steps
        );
        return 0.0;
    }
    schedule.base_lr * (1.0 - step as f64 / schedule.total_steps as f64)
}
