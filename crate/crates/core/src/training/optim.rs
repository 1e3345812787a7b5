use std::collections::HashMap;

use crate::model::{ParamId, ParamStore};

#[derive(Debug, Clone)]
struct Moments {
    m: Vec<f32>,
    v: Vec<f32>,
    t: i32,
}

/// Adam with decoupled weight decay. Parameters without a gradient buffer
/// are skipped entirely.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    state: HashMap<ParamId, Moments>,
}

impl AdamW {
    pub fn new(beta1: f32, beta2: f32, eps: f32, weight_decay: f32) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            weight_decay,
            state: HashMap::new(),
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, ids: &[ParamId], lr: f32) {
        for id in ids {
            let t = params.get_mut(*id);
            let Some(grad) = t.grad.take() else { continue };
            let n = grad.len();
            let s = self.state.entry(*id).or_insert_with(|| Moments {
                m: vec![0.0; n],
                v: vec![0.0; n],
                t: 0,
            });
            s.t += 1;
            let bc1 = 1.0 - self.beta1.powi(s.t);
            let bc2 = 1.0 - self.beta2.powi(s.t);
            for (i, w) in t.data_mut().iter_mut().enumerate() {
                let g = grad[i];
                s.m[i] = self.beta1 * s.m[i] + (1.0 - self.beta1) * g;
                s.v[i] = self.beta2 * s.v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = s.m[i] / bc1;
                let v_hat = s.v[i] / bc2;
                *w -= lr * self.weight_decay * *w;
                *w -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}
