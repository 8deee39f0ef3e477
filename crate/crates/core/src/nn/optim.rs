use std::collections::HashMap;

use super::param::{ParamId, ParamStore};
use super::tensor::Scalar;
use crate::error::{Error, Result};

/// Adaptive-moment optimizer with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
    moments: HashMap<ParamId, (Vec<f64>, Vec<f64>)>,
}

impl AdamW {
    pub fn new(betas: (f64, f64), eps: f64, weight_decay: f64) -> Self {
        AdamW {
            betas,
            eps,
            weight_decay,
            moments: HashMap::new(),
        }
    }

    /// One update of every trainable parameter in `store`. `step` is 1-based
    /// and drives bias correction.
    pub fn step<T: Scalar>(&mut self, store: &mut ParamStore<T>, lr: f64, step: u64) -> Result<()> {
        if step == 0 {
            return Err(Error::invalid("adamw step counter is 1-based"));
        }
        let (b1, b2) = self.betas;
        let bc1 = 1.0 - b1.powi(step as i32);
        let bc2 = 1.0 - b2.powi(step as i32);
        for id in store.trainable_ids() {
            let p = store.get_mut(id);
            let Some(grad) = p.grad.as_ref() else {
                return Err(Error::MissingGrad(p.name.clone()));
            };
            let (m, v) = self
                .moments
                .entry(id)
                .or_insert_with(|| (vec![0.0; grad.len()], vec![0.0; grad.len()]));
            let g: Vec<f64> = grad.data().iter().map(|x| x.as_f64()).collect();
            for (i, w) in p.value.data_mut().iter_mut().enumerate() {
                let mut wf = w.as_f64();
                wf -= lr * self.weight_decay * wf;
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                wf -= lr * mhat / (vhat.sqrt() + self.eps);
                *w = T::from_f64(wf);
            }
            if !p.value.is_finite() {
                return Err(Error::NonFinite { op: "adamw_step" });
            }
        }
        Ok(())
    }
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW::new((0.9, 0.999), 1e-8, 0.0)
    }
}
