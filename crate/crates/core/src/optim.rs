//! AdamW with decoupled weight decay, global-norm clipping and optional
//! layer-wise learning-rate decay.

use crate::config::TrainSchedule;
use crate::error::{contract, Result};
use crate::params::ParamStore;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

/// Scale `grads` so their joint L2 norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / (norm + 1e-6);
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

impl AdamW {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, e)| vec![0.0; e.tensor.len()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Learning-rate multiplier of a parameter at `depth`.
    pub fn depth_factor(schedule: &TrainSchedule, depth: usize, max_depth: usize) -> f64 {
        match schedule.layer_decay {
            Some(d) => d.powi((max_depth - depth.min(max_depth)) as i32),
            None => 1.0,
        }
    }

    /// One update at learning rate `lr`. Parameters whose `trainable` flag is
    /// false are left untouched.
    pub fn update(
        &mut self,
        store: &mut ParamStore,
        grads: &[Vec<f64>],
        lr: f64,
        schedule: &TrainSchedule,
        trainable: Option<&[bool]>,
    ) -> Result<()> {
        if grads.len() != store.len() {
            return contract("one gradient per parameter required");
        }
        // Parameters added after construction (bank growth) get fresh moments.
        while self.m.len() < store.len() {
            let n = store.get(crate::params::ParamId::from_index(self.m.len())).tensor.len();
            self.m.push(vec![0.0; n]);
            self.v.push(vec![0.0; n]);
        }
        self.step += 1;
        let (b1, b2) = schedule.betas;
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        let max_depth = store.max_depth();
        let ids: Vec<_> = store.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            if trainable.is_some_and(|t| !t[i]) {
                continue;
            }
            let entry = store.get_mut(id);
            let rate = lr * Self::depth_factor(schedule, entry.depth, max_depth);
            let decay = if entry.decay { schedule.weight_decay } else { 0.0 };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, w) in entry.tensor.data_mut().iter_mut().enumerate() {
                let g = grads[i][j];
                m[j] = b1 * m[j] + (1.0 - b1) * g;
                v[j] = b2 * v[j] + (1.0 - b2) * g * g;
                let mhat = m[j] / c1;
                let vhat = v[j] / c2;
                *w -= rate * (mhat / (vhat.sqrt() + schedule.adam_eps) + decay * *w);
            }
        }
        Ok(())
    }
}
