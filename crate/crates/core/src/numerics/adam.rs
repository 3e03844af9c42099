//! Adam with bias correction.

use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use super::NumericsError;

#[derive(Clone, Copy, Debug, PartialEq)]
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

/// Per-parameter moments and step counters.
///
/// Step counters are kept per parameter so that a masked update (only some
/// parameters took part in a loss) leaves the others' state untouched.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
    pub t: Vec<u64>,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &ParamStore<f32>) -> Self {
        let sizes: Vec<usize> = params.iter().map(|(_, _, t)| t.numel()).collect();
        AdamState {
            config,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: vec![0; sizes.len()],
        }
    }

    /// Applies one update to parameter `id`.
    pub fn update(
        &mut self,
        id: ParamId,
        param: &mut Tensor<f32>,
        grad: &Tensor<f32>,
    ) -> Result<(), NumericsError> {
        let i = id.0;
        if param.shape() != grad.shape() || self.m[i].len() != param.numel() {
            return Err(NumericsError::ShapeMismatch {
                op: "adam_step",
                detail: format!("param {:?}, grad {:?}", param.shape(), grad.shape()),
            });
        }
        let c = self.config;
        self.t[i] += 1;
        let t = self.t[i] as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let step = (c.lr / bc1) as f32;
        let bc2_sqrt = bc2.sqrt() as f32;
        let (b1, b2, eps) = (c.beta1 as f32, c.beta2 as f32, c.eps as f32);
        let m = &mut self.m[i];
        let v = &mut self.v[i];
        for (((p, &g), m), v) in param
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *p -= step * *m / ((*v).sqrt() / bc2_sqrt + eps);
        }
        Ok(())
    }

    /// Updates every parameter that has a gradient; `None` entries are skipped.
    pub fn step(
        &mut self,
        params: &mut ParamStore<f32>,
        grads: &[Option<Tensor<f32>>],
    ) -> Result<(), NumericsError> {
        if grads.len() != params.len() {
            return Err(NumericsError::ShapeMismatch {
                op: "adam_step",
                detail: format!("{} grads for {} params", grads.len(), params.len()),
            });
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                let id = ParamId(i);
                self.update(id, params.get_mut(id), g)?;
            }
        }
        Ok(())
    }
}

/// Rescales gradients in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Option<Tensor<f32>>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .map(|g| g.sq_norm())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = (max_norm / norm) as f32;
        for g in grads.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}
