use crate::error::{Error, Result};
use crate::numkit::{Bound, Gradients, ParamId, ParamStore};

/// Bias-corrected Adam with optional per-parameter learning-rate multipliers.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
    lr_scale: Vec<f64>,
}

impl AdamState {
    pub fn new(params: &ParamStore, lr: f64) -> Self {
        Self::with_betas(params, lr, 0.9, 0.999, 1e-8)
    }

    pub fn with_betas(params: &ParamStore, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, _, t)| vec![0.0; t.len()]).collect();
        AdamState {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            first_moment: zeros.clone(),
            second_moment: zeros,
            lr_scale: vec![1.0; params.len()],
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Multiplier applied to `lr` for one parameter; 0 freezes it.
    pub fn set_lr_scale(&mut self, id: ParamId, scale: f64) {
        self.lr_scale[id.0] = scale;
    }

    /// Applies one update. `grads[i]` is the gradient of parameter `i`, or
    /// `None` when the parameter did not take part in the loss.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Option<Vec<f64>>]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::contract(format!(
                "adam: {} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        for (id, g) in params.ids().zip(grads) {
            if let Some(g) = g {
                if g.len() != params.get(id).len() {
                    return Err(Error::contract(format!(
                        "adam: gradient for {} has {} elements, parameter has {}",
                        params.name(id),
                        g.len(),
                        params.get(id).len()
                    )));
                }
                if let Some(pos) = g.iter().position(|v| !v.is_finite()) {
                    return Err(Error::Training(format!(
                        "non-finite gradient in {}[{pos}] at step {}",
                        params.name(id),
                        self.step + 1
                    )));
                }
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let lr = self.lr * self.lr_scale[i];
            if lr == 0.0 {
                continue;
            }
            let (m, v) = (&mut self.first_moment[i], &mut self.second_moment[i]);
            let p = params.get_mut(ParamId(i)).data_mut();
            for j in 0..g.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                p[j] -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Pulls per-parameter gradients out of a backward pass.
pub fn collect_grads(grads: &mut Gradients, bound: &Bound) -> Vec<Option<Vec<f64>>> {
    bound.vars().iter().map(|&v| grads.take(v)).collect()
}
