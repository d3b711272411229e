use serde::{Deserialize, Serialize};

use super::{Gradients, Matrix, ParamGroupKind, ParamId, ParamStore};
use crate::error::{Error, Result};

/// AdamW hyperparameters. The defaults are conventional values; only the
/// learning rates and schedule are fixed by the training recipe.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParameterGroup {
    pub name: ParamGroupKind,
    pub params: Vec<ParamId>,
    pub learning_rate: f64,
}

impl ParameterGroup {
    /// Partitions the store into the language-model and graph groups.
    pub fn split(store: &ParamStore, lr_lm: f64, lr_graph: f64) -> Vec<ParameterGroup> {
        vec![
            ParameterGroup {
                name: ParamGroupKind::LanguageModel,
                params: store.ids_in(ParamGroupKind::LanguageModel),
                learning_rate: lr_lm,
            },
            ParameterGroup {
                name: ParamGroupKind::Graph,
                params: store.ids_in(ParamGroupKind::Graph),
                learning_rate: lr_graph,
            },
        ]
    }
}

/// One AdamW update of a single matrix in place. `step` is the 1-based update
/// count used for bias correction.
pub fn adamw_update(
    param: &mut Matrix,
    grad: &Matrix,
    first: &mut Matrix,
    second: &mut Matrix,
    step: u64,
    lr: f64,
    cfg: &AdamWConfig,
) -> Result<()> {
    if grad.shape() != param.shape() {
        return Err(Error::shape("adamw_update", param.shape(), grad.shape()));
    }
    if step == 0 {
        return Err(Error::Contract("adamw step counter starts at 1".into()));
    }
    let bc1 = 1.0 - cfg.beta1.powi(step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(step as i32);
    let p = param.as_mut_slice();
    let m = first.as_mut_slice();
    let v = second.as_mut_slice();
    for (i, &g) in grad.as_slice().iter().enumerate() {
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        p[i] -= lr * cfg.weight_decay * p[i];
        p[i] -= lr * m_hat / (v_hat.sqrt() + cfg.epsilon);
    }
    Ok(())
}

/// Optimizer state for every parameter of a store.
#[derive(Clone, Debug)]
pub struct AdamWState {
    pub config: AdamWConfig,
    step: u64,
    first_moment: Vec<Matrix>,
    second_moment: Vec<Matrix>,
}

impl AdamWState {
    pub fn new(store: &ParamStore, config: AdamWConfig) -> Self {
        let zeros = |e: &super::params::ParamEntry| Matrix::zeros(e.value.rows(), e.value.cols());
        Self {
            config,
            step: 0,
            first_moment: store.entries().iter().map(zeros).collect(),
            second_moment: store.entries().iter().map(zeros).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, id: ParamId) -> &Matrix {
        &self.first_moment[id.index()]
    }

    pub fn second_moment(&self, id: ParamId) -> &Matrix {
        &self.second_moment[id.index()]
    }

    /// Applies one update to every group. `lr_scale` multiplies each group's
    /// base learning rate (the schedule factor). Parameters without a gradient
    /// are treated as having a zero gradient.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        groups: &[ParameterGroup],
        grads: &Gradients,
        lr_scale: f64,
    ) -> Result<()> {
        if !(lr_scale >= 0.0) {
            return Err(Error::Contract(format!("negative learning-rate scale {lr_scale}")));
        }
        self.step += 1;
        for group in groups {
            let lr = group.learning_rate * lr_scale;
            for &id in &group.params {
                let value = store.get_mut(id);
                let zero;
                let grad = match grads.param(id) {
                    Some(g) => g,
                    None => {
                        zero = Matrix::zeros(value.rows(), value.cols());
                        &zero
                    }
                };
                adamw_update(
                    value,
                    grad,
                    &mut self.first_moment[id.index()],
                    &mut self.second_moment[id.index()],
                    self.step,
                    lr,
                    &self.config,
                )?;
            }
        }
        Ok(())
    }
}

/// `initial · (1 − step / total_steps)`, clamped at zero past the end.
pub fn linear_decay_lr(initial: f64, step: u64, total_steps: u64) -> f64 {
    let total = total_steps.max(1);
    if step >= total {
        return 0.0;
    }
    initial * (1.0 - step as f64 / total as f64)
}

/// Global L2 norm over every parameter gradient.
pub fn global_norm(grads: &Gradients) -> f64 {
    grads
        .params()
        .map(|(_, g)| g.as_slice().iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}
