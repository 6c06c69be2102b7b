use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// How weight decay enters the update.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightDecayMode {
    /// `p <- p - lr * wd * p`, outside the moment estimates.
    #[default]
    Decoupled,
    /// `g <- g + wd * p` before the moment updates (L2 penalty).
    Coupled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub weight_decay_mode: WeightDecayMode,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub max_steps: usize,
    pub seed: u64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 1.5e-4,
            weight_decay: 5e-3,
            weight_decay_mode: WeightDecayMode::Decoupled,
            batch_size: 16,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            max_steps: 300,
            seed: 0,
        }
    }
}

impl OptimConfig {
    /// `lr = 0` is accepted so a run can be replayed without updates.
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr >= 0.0
            && self.lr.is_finite()
            && self.weight_decay >= 0.0
            && self.batch_size >= 1
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.adam_eps > 0.0;
        if !ok {
            return Err(Error::ConfigMismatch(format!("invalid optimizer config {self:?}")));
        }
        Ok(())
    }
}

/// First and second moments per parameter plus the step count.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        AdamState {
            m: params.iter().map(Tensor::zeros_like).collect(),
            v: params.iter().map(Tensor::zeros_like).collect(),
            t: 0,
        }
    }
}

/// One Adam update with bias correction. Every gradient is checked before
/// anything is modified, so a non-finite gradient leaves `params` and
/// `state` untouched and reports the offending parameter index.
pub fn adam_step(params: &mut [Tensor], grads: &[Tensor], state: &mut AdamState, cfg: &OptimConfig) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() || params.len() != state.v.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} parameters, {} gradients, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.dims() != g.dims() || p.dims() != state.m[i].dims() || p.dims() != state.v[i].dims() {
            return Err(Error::ShapeMismatch(format!(
                "parameter {i} is {:?}, gradient {:?}",
                p.dims(),
                g.dims()
            )));
        }
        if !g.is_finite() {
            return Err(Error::NonFiniteGradient(format!("#{i}")));
        }
    }
    state.t += 1;
    let t_i = i32::try_from(state.t).unwrap_or(i32::MAX);
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powi(t_i);
    let c2 = 1.0 - b2.powi(t_i);
    let coupled = cfg.weight_decay_mode == WeightDecayMode::Coupled;
    for (i, p) in params.iter_mut().enumerate() {
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (k, w) in p.data_mut().iter_mut().enumerate() {
            let gk = if coupled { g[k] + cfg.weight_decay * *w } else { g[k] };
            m[k] = b1 * m[k] + (1.0 - b1) * gk;
            v[k] = b2 * v[k] + (1.0 - b2) * gk * gk;
            let m_hat = m[k] / c1;
            let v_hat = v[k] / c2;
            let decay = if coupled { 0.0 } else { cfg.lr * cfg.weight_decay * *w };
            *w = *w - cfg.lr * m_hat / (v_hat.sqrt() + cfg.adam_eps) - decay;
        }
    }
    Ok(())
}
