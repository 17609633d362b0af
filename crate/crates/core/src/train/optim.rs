//! Adam and SGD updates applied in parameter-name order.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adam,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::invalid("adam betas must lie in [0, 1)"));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::invalid("adam epsilon must be positive"));
        }
        Ok(())
    }
}

/// First and second moments per parameter, plus the step count.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub m: ParamStore<T>,
    pub v: ParamStore<T>,
    pub step: u64,
}

impl<T: Real> Default for OptimizerState<T> {
    fn default() -> Self {
        OptimizerState {
            m: ParamStore::new(),
            v: ParamStore::new(),
            step: 0,
        }
    }
}

/// Applies one update for every tensor in `grads`. Moments are created
/// lazily as zeros. Arithmetic is carried out in `f64` per element.
pub fn optimizer_step<T: Real>(
    params: &mut ParamStore<T>,
    grads: &ParamStore<T>,
    state: &mut OptimizerState<T>,
    config: &OptimizerConfig,
) -> Result<()> {
    for (name, g) in grads.iter() {
        let p = params
            .get(name)
            .ok_or_else(|| Error::Missing(format!("parameter `{name}` for its gradient")))?;
        if p.shape() != g.shape() {
            return Err(Error::DimMismatch(format!(
                "gradient for `{name}` has shape {:?}, parameter has {:?}",
                g.shape(),
                p.shape()
            )));
        }
    }
    state.step += 1;
    let lr = config.learning_rate;
    match config.kind {
        OptimizerKind::Sgd => {
            for (name, g) in grads.iter() {
                let p = params.get_mut(name).expect("checked above");
                for (pv, gv) in p.data_mut().iter_mut().zip(g.data()) {
                    *pv = T::from_f64_lossy(pv.as_f64() - lr * gv.as_f64());
                }
            }
        }
        OptimizerKind::Adam => {
            let (b1, b2) = (config.beta1, config.beta2);
            let c1 = 1.0 - b1.powf(state.step as f64);
            let c2 = 1.0 - b2.powf(state.step as f64);
            for (name, g) in grads.iter() {
                if !state.m.contains(name) {
                    state.m.insert_unchecked(name.to_string(), Tensor::zeros(g.shape()));
                    state.v.insert_unchecked(name.to_string(), Tensor::zeros(g.shape()));
                }
                let m = state.m.get_mut(name).expect("inserted above");
                let v = state.v.get_mut(name).expect("inserted above");
                let p = params.get_mut(name).expect("checked above");
                let it = p
                    .data_mut()
                    .iter_mut()
                    .zip(m.data_mut().iter_mut())
                    .zip(v.data_mut().iter_mut());
                for (((pv, mv), vv), gv) in it.zip(g.data()) {
                    let gv = gv.as_f64();
                    let mn = b1 * mv.as_f64() + (1.0 - b1) * gv;
                    let vn = b2 * vv.as_f64() + (1.0 - b2) * gv * gv;
                    *mv = T::from_f64_lossy(mn);
                    *vv = T::from_f64_lossy(vn);
                    let update = lr * (mn / c1) / ((vn / c2).sqrt() + config.epsilon);
                    *pv = T::from_f64_lossy(pv.as_f64() - update);
                }
            }
        }
    }
    Ok(())
}

/// Rescales `grads` so their joint L2 norm is at most `max_norm`; returns
/// the norm before clipping. `max_norm <= 0` disables clipping.
pub fn clip_global_norm<T: Real>(grads: &mut ParamStore<T>, max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|(_, t)| t.data().iter())
        .map(|v| v.as_f64() * v.as_f64())
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for (_, t) in grads.iter_mut() {
            for v in t.data_mut() {
                *v = T::from_f64_lossy(v.as_f64() * s);
            }
        }
    }
    norm
}
