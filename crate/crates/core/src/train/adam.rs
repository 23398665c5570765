use indexmap::IndexMap;

use crate::error::{dim_err, Result};
use crate::model::Model;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments per parameter, plus the shared step count.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct OptimizerState<S> {
    pub step: u64,
    pub moments: IndexMap<String, (Vec<S>, Vec<S>)>,
}

impl<S: Scalar> OptimizerState<S> {
    pub fn new() -> Self {
        Self {
            step: 0,
            moments: IndexMap::new(),
        }
    }
}

/// One Adam update with bias correction and coupled L2 decay
/// (`g ← g + wd·p` before the moments).
///
/// Parameters without a gradient are treated as having a zero gradient;
/// batch-norm scales and shifts are not decayed.
pub fn adam_step<'a, S: Scalar>(
    params: impl IntoIterator<Item = (&'a str, &'a mut Tensor<S>)>,
    grads: &IndexMap<String, Tensor<S>>,
    state: &mut OptimizerState<S>,
    lr: f64,
    weight_decay: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let (b1, b2) = (S::of(cfg.beta1), S::of(cfg.beta2));
    let (ob1, ob2) = (S::of(1.0 - cfg.beta1), S::of(1.0 - cfg.beta2));
    for (name, p) in params {
        let grad = grads.get(name);
        if let Some(g) = grad {
            if g.shape() != p.shape() {
                return dim_err(format!(
                    "adam: gradient {:?} for {name} does not match parameter {:?}",
                    g.shape(),
                    p.shape()
                ));
            }
        }
        let wd = if Model::<S>::is_bn_param(name) { S::zero() } else { S::of(weight_decay) };
        let n = p.numel();
        let (m, v) = state
            .moments
            .entry(name.to_string())
            .or_insert_with(|| (vec![S::zero(); n], vec![S::zero(); n]));
        if m.len() != n {
            return dim_err(format!("adam: moment size {} for {name} but parameter has {n}", m.len()));
        }
        let data = p.data_mut();
        for i in 0..n {
            let gi = grad.map_or(S::zero(), |g| g.data()[i]) + wd * data[i];
            m[i] = b1 * m[i] + ob1 * gi;
            v[i] = b2 * v[i] + ob2 * gi * gi;
            let mhat = m[i].as_f64() / c1;
            let vhat = v[i].as_f64() / c2;
            data[i] = data[i] - S::of(lr * mhat / (vhat.sqrt() + cfg.eps));
        }
    }
    Ok(())
}
