//! AdamW with decoupled weight decay, one state per network.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{GradientSet, ParamSet};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-7, weight_decay: 0.01 }
    }
}

#[derive(Debug, Clone)]
pub struct AdamWState {
    pub step: u64,
    pub m: ParamSet,
    pub v: ParamSet,
    pub config: AdamWConfig,
}

impl AdamWState {
    pub fn new(params: &ParamSet, config: AdamWConfig) -> Result<Self> {
        if config.lr <= 0.0 || config.eps <= 0.0 || config.weight_decay < 0.0 {
            return Err(Error::invalid("lr and eps must be positive, weight_decay non-negative"));
        }
        if !(0.0..1.0).contains(&config.beta1) || !(0.0..1.0).contains(&config.beta2) {
            return Err(Error::invalid("betas must lie in (0, 1)"));
        }
        let zeros = ParamSet {
            layers: params
                .layers
                .iter()
                .map(|l| crate::nn::LayerParams {
                    weight: ndarray::Array2::zeros(l.weight.dim()),
                    bias: ndarray::Array1::zeros(l.bias.len()),
                })
                .collect(),
        };
        Ok(Self { step: 0, m: zeros.clone(), v: zeros, config })
    }
}

/// One decoupled-weight-decay Adam update with bias correction.
pub fn adamw_step(
    params: &ParamSet,
    grads: &GradientSet,
    state: &AdamWState,
) -> Result<(ParamSet, AdamWState)> {
    if params.layers.len() != grads.layers.len()
        || params
            .layers
            .iter()
            .zip(&grads.layers)
            .any(|(p, g)| p.weight.dim() != g.weight.dim() || p.bias.len() != g.bias.len())
    {
        return Err(Error::shape("gradient shape does not match parameters"));
    }
    if !grads.all_finite() {
        let bad = grads.values().position(|v| !v.is_finite()).unwrap_or(0);
        return Err(Error::non_finite(format!("gradient entry #{bad} is not finite")));
    }

    let mut out = params.clone();
    let mut st = state.clone();
    st.step += 1;
    let c = st.config;
    let bc1 = 1.0 - c.beta1.powi(st.step as i32);
    let bc2 = 1.0 - c.beta2.powi(st.step as i32);

    for (((pl, gl), ml), vl) in out
        .layers
        .iter_mut()
        .zip(&grads.layers)
        .zip(st.m.layers.iter_mut())
        .zip(st.v.layers.iter_mut())
    {
        let update = |p: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
            *p *= 1.0 - c.lr * c.weight_decay;
            *m = c.beta1 * *m + (1.0 - c.beta1) * g;
            *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
        };
        for ((p, &g), (m, v)) in pl
            .weight
            .iter_mut()
            .zip(gl.weight.iter())
            .zip(ml.weight.iter_mut().zip(vl.weight.iter_mut()))
        {
            update(p, g, m, v);
        }
        for ((p, &g), (m, v)) in pl
            .bias
            .iter_mut()
            .zip(gl.bias.iter())
            .zip(ml.bias.iter_mut().zip(vl.bias.iter_mut()))
        {
            update(p, g, m, v);
        }
    }
    Ok((out, st))
}
