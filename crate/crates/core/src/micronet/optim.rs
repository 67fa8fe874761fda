use serde::{Deserialize, Serialize};

use crate::error::{DgtError, Result};
use crate::tensor::Tensor;

use super::params::{Gradients, NetworkParams, Trainable};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

/// First and second moment estimates, one pair per parameter tensor.
#[derive(Debug, Clone, Default)]
pub struct AdamWState {
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamWState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// Per-coordinate multiplier applied to the final optimizer delta of the
/// tensors in `[start, start + factors.len())` (canonical order).
#[derive(Debug, Clone)]
pub struct UpdateMask<'a> {
    pub start: usize,
    pub factors: &'a [Tensor],
}

/// One decoupled-weight-decay Adam step. Tensors not allowed by `trainable`
/// are left bit-identical and their moments untouched.
pub fn apply_update(
    params: &mut NetworkParams,
    grads: &Gradients,
    state: &mut AdamWState,
    config: &AdamWConfig,
    trainable: Trainable,
    mask: Option<&UpdateMask<'_>>,
) -> Result<()> {
    grads.check_congruent(params)?;
    let mut tensors = params.tensors_mut();
    if state.m.is_empty() {
        state.m = tensors.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        state.v = state.m.clone();
    } else if state.m.len() != tensors.len() || state.m.iter().zip(&tensors).any(|(m, (_, t))| m.shape() != t.shape()) {
        return Err(DgtError::dimension("optimizer state", "moments congruent with parameters", "mismatched moments"));
    }
    if let Some(mk) = mask {
        for (i, f) in mk.factors.iter().enumerate() {
            let (_, t) = tensors
                .get(mk.start + i)
                .ok_or_else(|| DgtError::dimension("update mask", "within parameter list", mk.start + i))?;
            f.expect_shape("update mask", t.shape())?;
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - (config.beta1 as f64).powi(t);
    let bc2 = 1.0 - (config.beta2 as f64).powi(t);
    for (i, (group, param)) in tensors.iter_mut().enumerate() {
        if !trainable.allows(*group) {
            continue;
        }
        let factor = mask.and_then(|mk| i.checked_sub(mk.start).and_then(|j| mk.factors.get(j)));
        let g = grads.tensors[i].data();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (k, p) in param.data_mut().iter_mut().enumerate() {
            m[k] = config.beta1 * m[k] + (1.0 - config.beta1) * g[k];
            v[k] = config.beta2 * v[k] + (1.0 - config.beta2) * g[k] * g[k];
            let m_hat = m[k] as f64 / bc1;
            let v_hat = v[k] as f64 / bc2;
            let mut delta = -(config.lr as f64) * (m_hat / (v_hat.sqrt() + config.eps as f64) + config.weight_decay as f64 * *p as f64);
            if let Some(f) = factor {
                delta *= f.data()[k] as f64;
            }
            if delta != 0.0 {
                *p = (*p as f64 + delta) as f32;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::micronet::params::{NetConfig, ParamGroup};

    fn params() -> NetworkParams {
        NetworkParams::init(&NetConfig::default(), 11).unwrap()
    }

    #[test]
    fn zero_grad_zero_decay_is_noop() {
        let mut p = params();
        let before = p.clone();
        let g = p.zeros_like();
        let cfg = AdamWConfig {
            lr: 0.1,
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut st = AdamWState::new();
        for _ in 0..3 {
            apply_update(&mut p, &g, &mut st, &cfg, Trainable::all(), None).unwrap();
        }
        assert!(p.bitwise_eq(&before));
    }

    #[test]
    fn frozen_encoder_is_bit_identical() {
        let mut p = params();
        let before = p.clone();
        let mut g = p.zeros_like();
        g.tensors.iter_mut().for_each(|t| t.fill(0.3));
        let mut st = AdamWState::new();
        let cfg = AdamWConfig {
            lr: 0.01,
            ..Default::default()
        };
        apply_update(&mut p, &g, &mut st, &cfg, Trainable::decoder_suffix(1), None).unwrap();
        for ((grp, a), (_, b)) in p.tensors().iter().zip(before.tensors()) {
            let changed = !a.bitwise_eq(b);
            let expect_change = matches!(grp, ParamGroup::Decoder(i) if *i >= 1);
            assert_eq!(changed, expect_change, "{grp:?}");
        }
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = params();
        let before = p.decoder[3].conv2.bias.data()[0];
        let mut g = p.zeros_like();
        let idx = p.scope_range(crate::micronet::ParamScope::DecoderFrom(3)).end - 1;
        g.tensors[idx].data_mut()[0] = 1.0;
        let cfg = AdamWConfig {
            lr: 0.1,
            weight_decay: 0.0,
            ..Default::default()
        };
        apply_update(&mut p, &g, &mut AdamWState::new(), &cfg, Trainable::all(), None).unwrap();
        let step = p.decoder[3].conv2.bias.data()[0] - before;
        assert!((step + 0.1).abs() < 1e-6, "{step}");
    }
}
