use std::collections::BTreeMap;
use std::f64::consts::PI;

use super::TrainConfig;
use crate::error::{contract, Error, Result};
use crate::tensor::{Element, GradMap, ParamStore};

/// Linear warmup from 0 to `base_lr`, then cosine decay to 0 at `total_steps`.
pub fn lr_at(step: u64, config: &TrainConfig) -> Result<f64> {
    let (warmup, total) = (config.warmup_steps, config.total_steps);
    if step > total {
        return contract(format!("step {step} beyond total_steps {total}"));
    }
    if step < warmup {
        return Ok(config.base_lr * step as f64 / warmup as f64);
    }
    let progress = (step - warmup) as f64 / (total - warmup) as f64;
    Ok(config.base_lr * 0.5 * (1.0 + (PI * progress).cos()))
}

/// Scales every gradient by `max_norm / norm` when the global norm exceeds
/// `max_norm`; returns the norm before clipping.
pub fn clip_grad_norm<T: Element>(grads: &mut GradMap<T>, max_norm: f64) -> Result<f64> {
    if max_norm.is_nan() || max_norm <= 0.0 {
        return contract(format!("max_norm {max_norm} must be positive"));
    }
    let norm = grads.global_norm();
    if norm > max_norm {
        let factor = T::from_f64(max_norm / norm);
        for (_, g) in grads.iter_mut() {
            g.iter_mut().for_each(|v| *v *= factor);
        }
    }
    Ok(norm)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }
}

/// First and second moments per parameter plus the step counter.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct OptimizerState<T> {
    pub step: u64,
    pub m: BTreeMap<String, Vec<T>>,
    pub v: BTreeMap<String, Vec<T>>,
}

impl<T: Element> OptimizerState<T> {
    pub fn new() -> Self {
        Self {
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Moment shapes must match the parameters they track.
    pub fn validate(&self, params: &ParamStore<T>) -> Result<()> {
        for (kind, moments) in [("first", &self.m), ("second", &self.v)] {
            for (name, data) in moments {
                let p = params
                    .get(name)
                    .ok_or_else(|| Error::Config(format!("{kind} moment for unknown parameter {name}")))?;
                if p.data.len() != data.len() {
                    return Err(Error::Dimension {
                        op: "optimizer moment",
                        lhs: p.shape.clone(),
                        rhs: vec![data.len()],
                    });
                }
            }
        }
        Ok(())
    }
}

/// One decoupled-weight-decay Adam update. Parameters without a gradient
/// entry are treated as having a zero gradient. Nothing is modified when a
/// gradient is non-finite.
pub fn adamw_step<T: Element>(
    params: &mut ParamStore<T>,
    grads: &GradMap<T>,
    state: &mut OptimizerState<T>,
    lr: f64,
    opt: &AdamW,
) -> Result<()> {
    for (name, g) in grads.iter() {
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("gradient of {name} is not finite")));
        }
        match params.get(name) {
            Some(p) if p.data.len() == g.len() => {}
            Some(p) => {
                return Err(Error::Dimension {
                    op: "adamw",
                    lhs: p.shape.clone(),
                    rhs: vec![g.len()],
                })
            }
            None => return Err(Error::Config(format!("gradient for unknown parameter {name}"))),
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bias1 = 1.0 - opt.beta1.powi(t);
    let bias2 = 1.0 - opt.beta2.powi(t);
    for (name, p) in params.iter_mut() {
        let n = p.data.len();
        let g = grads.get(name);
        let m = state.m.entry(name.clone()).or_insert_with(|| vec![T::ZERO; n]);
        let v = state.v.entry(name.clone()).or_insert_with(|| vec![T::ZERO; n]);
        let decay = if p.decay { lr * opt.weight_decay } else { 0.0 };
        let data = std::sync::Arc::make_mut(&mut p.data);
        for i in 0..n {
            let gi = g.map_or(0.0, |g| g[i].to_f64());
            let mi = opt.beta1 * m[i].to_f64() + (1.0 - opt.beta1) * gi;
            let vi = opt.beta2 * v[i].to_f64() + (1.0 - opt.beta2) * gi * gi;
            m[i] = T::from_f64(mi);
            v[i] = T::from_f64(vi);
            let mut x = data[i].to_f64();
            x -= decay * x;
            x -= lr * (mi / bias1) / ((vi / bias2).sqrt() + opt.eps);
            data[i] = T::from_f64(x);
        }
    }
    Ok(())
}
