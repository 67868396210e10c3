//! Adam, the warmup + cosine learning-rate schedule, and gradient accumulation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::head::ParamSet;
use crate::tensor::Real;

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub first_moment: Vec<Vec<T>>,
    pub second_moment: Vec<Vec<T>>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Real> OptimizerState<T> {
    pub fn new<P: ParamSet<T>>(params: &P) -> Self {
        let mut first = Vec::new();
        params.visit(&mut |_, s| first.push(vec![T::zero(); s.len()]));
        Self {
            second_moment: first.clone(),
            first_moment: first,
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step<T: Real, P: ParamSet<T>>(params: &mut P, grads: &P, state: &mut OptimizerState<T>, lr: f64) -> Result<()> {
    let param_layout = params.layout();
    let grad_layout = grads.layout();
    let state_ok = state.first_moment.len() == param_layout.len()
        && state
            .first_moment
            .iter()
            .zip(&param_layout)
            .all(|(m, (_, n))| m.len() == *n);
    if param_layout != grad_layout || !state_ok {
        return Err(Error::shape(
            "adam_step",
            format!("{param_layout:?}"),
            format!("grads {grad_layout:?}, state with {} buffers", state.first_moment.len()),
        ));
    }

    let mut flat_grads: Vec<Vec<T>> = Vec::new();
    grads.visit(&mut |_, s| flat_grads.push(s.to_vec()));

    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let bc1 = 1.0 - b1.powi(t);
    let bc2 = 1.0 - b2.powi(t);
    let (tb1, tb2, teps, tlr) = (T::lit(b1), T::lit(b2), T::lit(state.eps), T::lit(lr));
    let (tbc1, tbc2) = (T::lit(bc1), T::lit(bc2));

    let mut idx = 0;
    let (first, second) = (&mut state.first_moment, &mut state.second_moment);
    params.visit_mut(&mut |_, p| {
        let g = &flat_grads[idx];
        let m = &mut first[idx];
        let v = &mut second[idx];
        for k in 0..p.len() {
            m[k] = tb1 * m[k] + (T::one() - tb1) * g[k];
            v[k] = tb2 * v[k] + (T::one() - tb2) * g[k] * g[k];
            let m_hat = m[k] / tbc1;
            let v_hat = v[k] / tbc2;
            p[k] -= tlr * m_hat / (v_hat.sqrt() + teps);
        }
        idx += 1;
    });
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub final_lr_fraction: f64,
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::config("base_lr", "must be positive"));
        }
        if self.warmup_steps > self.total_steps {
            return Err(Error::config("warmup_steps", "must not exceed total steps"));
        }
        if !(0.0..=1.0).contains(&self.final_lr_fraction) {
            return Err(Error::config("final_lr_fraction", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Linear warmup from 0 to `base_lr`, then cosine decay to
/// `final_lr_fraction · base_lr` at `total_steps`, flat afterwards.
///
/// `step` counts optimizer updates already applied, so the first update uses
/// `lr_at(0)`; callers wanting a nonzero first step pass `step + 1`.
pub fn lr_at(step: u64, cfg: &ScheduleConfig) -> f64 {
    let floor = cfg.final_lr_fraction * cfg.base_lr;
    if step < cfg.warmup_steps {
        return cfg.base_lr * step as f64 / cfg.warmup_steps as f64;
    }
    if step >= cfg.total_steps {
        return if cfg.total_steps == cfg.warmup_steps { cfg.base_lr } else { floor };
    }
    let span = (cfg.total_steps - cfg.warmup_steps) as f64;
    let progress = (step - cfg.warmup_steps) as f64 / span;
    let cosine = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
    floor + (cfg.base_lr - floor) * cosine
}

/// Element-wise mean of `k ≥ 1` gradient sets with identical layout.
pub fn accumulate<T: Real, P: ParamSet<T> + Clone>(grads: &[P]) -> Result<P> {
    let first = grads
        .first()
        .ok_or_else(|| Error::InvalidArgument("accumulate needs at least one gradient set".into()))?;
    let layout = first.layout();
    for g in &grads[1..] {
        if g.layout() != layout {
            return Err(Error::shape("accumulate", format!("{layout:?}"), format!("{:?}", g.layout())));
        }
    }
    let k = T::lit(grads.len() as f64);
    let mut sum = first.flatten();
    for g in &grads[1..] {
        for (s, x) in sum.iter_mut().zip(g.flatten()) {
            *s += x;
        }
    }
    for s in sum.iter_mut() {
        *s /= k;
    }
    let mut out = first.clone();
    out.assign_flat(&sum);
    Ok(out)
}
