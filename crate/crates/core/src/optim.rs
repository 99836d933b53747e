//! ADAM with bias correction and the inverse-square-root warmup schedule.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
        }
    }
}

/// First and second moment estimates per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: BTreeMap<String, Tensor<T>>,
    pub v: BTreeMap<String, Tensor<T>>,
}

impl<T> Default for AdamState<T> {
    fn default() -> Self {
        Self {
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }
}

impl<T: Element> AdamState<T> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Stores the moments as `optim.m.<name>` / `optim.v.<name>` entries.
    pub fn to_store(&self) -> Result<ParamStore<T>> {
        let mut s = ParamStore::new();
        for (k, t) in &self.m {
            s.insert(format!("optim.m.{k}"), t.clone())?;
        }
        for (k, t) in &self.v {
            s.insert(format!("optim.v.{k}"), t.clone())?;
        }
        Ok(s)
    }

    pub fn from_store(store: &ParamStore<T>, step: u64) -> Self {
        let mut st = Self {
            step,
            ..Self::default()
        };
        for (name, t) in store.iter() {
            if let Some(k) = name.strip_prefix("optim.m.") {
                st.m.insert(k.to_string(), t.clone());
            } else if let Some(k) = name.strip_prefix("optim.v.") {
                st.v.insert(k.to_string(), t.clone());
            }
        }
        st
    }
}

/// One ADAM update of every trainable parameter from the gradients held in
/// `store`.
pub fn adam_step<T: Element>(store: &mut ParamStore<T>, state: &mut AdamState<T>, lr: f64, cfg: &AdamConfig) -> Result<()> {
    let names = store.trainable_names();
    for name in &names {
        if let Some(g) = store.grad(name) {
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient of `{name}`")));
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let (b1, b2): (T, T) = (T::from_f64_lossy(cfg.beta1), T::from_f64_lossy(cfg.beta2));
    let (one, eps) = (T::one(), T::from_f64_lossy(cfg.eps));
    let step_size = T::from_f64_lossy(lr / bc1);
    let inv_bc2 = T::from_f64_lossy(1.0 / bc2);
    for name in names {
        let Some(g) = store.grad(&name).cloned() else {
            continue;
        };
        let shape = g.shape().to_vec();
        let m = state.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(&shape));
        let v = state.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(&shape));
        if m.shape() != shape.as_slice() || v.shape() != shape.as_slice() {
            return Err(Error::shape("adam_step", m.shape(), &shape));
        }
        let p = store
            .get_mut(&name)
            .ok_or_else(|| Error::Contract(format!("missing parameter `{name}`")))?;
        for (((pi, &gi), mi), vi) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut().iter_mut())
            .zip(v.data_mut().iter_mut())
        {
            *mi = b1 * *mi + (one - b1) * gi;
            *vi = b2 * *vi + (one - b2) * gi * gi;
            *pi -= step_size * *mi / ((*vi * inv_bc2).sqrt() + eps);
        }
    }
    store.bump_version();
    Ok(())
}

/// How the warmup factor combines with the base rate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleMode {
    /// `base_lr · min(step^-0.5, step · warmup^-1.5)`
    #[default]
    Multiply,
    /// `min(step^-0.5, step · warmup^-1.5)` on its own.
    Replace,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub warmup: u64,
    #[serde(default)]
    pub mode: ScheduleMode,
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.warmup == 0 {
            return Err(Error::Config("warmup must be at least 1".into()));
        }
        if !(self.base_lr > 0.0) || !self.base_lr.is_finite() {
            return Err(Error::Config(format!("base_lr must be positive, got {}", self.base_lr)));
        }
        Ok(())
    }

    pub fn at(&self, step: u64) -> Result<f64> {
        lr_schedule(step, self)
    }
}

pub fn lr_schedule(step: u64, s: &LrSchedule) -> Result<f64> {
    s.validate()?;
    if step == 0 {
        return Err(Error::Config("learning-rate steps start at 1".into()));
    }
    let (t, w) = (step as f64, s.warmup as f64);
    let factor = t.powf(-0.5).min(t * w.powf(-1.5));
    Ok(match s.mode {
        ScheduleMode::Multiply => s.base_lr * factor,
        ScheduleMode::Replace => factor,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(v: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::full(&[3], v)).unwrap();
        s.ensure_grads();
        s
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut s = store(0.5);
        let mut st = AdamState::new();
        adam_step(&mut s, &mut st, 0.1, &AdamConfig::default()).unwrap();
        assert_eq!(s.get("w").unwrap().data(), &[0.5; 3]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = store(0.0);
        s.accumulate_grad("w", &[2.0, -3.0, 0.5]).unwrap();
        let mut st = AdamState::new();
        adam_step(&mut s, &mut st, 0.01, &AdamConfig::default()).unwrap();
        let p = s.get("w").unwrap().data();
        for (pi, sign) in p.iter().zip([-1.0, 1.0, -1.0]) {
            assert!((pi - sign * 0.01).abs() < 1e-9, "{pi}");
        }
    }

    #[test]
    fn nan_gradient_names_the_parameter() {
        let mut s = store(0.0);
        s.accumulate_grad("w", &[f64::NAN, 0.0, 0.0]).unwrap();
        let err = adam_step(&mut s, &mut AdamState::new(), 0.01, &AdamConfig::default()).unwrap_err();
        assert!(err.to_string().contains("`w`"));
    }

    #[test]
    fn state_round_trips_through_store() {
        let mut s = store(0.0);
        s.accumulate_grad("w", &[1.0, 2.0, 3.0]).unwrap();
        let mut st = AdamState::new();
        adam_step(&mut s, &mut st, 0.01, &AdamConfig::default()).unwrap();
        assert_eq!(AdamState::from_store(&st.to_store().unwrap(), st.step), st);
    }

    #[test]
    fn schedule_values() {
        let s = LrSchedule {
            base_lr: 0.02,
            warmup: 6000,
            mode: ScheduleMode::Multiply,
        };
        let cross = 0.02 / 6000f64.sqrt();
        assert!((s.at(6000).unwrap() - cross).abs() < 1e-15);
        assert!((s.at(6000).unwrap() - 2.582e-4).abs() < 1e-7);
        assert!((s.at(1).unwrap() - 0.02 * 6000f64.powf(-1.5)).abs() < 1e-20);
        assert!((s.at(1).unwrap() - 4.30e-8).abs() < 1e-10);
        assert!(s.at(0).is_err());
        let r = LrSchedule {
            mode: ScheduleMode::Replace,
            ..s
        };
        assert!((r.at(6000).unwrap() - 6000f64.powf(-0.5)).abs() < 1e-15);
    }

    #[test]
    fn schedule_is_unimodal() {
        let s = LrSchedule {
            base_lr: 0.02,
            warmup: 200,
            mode: ScheduleMode::Multiply,
        };
        let lrs: Vec<f64> = (1..=1000).map(|t| s.at(t).unwrap()).collect();
        assert!(lrs[..200].windows(2).all(|w| w[1] >= w[0]));
        assert!(lrs[199..].windows(2).all(|w| w[1] <= w[0]));
    }
}
