use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelParams, ParamGroup};
use crate::numerics::{Scalar, Tensor};
use crate::params::ParamTree;

/// Linear warm-up to `base`, then polynomial decay to zero at `total`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base: f64,
    pub warmup: usize,
    pub total: usize,
    pub power: f64,
}

pub fn lr_at(t: usize, s: &LrSchedule) -> f64 {
    let t = t.min(s.total);
    if t < s.warmup {
        return s.base * t as f64 / s.warmup as f64;
    }
    if s.total <= s.warmup {
        return s.base;
    }
    let progress = (t - s.warmup) as f64 / (s.total - s.warmup) as f64;
    s.base * (1.0 - progress).powf(s.power)
}

/// Base learning rate of each parameter group.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupRates {
    pub rgb: f64,
    pub depth: f64,
    pub head: f64,
}

impl GroupRates {
    pub fn of(&self, g: ParamGroup) -> f64 {
        match g {
            ParamGroup::RgbEncoder => self.rgb,
            ParamGroup::DepthEncoder => self.depth,
            ParamGroup::Head => self.head,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First/second moment estimates with decoupled weight decay.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct AdamState<T> {
    pub m: ModelParams<T>,
    pub v: ModelParams<T>,
    pub steps: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ModelParams<T>) -> Self {
        let zeros = params.map(&mut |_, t| Tensor::zeros(t.shape()));
        Self {
            m: zeros.clone(),
            v: zeros,
            steps: 0,
        }
    }

    pub fn cast<U: Scalar>(&self) -> AdamState<U> {
        AdamState {
            m: self.m.map(&mut |_, t| t.cast()),
            v: self.v.map(&mut |_, t| t.cast()),
            steps: self.steps,
        }
    }

    /// Updates every leaf that has a gradient; `rate(name)` is its learning rate.
    pub fn step(
        &mut self,
        params: &mut ModelParams<T>,
        grads: &crate::model::SegModel<Option<Tensor<T>>>,
        cfg: &AdamConfig,
        rate: &dyn Fn(&str) -> f64,
    ) -> Result<()> {
        self.steps += 1;
        let f = T::from_f64_lossy;
        let (b1, b2) = (f(cfg.beta1), f(cfg.beta2));
        let bc1 = f(1.0 - cfg.beta1.powi(self.steps as i32));
        let bc2 = f(1.0 - cfg.beta2.powi(self.steps as i32));
        let eps = f(cfg.eps);
        let names: Vec<String> = params.named().into_iter().map(|(n, _)| n).collect();
        let leaves = params.leaves_mut();
        let (ms, vs) = (self.m.leaves_mut(), self.v.leaves_mut());
        let gs = grads.leaves();
        if [ms.len(), vs.len(), gs.len()] != [leaves.len(); 3] {
            return Err(Error::Contract("optimizer state does not match parameter tree".into()));
        }
        for ((((p, m), v), g), name) in leaves.into_iter().zip(ms).zip(vs).zip(gs).zip(&names) {
            let Some(g) = g else { continue };
            if g.shape() != p.shape() {
                return Err(Error::dim("adam step", g.shape(), p.shape()));
            }
            let lr = f(rate(name));
            let decay = T::one() - lr * f(cfg.weight_decay);
            let one = T::one();
            for (((p, m), v), &g) in p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data())
            {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                let update = (*m / bc1) / ((*v / bc2).sqrt() + eps);
                *p = *p * decay - lr * update;
            }
        }
        Ok(())
    }
}

/// `θ_T ← α·θ_T + (1 − α)·θ_S` leaf by leaf. Elements already equal are left
/// untouched so frozen weights stay bit-identical.
pub fn ema_update<T: Scalar>(teacher: &mut ModelParams<T>, student: &ModelParams<T>, alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::arg(format!("EMA momentum {alpha} outside [0, 1]")));
    }
    let tn = teacher.named().into_iter().map(|(n, t)| (n, t.shape().to_vec())).collect::<Vec<_>>();
    let sn = student.named().into_iter().map(|(n, t)| (n, t.shape().to_vec())).collect::<Vec<_>>();
    if tn != sn {
        return Err(Error::Contract("teacher and student parameter trees differ".into()));
    }
    let a = T::from_f64_lossy(alpha);
    let b = T::from_f64_lossy(1.0 - alpha);
    for (t, s) in teacher.leaves_mut().into_iter().zip(student.leaves()) {
        for (t, &s) in t.data_mut().iter_mut().zip(s.data()) {
            if *t != s {
                *t = a * *t + b * s;
            }
        }
    }
    Ok(())
}
