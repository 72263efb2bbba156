//! Optimizer suite: AdamW (decoupled decay), plain SGD and SGD+momentum
//! (L2-coupled decay), and SGDW with Nesterov momentum (decoupled decay
//! applied after the gradient step). Weight decay — coupled or not — touches
//! only tensors flagged for decay (the trunk weight matrices).
//!
//! Also hosts the shared schedules: linear warmup + cosine decay with a
//! floor for the learning rate, the lambda doubling switch, and global-norm
//! gradient clipping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::numeric::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptKind {
    Adamw,
    Sgd,
    SgdMomentum,
    SgdwNesterov,
}

impl std::str::FromStr for OptKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adamw" => Ok(OptKind::Adamw),
            "sgd" => Ok(OptKind::Sgd),
            "sgd-momentum" => Ok(OptKind::SgdMomentum),
            "sgdw-nesterov" => Ok(OptKind::SgdwNesterov),
            other => Err(Error::InvalidConfig(format!("unknown optimizer {other}"))),
        }
    }
}

impl std::fmt::Display for OptKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            OptKind::Adamw => "adamw",
            OptKind::Sgd => "sgd",
            OptKind::SgdMomentum => "sgd-momentum",
            OptKind::SgdwNesterov => "sgdw-nesterov",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DecayCoupling {
    Decoupled,
    L2,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct OptimizerConfig {
    pub kind: OptKind,
    pub lr: f64,
    /// Warmup length as a fraction of total steps.
    pub warmup_frac: f64,
    /// Cosine floor as a fraction of the peak learning rate.
    pub floor_frac: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub decay_coupling: DecayCoupling,
    pub momentum: f64,
    pub clip: f64,
}

impl OptimizerConfig {
    pub fn adamw_desk() -> Self {
        OptimizerConfig {
            kind: OptKind::Adamw,
            lr: 1e-3,
            warmup_frac: 0.15,
            floor_frac: 0.0,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.5,
            decay_coupling: DecayCoupling::Decoupled,
            momentum: 0.0,
            clip: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok_beta = |b: f64| (0.0..1.0).contains(&b);
        if !ok_beta(self.beta1) || !ok_beta(self.beta2) {
            return Err(Error::InvalidConfig("betas must satisfy 0 <= beta < 1".into()));
        }
        if self.lr <= 0.0 {
            return Err(Error::InvalidConfig("lr must be > 0".into()));
        }
        if self.clip <= 0.0 {
            return Err(Error::InvalidConfig("clip must be > 0".into()));
        }
        if !(0.0..=1.0).contains(&self.warmup_frac) || !(0.0..=1.0).contains(&self.floor_frac) {
            return Err(Error::InvalidConfig(
                "warmup and floor fractions must be in [0,1]".into(),
            ));
        }
        if self.weight_decay < 0.0 || self.eps < 0.0 {
            return Err(Error::InvalidConfig("decay and eps must be >= 0".into()));
        }
        match self.kind {
            OptKind::Adamw => {
                if self.momentum != 0.0 {
                    return Err(Error::InvalidConfig(
                        "momentum is not an adamw parameter".into(),
                    ));
                }
                if self.decay_coupling != DecayCoupling::Decoupled {
                    return Err(Error::InvalidConfig("adamw decay is decoupled".into()));
                }
            }
            OptKind::Sgd => {
                if self.momentum != 0.0 {
                    return Err(Error::InvalidConfig(
                        "plain sgd takes no momentum; use sgd-momentum".into(),
                    ));
                }
                if self.decay_coupling != DecayCoupling::L2 {
                    return Err(Error::InvalidConfig("sgd decay couples as L2".into()));
                }
            }
            OptKind::SgdMomentum => {
                if !(0.0..1.0).contains(&self.momentum) {
                    return Err(Error::InvalidConfig("momentum must be in [0,1)".into()));
                }
                if self.decay_coupling != DecayCoupling::L2 {
                    return Err(Error::InvalidConfig("sgd-momentum decay couples as L2".into()));
                }
            }
            OptKind::SgdwNesterov => {
                if !(0.0..1.0).contains(&self.momentum) {
                    return Err(Error::InvalidConfig("momentum must be in [0,1)".into()));
                }
                if self.decay_coupling != DecayCoupling::Decoupled {
                    return Err(Error::InvalidConfig("sgdw decay is decoupled".into()));
                }
            }
        }
        Ok(())
    }
}

/// Learning rate at 1-based step `t` of `total`: linear warmup to the peak,
/// then cosine decay to `floor_frac * lr`.
pub fn lr_at(cfg: &OptimizerConfig, t: u64, total: u64) -> f64 {
    let warmup = (cfg.warmup_frac * total as f64).round() as u64;
    if warmup > 0 && t <= warmup {
        return cfg.lr * t as f64 / warmup as f64;
    }
    let floor = cfg.floor_frac * cfg.lr;
    if total <= warmup {
        return cfg.lr;
    }
    let progress = (t - warmup) as f64 / (total - warmup) as f64;
    floor + (cfg.lr - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Probe-loss weight: the initial value before the switch step, exactly
/// doubled from the switch step on.
pub fn lambda_at(initial: f64, switch_step: u64, step: u64) -> f64 {
    if step < switch_step {
        initial
    } else {
        2.0 * initial
    }
}

/// Scales gradients in place so the global norm is at most `clip`;
/// returns the pre-clip norm.
pub fn clip_global_norm<T: Real>(grads: &mut [Vec<T>], clip: f64) -> f64 {
    let sq: f64 = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|&x| {
            let v = x.to_f64();
            v * v
        })
        .sum();
    let norm = sq.sqrt();
    if norm > clip {
        let s = T::from_f64(clip / norm);
        for g in grads.iter_mut() {
            for x in g.iter_mut() {
                *x = *x * s;
            }
        }
    }
    norm
}

#[derive(Debug, Clone)]
pub struct Optimizer<T> {
    pub cfg: OptimizerConfig,
    /// Steps applied so far; AdamW bias correction uses t = step count.
    pub t: u64,
    /// First moment (adamw) or velocity (momentum variants).
    pub m: Vec<Vec<T>>,
    /// Second moment (adamw only; empty otherwise).
    pub v: Vec<Vec<T>>,
}

impl<T: Real> Optimizer<T> {
    pub fn new(cfg: OptimizerConfig, model: &Model<T>) -> Result<Self> {
        cfg.validate()?;
        let m = match cfg.kind {
            OptKind::Sgd => Vec::new(),
            _ => model.zeros_like(),
        };
        let v = match cfg.kind {
            OptKind::Adamw => model.zeros_like(),
            _ => Vec::new(),
        };
        Ok(Optimizer { cfg, t: 0, m, v })
    }

    /// One update with already-clipped gradients at learning rate `lr_t`.
    pub fn step(&mut self, model: &mut Model<T>, grads: &[Vec<T>], lr_t: f64) {
        self.t += 1;
        let eta = T::from_f64(lr_t);
        let mu = T::from_f64(self.cfg.weight_decay);
        match self.cfg.kind {
            OptKind::Adamw => {
                let b1 = T::from_f64(self.cfg.beta1);
                let b2 = T::from_f64(self.cfg.beta2);
                let eps = T::from_f64(self.cfg.eps);
                let c1 = T::from_f64(1.0 - self.cfg.beta1.powi(self.t as i32));
                let c2 = T::from_f64(1.0 - self.cfg.beta2.powi(self.t as i32));
                for (pi, tensor) in model.params.iter_mut().enumerate() {
                    let decay = tensor.decay;
                    for (i, th) in tensor.data.iter_mut().enumerate() {
                        let g = grads[pi][i];
                        let m = b1 * self.m[pi][i] + (T::one() - b1) * g;
                        let v = b2 * self.v[pi][i] + (T::one() - b2) * g * g;
                        self.m[pi][i] = m;
                        self.v[pi][i] = v;
                        let mhat = m / c1;
                        let vhat = v / c2;
                        let mut upd = eta * mhat / (vhat.sqrt() + eps);
                        if decay {
                            upd = upd + eta * mu * *th;
                        }
                        *th = *th - upd;
                    }
                }
            }
            OptKind::Sgd => {
                for (pi, tensor) in model.params.iter_mut().enumerate() {
                    let decay = tensor.decay;
                    for (i, th) in tensor.data.iter_mut().enumerate() {
                        let mut g = grads[pi][i];
                        if decay {
                            g = g + mu * *th;
                        }
                        *th = *th - eta * g;
                    }
                }
            }
            OptKind::SgdMomentum => {
                let mom = T::from_f64(self.cfg.momentum);
                for (pi, tensor) in model.params.iter_mut().enumerate() {
                    let decay = tensor.decay;
                    for (i, th) in tensor.data.iter_mut().enumerate() {
                        let mut g = grads[pi][i];
                        if decay {
                            g = g + mu * *th;
                        }
                        let w = mom * self.m[pi][i] + g;
                        self.m[pi][i] = w;
                        *th = *th - eta * w;
                    }
                }
            }
            OptKind::SgdwNesterov => {
                let mom = T::from_f64(self.cfg.momentum);
                for (pi, tensor) in model.params.iter_mut().enumerate() {
                    let decay = tensor.decay;
                    for (i, th) in tensor.data.iter_mut().enumerate() {
                        let g = grads[pi][i];
                        let w = mom * self.m[pi][i] + g;
                        self.m[pi][i] = w;
                        *th = *th - eta * (g + mom * w);
                        if decay {
                            *th = (T::one() - eta * mu) * *th;
                        }
                    }
                }
            }
        }
    }
}
