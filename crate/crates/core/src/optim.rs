//! AdamW and exponential moving averages over [`ParamStore`]s.

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::model::ParamStore;
use crate::tensor::Mat;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, beta1: 0.0, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0;
        if !ok {
            return Err(Error::Config(format!("invalid optimizer settings {self:?}")));
        }
        Ok(())
    }
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    cfg: AdamConfig,
    m: Vec<Mat>,
    v: Vec<Mat>,
    step: u64,
}

impl AdamW {
    pub fn new(cfg: AdamConfig, params: &ParamStore) -> Result<Self> {
        cfg.validate()?;
        let zeros = || params.values().iter().map(|p| Mat::zeros(p.rows, p.cols)).collect();
        Ok(Self { cfg, m: zeros(), v: zeros(), step: 0 })
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &[Mat]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(contract(format!("{} gradients for {} parameters", grads.len(), params.len())));
        }
        self.step += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (i, g) in grads.iter().enumerate() {
            let p = params.get_mut(i);
            g.expect_shape(p.shape())?;
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.data.len() {
                let gj = g.data[j];
                m.data[j] = c.beta1 * m.data[j] + (1.0 - c.beta1) * gj;
                v.data[j] = c.beta2 * v.data[j] + (1.0 - c.beta2) * gj * gj;
                let mh = m.data[j] / bc1;
                let vh = v.data[j] / bc2;
                p.data[j] -= c.lr * (mh / (vh.sqrt() + c.eps) + c.weight_decay * p.data[j]);
            }
        }
        Ok(())
    }
}

/// `ema ← decay·ema + (1−decay)·params`, elementwise.
pub fn ema_update(ema: &mut ParamStore, params: &ParamStore, decay: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&decay) {
        return Err(Error::Config(format!("EMA decay {decay} outside [0, 1]")));
    }
    if ema.len() != params.len() {
        return Err(Error::Shape("EMA and parameter stores differ in length".into()));
    }
    for (e, p) in ema.values_mut().iter_mut().zip(params.values()) {
        p.expect_shape(e.shape())?;
        for (a, b) in e.data.iter_mut().zip(&p.data) {
            *a = decay * *a + (1.0 - decay) * b;
        }
    }
    Ok(())
}
