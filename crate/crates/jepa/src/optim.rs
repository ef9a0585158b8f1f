//! Training schedules (warmup–flat–cosine learning rate, linear weight
//! decay, linear EMA momentum) and decoupled-weight-decay Adam.

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::module::Module;
use crate::tensor::{Scalar, Tensor};
use std::collections::BTreeMap;

/// Learning rate at `frac` of training (0 = first step, 1 = last): linear
/// warmup to the peak, a flat phase covering `flat_fraction` of the
/// remainder, then cosine decay to the final value.
pub fn lr_at(frac: f64, cfg: &TrainConfig) -> f64 {
    debug_assert!((0.0..=1.0).contains(&frac));
    let w = cfg.warmup_epochs as f64 / cfg.epochs as f64;
    if frac < w {
        return cfg.lr_start + (cfg.lr_peak - cfg.lr_start) * frac / w;
    }
    let flat_end = w + cfg.flat_fraction * (1.0 - w);
    if frac <= flat_end {
        return cfg.lr_peak;
    }
    let t = (frac - flat_end) / (1.0 - flat_end);
    cfg.lr_final + (cfg.lr_peak - cfg.lr_final) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Linear weight decay.
pub fn wd_at(frac: f64, cfg: &TrainConfig) -> f64 {
    cfg.wd_start + (cfg.wd_end - cfg.wd_start) * frac
}

/// Linear EMA momentum.
pub fn ema_at(frac: f64, cfg: &TrainConfig) -> f64 {
    cfg.ema_start + (cfg.ema_end - cfg.ema_start) * frac
}

/// θ̄ ← m·θ̄ + (1−m)·θ, matched by parameter name. Errors on any name or
/// shape mismatch between the two modules.
pub fn ema_update<T: Scalar, M: Module<T>>(theta_bar: &mut M, theta: &M, m: f64) -> Result<()> {
    let mut source: Vec<(String, Tensor<T>)> = theta.named_params();
    source.reverse(); // consume front-to-back via pop
    let mf = T::from_f64(m);
    let one_minus = T::from_f64(1.0 - m);
    let mut err = None;
    theta_bar.visit_mut("", &mut |name, t| {
        if err.is_some() {
            return;
        }
        let Some((src_name, src)) = source.pop() else {
            err = Some(Error::State(format!("ema: no source parameter for {name}")));
            return;
        };
        if src_name != name || src.shape() != t.shape() {
            err = Some(Error::State(format!(
                "ema: mismatch at {name} (source {src_name}, shapes {:?} vs {:?})",
                t.shape(),
                src.shape()
            )));
            return;
        }
        if m == 1.0 {
            return; // exact no-op
        }
        let sd = src.data_rc();
        for (dst, &s) in t.data_mut().iter_mut().zip(sd.iter()) {
            *dst = mf * *dst + one_minus * s;
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    if !source.is_empty() {
        return Err(Error::State(format!("ema: {} unmatched source parameters", source.len())));
    }
    Ok(())
}

/// Adam with decoupled weight decay. Moments are stored per parameter name;
/// with zero gradients a step scales each parameter by exactly (1 − lr·wd).
#[derive(Debug, Clone)]
pub struct AdamW<T: Scalar> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub moments: BTreeMap<String, (Vec<T>, Vec<T>)>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        AdamW { beta1, beta2, eps, t: 0, moments: BTreeMap::new() }
    }

    /// One update over a module's parameters. `grads` maps dotted parameter
    /// names (under `prefix`) to flat gradient buffers; parameters without
    /// an entry are treated as having zero gradient.
    pub fn step<M: Module<T>>(
        &mut self,
        module: &mut M,
        prefix: &str,
        grads: &BTreeMap<String, Vec<T>>,
        lr: f64,
        wd: f64,
    ) -> Result<()> {
        self.t += 1;
        let b1 = T::from_f64(self.beta1);
        let b2 = T::from_f64(self.beta2);
        let one_m_b1 = T::from_f64(1.0 - self.beta1);
        let one_m_b2 = T::from_f64(1.0 - self.beta2);
        let bias1 = T::from_f64(1.0 - self.beta1.powi(self.t as i32));
        let bias2 = T::from_f64(1.0 - self.beta2.powi(self.t as i32));
        let eps = T::from_f64(self.eps);
        let lr_t = T::from_f64(lr);
        let decay = T::from_f64(1.0 - lr * wd);
        let zero_grad: Vec<T> = Vec::new();
        let mut err = None;
        let moments = &mut self.moments;
        module.visit_mut(prefix, &mut |name, p| {
            if err.is_some() {
                return;
            }
            let g = grads.get(name).unwrap_or(&zero_grad);
            if !g.is_empty() && g.len() != p.numel() {
                err = Some(Error::State(format!(
                    "gradient length {} != parameter {name} length {}",
                    g.len(),
                    p.numel()
                )));
                return;
            }
            let (m, v) = moments
                .entry(name.to_string())
                .or_insert_with(|| (vec![T::ZERO; p.numel()], vec![T::ZERO; p.numel()]));
            let data = p.data_mut();
            for i in 0..data.len() {
                let gi = if g.is_empty() { T::ZERO } else { g[i] };
                m[i] = b1 * m[i] + one_m_b1 * gi;
                v[i] = b2 * v[i] + one_m_b2 * gi * gi;
                let m_hat = m[i] / bias1;
                let v_hat = v[i] / bias2;
                data[i] = decay * data[i] - lr_t * m_hat / (v_hat.sqrt() + eps);
            }
        });
        match err {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }
}
