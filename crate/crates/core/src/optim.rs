//! First-order optimizers over [`Parameters`].

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::nn::{Parameters, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for OptimizerKind {
    fn default() -> Self {
        Self::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Optimizer state; moment buffers are allocated on the first step.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind) -> Self {
        Self { kind, step: 0, first: Vec::new(), second: Vec::new() }
    }

    pub fn sgd() -> Self {
        Self::new(OptimizerKind::Sgd)
    }

    pub fn adam() -> Self {
        Self::new(OptimizerKind::default())
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update `θ ← θ − η·g` (or the Adam equivalent).
    ///
    /// Non-finite gradients abort the step before any parameter is touched.
    pub fn step<F, P>(&mut self, params: &mut P, grads: &P, lr: f64) -> Result<()>
    where
        F: Scalar,
        P: Parameters<F>,
    {
        let g = grads.tensors();
        let shapes_match = {
            let p = params.tensors();
            p.len() == g.len() && p.iter().zip(&g).all(|(a, b)| a.len() == b.len())
        };
        if !shapes_match {
            return Err(Error::ShapeMismatch("gradient buffer does not match parameters".into()));
        }
        if !g.iter().all(|t| t.iter().all(|v| v.is_finite())) {
            return Err(Error::NonFinite("gradients".into()));
        }
        if !lr.is_finite() || lr < 0.0 {
            return Err(invalid(format!("learning rate {lr}")));
        }
        self.step += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, gt) in params.tensors_mut().into_iter().zip(&g) {
                    for (pv, gv) in p.iter_mut().zip(gt.iter()) {
                        *pv = F::of(pv.as_f64() - lr * gv.as_f64());
                    }
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                if self.first.is_empty() {
                    self.first = g.iter().map(|t| vec![0.0; t.len()]).collect();
                    self.second = self.first.clone();
                }
                let bc1 = 1.0 - beta1.powi(self.step as i32);
                let bc2 = 1.0 - beta2.powi(self.step as i32);
                for (ti, p) in params.tensors_mut().into_iter().enumerate() {
                    let m = &mut self.first[ti];
                    let v = &mut self.second[ti];
                    for (j, pv) in p.iter_mut().enumerate() {
                        let gv = g[ti][j].as_f64();
                        m[j] = beta1 * m[j] + (1.0 - beta1) * gv;
                        v[j] = beta2 * v[j] + (1.0 - beta2) * gv * gv;
                        let update = lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + eps);
                        *pv = F::of(pv.as_f64() - update);
                    }
                }
            }
        }
        Ok(())
    }
}

/// `θ⁻ ← μ θ⁻ + (1 − μ) θ`.
pub fn ema_update<F: Scalar, P: Parameters<F>>(ema: &mut P, params: &P, decay: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&decay) {
        return Err(invalid(format!("EMA decay {decay} outside [0, 1]")));
    }
    let src = params.tensors();
    for (dst, s) in ema.tensors_mut().into_iter().zip(src) {
        if dst.len() != s.len() {
            return Err(Error::ShapeMismatch("EMA shadow does not match parameters".into()));
        }
        if decay == 1.0 {
            continue;
        }
        for (d, v) in dst.iter_mut().zip(s) {
            *d = if decay == 0.0 {
                *v
            } else {
                F::of(decay * d.as_f64() + (1.0 - decay) * v.as_f64())
            };
        }
    }
    Ok(())
}

/// Cosine decay from `base` to `base · final_fraction` over `total` iterations.
pub fn cosine_lr(base: f64, final_fraction: f64, iteration: usize, total: usize) -> f64 {
    if total <= 1 {
        return base;
    }
    let u = (iteration as f64 / (total - 1) as f64).min(1.0);
    let floor = base * final_fraction;
    floor + 0.5 * (base - floor) * (1.0 + (std::f64::consts::PI * u).cos())
}
