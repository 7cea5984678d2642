//! Parameter update rules and the learning-rate schedule.
//!
//! Optimizers mutate a flat list of parameter arrays in place. The list
//! order must stay stable across steps because moment state is kept by
//! position. A step with any non-finite gradient element is rejected
//! before touching the parameters.

use crate::tensor::Array;
use crate::{PktError, Result};

pub trait Optimizer {
    fn name(&self) -> &'static str;
    fn step(&mut self, params: &mut [Array], grads: &[Array], lr: f64) -> Result<()>;
}

/// Optimizer selected by config name. Unknown names list the known ones.
pub fn optimizer_by_name(name: &str) -> Result<Box<dyn Optimizer>> {
    match name {
        "sgd" => Ok(Box::new(Sgd)),
        "adamw" => Ok(Box::new(AdamW::default())),
        other => Err(PktError::Config(format!(
            "unknown optimizer '{other}', expected one of: sgd, adamw"
        ))),
    }
}

fn check_step_inputs(params: &[Array], grads: &[Array]) -> Result<()> {
    if params.len() != grads.len() {
        return Err(PktError::Shape {
            op: "optimizer step",
            detail: format!("{} params vs {} grads", params.len(), grads.len()),
        });
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() {
            return Err(PktError::Shape {
                op: "optimizer step",
                detail: format!("param {i}: {:?} vs grad {:?}", p.shape(), g.shape()),
            });
        }
        if !g.all_finite() {
            return Err(PktError::Numeric(format!(
                "non-finite gradient in param {i}, step rejected"
            )));
        }
    }
    Ok(())
}

pub struct Sgd;

impl Optimizer for Sgd {
    fn name(&self) -> &'static str {
        "sgd"
    }

    fn step(&mut self, params: &mut [Array], grads: &[Array], lr: f64) -> Result<()> {
        check_step_inputs(params, grads)?;
        for (p, g) in params.iter_mut().zip(grads) {
            for (pv, &gv) in p.data_mut().iter_mut().zip(g.data()) {
                *pv -= lr * gv;
            }
        }
        Ok(())
    }
}

/// Adam with decoupled weight decay. Decay applies directly to the
/// parameter, not through the gradient moments.
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW::new(0.9, 0.999, 1e-8, 0.01)
    }
}

impl AdamW {
    pub fn new(beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        AdamW {
            beta1,
            beta2,
            eps,
            weight_decay,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }
}

impl Optimizer for AdamW {
    fn name(&self) -> &'static str {
        "adamw"
    }

    fn step(&mut self, params: &mut [Array], grads: &[Array], lr: f64) -> Result<()> {
        check_step_inputs(params, grads)?;
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = params.iter().map(|p| vec![0.0; p.len()]).collect();
        } else if self.m.len() != params.len() {
            return Err(PktError::Shape {
                op: "adamw step",
                detail: format!(
                    "optimizer state built for {} params, got {}",
                    self.m.len(),
                    params.len()
                ),
            });
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, (pv, &gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gv;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gv * gv;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                *pv -= lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * *pv);
            }
        }
        Ok(())
    }
}

/// Linear warmup from zero followed by linear decay to zero at
/// `total_steps`. With `warmup_steps` 0 the first step runs at full rate.
#[derive(Debug, Clone, Copy)]
pub struct LinearSchedule {
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl LinearSchedule {
    pub fn new(base_lr: f64, warmup_steps: usize, total_steps: usize) -> Self {
        LinearSchedule {
            base_lr,
            warmup_steps,
            total_steps,
        }
    }

    pub fn lr(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.base_lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        if self.total_steps <= self.warmup_steps {
            return self.base_lr;
        }
        let remaining = self.total_steps.saturating_sub(step) as f64;
        let span = (self.total_steps - self.warmup_steps) as f64;
        self.base_lr * (remaining / span).clamp(0.0, 1.0)
    }
}
