use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{PolicyParams, TrainableMask};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    Constant,
    #[default]
    Cosine,
}

impl LrSchedule {
    /// Step size for `step` out of `total_steps`; cosine decays to 0 at the end.
    pub fn at(self, base: f64, step: usize, total_steps: usize) -> f64 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::Cosine => {
                let t = step as f64 / total_steps.max(1) as f64;
                0.5 * base * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Adam,
}

/// Gradient-descent state. `direction` is +1 to ascend, -1 to descend.
#[derive(Debug, Clone)]
pub enum Optimizer {
    Sgd,
    Adam {
        m: Vec<f64>,
        v: Vec<f64>,
        t: i32,
    },
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl Optimizer {
    pub fn new(kind: OptimizerKind, len: usize) -> Self {
        match kind {
            OptimizerKind::Sgd => Optimizer::Sgd,
            OptimizerKind::Adam => Optimizer::Adam {
                m: vec![0.0; len],
                v: vec![0.0; len],
                t: 0,
            },
        }
    }

    /// Masks `grad`, applies one update and checks the result is finite.
    pub fn step(
        &mut self,
        params: &mut PolicyParams,
        grad: &mut [f64],
        mask: &TrainableMask,
        lr: f64,
        direction: f64,
    ) -> Result<()> {
        mask.apply(grad);
        if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!("gradient component {i} is {}", grad[i])));
        }
        match self {
            Optimizer::Sgd => {
                for (p, g) in params.flat_mut().iter_mut().zip(grad.iter()) {
                    *p += direction * lr * g;
                }
            }
            Optimizer::Adam { m, v, t } => {
                *t += 1;
                let c1 = 1.0 - BETA1.powi(*t);
                let c2 = 1.0 - BETA2.powi(*t);
                for (((p, &g), mi), vi) in params.flat_mut().iter_mut().zip(grad.iter()).zip(m).zip(v) {
                    if g == 0.0 && *mi == 0.0 && *vi == 0.0 {
                        continue;
                    }
                    *mi = BETA1 * *mi + (1.0 - BETA1) * g;
                    *vi = BETA2 * *vi + (1.0 - BETA2) * g * g;
                    *p += direction * lr * (*mi / c1) / ((*vi / c2).sqrt() + ADAM_EPS);
                }
            }
        }
        if let Some(i) = params.flat().iter().position(|p| !p.is_finite()) {
            return Err(Error::NonFinite(format!("parameter {i} became non-finite")));
        }
        Ok(())
    }
}

/// Rescales `grad` in place so its L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm(grad: &mut [f64], max_norm: Option<f64>) -> f64 {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if let Some(limit) = max_norm {
        if norm > limit && norm.is_finite() {
            let s = limit / norm;
            grad.iter_mut().for_each(|g| *g *= s);
        }
    }
    norm
}
