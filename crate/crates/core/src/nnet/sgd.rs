use serde::{Deserialize, Serialize};

use super::classifier::ClassifierParams;
use super::generator::{GenGrads, GeneratorParams};
use crate::error::{Error, Result};
use crate::numerics::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// `(step, multiplier)`: from `step` onward the rate is multiplied by
    /// `multiplier`. Entries compound.
    pub schedule: Vec<(usize, f64)>,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.02,
            momentum: 0.9,
            weight_decay: 1e-4,
            schedule: Vec::new(),
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidConfig(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "weight decay must be nonnegative, got {}",
                self.weight_decay
            )));
        }
        if self.schedule.iter().any(|(_, m)| !(*m > 0.0 && m.is_finite())) {
            return Err(Error::InvalidConfig("schedule multipliers must be positive".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        self.schedule
            .iter()
            .filter(|(s, _)| step >= *s)
            .fold(self.learning_rate, |lr, (_, m)| lr * m)
    }
}

/// Momentum buffers, created lazily on the first step.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SgdState {
    pub velocity: Vec<f64>,
}

/// One in-place update of a flat parameter segment:
/// `v = momentum * v + (g + wd * p)`, `p -= lr * v`.
fn update(param: &mut [f64], grad: &[f64], vel: &mut [f64], lr: f64, cfg: &SgdConfig) {
    for ((p, &g), v) in param.iter_mut().zip(grad).zip(vel.iter_mut()) {
        let g = g + cfg.weight_decay * *p;
        *v = cfg.momentum * *v + g;
        *p -= lr * *v;
    }
}

impl SgdState {
    fn ensure(&mut self, len: usize) -> Result<()> {
        if self.velocity.is_empty() {
            self.velocity = vec![0.0; len];
        } else if self.velocity.len() != len {
            return Err(Error::ShapeMismatch(format!(
                "optimizer state holds {} values, parameters have {len}",
                self.velocity.len()
            )));
        }
        Ok(())
    }
}

/// Momentum SGD on a flat parameter vector.
pub fn sgd_step(
    params: &mut [f64],
    grads: &[f64],
    cfg: &SgdConfig,
    state: &mut SgdState,
    step: usize,
) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} parameters, {} gradients",
            params.len(),
            grads.len()
        )));
    }
    state.ensure(params.len())?;
    update(params, grads, &mut state.velocity, cfg.lr_at(step), cfg);
    Ok(())
}

pub fn sgd_step_generator(
    params: &mut GeneratorParams,
    grads: &GenGrads,
    cfg: &SgdConfig,
    state: &mut SgdState,
    step: usize,
) -> Result<()> {
    let shapes_match = params.layers.len() == grads.layers.len()
        && params.layers.iter().zip(&grads.layers).all(|(p, g)| {
            p.weight.rows() == g.weight.rows()
                && p.weight.cols() == g.weight.cols()
                && p.bias.len() == g.bias.len()
        });
    if !shapes_match {
        return Err(Error::ShapeMismatch("generator gradients".into()));
    }
    state.ensure(params.parameter_count())?;
    let lr = cfg.lr_at(step);
    let mut offset = 0;
    for (p, g) in params.segments_mut().zip(grads.segments()) {
        let n = p.len();
        update(p, g, &mut state.velocity[offset..offset + n], lr, cfg);
        offset += n;
    }
    Ok(())
}

/// Updates every prototype row not listed in `frozen_rows`; frozen rows and
/// their momentum are left untouched.
pub fn sgd_step_classifier(
    params: &mut ClassifierParams,
    grads: &Matrix,
    cfg: &SgdConfig,
    state: &mut SgdState,
    step: usize,
) -> Result<()> {
    if grads.rows() != params.num_classes() || grads.cols() != params.dim() {
        return Err(Error::ShapeMismatch(format!(
            "prototype gradient is {}x{}, expected {}x{}",
            grads.rows(),
            grads.cols(),
            params.num_classes(),
            params.dim()
        )));
    }
    let d = params.dim();
    state.ensure(params.num_classes() * d)?;
    let lr = cfg.lr_at(step);
    let rows: Vec<usize> = params.trainable_rows().collect();
    for j in rows {
        update(
            params.prototypes.row_mut(j),
            grads.row(j),
            &mut state.velocity[j * d..(j + 1) * d],
            lr,
            cfg,
        );
    }
    Ok(())
}
