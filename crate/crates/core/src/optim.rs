//! Sparse Adam.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::model::{GradientSet, ModelState, ParamGroup};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Adam moments for one parameter group.
///
/// Updates are lazy: only rows present in a gradient advance their moments.
/// The step counter (used for bias correction) counts calls to
/// [`AdamState::step`].
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            beta1: BETA1,
            beta2: BETA2,
            epsilon: EPSILON,
            step: 0,
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    /// One bias-corrected Adam update of `params` from `grad`.
    pub fn step(&mut self, params: &mut [f64], grad: &GradientSet, lr: f64) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} parameters, optimizer holds {}",
                params.len(),
                self.m.len()
            )));
        }
        grad.check_shape(params.len(), grad.width())?;
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - libm::pow(self.beta1, t);
        let bc2 = 1.0 - libm::pow(self.beta2, t);
        let w = grad.width();
        for (row, g) in grad.iter() {
            for (k, gi) in g.iter().enumerate() {
                let i = row * w + k;
                self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * gi;
                self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * gi * gi;
                let m_hat = self.m[i] / bc1;
                let v_hat = self.v[i] / bc2;
                params[i] -= lr * m_hat / (libm::sqrt(v_hat) + self.epsilon);
            }
        }
        Ok(())
    }

    /// Applies a step to the matching group of `model`.
    pub fn step_model(&mut self, model: &mut ModelState, grad: &GradientSet, lr: f64) -> Result<()> {
        let width = model.group_width(grad.group)?;
        if width != grad.width() {
            return Err(Error::ShapeMismatch(format!(
                "gradient width {} for group {} of width {width}",
                grad.width(),
                grad.group
            )));
        }
        self.step(model.group_mut(grad.group)?, grad, lr)
    }
}

/// One [`AdamState`] per parameter group of a model.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    states: alloc::collections::BTreeMap<ParamGroup, AdamState>,
}

impl Adam {
    pub fn for_model(model: &ModelState) -> Self {
        let states = model
            .groups()
            .into_iter()
            .map(|g| {
                let len = model.group(g).map_or(0, <[f64]>::len);
                (g, AdamState::new(len))
            })
            .collect();
        Self { states }
    }

    pub fn state(&self, group: ParamGroup) -> Option<&AdamState> {
        self.states.get(&group)
    }

    pub fn step(&mut self, model: &mut ModelState, grad: &GradientSet, lr: f64) -> Result<()> {
        let state = self.states.get_mut(&grad.group).ok_or_else(|| Error::GroupMismatch {
            group: alloc::string::ToString::to_string(&grad.group),
            kind: model.kind().as_str(),
        })?;
        state.step_model(model, grad, lr)
    }
}
