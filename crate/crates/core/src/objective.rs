//! Loss components: per-environment risks and the objectives built on them.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use crate::data::{Batch, EnvId, Instance};
use crate::error::{Error, Result};
use crate::math;
use crate::model::{GradientSet, ModelState, ParamGroup, Scope};

/// Strengths of the invariant-learning terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HyperParams {
    /// Weight of the risk variance.
    pub lambda: f64,
    /// Weight of the environment-specific regularizer.
    pub eta: f64,
    /// Softmax temperature for environment weights.
    pub tau: f64,
    /// L2 coefficient on embedding rows touched by a step.
    pub l2_embed: f64,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            eta: 0.1,
            tau: 1.0,
            l2_embed: 0.0,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !ok(self.lambda) || !ok(self.eta) || !ok(self.l2_embed) {
            return Err(Error::Config(
                "lambda, eta and l2_embed must be finite and >= 0".into(),
            ));
        }
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(Error::Config("tau must be > 0".into()));
        }
        Ok(())
    }
}

/// Risk `R^t` per training environment, ordered by env id.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RiskVector(pub BTreeMap<EnvId, f64>);

impl RiskVector {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (EnvId, f64)>) -> Self {
        Self(pairs.into_iter().collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn values(&self) -> Vec<f64> {
        self.0.values().copied().collect()
    }

    pub fn mean(&self) -> f64 {
        math::mean(&self.values())
    }

    pub fn iter(&self) -> impl Iterator<Item = (EnvId, f64)> + '_ {
        self.0.iter().map(|(k, v)| (*k, *v))
    }
}

/// Mean logloss of `model` over `slice` under `scope`.
pub fn logloss_risk(slice: &[&Instance], model: &ModelState, scope: Scope) -> Result<f64> {
    if slice.is_empty() {
        return Err(Error::EmptySlice);
    }
    let mut total = 0.0;
    for inst in slice {
        let p = model.predict_proba(inst, scope)?;
        total += math::bce(inst.label_f64(), p);
    }
    Ok(total / slice.len() as f64)
}

/// Risk of every batch slice under its own environment's parameters.
pub fn batch_risks(batch: &Batch<'_>, model: &ModelState) -> Result<RiskVector> {
    batch
        .slices
        .iter()
        .map(|(t, s)| Ok((*t, logloss_risk(s, model, scope_for(model, *t))?)))
        .collect::<Result<BTreeMap<_, _>>>()
        .map(RiskVector)
}

/// `Scope::Env(t)` for disentangled models, otherwise inference scope.
pub(crate) fn scope_for(model: &ModelState, t: EnvId) -> Scope {
    if model.kind().is_disentangled() {
        Scope::Env(t)
    } else {
        Scope::Inference
    }
}

/// Sample variance of the risks (divisor `T - 1`), zero when `T = 1`.
pub fn risk_variance(risks: &RiskVector) -> f64 {
    math::sample_variance(&risks.values())
}

/// Softmax of `R^t / tau` with max subtraction.
pub fn env_weights(risks: &RiskVector, tau: f64) -> BTreeMap<EnvId, f64> {
    let max = risks
        .0
        .values()
        .fold(f64::NEG_INFINITY, |m, r| m.max(r / tau));
    let exps: Vec<(EnvId, f64)> = risks
        .iter()
        .map(|(t, r)| (t, libm::exp(r / tau - max)))
        .collect();
    let total: f64 = exps.iter().map(|(_, e)| e).sum();
    exps.into_iter().map(|(t, e)| (t, e / total)).collect()
}

/// `mean(R) + lambda * V_R`.
pub fn vrex_objective(risks: &RiskVector, lambda: f64) -> f64 {
    risks.mean() + lambda * risk_variance(risks)
}

/// Worst risk and its environment; ties go to the smallest env id.
pub fn groupdro_objective(risks: &RiskVector) -> Option<(f64, EnvId)> {
    let mut best: Option<(f64, EnvId)> = None;
    for (t, r) in risks.iter() {
        match best {
            Some((b, _)) if r <= b => {}
            _ => best = Some((r, t)),
        }
    }
    best
}

/// `sum_t w_t R^t + lambda * V_R` with `w = softmax(R / tau)`.
pub fn dil_outer_loss(risks: &RiskVector, tau: f64, lambda: f64) -> f64 {
    let w = env_weights(risks, tau);
    risks.iter().map(|(t, r)| w[&t] * r).sum::<f64>() + lambda * risk_variance(risks)
}

/// `d V_R / d R^t = 2 (R^t - mean) / (T - 1)`.
fn variance_slopes(risks: &RiskVector) -> BTreeMap<EnvId, f64> {
    let n = risks.len();
    if n < 2 {
        return risks.iter().map(|(t, _)| (t, 0.0)).collect();
    }
    let m = risks.mean();
    risks
        .iter()
        .map(|(t, r)| (t, 2.0 * (r - m) / (n - 1) as f64))
        .collect()
}

/// Per-environment multipliers `c_t` such that the V-REx gradient is
/// `sum_t c_t grad R^t`.
pub fn vrex_coefficients(risks: &RiskVector, lambda: f64) -> BTreeMap<EnvId, f64> {
    let n = risks.len() as f64;
    variance_slopes(risks)
        .into_iter()
        .map(|(t, s)| (t, 1.0 / n + lambda * s))
        .collect()
}

/// Multipliers for the DIL outer loss; the softmax weights are held constant.
pub fn dil_outer_coefficients(
    risks: &RiskVector,
    tau: f64,
    lambda: f64,
) -> BTreeMap<EnvId, f64> {
    let w = env_weights(risks, tau);
    variance_slopes(risks)
        .into_iter()
        .map(|(t, s)| (t, w[&t] + lambda * s))
        .collect()
}

/// `L_t = sum_{t' != t} [R(D_t'; phi_s, phi_t') - R(D_t'; phi_s, phi_t)]`.
pub fn env_specific_reg(t: EnvId, model: &ModelState, batch: &Batch<'_>) -> Result<f64> {
    check_reg_inputs(t, model, batch)?;
    let mut total = 0.0;
    for (other, slice) in batch.slices.iter().filter(|(o, _)| *o != t) {
        total += logloss_risk(slice, model, Scope::Env(*other))?
            - logloss_risk(slice, model, Scope::Env(t))?;
    }
    Ok(total)
}

/// Gradient of `L_t` with respect to `phi_t` only:
/// `-sum_{t' != t} grad_{phi_t} R(D_t'; phi_s, phi_t)`.
pub fn env_specific_reg_grad(
    t: EnvId,
    model: &ModelState,
    batch: &Batch<'_>,
) -> Result<GradientSet> {
    check_reg_inputs(t, model, batch)?;
    let group = ParamGroup::Env(t);
    let mut acc = GradientSet::empty(group, model.group_width(group)?);
    for (_, slice) in batch.slices.iter().filter(|(o, _)| *o != t) {
        let g = model.backward(slice, Scope::Env(t), group)?;
        acc = acc.add_scaled(&g, -1.0);
    }
    Ok(acc)
}

fn check_reg_inputs(t: EnvId, model: &ModelState, batch: &Batch<'_>) -> Result<()> {
    if batch.slices.len() < 2 {
        return Err(Error::TooFewEnvs {
            need: 2,
            got: batch.slices.len(),
        });
    }
    if !model.env_ids().contains(&t) {
        return Err(Error::UnknownEnv(t));
    }
    Ok(())
}
