//! Training loops.
//!
//! Every objective samples a stratified batch (a fixed number of instances
//! per training environment) each step:
//!
//! * `erm`: mean logloss over the pooled batch.
//! * `vrex`: mean per-environment risk plus `lambda` times their variance.
//! * `groupdro`: the risk of the worst environment in the batch.
//! * `dil`: the alternating loop. Update the shared embeddings (LightDIL
//!   only), sample an environment `t`, take a temporary inner step on
//!   `phi_s` from `t`'s risk, update `phi_s` from the weighted, variance
//!   penalised outer loss at the temporary point, then update `phi_t` from its
//!   own risk minus `eta` times its risk on the other environments.
//!
//! All loops evaluate mean validation AUC (invariant parameters only) every
//! `eval_every` steps and return the best snapshot.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::ToString;
use alloc::vec::Vec;
use core::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{stratified_batch, Batch, DataSplits, EnvId, Instance};
use crate::error::{Error, Result};
use crate::metrics::evaluate_split;
use crate::model::{init_model, GradientSet, ModelKind, ModelState, ParamGroup, Scope};
use crate::objective::{
    batch_risks, dil_outer_coefficients, env_specific_reg_grad, env_weights, groupdro_objective,
    risk_variance, vrex_coefficients, HyperParams, RiskVector,
};
use crate::optim::Adam;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObjectiveKind {
    Erm,
    Vrex,
    GroupDro,
    Dil,
}

impl ObjectiveKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ObjectiveKind::Erm => "erm",
            ObjectiveKind::Vrex => "vrex",
            ObjectiveKind::GroupDro => "groupdro",
            ObjectiveKind::Dil => "dil",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "erm" => ObjectiveKind::Erm,
            "vrex" => ObjectiveKind::Vrex,
            "groupdro" => ObjectiveKind::GroupDro,
            "dil" => ObjectiveKind::Dil,
            _ => return None,
        })
    }
}

impl fmt::Display for ObjectiveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// How the outer update differentiates through the inner step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetaMode {
    /// Use the outer gradient at the temporary point directly.
    FirstOrder,
    /// Multiply by `(I - lr_inner * H)`, with `H g` from central differences
    /// of the inner gradient.
    ExactHvp,
}

impl MetaMode {
    pub fn as_str(self) -> &'static str {
        match self {
            MetaMode::FirstOrder => "first_order",
            MetaMode::ExactHvp => "exact_hvp",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "first_order" => MetaMode::FirstOrder,
            "exact_hvp" => MetaMode::ExactHvp,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub model_kind: ModelKind,
    pub objective_kind: ObjectiveKind,
    pub embed_dim: usize,
    pub init_scale: f64,
    pub hyper: HyperParams,
    pub lr_shared: f64,
    pub lr_inner: f64,
    pub lr_outer: f64,
    pub lr_env: f64,
    pub batch_per_env: usize,
    pub max_steps: usize,
    pub eval_every: usize,
    pub patience: usize,
    pub meta_mode: MetaMode,
    pub seed: u64,
    /// Reductions always run in env-id order; kept for config compatibility.
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model_kind: ModelKind::FieldFm,
            objective_kind: ObjectiveKind::Erm,
            embed_dim: 8,
            init_scale: 0.1,
            hyper: HyperParams::default(),
            lr_shared: 1e-3,
            lr_inner: 1e-3,
            lr_outer: 1e-3,
            lr_env: 1e-3,
            batch_per_env: 256,
            max_steps: 2000,
            eval_every: 100,
            patience: 5,
            meta_mode: MetaMode::FirstOrder,
            seed: 0,
            deterministic: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.hyper.validate()?;
        let lrs = [
            ("lr_shared", self.lr_shared),
            ("lr_inner", self.lr_inner),
            ("lr_outer", self.lr_outer),
            ("lr_env", self.lr_env),
        ];
        for (name, lr) in lrs {
            if !(lr.is_finite() && lr >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and >= 0")));
            }
        }
        if self.embed_dim == 0 || self.batch_per_env == 0 || self.eval_every == 0 {
            return Err(Error::Config(
                "embed_dim, batch_per_env and eval_every must be >= 1".to_string(),
            ));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be >= 1".to_string()));
        }
        let kind_ok = match self.objective_kind {
            ObjectiveKind::Dil => self.model_kind.is_disentangled(),
            _ => !self.model_kind.is_disentangled(),
        };
        if !kind_ok {
            return Err(Error::Config(format!(
                "objective {} cannot train a {} model",
                self.objective_kind, self.model_kind
            )));
        }
        Ok(())
    }
}

/// Snapshot taken at each validation.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub step: usize,
    pub valid_auc: Option<f64>,
    pub valid_logloss: f64,
    /// Risks of the most recent training batch after the step.
    pub train_risks: RiskVector,
    pub risk_variance: f64,
    pub env_weights: BTreeMap<EnvId, f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    MaxSteps,
    Patience,
}

impl StopReason {
    pub fn as_str(self) -> &'static str {
        match self {
            StopReason::MaxSteps => "max_steps",
            StopReason::Patience => "patience",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainHistory {
    pub records: Vec<EvalRecord>,
    pub best_step: Option<usize>,
    pub stop_reason: StopReason,
    pub seed: u64,
}

impl TrainHistory {
    pub fn best_record(&self) -> Option<&EvalRecord> {
        let step = self.best_step?;
        self.records.iter().find(|r| r.step == step)
    }
}

/// What one training step did.
#[derive(Debug, Clone, PartialEq)]
pub struct StepInfo {
    /// Environment sampled for the meta and environment-specific updates.
    pub sampled_env: Option<EnvId>,
    /// Environment whose risk drove a Group-DRO step.
    pub worst_env: Option<EnvId>,
}

/// `phi_s~ = phi_s - lr_inner * grad_{phi_s} R(slice_t; phi_s, phi_t)`.
///
/// Returns the full temporary parameter vector; the model is not modified.
pub fn meta_train_step(
    model: &ModelState,
    t: EnvId,
    slice: &[&Instance],
    lr_inner: f64,
) -> Result<Vec<f64>> {
    let grad = model.backward(slice, Scope::Env(t), ParamGroup::Invariant)?;
    let mut tilde = model.group(ParamGroup::Invariant)?.to_vec();
    let w = grad.width();
    for (row, g) in grad.iter() {
        for (p, gi) in tilde[row * w..(row + 1) * w].iter_mut().zip(g) {
            *p -= lr_inner * gi;
        }
    }
    Ok(tilde)
}

/// `sum_t c_t grad R^t` over the batch for one group, each slice under its
/// own environment scope.
fn combined_grad(
    model: &ModelState,
    batch: &Batch<'_>,
    coeffs: &BTreeMap<EnvId, f64>,
    group: ParamGroup,
    scope_of: impl Fn(EnvId) -> Scope,
) -> Result<GradientSet> {
    let mut acc = GradientSet::empty(group, model.group_width(group)?);
    for (t, slice) in &batch.slices {
        let c = coeffs.get(t).copied().unwrap_or(0.0);
        if c == 0.0 {
            continue;
        }
        let g = model.backward(slice, scope_of(*t), group)?;
        acc = acc.add_scaled(&g, c);
    }
    Ok(acc)
}

/// Outer gradient for the `phi_s` update.
///
/// Risks, softmax weights and the variance are evaluated at `phi_tilde` with
/// every `phi_t` fixed; the weights are treated as constants. In
/// [`MetaMode::ExactHvp`] the gradient is pulled back through the inner step.
pub fn meta_outer_gradient(
    model: &mut ModelState,
    phi_tilde: Vec<f64>,
    t: EnvId,
    batch: &Batch<'_>,
    hyper: &HyperParams,
    lr_inner: f64,
    meta_mode: MetaMode,
) -> Result<(GradientSet, RiskVector)> {
    if batch.slices.len() < 2 {
        return Err(Error::TooFewEnvs {
            need: 2,
            got: batch.slices.len(),
        });
    }
    let phi_s = model.replace_group(ParamGroup::Invariant, phi_tilde)?;
    let outer = (|| {
        let risks = batch_risks(batch, model)?;
        let coeffs = dil_outer_coefficients(&risks, hyper.tau, hyper.lambda);
        let g = combined_grad(model, batch, &coeffs, ParamGroup::Invariant, Scope::Env)?;
        Ok::<_, Error>((g, risks))
    })();
    model.replace_group(ParamGroup::Invariant, phi_s)?;
    let (g, risks) = outer?;

    if meta_mode == MetaMode::FirstOrder || lr_inner == 0.0 {
        return Ok((g, risks));
    }
    let slice_t = batch.slice(t).ok_or(Error::UnknownEnv(t))?;
    let hg = hessian_vector_product(model, t, slice_t, &g)?;
    Ok((g.add_scaled(&hg, -lr_inner), risks))
}

/// `H v` for the Hessian of `R(slice_t; phi_s, phi_t)` w.r.t. `phi_s`, by
/// central differences of the gradient at `phi_s +- h v` with
/// `h = 1e-4 (1 + |phi_s|_inf)`.
pub fn hessian_vector_product(
    model: &mut ModelState,
    t: EnvId,
    slice_t: &[&Instance],
    direction: &GradientSet,
) -> Result<GradientSet> {
    let group = ParamGroup::Invariant;
    let base = model.group(group)?.to_vec();
    let width = direction.width();
    let h = 1e-4 * (1.0 + base.iter().fold(0.0f64, |m, x| m.max(x.abs())));
    let shifted = |sign: f64| {
        let mut p = base.clone();
        for (row, v) in direction.iter() {
            for (x, vi) in p[row * width..(row + 1) * width].iter_mut().zip(v) {
                *x += sign * h * vi;
            }
        }
        p
    };
    let mut grad_at = |params: Vec<f64>| -> Result<GradientSet> {
        let saved = model.replace_group(group, params)?;
        let g = model.backward(slice_t, Scope::Env(t), group);
        model.replace_group(group, saved)?;
        g
    };
    let plus = grad_at(shifted(1.0))?;
    let minus = grad_at(shifted(-1.0))?;
    let mut hv = plus.add_scaled(&minus, -1.0);
    hv.scale(1.0 / (2.0 * h));
    Ok(hv)
}

/// Outer update of `phi_s` through Adam; no `phi_t` is touched.
#[allow(clippy::too_many_arguments)]
pub fn meta_test_step(
    model: &mut ModelState,
    adam: &mut Adam,
    phi_tilde: Vec<f64>,
    t: EnvId,
    batch: &Batch<'_>,
    hyper: &HyperParams,
    lr_inner: f64,
    lr_outer: f64,
    meta_mode: MetaMode,
) -> Result<RiskVector> {
    let (mut g, risks) =
        meta_outer_gradient(model, phi_tilde, t, batch, hyper, lr_inner, meta_mode)?;
    if model.is_embedding_group(ParamGroup::Invariant) {
        g.add_l2(model.group(ParamGroup::Invariant)?, hyper.l2_embed);
    }
    adam.step(model, &g, lr_outer)?;
    Ok(risks)
}

/// Gradient of `R(slice_t; phi_s, phi_t) + eta L_t` w.r.t. `phi_t`.
pub fn env_update_gradient(
    model: &ModelState,
    t: EnvId,
    batch: &Batch<'_>,
    eta: f64,
) -> Result<GradientSet> {
    let group = ParamGroup::Env(t);
    let slice_t = batch.slice(t).ok_or(Error::UnknownEnv(t))?;
    let fit = model.backward(slice_t, Scope::Env(t), group)?;
    if eta == 0.0 {
        return Ok(fit);
    }
    let reg = env_specific_reg_grad(t, model, batch)?;
    Ok(fit.add_scaled(&reg, eta))
}

/// Adam update of `phi_t` alone.
pub fn env_update_step(
    model: &mut ModelState,
    adam: &mut Adam,
    t: EnvId,
    batch: &Batch<'_>,
    hyper: &HyperParams,
    lr_env: f64,
) -> Result<()> {
    let group = ParamGroup::Env(t);
    let mut g = env_update_gradient(model, t, batch, hyper.eta)?;
    if model.is_embedding_group(group) {
        g.add_l2(model.group(group)?, hyper.l2_embed);
    }
    adam.step(model, &g, lr_env)
}

/// Drives one of the training loops step by step.
pub struct Trainer<'a, R> {
    splits: &'a DataSplits,
    cfg: TrainConfig,
    model: ModelState,
    adam: Adam,
    rng: R,
    steps: usize,
    last_batch: Option<Batch<'a>>,
}

impl<'a, R: Rng> Trainer<'a, R> {
    /// Initialises a model from `cfg` (seeded by `cfg.seed`).
    pub fn new(splits: &'a DataSplits, cfg: TrainConfig, rng: R) -> Result<Self> {
        let model = init_model(
            cfg.model_kind,
            &splits.schema,
            cfg.embed_dim,
            cfg.init_scale,
            cfg.seed,
            &splits.train_ids(),
        )?;
        Self::with_model(splits, cfg, model, rng)
    }

    /// Starts from an existing model.
    pub fn with_model(
        splits: &'a DataSplits,
        cfg: TrainConfig,
        model: ModelState,
        rng: R,
    ) -> Result<Self> {
        cfg.validate()?;
        if splits.train.is_empty() {
            return Err(Error::TooFewEnvs { need: 1, got: 0 });
        }
        if splits.valid.is_empty() {
            return Err(Error::InvalidSplit(
                "validation split is empty".to_string(),
            ));
        }
        if let Some(env) = splits.train.iter().find(|e| e.is_empty()) {
            return Err(Error::EmptyEnvironment(env.env_id));
        }
        if cfg.objective_kind != ObjectiveKind::Erm && splits.train.len() < 2 {
            return Err(Error::TooFewEnvs {
                need: 2,
                got: splits.train.len(),
            });
        }
        if model.kind() != cfg.model_kind || model.schema() != &splits.schema {
            return Err(Error::Config(
                "model does not match configuration or schema".to_string(),
            ));
        }
        if model.kind().is_disentangled() && model.env_ids() != splits.train_ids() {
            return Err(Error::Config(
                "environment-specific parameters must match the training environments"
                    .to_string(),
            ));
        }
        let adam = Adam::for_model(&model);
        Ok(Self {
            splits,
            cfg,
            model,
            adam,
            rng,
            steps: 0,
            last_batch: None,
        })
    }

    pub fn model(&self) -> &ModelState {
        &self.model
    }

    pub fn model_mut(&mut self) -> &mut ModelState {
        &mut self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// One optimisation step of the configured objective.
    pub fn step(&mut self) -> Result<StepInfo> {
        let batch = stratified_batch(&self.splits.train, self.cfg.batch_per_env, &mut self.rng)?;
        let info = match self.cfg.objective_kind {
            ObjectiveKind::Erm => self.erm_step(&batch)?,
            ObjectiveKind::Vrex | ObjectiveKind::GroupDro => self.robust_step(&batch)?,
            ObjectiveKind::Dil => self.dil_step(&batch)?,
        };
        self.last_batch = Some(batch);
        self.steps += 1;
        Ok(info)
    }

    /// Gradient step on every plain (non-disentangled) group from
    /// per-environment multipliers.
    fn apply_plain(&mut self, batch: &Batch<'_>, coeffs: &BTreeMap<EnvId, f64>) -> Result<()> {
        let groups: Vec<ParamGroup> = self.model.groups();
        let mut grads = Vec::with_capacity(groups.len());
        for &group in &groups {
            let mut g = combined_grad(&self.model, batch, coeffs, group, |_| Scope::Inference)?;
            if self.model.is_embedding_group(group) {
                g.add_l2(self.model.group(group)?, self.cfg.hyper.l2_embed);
            }
            grads.push(g);
        }
        for g in &grads {
            self.adam.step(&mut self.model, g, self.cfg.lr_shared)?;
        }
        Ok(())
    }

    fn erm_step(&mut self, batch: &Batch<'_>) -> Result<StepInfo> {
        let pooled = batch.pooled();
        let groups = self.model.groups();
        let mut grads = Vec::with_capacity(groups.len());
        for &group in &groups {
            let mut g = self.model.backward(&pooled, Scope::Inference, group)?;
            if self.model.is_embedding_group(group) {
                g.add_l2(self.model.group(group)?, self.cfg.hyper.l2_embed);
            }
            grads.push(g);
        }
        for g in &grads {
            self.adam.step(&mut self.model, g, self.cfg.lr_shared)?;
        }
        Ok(StepInfo {
            sampled_env: None,
            worst_env: None,
        })
    }

    fn robust_step(&mut self, batch: &Batch<'_>) -> Result<StepInfo> {
        let risks = batch_risks(batch, &self.model)?;
        let (coeffs, worst_env) = match self.cfg.objective_kind {
            ObjectiveKind::Vrex => (vrex_coefficients(&risks, self.cfg.hyper.lambda), None),
            _ => {
                let (_, worst) = groupdro_objective(&risks).ok_or(Error::EmptySlice)?;
                let mut c = BTreeMap::new();
                c.insert(worst, 1.0);
                (c, Some(worst))
            }
        };
        self.apply_plain(batch, &coeffs)?;
        Ok(StepInfo {
            sampled_env: None,
            worst_env,
        })
    }

    fn dil_step(&mut self, batch: &Batch<'_>) -> Result<StepInfo> {
        let hyper = self.cfg.hyper;
        // Shared embeddings (LightDIL only): each sample under its own env.
        if self.model.kind() == ModelKind::LightDil {
            let group = ParamGroup::Embeddings;
            let mut g = self
                .model
                .backward_scoped(batch.tagged().map(|(t, i)| (Scope::Env(t), i)), group)?;
            g.add_l2(self.model.group(group)?, hyper.l2_embed);
            self.adam.step(&mut self.model, &g, self.cfg.lr_shared)?;
        }

        let ids: Vec<EnvId> = batch.slices.iter().map(|(t, _)| *t).collect();
        let t = ids[self.rng.random_range(0..ids.len())];
        let slice_t = batch.slice(t).ok_or(Error::UnknownEnv(t))?;

        let phi_tilde = meta_train_step(&self.model, t, slice_t, self.cfg.lr_inner)?;
        meta_test_step(
            &mut self.model,
            &mut self.adam,
            phi_tilde,
            t,
            batch,
            &hyper,
            self.cfg.lr_inner,
            self.cfg.lr_outer,
            self.cfg.meta_mode,
        )?;
        env_update_step(
            &mut self.model,
            &mut self.adam,
            t,
            batch,
            &hyper,
            self.cfg.lr_env,
        )?;
        Ok(StepInfo {
            sampled_env: Some(t),
            worst_env: None,
        })
    }

    fn evaluate(&self) -> Result<EvalRecord> {
        let report = evaluate_split(&self.model, &self.splits.schema, &self.splits.valid)?;
        let train_risks = match &self.last_batch {
            Some(b) => batch_risks(b, &self.model)?,
            None => RiskVector::default(),
        };
        Ok(EvalRecord {
            step: self.steps,
            valid_auc: report.aggregate.auc_mean,
            valid_logloss: report.aggregate.logloss_mean,
            risk_variance: risk_variance(&train_risks),
            env_weights: env_weights(&train_risks, self.cfg.hyper.tau),
            train_risks,
        })
    }

    /// Runs until `max_steps` or until `patience` consecutive validations
    /// fail to improve the best mean validation AUC. Returns the best model.
    pub fn run(mut self) -> Result<(ModelState, TrainHistory)> {
        let mut records = Vec::new();
        let mut best: Option<(f64, usize, ModelState)> = None;
        let mut stale = 0;
        let mut stop_reason = StopReason::MaxSteps;
        while self.steps < self.cfg.max_steps {
            self.step()?;
            if !self.steps.is_multiple_of(self.cfg.eval_every) && self.steps != self.cfg.max_steps {
                continue;
            }
            let record = self.evaluate()?;
            let score = record.valid_auc.unwrap_or(f64::NEG_INFINITY);
            let improved = match &best {
                None => true,
                Some((b, _, _)) => score > *b,
            };
            if improved {
                best = Some((score, record.step, self.model.clone()));
                stale = 0;
            } else {
                stale += 1;
            }
            records.push(record);
            if stale >= self.cfg.patience {
                stop_reason = StopReason::Patience;
                break;
            }
        }
        let (best_step, model) = match best {
            Some((_, step, model)) => (Some(step), model),
            None => (None, self.model),
        };
        Ok((
            model,
            TrainHistory {
                records,
                best_step,
                stop_reason,
                seed: self.cfg.seed,
            },
        ))
    }
}

fn expect_objective(cfg: &TrainConfig, allowed: &[ObjectiveKind]) -> Result<()> {
    if allowed.contains(&cfg.objective_kind) {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "objective {} is not handled here",
            cfg.objective_kind
        )))
    }
}

/// Plain ERM on the pooled training environments (fm / fieldfm).
pub fn train_erm<R: Rng>(
    splits: &DataSplits,
    cfg: &TrainConfig,
    rng: R,
) -> Result<(ModelState, TrainHistory)> {
    expect_objective(cfg, &[ObjectiveKind::Erm])?;
    Trainer::new(splits, cfg.clone(), rng)?.run()
}

/// V-REx or Group-DRO over the training environments (fm / fieldfm).
pub fn train_robust<R: Rng>(
    splits: &DataSplits,
    cfg: &TrainConfig,
    rng: R,
) -> Result<(ModelState, TrainHistory)> {
    expect_objective(cfg, &[ObjectiveKind::Vrex, ObjectiveKind::GroupDro])?;
    Trainer::new(splits, cfg.clone(), rng)?.run()
}

/// The alternating DIL loop (dil / lightdil).
pub fn dil_train<R: Rng>(
    splits: &DataSplits,
    cfg: &TrainConfig,
    rng: R,
) -> Result<(ModelState, TrainHistory)> {
    expect_objective(cfg, &[ObjectiveKind::Dil])?;
    Trainer::new(splits, cfg.clone(), rng)?.run()
}

/// Dispatches on `cfg.objective_kind`; batches and environment sampling use a
/// ChaCha8 stream seeded from `cfg.seed`.
pub fn train(splits: &DataSplits, cfg: &TrainConfig) -> Result<(ModelState, TrainHistory)> {
    // Stream 1 keeps batch sampling independent of the init draws.
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    match cfg.objective_kind {
        ObjectiveKind::Erm => train_erm(splits, cfg, rng),
        ObjectiveKind::Vrex | ObjectiveKind::GroupDro => train_robust(splits, cfg, rng),
        ObjectiveKind::Dil => dil_train(splits, cfg, rng),
    }
}
