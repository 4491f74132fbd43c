//! FM-family forward passes and their analytic gradients.
//!
//! Four architectures share one parameter layout:
//!
//! | kind       | embeddings            | field weights          |
//! |------------|-----------------------|------------------------|
//! | `fm`       | one table             | -                      |
//! | `fieldfm`  | one table             | one pair-weight set    |
//! | `dil`      | `v^s` plus `v^t` per env | -                   |
//! | `lightdil` | one table             | `a^s` plus `a^t` per env |
//!
//! Every parameter group is stored as a flat `Vec<f64>` of rows with a fixed
//! width (the embedding dimension for tables, 1 for pair weights), which is
//! what [`GradientSet`] and the optimizer address.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::{EnvId, FeatureSchema, Instance};
use crate::error::{Error, Result};
use crate::math;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ModelKind {
    Fm,
    FieldFm,
    Dil,
    LightDil,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Fm => "fm",
            ModelKind::FieldFm => "fieldfm",
            ModelKind::Dil => "dil",
            ModelKind::LightDil => "lightdil",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "fm" => ModelKind::Fm,
            "fieldfm" => ModelKind::FieldFm,
            "dil" => ModelKind::Dil,
            "lightdil" => ModelKind::LightDil,
            _ => return None,
        })
    }

    /// True for the architectures with environment-specific parameters.
    pub fn is_disentangled(self) -> bool {
        matches!(self, ModelKind::Dil | ModelKind::LightDil)
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Which environment-specific parameters a forward pass uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    /// Invariant plus the given environment's parameters (training).
    Env(EnvId),
    /// Invariant parameters only.
    Inference,
}

/// A named block of parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamGroup {
    /// The single embedding table of fm, fieldfm and lightdil.
    Embeddings,
    /// Field-pair weights of fieldfm.
    FieldWeights,
    /// `phi_s`: `v^s` for dil, `a^s` for lightdil.
    Invariant,
    /// `phi_t`: `v^t` for dil, `a^t` for lightdil.
    Env(EnvId),
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParamGroup::Embeddings => f.write_str("embeddings"),
            ParamGroup::FieldWeights => f.write_str("field_weights"),
            ParamGroup::Invariant => f.write_str("invariant"),
            ParamGroup::Env(t) => write!(f, "env[{t}]"),
        }
    }
}

/// `rows x dim` embedding matrix, row `i` is feature `i`'s vector.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    data: Vec<f64>,
}

impl EmbeddingTable {
    pub fn zeros(rows: usize, dim: usize) -> Self {
        Self {
            dim,
            data: vec![0.0; rows * dim],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if dim == 0 || rows.iter().any(|r| r.len() != dim) {
            return Err(Error::ShapeMismatch(
                "embedding rows must be non-empty and equally sized".to_string(),
            ));
        }
        Ok(Self {
            dim,
            data: rows.iter().flatten().copied().collect(),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rows(&self) -> usize {
        self.data.len() / self.dim
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.data.chunks(self.dim).map(<[f64]>::to_vec).collect()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

/// Strictly upper-triangular `M x M` weights, stored as `M(M-1)/2` values.
#[derive(Debug, Clone, PartialEq)]
pub struct PairWeights {
    num_fields: usize,
    data: Vec<f64>,
}

impl PairWeights {
    pub fn filled(num_fields: usize, value: f64) -> Self {
        Self {
            num_fields,
            data: vec![value; num_fields * num_fields.saturating_sub(1) / 2],
        }
    }

    /// Reads the strict upper triangle of a square matrix.
    pub fn from_matrix(m: &[Vec<f64>]) -> Result<Self> {
        let n = m.len();
        if m.iter().any(|r| r.len() != n) {
            return Err(Error::ShapeMismatch("weight matrix must be square".to_string()));
        }
        let mut w = Self::filled(n, 0.0);
        for i in 0..n {
            for j in i + 1..n {
                let p = w.index(i, j);
                w.data[p] = m[i][j];
            }
        }
        Ok(w)
    }

    /// Square matrix with zeros on and below the diagonal.
    pub fn to_matrix(&self) -> Vec<Vec<f64>> {
        let n = self.num_fields;
        let mut m = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in i + 1..n {
                m[i][j] = self.get(i, j);
            }
        }
        m
    }

    pub fn num_fields(&self) -> usize {
        self.num_fields
    }

    /// Flat index of the pair `(i, j)`, `i < j`.
    #[inline]
    pub fn index(&self, i: usize, j: usize) -> usize {
        debug_assert!(i < j && j < self.num_fields);
        i * self.num_fields - i * (i + 1) / 2 + (j - i - 1)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[self.index(i, j)]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        let p = self.index(i, j);
        self.data[p] = v;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

/// DIL parameters: the invariant table `v^s` and one `v^t` per training env.
#[derive(Debug, Clone, PartialEq)]
pub struct DisentangledEmbeddings {
    pub shared_invariant: EmbeddingTable,
    pub per_env: BTreeMap<EnvId, EmbeddingTable>,
}

/// LightDIL field weights: `a^s` and one `a^t` per training env.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldWeightSet {
    pub invariant_weights: PairWeights,
    pub per_env_weights: BTreeMap<EnvId, PairWeights>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Params {
    Fm {
        embeddings: EmbeddingTable,
    },
    FieldFm {
        embeddings: EmbeddingTable,
        weights: PairWeights,
    },
    Dil(DisentangledEmbeddings),
    LightDil {
        embeddings: EmbeddingTable,
        weights: FieldWeightSet,
    },
}

/// A model: schema, kind-consistent parameters and the init seed.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    schema: FeatureSchema,
    params: Params,
    seed: u64,
}

impl ModelState {
    /// Assembles a model, checking that every table and weight set matches
    /// the schema and each other.
    pub fn from_parts(schema: FeatureSchema, params: Params, seed: u64) -> Result<Self> {
        let n = schema.num_features();
        let m = schema.num_fields();
        let check_table = |t: &EmbeddingTable, dim: usize| -> Result<()> {
            if t.dim() != dim || t.rows() != n {
                return Err(Error::ShapeMismatch(format!(
                    "embedding table is {}x{}, expected {n}x{dim}",
                    t.rows(),
                    t.dim()
                )));
            }
            if t.data.iter().any(|x| !x.is_finite()) {
                return Err(Error::ShapeMismatch("non-finite embedding".to_string()));
            }
            Ok(())
        };
        let check_weights = |w: &PairWeights| -> Result<()> {
            if w.num_fields() != m {
                return Err(Error::ShapeMismatch(format!(
                    "pair weights cover {} fields, schema has {m}",
                    w.num_fields()
                )));
            }
            Ok(())
        };
        match &params {
            Params::Fm { embeddings } => check_table(embeddings, embeddings.dim())?,
            Params::FieldFm {
                embeddings,
                weights,
            } => {
                check_table(embeddings, embeddings.dim())?;
                check_weights(weights)?;
            }
            Params::Dil(d) => {
                let dim = d.shared_invariant.dim();
                check_table(&d.shared_invariant, dim)?;
                for t in d.per_env.values() {
                    check_table(t, dim)?;
                }
            }
            Params::LightDil {
                embeddings,
                weights,
            } => {
                check_table(embeddings, embeddings.dim())?;
                check_weights(&weights.invariant_weights)?;
                for w in weights.per_env_weights.values() {
                    check_weights(w)?;
                }
            }
        }
        Ok(Self {
            schema,
            params,
            seed,
        })
    }

    pub fn kind(&self) -> ModelKind {
        match self.params {
            Params::Fm { .. } => ModelKind::Fm,
            Params::FieldFm { .. } => ModelKind::FieldFm,
            Params::Dil(_) => ModelKind::Dil,
            Params::LightDil { .. } => ModelKind::LightDil,
        }
    }

    pub fn schema(&self) -> &FeatureSchema {
        &self.schema
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn dim(&self) -> usize {
        match &self.params {
            Params::Fm { embeddings }
            | Params::FieldFm { embeddings, .. }
            | Params::LightDil { embeddings, .. } => embeddings.dim(),
            Params::Dil(d) => d.shared_invariant.dim(),
        }
    }

    /// Environments with their own parameters (empty for fm / fieldfm).
    pub fn env_ids(&self) -> Vec<EnvId> {
        match &self.params {
            Params::Dil(d) => d.per_env.keys().copied().collect(),
            Params::LightDil { weights, .. } => weights.per_env_weights.keys().copied().collect(),
            _ => Vec::new(),
        }
    }

    /// Parameter groups present in this model, in a fixed order.
    pub fn groups(&self) -> Vec<ParamGroup> {
        let mut g = match self.kind() {
            ModelKind::Fm => vec![ParamGroup::Embeddings],
            ModelKind::FieldFm => vec![ParamGroup::Embeddings, ParamGroup::FieldWeights],
            ModelKind::Dil => vec![ParamGroup::Invariant],
            ModelKind::LightDil => vec![ParamGroup::Embeddings, ParamGroup::Invariant],
        };
        g.extend(self.env_ids().into_iter().map(ParamGroup::Env));
        g
    }

    /// Row width of a group: the embedding dimension or 1 for pair weights.
    pub fn group_width(&self, group: ParamGroup) -> Result<usize> {
        self.group(group)?;
        Ok(match (self.kind(), group) {
            (_, ParamGroup::Embeddings) | (ModelKind::Dil, _) => self.dim(),
            _ => 1,
        })
    }

    /// True when the group holds embedding vectors (subject to L2).
    pub fn is_embedding_group(&self, group: ParamGroup) -> bool {
        matches!(group, ParamGroup::Embeddings) || self.kind() == ModelKind::Dil
    }

    fn mismatch(&self, group: ParamGroup) -> Error {
        Error::GroupMismatch {
            group: group.to_string(),
            kind: self.kind().as_str(),
        }
    }

    fn group_vec_mut(&mut self, group: ParamGroup) -> Result<&mut Vec<f64>> {
        let err = self.mismatch(group);
        match (&mut self.params, group) {
            (Params::Fm { embeddings }, ParamGroup::Embeddings)
            | (Params::FieldFm { embeddings, .. }, ParamGroup::Embeddings)
            | (Params::LightDil { embeddings, .. }, ParamGroup::Embeddings) => {
                Ok(&mut embeddings.data)
            }
            (Params::FieldFm { weights, .. }, ParamGroup::FieldWeights) => Ok(&mut weights.data),
            (Params::Dil(d), ParamGroup::Invariant) => Ok(&mut d.shared_invariant.data),
            (Params::Dil(d), ParamGroup::Env(t)) => d
                .per_env
                .get_mut(&t)
                .map(|e| &mut e.data)
                .ok_or(Error::UnknownEnv(t)),
            (Params::LightDil { weights, .. }, ParamGroup::Invariant) => {
                Ok(&mut weights.invariant_weights.data)
            }
            (Params::LightDil { weights, .. }, ParamGroup::Env(t)) => weights
                .per_env_weights
                .get_mut(&t)
                .map(|w| &mut w.data)
                .ok_or(Error::UnknownEnv(t)),
            _ => Err(err),
        }
    }

    /// Flat view of one parameter group.
    pub fn group(&self, group: ParamGroup) -> Result<&[f64]> {
        match (&self.params, group) {
            (Params::Fm { embeddings }, ParamGroup::Embeddings)
            | (Params::FieldFm { embeddings, .. }, ParamGroup::Embeddings)
            | (Params::LightDil { embeddings, .. }, ParamGroup::Embeddings) => {
                Ok(&embeddings.data)
            }
            (Params::FieldFm { weights, .. }, ParamGroup::FieldWeights) => Ok(&weights.data),
            (Params::Dil(d), ParamGroup::Invariant) => Ok(&d.shared_invariant.data),
            (Params::Dil(d), ParamGroup::Env(t)) => d
                .per_env
                .get(&t)
                .map(|e| e.data.as_slice())
                .ok_or(Error::UnknownEnv(t)),
            (Params::LightDil { weights, .. }, ParamGroup::Invariant) => {
                Ok(&weights.invariant_weights.data)
            }
            (Params::LightDil { weights, .. }, ParamGroup::Env(t)) => weights
                .per_env_weights
                .get(&t)
                .map(|w| w.data.as_slice())
                .ok_or(Error::UnknownEnv(t)),
            _ => Err(self.mismatch(group)),
        }
    }

    /// Mutable flat view of one parameter group; its length is fixed.
    pub fn group_mut(&mut self, group: ParamGroup) -> Result<&mut [f64]> {
        self.group_vec_mut(group).map(Vec::as_mut_slice)
    }

    /// Swaps a group's values with `values` (same length), returning the
    /// previous contents.
    pub fn replace_group(&mut self, group: ParamGroup, mut values: Vec<f64>) -> Result<Vec<f64>> {
        let slot = self.group_vec_mut(group)?;
        if slot.len() != values.len() {
            return Err(Error::ShapeMismatch(format!(
                "group {group} has {} values, replacement has {}",
                slot.len(),
                values.len()
            )));
        }
        core::mem::swap(slot, &mut values);
        Ok(values)
    }

    fn check_scope(&self, scope: Scope) -> Result<()> {
        if let Scope::Env(t) = scope {
            if self.kind().is_disentangled() && !self.env_ids().contains(&t) {
                return Err(Error::UnknownEnv(t));
            }
        }
        Ok(())
    }

    /// Raw interaction score for one instance.
    ///
    /// fm / fieldfm ignore `scope`; dil / lightdil use the invariant part
    /// alone under [`Scope::Inference`].
    pub fn logit(&self, inst: &Instance, scope: Scope) -> Result<f64> {
        self.check_scope(scope)?;
        Ok(self.logit_unchecked(inst, scope))
    }

    fn logit_unchecked(&self, inst: &Instance, scope: Scope) -> f64 {
        match &self.params {
            Params::Fm { embeddings } => fm_logit(inst, &self.schema, embeddings, None),
            Params::Dil(d) => {
                let env = match scope {
                    Scope::Env(t) => d.per_env.get(&t),
                    Scope::Inference => None,
                };
                fm_logit(inst, &self.schema, &d.shared_invariant, env)
            }
            Params::FieldFm {
                embeddings,
                weights,
            } => {
                let reps = field_reps(inst, embeddings, &self.schema);
                weighted_pairs(&reps, weights, None)
            }
            Params::LightDil {
                embeddings,
                weights,
            } => {
                let reps = field_reps(inst, embeddings, &self.schema);
                let env = match scope {
                    Scope::Env(t) => weights.per_env_weights.get(&t),
                    Scope::Inference => None,
                };
                weighted_pairs(&reps, &weights.invariant_weights, env)
            }
        }
    }

    /// Clipped click probability.
    pub fn predict_proba(&self, inst: &Instance, scope: Scope) -> Result<f64> {
        self.logit(inst, scope).map(predict_proba)
    }

    /// Adds `coeff * d logit / d group` for one instance into `acc`.
    fn accumulate_logit_grad(
        &self,
        inst: &Instance,
        scope: Scope,
        group: ParamGroup,
        coeff: f64,
        acc: &mut SparseAccum,
    ) {
        let touches_env = |t: EnvId| scope == Scope::Env(t);
        match &self.params {
            Params::Fm { embeddings } => {
                fm_grad(inst, &self.schema, embeddings, None, coeff, acc);
            }
            Params::Dil(d) => {
                let env = match scope {
                    Scope::Env(t) => d.per_env.get(&t),
                    Scope::Inference => None,
                };
                // d/dv^s and d/dv^t coincide: both enter as v^s + v^t.
                match group {
                    ParamGroup::Invariant => {
                        fm_grad(inst, &self.schema, &d.shared_invariant, env, coeff, acc)
                    }
                    ParamGroup::Env(t) if touches_env(t) => {
                        fm_grad(inst, &self.schema, &d.shared_invariant, env, coeff, acc)
                    }
                    _ => {}
                }
            }
            Params::FieldFm {
                embeddings,
                weights,
            } => {
                let reps = field_reps(inst, embeddings, &self.schema);
                match group {
                    ParamGroup::Embeddings => {
                        field_embedding_grad(inst, &self.schema, &reps, weights, None, coeff, acc)
                    }
                    _ => pair_weight_grad(&reps, weights.num_fields(), coeff, acc),
                }
            }
            Params::LightDil {
                embeddings,
                weights,
            } => {
                let reps = field_reps(inst, embeddings, &self.schema);
                let env = match scope {
                    Scope::Env(t) => weights.per_env_weights.get(&t),
                    Scope::Inference => None,
                };
                match group {
                    ParamGroup::Embeddings => field_embedding_grad(
                        inst,
                        &self.schema,
                        &reps,
                        &weights.invariant_weights,
                        env,
                        coeff,
                        acc,
                    ),
                    ParamGroup::Invariant => {
                        pair_weight_grad(&reps, self.schema.num_fields(), coeff, acc)
                    }
                    ParamGroup::Env(t) if touches_env(t) => {
                        pair_weight_grad(&reps, self.schema.num_fields(), coeff, acc)
                    }
                    _ => {}
                }
            }
        }
    }

    /// Gradient of `d logit / d group` for a single instance.
    pub fn logit_gradient(
        &self,
        inst: &Instance,
        scope: Scope,
        group: ParamGroup,
    ) -> Result<GradientSet> {
        self.check_scope(scope)?;
        let width = self.group_width(group)?;
        let mut acc = SparseAccum::new(width);
        self.accumulate_logit_grad(inst, scope, group, 1.0, &mut acc);
        Ok(acc.finish(group))
    }

    /// Gradient of the mean logloss over `items` with respect to `group`,
    /// each instance evaluated under its own scope.
    pub fn backward_scoped<'a, I>(&self, items: I, group: ParamGroup) -> Result<GradientSet>
    where
        I: IntoIterator<Item = (Scope, &'a Instance)>,
    {
        let width = self.group_width(group)?;
        let items: Vec<(Scope, &Instance)> = items.into_iter().collect();
        if items.is_empty() {
            return Err(Error::EmptySlice);
        }
        for (scope, _) in &items {
            self.check_scope(*scope)?;
        }
        let n = items.len() as f64;
        let mut acc = SparseAccum::new(width);
        for (scope, inst) in items {
            let z = self.logit_unchecked(inst, scope);
            let c = math::bce_grad_logit(inst.label_f64(), z) / n;
            if c != 0.0 {
                self.accumulate_logit_grad(inst, scope, group, c, &mut acc);
            }
        }
        Ok(acc.finish(group))
    }

    /// Gradient of the mean logloss over `slice` under one scope.
    pub fn backward(
        &self,
        slice: &[&Instance],
        scope: Scope,
        group: ParamGroup,
    ) -> Result<GradientSet> {
        self.backward_scoped(slice.iter().map(|i| (scope, *i)), group)
    }

    /// Applies `group -= lr * grad` in place (plain gradient step).
    pub fn apply_sgd(&mut self, grad: &GradientSet, lr: f64) -> Result<()> {
        let width = self.group_width(grad.group)?;
        let params = self.group_mut(grad.group)?;
        grad.check_shape(params.len(), width)?;
        for (row, g) in grad.iter() {
            let p = &mut params[row * width..(row + 1) * width];
            for (x, gi) in p.iter_mut().zip(g) {
                *x -= lr * gi;
            }
        }
        Ok(())
    }
}

/// `sigmoid(logit)` clipped to `[1e-7, 1 - 1e-7]`.
pub fn predict_proba(logit: f64) -> f64 {
    math::clipped_prob(logit)
}

/// Feature-level FM score over the active features (second-order only).
///
/// Uses `1/2 sum_d [(sum_i v_id)^2 - sum_i v_id^2]`; `env` adds a second
/// table row-wise before the interaction.
pub fn fm_logit(
    inst: &Instance,
    schema: &FeatureSchema,
    table: &EmbeddingTable,
    env: Option<&EmbeddingTable>,
) -> f64 {
    let d = table.dim();
    let mut z = 0.0;
    for k in 0..d {
        let (mut sum, mut sq) = (0.0, 0.0);
        for f in &inst.features {
            let g = schema.global_index(*f);
            let mut e = table.data[g * d + k];
            if let Some(env) = env {
                e += env.data[g * d + k];
            }
            sum += e;
            sq += e * e;
        }
        z += sum * sum - sq;
    }
    0.5 * z
}

fn fm_grad(
    inst: &Instance,
    schema: &FeatureSchema,
    table: &EmbeddingTable,
    env: Option<&EmbeddingTable>,
    coeff: f64,
    acc: &mut SparseAccum,
) {
    let d = table.dim();
    let effective = |g: usize, k: usize| {
        table.data[g * d + k] + env.map_or(0.0, |e| e.data[g * d + k])
    };
    let mut sum = vec![0.0; d];
    for f in &inst.features {
        let g = schema.global_index(*f);
        for (k, s) in sum.iter_mut().enumerate() {
            *s += effective(g, k);
        }
    }
    for f in &inst.features {
        let g = schema.global_index(*f);
        let row = acc.row_mut(g);
        for k in 0..d {
            row[k] += coeff * (sum[k] - effective(g, k));
        }
    }
}

/// Per-field mean of active embeddings, `M` rows of `dim` values.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldReps {
    dim: usize,
    data: Vec<f64>,
    counts: Vec<u32>,
}

impl FieldReps {
    pub fn get(&self, field: usize) -> &[f64] {
        &self.data[field * self.dim..(field + 1) * self.dim]
    }

    pub fn active_count(&self, field: usize) -> u32 {
        self.counts[field]
    }

    pub fn num_fields(&self) -> usize {
        self.counts.len()
    }
}

/// Field representations `u_i`: the mean of the field's active embeddings,
/// or the zero vector when the field has no active feature.
pub fn field_reps(inst: &Instance, table: &EmbeddingTable, schema: &FeatureSchema) -> FieldReps {
    let d = table.dim();
    let m = schema.num_fields();
    let mut data = vec![0.0; m * d];
    let mut counts = vec![0u32; m];
    for f in &inst.features {
        let field = f.field as usize;
        counts[field] += 1;
        let row = table.row(schema.global_index(*f));
        for (u, v) in data[field * d..(field + 1) * d].iter_mut().zip(row) {
            *u += v;
        }
    }
    for (field, &c) in counts.iter().enumerate() {
        if c > 1 {
            let inv = 1.0 / f64::from(c);
            data[field * d..(field + 1) * d]
                .iter_mut()
                .for_each(|u| *u *= inv);
        }
    }
    FieldReps {
        dim: d,
        data,
        counts,
    }
}

/// `sum_{i<j} (w_ij + env_ij) <u_i, u_j>`.
pub fn weighted_pairs(reps: &FieldReps, weights: &PairWeights, env: Option<&PairWeights>) -> f64 {
    let m = reps.num_fields();
    let mut z = 0.0;
    for i in 0..m {
        if reps.counts[i] == 0 {
            continue;
        }
        for j in i + 1..m {
            if reps.counts[j] == 0 {
                continue;
            }
            let p = weights.index(i, j);
            let w = weights.data[p] + env.map_or(0.0, |e| e.data[p]);
            z += w * math::dot(reps.get(i), reps.get(j));
        }
    }
    z
}

fn field_embedding_grad(
    inst: &Instance,
    schema: &FeatureSchema,
    reps: &FieldReps,
    weights: &PairWeights,
    env: Option<&PairWeights>,
    coeff: f64,
    acc: &mut SparseAccum,
) {
    let m = reps.num_fields();
    let d = reps.dim;
    // d logit / d u_i = sum_{j != i} w_ij u_j
    let mut du = vec![0.0; m * d];
    for i in 0..m {
        if reps.counts[i] == 0 {
            continue;
        }
        for j in i + 1..m {
            if reps.counts[j] == 0 {
                continue;
            }
            let p = weights.index(i, j);
            let w = weights.data[p] + env.map_or(0.0, |e| e.data[p]);
            for k in 0..d {
                du[i * d + k] += w * reps.data[j * d + k];
                du[j * d + k] += w * reps.data[i * d + k];
            }
        }
    }
    for f in &inst.features {
        let field = f.field as usize;
        let scale = coeff / f64::from(reps.counts[field]);
        let row = acc.row_mut(schema.global_index(*f));
        for k in 0..d {
            row[k] += scale * du[field * d + k];
        }
    }
}

fn pair_weight_grad(reps: &FieldReps, m: usize, coeff: f64, acc: &mut SparseAccum) {
    let mut p = 0;
    for i in 0..m {
        for j in i + 1..m {
            if reps.counts[i] > 0 && reps.counts[j] > 0 {
                acc.row_mut(p)[0] += coeff * math::dot(reps.get(i), reps.get(j));
            }
            p += 1;
        }
    }
}

/// Sparse gradient: rows of one parameter group, sorted by row index.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub group: ParamGroup,
    width: usize,
    rows: Vec<usize>,
    values: Vec<f64>,
}

impl GradientSet {
    pub fn empty(group: ParamGroup, width: usize) -> Self {
        Self {
            group,
            width,
            rows: Vec::new(),
            values: Vec::new(),
        }
    }

    /// Keeps every row of a dense gradient that has a non-zero entry.
    pub fn from_dense(group: ParamGroup, width: usize, dense: &[f64]) -> Self {
        let mut g = Self::empty(group, width);
        for (r, chunk) in dense.chunks(width).enumerate() {
            if chunk.iter().any(|x| *x != 0.0) {
                g.rows.push(r);
                g.values.extend_from_slice(chunk);
            }
        }
        g
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn rows(&self) -> &[usize] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn get(&self, row: usize) -> Option<&[f64]> {
        self.rows
            .binary_search(&row)
            .ok()
            .map(|k| &self.values[k * self.width..(k + 1) * self.width])
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &[f64])> {
        self.rows
            .iter()
            .copied()
            .zip(self.values.chunks(self.width.max(1)))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (usize, &mut [f64])> {
        let w = self.width.max(1);
        self.rows.iter().copied().zip(self.values.chunks_mut(w))
    }

    pub fn to_dense(&self, len: usize) -> Vec<f64> {
        let mut d = vec![0.0; len];
        for (r, g) in self.iter() {
            d[r * self.width..(r + 1) * self.width].copy_from_slice(g);
        }
        d
    }

    pub fn scale(&mut self, c: f64) {
        self.values.iter_mut().for_each(|v| *v *= c);
    }

    /// `self + c * other` over the union of rows.
    pub fn add_scaled(&self, other: &GradientSet, c: f64) -> GradientSet {
        debug_assert_eq!(self.width, other.width);
        let w = self.width;
        let mut out = GradientSet::empty(self.group, w);
        let (mut a, mut b) = (0, 0);
        while a < self.rows.len() || b < other.rows.len() {
            let ra = self.rows.get(a).copied().unwrap_or(usize::MAX);
            let rb = other.rows.get(b).copied().unwrap_or(usize::MAX);
            let row = ra.min(rb);
            out.rows.push(row);
            let start = out.values.len();
            out.values.resize(start + w, 0.0);
            if ra == row {
                out.values[start..]
                    .iter_mut()
                    .zip(&self.values[a * w..(a + 1) * w])
                    .for_each(|(o, v)| *o += v);
                a += 1;
            }
            if rb == row {
                out.values[start..]
                    .iter_mut()
                    .zip(&other.values[b * w..(b + 1) * w])
                    .for_each(|(o, v)| *o += c * v);
                b += 1;
            }
        }
        out
    }

    /// Adds `coeff * params[row]` to every present row (L2 on touched rows).
    pub fn add_l2(&mut self, params: &[f64], coeff: f64) {
        if coeff == 0.0 {
            return;
        }
        let w = self.width;
        for (r, g) in self.iter_mut() {
            for (gi, p) in g.iter_mut().zip(&params[r * w..(r + 1) * w]) {
                *gi += coeff * p;
            }
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub(crate) fn check_shape(&self, len: usize, width: usize) -> Result<()> {
        if self.width != width {
            return Err(Error::ShapeMismatch(format!(
                "gradient width {} vs parameter width {width}",
                self.width
            )));
        }
        if let Some(&last) = self.rows.last() {
            if (last + 1) * width > len {
                return Err(Error::ShapeMismatch(format!(
                    "gradient row {last} out of range"
                )));
            }
        }
        Ok(())
    }
}

/// Row accumulator keyed by parameter row; only touched rows are stored.
#[derive(Debug)]
pub(crate) struct SparseAccum {
    width: usize,
    slots: BTreeMap<usize, usize>,
    values: Vec<f64>,
}

impl SparseAccum {
    pub(crate) fn new(width: usize) -> Self {
        Self {
            width,
            slots: BTreeMap::new(),
            values: Vec::new(),
        }
    }

    pub(crate) fn row_mut(&mut self, row: usize) -> &mut [f64] {
        let w = self.width;
        let next = self.values.len() / w;
        let slot = *self.slots.entry(row).or_insert(next);
        if slot == next {
            self.values.resize(self.values.len() + w, 0.0);
        }
        &mut self.values[slot * w..(slot + 1) * w]
    }

    pub(crate) fn finish(self, group: ParamGroup) -> GradientSet {
        let w = self.width;
        let mut rows = Vec::with_capacity(self.slots.len());
        let mut values = Vec::with_capacity(self.values.len());
        for (row, slot) in self.slots {
            rows.push(row);
            values.extend_from_slice(&self.values[slot * w..(slot + 1) * w]);
        }
        GradientSet {
            group,
            width: w,
            rows,
            values,
        }
    }
}

/// Builds a freshly initialised model.
///
/// Embeddings are drawn from `N(0, init_scale^2)`. `a^s` (and fieldfm's
/// weights) start at 1, `a^t` and `v^t` at 0, so a disentangled model starts
/// out identical to its plain counterpart. `train_envs` is ignored for fm and
/// fieldfm.
pub fn init_model(
    kind: ModelKind,
    schema: &FeatureSchema,
    dim: usize,
    init_scale: f64,
    seed: u64,
    train_envs: &[EnvId],
) -> Result<ModelState> {
    if dim == 0 {
        return Err(Error::Config("embedding dim must be >= 1".to_string()));
    }
    if !(init_scale >= 0.0 && init_scale.is_finite()) {
        return Err(Error::Config(format!("invalid init_scale {init_scale}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, init_scale).map_err(|e| Error::Config(e.to_string()))?;
    let n = schema.num_features();
    let mut table = EmbeddingTable::zeros(n, dim);
    table
        .data
        .iter_mut()
        .for_each(|x| *x = normal.sample(&mut rng));
    let m = schema.num_fields();
    let params = match kind {
        ModelKind::Fm => Params::Fm { embeddings: table },
        ModelKind::FieldFm => Params::FieldFm {
            embeddings: table,
            weights: PairWeights::filled(m, 1.0),
        },
        ModelKind::Dil => Params::Dil(DisentangledEmbeddings {
            shared_invariant: table,
            per_env: train_envs
                .iter()
                .map(|&t| (t, EmbeddingTable::zeros(n, dim)))
                .collect(),
        }),
        ModelKind::LightDil => Params::LightDil {
            embeddings: table,
            weights: FieldWeightSet {
                invariant_weights: PairWeights::filled(m, 1.0),
                per_env_weights: train_envs
                    .iter()
                    .map(|&t| (t, PairWeights::filled(m, 0.0)))
                    .collect(),
            },
        },
    };
    ModelState::from_parts(schema.clone(), params, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Feature;

    fn schema2() -> FeatureSchema {
        FeatureSchema::from_cardinalities(&[2, 2]).unwrap()
    }

    fn inst(features: &[(usize, usize)], label: bool, s: &FeatureSchema) -> Instance {
        Instance::new(
            features.iter().map(|&(f, i)| Feature::new(f, i)).collect(),
            label,
            s,
        )
        .unwrap()
    }

    #[test]
    fn fm_small_cases() {
        let s = FeatureSchema::from_cardinalities(&[1, 1, 1]).unwrap();
        let x = inst(&[(0, 0), (1, 0), (2, 0)], true, &s);
        let zero = EmbeddingTable::zeros(3, 2);
        assert_eq!(fm_logit(&x, &s, &zero, None), 0.0);

        let t = EmbeddingTable::from_rows(&[vec![1.0, 1.0], vec![2.0, 0.0], vec![0.0, 3.0]])
            .unwrap();
        // pairwise: <(1,1),(2,0)> + <(1,1),(0,3)> + <(2,0),(0,3)> = 2 + 3 + 0
        assert!((fm_logit(&x, &s, &t, None) - 5.0).abs() < 1e-12);

        let t = EmbeddingTable::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 0.0]])
            .unwrap();
        let two = inst(&[(0, 0), (1, 0)], true, &s);
        assert!((fm_logit(&two, &s, &t, None) - 1.0).abs() < 1e-12);
        let one = inst(&[(0, 0)], true, &s);
        assert_eq!(fm_logit(&one, &s, &t, None), 0.0);
    }

    #[test]
    fn field_rep_means() {
        let s = FeatureSchema::from_cardinalities(&[2, 2, 1]).unwrap();
        let t = EmbeddingTable::from_rows(&[
            vec![2.0, 0.0],
            vec![0.0, 2.0],
            vec![5.0, 7.0],
            vec![1.0, 1.0],
            vec![9.0, 9.0],
        ])
        .unwrap();
        let x = inst(&[(0, 0), (0, 1), (1, 0)], true, &s);
        let reps = field_reps(&x, &t, &s);
        assert_eq!(reps.get(0), &[1.0, 1.0]);
        assert_eq!(reps.get(1), &[5.0, 7.0]);
        assert_eq!(reps.get(2), &[0.0, 0.0]);
        assert_eq!(reps.active_count(2), 0);
    }

    #[test]
    fn fieldfm_weighted_pair() {
        let s = schema2();
        let t = EmbeddingTable::from_rows(&[
            vec![1.0, 0.0],
            vec![0.0, 0.0],
            vec![3.0, 0.0],
            vec![0.0, 0.0],
        ])
        .unwrap();
        let x = inst(&[(0, 0), (1, 0)], true, &s);
        let mut w = PairWeights::filled(2, 2.0);
        let reps = field_reps(&x, &t, &s);
        assert!((weighted_pairs(&reps, &w, None) - 6.0).abs() < 1e-12);
        w.set(0, 1, 0.0);
        assert_eq!(weighted_pairs(&reps, &w, None), 0.0);
    }

    #[test]
    fn pair_index_is_dense() {
        let w = PairWeights::filled(5, 0.0);
        let mut seen = vec![];
        for i in 0..5 {
            for j in i + 1..5 {
                seen.push(w.index(i, j));
            }
        }
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
        let m = PairWeights::from_matrix(&w.to_matrix()).unwrap();
        assert_eq!(m, w);
    }

    #[test]
    fn dil_scopes() {
        let s = schema2();
        let mut model = init_model(ModelKind::Dil, &s, 2, 0.0, 0, &[EnvId(0), EnvId(1)]).unwrap();
        {
            let env = model.group_mut(ParamGroup::Env(EnvId(1))).unwrap();
            env[..2].copy_from_slice(&[1.0, 0.0]); // feature (0,0)
            env[4..6].copy_from_slice(&[2.0, 0.0]); // feature (1,0)
        }
        let x = inst(&[(0, 0), (1, 0)], true, &s);
        assert!((model.logit(&x, Scope::Env(EnvId(1))).unwrap() - 2.0).abs() < 1e-12);
        assert_eq!(model.logit(&x, Scope::Env(EnvId(0))).unwrap(), 0.0);
        assert_eq!(model.logit(&x, Scope::Inference).unwrap(), 0.0);
        assert_eq!(
            model.logit(&x, Scope::Env(EnvId(7))),
            Err(Error::UnknownEnv(EnvId(7)))
        );
    }

    #[test]
    fn lightdil_scopes() {
        let s = schema2();
        let mut model =
            init_model(ModelKind::LightDil, &s, 2, 0.5, 3, &[EnvId(0), EnvId(1)]).unwrap();
        let x = inst(&[(0, 1), (1, 0)], false, &s);
        let plain = {
            let Params::LightDil { embeddings, .. } = model.params() else {
                unreachable!()
            };
            weighted_pairs(&field_reps(&x, embeddings, &s), &PairWeights::filled(2, 1.0), None)
        };
        assert_eq!(model.logit(&x, Scope::Env(EnvId(0))).unwrap(), plain);
        assert_eq!(model.logit(&x, Scope::Inference).unwrap(), plain);

        model.group_mut(ParamGroup::Invariant).unwrap()[0] = 0.5;
        model.group_mut(ParamGroup::Env(EnvId(0))).unwrap()[0] = -0.5;
        assert_eq!(model.logit(&x, Scope::Env(EnvId(0))).unwrap(), 0.0);
        assert!((model.logit(&x, Scope::Inference).unwrap() - 0.5 * plain).abs() < 1e-12);
    }

    #[test]
    fn lightdil_weight_gradient_is_field_inner_product() {
        let s = FeatureSchema::from_cardinalities(&[2, 3, 2]).unwrap();
        let model = init_model(ModelKind::LightDil, &s, 3, 0.7, 11, &[EnvId(0), EnvId(1)]).unwrap();
        let x = inst(&[(0, 1), (1, 0), (1, 2), (2, 1)], true, &s);
        let g = model
            .logit_gradient(&x, Scope::Env(EnvId(0)), ParamGroup::Invariant)
            .unwrap();
        let Params::LightDil { embeddings, .. } = model.params() else {
            unreachable!()
        };
        let reps = field_reps(&x, embeddings, &s);
        let w = PairWeights::filled(3, 0.0);
        for i in 0..3 {
            for j in i + 1..3 {
                let expect = math::dot(reps.get(i), reps.get(j));
                assert_eq!(g.get(w.index(i, j)).unwrap()[0], expect);
            }
        }
    }

    #[test]
    fn probabilities() {
        assert_eq!(predict_proba(0.0), 0.5);
        assert_eq!(predict_proba(f64::INFINITY), 1.0 - 1e-7);
        assert_eq!(predict_proba(f64::NEG_INFINITY), 1e-7);
        assert!((predict_proba(libm::log(3.0)) - 0.75).abs() < 1e-15);
    }

    #[test]
    fn saturated_prediction_has_no_gradient() {
        let s = schema2();
        let mut model = init_model(ModelKind::Fm, &s, 1, 0.0, 0, &[]).unwrap();
        model.group_mut(ParamGroup::Embeddings).unwrap().copy_from_slice(&[10.0, 0.0, 10.0, 0.0]);
        let x = inst(&[(0, 0), (1, 0)], true, &s);
        let g = model.backward(&[&x], Scope::Inference, ParamGroup::Embeddings).unwrap();
        assert!(g.max_abs() <= 1e-6);
    }

    #[test]
    fn group_errors() {
        let s = schema2();
        let mut fm = init_model(ModelKind::Fm, &s, 2, 0.1, 0, &[]).unwrap();
        assert!(matches!(
            fm.group(ParamGroup::Invariant),
            Err(Error::GroupMismatch { .. })
        ));
        let x = inst(&[(0, 0), (1, 0)], true, &s);
        assert!(fm.backward(&[&x], Scope::Inference, ParamGroup::FieldWeights).is_err());
        assert!(fm.backward(&[], Scope::Inference, ParamGroup::Embeddings).is_err());
        assert!(fm.replace_group(ParamGroup::Embeddings, vec![0.0; 3]).is_err());
    }

    #[test]
    fn init_is_seeded_and_starts_at_plain_model() {
        let s = schema2();
        let envs = [EnvId(0), EnvId(1)];
        let a = init_model(ModelKind::Dil, &s, 4, 0.1, 42, &envs).unwrap();
        let b = init_model(ModelKind::Dil, &s, 4, 0.1, 42, &envs).unwrap();
        assert_eq!(a, b);
        let c = init_model(ModelKind::Dil, &s, 4, 0.1, 43, &envs).unwrap();
        assert_ne!(a, c);
        let x = inst(&[(0, 0), (1, 1)], true, &s);
        let Params::Dil(d) = a.params() else { unreachable!() };
        let plain = fm_logit(&x, &s, &d.shared_invariant, None);
        assert_eq!(a.logit(&x, Scope::Env(EnvId(1))).unwrap(), plain);
    }

    #[test]
    fn gradient_set_merge() {
        let a = GradientSet::from_dense(ParamGroup::Invariant, 1, &[1.0, 0.0, 2.0]);
        let b = GradientSet::from_dense(ParamGroup::Invariant, 1, &[0.0, 3.0, 1.0]);
        let c = a.add_scaled(&b, -1.0);
        assert_eq!(c.to_dense(3), vec![1.0, -3.0, 1.0]);
    }
}
