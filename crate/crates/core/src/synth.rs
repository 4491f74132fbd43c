//! Synthetic multi-environment click data with a known stable signal.
//!
//! The base generator draws one feature per field and labels each instance
//! from a logistic model over fixed ground-truth field-pair interactions, with
//! the same law in every environment. Two binary fields can then be appended:
//!
//! * spurious (`sp`): both copies equal the label, flipped with probability
//!   `p_t`; labels are untouched.
//! * dynamic causal (`dc`): both copies are `Bernoulli(p_t)` and the label is
//!   rewritten as `[alpha*y + beta_t*x1*x2 + eps > 0.5]` with
//!   `alpha ~ U(alpha_range)` and `eps ~ U(noise_range)`.
//!
//! Environment `t` draws from its own ChaCha stream (`t + 1`) of the master
//! seed; stream 0 produces the ground-truth embeddings.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::{EnvId, EnvironmentDataset, Feature, FeatureSchema, Instance};
use crate::error::{Error, Result};
use crate::math;

/// Flip probabilities of the spurious construction, one per day.
pub const SP_FLIP_PROBS: [f64; 10] = [0.1, 0.15, 0.2, 0.25, 0.5, 0.5, 0.7, 0.8, 0.85, 0.9];
/// `P(x' = 1)` of the dynamic-causal construction.
pub const DC_BERN_PROBS: [f64; 10] = [0.1, 0.2, 0.2, 0.2, 0.2, 0.1, 0.2, 0.2, 0.2, 0.2];
/// Causal strength `beta_t` of the dynamic-causal construction.
pub const DC_CAUSAL_STRENGTHS: [f64; 10] =
    [0.6, 0.5, 0.15, 0.0, -0.15, 0.0, 0.1, -0.15, -0.25, -0.4];

/// Names of the two appended binary fields.
pub const INJECTED_FIELDS: [&str; 2] = ["x1_prime", "x2_prime"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SynthKind {
    Stable,
    Spurious,
    Dynamic,
}

impl SynthKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SynthKind::Stable => "stable",
            SynthKind::Spurious => "sp",
            SynthKind::Dynamic => "dc",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "stable" => SynthKind::Stable,
            "sp" => SynthKind::Spurious,
            "dc" => SynthKind::Dynamic,
            _ => return None,
        })
    }
}

impl fmt::Display for SynthKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Ground-truth interaction `weight * <e_a, e_b>` between two base fields.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StablePair {
    pub field_a: usize,
    pub field_b: usize,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub base_fields: Vec<usize>,
    pub embed_dim_true: usize,
    pub stable_pairs: Vec<StablePair>,
    pub num_envs: usize,
    pub instances_per_env: usize,
    pub flip_probs: Vec<f64>,
    pub bern_probs: Vec<f64>,
    pub causal_strengths: Vec<f64>,
    pub alpha_range: (f64, f64),
    pub noise_range: (f64, f64),
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            base_fields: vec![8, 8, 8, 8],
            embed_dim_true: 4,
            stable_pairs: vec![
                StablePair {
                    field_a: 0,
                    field_b: 1,
                    weight: 2.0,
                },
                StablePair {
                    field_a: 2,
                    field_b: 3,
                    weight: 2.0,
                },
                StablePair {
                    field_a: 0,
                    field_b: 2,
                    weight: 1.0,
                },
            ],
            num_envs: 10,
            instances_per_env: 20_000,
            flip_probs: SP_FLIP_PROBS.to_vec(),
            bern_probs: DC_BERN_PROBS.to_vec(),
            causal_strengths: DC_CAUSAL_STRENGTHS.to_vec(),
            alpha_range: (0.55, 0.65),
            noise_range: (0.0, 0.01),
            seed: 0,
        }
    }
}

impl SynthConfig {
    /// Checks the configuration for `kind`; schedules only need to be valid
    /// for the construction that uses them.
    pub fn validate(&self, kind: SynthKind) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.base_fields.len() < 2 {
            return err(format!(
                "need at least 2 base fields, got {}",
                self.base_fields.len()
            ));
        }
        if self.base_fields.contains(&0) {
            return err("base field cardinalities must be positive".to_string());
        }
        if self.embed_dim_true == 0 || self.num_envs == 0 || self.instances_per_env == 0 {
            return err("embed_dim_true, num_envs and instances_per_env must be >= 1".to_string());
        }
        for p in &self.stable_pairs {
            let m = self.base_fields.len();
            if p.field_a >= m || p.field_b >= m || p.field_a == p.field_b || !p.weight.is_finite()
            {
                return err(format!(
                    "invalid stable pair ({}, {}, {})",
                    p.field_a, p.field_b, p.weight
                ));
            }
        }
        let check_probs = |name: &str, v: &[f64]| -> Result<()> {
            if v.len() != self.num_envs {
                return Err(Error::Config(format!(
                    "{name} has {} entries for {} environments",
                    v.len(),
                    self.num_envs
                )));
            }
            if v.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return Err(Error::Config(format!("{name} entries must lie in [0, 1]")));
            }
            Ok(())
        };
        let check_range = |name: &str, (lo, hi): (f64, f64)| -> Result<()> {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(Error::Config(format!("{name} must satisfy lower < upper")));
            }
            Ok(())
        };
        match kind {
            SynthKind::Stable => {}
            SynthKind::Spurious => check_probs("flip_probs", &self.flip_probs)?,
            SynthKind::Dynamic => {
                check_probs("bern_probs", &self.bern_probs)?;
                if self.causal_strengths.len() != self.num_envs
                    || self.causal_strengths.iter().any(|b| !b.is_finite())
                {
                    return err(format!(
                        "causal_strengths must hold {} finite values",
                        self.num_envs
                    ));
                }
                check_range("alpha_range", self.alpha_range)?;
                check_range("noise_range", self.noise_range)?;
            }
        }
        Ok(())
    }

    fn base_schema(&self) -> Result<FeatureSchema> {
        FeatureSchema::from_cardinalities(&self.base_fields)
    }
}

/// Ground-truth record of a generated dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub kind: SynthKind,
    pub base_fields: Vec<usize>,
    /// One row per base feature (global index order).
    pub embeddings: Vec<Vec<f64>>,
    pub stable_pairs: Vec<StablePair>,
    pub flip_probs: Vec<f64>,
    pub causal_strengths: Vec<f64>,
    pub bern_probs: Vec<f64>,
    pub seed: u64,
}

impl GroundTruth {
    /// Stable logit of an instance; injected fields are ignored.
    pub fn logit(&self, inst: &Instance) -> f64 {
        let m = self.base_fields.len();
        let mut chosen: Vec<Option<usize>> = vec![None; m];
        let mut offset = 0;
        let offsets: Vec<usize> = self
            .base_fields
            .iter()
            .map(|c| {
                let o = offset;
                offset += c;
                o
            })
            .collect();
        for f in &inst.features {
            let field = f.field as usize;
            if field < m {
                chosen[field] = Some(offsets[field] + f.index as usize);
            }
        }
        self.stable_pairs
            .iter()
            .filter_map(|p| match (chosen[p.field_a], chosen[p.field_b]) {
                (Some(a), Some(b)) => {
                    Some(p.weight * math::dot(&self.embeddings[a], &self.embeddings[b]))
                }
                _ => None,
            })
            .sum()
    }
}

/// A base instance with the two appended binary features.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InjectedInstance {
    pub base: Instance,
    pub x1_prime: bool,
    pub x2_prime: bool,
    pub new_label: bool,
}

impl InjectedInstance {
    /// Appends the binary features as one-hot fields `m` and `m + 1`, where
    /// `m` is the base field count.
    pub fn into_instance(self, base_num_fields: usize) -> Instance {
        let mut features = self.base.features;
        features.push(Feature::new(base_num_fields, usize::from(self.x1_prime)));
        features.push(Feature::new(base_num_fields + 1, usize::from(self.x2_prime)));
        Instance {
            features,
            label: self.new_label,
        }
    }
}

/// Spurious injection: `x' = eps*(1 - y) + (1 - eps)*y` with
/// `eps ~ Bernoulli(p_t)` drawn per instance.
pub fn inject_spurious<R: Rng + ?Sized>(
    instance: Instance,
    label: bool,
    flip_prob: f64,
    rng: &mut R,
) -> InjectedInstance {
    let flip = rng.random_bool(flip_prob);
    let x = label ^ flip;
    InjectedInstance {
        base: instance,
        x1_prime: x,
        x2_prime: x,
        new_label: label,
    }
}

/// Dynamic causal injection: `x' ~ Bernoulli(p_t)`, then the label becomes
/// `alpha*y + beta_t*x1*x2 + eps > 0.5`.
pub fn inject_dynamic<R: Rng + ?Sized>(
    instance: Instance,
    label: bool,
    bern_prob: f64,
    causal_strength: f64,
    alpha_range: (f64, f64),
    noise_range: (f64, f64),
    rng: &mut R,
) -> InjectedInstance {
    let eps = rng.random_range(noise_range.0..noise_range.1);
    let x = rng.random_bool(bern_prob);
    let alpha = rng.random_range(alpha_range.0..alpha_range.1);
    let y = if label { 1.0 } else { 0.0 };
    let xx = if x { 1.0 } else { 0.0 };
    let y_tilde = alpha * y + causal_strength * xx * xx + eps;
    InjectedInstance {
        base: instance,
        x1_prime: x,
        x2_prime: x,
        new_label: y_tilde > 0.5,
    }
}

fn truth_embeddings(cfg: &SynthConfig, num_features: usize) -> Result<Vec<Vec<f64>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let sd = 1.0 / libm::sqrt(cfg.embed_dim_true as f64);
    let normal = Normal::new(0.0, sd).map_err(|e| Error::Config(e.to_string()))?;
    Ok((0..num_features)
        .map(|_| {
            (0..cfg.embed_dim_true)
                .map(|_| normal.sample(&mut rng))
                .collect()
        })
        .collect())
}

fn env_rng(seed: u64, env: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(env as u64 + 1);
    rng
}

fn draw_base<R: Rng + ?Sized>(
    schema: &FeatureSchema,
    truth: &GroundTruth,
    rng: &mut R,
) -> (Instance, bool) {
    let features = schema
        .cardinalities()
        .iter()
        .enumerate()
        .map(|(field, &c)| Feature::new(field, rng.random_range(0..c)))
        .collect();
    let mut inst = Instance {
        features,
        label: false,
    };
    let p = math::sigmoid(truth.logit(&inst));
    inst.label = rng.random_bool(p);
    let label = inst.label;
    (inst, label)
}

/// Generated environments, their schema and the ground-truth record.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub schema: FeatureSchema,
    pub envs: Vec<EnvironmentDataset>,
    /// Labels drawn by the base generator before injection, per environment
    /// and instance.
    pub base_labels: Vec<Vec<bool>>,
    pub truth: GroundTruth,
}

/// Stable base data: identical generation law in every environment.
pub fn gen_stable_base(cfg: &SynthConfig) -> Result<SyntheticDataset> {
    generate(SynthKind::Stable, cfg)
}

/// Generates a full dataset of the given kind.
pub fn generate(kind: SynthKind, cfg: &SynthConfig) -> Result<SyntheticDataset> {
    cfg.validate(kind)?;
    let base_schema = cfg.base_schema()?;
    let truth = GroundTruth {
        kind,
        base_fields: cfg.base_fields.clone(),
        embeddings: truth_embeddings(cfg, base_schema.num_features())?,
        stable_pairs: cfg.stable_pairs.clone(),
        flip_probs: if kind == SynthKind::Spurious {
            cfg.flip_probs.clone()
        } else {
            Vec::new()
        },
        causal_strengths: if kind == SynthKind::Dynamic {
            cfg.causal_strengths.clone()
        } else {
            Vec::new()
        },
        bern_probs: if kind == SynthKind::Dynamic {
            cfg.bern_probs.clone()
        } else {
            Vec::new()
        },
        seed: cfg.seed,
    };
    let m = base_schema.num_fields();
    let schema = match kind {
        SynthKind::Stable => base_schema.clone(),
        _ => base_schema.with_appended(&[(INJECTED_FIELDS[0], 2), (INJECTED_FIELDS[1], 2)])?,
    };
    let mut envs = Vec::with_capacity(cfg.num_envs);
    let mut base_labels = Vec::with_capacity(cfg.num_envs);
    for t in 0..cfg.num_envs {
        let mut rng = env_rng(cfg.seed, t);
        let mut labels = Vec::with_capacity(cfg.instances_per_env);
        let instances = (0..cfg.instances_per_env)
            .map(|_| {
                let (inst, y) = draw_base(&base_schema, &truth, &mut rng);
                labels.push(y);
                match kind {
                    SynthKind::Stable => inst,
                    SynthKind::Spurious => {
                        inject_spurious(inst, y, cfg.flip_probs[t], &mut rng).into_instance(m)
                    }
                    SynthKind::Dynamic => inject_dynamic(
                        inst,
                        y,
                        cfg.bern_probs[t],
                        cfg.causal_strengths[t],
                        cfg.alpha_range,
                        cfg.noise_range,
                        &mut rng,
                    )
                    .into_instance(m),
                }
            })
            .collect();
        envs.push(EnvironmentDataset::new(EnvId(t as u32), instances)?);
        base_labels.push(labels);
    }
    Ok(SyntheticDataset {
        schema,
        envs,
        base_labels,
        truth,
    })
}
