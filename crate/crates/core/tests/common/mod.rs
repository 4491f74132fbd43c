#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stable_fi_core::data::Batch;
use stable_fi_core::model::init_model;
use stable_fi_core::{EnvId, Feature, FeatureSchema, Instance, ModelKind, ModelState};

pub const KINDS: [ModelKind; 4] = [
    ModelKind::Fm,
    ModelKind::FieldFm,
    ModelKind::Dil,
    ModelKind::LightDil,
];

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Multi-hot instance: each field gets 0..=max_active distinct features.
pub fn random_instance(schema: &FeatureSchema, max_active: usize, rng: &mut impl Rng) -> Instance {
    let mut features = Vec::new();
    for (field, &card) in schema.cardinalities().iter().enumerate() {
        let k = rng.random_range(0..=max_active.min(card));
        let mut picked: Vec<usize> = (0..card).collect();
        for i in 0..k {
            let j = rng.random_range(i..card);
            picked.swap(i, j);
        }
        for &idx in &picked[..k] {
            features.push(Feature::new(field, idx));
        }
    }
    Instance::new(features, rng.random_bool(0.5), schema).unwrap()
}

pub fn one_hot_instance(schema: &FeatureSchema, rng: &mut impl Rng) -> Instance {
    let features = schema
        .cardinalities()
        .iter()
        .enumerate()
        .map(|(field, &card)| Feature::new(field, rng.random_range(0..card)))
        .collect();
    Instance::new(features, rng.random_bool(0.5), schema).unwrap()
}

/// A model whose every parameter group holds random non-trivial values, so
/// that no term of the logit vanishes.
pub fn random_model(
    kind: ModelKind,
    schema: &FeatureSchema,
    dim: usize,
    envs: &[EnvId],
    rng: &mut impl Rng,
) -> ModelState {
    let mut model = init_model(kind, schema, dim, 0.5, rng.random(), envs).unwrap();
    for g in model.groups() {
        for x in model.group_mut(g).unwrap() {
            *x = rng.random_range(-0.8..0.8);
        }
    }
    model
}

pub fn env_ids(n: u32) -> Vec<EnvId> {
    (0..n).map(EnvId).collect()
}

/// Batch with one slice per environment.
pub fn batch_of<'a>(slices: &'a [(EnvId, Vec<Instance>)]) -> Batch<'a> {
    Batch {
        slices: slices
            .iter()
            .map(|(t, v)| (*t, v.iter().collect()))
            .collect(),
    }
}

pub fn assert_close(a: f64, b: f64, rel: f64, abs: f64, what: &str) {
    let tol = abs.max(rel * a.abs().max(b.abs()));
    assert!((a - b).abs() <= tol, "{what}: {a} vs {b} (tol {tol})");
}
