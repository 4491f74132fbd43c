//! Feature schema, sparse click instances and chronological environments.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use rand::Rng;

use crate::error::{Error, Result};

/// Index of a chronological period.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EnvId(pub u32);

impl fmt::Display for EnvId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

/// Field vocabulary: `M` fields, field `i` owning `cardinalities[i]`
/// consecutive global feature indices starting at `offsets[i]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureSchema {
    names: Vec<String>,
    cardinalities: Vec<usize>,
    offsets: Vec<usize>,
    num_features: usize,
}

impl FeatureSchema {
    pub fn new(names: Vec<String>, cardinalities: Vec<usize>) -> Result<Self> {
        if names.len() != cardinalities.len() {
            return Err(Error::Config(format!(
                "{} field names for {} cardinalities",
                names.len(),
                cardinalities.len()
            )));
        }
        if cardinalities.len() < 2 {
            return Err(Error::TooFewFields(cardinalities.len()));
        }
        if let Some(field) = cardinalities.iter().position(|&c| c == 0) {
            return Err(Error::ZeroCardinality { field });
        }
        let mut offsets = Vec::with_capacity(cardinalities.len());
        let mut total = 0;
        for &c in &cardinalities {
            offsets.push(total);
            total += c;
        }
        Ok(Self {
            names,
            cardinalities,
            offsets,
            num_features: total,
        })
    }

    /// Schema with generated field names `f0, f1, ...`.
    pub fn from_cardinalities(cardinalities: &[usize]) -> Result<Self> {
        let names = (0..cardinalities.len()).map(|i| format!("f{i}")).collect();
        Self::new(names, cardinalities.to_vec())
    }

    pub fn num_fields(&self) -> usize {
        self.cardinalities.len()
    }

    pub fn num_features(&self) -> usize {
        self.num_features
    }

    pub fn cardinalities(&self) -> &[usize] {
        &self.cardinalities
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Number of unordered field pairs `M(M-1)/2`.
    pub fn num_field_pairs(&self) -> usize {
        let m = self.num_fields();
        m * (m - 1) / 2
    }

    #[inline]
    pub fn global_index(&self, f: Feature) -> usize {
        self.offsets[f.field as usize] + f.index as usize
    }

    /// Schema extended with extra fields appended after the existing ones.
    pub fn with_appended(&self, fields: &[(&str, usize)]) -> Result<Self> {
        let mut names = self.names.clone();
        let mut cards = self.cardinalities.clone();
        for (name, card) in fields {
            names.push((*name).to_string());
            cards.push(*card);
        }
        Self::new(names, cards)
    }
}

/// One active feature: `index` is relative to its field.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Feature {
    pub field: u32,
    pub index: u32,
}

impl Feature {
    pub fn new(field: usize, index: usize) -> Self {
        Self {
            field: field as u32,
            index: index as u32,
        }
    }
}

/// A multi-hot sample with a binary click label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Instance {
    pub features: Vec<Feature>,
    pub label: bool,
}

impl Instance {
    /// Builds an instance, checking indices against the schema and rejecting
    /// duplicate `(field, feature)` pairs.
    pub fn new(features: Vec<Feature>, label: bool, schema: &FeatureSchema) -> Result<Self> {
        for (k, f) in features.iter().enumerate() {
            let field = f.field as usize;
            let feature = f.index as usize;
            let Some(&cardinality) = schema.cardinalities.get(field) else {
                return Err(Error::FieldOutOfRange {
                    field,
                    num_fields: schema.num_fields(),
                });
            };
            if feature >= cardinality {
                return Err(Error::FeatureOutOfRange {
                    field,
                    feature,
                    cardinality,
                });
            }
            if features[..k].contains(f) {
                return Err(Error::DuplicateFeature { field, feature });
            }
        }
        Ok(Self { features, label })
    }

    pub fn label_f64(&self) -> f64 {
        if self.label {
            1.0
        } else {
            0.0
        }
    }

    /// Renders the instance in the environment-file line format.
    pub fn to_line(&self) -> String {
        let mut s = String::with_capacity(2 + self.features.len() * 6);
        s.push(if self.label { '1' } else { '0' });
        for f in &self.features {
            s.push_str(&format!(" {}:{}", f.field, f.index));
        }
        s
    }
}

/// Parses `<label> <field>:<feature> [<field>:<feature> ...]`.
pub fn parse_instance(line: &str, schema: &FeatureSchema) -> Result<Instance> {
    let mut tokens = line.split_ascii_whitespace();
    let label = match tokens.next() {
        Some("1") => true,
        Some("0") => false,
        Some(other) => return Err(Error::BadLabel(other.to_string())),
        None => return Err(Error::BadLabel(String::new())),
    };
    let mut features = Vec::new();
    for tok in tokens {
        let (field, feature) = tok
            .split_once(':')
            .ok_or_else(|| Error::BadToken(tok.to_string()))?;
        let field: u32 = field.parse().map_err(|_| Error::BadToken(tok.to_string()))?;
        let feature: u32 = feature
            .parse()
            .map_err(|_| Error::BadToken(tok.to_string()))?;
        features.push(Feature {
            field,
            index: feature,
        });
    }
    Instance::new(features, label, schema)
}

/// All instances collected in one period, in file order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EnvironmentDataset {
    pub env_id: EnvId,
    pub instances: Vec<Instance>,
}

impl EnvironmentDataset {
    pub fn new(env_id: EnvId, instances: Vec<Instance>) -> Result<Self> {
        if instances.is_empty() {
            return Err(Error::EmptyEnvironment(env_id));
        }
        Ok(Self { env_id, instances })
    }

    /// Parses the body of an environment file. Line numbers in errors are
    /// 1-based.
    pub fn parse(text: &str, schema: &FeatureSchema, env_id: EnvId) -> Result<Self> {
        let instances = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| parse_instance(l, schema).map_err(|e| e.at_line(i + 1)))
            .collect::<Result<Vec<_>>>()?;
        Self::new(env_id, instances)
    }

    /// Renders the dataset in the environment-file format, one line per
    /// instance with a trailing newline.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for inst in &self.instances {
            s.push_str(&inst.to_line());
            s.push('\n');
        }
        s
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn refs(&self) -> Vec<&Instance> {
        self.instances.iter().collect()
    }
}

/// Disjoint, chronologically ordered train / validation / test env ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitPlan {
    pub train: Vec<EnvId>,
    pub valid: Vec<EnvId>,
    pub test: Vec<EnvId>,
}

/// Assigns the first `n_train` ids to training, the next `n_valid` to
/// validation and the last `n_test` to testing.
pub fn split_chronological(
    env_ids: &[EnvId],
    n_train: usize,
    n_valid: usize,
    n_test: usize,
) -> Result<SplitPlan> {
    if n_train + n_valid + n_test != env_ids.len() {
        return Err(Error::InvalidSplit(format!(
            "{n_train}+{n_valid}+{n_test} != {} environments",
            env_ids.len()
        )));
    }
    if n_train < 2 {
        return Err(Error::InvalidSplit(format!(
            "need at least 2 training environments, got {n_train}"
        )));
    }
    if env_ids.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidSplit(
            "environment ids must be strictly increasing".to_string(),
        ));
    }
    Ok(SplitPlan {
        train: env_ids[..n_train].to_vec(),
        valid: env_ids[n_train..n_train + n_valid].to_vec(),
        test: env_ids[n_train + n_valid..].to_vec(),
    })
}

/// Training, validation and test environments after applying a [`SplitPlan`].
#[derive(Debug, Clone)]
pub struct DataSplits {
    pub schema: FeatureSchema,
    pub train: Vec<EnvironmentDataset>,
    pub valid: Vec<EnvironmentDataset>,
    pub test: Vec<EnvironmentDataset>,
}

impl DataSplits {
    /// Partitions `envs` (sorted by id) according to `plan`.
    pub fn from_plan(
        schema: FeatureSchema,
        envs: Vec<EnvironmentDataset>,
        plan: &SplitPlan,
    ) -> Result<Self> {
        let mut by_id: BTreeMap<EnvId, EnvironmentDataset> =
            envs.into_iter().map(|e| (e.env_id, e)).collect();
        let mut take = |ids: &[EnvId]| -> Result<Vec<EnvironmentDataset>> {
            ids.iter()
                .map(|id| by_id.remove(id).ok_or(Error::UnknownEnv(*id)))
                .collect()
        };
        let train = take(&plan.train)?;
        let valid = take(&plan.valid)?;
        let test = take(&plan.test)?;
        Ok(Self {
            schema,
            train,
            valid,
            test,
        })
    }

    pub fn train_ids(&self) -> Vec<EnvId> {
        self.train.iter().map(|e| e.env_id).collect()
    }
}

/// Per-environment mini-batch slices, ordered by env id.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch<'a> {
    pub slices: Vec<(EnvId, Vec<&'a Instance>)>,
}

impl<'a> Batch<'a> {
    pub fn slice(&self, env: EnvId) -> Option<&[&'a Instance]> {
        self.slices
            .iter()
            .find(|(id, _)| *id == env)
            .map(|(_, s)| s.as_slice())
    }

    pub fn len(&self) -> usize {
        self.slices.iter().map(|(_, s)| s.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All instances tagged with their environment, in env order.
    pub fn tagged(&self) -> impl Iterator<Item = (EnvId, &'a Instance)> + '_ {
        self.slices
            .iter()
            .flat_map(|(id, s)| s.iter().map(move |inst| (*id, *inst)))
    }

    pub fn pooled(&self) -> Vec<&'a Instance> {
        self.tagged().map(|(_, i)| i).collect()
    }
}

/// Draws `per_env_count` instances uniformly with replacement from every
/// training environment.
pub fn stratified_batch<'a, R: Rng + ?Sized>(
    train_envs: &'a [EnvironmentDataset],
    per_env_count: usize,
    rng: &mut R,
) -> Result<Batch<'a>> {
    if per_env_count == 0 {
        return Err(Error::Config("per_env_count must be >= 1".to_string()));
    }
    let mut slices = Vec::with_capacity(train_envs.len());
    for env in train_envs {
        if env.instances.is_empty() {
            return Err(Error::EmptyEnvironment(env.env_id));
        }
        let n = env.instances.len();
        let slice = (0..per_env_count)
            .map(|_| &env.instances[rng.random_range(0..n)])
            .collect();
        slices.push((env.env_id, slice));
    }
    Ok(Batch { slices })
}
