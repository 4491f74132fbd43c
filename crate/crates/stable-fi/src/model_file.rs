//! JSON model files.
//!
//! ```json
//! {"kind": "lightdil", "dim": 8, "schema_hash": "…", "embeddings": [[…]],
//!  "alpha_s": [[…]], "alpha_t": {"0": [[…]]}, "seed": 0}
//! ```
//!
//! For dil, `embeddings` holds `v^s` and `env_embeddings` the `v^t` tables.
//! Field weights are written as full `M x M` matrices with zeros on and
//! below the diagonal.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use stable_fi_core::model::{
    DisentangledEmbeddings, EmbeddingTable, FieldWeightSet, PairWeights, Params,
};
use stable_fi_core::{EnvId, FeatureSchema, ModelKind, ModelState};

use crate::dataset::schema_hash;
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;

type Matrix = Vec<Vec<f64>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub kind: String,
    pub dim: usize,
    pub schema_hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embeddings: Option<Matrix>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub env_embeddings: Option<BTreeMap<u32, Matrix>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha_s: Option<Matrix>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha_t: Option<BTreeMap<u32, Matrix>>,
    pub seed: u64,
}

impl ModelFile {
    pub fn from_model(model: &ModelState) -> Self {
        let mut file = ModelFile {
            kind: model.kind().as_str().to_string(),
            dim: model.dim(),
            schema_hash: schema_hash(model.schema()),
            embeddings: None,
            env_embeddings: None,
            alpha_s: None,
            alpha_t: None,
            seed: model.seed(),
        };
        match model.params() {
            Params::Fm { embeddings } => file.embeddings = Some(embeddings.to_rows()),
            Params::FieldFm {
                embeddings,
                weights,
            } => {
                file.embeddings = Some(embeddings.to_rows());
                file.alpha_s = Some(weights.to_matrix());
            }
            Params::Dil(d) => {
                file.embeddings = Some(d.shared_invariant.to_rows());
                file.env_embeddings = Some(
                    d.per_env
                        .iter()
                        .map(|(t, table)| (t.0, table.to_rows()))
                        .collect(),
                );
            }
            Params::LightDil {
                embeddings,
                weights,
            } => {
                file.embeddings = Some(embeddings.to_rows());
                file.alpha_s = Some(weights.invariant_weights.to_matrix());
                file.alpha_t = Some(
                    weights
                        .per_env_weights
                        .iter()
                        .map(|(t, w)| (t.0, w.to_matrix()))
                        .collect(),
                );
            }
        }
        file
    }

    /// Rebuilds the model against `schema`, refusing a schema-hash mismatch.
    pub fn into_model(self, schema: &FeatureSchema) -> Result<ModelState> {
        let dataset_hash = schema_hash(schema);
        if self.schema_hash != dataset_hash {
            return Err(Error::SchemaHash {
                model: self.schema_hash,
                dataset: dataset_hash,
            });
        }
        let kind = ModelKind::parse(&self.kind)
            .ok_or_else(|| Error::Invalid(format!("unknown model kind `{}`", self.kind)))?;
        let missing = |what: &str| Error::Invalid(format!("{} model file lacks `{what}`", self.kind));
        let table = |rows: &Matrix| -> Result<EmbeddingTable> {
            let t = EmbeddingTable::from_rows(rows)?;
            if t.dim() != self.dim {
                return Err(Error::Invalid(format!(
                    "embedding width {} does not match dim {}",
                    t.dim(),
                    self.dim
                )));
            }
            Ok(t)
        };
        let embeddings = self.embeddings.as_ref().ok_or_else(|| missing("embeddings"))?;
        let params = match kind {
            ModelKind::Fm => Params::Fm {
                embeddings: table(embeddings)?,
            },
            ModelKind::FieldFm => Params::FieldFm {
                embeddings: table(embeddings)?,
                weights: PairWeights::from_matrix(
                    self.alpha_s.as_ref().ok_or_else(|| missing("alpha_s"))?,
                )?,
            },
            ModelKind::Dil => Params::Dil(DisentangledEmbeddings {
                shared_invariant: table(embeddings)?,
                per_env: self
                    .env_embeddings
                    .as_ref()
                    .ok_or_else(|| missing("env_embeddings"))?
                    .iter()
                    .map(|(t, rows)| Ok((EnvId(*t), table(rows)?)))
                    .collect::<Result<_>>()?,
            }),
            ModelKind::LightDil => Params::LightDil {
                embeddings: table(embeddings)?,
                weights: FieldWeightSet {
                    invariant_weights: PairWeights::from_matrix(
                        self.alpha_s.as_ref().ok_or_else(|| missing("alpha_s"))?,
                    )?,
                    per_env_weights: self
                        .alpha_t
                        .as_ref()
                        .ok_or_else(|| missing("alpha_t"))?
                        .iter()
                        .map(|(t, m)| Ok((EnvId(*t), PairWeights::from_matrix(m)?)))
                        .collect::<Result<_>>()?,
                },
            },
        };
        Ok(ModelState::from_parts(schema.clone(), params, self.seed)?)
    }
}

pub fn model_to_json(model: &ModelState) -> String {
    serde_json::to_string(&ModelFile::from_model(model)).expect("model serialization cannot fail")
}

pub fn save_model(path: &Path, model: &ModelState) -> Result<()> {
    write_atomic(path, model_to_json(model).as_bytes())
}

pub fn load_model_file(path: &Path) -> Result<(ModelFile, Vec<u8>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let file = serde_json::from_slice(&bytes).map_err(|e| Error::json(path, e))?;
    Ok((file, bytes))
}
