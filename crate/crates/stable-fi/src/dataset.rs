//! Dataset directories: `schema.json` plus one `env_<t>.txt` per period.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use stable_fi_core::data::{split_chronological, DataSplits};
use stable_fi_core::{EnvId, EnvironmentDataset, FeatureSchema};

use crate::error::{Error, Result};
use crate::fsutil::write_atomic;

pub const SCHEMA_FILE: &str = "schema.json";
pub const TRUTH_FILE: &str = "truth.json";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SchemaFile {
    fields: Vec<FieldEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FieldEntry {
    name: String,
    cardinality: usize,
}

/// Compact JSON rendering of a schema; this is what gets hashed and what
/// `schema.json` contains when written by this crate.
pub fn canonical_schema_json(schema: &FeatureSchema) -> String {
    let file = SchemaFile {
        fields: schema
            .names()
            .iter()
            .zip(schema.cardinalities())
            .map(|(name, &cardinality)| FieldEntry {
                name: name.clone(),
                cardinality,
            })
            .collect(),
    };
    serde_json::to_string(&file).expect("schema serialization cannot fail")
}

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn hex16(h: u64) -> String {
    format!("{h:016x}")
}

/// FNV-1a of the canonical schema bytes as 16 lowercase hex digits.
pub fn schema_hash(schema: &FeatureSchema) -> String {
    hex16(fnv1a64(canonical_schema_json(schema).as_bytes()))
}

pub fn parse_schema(text: &str) -> std::result::Result<FeatureSchema, String> {
    let file: SchemaFile = serde_json::from_str(text).map_err(|e| e.to_string())?;
    let (names, cards): (Vec<_>, Vec<_>) = file
        .fields
        .into_iter()
        .map(|f| (f.name, f.cardinality))
        .unzip();
    FeatureSchema::new(names, cards).map_err(|e| e.to_string())
}

pub fn load_schema(path: &Path) -> Result<FeatureSchema> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_schema(&text).map_err(|msg| Error::Invalid(format!("{}: {msg}", path.display())))
}

pub fn env_file_name(env: EnvId) -> String {
    format!("env_{:03}.txt", env.0)
}

/// Parses `env_<digits>.txt`.
pub fn parse_env_file_name(name: &str) -> Option<EnvId> {
    let digits = name.strip_prefix("env_")?.strip_suffix(".txt")?;
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    digits.parse().ok().map(EnvId)
}

pub fn load_environment(path: &Path, schema: &FeatureSchema, env: EnvId) -> Result<EnvironmentDataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    EnvironmentDataset::parse(&text, schema, env).map_err(|source| Error::Data {
        path: path.to_path_buf(),
        source,
    })
}

/// Loads every environment file of a dataset directory, sorted by env id.
pub fn load_dataset(dir: &Path) -> Result<(FeatureSchema, Vec<EnvironmentDataset>)> {
    let schema = load_schema(&dir.join(SCHEMA_FILE))?;
    let mut files: Vec<(EnvId, PathBuf)> = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name();
        if let Some(env) = name.to_str().and_then(parse_env_file_name) {
            files.push((env, entry.path()));
        }
    }
    files.sort();
    if files.windows(2).any(|w| w[0].0 == w[1].0) {
        return Err(Error::Invalid(format!(
            "{}: duplicate environment ids",
            dir.display()
        )));
    }
    if files.is_empty() {
        return Err(Error::Invalid(format!(
            "{}: no env_<t>.txt files",
            dir.display()
        )));
    }
    let envs = files
        .iter()
        .map(|(env, path)| load_environment(path, &schema, *env))
        .collect::<Result<Vec<_>>>()?;
    Ok((schema, envs))
}

/// Chronological split sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct SplitCounts {
    pub train: usize,
    pub valid: usize,
    pub test: usize,
}

impl Default for SplitCounts {
    fn default() -> Self {
        Self {
            train: 5,
            valid: 2,
            test: 3,
        }
    }
}

/// Loads a dataset directory and splits it chronologically.
pub fn load_splits(dir: &Path, counts: SplitCounts) -> Result<DataSplits> {
    let (schema, envs) = load_dataset(dir)?;
    let ids: Vec<EnvId> = envs.iter().map(|e| e.env_id).collect();
    let plan = split_chronological(&ids, counts.train, counts.valid, counts.test)?;
    Ok(DataSplits::from_plan(schema, envs, &plan)?)
}

/// Writes `schema.json` and every environment file into `dir`.
pub fn write_dataset(dir: &Path, schema: &FeatureSchema, envs: &[EnvironmentDataset]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_atomic(&dir.join(SCHEMA_FILE), canonical_schema_json(schema).as_bytes())?;
    for env in envs {
        write_atomic(&dir.join(env_file_name(env.env_id)), env.to_text().as_bytes())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn env_file_names() {
        assert_eq!(env_file_name(EnvId(3)), "env_003.txt");
        assert_eq!(parse_env_file_name("env_003.txt"), Some(EnvId(3)));
        assert_eq!(parse_env_file_name("env_1234.txt"), Some(EnvId(1234)));
        assert_eq!(parse_env_file_name("env_.txt"), None);
        assert_eq!(parse_env_file_name("env_0x1.txt"), None);
        assert_eq!(parse_env_file_name("schema.json"), None);
    }

    #[test]
    fn schema_parsing() {
        let s = parse_schema(r#"{"fields": [{"name": "a", "cardinality": 3}, {"name": "b", "cardinality": 2}]}"#)
            .unwrap();
        assert_eq!(s.offsets(), &[0, 3]);
        assert_eq!(
            canonical_schema_json(&s),
            r#"{"fields":[{"name":"a","cardinality":3},{"name":"b","cardinality":2}]}"#
        );
        assert!(parse_schema(r#"{"fields": [{"name": "a", "cardinality": 4}]}"#)
            .unwrap_err()
            .contains("at least 2"));
        assert!(parse_schema(r#"{"fields": [{"name": "a", "cardinality": 0}, {"name": "b", "cardinality": 1}]}"#)
            .unwrap_err()
            .contains("field 0"));
        assert!(parse_schema(r#"{"fields": [{"name": "a"}]}"#).is_err());
        assert!(parse_schema("not json").is_err());
    }
}
