use alloc::string::String;

use crate::data::EnvId;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("schema must have at least 2 fields, got {0}")]
    TooFewFields(usize),
    #[error("field {field} has zero cardinality")]
    ZeroCardinality { field: usize },
    #[error("bad label token `{0}` (expected 0 or 1)")]
    BadLabel(String),
    #[error("malformed feature token `{0}` (expected <field>:<feature>)")]
    BadToken(String),
    #[error("field index {field} out of range for {num_fields} fields")]
    FieldOutOfRange { field: usize, num_fields: usize },
    #[error("feature index {feature} >= cardinality {cardinality} of field {field}")]
    FeatureOutOfRange {
        field: usize,
        feature: usize,
        cardinality: usize,
    },
    #[error("duplicate feature {field}:{feature}")]
    DuplicateFeature { field: usize, feature: usize },
    #[error("line {line}: {source}")]
    Line {
        line: usize,
        #[source]
        source: alloc::boxed::Box<Error>,
    },
    #[error("environment {0} is empty")]
    EmptyEnvironment(EnvId),
    #[error("invalid split: {0}")]
    InvalidSplit(String),
    #[error("unknown environment {0}")]
    UnknownEnv(EnvId),
    #[error("parameter group {group} is not part of a {kind} model")]
    GroupMismatch {
        group: String,
        kind: &'static str,
    },
    #[error("gradient shape does not match parameters: {0}")]
    ShapeMismatch(String),
    #[error("empty slice")]
    EmptySlice,
    #[error("at least {need} training environments required, got {got}")]
    TooFewEnvs { need: usize, got: usize },
    #[error("AUC undefined: labels contain a single class")]
    SingleClass,
    #[error("model schema does not match dataset schema")]
    SchemaMismatch,
    #[error("invalid configuration: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn at_line(self, line: usize) -> Self {
        Error::Line {
            line,
            source: alloc::boxed::Box::new(self),
        }
    }
}
