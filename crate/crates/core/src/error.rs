use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("duplicate dataset id `{0}`")]
    DuplicateDataset(String),

    #[error("taxonomy `{0}` has no classes")]
    EmptyTaxonomy(String),

    #[error("taxonomy `{dataset}` lists class `{class}` twice")]
    DuplicateClass { dataset: String, class: String },

    #[error("no taxonomies given")]
    NoTaxonomies,

    #[error("unknown dataset `{0}`")]
    UnknownDataset(String),

    #[error("unknown class `{0}`")]
    UnknownClass(String),

    #[error("label {value} at pixel {pixel} is out of range for {num_classes} classes")]
    LabelOutOfRange {
        pixel: usize,
        value: u32,
        num_classes: usize,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("empty loss: no counted terms")]
    EmptyLoss,

    #[error("label outside dataset space: unified class {class} at pixel {pixel}")]
    LabelOutsideSpace { pixel: usize, class: usize },

    #[error("degenerate norm in cosine scores")]
    DegenerateNorm,

    #[error("non-finite gradient in block `{0}`")]
    NonFiniteGradient(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("no evaluable classes")]
    NoEvaluableClasses,

    #[error("empty projection")]
    EmptyProjection,

    #[error("empty dataset")]
    EmptyDataset,

    #[error("class-relational loss requires a multi-label table")]
    MissingTable,

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("malformed dump: {0}")]
    Dump(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }
}
