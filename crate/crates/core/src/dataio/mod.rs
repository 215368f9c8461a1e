//! Dataset contract: component layouts, binary activation tensors and the
//! JSON manifest that ties samples to tensors.

mod layout;
mod manifest;
pub mod tensor;

use std::path::{Path, PathBuf};

pub use layout::{
    ComponentId, CovarianceAxis, Layout, LayoutComponent, Role, CANONICAL_BRANCHES,
    CANONICAL_GLOBALS,
};
pub use manifest::{
    load_manifest, manifest_json, parse_manifest, read_activation, DatasetManifest, SampleRecord,
    TensorEntry, TensorRef, FORMAT_VERSION,
};
pub use tensor::{write_activation, ActivationMatrix};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("file not found: {0}")]
    MissingFile(PathBuf),
    #[error("schema violation: {0}")]
    SchemaViolation(String),
    #[error("tensor for {sample}/{component} points at missing file {path}")]
    DanglingTensorRef {
        sample: String,
        component: String,
        path: PathBuf,
    },
    #[error("duplicate sample id `{0}`")]
    DuplicateSampleId(String),
    #[error("duplicate component {0} in layout")]
    DuplicateComponent(String),
    #[error("no tensor for {sample}/{component}")]
    NotFound { sample: String, component: String },
    #[error("corrupt tensor: {0}")]
    CorruptHeader(String),
    #[error("non-finite value at flat index {index}")]
    NonFiniteValue { index: usize },
    #[error("matrix must have at least one row and one column")]
    EmptyMatrix,
    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: usize, actual: usize },
    #[error("i/o error on {path}: {source}")]
    IoFailure {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl DataError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        DataError::IoFailure {
            path: path.to_path_buf(),
            source,
        }
    }
}
