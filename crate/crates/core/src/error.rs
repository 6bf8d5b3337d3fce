//! Error types shared across the crate.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// A dataset invariant violation found while loading or validating.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum ValidationError {
    #[error("cluster {cluster_id}: {matrix} row {row} out of range (matrix has {rows} rows)")]
    IndexOutOfRange {
        cluster_id: String,
        matrix: &'static str,
        row: usize,
        rows: usize,
    },
    #[error("cluster {cluster_id}: image row {row} is already referenced by cluster {other}")]
    DuplicateRow {
        cluster_id: String,
        row: usize,
        other: String,
    },
    #[error("cluster {cluster_id}: image row {row} is referenced as both real and fake")]
    RealFakeOverlap { cluster_id: String, row: usize },
    #[error("cluster {cluster_id}: duplicate {matrix} row {row} within the cluster")]
    DuplicateWithinCluster {
        cluster_id: String,
        matrix: &'static str,
        row: usize,
    },
    #[error("cluster {cluster_id}: {fakes} fake rows but {captions} caption rows")]
    PairingMismatch {
        cluster_id: String,
        fakes: usize,
        captions: usize,
    },
    #[error("cluster {cluster_id}: no fake rows")]
    EmptyCluster { cluster_id: String },
    #[error("{matrix} row {row} column {col} is not finite")]
    NonFinite {
        matrix: &'static str,
        row: usize,
        col: usize,
    },
    #[error("{matrix} row {row} has norm {norm} but dataset is flagged normalized")]
    NotNormalized {
        matrix: &'static str,
        row: usize,
        norm: f64,
    },
    #[error("{file}: {bytes} bytes is not a whole number of rows of dim {dim}")]
    SizeMismatch { file: String, bytes: u64, dim: usize },
    #[error("manifest: {0}")]
    Manifest(String),
}

impl ValidationError {
    /// Stable machine-readable category.
    pub fn category(&self) -> &'static str {
        match self {
            Self::IndexOutOfRange { .. } => "index_out_of_range",
            Self::DuplicateRow { .. } => "duplicate_row",
            Self::RealFakeOverlap { .. } => "real_fake_overlap",
            Self::DuplicateWithinCluster { .. } => "duplicate_within_cluster",
            Self::PairingMismatch { .. } => "pairing_mismatch",
            Self::EmptyCluster { .. } => "empty_cluster",
            Self::NonFinite { .. } => "non_finite",
            Self::NotNormalized { .. } => "not_normalized",
            Self::SizeMismatch { .. } => "size_mismatch",
            Self::Manifest(_) => "manifest",
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("dataset: {0}")]
    Validation(#[from] ValidationError),
    #[error("io: {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("dataset: unknown split `{0}`")]
    UnknownSplit(String),
    #[error("dataset: split `{0}` has no clusters")]
    EmptySplit(String),
    #[error("dataset: row {row} of {matrix} has near-zero norm")]
    ZeroNorm { matrix: &'static str, row: usize },
    #[error("dataset: {0} is not L2-normalized")]
    NotNormalized(&'static str),
    #[error("synth: {0}")]
    Synth(String),
    #[error("supcon: {0}")]
    Contrastive(String),
    #[error("disentangle: {0}")]
    Train(String),
    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: String, got: String },
    #[error("projection: output row {0} is degenerate")]
    DegenerateProjection(usize),
    #[error("probe: no convergence after {iterations} iterations (gradient norm {grad_norm:e})")]
    NoConvergence { iterations: usize, grad_norm: f64 },
    #[error("probe: {0}")]
    Probe(String),
    #[error("metrics: {0}")]
    Metrics(String),
    #[error("tsne: {0}")]
    Tsne(String),
    #[error("{what}: bad file format: {reason}")]
    Format { what: &'static str, reason: String },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(expected: impl ToString, got: impl ToString) -> Self {
        Self::Shape {
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }
}
