use thiserror::Error;

use crate::clustering::ClusterError;
use crate::consistency::ConsistencyError;
use crate::constraints::ConstraintError;
use crate::index::IndexError;
use crate::manifest::ManifestError;
use crate::mofe::MofeError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Any failure surfaced by the pipeline stages.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error(transparent)]
    Constraint(#[from] ConstraintError),
    #[error(transparent)]
    Consistency(#[from] ConsistencyError),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error(transparent)]
    Mofe(#[from] MofeError),
    #[error("{0}")]
    Config(String),
}
