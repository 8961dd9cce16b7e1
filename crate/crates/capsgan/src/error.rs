use std::io;
use std::path::PathBuf;

use crate::checkpoint::CheckpointError;
use crate::idx::IdxError;
use crate::pgm::PgmError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] capsgan_core::Error),

    #[error(transparent)]
    Idx(#[from] IdxError),

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    #[error(transparent)]
    Pgm(#[from] PgmError),

    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },

    #[error("{0}")]
    Usage(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Process exit status for this failure.
    pub fn exit_code(&self) -> i32 {
        use capsgan_core::Error as E;
        match self {
            Error::Usage(_) | Error::Core(E::Usage(_) | E::Dimension { .. }) => 2,
            Error::Idx(_) | Error::Pgm(_) | Error::Core(E::Data(_)) => 3,
            Error::Checkpoint(_) => 4,
            Error::Core(E::Numerical(_)) => 5,
            Error::Core(E::AccuracyFloor { .. }) => 6,
            Error::Io { .. } => 1,
        }
    }
}
