use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// Shapes that do not fit the operation; raised before touching data.
    #[error("{op}: dimension error: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("usage error: {0}")]
    Usage(String),

    /// NaN or infinity reached a loss, gradient or parameter.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// Malformed in-memory data (unnormalized probability rows, bad labels, ...).
    #[error("data error: {0}")]
    Data(String),

    #[error("scorer accuracy {achieved:.4} below floor {floor:.4}")]
    AccuracyFloor { achieved: f32, floor: f32 },
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension { op, detail: detail.into() }
    }
}
