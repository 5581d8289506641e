//! Crate-wide error type.

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("unknown system id `{0}`")]
    UnknownSystem(String),

    #[error("missing parameter `{name}` for system `{system}`")]
    MissingParam { system: String, name: String },

    #[error("non-finite input: {0}")]
    NonFinite(String),

    #[error("state blow-up at step {step}: |x| = {magnitude:.3e} exceeds bound {bound:.3e}")]
    BlowUp {
        step: usize,
        magnitude: f64,
        bound: f64,
    },

    #[error("dimension error: {0}")]
    Dim(String),

    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("empty loss mask: no scored positions")]
    EmptyLossMask,

    #[error("invalid argument: {0}")]
    InvalidArg(String),

    #[error("checksum mismatch: manifest has {expected}, payload hashes to {actual}")]
    Checksum { expected: String, actual: String },

    #[error("unsupported format version {found} (supported: {supported})")]
    Version { found: u32, supported: u32 },

    #[error("malformed file: {0}")]
    Format(String),

    #[error("non-finite activation in layer {layer}")]
    NonFiniteActivation { layer: usize },

    #[error("non-finite gradient for tensor `{0}`")]
    NonFiniteGrad(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
