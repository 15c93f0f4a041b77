use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum Error {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("no primitive root of unity of order {order} modulo {p}")]
    NoRootOfUnity { p: u64, order: u64 },

    #[error("modulus mismatch: {0}")]
    ModulusMismatch(String),

    #[error("moduli {a} and {b} are not coprime")]
    NotCoprime { a: u64, b: u64 },

    #[error("rotation amount {k} out of range for {half} columns")]
    RotationOutOfRange { k: i64, half: usize },

    /// The plaintext modulus is too small for the values produced.
    #[error("magnitude bound {bound} exceeds capacity {capacity}")]
    MagnitudeOverflow { bound: u128, capacity: u128 },

    /// The network is too deep for the configured parameters.
    #[error("multiplicative depth {depth} exceeds budget {max_depth}")]
    DepthExceeded { depth: u32, max_depth: u32 },

    #[error("capacity exceeded: {0}")]
    Capacity(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("representation mismatch: expected {expected}, found {found}")]
    RepresentationMismatch { expected: String, found: String },

    #[error("active slot collision at slot {slot}")]
    SlotCollision { slot: usize },

    #[error("duplicate target slot {0}")]
    DuplicateTarget(usize),

    #[error("dirty slots would be read by {0}")]
    DirtySlots(String),

    #[error("permutation mismatch: {0}")]
    PermutationMismatch(String),

    #[error("layer {layer} overflows the plaintext modulus: bound {bound} > {capacity}; {suggestion}")]
    LayerOverflow {
        layer: usize,
        bound: u128,
        capacity: u128,
        suggestion: String,
    },

    #[error("incompatible strategy: {0}")]
    IncompatibleStrategy(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
