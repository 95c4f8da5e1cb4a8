use thiserror::Error;

pub type Shape = (usize, usize);

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DiffError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Shape,
        rhs: Shape,
    },
    #[error("non-finite value encountered in {op}")]
    NonFinite { op: &'static str },
    #[error("invalid argument to {op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },
    #[error("backward requires a 1x1 loss, got {0:?}")]
    NonScalarLoss(Shape),
    #[error("variable {0} does not belong to this graph")]
    UnknownVar(usize),
}

impl DiffError {
    pub(crate) fn shape(op: &'static str, lhs: Shape, rhs: Shape) -> Self {
        DiffError::Shape { op, lhs, rhs }
    }

    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        DiffError::InvalidArgument {
            op,
            msg: msg.into(),
        }
    }
}

pub type Result<T, E = DiffError> = std::result::Result<T, E>;
