use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },
    #[error("backward: loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("parameter {0:?} has no gradient")]
    MissingGrad(String),
    #[error("discretize: step size must be positive, got {0}")]
    NonPositiveDelta(f64),
    #[error("state matrix entries must be strictly negative (entry {index} = {value})")]
    NonNegativeState { index: usize, value: f64 },
    #[error("mask ratio must lie in [0, 1), got {0}")]
    InvalidRatio(f64),
    #[error("mask pyramid is inconsistent between stage {fine} and stage {coarse}")]
    InconsistentPyramid { fine: usize, coarse: usize },
    #[error("{0}: no visible positions")]
    NothingVisible(&'static str),
    #[error("masked_mse: every voxel is visible, loss is undefined")]
    NothingMasked,
    #[error("{op}: extents {extents:?} not divisible by {divisor}")]
    Indivisible {
        op: &'static str,
        extents: [usize; 3],
        divisor: usize,
    },
    #[error("{op}: duplicate position {index}")]
    DuplicatePosition { op: &'static str, index: usize },
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            msg: msg.into(),
        }
    }
}
