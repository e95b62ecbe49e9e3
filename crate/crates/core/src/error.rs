use thiserror::Error;

/// Errors raised by library operations. Validation problems on a job spec are
/// not errors; they come back as data from [`crate::model::validate_job`].
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("layout syntax error at byte {offset}: {message}")]
    LayoutSyntax { offset: usize, message: String },
    #[error("layout arity error: expected {expected} stages, found {actual}")]
    LayoutArity { expected: usize, actual: usize },
    #[error("non-finite router logit at token {token}, expert {expert}")]
    NonFiniteLogit { token: usize, expert: usize },
    #[error("infeasible: {0}")]
    Infeasible(String),
    #[error("out of pages: need {needed}, {free} free")]
    OutOfPages { needed: usize, free: usize },
    #[error("schedule deadlock at rank {rank}")]
    Deadlock { rank: usize },
    #[error("overlapping fragments at flat offset {0}")]
    OverlappingFragments(usize),
    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidArgument(msg.into()))
}

impl Error {
    /// Stable snake_case identifier for diagnostics and FFI error mapping.
    pub fn code(&self) -> &'static str {
        match self {
            Error::InvalidArgument(_) => "invalid_argument",
            Error::LayoutSyntax { .. } => "layout_syntax",
            Error::LayoutArity { .. } => "layout_arity",
            Error::NonFiniteLogit { .. } => "non_finite_logit",
            Error::Infeasible(_) => "infeasible",
            Error::OutOfPages { .. } => "out_of_pages",
            Error::Deadlock { .. } => "deadlock",
            Error::OverlappingFragments(_) => "overlapping_fragments",
            Error::Parse(_) => "parse",
        }
    }
}
