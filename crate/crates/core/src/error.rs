use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("GQA coupling violated: {0}")]
    Gqa(String),
    #[error("token out of range: {0}")]
    Token(String),
    #[error("sequence length {len} exceeds maximum {max}")]
    SeqTooLong { len: usize, max: usize },
    #[error("degenerate anchors: b = {b} is not above a = {a}")]
    DegenerateAnchors { a: f64, b: f64 },
    #[error("oracle budget exhausted after {0} evaluations")]
    BudgetExhausted(usize),
    #[error("infeasible search problem: {0}")]
    Infeasible(String),
    #[error("degenerate signal: {0}")]
    Degenerate(String),
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors caused by bad inputs rather than failures during a run.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::Shape(_) | Error::Gqa(_) | Error::Format(_) | Error::Json(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
