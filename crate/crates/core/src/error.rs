use thiserror::Error;

/// Errors produced anywhere in the library.
///
/// The CLI maps [`SemiseError::Config`] to exit code 2 and everything else to 1.
#[derive(Debug, Error)]
pub enum SemiseError {
    #[error("dimension error: {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("degenerate input in {context}: row {index} has zero norm")]
    DegenerateInput { context: &'static str, index: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("undefined correlation: {0}")]
    UndefinedCorrelation(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, SemiseError>;

impl SemiseError {
    pub fn dimension(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        SemiseError::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub fn degenerate(context: &'static str, index: usize) -> Self {
        SemiseError::DegenerateInput { context, index }
    }

    /// True for errors that stem from invalid user configuration.
    pub fn is_config(&self) -> bool {
        matches!(self, SemiseError::Config(_))
    }
}
