use thiserror::Error;

use crate::model::ModelParams;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("matrix is not positive semidefinite (jitter cap {cap:e} exceeded)")]
    NotPsd { cap: f64 },

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("invalid bag spec: {0}")]
    Spec(String),

    #[error("bag has no patches")]
    EmptyBag,

    #[error("classes {0} and {1} share weights and bias; the decision hyperplane is undefined")]
    DegenerateHead(usize, usize),

    #[error("cosine similarity undefined for a zero-norm vector")]
    CosineUndefined,

    #[error("label error: {0}")]
    Label(String),

    #[error("{0} is undefined for this input")]
    Undefined(&'static str),

    #[error("between-class scatter is zero; all class means coincide")]
    DegenerateScatter,

    #[error("no discordant pairs; McNemar statistic undefined")]
    NoDiscordance,

    #[error("contingency table is all zero")]
    DegenerateTable,

    #[error("pooled standard deviation is zero")]
    ZeroVariance,

    #[error("empty input")]
    Empty,

    #[error("training diverged at epoch {epoch}")]
    Diverged {
        epoch: usize,
        last_finite: Box<ModelParams>,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    /// Validation errors map to CLI exit code 1, everything else to 2.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Dimension(_)
                | Error::Parameter(_)
                | Error::Spec(_)
                | Error::Label(_)
                | Error::Config(_)
                | Error::Json(_)
        )
    }
}
