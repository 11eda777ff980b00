use thiserror::Error;

/// Errors produced by the optimization core.
#[derive(Debug, Error)]
pub enum Error {
    #[error("incompatible parameters: {0}")]
    IncompatibleParameters(String),

    #[error("invalid coefficient: {0}")]
    InvalidCoefficient(f64),

    #[error("numerical failure while factorizing entry `{entry}`")]
    NumericalFailure { entry: String },

    #[error("similarity is undefined: no entries with min(rows, cols) > 1")]
    UndefinedSimilarity,

    #[error("crossover weights degenerate after {attempts} redraws (|w1+w2| < {threshold})")]
    DegenerateCrossover { attempts: usize, threshold: f64 },

    #[error("invalid fitness value: {0}")]
    InvalidFitness(f64),

    #[error("archive is empty")]
    EmptyArchive,

    #[error("degenerate bin bounds for task {task} (lower == upper); supply explicit bounds")]
    DegenerateBounds { task: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("expert training failed: {0}")]
    TrainingFailure(String),

    #[error("evaluation failed: {0}")]
    Evaluation(String),

    #[error("snapshot error: {0}")]
    Snapshot(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
