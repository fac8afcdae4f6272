use std::path::PathBuf;

use thiserror::Error;

use crate::stream::{ClassId, TaskId};

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{}:{line}: malformed record: {message}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("stream consistency error: {0}")]
    Consistency(String),

    #[error("class {0} not found")]
    MissingClass(ClassId),

    #[error("degenerate prototype for class {0}: mean embedding has zero norm")]
    DegeneratePrototype(ClassId),

    #[error("zero-norm test embedding for samples: {}", .0.join(", "))]
    ZeroNormEmbedding(Vec<String>),

    #[error("temperature {temperature} is below the floor {floor}")]
    TemperatureDomain { temperature: f64, floor: f64 },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("infeasible configuration: {0}")]
    Infeasible(String),

    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("task {task_id}, stage {stage}: {source}")]
    Stage {
        task_id: TaskId,
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn at(task_id: TaskId, stage: &'static str) -> impl Fn(Error) -> Error + Copy {
        move |source| Error::Stage {
            task_id,
            stage,
            source: Box::new(source),
        }
    }

    /// The underlying error with any stage context stripped.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            other => other,
        }
    }
}
