use thiserror::Error;

/// Errors produced by the detection pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid box: {0}")]
    InvalidBox(String),

    #[error("invalid transform: {0}")]
    InvalidTransform(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("could not place {requested} objects without overlap after {attempts} attempts; generator parameters are too dense")]
    Placement { requested: usize, attempts: usize },

    #[error("need at least {needed} seeds, got {got}")]
    NotEnoughSeeds { needed: usize, got: usize },

    #[error("scene has {got} points, detector needs at least {needed}")]
    SceneTooSmall { needed: usize, got: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("class id {class} out of range for {n_classes} classes")]
    ClassOutOfRange { class: usize, n_classes: usize },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("parameter layout mismatch: {0}")]
    LayoutMismatch(String),

    #[error("parse error in {context} (line {line}, column {column}): {message}")]
    Parse {
        context: String,
        line: usize,
        column: usize,
        message: String,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn parse(context: impl Into<String>, err: &serde_json::Error) -> Self {
        Error::Parse {
            context: context.into(),
            line: err.line(),
            column: err.column(),
            message: err.to_string(),
        }
    }

    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

/// Deserialize JSON, naming the path of the offending field on failure
/// (e.g. `scenes[2].detections[0].box.center`).
pub fn parse_json<T: serde::de::DeserializeOwned>(text: &str, context: &str) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        Error::Parse {
            context: format!("{context} at {path}"),
            line: inner.line(),
            column: inner.column(),
            message: inner.to_string(),
        }
    })
}
