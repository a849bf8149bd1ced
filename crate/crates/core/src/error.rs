use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("config: {0}")]
    Config(String),

    #[error("shape: {0}")]
    Shape(String),

    #[error("annotation: point ({x}, {y}) lies outside the {width}x{height} image")]
    Annotation { x: f64, y: f64, width: usize, height: usize },

    #[error("ingestion: missing annotation files: {0:?}")]
    MissingAnnotations(Vec<PathBuf>),

    #[error("parse: {file}: {detail}")]
    Parse { file: PathBuf, detail: String },

    #[error("label: {0}")]
    Label(String),

    #[error("dependency: {0}")]
    Dependency(String),

    #[error("protocol: {0}")]
    Protocol(String),

    #[error("training aborted: {0}")]
    Training(String),

    #[error("input: {0}")]
    Input(String),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    /// Short machine-readable class name, printed on CLI failure.
    pub fn class(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Shape(_) => "shape",
            Error::Annotation { .. } => "annotation",
            Error::MissingAnnotations(_) => "ingestion",
            Error::Parse { .. } => "parse",
            Error::Label(_) => "label",
            Error::Dependency(_) => "dependency",
            Error::Protocol(_) => "protocol",
            Error::Training(_) => "training",
            Error::Input(_) => "input",
            Error::Tensor(_) => "tensor",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Image(_) => "image",
        }
    }

    /// Process exit code for the CLI: 3 for config/validation failures, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Parse { .. } => 3,
            _ => 1,
        }
    }
}
