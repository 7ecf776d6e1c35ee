use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("missing image file {0}")]
    MissingFile(PathBuf),

    #[error("cannot decode or encode image {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("malformed manifest {path}: {message}")]
    Manifest { path: PathBuf, message: String },

    #[error("label {label} of image {id} is outside [0, {num_classes})")]
    LabelOutOfRange {
        id: String,
        label: usize,
        num_classes: usize,
    },

    #[error("invalid image batch: {0}")]
    InvalidBatch(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("ensemble members disagree on class count ({0} vs {1})")]
    ClassCountMismatch(usize, usize),

    #[error("model {0} does not expose gradients")]
    NotDifferentiable(String),

    #[error("epsilon set is empty")]
    EmptyEpsilonSet,

    #[error("attack success rate is undefined for an empty batch")]
    EmptyBatch,

    #[error("need at least 2 feature rows per set, got {0}")]
    TooFewSamples(usize),

    #[error("weight file {path}: {message}")]
    Weights { path: PathBuf, message: String },

    #[error("unknown model id {0}")]
    UnknownModel(String),

    #[error("invalid annotation record: {0}")]
    InvalidAnnotation(String),

    #[error("annotator {annotator} already judged image {image}")]
    DuplicateAnnotation { annotator: String, image: String },

    #[error("unknown image id {0}")]
    UnknownImage(String),

    #[error("cannot serialize or parse {what}: {message}")]
    Format { what: String, message: String },

    #[error("{stage} stage failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn at_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}
