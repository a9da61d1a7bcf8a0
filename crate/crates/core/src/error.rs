use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: invalid shape {shape:?}: {reason}")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },

    #[error("{op}: non-finite value encountered")]
    NonFinite { op: &'static str },

    #[error("backward requires a scalar output, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("tape already consumed by a backward pass without retention")]
    TapeConsumed,

    #[error("second-order differentiation is not supported through `{0}`")]
    UnsupportedSecondOrder(&'static str),

    #[error("layers {first} and {second} are incompatible: {reason}")]
    IncompatibleLayers {
        first: usize,
        second: usize,
        reason: String,
    },

    #[error("model has no crucial layers (no layer changes the channel/feature count)")]
    NoCrucialLayers,

    #[error("zero matches between student and teacher crucial layers")]
    ZeroMatches,

    #[error("layer {0} is not a crucial layer")]
    NotCrucial(usize),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),

    #[error("invalid probability vector: {0}")]
    InvalidDistribution(String),

    #[error("negative divergence value {0}")]
    NegativeDivergence(f64),

    #[error("missing divergence for crucial layer {0} on an update epoch")]
    MissingDivergence(usize),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("invalid config field `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("malformed file at byte {offset}: {reason}")]
    Format { offset: usize, reason: String },

    #[error("layer {layer}: {source}")]
    AtLayer {
        layer: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("training diverged at epoch {epoch}: {detail}")]
    Diverged { epoch: usize, detail: String },

    #[error("{}: {source}", path.display())]
    File {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn file(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> Self + '_ {
        move |source| Error::File {
            path: path.to_path_buf(),
            source,
        }
    }

    pub(crate) fn at_layer(self, layer: usize) -> Self {
        Error::AtLayer {
            layer,
            source: Box::new(self),
        }
    }

    /// True for errors caused by invalid user configuration rather than a
    /// failure while running.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config { .. })
    }
}
