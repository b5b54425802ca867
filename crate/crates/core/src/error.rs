use thiserror::Error;

/// Errors produced by the numerical stages of the toolkit.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("result out of representable range: {0}")]
    Range(String),
    #[error("empty spectrum requested")]
    EmptySpectrum,
    #[error("domain error: {0}")]
    Domain(String),
    #[error("geometry error: {0}")]
    Geometry(String),
    #[error("sampling error: {0}")]
    Sampling(String),
    #[error("fit error: {0}")]
    Fit(String),
    #[error("estimation error: {0}")]
    Estimation(String),
    #[error("truncation error: {0}")]
    Truncation(String),
    #[error("near-singular evaluation: {0}")]
    NearSingular(String),
    #[error("inconsistent poles: {0}")]
    InconsistentPoles(String),
    #[error("pole matching error: {0}")]
    Matching(String),
    #[error("unidentifiable: {0}")]
    Unidentifiable(String),
    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },
    #[error("io error: {0}")]
    Io(String),
    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn param(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }

    pub fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            message: message.into(),
        }
    }

    /// Tags an error with the pipeline stage it came from.
    pub fn at_stage(self, stage: &'static str) -> Self {
        match self {
            e @ Error::Stage { .. } => e,
            e => Error::Stage {
                stage,
                source: Box::new(e),
            },
        }
    }

    /// Name of the pipeline stage, if the error carries one.
    pub fn stage(&self) -> Option<&'static str> {
        match self {
            Error::Stage { stage, .. } => Some(stage),
            _ => None,
        }
    }

    /// Innermost error with stage tags removed.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            e => e,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
