use std::path::PathBuf;

/// Errors produced anywhere in the prune / train / recover / fuse pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("invalid data: {0}")]
    Data(String),

    #[error("invalid parameter: {0}")]
    Param(String),

    #[error("prune map error: {0}")]
    Map(String),

    #[error("accounting error: {0}")]
    Accounting(String),

    #[error("recovery error in layer `{layer}`: {reason}")]
    Recovery { layer: String, reason: String },

    #[error("input error: {0}")]
    Input(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("training diverged at step {step} (loss {loss})")]
    Training { step: usize, loss: f64 },

    #[error("config error: {}", .0.join("; "))]
    Config(Vec<String>),

    #[error("format error: {0}")]
    Format(String),

    #[error("unsupported adapter file version {found} (expected 1)")]
    Version { found: u16 },

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("stage `{stage}` failed: {source}")]
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

    /// True for errors caused by invalid user input (config, arguments),
    /// as opposed to failures while running a stage.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::Config(_) => true,
            Error::Stage { source, .. } => source.is_validation(),
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

/// Attach a stage name to a failing result.
pub(crate) trait StageExt<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T> StageExt<T> for Result<T> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|e| match e {
            e @ Error::Stage { .. } => e,
            e => Error::Stage {
                stage,
                source: Box::new(e),
            },
        })
    }
}
