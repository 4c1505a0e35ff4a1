use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("invalid state: {0}")]
    State(String),

    /// A kept expert was never routed to on the calibration data, so its
    /// fixed gate (mean of nonzero gate values) is undefined.
    #[error("expert {expert} was never activated on calibration data{}", layer.map(|l| format!(" (layer {l})")).unwrap_or_default())]
    NeverActivated { layer: Option<usize>, expert: usize },

    #[error("degenerate spectrum: {0}")]
    DegenerateSpectrum(String),

    #[error("non-finite value in `{tensor}`: {detail}")]
    Numeric { tensor: String, detail: String },

    #[error("training diverged at step {step}: loss {loss} exceeds {limit}")]
    Diverged { step: usize, loss: f64, limit: f64 },

    #[error("corrupt checkpoint: {0}")]
    Corruption(String),

    #[error("unsupported manifest version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),

    #[error("missing file: {0}")]
    MissingFile(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    /// Short machine-readable tag, used by the CLI error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::Argument(_) => "argument",
            Error::Input(_) => "input",
            Error::State(_) => "state",
            Error::NeverActivated { .. } => "never_activated",
            Error::DegenerateSpectrum(_) => "degenerate_spectrum",
            Error::Numeric { .. } => "numeric",
            Error::Diverged { .. } => "diverged",
            Error::Corruption(_) => "corruption",
            Error::Version { .. } => "version",
            Error::Config(_) => "config",
            Error::MissingFile(_) => "missing_file",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }

    /// Process exit code for the CLI. Each failure family gets its own code.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Argument(_) => 2,
            Error::MissingFile(_) | Error::Io(_) => 3,
            Error::NeverActivated { .. } => 4,
            Error::Corruption(_) | Error::Version { .. } | Error::Json(_) => 5,
            Error::Numeric { .. } | Error::Diverged { .. } | Error::DegenerateSpectrum(_) => 6,
            Error::Shape(_) | Error::Input(_) | Error::State(_) => 7,
        }
    }
}

/// Read a file, reporting a missing path as [`Error::MissingFile`].
pub(crate) fn read_file(path: &std::path::Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.display().to_string()),
        _ => Error::Io(e),
    })
}
