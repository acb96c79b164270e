use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] psla_core::Error),
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("{failed} of {total} gradient checks failed")]
    GradCheck { failed: usize, total: usize },
    #[error("{0}")]
    Config(String),
}

impl CliError {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Self::Io { path: path.as_ref().display().to_string(), source }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Core(e) => match e {
                psla_core::Error::Config(_) => "config",
                psla_core::Error::Unsupported(_) => "unsupported",
                psla_core::Error::InvalidInput(_) => "invalid_input",
                psla_core::Error::Usage(_) => "usage",
                psla_core::Error::Training { .. } => "training",
                psla_core::Error::Format(_) => "format",
                psla_core::Error::Io(_) => "io",
                psla_core::Error::Json(_) => "json",
            },
            CliError::Io { .. } => "io",
            CliError::Csv(_) => "csv",
            CliError::Json(_) => "json",
            CliError::GradCheck { .. } => "gradcheck",
            CliError::Config(_) => "config",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::GradCheck { .. } => 1,
            CliError::Config(_) | CliError::Core(psla_core::Error::Config(_)) => 2,
            _ => 3,
        }
    }

    /// One line of JSON: `{"error":"<kind>","message":"..."}`.
    pub fn machine_line(&self) -> String {
        serde_json::json!({ "error": self.kind(), "message": self.to_string() }).to_string()
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
