use std::path::PathBuf;

use mergeforge::ErrorCategory;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Merge(#[from] mergeforge::Error),

    #[error("recipe: {0}")]
    Recipe(String),

    #[error("I/O error on {0}: {1}")]
    Io(PathBuf, #[source] std::io::Error),

    #[error("{0}")]
    Usage(String),
}

impl CliError {
    fn category(&self) -> ErrorCategory {
        match self {
            CliError::Merge(e) => e.category(),
            CliError::Io(..) => ErrorCategory::Io,
            CliError::Recipe(_) | CliError::Usage(_) => ErrorCategory::Validation,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self.category() {
            ErrorCategory::Validation => 1,
            ErrorCategory::Io => 2,
            ErrorCategory::Stats => 3,
        }
    }

    /// One-line JSON description for stderr.
    pub fn to_json(&self) -> String {
        let category = match self.category() {
            ErrorCategory::Validation => "validation",
            ErrorCategory::Io => "io",
            ErrorCategory::Stats => "stats",
        };
        let mut value = serde_json::json!({
            "error": {
                "category": category,
                "exit_code": self.exit_code(),
                "message": self.to_string(),
            }
        });
        if let CliError::Merge(mergeforge::Error::Incompatible(report)) = self {
            value["error"]["mismatches"] = serde_json::to_value(report).unwrap_or_default();
        }
        value.to_string()
    }
}
