use std::fmt;
use std::process::ExitCode;

use serde_json::json;

/// Failure classes, each with its own exit code.
#[derive(Debug)]
pub enum CliError {
    Spec {
        message: String,
        line: Option<usize>,
        column: Option<usize>,
    },
    Verification(String),
    Runtime(anyhow::Error),
}

impl CliError {
    pub fn spec(message: impl Into<String>) -> Self {
        CliError::Spec {
            message: message.into(),
            line: None,
            column: None,
        }
    }

    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(match self {
            CliError::Runtime(_) => 1,
            CliError::Spec { .. } => 2,
            CliError::Verification(_) => 3,
        })
    }

    /// One-line JSON for stderr.
    pub fn to_json(&self) -> String {
        let v = match self {
            CliError::Spec { message, line, column } => {
                json!({"error": "spec", "message": message, "line": line, "column": column})
            }
            CliError::Verification(m) => json!({"error": "verification", "message": m}),
            CliError::Runtime(e) => json!({"error": "runtime", "message": format!("{e:#}")}),
        };
        v.to_string()
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_json())
    }
}

impl<E: Into<anyhow::Error>> From<E> for CliError {
    fn from(e: E) -> Self {
        CliError::Runtime(e.into())
    }
}
