use serde::Serialize;

/// Failure reported as JSON on stderr.
#[derive(Debug, Clone, Serialize)]
pub struct CliError {
    pub kind: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub key: Option<String>,
    pub message: String,
}

impl CliError {
    pub fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            kind: "config",
            key: Some(key.into()),
            message: message.into(),
        }
    }

    pub fn runtime(context: &str, e: impl std::fmt::Display) -> Self {
        Self {
            kind: "runtime",
            key: None,
            message: format!("{context}: {e}"),
        }
    }

    /// Exit status: 2 for configuration problems, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        if self.kind == "config" { 2 } else { 1 }
    }

    pub fn to_json(&self) -> String {
        serde_json::json!({ "error": self }).to_string()
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::runtime("io", e)
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Attaches context to core errors.
pub trait Context<T> {
    fn context(self, what: &str) -> CliResult<T>;
}

impl<T> Context<T> for memsim_core::Result<T> {
    fn context(self, what: &str) -> CliResult<T> {
        self.map_err(|e| CliError::runtime(what, e))
    }
}
