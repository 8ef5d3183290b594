//! Exit-code discipline: 0 success, 1 runtime failure, 2 bad configuration,
//! 3 unreadable or unwritable artifact, 64 command-line misuse.

use hgnn_core::Error as CoreError;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Config(String),
    Artifact(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 64,
            CliError::Config(_) => 2,
            CliError::Artifact(_) => 3,
            CliError::Runtime(_) => 1,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Config(m) | CliError::Artifact(m) | CliError::Runtime(m) => m,
        }
    }
}

/// Library errors sort into the exit codes by what the user can do about
/// them: fix the configuration, fix the file, or report a bug.
pub fn from_core(e: CoreError) -> CliError {
    match &e {
        CoreError::InvalidConfig(_) | CoreError::Sampling(_) => CliError::Config(e.to_string()),
        CoreError::Parse { .. } | CoreError::Checkpoint(_) | CoreError::Io(_) => CliError::Artifact(e.to_string()),
        _ => CliError::Runtime(e.to_string()),
    }
}
