use std::fmt;

use txkb::essence::EssenceError;
use txkb::eval::EvalError;
use txkb::gateway::GatewayError;
use txkb::ingest::IngestError;
use txkb::instruct::InstructError;
use txkb::kb::KbError;
use txkb::pattern::PatternError;

/// Failure classes, each with its own exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    MissingFile,
    Schema,
    Config,
    Data,
    Gateway,
    Io,
}

impl ErrorKind {
    pub fn code(self) -> i32 {
        match self {
            ErrorKind::Usage => 2,
            ErrorKind::MissingFile => 3,
            ErrorKind::Schema => 4,
            ErrorKind::Config => 5,
            ErrorKind::Data => 6,
            ErrorKind::Gateway => 7,
            ErrorKind::Io => 8,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ErrorKind::Usage => "usage",
            ErrorKind::MissingFile => "missing_file",
            ErrorKind::Schema => "schema",
            ErrorKind::Config => "config",
            ErrorKind::Data => "data",
            ErrorKind::Gateway => "gateway",
            ErrorKind::Io => "io",
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub kind: ErrorKind,
    pub message: String,
}

impl CliError {
    pub fn new(kind: ErrorKind, message: impl Into<String>) -> Self {
        CliError { kind, message: message.into() }
    }

    pub fn config(message: impl Into<String>) -> Self {
        Self::new(ErrorKind::Config, message)
    }

    /// The single stderr line printed on failure.
    pub fn line(&self) -> String {
        serde_json::json!({ "error": self.kind.name(), "exit_code": self.kind.code(), "message": self.message })
            .to_string()
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.kind.name(), self.message)
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

fn io_kind(e: &std::io::Error) -> ErrorKind {
    if e.kind() == std::io::ErrorKind::NotFound {
        ErrorKind::MissingFile
    } else {
        ErrorKind::Io
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::new(io_kind(&e), e.to_string())
    }
}

impl From<IngestError> for CliError {
    fn from(e: IngestError) -> Self {
        let kind = match &e {
            IngestError::Adapter(_) | IngestError::Plant(_) => ErrorKind::Config,
            IngestError::Io(io) => io_kind(io),
            _ => ErrorKind::Schema,
        };
        CliError::new(kind, e.to_string())
    }
}

impl From<EssenceError> for CliError {
    fn from(e: EssenceError) -> Self {
        let kind = match e {
            EssenceError::Catalog(_) => ErrorKind::Config,
            EssenceError::EmptyHistory(_) => ErrorKind::Data,
        };
        CliError::new(kind, e.to_string())
    }
}

impl From<GatewayError> for CliError {
    fn from(e: GatewayError) -> Self {
        let kind = match e {
            GatewayError::Config(_) => ErrorKind::Config,
            _ => ErrorKind::Gateway,
        };
        CliError::new(kind, e.to_string())
    }
}

impl From<PatternError> for CliError {
    fn from(e: PatternError) -> Self {
        let kind = match e {
            PatternError::Gateway(_) => ErrorKind::Gateway,
            PatternError::NoGateway => ErrorKind::Config,
            _ => ErrorKind::Data,
        };
        CliError::new(kind, e.to_string())
    }
}

impl From<KbError> for CliError {
    fn from(e: KbError) -> Self {
        let kind = match &e {
            KbError::Migration { .. } | KbError::Parse { .. } | KbError::Integrity(_) => ErrorKind::Schema,
            KbError::Io { source, .. } => io_kind(source),
            KbError::Target(_) => ErrorKind::Config,
            KbError::Pattern(PatternError::Gateway(_)) => ErrorKind::Gateway,
            _ => ErrorKind::Data,
        };
        CliError::new(kind, e.to_string())
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        CliError::new(ErrorKind::Data, e.to_string())
    }
}

impl From<InstructError> for CliError {
    fn from(e: InstructError) -> Self {
        let kind = match &e {
            InstructError::Io(io) => io_kind(io),
            InstructError::Parse { .. } => ErrorKind::Schema,
            _ => ErrorKind::Data,
        };
        CliError::new(kind, e.to_string())
    }
}

impl From<txkb::context::ContextError> for CliError {
    fn from(e: txkb::context::ContextError) -> Self {
        CliError::new(ErrorKind::Data, e.to_string())
    }
}
