use std::fmt;

/// Failure classes, each with its own process exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    /// Bad flags, config or an impossible request (exit 1).
    Usage,
    /// Training diverged (exit 2).
    Numerical,
    /// File missing, unreadable or malformed (exit 3).
    Io,
}

impl ErrorKind {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorKind::Usage => 1,
            ErrorKind::Numerical => 2,
            ErrorKind::Io => 3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CliError {
    pub kind: ErrorKind,
    pub message: String,
}

impl CliError {
    pub fn usage(m: impl Into<String>) -> Self {
        CliError { kind: ErrorKind::Usage, message: m.into() }
    }

    pub fn numerical(m: impl Into<String>) -> Self {
        CliError { kind: ErrorKind::Numerical, message: m.into() }
    }

    pub fn io(m: impl Into<String>) -> Self {
        CliError { kind: ErrorKind::Io, message: m.into() }
    }

    pub fn exit_code(&self) -> i32 {
        self.kind.exit_code()
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<chanprune::Error> for CliError {
    fn from(e: chanprune::Error) -> Self {
        use chanprune::Error as E;
        let kind = match &e {
            E::Io(_)
            | E::Format(_)
            | E::BadMagic { .. }
            | E::Truncated { .. }
            | E::LabelOutOfRange { .. }
            | E::Checksum { .. }
            | E::Version { .. } => ErrorKind::Io,
            E::NonFinite(_) => ErrorKind::Numerical,
            E::Shape(_) | E::InvalidArgument(_) | E::Graph(_) | E::Prune(_) => ErrorKind::Usage,
        };
        CliError { kind, message: e.to_string() }
    }
}
