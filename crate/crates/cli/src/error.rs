use std::fmt;

use sddm_core::Error as CoreError;

/// Process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitKind {
    Config = 2,
    Io = 3,
    Bridge = 4,
    Numeric = 5,
    Gate = 6,
}

#[derive(Debug)]
pub struct CliError {
    pub kind: ExitKind,
    pub message: String,
}

impl CliError {
    pub fn new(kind: ExitKind, message: impl Into<String>) -> Self {
        Self {
            kind,
            message: message.into(),
        }
    }

    pub fn config(m: impl Into<String>) -> Self {
        Self::new(ExitKind::Config, m)
    }

    pub fn io(m: impl Into<String>) -> Self {
        Self::new(ExitKind::Io, m)
    }

    pub fn numeric(m: impl Into<String>) -> Self {
        Self::new(ExitKind::Numeric, m)
    }

    pub fn gate(m: impl Into<String>) -> Self {
        Self::new(ExitKind::Gate, m)
    }

    pub fn exit_code(&self) -> i32 {
        self.kind as i32
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

fn kind_of(e: &CoreError) -> ExitKind {
    match e {
        CoreError::Config(_) | CoreError::Shape { .. } | CoreError::TimeRange { .. } | CoreError::WeightFormat(_) => {
            ExitKind::Config
        }
        CoreError::DegenerateBlock { .. }
        | CoreError::OffManifold { .. }
        | CoreError::Numeric(_)
        | CoreError::Empty(_) => ExitKind::Numeric,
        CoreError::Bridge(_) => ExitKind::Bridge,
        CoreError::ScoreAtStep { source, .. } => kind_of(source),
        CoreError::Io(_) => ExitKind::Io,
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        Self::new(kind_of(&e), e.to_string())
    }
}

impl From<sddm_core::scores::BridgeError> for CliError {
    fn from(e: sddm_core::scores::BridgeError) -> Self {
        Self::new(ExitKind::Bridge, e.to_string())
    }
}
