use std::fmt;
use std::path::Path;
use std::process::ExitCode;

use eibench_core::analysis::AnalysisError;
use eibench_core::imgxform::TransformError;
use eibench_core::metrics::MetricError;
use eibench_core::predstore::{FormatError, PairError};
use eibench_core::stats::StatsError;
use eibench_core::synth::SynthError;

/// Failure classes, each with its own exit status.
#[derive(Debug)]
pub enum CliError {
    /// Validation or degenerate-input failure (exit 1).
    Invalid(String),
    /// I/O or file-format failure (exit 2).
    Io(String),
    /// Bad arguments (exit 3).
    Usage(String),
}

impl CliError {
    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(match self {
            CliError::Invalid(_) => 1,
            CliError::Io(_) => 2,
            CliError::Usage(_) => 3,
        })
    }

    pub fn io(path: &Path, err: impl fmt::Display) -> Self {
        CliError::Io(format!("{}: {err}", path.display()))
    }

    pub fn format(path: &Path, err: FormatError) -> Self {
        match err {
            FormatError::Invalid(report) => CliError::Invalid(format!("{}: {report}", path.display())),
            other => CliError::io(path, other),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Invalid(m) | CliError::Io(m) | CliError::Usage(m) => f.write_str(m),
        }
    }
}

macro_rules! invalid_from {
    ($($t:ty),*) => {
        $(impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Invalid(e.to_string())
            }
        })*
    };
}

invalid_from!(PairError, MetricError, StatsError, AnalysisError);

impl From<TransformError> for CliError {
    fn from(e: TransformError) -> Self {
        match e {
            TransformError::Argument(_) => CliError::Invalid(e.to_string()),
            _ => CliError::Io(e.to_string()),
        }
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::Format(_) | SynthError::Io(_) => CliError::Io(e.to_string()),
            _ => CliError::Invalid(e.to_string()),
        }
    }
}
