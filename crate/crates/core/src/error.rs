//! Crate-wide error type.

use std::fmt;

/// Per-expert coverage shortfall reported when calibration balancing
/// exhausts its sampling budget.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ExpertDeficit {
    pub layer: usize,
    pub expert: usize,
    pub count: u64,
    pub required: u64,
}

#[derive(Debug)]
pub enum Error {
    /// Incompatible tensor shapes or vector lengths.
    Shape { op: &'static str, detail: String },
    /// An argument violated a precondition (bad range, empty input, ...).
    Invalid { op: &'static str, detail: String },
    /// Filesystem I/O failure.
    Io { path: String, source: std::io::Error },
    /// A model or token file is malformed.
    Format { detail: String },
    /// Calibration balancing ran out of budget with experts still uncovered.
    UnsatisfiedExperts(Vec<ExpertDeficit>),
    /// A pipeline stage failed; wraps the underlying error with the stage name.
    Stage { stage: &'static str, source: Box<Error> },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Shape { op, detail } => write!(f, "{op}: shape mismatch: {detail}"),
            Self::Invalid { op, detail } => write!(f, "{op}: invalid argument: {detail}"),
            Self::Io { path, source } => write!(f, "io error on {path}: {source}"),
            Self::Format { detail } => write!(f, "malformed file: {detail}"),
            Self::UnsatisfiedExperts(deficits) => {
                write!(f, "sampling budget exhausted with uncovered experts:")?;
                for d in deficits {
                    write!(
                        f,
                        " (layer {}, expert {}: {} of {} tokens)",
                        d.layer, d.expert, d.count, d.required
                    )?;
                }
                Ok(())
            }
            Self::Stage { stage, source } => write!(f, "pipeline stage '{stage}' failed: {source}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Self::Io { source, .. } => Some(source),
            Self::Stage { source, .. } => Some(source.as_ref()),
            _ => None,
        }
    }
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Self::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn invalid(op: &'static str, detail: impl Into<String>) -> Self {
        Self::Invalid {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(detail: impl Into<String>) -> Self {
        Self::Format {
            detail: detail.into(),
        }
    }

    /// Tag an error with the pipeline stage it surfaced in.
    pub fn in_stage(self, stage: &'static str) -> Self {
        Self::Stage {
            stage,
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
