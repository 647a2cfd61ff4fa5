use std::fmt;

use irisnet::Error;

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_IO: i32 = 4;
const EXIT_INTERNAL: i32 = 1;

/// A message plus the process exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    pub fn config(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_CONFIG,
            message: message.into(),
        }
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_DATA,
            message: message.into(),
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

/// Config problems exit 2, data problems 3, file and weight-file problems 4.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_)
        | Error::InvalidSpec(_)
        | Error::UnknownPrefix(_)
        | Error::WindowOutOfBounds { .. }
        | Error::DegenerateBatch(_) => EXIT_CONFIG,
        Error::EmptyCorpus(_)
        | Error::UnreadableImage { .. }
        | Error::InsufficientClassSamples { .. }
        | Error::EmptySplit(_)
        | Error::LabelOutOfRange { .. }
        | Error::InvalidGeometry(_) => EXIT_DATA,
        Error::Io { .. }
        | Error::BadMagic
        | Error::VersionUnsupported(_)
        | Error::CorruptPayload(_)
        | Error::SpecMismatch(_) => EXIT_IO,
        Error::ShapeMismatch(_) | Error::NotScalar(_) => EXIT_INTERNAL,
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Self {
            code: exit_code(&e),
            message: e.to_string(),
        }
    }
}
