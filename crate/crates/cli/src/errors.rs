use std::fmt;

use hero_dp::Error as CoreError;

pub const EXIT_VALIDATION: u8 = 1;
pub const EXIT_RUNTIME: u8 = 2;
pub const EXIT_IO: u8 = 3;

/// Bad flags or configuration values.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// Required dataset files are missing.
#[derive(Debug)]
pub struct DataUnavailable(pub String);

impl fmt::Display for DataUnavailable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for DataUnavailable {}

/// Maps an error chain to the documented process exit code.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return EXIT_VALIDATION;
        }
        if cause.is::<DataUnavailable>() || cause.is::<std::io::Error>() {
            return EXIT_IO;
        }
        if let Some(e) = cause.downcast_ref::<CoreError>() {
            return match e {
                CoreError::Validation(_)
                | CoreError::Config(_)
                | CoreError::Shape(_)
                | CoreError::UnboundedPrivacy(_) => EXIT_VALIDATION,
                CoreError::Numeric { .. } => EXIT_RUNTIME,
                CoreError::Io { .. }
                | CoreError::Format(_)
                | CoreError::LabelRange { .. }
                | CoreError::Csv(_)
                | CoreError::Json(_) => EXIT_IO,
            };
        }
    }
    EXIT_RUNTIME
}
