use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("missing {artifact} at {}; run `maskcount {producer}` first", path.display())]
    Missing {
        artifact: String,
        path: PathBuf,
        producer: &'static str,
    },

    #[error(
        "{artifact} was produced under config fingerprint {found}, current config is {expected}; \
         re-run `maskcount {producer}` or pass --force"
    )]
    Fingerprint {
        artifact: String,
        found: String,
        expected: String,
        producer: &'static str,
    },

    #[error("numeric failure: {0}")]
    Numeric(String),
}

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_MISSING: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

/// Maps an error chain to the process exit code.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<CliError>() {
            return match e {
                CliError::Config(_) | CliError::Fingerprint { .. } => EXIT_CONFIG,
                CliError::Missing { .. } => EXIT_MISSING,
                CliError::Numeric(_) => EXIT_NUMERIC,
            };
        }
        if let Some(maskcount_core::Error::NonFinite { .. }) = cause.downcast_ref::<maskcount_core::Error>() {
            return EXIT_NUMERIC;
        }
    }
    1
}
