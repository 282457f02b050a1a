use std::path::{Path, PathBuf};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: parse error at byte offset {offset}: {message}", path.display())]
    Parse { path: PathBuf, offset: usize, message: String },
    #[error("{}: payload truncated at byte offset {offset}, {needed} more bytes expected", path.display())]
    Truncated { path: PathBuf, offset: usize, needed: usize },
    #[error("{}: schema version {found}, this build reads version {expected}", path.display())]
    SchemaVersion { path: PathBuf, found: u32, expected: u32 },
    #[error("{}: {source}", path.display())]
    Invalid {
        path: PathBuf,
        #[source]
        source: unisoma_core::Error,
    },
    #[error("{}: oracle certificate fails, gradient residual {residual:e} at tolerance {tol:e}", path.display())]
    Certificate { path: PathBuf, residual: f64, tol: f64 },
    #[error("training diverged at epoch {epoch}")]
    Diverged { epoch: usize },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("verification failed: {0}")]
    Verification(String),
    #[error(transparent)]
    Core(#[from] unisoma_core::Error),
}

impl Error {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn invalid(path: &Path, source: unisoma_core::Error) -> Self {
        Error::Invalid {
            path: path.to_path_buf(),
            source,
        }
    }

    /// Process exit code for this error.
    ///
    /// 2 covers bad input (configuration, files), 3 numerical failure, 4
    /// failed verification.
    pub fn exit_code(&self) -> i32 {
        use unisoma_core::Error as Core;
        let core = match self {
            Error::Core(e) | Error::Invalid { source: e, .. } => Some(e.root()),
            _ => None,
        };
        match (self, core) {
            (_, Some(Core::NonFinite { .. } | Core::NonConvergence { .. })) => 3,
            (Error::Diverged { .. }, _) => 3,
            (Error::Certificate { .. } | Error::Verification(_), _) => 4,
            _ => 2,
        }
    }
}

/// Byte offset of a 1-based line and column in `text`.
pub(crate) fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    let start: usize = text.split_inclusive('\n').take(line.saturating_sub(1)).map(str::len).sum();
    (start + column.saturating_sub(1)).min(text.len())
}

pub(crate) fn json_error(path: &Path, text: &str, e: &serde_json::Error) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        offset: if e.is_eof() { text.len() } else { byte_offset(text, e.line(), e.column()) },
        message: e.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn offsets_count_bytes() {
        assert_eq!(byte_offset("ab\ncd", 1, 1), 0);
        assert_eq!(byte_offset("ab\ncd", 2, 2), 4);
        assert_eq!(byte_offset("ab", 5, 9), 2);
    }

    #[test]
    fn numeric_failures_map_to_three() {
        let e = Error::Core(unisoma_core::Error::NonFinite { op: "x", index: 0 }.context("ctx"));
        assert_eq!(e.exit_code(), 3);
        assert_eq!(Error::Verification("x".into()).exit_code(), 4);
        assert_eq!(Error::Config("x".into()).exit_code(), 2);
    }
}
