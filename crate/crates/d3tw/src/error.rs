use std::path::Path;

use thiserror::Error;

/// Failure of a CLI operation, split by who is at fault.
///
/// `Validation` covers everything the user can fix before the run does any
/// real work: bad flag values, malformed or inconsistent input files, and
/// shape mismatches between a dataset and a checkpoint. `Runtime` covers
/// failures of the run itself: write errors and algorithmic dead ends such
/// as sampling exhaustion.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Runtime(String),
}

impl Error {
    pub fn validation(msg: impl Into<String>) -> Error {
        Error::Validation(msg.into())
    }

    pub fn runtime(msg: impl Into<String>) -> Error {
        Error::Runtime(msg.into())
    }

    /// Process exit code: 1 for validation errors, 2 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Validation(_) => 1,
            Error::Runtime(_) => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

/// Reads a file to a string, naming the path on failure.
///
/// Unreadable inputs are validation errors: the user pointed the tool at
/// something that is not there or not theirs to read.
pub fn read_to_string(path: &Path) -> Result<String> {
    std::fs::read_to_string(path)
        .map_err(|e| Error::validation(format!("{}: {e}", path.display())))
}

/// Writes a file, naming the path on failure. Write failures are runtime
/// errors: the inputs were fine, the run could not land its output.
pub fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents)
        .map_err(|e| Error::runtime(format!("{}: {e}", path.display())))
}

/// Creates a directory tree, naming the path on failure.
pub fn create_dir_all(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path)
        .map_err(|e| Error::runtime(format!("{}: {e}", path.display())))
}
