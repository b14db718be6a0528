//! Library side of the `tpa` command: invariant suites, cost tables and
//! decode benchmarks.

pub mod bench;
pub mod calc;
pub mod error;
pub mod verify;

use std::path::{Path, PathBuf};

pub use error::{CliError, Result};

/// When set, output files are written into this directory (keeping their file names).
pub const OUT_DIR_ENV: &str = "TPA_OUT_DIR";

/// Applies the [`OUT_DIR_ENV`] override to `path`.
pub fn resolve_output(path: &Path) -> PathBuf {
    match std::env::var_os(OUT_DIR_ENV) {
        Some(dir) if !dir.is_empty() => {
            let name = path
                .file_name()
                .map_or_else(|| PathBuf::from("out"), PathBuf::from);
            PathBuf::from(dir).join(name)
        }
        _ => path.to_path_buf(),
    }
}
