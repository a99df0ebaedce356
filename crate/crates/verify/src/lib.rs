//! Support for the acceptance suite in `tests/acceptance.rs`.
//!
//! The suite lives in its own package so that it runs after every other
//! test binary in a workspace run; a failing criterion then can't hide the
//! results of the unit and integration tests.

use std::path::PathBuf;

/// Name of the CLI binary built by `intra-cli`.
pub const CLI_NAME: &str = "intra";

/// Path to the `intra` binary from the same build as the running test.
///
/// Test executables sit in `target/<profile>/deps/`; cargo puts workspace
/// binaries one level up. `INTRA_BIN` overrides the lookup.
pub fn cli_binary() -> Result<PathBuf, String> {
    if let Some(p) = std::env::var_os("INTRA_BIN") {
        return Ok(PathBuf::from(p));
    }
    let exe = std::env::current_exe().map_err(|e| e.to_string())?;
    let mut dir = exe.parent().ok_or("test executable has no parent directory")?;
    if dir.ends_with("deps") {
        dir = dir.parent().ok_or("deps directory has no parent")?;
    }
    let bin = dir.join(format!("{CLI_NAME}{}", std::env::consts::EXE_SUFFIX));
    if bin.is_file() {
        Ok(bin)
    } else {
        Err(format!(
            "{} not found; build it with `cargo build -p intra-cli` (same profile) or run the whole workspace",
            bin.display()
        ))
    }
}
