//! Optional TOML configuration: one table per subcommand, e.g.
//!
//! ```toml
//! [train]
//! epochs = 30
//! batch = 16
//!
//! [datagen]
//! width = 128
//! ```
//!
//! Command-line flags override file values.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;

use crate::error::{Error, IoContext, Result};

/// Reads the `[section]` table of `path` into `T` (missing table → default).
pub fn load_section<T: DeserializeOwned + Default>(path: Option<&Path>, section: &str) -> Result<T> {
    let Some(path) = path else { return Ok(T::default()) };
    let text = fs::read_to_string(path).at(path)?;
    let table: toml::Table =
        text.parse().map_err(|e: toml::de::Error| Error::Format(format!("{}: {e}", path.display())))?;
    match table.get(section) {
        None => Ok(T::default()),
        Some(v) => v
            .clone()
            .try_into()
            .map_err(|e: toml::de::Error| Error::Format(format!("{}: [{section}] {e}", path.display()))),
    }
}
