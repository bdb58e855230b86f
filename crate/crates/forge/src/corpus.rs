//! Byte corpora: a file on disk or the seeded synthetic generator.

use std::path::Path;
use std::sync::Arc;

use sdc_forge_core::data::synthetic_corpus;

use crate::error::ForgeError;

pub const SYNTHETIC: &str = "synthetic";

/// Load `source` (a path, or `"synthetic"`) as raw bytes. Synthetic corpora
/// are `len` bytes generated from `seed`; files are read whole.
pub fn load_corpus(source: &str, len: usize, seed: u64) -> Result<Arc<[u8]>, ForgeError> {
    if source == SYNTHETIC {
        if len == 0 {
            return Err(ForgeError::Corpus("synthetic corpus length is zero".into()));
        }
        return Ok(synthetic_corpus(seed, len).into());
    }
    let path = Path::new(source);
    let bytes = std::fs::read(path).map_err(|e| ForgeError::io(path, e))?;
    if bytes.is_empty() {
        return Err(ForgeError::Corpus(format!("{} is empty", path.display())));
    }
    Ok(bytes.into())
}
