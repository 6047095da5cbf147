//! Layerwise logit-lens decoding and translation-loss analysis for
//! multilingual language models.
//!
//! The pipeline decodes intermediate-layer outputs with an iterative logit
//! lens ([`logitlens`]), scores them against a multiparallel lexicon
//! ([`lexicon`]), tags unmatched outputs with a gated language identifier
//! ([`langid`]), and aggregates translation loss and layerwise statistics
//! ([`metrics`]). Traces move between stages in a versioned newline-delimited
//! format ([`trace`]). [`refmodel`] is a small transformer that runs the
//! whole pipeline in-process.

pub mod langid;
pub mod lexicon;
pub mod logitlens;
pub mod metrics;
pub mod pipeline;
pub mod refmodel;
pub mod report;
pub mod script;
pub mod trace;

/// Replaces `path` with `bytes` through a temporary file in the same
/// directory, so readers never see a partial file.
pub(crate) fn write_atomic(path: &std::path::Path, bytes: &[u8]) -> std::io::Result<()> {
    use std::io::Write;
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(std::path::Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    // temp files are created owner-only
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        tmp.as_file()
            .set_permissions(std::fs::Permissions::from_mode(0o644))?;
    }
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}
