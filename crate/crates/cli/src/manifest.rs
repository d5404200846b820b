use std::path::Path;

use dlsa::Result;
use serde::{Deserialize, Serialize};

pub const RUN_MANIFEST: &str = "run_manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactEntry {
    pub file: String,
    pub bytes: u64,
    /// CRC32 as eight lowercase hex digits.
    pub crc32: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunManifest {
    pub artifacts: Vec<ArtifactEntry>,
}

/// Lists every regular file in `dir` (except the manifest itself), sorted by name.
pub fn scan_artifacts(dir: &Path) -> Result<RunManifest> {
    let mut artifacts = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let entry = entry?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if !entry.file_type()?.is_file() || name == RUN_MANIFEST {
            continue;
        }
        let bytes = std::fs::read(entry.path())?;
        artifacts.push(ArtifactEntry {
            file: name,
            bytes: bytes.len() as u64,
            crc32: format!("{:08x}", crc32fast::hash(&bytes)),
        });
    }
    artifacts.sort_by(|a, b| a.file.cmp(&b.file));
    Ok(RunManifest { artifacts })
}

pub fn write_run_manifest(dir: &Path) -> Result<RunManifest> {
    let m = scan_artifacts(dir)?;
    std::fs::write(dir.join(RUN_MANIFEST), serde_json::to_string_pretty(&m)? + "\n")?;
    Ok(m)
}
