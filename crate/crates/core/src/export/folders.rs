//! Copies images into per-category folders.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::ExportError;
use crate::pipeline::PipelineResult;
use crate::types::DetectionCategory;

pub const EMPTY_FOLDER: &str = "empty";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeparatedFile {
    pub source: PathBuf,
    pub destination: PathBuf,
    pub folder: String,
}

/// Folder for a result: the category of its highest-confidence detection
/// (earlier category on ties), or `empty`.
pub fn folder_for(result: &PipelineResult) -> &'static str {
    result
        .detections
        .iter()
        .map(|d| &d.detection)
        .fold(None, |best: Option<(f64, DetectionCategory)>, d| match best {
            Some((c, cat)) if c > d.confidence() || (c == d.confidence() && cat <= d.category) => best,
            _ => Some((d.confidence(), d.category)),
        })
        .map_or(EMPTY_FOLDER, |(_, cat)| cat.name())
}

/// Copies every image to `out_dir/{animal,person,vehicle,empty}/`. Name
/// clashes get a numeric suffix. Returns one entry per result, in order.
pub fn separate_folders(results: &[PipelineResult], out_dir: &Path) -> Result<Vec<SeparatedFile>, ExportError> {
    let mut used: HashSet<PathBuf> = HashSet::new();
    let mut manifest = Vec::with_capacity(results.len());
    for r in results {
        let folder = folder_for(r);
        let dir = out_dir.join(folder);
        fs::create_dir_all(&dir).map_err(|e| ExportError::io(&dir, e))?;
        let name = r.image.path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "image".into());
        let mut dest = dir.join(&name);
        let mut n = 1;
        while used.contains(&dest) || dest.exists() {
            let p = Path::new(&name);
            let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            dest = match p.extension() {
                Some(ext) => dir.join(format!("{stem}-{n}.{}", ext.to_string_lossy())),
                None => dir.join(format!("{stem}-{n}")),
            };
            n += 1;
        }
        fs::copy(&r.image.path, &dest).map_err(|e| ExportError::io(&r.image.path, e))?;
        used.insert(dest.clone());
        manifest.push(SeparatedFile { source: r.image.path.clone(), destination: dest, folder: folder.to_string() });
    }
    Ok(manifest)
}
