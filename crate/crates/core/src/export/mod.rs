//! Result exporters: MegaDetector batch JSON, COCO, annotated images,
//! per-category folders and metadata scrubbing.

use std::path::{Path, PathBuf};

pub mod coco;
pub mod folders;
pub mod md_json;
pub mod render;
pub mod scrub;

pub use coco::{to_coco, CategoryMap, CocoDocument};
pub use folders::{folder_for, separate_folders, SeparatedFile, EMPTY_FOLDER};
pub use md_json::{to_md_json, MdDetection, MdDocument, MdImage, MdOptions};
pub use render::{annotate, render_annotated, RenderConfig};
pub use scrub::{read_gps, scrub_metadata, write_gps, GpsMode, ScrubItem, ScrubPolicy, ScrubReport};

#[derive(Debug, thiserror::Error)]
pub enum ExportError {
    #[error("malformed results document: {0}")]
    Malformed(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("image {0} has no recorded dimensions")]
    MissingDimensions(PathBuf),
    #[error("no category id for {0:?}")]
    UnmappedCategory(String),
    #[error("cannot decode {path}: {message}")]
    ImageDecode { path: PathBuf, message: String },
    #[error("invalid scrub policy: {0}")]
    InvalidPolicy(String),
}

impl ExportError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io { path: path.to_path_buf(), source }
    }
}
