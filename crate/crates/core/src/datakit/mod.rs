//! Dataset catalog and download, leakage-aware splitting, and crop datasets
//! for classifier training.

mod catalog;
mod crops;
mod fetch;
mod split;

use std::path::{Path, PathBuf};

use thiserror::Error;

pub use catalog::{Catalog, CatalogEntry};
pub use crops::{build_crop_dataset, read_crop_manifest, write_crop_manifest, CropRecord, CROP_MANIFEST};
pub use fetch::{fetch_dataset, fetch_dataset_with, DatasetHandle, FetchOptions};
pub use split::{split_dataset, SeasonTable, SplitAssignment, SplitSpec, SplitStrategy};

#[derive(Debug, Error)]
pub enum DatakitError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("checksum mismatch for {path}: expected {expected}, found {actual}")]
    ChecksumMismatch { path: PathBuf, expected: String, actual: String },
    #[error("network error: {0}")]
    Network(String),
    #[error("invalid catalog: {0}")]
    InvalidCatalog(String),
    #[error("unknown dataset {0}")]
    UnknownDataset(String),
    #[error("invalid split spec: {0}")]
    InvalidSplit(String),
    #[error("{} record(s) lack {field}: {}", records.len(), preview(records))]
    MissingField { field: &'static str, records: Vec<PathBuf> },
    #[error("group-exclusive split of {groups} group(s) leaves fewer than two non-empty splits")]
    SingleGroup { groups: usize },
    #[error("image {0} has animal detections but no label")]
    UnlabeledImage(PathBuf),
    #[error("cannot decode image {path}: {message}")]
    ImageDecode { path: PathBuf, message: String },
    #[error("malformed crop manifest {path}: {message}")]
    BadManifest { path: PathBuf, message: String },
}

impl DatakitError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io { path: path.to_path_buf(), source }
    }
}

fn preview(records: &[PathBuf]) -> String {
    let mut s: Vec<String> = records.iter().take(5).map(|p| p.display().to_string()).collect();
    if records.len() > 5 {
        s.push("...".into());
    }
    s.join(", ")
}
