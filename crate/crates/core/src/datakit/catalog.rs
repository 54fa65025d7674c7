use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::DatakitError;

/// One downloadable dataset in a local catalog index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CatalogEntry {
    pub dataset_id: String,
    pub download_url: String,
    /// SHA-256 of the `.tar.gz` archive, lowercase hex.
    pub archive_checksum: String,
    #[serde(default)]
    pub license: String,
    #[serde(default)]
    pub record_count: u64,
}

impl CatalogEntry {
    pub fn validate(&self) -> Result<(), DatakitError> {
        let bad = |m: String| Err(DatakitError::InvalidCatalog(format!("{}: {m}", self.dataset_id)));
        if self.dataset_id.is_empty() || self.dataset_id.contains(['/', '\\']) || self.dataset_id.starts_with('.') {
            return bad("dataset_id must be a plain non-empty name".into());
        }
        if self.archive_checksum.len() != 64 || !self.archive_checksum.chars().all(|c| c.is_ascii_hexdigit()) {
            return bad("archive_checksum must be a SHA-256 hex digest".into());
        }
        let well_formed = self.download_url.split_once("://").is_some_and(|(scheme, rest)| {
            matches!(scheme, "http" | "https" | "file") && !rest.is_empty() && !rest.contains(char::is_whitespace)
        });
        if !well_formed {
            return bad(format!("malformed download_url {:?}", self.download_url));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Catalog {
    pub entries: Vec<CatalogEntry>,
}

impl Catalog {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, DatakitError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| DatakitError::io(path, e))?;
        let catalog: Catalog = serde_json::from_str(&text).map_err(|e| DatakitError::InvalidCatalog(e.to_string()))?;
        let mut seen = std::collections::HashSet::new();
        for e in &catalog.entries {
            e.validate()?;
            if !seen.insert(&e.dataset_id) {
                return Err(DatakitError::InvalidCatalog(format!("duplicate dataset_id {}", e.dataset_id)));
            }
        }
        Ok(catalog)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), DatakitError> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).expect("catalog serializes");
        fs::write(path, text + "\n").map_err(|e| DatakitError::io(path, e))
    }

    pub fn get(&self, dataset_id: &str) -> Result<&CatalogEntry, DatakitError> {
        self.entries
            .iter()
            .find(|e| e.dataset_id == dataset_id)
            .ok_or_else(|| DatakitError::UnknownDataset(dataset_id.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(url: &str, sum: &str) -> CatalogEntry {
        CatalogEntry {
            dataset_id: "ena24".into(),
            download_url: url.into(),
            archive_checksum: sum.into(),
            license: "CDLA-permissive".into(),
            record_count: 10,
        }
    }

    #[test]
    fn validation() {
        let sum = "a".repeat(64);
        assert!(entry("https://example.org/a.tar.gz", &sum).validate().is_ok());
        assert!(entry("file:///tmp/a.tar.gz", &sum).validate().is_ok());
        assert!(entry("ftp://x/a", &sum).validate().is_err());
        assert!(entry("not a url", &sum).validate().is_err());
        assert!(entry("https://example.org/a", "abc").validate().is_err());
    }

    #[test]
    fn load_save_and_duplicates() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("catalog.json");
        let mut c = Catalog { entries: vec![entry("https://e.org/a", &"0".repeat(64))] };
        c.save(&path).unwrap();
        assert_eq!(Catalog::load(&path).unwrap(), c);
        assert!(c.get("ena24").is_ok());
        assert!(matches!(c.get("nope"), Err(DatakitError::UnknownDataset(_))));
        c.entries.push(c.entries[0].clone());
        c.save(&path).unwrap();
        assert!(Catalog::load(&path).is_err());
    }
}
