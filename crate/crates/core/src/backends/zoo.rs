//! A model zoo is a directory of `*.manifest.json` files with their artifacts.

use std::fs;
use std::path::{Path, PathBuf};

use super::{BackendError, ModelManifest};

pub const MANIFEST_SUFFIX: &str = ".manifest.json";

#[derive(Debug, Clone)]
pub struct ModelZoo {
    dir: PathBuf,
}

impl ModelZoo {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, BackendError> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| BackendError::io(&dir, e))?;
        Ok(Self { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// All manifests, sorted by `model_id@version`.
    pub fn list(&self) -> Result<Vec<ModelManifest>, BackendError> {
        let mut out = Vec::new();
        let entries = fs::read_dir(&self.dir).map_err(|e| BackendError::io(&self.dir, e))?;
        for entry in entries {
            let path = entry.map_err(|e| BackendError::io(&self.dir, e))?.path();
            let is_manifest = path.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.ends_with(MANIFEST_SUFFIX));
            if is_manifest {
                out.push(ModelManifest::from_file(&path)?);
            }
        }
        out.sort_by_key(|m| m.key());
        Ok(out)
    }

    /// Finds a model by id, or by `id@version`. Without a version the
    /// lexicographically greatest version is returned.
    pub fn get(&self, id: &str) -> Result<ModelManifest, BackendError> {
        let (model_id, version) = match id.split_once('@') {
            Some((m, v)) => (m, Some(v)),
            None => (id, None),
        };
        self.list()?
            .into_iter()
            .filter(|m| m.model_id == model_id && version.is_none_or(|v| m.version == v))
            .max_by(|a, b| a.version.cmp(&b.version))
            .ok_or_else(|| BackendError::UnknownModel(id.to_string()))
    }

    /// Copies a verified model into the zoo. `model_id@version` must be new.
    pub fn add(&self, manifest: &ModelManifest) -> Result<ModelManifest, BackendError> {
        manifest.validate()?;
        if self.list()?.iter().any(|m| m.key() == manifest.key()) {
            return Err(BackendError::DuplicateModel(manifest.key()));
        }
        let bytes = manifest.read_verified_artifact()?;
        let stem = format!("{}-{}", sanitize(&manifest.model_id), sanitize(&manifest.version));
        let ext = manifest.artifact_path.extension().and_then(|e| e.to_str()).unwrap_or("bin");
        let artifact_name = format!("{stem}.artifact.{ext}");
        let artifact = self.dir.join(&artifact_name);
        fs::write(&artifact, &bytes).map_err(|e| BackendError::io(&artifact, e))?;

        let mut stored = manifest.clone().with_base_dir(&self.dir);
        stored.artifact_path = PathBuf::from(artifact_name);
        stored.write(self.dir.join(format!("{stem}{MANIFEST_SUFFIX}")))?;
        Ok(stored)
    }
}

fn sanitize(s: &str) -> String {
    s.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' { c } else { '_' }).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{install_oracle_models, load_backend, OracleDetectorConfig};

    #[test]
    fn add_list_get_and_duplicates() {
        let src = tempfile::tempdir().unwrap();
        let (det, clf) = install_oracle_models(src.path(), &OracleDetectorConfig::default(), &["a", "b"]).unwrap();
        let zoo_dir = tempfile::tempdir().unwrap();
        let zoo = ModelZoo::open(zoo_dir.path()).unwrap();
        zoo.add(&det).unwrap();
        zoo.add(&clf).unwrap();
        assert!(matches!(zoo.add(&det), Err(BackendError::DuplicateModel(_))));

        let listed = zoo.list().unwrap();
        assert_eq!(listed.len(), 2);
        let got = zoo.get("oracle-classifier").unwrap();
        assert_eq!(got.class_labels, vec!["a", "b"]);
        // copied artifact still verifies
        load_backend(&got).unwrap();
        assert!(zoo.get("oracle-detector@2").is_err());
        assert!(zoo.get("oracle-detector@1").is_ok());
    }
}
