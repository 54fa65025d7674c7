use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::BackendError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelTask {
    Detector,
    Classifier,
}

/// How the artifact file is to be interpreted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ArtifactFormat {
    OracleDetector,
    OracleClassifier,
    TinyCnn,
    Onnx,
}

/// One model-zoo entry. `artifact_path` is resolved relative to the
/// directory the manifest was read from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub model_id: String,
    pub version: String,
    pub task: ModelTask,
    pub format: ArtifactFormat,
    #[serde(default)]
    pub class_labels: Vec<String>,
    pub artifact_path: PathBuf,
    pub checksum: String,
    pub input_size_px: u32,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub region_tags: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parameter_count: Option<u64>,
    #[serde(skip)]
    base_dir: Option<PathBuf>,
}

impl ModelManifest {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        model_id: impl Into<String>,
        version: impl Into<String>,
        task: ModelTask,
        format: ArtifactFormat,
        class_labels: Vec<String>,
        artifact_path: impl Into<PathBuf>,
        checksum: impl Into<String>,
        input_size_px: u32,
    ) -> Self {
        Self {
            model_id: model_id.into(),
            version: version.into(),
            task,
            format,
            class_labels,
            artifact_path: artifact_path.into(),
            checksum: checksum.into(),
            input_size_px,
            description: String::new(),
            region_tags: Vec::new(),
            parameter_count: None,
            base_dir: None,
        }
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, BackendError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| BackendError::io(path, e))?;
        let mut manifest: ModelManifest = serde_json::from_str(&text)
            .map_err(|e| BackendError::InvalidManifest(format!("{}: {e}", path.display())))?;
        manifest.base_dir = path.parent().map(Path::to_path_buf);
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), BackendError> {
        let path = path.as_ref();
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        fs::write(path, text).map_err(|e| BackendError::io(path, e))
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if self.model_id.is_empty() || self.version.is_empty() {
            return Err(BackendError::InvalidManifest("model_id and version are required".into()));
        }
        if self.task == ModelTask::Classifier && self.class_labels.is_empty() {
            return Err(BackendError::InvalidManifest(format!(
                "classifier {} declares no class labels",
                self.model_id
            )));
        }
        if self.input_size_px == 0 {
            return Err(BackendError::InvalidManifest("input_size_px must be positive".into()));
        }
        if self.parameter_count == Some(0) {
            return Err(BackendError::InvalidManifest("parameter_count must be positive".into()));
        }
        Ok(())
    }

    /// `model_id@version`, the key used in a zoo.
    pub fn key(&self) -> String {
        format!("{}@{}", self.model_id, self.version)
    }

    pub fn with_base_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.base_dir = Some(dir.into());
        self
    }

    pub fn base_dir(&self) -> Option<&Path> {
        self.base_dir.as_deref()
    }

    pub fn artifact_location(&self) -> PathBuf {
        match &self.base_dir {
            Some(dir) if self.artifact_path.is_relative() => dir.join(&self.artifact_path),
            _ => self.artifact_path.clone(),
        }
    }

    /// Reads the artifact after checking that it exists and matches the checksum.
    pub fn read_verified_artifact(&self) -> Result<Vec<u8>, BackendError> {
        let location = self.artifact_location();
        if !location.is_file() {
            return Err(BackendError::ArtifactNotFound(location));
        }
        let bytes = fs::read(&location).map_err(|e| BackendError::io(&location, e))?;
        let actual = sha256_hex(&bytes);
        if !actual.eq_ignore_ascii_case(&self.checksum) {
            return Err(BackendError::ChecksumMismatch {
                path: location,
                expected: self.checksum.clone(),
                actual,
            });
        }
        Ok(bytes)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: impl AsRef<Path>) -> std::io::Result<String> {
    let mut file = fs::File::open(path)?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 64 * 1024];
    loop {
        let n = file.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sha256_known_vector() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn artifact_path_resolves_against_manifest_dir() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("weights.bin"), b"w").unwrap();
        let m = ModelManifest::new(
            "m",
            "1",
            ModelTask::Detector,
            ArtifactFormat::OracleDetector,
            vec![],
            "weights.bin",
            sha256_hex(b"w"),
            640,
        );
        m.write(dir.path().join("m.json")).unwrap();
        let back = ModelManifest::from_file(dir.path().join("m.json")).unwrap();
        assert_eq!(back.artifact_location(), dir.path().join("weights.bin"));
        assert_eq!(back.read_verified_artifact().unwrap(), b"w");
    }

    #[test]
    fn classifier_without_labels_is_rejected() {
        let m = ModelManifest::new("c", "1", ModelTask::Classifier, ArtifactFormat::TinyCnn, vec![], "a", "00", 256);
        assert!(matches!(m.validate(), Err(BackendError::InvalidManifest(_))));
    }
}
