//! Settings shared by the CLI and the HTTP service.
//!
//! Precedence: command-line flag, then environment, then the TOML file
//! named by `--config` or `TRAPKIT_CONFIG`, then built-in defaults.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use clap::Args;
use serde::{Deserialize, Serialize};
use trapkit::pipeline::PipelineConfig;
use trapkit::DetectionCategory;

pub const ENV_CONFIG: &str = "TRAPKIT_CONFIG";
pub const ENV_MODEL_DIR: &str = "TRAPKIT_MODEL_DIR";
pub const ENV_DATA_DIR: &str = "TRAPKIT_DATA_DIR";
pub const ENV_OPERATOR_TOKEN: &str = "TRAPKIT_OPERATOR_TOKEN";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("invalid config {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid setting: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Settings {
    pub model_dir: PathBuf,
    pub data_dir: PathBuf,
    pub detector_id: String,
    pub classifier_id: Option<String>,
    pub det_threshold: f64,
    pub clf_threshold: f64,
    pub crop_size_px: u32,
    /// Images processed in parallel inside one job.
    pub workers: usize,
    /// Jobs executed at the same time.
    pub job_workers: usize,
    /// Jobs waiting beyond this are refused.
    pub queue_capacity: usize,
    pub target_fps: f64,
    pub host: String,
    pub port: u16,
    pub max_image_upload_mb: u64,
    pub max_video_upload_mb: u64,
    pub operator_token: Option<String>,
}

impl Default for Settings {
    fn default() -> Self {
        let p = PipelineConfig::default();
        Self {
            model_dir: PathBuf::from("models"),
            data_dir: PathBuf::from("data"),
            detector_id: "oracle-detector".into(),
            classifier_id: None,
            det_threshold: p.det_threshold,
            clf_threshold: p.clf_threshold,
            crop_size_px: p.crop_size_px,
            workers: p.workers,
            job_workers: 2,
            queue_capacity: 64,
            target_fps: trapkit::video::DEFAULT_TARGET_FPS,
            host: "127.0.0.1".into(),
            port: 8080,
            max_image_upload_mb: 100,
            max_video_upload_mb: 2048,
            operator_token: None,
        }
    }
}

/// One optional flag per setting; unset flags leave the lower layers alone.
#[derive(Debug, Clone, Default, Args)]
pub struct SettingsArgs {
    /// TOML settings file
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, value_name = "DIR")]
    pub model_dir: Option<PathBuf>,
    #[arg(long, global = true, value_name = "DIR")]
    pub data_dir: Option<PathBuf>,
    #[arg(long, global = true, value_name = "ID")]
    pub detector_id: Option<String>,
    #[arg(long, global = true, value_name = "ID")]
    pub classifier_id: Option<String>,
    #[arg(long, global = true)]
    pub det_threshold: Option<f64>,
    #[arg(long, global = true)]
    pub clf_threshold: Option<f64>,
    #[arg(long, global = true)]
    pub crop_size_px: Option<u32>,
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    #[arg(long, global = true)]
    pub job_workers: Option<usize>,
    #[arg(long, global = true)]
    pub queue_capacity: Option<usize>,
    /// Frame-rate cap for video sampling
    #[arg(long = "fps-cap", global = true)]
    pub target_fps: Option<f64>,
    #[arg(long, global = true)]
    pub host: Option<String>,
    #[arg(long, global = true)]
    pub port: Option<u16>,
    #[arg(long, global = true)]
    pub max_image_upload_mb: Option<u64>,
    #[arg(long, global = true)]
    pub max_video_upload_mb: Option<u64>,
    #[arg(long, global = true, value_name = "TOKEN")]
    pub operator_token: Option<String>,
}

impl Settings {
    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.to_path_buf(), source })?;
        toml::from_str(&text).map_err(|e| ConfigError::Parse { path: path.to_path_buf(), message: e.to_string() })
    }

    /// Builds settings from all layers. `env` is usually `std::env::var`.
    pub fn resolve(args: &SettingsArgs, env: impl Fn(&str) -> Option<String>) -> Result<Self, ConfigError> {
        let file = args.config.clone().or_else(|| env(ENV_CONFIG).map(PathBuf::from));
        let mut s = match file {
            Some(p) => Self::from_file(&p)?,
            None => Self::default(),
        };
        if let Some(v) = env(ENV_MODEL_DIR) {
            s.model_dir = v.into();
        }
        if let Some(v) = env(ENV_DATA_DIR) {
            s.data_dir = v.into();
        }
        if let Some(v) = env(ENV_OPERATOR_TOKEN) {
            s.operator_token = Some(v);
        }
        s.apply(args);
        s.validate()?;
        Ok(s)
    }

    pub fn load(args: &SettingsArgs) -> Result<Self, ConfigError> {
        Self::resolve(args, |k| std::env::var(k).ok().filter(|v| !v.is_empty()))
    }

    fn apply(&mut self, a: &SettingsArgs) {
        macro_rules! set {
            ($($f:ident),*) => { $( if let Some(v) = &a.$f { self.$f = v.clone(); } )* };
        }
        set!(model_dir, data_dir, detector_id, det_threshold, clf_threshold, crop_size_px, workers, job_workers, queue_capacity, target_fps, host, port, max_image_upload_mb, max_video_upload_mb);
        if a.classifier_id.is_some() {
            self.classifier_id = a.classifier_id.clone();
        }
        if a.operator_token.is_some() {
            self.operator_token = a.operator_token.clone();
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.pipeline().validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if !(self.target_fps > 0.0 && self.target_fps.is_finite()) {
            return Err(ConfigError::Invalid(format!("target_fps must be positive, got {}", self.target_fps)));
        }
        if self.job_workers == 0 || self.queue_capacity == 0 {
            return Err(ConfigError::Invalid("job_workers and queue_capacity must be positive".into()));
        }
        Ok(())
    }

    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            det_threshold: self.det_threshold,
            clf_threshold: self.clf_threshold,
            crop_size_px: self.crop_size_px,
            classify_categories: BTreeSet::from([DetectionCategory::Animal]),
            workers: self.workers,
        }
    }

    pub fn leaderboard_dir(&self) -> PathBuf {
        self.data_dir.join("leaderboard")
    }

    pub fn upload_dir(&self) -> PathBuf {
        self.data_dir.join("uploads")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    #[test]
    fn precedence_flag_env_file_default() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("trapkit.toml");
        std::fs::write(&file, "model_dir = \"from-file\"\ndata_dir = \"file-data\"\ndet_threshold = 0.3\nport = 9000\n").unwrap();
        let env: HashMap<&str, String> =
            HashMap::from([(ENV_CONFIG, file.display().to_string()), (ENV_MODEL_DIR, "from-env".to_string())]);
        let args = SettingsArgs { det_threshold: Some(0.5), ..Default::default() };
        let s = Settings::resolve(&args, |k| env.get(k).cloned()).unwrap();
        assert_eq!(s.model_dir, PathBuf::from("from-env"));
        assert_eq!(s.data_dir, PathBuf::from("file-data"));
        assert_eq!(s.det_threshold, 0.5);
        assert_eq!(s.port, 9000);
        assert_eq!(s.clf_threshold, 0.98);

        let args = SettingsArgs { model_dir: Some("from-flag".into()), ..Default::default() };
        assert_eq!(Settings::resolve(&args, |k| env.get(k).cloned()).unwrap().model_dir, PathBuf::from("from-flag"));
    }

    #[test]
    fn rejects_bad_values() {
        let args = SettingsArgs { det_threshold: Some(1.5), ..Default::default() };
        assert!(Settings::resolve(&args, |_| None).is_err());
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("bad.toml");
        std::fs::write(&file, "unknown_key = 1\n").unwrap();
        let args = SettingsArgs { config: Some(file), ..Default::default() };
        assert!(matches!(Settings::resolve(&args, |_| None), Err(ConfigError::Parse { .. })));
    }
}
