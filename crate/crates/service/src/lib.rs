//! HTTP service, job manager and command-line front end for trapkit.

pub mod api;
pub mod config;
pub mod jobs;
pub mod ops;

pub use api::{router, AppState};
pub use config::{Settings, SettingsArgs};
