//! Location and person filtering before images are shared.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use little_exif::exif_tag::ExifTag;
use little_exif::ifd::ExifTagGroup;
use little_exif::metadata::Metadata;
use little_exif::rational::uR64;
use serde::{Deserialize, Serialize};

use super::ExportError;
use crate::pipeline::PipelineResult;
use crate::types::{DetectionCategory, GeoPoint};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GpsMode {
    Remove,
    Grid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScrubPolicy {
    pub gps_mode: GpsMode,
    pub grid_degrees: f64,
    pub exclude_person_images: bool,
}

impl Default for ScrubPolicy {
    fn default() -> Self {
        Self { gps_mode: GpsMode::Remove, grid_degrees: 0.1, exclude_person_images: true }
    }
}

impl ScrubPolicy {
    pub fn validate(&self) -> Result<(), ExportError> {
        if self.gps_mode == GpsMode::Grid && !(self.grid_degrees > 0.0 && self.grid_degrees.is_finite()) {
            return Err(ExportError::InvalidPolicy(format!("grid_degrees must be positive, got {}", self.grid_degrees)));
        }
        Ok(())
    }
}

/// One file to scrub, with whether a person was detected in it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScrubItem {
    pub path: PathBuf,
    pub contains_person: bool,
}

impl ScrubItem {
    pub fn file(path: impl Into<PathBuf>) -> Self {
        Self { path: path.into(), contains_person: false }
    }

    pub fn from_result(r: &PipelineResult) -> Self {
        Self {
            path: r.image.path.clone(),
            contains_person: r.detections.iter().any(|d| d.detection.category == DetectionCategory::Person),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScrubbedFile {
    pub source: PathBuf,
    pub output: PathBuf,
    pub gps_before: Option<GeoPoint>,
    pub gps_after: Option<GeoPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScrubFailure {
    pub source: PathBuf,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScrubReport {
    pub policy: ScrubPolicy,
    pub shared: Vec<ScrubbedFile>,
    pub excluded_person_images: Vec<PathBuf>,
    pub failed: Vec<ScrubFailure>,
}

/// Nearest multiple of `grid` (halves away from zero).
pub fn snap(value: f64, grid: f64) -> f64 {
    (value / grid).round() * grid
}

pub fn snap_point(p: GeoPoint, grid: f64) -> GeoPoint {
    GeoPoint { lat: snap(p.lat, grid).clamp(-90.0, 90.0), lon: snap(p.lon, grid).clamp(-180.0, 180.0) }
}

/// Degrees, minutes and seconds as EXIF rationals; seconds carry six decimals.
fn to_dms(value: f64) -> Vec<uR64> {
    let micro_arcsec = (value.abs() * 3600.0 * 1e6).round() as u64;
    let deg = micro_arcsec / 3_600_000_000;
    let rest = micro_arcsec % 3_600_000_000;
    let min = rest / 60_000_000;
    let sec = rest % 60_000_000;
    vec![
        uR64 { nominator: deg as u32, denominator: 1 },
        uR64 { nominator: min as u32, denominator: 1 },
        uR64 { nominator: sec as u32, denominator: 1_000_000 },
    ]
}

fn from_dms(parts: &[uR64], reference: &str) -> Option<f64> {
    if parts.len() != 3 || parts.iter().any(|r| r.denominator == 0) {
        return None;
    }
    let v = |r: &uR64| r.nominator as f64 / r.denominator as f64;
    let deg = v(&parts[0]) + v(&parts[1]) / 60.0 + v(&parts[2]) / 3600.0;
    Some(if reference.trim_end_matches('\0').eq_ignore_ascii_case("S") || reference.trim_end_matches('\0').eq_ignore_ascii_case("W") {
        -deg
    } else {
        deg
    })
}

/// GPS position stored in the file's EXIF, if any.
pub fn read_gps(path: &Path) -> Option<GeoPoint> {
    let meta = Metadata::new_from_path(path).ok()?;
    let find = |tag: ExifTag| meta.get_tag(&tag).next().cloned();
    let lat = match find(ExifTag::GPSLatitude(Vec::new()))? {
        ExifTag::GPSLatitude(v) => v,
        _ => return None,
    };
    let lon = match find(ExifTag::GPSLongitude(Vec::new()))? {
        ExifTag::GPSLongitude(v) => v,
        _ => return None,
    };
    let text = |t: Option<ExifTag>| match t {
        Some(ExifTag::GPSLatitudeRef(s)) | Some(ExifTag::GPSLongitudeRef(s)) => s,
        _ => String::new(),
    };
    let lat_ref = text(find(ExifTag::GPSLatitudeRef(String::new())));
    let lon_ref = text(find(ExifTag::GPSLongitudeRef(String::new())));
    GeoPoint::new(from_dms(&lat, &lat_ref)?, from_dms(&lon, &lon_ref)?).ok()
}

/// Writes `p` into the EXIF of `path`, replacing any position there.
pub fn write_gps(path: &Path, p: GeoPoint) -> std::io::Result<()> {
    let mut meta = Metadata::new_from_path(path).unwrap_or_else(|_| Metadata::new());
    meta.set_tag(ExifTag::GPSLatitudeRef(if p.lat < 0.0 { "S" } else { "N" }.into()));
    meta.set_tag(ExifTag::GPSLatitude(to_dms(p.lat)));
    meta.set_tag(ExifTag::GPSLongitudeRef(if p.lon < 0.0 { "W" } else { "E" }.into()));
    meta.set_tag(ExifTag::GPSLongitude(to_dms(p.lon)));
    meta.write_to_file(path)
}

fn remove_gps(meta: &mut Metadata) {
    let tags: HashSet<u16> = meta
        .get_ifds()
        .iter()
        .filter(|ifd| ifd.get_ifd_type() == ExifTagGroup::GPS)
        .flat_map(|ifd| ifd.get_tags().iter().map(|t| t.as_u16()))
        .collect();
    for hex in tags {
        meta.remove_tag_by_hex_group(hex, ExifTagGroup::GPS);
    }
}

fn scrub_file(src: &Path, dest: &Path, policy: &ScrubPolicy) -> Result<(Option<GeoPoint>, Option<GeoPoint>), String> {
    let before = read_gps(src);
    fs::copy(src, dest).map_err(|e| e.to_string())?;
    let mut meta = match Metadata::new_from_path(dest) {
        Ok(m) => m,
        // nothing readable to keep: drop whatever metadata the container holds
        Err(_) => {
            Metadata::file_clear_metadata(dest).map_err(|e| format!("cannot clear metadata: {e}"))?;
            return Ok((before, None));
        }
    };
    remove_gps(&mut meta);
    let after = match (policy.gps_mode, before) {
        (GpsMode::Grid, Some(p)) => {
            let snapped = snap_point(p, policy.grid_degrees);
            meta.set_tag(ExifTag::GPSLatitudeRef(if snapped.lat < 0.0 { "S" } else { "N" }.into()));
            meta.set_tag(ExifTag::GPSLatitude(to_dms(snapped.lat)));
            meta.set_tag(ExifTag::GPSLongitudeRef(if snapped.lon < 0.0 { "W" } else { "E" }.into()));
            meta.set_tag(ExifTag::GPSLongitude(to_dms(snapped.lon)));
            Some(snapped)
        }
        _ => None,
    };
    meta.write_to_file(dest).map_err(|e| format!("cannot write metadata: {e}"))?;
    Ok((before, after))
}

/// Writes scrubbed copies into `out_dir`. Person images are left out when
/// the policy says so; files that cannot be scrubbed are reported and not
/// shared.
pub fn scrub_metadata(items: &[ScrubItem], policy: &ScrubPolicy, out_dir: &Path) -> Result<ScrubReport, ExportError> {
    policy.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| ExportError::io(out_dir, e))?;
    let mut report = ScrubReport { policy: policy.clone(), shared: Vec::new(), excluded_person_images: Vec::new(), failed: Vec::new() };
    let mut names: HashSet<PathBuf> = HashSet::new();
    for item in items {
        if policy.exclude_person_images && item.contains_person {
            report.excluded_person_images.push(item.path.clone());
            continue;
        }
        let name = item.path.file_name().map(PathBuf::from).unwrap_or_else(|| "image".into());
        let mut dest = out_dir.join(&name);
        let mut n = 1;
        while names.contains(&dest) {
            dest = out_dir.join(format!("{n}-{}", name.display()));
            n += 1;
        }
        match scrub_file(&item.path, &dest, policy) {
            Ok((gps_before, gps_after)) => {
                names.insert(dest.clone());
                report.shared.push(ScrubbedFile { source: item.path.clone(), output: dest, gps_before, gps_after });
            }
            Err(error) => {
                let _ = fs::remove_file(&dest);
                report.failed.push(ScrubFailure { source: item.path.clone(), error });
            }
        }
    }
    Ok(report)
}
