use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::DatakitError;
use crate::backends::{sha256_hex, LoadedImage};
use crate::pipeline::{crop_detection, PipelineResult};
use crate::types::{BBox, DetectionCategory};

/// File name of the crop manifest written next to the label directories.
pub const CROP_MANIFEST: &str = "crops.csv";

/// A labelled classifier-training crop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CropRecord {
    pub crop_path: PathBuf,
    pub label: String,
    pub source_image: PathBuf,
    pub bbox: BBox,
    pub confidence: f64,
}

#[derive(Serialize, Deserialize)]
struct CsvRow {
    crop_path: String,
    label: String,
    source_image: String,
    bbox: String,
    confidence: f64,
}

/// Crops every animal detection, labels it with its image's label and
/// writes it to `out_dir/<label>/`, plus the manifest CSV.
pub fn build_crop_dataset(
    results: &[PipelineResult],
    image_labels: &HashMap<PathBuf, String>,
    crop_size_px: u32,
    out_dir: &Path,
) -> Result<Vec<CropRecord>, DatakitError> {
    let mut records = Vec::new();
    for result in results {
        let animals: Vec<_> = result
            .detections
            .iter()
            .map(|d| &d.detection)
            .filter(|d| d.category == DetectionCategory::Animal)
            .collect();
        if animals.is_empty() {
            continue;
        }
        let source = &result.image.path;
        let label = match image_labels.get(source) {
            Some(l) if !l.trim().is_empty() => l.clone(),
            _ => return Err(DatakitError::UnlabeledImage(source.clone())),
        };
        let loaded = LoadedImage::open(&result.image)
            .map_err(|e| DatakitError::ImageDecode { path: source.clone(), message: e.to_string() })?;
        let label_dir = out_dir.join(dir_name(&label));
        fs::create_dir_all(&label_dir).map_err(|e| DatakitError::io(&label_dir, e))?;

        let stem = source.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
        let tag = &sha256_hex(source.to_string_lossy().as_bytes())[..8];
        for (k, det) in animals.into_iter().enumerate() {
            let crop = crop_detection(&loaded.pixels, &det.bbox, crop_size_px)
                .map_err(|e| DatakitError::ImageDecode { path: source.clone(), message: e.to_string() })?;
            let crop_path = label_dir.join(format!("{stem}-{tag}-{k:03}.png"));
            crop.save(&crop_path).map_err(|e| DatakitError::ImageDecode { path: crop_path.clone(), message: e.to_string() })?;
            records.push(CropRecord {
                crop_path,
                label: label.clone(),
                source_image: source.clone(),
                bbox: det.bbox,
                confidence: det.confidence(),
            });
        }
    }
    fs::create_dir_all(out_dir).map_err(|e| DatakitError::io(out_dir, e))?;
    write_crop_manifest(&out_dir.join(CROP_MANIFEST), &records)?;
    Ok(records)
}

fn dir_name(label: &str) -> String {
    label.chars().map(|c| if c.is_alphanumeric() || matches!(c, '-' | '_' | '.' | ' ') { c } else { '_' }).collect()
}

/// Writes the manifest; crop paths under the manifest's directory are stored relative to it.
pub fn write_crop_manifest(path: &Path, records: &[CropRecord]) -> Result<(), DatakitError> {
    let base = path.parent().unwrap_or(Path::new(""));
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for r in records {
        let rel = r.crop_path.strip_prefix(base).unwrap_or(&r.crop_path);
        w.serialize(CsvRow {
            crop_path: rel.to_string_lossy().into_owned(),
            label: r.label.clone(),
            source_image: r.source_image.to_string_lossy().into_owned(),
            bbox: serde_json::to_string(&r.bbox).expect("bbox serializes"),
            confidence: r.confidence,
        })
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| DatakitError::io(path, e))
}

pub fn read_crop_manifest(path: &Path) -> Result<Vec<CropRecord>, DatakitError> {
    let base = path.parent().unwrap_or(Path::new(""));
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut out = Vec::new();
    for row in r.deserialize::<CsvRow>() {
        let row = row.map_err(|e| csv_err(path, e))?;
        let bad = |message: String| DatakitError::BadManifest { path: path.to_path_buf(), message };
        if row.label.trim().is_empty() {
            return Err(bad(format!("empty label for {}", row.crop_path)));
        }
        let bbox: BBox = serde_json::from_str(&row.bbox).map_err(|e| bad(e.to_string()))?;
        let crop_path = PathBuf::from(&row.crop_path);
        out.push(CropRecord {
            crop_path: if crop_path.is_absolute() { crop_path } else { base.join(crop_path) },
            label: row.label,
            source_image: PathBuf::from(row.source_image),
            bbox,
            confidence: row.confidence,
        });
    }
    Ok(out)
}

fn csv_err(path: &Path, e: csv::Error) -> DatakitError {
    DatakitError::BadManifest { path: path.to_path_buf(), message: e.to_string() }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::ClassifiedDetection;
    use crate::types::{Detection, ImageRef};

    fn result(dir: &Path, name: &str, cats: &[DetectionCategory]) -> PipelineResult {
        let path = dir.join(name);
        image::RgbImage::from_pixel(64, 48, image::Rgb([30, 160, 30])).save(&path).unwrap();
        let dets = cats
            .iter()
            .enumerate()
            .map(|(i, c)| ClassifiedDetection {
                detection: Detection::new(BBox::new(0.1 * i as f64, 0.1, 0.3, 0.4).unwrap(), *c, 0.9 - 0.1 * i as f64).unwrap(),
                scores: None,
            })
            .collect();
        PipelineResult::new(ImageRef::new(path), dets, 0.98)
    }

    #[test]
    fn crops_inherit_image_labels() {
        let src = tempfile::tempdir().unwrap();
        let out = tempfile::tempdir().unwrap();
        let a = result(src.path(), "a.png", &[DetectionCategory::Animal, DetectionCategory::Animal]);
        let b = result(src.path(), "b.png", &[]);
        let c = result(src.path(), "c.png", &[DetectionCategory::Animal, DetectionCategory::Person]);
        let labels = HashMap::from([
            (a.image.path.clone(), "Dasyprocta".to_string()),
            (c.image.path.clone(), "Tapirus".to_string()),
        ]);
        let crops = build_crop_dataset(&[a, b, c], &labels, 32, out.path()).unwrap();
        assert_eq!(crops.len(), 3);
        assert_eq!(crops.iter().filter(|c| c.label == "Dasyprocta").count(), 2);
        for c in &crops {
            assert!(c.crop_path.starts_with(out.path().join(&c.label)));
            assert_eq!(image::image_dimensions(&c.crop_path).unwrap(), (32, 32));
        }
        assert_eq!(read_crop_manifest(&out.path().join(CROP_MANIFEST)).unwrap(), crops);
    }

    #[test]
    fn unlabeled_image_with_animals_is_an_error() {
        let src = tempfile::tempdir().unwrap();
        let out = tempfile::tempdir().unwrap();
        let a = result(src.path(), "a.png", &[DetectionCategory::Animal]);
        let err = build_crop_dataset(&[a], &HashMap::new(), 32, out.path());
        assert!(matches!(err, Err(DatakitError::UnlabeledImage(_))));
        // people only: no label needed
        let p = result(src.path(), "p.png", &[DetectionCategory::Person]);
        assert!(build_crop_dataset(&[p], &HashMap::new(), 32, out.path()).unwrap().is_empty());
    }
}
