//! Python bindings. Structured values cross the boundary as JSON text;
//! the `trapkit` Python package is this extension module.

use std::collections::BTreeMap;
use std::path::PathBuf;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use trapkit::backends::{install_oracle_models as install_models, load_backend, ModelZoo, OracleDetectorConfig};
use trapkit::evalboard::{evaluate_images, triage_metrics as triage, ImageBoxes, TriageItem};
use trapkit::export::{MdDocument, MdOptions};
use trapkit::pipeline::{run_batch, PipelineConfig};
use trapkit::{BBox, GeoPoint, ImageRef};

fn err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn bbox(v: [f64; 4]) -> PyResult<BBox> {
    BBox::new(v[0], v[1], v[2], v[3]).map_err(err)
}

/// Intersection over union of two `[x, y, w, h]` boxes in normalized coordinates.
#[pyfunction]
fn iou(a: [f64; 4], b: [f64; 4]) -> PyResult<f64> {
    Ok(trapkit::iou(&bbox(a)?, &bbox(b)?))
}

/// `images_json`: list of `{predictions: [{category, bbox, confidence}], ground_truth: [{category, bbox}]}`.
/// Returns the metrics as JSON.
#[pyfunction]
#[pyo3(signature = (images_json, iou_threshold = 0.5))]
fn evaluate_detections(images_json: &str, iou_threshold: f64) -> PyResult<String> {
    let images: Vec<ImageBoxes> = serde_json::from_str(images_json).map_err(err)?;
    serde_json::to_string(&evaluate_images(&images, iou_threshold)).map_err(err)
}

/// `items`: `(predicted, score, truth)` triples.
#[pyfunction]
fn triage_metrics(items: Vec<(String, f64, String)>, threshold: f64) -> PyResult<String> {
    let items: Vec<TriageItem> = items.into_iter().map(|(predicted, score, truth)| TriageItem { predicted, score, truth }).collect();
    serde_json::to_string(&triage(&items, threshold)).map_err(err)
}

/// Video label from `(label, confidence)` frame votes; returns `(label, tally)`.
#[pyfunction]
fn majority_vote(votes: Vec<(String, f64)>) -> PyResult<(String, BTreeMap<String, usize>)> {
    trapkit::video::majority_vote(&votes).map_err(err)
}

/// Coarsens a coordinate to a `grid`-degree lattice.
#[pyfunction]
fn snap_gps(lat: f64, lon: f64, grid: f64) -> PyResult<(f64, f64)> {
    let p = trapkit::export::scrub::snap_point(GeoPoint::new(lat, lon).map_err(err)?, grid);
    Ok((p.lat, p.lon))
}

/// Writes `n` synthetic scenes with sidecar ground truth; returns their paths.
#[pyfunction]
#[pyo3(signature = (dir, n, seed = 0))]
fn generate_corpus(dir: PathBuf, n: usize, seed: u64) -> PyResult<Vec<PathBuf>> {
    Ok(trapkit::synth::generate_corpus(&dir, n, seed).map_err(err)?.into_iter().map(|i| i.path).collect())
}

/// Installs the oracle detector and classifier into a model directory.
#[pyfunction]
fn install_oracle_models(model_dir: PathBuf) -> PyResult<Vec<String>> {
    let (d, c) = install_models(&model_dir, &OracleDetectorConfig::default(), &trapkit::synth::DEFAULT_LABELS).map_err(err)?;
    Ok(vec![d.model_id, c.model_id])
}

/// Runs the pipeline over `images` and returns MegaDetector-batch JSON with
/// paths relative to `root` (when given).
#[pyfunction]
#[pyo3(signature = (images, model_dir, detector_id, classifier_id = None, det_threshold = 0.2, clf_threshold = 0.98, root = None))]
#[allow(clippy::too_many_arguments)]
fn run_pipeline(
    py: Python<'_>,
    images: Vec<PathBuf>,
    model_dir: PathBuf,
    detector_id: &str,
    classifier_id: Option<&str>,
    det_threshold: f64,
    clf_threshold: f64,
    root: Option<PathBuf>,
) -> PyResult<String> {
    let zoo = ModelZoo::open(&model_dir).map_err(err)?;
    let detector = load_backend(&zoo.get(detector_id).map_err(err)?).map_err(err)?.detector().ok_or_else(|| err("not a detector"))?;
    let classifier = match classifier_id {
        Some(id) => Some(load_backend(&zoo.get(id).map_err(err)?).map_err(err)?.classifier().ok_or_else(|| err("not a classifier"))?),
        None => None,
    };
    let config = PipelineConfig { det_threshold, clf_threshold, ..Default::default() };
    let refs: Vec<ImageRef> = images.into_iter().map(ImageRef::new).collect();
    let outcomes = py
        .detach(|| run_batch(&refs, detector.as_ref(), classifier.as_deref(), &config, &|_, _| {}))
        .map_err(err)?;
    Ok(MdDocument::from_outcomes(&outcomes, &MdOptions { relative_to: root }).to_json_string())
}

#[pymodule]
#[pyo3(name = "trapkit")]
fn trapkit_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_function(wrap_pyfunction!(iou, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_detections, m)?)?;
    m.add_function(wrap_pyfunction!(triage_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(majority_vote, m)?)?;
    m.add_function(wrap_pyfunction!(snap_gps, m)?)?;
    m.add_function(wrap_pyfunction!(generate_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(install_oracle_models, m)?)?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    Ok(())
}
