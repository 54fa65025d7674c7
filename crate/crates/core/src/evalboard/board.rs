//! Hidden test sets, scored submissions and the leaderboard store.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use subtle::ConstantTimeEq;

use super::metrics::{evaluate_images, GroundTruth, ImageBoxes, Prediction, DEFAULT_IOU_THRESHOLD};
use super::EvalError;
use crate::backends::oracle::read_sidecar;
use crate::export::MdDocument;
use crate::types::{BBox, DetectionCategory};

pub const RECORDS_FILE: &str = "records.jsonl";
pub const FEEDBACK_FILE: &str = "feedback.jsonl";
pub const TEST_SET_DIR: &str = "test_sets";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub model_id: String,
    pub parameter_count: u64,
    pub precision: f64,
    pub recall: f64,
    pub map_score: f64,
    pub test_set_id: String,
    /// RFC 3339, UTC.
    pub timestamp: String,
}

impl EvalRecord {
    pub fn new(
        model_id: impl Into<String>,
        parameter_count: u64,
        precision: f64,
        recall: f64,
        map_score: f64,
        test_set_id: impl Into<String>,
    ) -> Result<Self, EvalError> {
        let r = Self {
            model_id: model_id.into(),
            parameter_count,
            precision,
            recall,
            map_score,
            test_set_id: test_set_id.into(),
            timestamp: now(),
        };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        for (name, v) in [("precision", self.precision), ("recall", self.recall), ("map_score", self.map_score)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(EvalError::InvalidRecord(format!("{name} {v} outside [0, 1]")));
            }
        }
        if self.parameter_count == 0 {
            return Err(EvalError::InvalidRecord("parameter_count must be positive".into()));
        }
        if self.model_id.is_empty() || self.test_set_id.is_empty() {
            return Err(EvalError::InvalidRecord("model_id and test_set_id must be non-empty".into()));
        }
        Ok(())
    }
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackEntry {
    pub model_id: String,
    pub user_id: String,
    pub verified: bool,
    pub rating: u8,
    pub comment: String,
    pub timestamp: String,
}

/// Feedback as sent by a user. `verified` is derived from the operator
/// token, never taken from the client.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackSubmission {
    pub model_id: String,
    pub user_id: String,
    pub rating: i64,
    #[serde(default)]
    pub comment: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub operator_token: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatingSummary {
    pub model_id: String,
    pub verified_count: usize,
    pub unverified_count: usize,
    /// Mean over verified entries only.
    pub mean_rating: Option<f64>,
}

/// Public description of a hidden test set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestSetDescriptor {
    pub test_set_id: String,
    pub size: usize,
    pub regions: Vec<String>,
    pub classes: Vec<String>,
}

/// Ground truth held server-side. Deliberately not `Serialize`; only
/// [`HiddenTestSet::descriptor`] leaves the process.
#[derive(Clone, PartialEq)]
pub struct HiddenTestSet {
    test_set_id: String,
    regions: Vec<String>,
    images: IndexMap<String, Vec<GroundTruth>>,
}

impl std::fmt::Debug for HiddenTestSet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HiddenTestSet").field("test_set_id", &self.test_set_id).field("images", &self.images.len()).finish()
    }
}

#[derive(Deserialize)]
struct TestSetFile {
    test_set_id: String,
    #[serde(default)]
    regions: Vec<String>,
    images: IndexMap<String, Vec<GroundTruth>>,
}

#[derive(Serialize)]
struct TestSetFileRef<'a> {
    test_set_id: &'a str,
    regions: &'a [String],
    images: &'a IndexMap<String, Vec<GroundTruth>>,
}

fn normalize_key(file: &str) -> String {
    file.replace('\\', "/")
}

impl HiddenTestSet {
    pub fn new(
        test_set_id: impl Into<String>,
        regions: Vec<String>,
        images: impl IntoIterator<Item = (String, Vec<GroundTruth>)>,
    ) -> Result<Self, EvalError> {
        let test_set_id = test_set_id.into();
        if test_set_id.is_empty() {
            return Err(EvalError::InvalidTestSet("empty test_set_id".into()));
        }
        let mut map = IndexMap::new();
        for (k, v) in images {
            if map.insert(normalize_key(&k), v).is_some() {
                return Err(EvalError::InvalidTestSet(format!("duplicate image {k:?}")));
            }
        }
        Ok(Self { test_set_id, regions, images: map })
    }

    /// Ground truth from oracle sidecars. Keys are paths relative to `root`.
    pub fn from_sidecars(test_set_id: impl Into<String>, regions: Vec<String>, root: &Path, files: &[PathBuf]) -> Result<Self, EvalError> {
        let mut images = Vec::with_capacity(files.len());
        for f in files {
            let objects = read_sidecar(f).map_err(|e| EvalError::InvalidTestSet(e.to_string()))?;
            let key = f.strip_prefix(root).unwrap_or(f).to_string_lossy().into_owned();
            images.push((key, objects.into_iter().map(|o| GroundTruth { category: o.category, bbox: o.bbox }).collect()));
        }
        Self::new(test_set_id, regions, images)
    }

    pub fn load(path: &Path) -> Result<Self, EvalError> {
        let text = fs::read_to_string(path).map_err(|e| EvalError::io(path, e))?;
        let raw: TestSetFile =
            serde_json::from_str(&text).map_err(|e| EvalError::InvalidTestSet(format!("{}: {e}", path.display())))?;
        Self::new(raw.test_set_id, raw.regions, raw.images)
    }

    /// Writes the private ground-truth file read by [`HiddenTestSet::load`].
    pub fn save_private(&self, path: &Path) -> Result<(), EvalError> {
        let doc = TestSetFileRef { test_set_id: &self.test_set_id, regions: &self.regions, images: &self.images };
        let text = serde_json::to_string_pretty(&doc).expect("test set serializes");
        fs::write(path, text).map_err(|e| EvalError::io(path, e))
    }

    pub fn id(&self) -> &str {
        &self.test_set_id
    }

    pub fn descriptor(&self) -> TestSetDescriptor {
        let present: HashSet<DetectionCategory> = self.images.values().flatten().map(|g| g.category).collect();
        TestSetDescriptor {
            test_set_id: self.test_set_id.clone(),
            size: self.images.len(),
            regions: self.regions.clone(),
            classes: DetectionCategory::ALL.iter().filter(|c| present.contains(c)).map(|c| c.name().to_string()).collect(),
        }
    }

    /// Pairs submission predictions with ground truth, in test-set order.
    /// Images absent from the submission, or marked failed, have no
    /// predictions.
    pub fn pair(&self, submission: &MdDocument) -> Result<Vec<ImageBoxes>, EvalError> {
        let mut preds: HashMap<String, Vec<Prediction>> = HashMap::new();
        for img in &submission.images {
            let key = normalize_key(&img.file);
            if !self.images.contains_key(&key) {
                return Err(EvalError::MalformedSubmission(format!("image {:?} is not in test set {}", img.file, self.test_set_id)));
            }
            let mut list = Vec::new();
            for d in img.detections.iter().flatten() {
                let bad = |m: String| EvalError::MalformedSubmission(format!("{}: {m}", img.file));
                let category: DetectionCategory = d.category.parse().map_err(|e: crate::types::TypeError| bad(e.to_string()))?;
                let [x, y, w, h] = d.bbox;
                let bbox = BBox::clipped(x, y, w, h).ok_or_else(|| bad(format!("degenerate bbox {:?}", d.bbox)))?;
                list.push(Prediction { category, bbox, confidence: d.conf });
            }
            if preds.insert(key, list).is_some() {
                return Err(EvalError::MalformedSubmission(format!("image {:?} listed twice", img.file)));
            }
        }
        Ok(self
            .images
            .iter()
            .map(|(k, gts)| ImageBoxes { predictions: preds.remove(k).unwrap_or_default(), ground_truth: gts.clone() })
            .collect())
    }

    /// Aggregate metrics for a submission; nothing image-level is returned.
    pub fn evaluate(&self, submission: &MdDocument, model_id: &str, parameter_count: u64) -> Result<EvalRecord, EvalError> {
        let m = evaluate_images(&self.pair(submission)?, DEFAULT_IOU_THRESHOLD);
        EvalRecord::new(model_id, parameter_count, m.precision, m.recall, m.map_score, self.test_set_id.clone())
    }
}

/// Sorted by mAP, then recall, both descending; insertion order otherwise.
pub fn rank_records(records: &mut [EvalRecord]) {
    records.sort_by(|a, b| b.map_score.total_cmp(&a.map_score).then(b.recall.total_cmp(&a.recall)));
}

#[derive(Debug, Default)]
struct Snapshot {
    records: Vec<EvalRecord>,
    feedback: Vec<FeedbackEntry>,
    models: BTreeSet<String>,
}

/// Append-only leaderboard. Writes go through one writer and are appended
/// to JSON-lines files; readers work on immutable snapshots.
pub struct Leaderboard {
    dir: Option<PathBuf>,
    operator_token: Option<String>,
    snapshot: RwLock<Arc<Snapshot>>,
    writer: Mutex<()>,
    test_sets: RwLock<HashMap<String, Arc<HiddenTestSet>>>,
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, EvalError> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(EvalError::io(path, e)),
    };
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| EvalError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| EvalError::InvalidRecord(format!("{}:{}: {e}", path.display(), n + 1)))?);
    }
    Ok(out)
}

impl Leaderboard {
    pub fn in_memory(operator_token: Option<String>) -> Self {
        Self {
            dir: None,
            operator_token,
            snapshot: RwLock::new(Arc::default()),
            writer: Mutex::new(()),
            test_sets: RwLock::default(),
        }
    }

    /// Opens or creates a store in `dir`, loading records, feedback and any
    /// `test_sets/*.json` ground-truth files.
    pub fn open(dir: &Path, operator_token: Option<String>) -> Result<Self, EvalError> {
        fs::create_dir_all(dir).map_err(|e| EvalError::io(dir, e))?;
        let records: Vec<EvalRecord> = read_jsonl(&dir.join(RECORDS_FILE))?;
        let feedback: Vec<FeedbackEntry> = read_jsonl(&dir.join(FEEDBACK_FILE))?;
        let models = records.iter().map(|r| r.model_id.clone()).collect();
        let board = Self {
            dir: Some(dir.to_path_buf()),
            operator_token,
            snapshot: RwLock::new(Arc::new(Snapshot { records, feedback, models })),
            writer: Mutex::new(()),
            test_sets: RwLock::default(),
        };
        let ts_dir = dir.join(TEST_SET_DIR);
        if ts_dir.is_dir() {
            let mut paths: Vec<PathBuf> = fs::read_dir(&ts_dir)
                .map_err(|e| EvalError::io(&ts_dir, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "json"))
                .collect();
            paths.sort();
            for p in paths {
                board.register_test_set(HiddenTestSet::load(&p)?);
            }
        }
        Ok(board)
    }

    fn snapshot(&self) -> Arc<Snapshot> {
        self.snapshot.read().expect("snapshot lock").clone()
    }

    fn append<T: Serialize>(&self, file: &str, item: &T, apply: impl FnOnce(&mut Snapshot)) -> Result<(), EvalError> {
        let _guard = self.writer.lock().expect("writer lock");
        if let Some(dir) = &self.dir {
            let path = dir.join(file);
            let mut line = serde_json::to_string(item).expect("entry serializes");
            line.push('\n');
            let mut f = OpenOptions::new().create(true).append(true).open(&path).map_err(|e| EvalError::io(&path, e))?;
            f.write_all(line.as_bytes()).map_err(|e| EvalError::io(&path, e))?;
            f.sync_data().map_err(|e| EvalError::io(&path, e))?;
        }
        let current = self.snapshot();
        let mut next = Snapshot {
            records: current.records.clone(),
            feedback: current.feedback.clone(),
            models: current.models.clone(),
        };
        apply(&mut next);
        *self.snapshot.write().expect("snapshot lock") = Arc::new(next);
        Ok(())
    }

    pub fn register_test_set(&self, set: HiddenTestSet) {
        self.test_sets.write().expect("test set lock").insert(set.test_set_id.clone(), Arc::new(set));
    }

    /// Copies the ground truth into the store so it survives restarts.
    pub fn install_test_set(&self, set: HiddenTestSet) -> Result<(), EvalError> {
        if let Some(dir) = &self.dir {
            let ts_dir = dir.join(TEST_SET_DIR);
            fs::create_dir_all(&ts_dir).map_err(|e| EvalError::io(&ts_dir, e))?;
            set.save_private(&ts_dir.join(format!("{}.json", set.test_set_id)))?;
        }
        self.register_test_set(set);
        Ok(())
    }

    pub fn test_sets(&self) -> Vec<TestSetDescriptor> {
        let mut out: Vec<_> = self.test_sets.read().expect("test set lock").values().map(|s| s.descriptor()).collect();
        out.sort_by(|a, b| a.test_set_id.cmp(&b.test_set_id));
        out
    }

    /// Makes `model_id` eligible for feedback without a scored record.
    pub fn register_model(&self, model_id: &str) {
        if self.snapshot().models.contains(model_id) {
            return;
        }
        let _guard = self.writer.lock().expect("writer lock");
        let current = self.snapshot();
        let mut models = current.models.clone();
        models.insert(model_id.to_string());
        *self.snapshot.write().expect("snapshot lock") =
            Arc::new(Snapshot { records: current.records.clone(), feedback: current.feedback.clone(), models });
    }

    pub fn has_model(&self, model_id: &str) -> bool {
        self.snapshot().models.contains(model_id)
    }

    /// Stores an externally produced record, e.g. published figures.
    pub fn ingest(&self, record: EvalRecord) -> Result<EvalRecord, EvalError> {
        record.validate()?;
        let stored = record.clone();
        self.append(RECORDS_FILE, &stored, |s| {
            s.models.insert(record.model_id.clone());
            s.records.push(record);
        })?;
        Ok(stored)
    }

    /// Scores a MegaDetector-batch submission against the hidden set and
    /// stores the record.
    pub fn evaluate_submission(
        &self,
        submission: &str,
        test_set_id: &str,
        model_id: &str,
        parameter_count: u64,
    ) -> Result<EvalRecord, EvalError> {
        let set = self
            .test_sets
            .read()
            .expect("test set lock")
            .get(test_set_id)
            .cloned()
            .ok_or_else(|| EvalError::UnknownTestSet(test_set_id.to_string()))?;
        let doc = MdDocument::parse(submission).map_err(|e| EvalError::MalformedSubmission(e.to_string()))?;
        let record = set.evaluate(&doc, model_id, parameter_count)?;
        self.ingest(record)
    }

    pub fn leaderboard(&self, test_set_id: &str) -> Vec<EvalRecord> {
        let mut rows: Vec<EvalRecord> = self.snapshot().records.iter().filter(|r| r.test_set_id == test_set_id).cloned().collect();
        rank_records(&mut rows);
        rows
    }

    fn token_ok(&self, token: Option<&str>) -> bool {
        match (&self.operator_token, token) {
            (Some(expected), Some(given)) => bool::from(expected.as_bytes().ct_eq(given.as_bytes())),
            _ => false,
        }
    }

    pub fn add_feedback(&self, submission: FeedbackSubmission) -> Result<FeedbackEntry, EvalError> {
        if !(1..=5).contains(&submission.rating) {
            return Err(EvalError::InvalidRating(submission.rating));
        }
        if !self.has_model(&submission.model_id) {
            return Err(EvalError::UnknownModel(submission.model_id));
        }
        let entry = FeedbackEntry {
            verified: self.token_ok(submission.operator_token.as_deref()),
            model_id: submission.model_id,
            user_id: submission.user_id,
            rating: submission.rating as u8,
            comment: submission.comment,
            timestamp: now(),
        };
        let stored = entry.clone();
        self.append(FEEDBACK_FILE, &stored, |s| s.feedback.push(entry))?;
        Ok(stored)
    }

    pub fn feedback(&self, model_id: &str) -> Vec<FeedbackEntry> {
        self.snapshot().feedback.iter().filter(|f| f.model_id == model_id).cloned().collect()
    }

    pub fn rating_summary(&self, model_id: &str) -> RatingSummary {
        let snap = self.snapshot();
        let entries: Vec<&FeedbackEntry> = snap.feedback.iter().filter(|f| f.model_id == model_id).collect();
        let verified: Vec<u8> = entries.iter().filter(|f| f.verified).map(|f| f.rating).collect();
        RatingSummary {
            model_id: model_id.to_string(),
            verified_count: verified.len(),
            unverified_count: entries.len() - verified.len(),
            mean_rating: (!verified.is_empty())
                .then(|| verified.iter().map(|&r| r as f64).sum::<f64>() / verified.len() as f64),
        }
    }
}
