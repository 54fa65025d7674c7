//! Asynchronous jobs on a bounded worker pool.

use std::collections::{HashMap, VecDeque};
use std::sync::Arc;

use parking_lot::{Condvar, Mutex};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobKind {
    Batch,
    Video,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobState {
    Queued,
    Running,
    Done,
    Failed,
}

impl JobState {
    pub fn can_become(self, next: JobState) -> bool {
        matches!(
            (self, next),
            (JobState::Queued, JobState::Running) | (JobState::Running, JobState::Done) | (JobState::Running, JobState::Failed)
        )
    }

    pub fn is_terminal(self) -> bool {
        matches!(self, JobState::Done | JobState::Failed)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub done: usize,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Job {
    pub job_id: String,
    pub kind: JobKind,
    pub state: JobState,
    pub progress: Progress,
    pub result_uri: Option<String>,
    pub error_message: Option<String>,
    /// Every state the job has been in, oldest first.
    pub history: Vec<JobState>,
}

/// Work receives a progress callback `(done, total)` and returns the
/// serialized result document.
pub type Work = Box<dyn FnOnce(&(dyn Fn(usize, usize) + Sync)) -> Result<String, String> + Send>;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum JobError {
    #[error("job queue is full ({0} waiting)")]
    QueueFull(usize),
    #[error("unknown job {0}")]
    UnknownJob(String),
    #[error("job {id} is {state:?}")]
    NotFinished { id: String, state: JobState },
    #[error("job {id} failed: {message}")]
    Failed { id: String, message: String },
}

struct Slot {
    job: Job,
    result: Option<Arc<String>>,
}

struct Shared {
    jobs: Mutex<HashMap<String, Slot>>,
    queue: Mutex<VecDeque<(String, Work)>>,
    ready: Condvar,
    capacity: usize,
    stopping: Mutex<bool>,
}

impl Shared {
    fn transition(&self, id: &str, next: JobState, f: impl FnOnce(&mut Slot)) {
        let mut jobs = self.jobs.lock();
        let slot = jobs.get_mut(id).expect("job registered before it runs");
        assert!(slot.job.state.can_become(next), "illegal job transition {:?} -> {next:?}", slot.job.state);
        slot.job.state = next;
        slot.job.history.push(next);
        f(slot);
    }

    fn advance(&self, id: &str, done: usize, total: usize) {
        let mut jobs = self.jobs.lock();
        if let Some(slot) = jobs.get_mut(id) {
            let p = &mut slot.job.progress;
            p.total = p.total.max(total);
            p.done = p.done.max(done.min(p.total));
        }
    }

    fn worker(self: Arc<Self>) {
        loop {
            let (id, work) = {
                let mut q = self.queue.lock();
                loop {
                    if *self.stopping.lock() {
                        return;
                    }
                    if let Some(item) = q.pop_front() {
                        break item;
                    }
                    self.ready.wait(&mut q);
                }
            };
            self.transition(&id, JobState::Running, |_| {});
            let this = Arc::clone(&self);
            let progress_id = id.clone();
            let progress = move |done: usize, total: usize| this.advance(&progress_id, done, total);
            let outcome = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| work(&progress)))
                .unwrap_or_else(|_| Err("job panicked".to_string()));
            match outcome {
                Ok(doc) => self.transition(&id, JobState::Done, |s| {
                    s.job.result_uri = Some(format!("/jobs/{id}/result"));
                    s.result = Some(Arc::new(doc));
                }),
                Err(message) => self.transition(&id, JobState::Failed, |s| s.job.error_message = Some(message)),
            }
        }
    }
}

/// FIFO job queue served by a fixed number of worker threads.
#[derive(Clone)]
pub struct JobManager {
    shared: Arc<Shared>,
}

impl JobManager {
    pub fn new(workers: usize, capacity: usize) -> Self {
        let shared = Arc::new(Shared {
            jobs: Mutex::new(HashMap::new()),
            queue: Mutex::new(VecDeque::new()),
            ready: Condvar::new(),
            capacity: capacity.max(1),
            stopping: Mutex::new(false),
        });
        for i in 0..workers.max(1) {
            let s = Arc::clone(&shared);
            std::thread::Builder::new().name(format!("trapkit-job-{i}")).spawn(move || s.worker()).expect("spawn job worker");
        }
        Self { shared }
    }

    /// Queues `work`; `total` is the expected number of progress steps.
    pub fn submit(&self, kind: JobKind, total: usize, work: Work) -> Result<Job, JobError> {
        let mut q = self.shared.queue.lock();
        if q.len() >= self.shared.capacity {
            return Err(JobError::QueueFull(q.len()));
        }
        let job = Job {
            job_id: uuid::Uuid::new_v4().simple().to_string(),
            kind,
            state: JobState::Queued,
            progress: Progress { done: 0, total },
            result_uri: None,
            error_message: None,
            history: vec![JobState::Queued],
        };
        self.shared.jobs.lock().insert(job.job_id.clone(), Slot { job: job.clone(), result: None });
        q.push_back((job.job_id.clone(), work));
        self.shared.ready.notify_one();
        Ok(job)
    }

    pub fn get(&self, id: &str) -> Option<Job> {
        self.shared.jobs.lock().get(id).map(|s| s.job.clone())
    }

    pub fn list(&self) -> Vec<Job> {
        self.shared.jobs.lock().values().map(|s| s.job.clone()).collect()
    }

    pub fn result(&self, id: &str) -> Result<Arc<String>, JobError> {
        let jobs = self.shared.jobs.lock();
        let slot = jobs.get(id).ok_or_else(|| JobError::UnknownJob(id.to_string()))?;
        match (&slot.result, slot.job.state) {
            (Some(r), JobState::Done) => Ok(Arc::clone(r)),
            (_, JobState::Failed) => Err(JobError::Failed {
                id: id.to_string(),
                message: slot.job.error_message.clone().unwrap_or_default(),
            }),
            (_, state) => Err(JobError::NotFinished { id: id.to_string(), state }),
        }
    }

    /// Stops idle workers; running jobs finish first.
    pub fn shutdown(&self) {
        *self.shared.stopping.lock() = true;
        let _q = self.shared.queue.lock();
        self.shared.ready.notify_all();
    }
}
