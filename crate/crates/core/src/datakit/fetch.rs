//! Resumable, checksum-verified dataset download and unpacking.
//!
//! Layout under `dest_dir`:
//! `<id>.tar.gz` is the verified archive, `<id>.tar.gz.part<N>` are the
//! in-flight chunks (kept across interruptions so a re-run resumes), and
//! `<id>/` holds the unpacked files once `<id>/.complete` exists.

use std::fs::{self, File, OpenOptions};
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use flate2::read::GzDecoder;

use super::{CatalogEntry, DatakitError};
use crate::backends::sha256_file;

const COMPLETE_MARKER: &str = ".complete";

#[derive(Debug, Clone, PartialEq)]
pub struct FetchOptions {
    /// Parallel range requests used when the server supports them.
    pub chunks: usize,
    /// Chunks are never smaller than this.
    pub min_chunk_bytes: u64,
    pub timeout: Duration,
}

impl Default for FetchOptions {
    fn default() -> Self {
        Self { chunks: 4, min_chunk_bytes: 1 << 20, timeout: Duration::from_secs(300) }
    }
}

/// An unpacked dataset on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetHandle {
    pub dataset_id: String,
    pub root: PathBuf,
    pub archive: PathBuf,
}

impl DatasetHandle {
    /// Regular files under `root`, sorted, excluding the completion marker.
    pub fn files(&self) -> io::Result<Vec<PathBuf>> {
        let mut out = Vec::new();
        let mut stack = vec![self.root.clone()];
        while let Some(dir) = stack.pop() {
            for entry in fs::read_dir(&dir)? {
                let path = entry?.path();
                if path.is_dir() {
                    stack.push(path);
                } else if path.file_name().is_some_and(|n| n != COMPLETE_MARKER) {
                    out.push(path);
                }
            }
        }
        out.sort();
        Ok(out)
    }
}

pub fn fetch_dataset(entry: &CatalogEntry, dest_dir: &Path) -> Result<DatasetHandle, DatakitError> {
    fetch_dataset_with(entry, dest_dir, &FetchOptions::default())
}

pub fn fetch_dataset_with(entry: &CatalogEntry, dest_dir: &Path, opts: &FetchOptions) -> Result<DatasetHandle, DatakitError> {
    entry.validate()?;
    fs::create_dir_all(dest_dir).map_err(|e| DatakitError::io(dest_dir, e))?;
    let expected = entry.archive_checksum.to_ascii_lowercase();
    let archive = dest_dir.join(format!("{}.tar.gz", entry.dataset_id));
    let root = dest_dir.join(&entry.dataset_id);
    let handle = DatasetHandle { dataset_id: entry.dataset_id.clone(), root: root.clone(), archive: archive.clone() };

    let marker = root.join(COMPLETE_MARKER);
    if fs::read_to_string(&marker).is_ok_and(|s| s.trim() == expected) {
        return Ok(handle);
    }

    if !archive.is_file() {
        download(&entry.download_url, &archive, opts)?;
        let actual = sha256_file(&archive).map_err(|e| DatakitError::io(&archive, e))?;
        if actual != expected {
            let _ = fs::remove_file(&archive);
            return Err(DatakitError::ChecksumMismatch { path: archive, expected, actual });
        }
    } else {
        let actual = sha256_file(&archive).map_err(|e| DatakitError::io(&archive, e))?;
        if actual != expected {
            return Err(DatakitError::ChecksumMismatch { path: archive, expected, actual });
        }
    }

    unpack(&archive, &root, dest_dir, &entry.dataset_id)?;
    fs::write(&marker, &expected).map_err(|e| DatakitError::io(&marker, e))?;
    Ok(handle)
}

fn unpack(archive: &Path, root: &Path, dest_dir: &Path, id: &str) -> Result<(), DatakitError> {
    let staging = dest_dir.join(format!(".{id}.unpacking"));
    if staging.exists() {
        fs::remove_dir_all(&staging).map_err(|e| DatakitError::io(&staging, e))?;
    }
    fs::create_dir_all(&staging).map_err(|e| DatakitError::io(&staging, e))?;
    let file = File::open(archive).map_err(|e| DatakitError::io(archive, e))?;
    tar::Archive::new(GzDecoder::new(file)).unpack(&staging).map_err(|e| DatakitError::io(archive, e))?;
    if root.exists() {
        fs::remove_dir_all(root).map_err(|e| DatakitError::io(root, e))?;
    }
    fs::rename(&staging, root).map_err(|e| DatakitError::io(root, e))
}

fn part_path(archive: &Path, i: usize) -> PathBuf {
    let mut name = archive.file_name().expect("archive has a name").to_os_string();
    name.push(format!(".part{i}"));
    archive.with_file_name(name)
}

fn download(url: &str, archive: &Path, opts: &FetchOptions) -> Result<(), DatakitError> {
    if let Some(local) = url.strip_prefix("file://") {
        let src = Path::new(local);
        fs::copy(src, archive).map_err(|e| DatakitError::io(src, e))?;
        return Ok(());
    }

    let agent: ureq::Agent = ureq::Agent::config_builder().timeout_global(Some(opts.timeout)).build().into();
    let ranges = match probe_length(&agent, url)? {
        Some(len) if len > 0 => plan_chunks(len, opts),
        _ => Vec::new(),
    };

    if ranges.is_empty() {
        // no range support: a plain, non-resumable transfer
        let part = part_path(archive, 0);
        let mut resp = agent.get(url).call().map_err(|e| DatakitError::Network(e.to_string()))?;
        let mut out = File::create(&part).map_err(|e| DatakitError::io(&part, e))?;
        io::copy(&mut resp.body_mut().as_reader(), &mut out).map_err(|e| DatakitError::Network(e.to_string()))?;
        drop(out);
        return fs::rename(&part, archive).map_err(|e| DatakitError::io(archive, e));
    }

    let results: Vec<Result<(), DatakitError>> = std::thread::scope(|s| {
        let handles: Vec<_> = ranges
            .iter()
            .enumerate()
            .map(|(i, &(start, end))| {
                let agent = agent.clone();
                let part = part_path(archive, i);
                s.spawn(move || fetch_range(&agent, url, &part, start, end))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("chunk thread panicked")).collect()
    });
    results.into_iter().collect::<Result<Vec<()>, _>>()?;

    let assembling = part_path(archive, usize::MAX);
    let mut out = File::create(&assembling).map_err(|e| DatakitError::io(&assembling, e))?;
    for i in 0..ranges.len() {
        let part = part_path(archive, i);
        let mut f = File::open(&part).map_err(|e| DatakitError::io(&part, e))?;
        io::copy(&mut f, &mut out).map_err(|e| DatakitError::io(&assembling, e))?;
    }
    out.sync_all().map_err(|e| DatakitError::io(&assembling, e))?;
    drop(out);
    fs::rename(&assembling, archive).map_err(|e| DatakitError::io(archive, e))?;
    for i in 0..ranges.len() {
        let _ = fs::remove_file(part_path(archive, i));
    }
    Ok(())
}

/// Total length when the server honours byte ranges, else `None`.
fn probe_length(agent: &ureq::Agent, url: &str) -> Result<Option<u64>, DatakitError> {
    let resp = agent.get(url).header("Range", "bytes=0-0").call().map_err(|e| DatakitError::Network(e.to_string()))?;
    if resp.status().as_u16() != 206 {
        return Ok(None);
    }
    Ok(resp
        .headers()
        .get("content-range")
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.rsplit_once('/'))
        .and_then(|(_, total)| total.trim().parse().ok()))
}

/// Inclusive byte ranges covering `[0, len)`.
fn plan_chunks(len: u64, opts: &FetchOptions) -> Vec<(u64, u64)> {
    let by_size = len.div_ceil(opts.min_chunk_bytes.max(1));
    let n = (opts.chunks.max(1) as u64).min(by_size).max(1);
    let step = len.div_ceil(n);
    (0..n).map(|i| (i * step, ((i + 1) * step).min(len) - 1)).filter(|(a, b)| a <= b).collect()
}

fn fetch_range(agent: &ureq::Agent, url: &str, part: &Path, start: u64, end: u64) -> Result<(), DatakitError> {
    let want = end - start + 1;
    let have = fs::metadata(part).map(|m| m.len()).unwrap_or(0);
    if have > want {
        fs::remove_file(part).map_err(|e| DatakitError::io(part, e))?;
    } else if have == want {
        return Ok(());
    }
    let have = fs::metadata(part).map(|m| m.len()).unwrap_or(0);
    let mut resp = agent
        .get(url)
        .header("Range", format!("bytes={}-{}", start + have, end))
        .call()
        .map_err(|e| DatakitError::Network(e.to_string()))?;
    if resp.status().as_u16() != 206 {
        return Err(DatakitError::Network(format!("expected 206 for a range request, got {}", resp.status())));
    }
    let mut out = OpenOptions::new().create(true).append(true).open(part).map_err(|e| DatakitError::io(part, e))?;
    let mut reader = resp.body_mut().as_reader().take(want - have);
    let copied = io::copy(&mut reader, &mut out);
    out.flush().map_err(|e| DatakitError::io(part, e))?;
    let copied = copied.map_err(|e| DatakitError::Network(format!("transfer interrupted: {e}")))?;
    if copied != want - have {
        return Err(DatakitError::Network(format!("transfer interrupted after {} of {} bytes", have + copied, want)));
    }
    Ok(())
}
