//! Episode persistence: a filesystem object store with temp-file + rename
//! atomicity, a checksummed episode payload format, and an in-memory
//! metadata index that never holds frame payloads.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use thiserror::Error;

use crate::envsim::{Action, EpisodeStatus, Observation};
use crate::policy::PolicyParams;

pub const EPISODE_MAGIC: &[u8; 7] = b"SOPEPS1";
const TEMP_MARKER: &str = ".tmp.";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("object not found: {0}")]
    NotFound(String),
    #[error("integrity error: {0}")]
    Integrity(String),
    #[error("invalid record: {0}")]
    InvalidRecord(String),
    #[error("invalid key: {0}")]
    InvalidKey(String),
    #[error("injected crash during write of {0}")]
    InjectedCrash(String),
    #[error("io error: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EpisodeId(pub u128);

impl fmt::Display for EpisodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:032x}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Source {
    Online,
    Offline,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub observation: Observation,
    pub action: Action,
    pub reward: f64,
    /// Action came from the expert (intervention or demonstration).
    pub expert_flag: bool,
    /// Advantage bit stamped by the learner for advantage-conditioned training.
    pub advantage_indicator: Option<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRecord {
    pub episode_id: EpisodeId,
    pub task_id: u32,
    pub domain_seed: u64,
    pub policy_version: u64,
    pub frames: Vec<Frame>,
    pub status: EpisodeStatus,
    /// Half-open `[start, end)` frame ranges under expert control.
    pub intervention_spans: Vec<(u32, u32)>,
    pub source: Source,
    /// Environment steps taken, including intervention steps.
    pub sim_duration: u64,
}

pub fn episode_key(task_id: u32, id: EpisodeId) -> String {
    format!("episodes/{task_id}/{id}")
}

/// Spans covering every maximal run of expert-flagged frames.
pub fn spans_from_flags(flags: impl IntoIterator<Item = bool>) -> Vec<(u32, u32)> {
    let mut spans = Vec::new();
    let mut start = None;
    let mut n = 0u32;
    for (i, f) in flags.into_iter().enumerate() {
        let i = i as u32;
        match (f, start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                spans.push((s, i));
                start = None;
            }
            _ => {}
        }
        n = i + 1;
    }
    if let Some(s) = start {
        spans.push((s, n));
    }
    spans
}

impl EpisodeRecord {
    pub fn storage_key(&self) -> String {
        episode_key(self.task_id, self.episode_id)
    }

    pub fn intervention_frames(&self) -> usize {
        self.intervention_spans
            .iter()
            .map(|(s, e)| (e - s) as usize)
            .sum()
    }

    pub fn validate(&self) -> Result<(), StoreError> {
        let bad = |m: String| Err(StoreError::InvalidRecord(m));
        if !self.status.is_terminal() {
            return bad("episode status must be terminal".into());
        }
        let n = self.frames.len() as u32;
        let mut prev_end = 0;
        for (i, &(s, e)) in self.intervention_spans.iter().enumerate() {
            if s >= e || e > n || (i > 0 && s < prev_end) {
                return bad(format!(
                    "span {i} ({s}, {e}) is empty, overlapping or out of bounds"
                ));
            }
            prev_end = e;
        }
        let mut span_iter = self.intervention_spans.iter().peekable();
        for (i, f) in self.frames.iter().enumerate() {
            let i = i as u32;
            while span_iter.peek().is_some_and(|(_, e)| *e <= i) {
                span_iter.next();
            }
            let inside = span_iter.peek().is_some_and(|(s, e)| *s <= i && i < *e);
            if inside != f.expert_flag {
                return bad(format!("frame {i} expert_flag disagrees with spans"));
            }
            if f.reward != 0.0 && f.reward != 1.0 {
                return bad(format!("frame {i} reward {} outside {{0, 1}}", f.reward));
            }
        }
        if let Some(first) = self.frames.first() {
            let dim = first.observation.len();
            if self.frames.iter().any(|f| f.observation.len() != dim) {
                return bad("frames have differing observation lengths".into());
            }
        }
        Ok(())
    }

    /// Self-describing payload with a trailing CRC32.
    pub fn encode(&self) -> Vec<u8> {
        let dim = self.frames.first().map_or(0, |f| f.observation.len());
        let stride = dim + 4;
        let mut out = Vec::with_capacity(
            80 + self.intervention_spans.len() * 8 + self.frames.len() * stride * 8,
        );
        out.extend_from_slice(EPISODE_MAGIC);
        out.extend_from_slice(&self.episode_id.0.to_le_bytes());
        out.extend_from_slice(&self.task_id.to_le_bytes());
        out.extend_from_slice(&self.policy_version.to_le_bytes());
        out.push(self.status.to_byte());
        out.extend_from_slice(&(self.frames.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.intervention_spans.len() as u32).to_le_bytes());
        for (s, e) in &self.intervention_spans {
            out.extend_from_slice(&s.to_le_bytes());
            out.extend_from_slice(&e.to_le_bytes());
        }
        out.extend_from_slice(&self.domain_seed.to_le_bytes());
        out.push(match self.source {
            Source::Online => 0,
            Source::Offline => 1,
        });
        out.extend_from_slice(&self.sim_duration.to_le_bytes());
        out.extend_from_slice(&(dim as u32).to_le_bytes());
        for f in &self.frames {
            for v in f.observation.features() {
                out.extend_from_slice(&v.to_le_bytes());
            }
            let ind = match f.advantage_indicator {
                None => -1.0,
                Some(false) => 0.0,
                Some(true) => 1.0,
            };
            for v in [
                f.action.index() as f64,
                f.reward,
                f64::from(u8::from(f.expert_flag)),
                ind,
            ] {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, StoreError> {
        let integrity = |m: &str| StoreError::Integrity(m.to_string());
        if bytes.len() < EPISODE_MAGIC.len() + 4 {
            return Err(integrity("payload too short"));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        if crc32fast::hash(body) != stored {
            return Err(integrity("checksum mismatch"));
        }
        let mut r = Cursor {
            bytes: body,
            pos: 0,
        };
        if r.take(7)? != EPISODE_MAGIC {
            return Err(integrity("bad magic"));
        }
        let episode_id = EpisodeId(u128::from_le_bytes(
            r.take(16)?.try_into().expect("16 bytes"),
        ));
        let task_id = r.u32()?;
        let policy_version = r.u64()?;
        let status =
            EpisodeStatus::from_byte(r.take(1)?[0]).ok_or_else(|| integrity("bad status byte"))?;
        let frame_count = r.u32()? as usize;
        let span_count = r.u32()? as usize;
        let mut intervention_spans = Vec::with_capacity(span_count.min(1 << 16));
        for _ in 0..span_count {
            intervention_spans.push((r.u32()?, r.u32()?));
        }
        let domain_seed = r.u64()?;
        let source = match r.take(1)?[0] {
            0 => Source::Online,
            1 => Source::Offline,
            _ => return Err(integrity("bad source byte")),
        };
        let sim_duration = r.u64()?;
        let dim = r.u32()? as usize;
        let stride = dim + 4;
        if r.remaining() != frame_count.saturating_mul(stride).saturating_mul(8) {
            return Err(integrity("frame section length mismatch"));
        }
        let mut frames = Vec::with_capacity(frame_count);
        for _ in 0..frame_count {
            let mut vals = Vec::with_capacity(stride);
            for _ in 0..stride {
                vals.push(r.f64()?);
            }
            let tail = vals.split_off(dim);
            let action = Action::from_index(tail[0] as usize)
                .filter(|a| a.index() as f64 == tail[0])
                .ok_or_else(|| integrity("bad action"))?;
            let advantage_indicator = match tail[3] {
                -1.0 => None,
                0.0 => Some(false),
                1.0 => Some(true),
                _ => return Err(integrity("bad indicator")),
            };
            frames.push(Frame {
                observation: Observation(vals),
                action,
                reward: tail[1],
                expert_flag: tail[2] != 0.0,
                advantage_indicator,
            });
        }
        let record = EpisodeRecord {
            episode_id,
            task_id,
            domain_seed,
            policy_version,
            frames,
            status,
            intervention_spans,
            source,
            sim_duration,
        };
        record.validate().map_err(|e| {
            StoreError::Integrity(format!("decoded record violates invariants: {e}"))
        })?;
        Ok(record)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], StoreError> {
        if self.bytes.len() - self.pos < n {
            return Err(StoreError::Integrity("truncated payload".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
    fn u32(&mut self) -> Result<u32, StoreError> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }
    fn u64(&mut self) -> Result<u64, StoreError> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
    fn f64(&mut self) -> Result<f64, StoreError> {
        Ok(f64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}

/// Where an injected crash interrupts a put.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CrashPoint {
    /// After this many payload bytes reached the temp file.
    AfterBytes(usize),
    /// Payload fully written, before fsync.
    BeforeSync,
    /// Payload synced, before the rename publishes it.
    BeforeRename,
}

#[derive(Debug, Default)]
struct FaultState {
    crash: Option<CrashPoint>,
    failing_puts: u32,
    failing_gets: u32,
}

/// Test hooks for the object store.
#[derive(Debug, Default)]
pub struct StoreFaults {
    state: Mutex<FaultState>,
}

impl StoreFaults {
    /// The next put stops dead at `point`, leaving whatever a killed process would.
    pub fn crash_next_put(&self, point: CrashPoint) {
        self.state.lock().expect("fault lock").crash = Some(point);
    }

    /// The next `n` puts fail cleanly with an IO error.
    pub fn fail_puts(&self, n: u32) {
        self.state.lock().expect("fault lock").failing_puts = n;
    }

    pub fn fail_gets(&self, n: u32) {
        self.state.lock().expect("fault lock").failing_gets = n;
    }

    fn take_crash(&self) -> Option<CrashPoint> {
        self.state.lock().expect("fault lock").crash.take()
    }

    fn take_put_failure(&self) -> bool {
        let mut s = self.state.lock().expect("fault lock");
        if s.failing_puts > 0 {
            s.failing_puts -= 1;
            true
        } else {
            false
        }
    }

    fn take_get_failure(&self) -> bool {
        let mut s = self.state.lock().expect("fault lock");
        if s.failing_gets > 0 {
            s.failing_gets -= 1;
            true
        } else {
            false
        }
    }
}

/// S3-like key/value store rooted at a directory.
#[derive(Debug)]
pub struct FsStore {
    root: PathBuf,
    faults: StoreFaults,
    temp_counter: AtomicU64,
}

fn validate_key(key: &str) -> Result<(), StoreError> {
    let ok = !key.is_empty()
        && !key.starts_with('/')
        && !key.contains(TEMP_MARKER)
        && key
            .split('/')
            .all(|seg| !seg.is_empty() && seg != "." && seg != "..")
        && key
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '/' | '_' | '-' | '.'));
    if ok {
        Ok(())
    } else {
        Err(StoreError::InvalidKey(key.to_string()))
    }
}

impl FsStore {
    pub fn open(root: impl AsRef<Path>) -> Result<Self, StoreError> {
        let root = root.as_ref().to_path_buf();
        fs::create_dir_all(&root)?;
        Ok(FsStore {
            root,
            faults: StoreFaults::default(),
            temp_counter: AtomicU64::new(0),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn faults(&self) -> &StoreFaults {
        &self.faults
    }

    fn path_for(&self, key: &str) -> PathBuf {
        self.root.join(key)
    }

    /// Atomic put: readers see either the old object or the complete new one.
    pub fn put_object(&self, key: &str, bytes: &[u8]) -> Result<(), StoreError> {
        validate_key(key)?;
        if self.faults.take_put_failure() {
            return Err(StoreError::Io(io::Error::other("injected put failure")));
        }
        let final_path = self.path_for(key);
        let dir = final_path.parent().expect("key has a parent").to_path_buf();
        fs::create_dir_all(&dir)?;
        let n = self.temp_counter.fetch_add(1, Ordering::Relaxed);
        let file_name = final_path
            .file_name()
            .expect("key has a file name")
            .to_string_lossy();
        let temp_path = dir.join(format!(
            "{file_name}{TEMP_MARKER}{}.{n}",
            std::process::id()
        ));

        let crash = self.faults.take_crash();
        let result = (|| -> Result<(), StoreError> {
            let mut f = fs::File::create(&temp_path)?;
            if let Some(CrashPoint::AfterBytes(k)) = crash {
                f.write_all(&bytes[..k.min(bytes.len())])?;
                return Err(StoreError::InjectedCrash(key.to_string()));
            }
            f.write_all(bytes)?;
            if crash == Some(CrashPoint::BeforeSync) {
                return Err(StoreError::InjectedCrash(key.to_string()));
            }
            f.sync_all()?;
            if crash == Some(CrashPoint::BeforeRename) {
                return Err(StoreError::InjectedCrash(key.to_string()));
            }
            fs::rename(&temp_path, &final_path)?;
            if let Ok(d) = fs::File::open(&dir) {
                let _ = d.sync_all();
            }
            Ok(())
        })();
        match result {
            Err(StoreError::InjectedCrash(k)) => Err(StoreError::InjectedCrash(k)),
            Err(e) => {
                let _ = fs::remove_file(&temp_path);
                Err(e)
            }
            Ok(()) => Ok(()),
        }
    }

    pub fn get_object(&self, key: &str) -> Result<Vec<u8>, StoreError> {
        validate_key(key)?;
        if self.faults.take_get_failure() {
            return Err(StoreError::Io(io::Error::other("injected get failure")));
        }
        match fs::read(self.path_for(key)) {
            Ok(b) => Ok(b),
            Err(e) if e.kind() == io::ErrorKind::NotFound => {
                Err(StoreError::NotFound(key.to_string()))
            }
            Err(e) => Err(e.into()),
        }
    }

    pub fn exists(&self, key: &str) -> bool {
        validate_key(key).is_ok() && self.path_for(key).is_file()
    }

    /// Committed keys under `prefix`, sorted. Temp files are never listed.
    pub fn list(&self, prefix: &str) -> Result<Vec<String>, StoreError> {
        let mut out = Vec::new();
        let mut stack = vec![self.root.clone()];
        while let Some(dir) = stack.pop() {
            let entries = match fs::read_dir(&dir) {
                Ok(e) => e,
                Err(e) if e.kind() == io::ErrorKind::NotFound => continue,
                Err(e) => return Err(e.into()),
            };
            for entry in entries {
                let entry = entry?;
                let path = entry.path();
                if entry.file_type()?.is_dir() {
                    stack.push(path);
                    continue;
                }
                let rel = path.strip_prefix(&self.root).expect("under root");
                let key = rel.to_string_lossy().replace('\\', "/");
                if !key.contains(TEMP_MARKER) && key.starts_with(prefix) {
                    out.push(key);
                }
            }
        }
        out.sort();
        Ok(out)
    }

    /// Leftover temp files from interrupted puts.
    pub fn temp_files(&self) -> Result<Vec<PathBuf>, StoreError> {
        let mut out = Vec::new();
        let mut stack = vec![self.root.clone()];
        while let Some(dir) = stack.pop() {
            for entry in fs::read_dir(&dir)? {
                let entry = entry?;
                if entry.file_type()?.is_dir() {
                    stack.push(entry.path());
                } else if entry.file_name().to_string_lossy().contains(TEMP_MARKER) {
                    out.push(entry.path());
                }
            }
        }
        out.sort();
        Ok(out)
    }

    /// Removes leftovers of interrupted puts; returns how many were removed.
    pub fn sweep_temp_files(&self) -> Result<usize, StoreError> {
        let temps = self.temp_files()?;
        for p in &temps {
            fs::remove_file(p)?;
        }
        Ok(temps.len())
    }

    pub fn put_episode(&self, record: &EpisodeRecord) -> Result<String, StoreError> {
        record.validate()?;
        let key = record.storage_key();
        self.put_object(&key, &record.encode())?;
        Ok(key)
    }

    pub fn get_episode(&self, key: &str) -> Result<EpisodeRecord, StoreError> {
        EpisodeRecord::decode(&self.get_object(key)?)
    }

    pub fn put_checkpoint(&self, key: &str, params: &PolicyParams) -> Result<(), StoreError> {
        self.put_object(key, &params.encode())
    }

    pub fn get_checkpoint(&self, key: &str) -> Result<PolicyParams, StoreError> {
        PolicyParams::decode(&self.get_object(key)?)
            .map_err(|e| StoreError::Integrity(e.to_string()))
    }
}

/// Key under which the learner keeps the most recently published checkpoint.
pub const LATEST_CHECKPOINT_KEY: &str = "checkpoints/latest";

pub fn checkpoint_key(version: u64) -> String {
    format!("checkpoints/v{version:010}")
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeMeta {
    pub episode_id: EpisodeId,
    pub task_id: u32,
    pub frame_count: u32,
    pub sampling_weight: f64,
}

impl EpisodeMeta {
    pub fn for_record(record: &EpisodeRecord) -> Self {
        EpisodeMeta {
            episode_id: record.episode_id,
            task_id: record.task_id,
            frame_count: record.frames.len() as u32,
            sampling_weight: 1.0,
        }
    }

    pub fn storage_key(&self) -> String {
        episode_key(self.task_id, self.episode_id)
    }
}

/// Lightweight per-task metadata; payloads stay in the object store.
#[derive(Debug, Default, Clone)]
pub struct EpisodeIndex {
    by_task: BTreeMap<u32, Vec<EpisodeMeta>>,
    seen: HashSet<EpisodeId>,
}

impl EpisodeIndex {
    pub fn new() -> Self {
        Self::default()
    }

    /// Returns false when the episode id is already indexed.
    pub fn insert(&mut self, meta: EpisodeMeta) -> bool {
        if !self.seen.insert(meta.episode_id) {
            return false;
        }
        self.by_task.entry(meta.task_id).or_default().push(meta);
        true
    }

    pub fn contains(&self, id: EpisodeId) -> bool {
        self.seen.contains(&id)
    }

    pub fn list_by_task(&self, task_id: u32) -> &[EpisodeMeta] {
        self.by_task.get(&task_id).map_or(&[], Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.seen.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seen.is_empty()
    }

    pub fn total_frames(&self) -> u64 {
        self.by_task
            .values()
            .flatten()
            .map(|m| m.frame_count as u64)
            .sum()
    }

    /// Heap + inline bytes held by the index.
    pub fn approx_bytes(&self) -> usize {
        let metas: usize = self
            .by_task
            .values()
            .map(|v| v.capacity() * std::mem::size_of::<EpisodeMeta>())
            .sum();
        let set = self.seen.capacity() * (std::mem::size_of::<EpisodeId>() + 1);
        metas + set + self.by_task.len() * 64
    }
}
