//! Central learner: per-task online/offline buffers, an adaptive mix between
//! them, and the update loop that publishes parameter deltas.

use std::collections::{HashSet, VecDeque};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::algorithms::{
    fit_value, hgdagger_update, recap_update, stamp_indicators, AlgorithmError, AlgorithmKind,
    AlgorithmSpec,
};
use crate::bus::{
    BusError, EpisodeNotification, MessageBus, ParamsMessage, SubscribeMode, Subscription,
    EPISODES_TOPIC, LEARNER_GROUP, PARAMS_TOPIC,
};
use crate::policy::{delta_encode, BlockId, PolicyParams};
use crate::store::{
    checkpoint_key, EpisodeId, EpisodeIndex, EpisodeMeta, EpisodeRecord, Frame, FsStore,
    StoreError, LATEST_CHECKPOINT_KEY,
};

#[derive(Debug, Error)]
pub enum LearnerError {
    #[error("no frames available for task {0}")]
    EmptyBuffers(u32),
    #[error("invalid learner configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Algorithm(#[from] AlgorithmError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Bus(#[from] BusError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Origin {
    Online,
    Offline,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BufferedFrame {
    pub frame: Frame,
    pub episode_id: EpisodeId,
}

/// One batch element with the buffer it came from.
#[derive(Debug, Clone)]
pub struct SampledItem {
    pub task: u32,
    pub origin: Origin,
    pub frame: Arc<BufferedFrame>,
}

#[derive(Debug, Default)]
struct TaskBuffers {
    online: VecDeque<Arc<BufferedFrame>>,
    offline: Vec<Arc<BufferedFrame>>,
}

/// Per-task buffers. Offline content is fixed at construction; online
/// buffers are FIFO with a frame capacity.
#[derive(Debug)]
pub struct BufferSet {
    tasks: Vec<TaskBuffers>,
    online_capacity: usize,
}

impl BufferSet {
    pub fn new(num_tasks: usize, online_capacity: usize, offline: &[EpisodeRecord]) -> Self {
        let mut tasks: Vec<TaskBuffers> = (0..num_tasks).map(|_| TaskBuffers::default()).collect();
        for ep in offline {
            if let Some(t) = tasks.get_mut(ep.task_id as usize) {
                t.offline.extend(ep.frames.iter().map(|f| {
                    Arc::new(BufferedFrame {
                        frame: f.clone(),
                        episode_id: ep.episode_id,
                    })
                }));
            }
        }
        BufferSet {
            tasks,
            online_capacity,
        }
    }

    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn push_online(&mut self, task: u32, episode_id: EpisodeId, frames: Vec<Frame>) {
        let cap = self.online_capacity;
        let buf = &mut self.tasks[task as usize].online;
        for frame in frames {
            if buf.len() == cap {
                buf.pop_front();
            }
            buf.push_back(Arc::new(BufferedFrame { frame, episode_id }));
        }
    }

    pub fn online_len(&self, task: u32) -> usize {
        self.tasks[task as usize].online.len()
    }

    pub fn offline_len(&self, task: u32) -> usize {
        self.tasks[task as usize].offline.len()
    }

    pub fn online_frames(&self, task: u32) -> impl Iterator<Item = &BufferedFrame> {
        self.tasks[task as usize].online.iter().map(|a| a.as_ref())
    }

    /// Number of (episode, step) pairs in online buffers that occur more
    /// than once.
    pub fn duplicate_online_frames(&self) -> usize {
        let mut seen = HashSet::new();
        let mut dups = 0;
        for t in &self.tasks {
            let mut step = 0usize;
            let mut last = None;
            for f in &t.online {
                if last != Some(f.episode_id) {
                    step = 0;
                    last = Some(f.episode_id);
                }
                if !seen.insert((f.episode_id, step)) {
                    dups += 1;
                }
                step += 1;
            }
        }
        dups
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    pub alpha: f64,
    pub window: usize,
    pub clip_lo: f64,
    pub clip_hi: f64,
    /// Mix used until both windows of a task have data.
    pub cold_start: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            alpha: 1.5,
            window: 200,
            clip_lo: 0.2,
            clip_hi: 0.8,
            cold_start: 0.5,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<(), LearnerError> {
        let ok = self.alpha > 0.0
            && self.window > 0
            && 0.0 <= self.clip_lo
            && self.clip_lo <= self.clip_hi
            && self.clip_hi <= 1.0
            && (0.0..=1.0).contains(&self.cold_start);
        if ok {
            Ok(())
        } else {
            Err(LearnerError::InvalidConfig(format!(
                "bad sampler settings {self:?}"
            )))
        }
    }
}

/// Unclipped online share: `exp(a*l_on) / (exp(a*l_on) + exp(l_off))`.
/// Only the online loss is scaled.
pub fn raw_mix(l_on: f64, l_off: f64, alpha: f64) -> f64 {
    1.0 / (1.0 + (l_off - alpha * l_on).exp())
}

/// Rolling loss windows per task and origin.
#[derive(Debug, Clone)]
pub struct SamplerState {
    config: SamplerConfig,
    windows: Vec<[VecDeque<f64>; 2]>,
}

fn slot(origin: Origin) -> usize {
    match origin {
        Origin::Online => 0,
        Origin::Offline => 1,
    }
}

impl SamplerState {
    pub fn new(num_tasks: usize, config: SamplerConfig) -> Self {
        SamplerState {
            config,
            windows: (0..num_tasks)
                .map(|_| [VecDeque::new(), VecDeque::new()])
                .collect(),
        }
    }

    pub fn config(&self) -> &SamplerConfig {
        &self.config
    }

    pub fn window_mean(&self, task: u32, origin: Origin) -> Option<f64> {
        let w = &self.windows[task as usize][slot(origin)];
        (!w.is_empty()).then(|| w.iter().sum::<f64>() / w.len() as f64)
    }

    /// Online share for `task`, clipped to the configured band.
    pub fn compute_mix(&self, task: u32) -> f64 {
        let c = &self.config;
        match (
            self.window_mean(task, Origin::Online),
            self.window_mean(task, Origin::Offline),
        ) {
            (Some(on), Some(off)) => raw_mix(on, off, c.alpha).clamp(c.clip_lo, c.clip_hi),
            _ => c.cold_start,
        }
    }

    /// Appends per-item losses; non-finite values are dropped.
    pub fn record_losses(&mut self, items: &[SampledItem], losses: &[f64]) {
        let cap = self.config.window;
        let mut dropped = 0;
        for (item, &loss) in items.iter().zip(losses) {
            if !loss.is_finite() {
                dropped += 1;
                continue;
            }
            let w = &mut self.windows[item.task as usize][slot(item.origin)];
            if w.len() == cap {
                w.pop_front();
            }
            w.push_back(loss);
        }
        if dropped > 0 {
            log::warn!("dropped {dropped} non-finite losses from sampler windows");
        }
    }
}

/// Draws `batch_size` items: task uniform per item, then online with
/// probability `compute_mix(task)` when that task has online data.
pub fn sample_batch<R: Rng + ?Sized>(
    buffers: &BufferSet,
    sampler: &SamplerState,
    batch_size: usize,
    rng: &mut R,
) -> Result<Vec<SampledItem>, LearnerError> {
    let m = buffers.num_tasks();
    let mixes: Vec<f64> = (0..m as u32).map(|t| sampler.compute_mix(t)).collect();
    let mut out = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let task = rng.random_range(0..m) as u32;
        let tb = &buffers.tasks[task as usize];
        let online = match (tb.online.is_empty(), tb.offline.is_empty()) {
            (true, true) => return Err(LearnerError::EmptyBuffers(task)),
            (false, true) => true,
            (true, false) => false,
            (false, false) => rng.random::<f64>() < mixes[task as usize],
        };
        let (origin, frame) = if online {
            (
                Origin::Online,
                tb.online[rng.random_range(0..tb.online.len())].clone(),
            )
        } else {
            (
                Origin::Offline,
                tb.offline[rng.random_range(0..tb.offline.len())].clone(),
            )
        };
        out.push(SampledItem {
            task,
            origin,
            frame,
        });
    }
    Ok(out)
}

/// Frozen value weights and thresholds used to stamp incoming frames.
#[derive(Debug, Clone)]
pub struct Stamping {
    pub value_weights: Vec<f64>,
    pub gamma: f64,
    pub epsilons: Vec<f64>,
}

impl Stamping {
    pub fn stamp(&self, record: &mut EpisodeRecord) {
        let eps = self
            .epsilons
            .get(record.task_id as usize)
            .copied()
            .unwrap_or(0.0);
        stamp_indicators(&mut record.frames, &self.value_weights, self.gamma, eps);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IngestOutcome {
    Added,
    Duplicate,
    Quarantined,
    /// Store read failed; the notification should be redelivered.
    Retry,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct IngestStats {
    pub added: u64,
    pub duplicates: u64,
    pub quarantined: u64,
    pub retries: u64,
    pub online_frames: u64,
    pub intervention_frames: u64,
}

#[derive(Debug)]
struct IngestState {
    buffers: BufferSet,
    index: EpisodeIndex,
    quarantined: Vec<String>,
    stats: IngestStats,
}

/// Cloneable ingest handle; can be moved to its own thread while the
/// training loop samples from the same buffers.
#[derive(Clone)]
pub struct Ingestor {
    state: Arc<Mutex<IngestState>>,
    store: Arc<FsStore>,
    stamping: Option<Arc<Stamping>>,
    num_tasks: u32,
}

/// Give up on a notification after this many failed fetches.
const MAX_FETCH_ATTEMPTS: u32 = 8;

impl Ingestor {
    pub fn ingest(&self, note: &EpisodeNotification, attempt: u32) -> IngestOutcome {
        {
            let st = self.state.lock().unwrap();
            if st.index.contains(note.episode_id) {
                drop(st);
                self.state.lock().unwrap().stats.duplicates += 1;
                return IngestOutcome::Duplicate;
            }
        }
        let mut record = match self.store.get_episode(&note.storage_key) {
            Ok(r) => r,
            Err(StoreError::Integrity(_) | StoreError::InvalidRecord(_)) => {
                return self.quarantine(&note.storage_key, "corrupt record");
            }
            Err(e) if attempt >= MAX_FETCH_ATTEMPTS => {
                return self.quarantine(&note.storage_key, &e.to_string());
            }
            Err(e) => {
                log::debug!(
                    "fetch of {} failed (attempt {attempt}): {e}",
                    note.storage_key
                );
                self.state.lock().unwrap().stats.retries += 1;
                return IngestOutcome::Retry;
            }
        };
        if record.episode_id != note.episode_id
            || record.task_id != note.task_id
            || record.task_id >= self.num_tasks
            || record.storage_key() != note.storage_key
        {
            return self.quarantine(&note.storage_key, "record does not match its notification");
        }
        if let Some(s) = &self.stamping {
            s.stamp(&mut record);
        }
        let meta = EpisodeMeta::for_record(&record);
        let mut st = self.state.lock().unwrap();
        if !st.index.insert(meta) {
            st.stats.duplicates += 1;
            return IngestOutcome::Duplicate;
        }
        st.stats.added += 1;
        st.stats.online_frames += record.frames.len() as u64;
        st.stats.intervention_frames += record.intervention_frames() as u64;
        st.buffers
            .push_online(record.task_id, record.episode_id, record.frames);
        IngestOutcome::Added
    }

    fn quarantine(&self, key: &str, why: &str) -> IngestOutcome {
        log::warn!("quarantining {key}: {why}");
        let mut st = self.state.lock().unwrap();
        st.quarantined.push(key.to_string());
        st.stats.quarantined += 1;
        IngestOutcome::Quarantined
    }

    /// Drains whatever is queued on `sub`. Acks everything except
    /// notifications whose fetch should be retried.
    pub fn drain(&self, sub: &mut dyn Subscription) -> Result<usize, BusError> {
        let mut n = 0;
        while let Some(d) = sub.try_recv()? {
            self.handle(sub, d.envelope.seq, &d.envelope.payload, d.attempt)?;
            n += 1;
        }
        Ok(n)
    }

    fn handle(
        &self,
        sub: &mut dyn Subscription,
        seq: u64,
        payload: &[u8],
        attempt: u32,
    ) -> Result<(), BusError> {
        match EpisodeNotification::decode(payload) {
            Ok(note) => {
                if self.ingest(&note, attempt) != IngestOutcome::Retry {
                    sub.ack(seq)?;
                }
            }
            Err(e) => {
                log::warn!("dropping malformed notification seq {seq}: {e}");
                sub.ack(seq)?;
            }
        }
        Ok(())
    }

    /// Blocking ingest loop for a dedicated thread.
    pub fn run(&self, sub: &mut dyn Subscription, stop: &AtomicBool) {
        while !stop.load(Ordering::SeqCst) {
            match sub.recv(Duration::from_millis(50)) {
                Ok(Some(d)) => {
                    if let Err(e) = self.handle(sub, d.envelope.seq, &d.envelope.payload, d.attempt)
                    {
                        log::warn!("ack failed: {e}");
                    }
                }
                Ok(None) => {}
                Err(e) => {
                    log::warn!("episode subscription error: {e}");
                    thread::sleep(Duration::from_millis(100));
                }
            }
        }
    }

    pub fn stats(&self) -> IngestStats {
        self.state.lock().unwrap().stats.clone()
    }

    pub fn quarantined(&self) -> Vec<String> {
        self.state.lock().unwrap().quarantined.clone()
    }

    pub fn index_len(&self) -> usize {
        self.state.lock().unwrap().index.len()
    }

    pub fn with_buffers<T>(&self, f: impl FnOnce(&BufferSet) -> T) -> T {
        f(&self.state.lock().unwrap().buffers)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    /// Publish a delta every this many training steps.
    pub publish_interval: u64,
    pub online_capacity: usize,
    pub sampler: SamplerConfig,
    /// Also keep every published checkpoint under its own version key.
    pub keep_versions: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.05,
            batch_size: 64,
            publish_interval: 25,
            online_capacity: 200_000,
            sampler: SamplerConfig::default(),
            keep_versions: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), LearnerError> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(LearnerError::InvalidConfig("lr must be positive".into()));
        }
        if self.batch_size == 0 || self.publish_interval == 0 || self.online_capacity == 0 {
            return Err(LearnerError::InvalidConfig(
                "batch size, interval and capacity must be positive".into(),
            ));
        }
        self.sampler.validate()
    }
}

/// What one training step did.
#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub version: u64,
    pub mean_loss: f64,
    pub applied: bool,
    pub published: bool,
    /// Per task: (online share used, online frames, offline frames, online batch items).
    pub per_task: Vec<TaskReport>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskReport {
    pub mix: f64,
    pub online_frames: usize,
    pub offline_frames: usize,
    pub batch_items: usize,
    pub online_items: usize,
    pub mean_loss: f64,
}

pub struct Learner {
    params: PolicyParams,
    last_published: PolicyParams,
    pending_publish: bool,
    ingest: Ingestor,
    sampler: SamplerState,
    algorithm: AlgorithmSpec,
    config: TrainConfig,
    rng: ChaCha8Rng,
    step: u64,
    publishes: u64,
    publish_failures: u64,
    skipped_steps: u64,
    producer_id: String,
}

impl Learner {
    /// Builds buffers from `offline` and, for RECAP, fits the frozen value
    /// head on them and stamps every offline frame.
    pub fn new(
        initial: PolicyParams,
        offline: Vec<EpisodeRecord>,
        num_tasks: u32,
        algorithm: AlgorithmSpec,
        config: TrainConfig,
        store: Arc<FsStore>,
        seed: u64,
    ) -> Result<Self, LearnerError> {
        config.validate()?;
        algorithm.validate()?;
        let mut offline = offline;
        let mut params = initial;
        let stamping = match algorithm.kind {
            AlgorithmKind::HgDagger => None,
            AlgorithmKind::Recap => {
                let w = fit_value(&offline, algorithm.recap.gamma)?;
                params = params
                    .with_block(BlockId::Value, w.clone())
                    .map_err(AlgorithmError::from)?
                    .with_version(params.version());
                let s = Stamping {
                    value_weights: w,
                    gamma: algorithm.recap.gamma,
                    epsilons: algorithm.recap.epsilons.clone(),
                };
                for ep in &mut offline {
                    s.stamp(ep);
                }
                Some(Arc::new(s))
            }
        };
        let buffers = BufferSet::new(num_tasks as usize, config.online_capacity, &offline);
        let state = IngestState {
            buffers,
            index: EpisodeIndex::new(),
            quarantined: Vec::new(),
            stats: IngestStats::default(),
        };
        Ok(Learner {
            last_published: params.clone(),
            params,
            pending_publish: false,
            ingest: Ingestor {
                state: Arc::new(Mutex::new(state)),
                store,
                stamping,
                num_tasks,
            },
            sampler: SamplerState::new(num_tasks as usize, config.sampler.clone()),
            algorithm,
            config,
            rng: ChaCha8Rng::seed_from_u64(seed),
            step: 0,
            publishes: 0,
            publish_failures: 0,
            skipped_steps: 0,
            producer_id: "learner".into(),
        })
    }

    pub fn ingestor(&self) -> Ingestor {
        self.ingest.clone()
    }

    pub fn params(&self) -> &PolicyParams {
        &self.params
    }

    pub fn sampler(&self) -> &SamplerState {
        &self.sampler
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn publishes(&self) -> u64 {
        self.publishes
    }

    pub fn publish_failures(&self) -> u64 {
        self.publish_failures
    }

    pub fn skipped_steps(&self) -> u64 {
        self.skipped_steps
    }

    /// Writes the current parameters as the latest full checkpoint without
    /// publishing; actors that join late can bootstrap from it.
    pub fn seed_checkpoint(&self) -> Result<(), StoreError> {
        self.ingest
            .store
            .put_checkpoint(LATEST_CHECKPOINT_KEY, &self.params)
    }

    /// One update. Publishes when the step count reaches a multiple of the
    /// publish interval, or retries an earlier failed publish.
    pub fn train_step(&mut self, bus: &dyn MessageBus) -> Result<StepReport, LearnerError> {
        let m = self.ingest.num_tasks;
        let (batch, sizes) = {
            let st = self.ingest.state.lock().unwrap();
            let b = sample_batch(
                &st.buffers,
                &self.sampler,
                self.config.batch_size,
                &mut self.rng,
            )?;
            let sizes: Vec<(usize, usize)> = (0..m)
                .map(|t| (st.buffers.online_len(t), st.buffers.offline_len(t)))
                .collect();
            (b, sizes)
        };
        let mixes: Vec<f64> = (0..m).map(|t| self.sampler.compute_mix(t)).collect();
        let result = match self.algorithm.kind {
            AlgorithmKind::HgDagger => hgdagger_update(&self.params, &batch, self.config.lr),
            AlgorithmKind::Recap => recap_update(&self.params, &batch, self.config.lr),
        };
        self.step += 1;
        let (losses, applied) = match result {
            Ok(out) => {
                if out.applied {
                    self.params = out.params;
                }
                (out.losses, out.applied)
            }
            Err(e) => {
                self.skipped_steps += 1;
                log::warn!("training step {} skipped: {e}", self.step);
                (vec![f64::NAN; batch.len()], false)
            }
        };
        self.sampler.record_losses(&batch, &losses);

        if self.step.is_multiple_of(self.config.publish_interval) {
            self.pending_publish = true;
        }
        let published = self.pending_publish && self.try_publish(bus);

        let mut per_task: Vec<TaskReport> = sizes
            .iter()
            .zip(&mixes)
            .map(|(&(on, off), &mix)| TaskReport {
                mix,
                online_frames: on,
                offline_frames: off,
                batch_items: 0,
                online_items: 0,
                mean_loss: f64::NAN,
            })
            .collect();
        let mut loss_sums = vec![(0.0, 0usize); m as usize];
        for (item, &l) in batch.iter().zip(&losses) {
            let r = &mut per_task[item.task as usize];
            r.batch_items += 1;
            if item.origin == Origin::Online {
                r.online_items += 1;
            }
            if l.is_finite() {
                loss_sums[item.task as usize].0 += l;
                loss_sums[item.task as usize].1 += 1;
            }
        }
        for (r, (s, n)) in per_task.iter_mut().zip(loss_sums) {
            if n > 0 {
                r.mean_loss = s / n as f64;
            }
        }
        let finite: Vec<f64> = losses.iter().copied().filter(|l| l.is_finite()).collect();
        Ok(StepReport {
            step: self.step,
            version: self.params.version(),
            mean_loss: if finite.is_empty() {
                f64::NAN
            } else {
                finite.iter().sum::<f64>() / finite.len() as f64
            },
            applied,
            published,
            per_task,
        })
    }

    /// Full checkpoint to the store first, then the delta on the bus.
    fn try_publish(&mut self, bus: &dyn MessageBus) -> bool {
        let store = &self.ingest.store;
        if let Err(e) = store.put_checkpoint(LATEST_CHECKPOINT_KEY, &self.params) {
            self.publish_failures += 1;
            log::warn!("checkpoint write failed, will retry: {e}");
            return false;
        }
        if self.config.keep_versions {
            if let Err(e) =
                store.put_checkpoint(&checkpoint_key(self.params.version()), &self.params)
            {
                log::warn!("versioned checkpoint write failed: {e}");
            }
        }
        let msg = ParamsMessage::Delta(delta_encode(&self.last_published, &self.params));
        match bus.publish(PARAMS_TOPIC, &self.producer_id, &msg.encode()) {
            Ok(_) => {
                self.last_published = self.params.clone();
                self.pending_publish = false;
                self.publishes += 1;
                true
            }
            Err(e) => {
                self.publish_failures += 1;
                log::warn!("params publish failed, will retry: {e}");
                false
            }
        }
    }

    /// Threaded loop: a separate thread ingests while this one trains, for
    /// `total_steps` steps or until `stop`. `on_step` sees every report.
    pub fn train_loop(
        &mut self,
        bus: Arc<dyn MessageBus>,
        total_steps: u64,
        stop: &AtomicBool,
        mut on_step: impl FnMut(&StepReport),
    ) -> Result<(), LearnerError> {
        let mut sub = bus.subscribe(
            EPISODES_TOPIC,
            SubscribeMode::ConsumerGroup(LEARNER_GROUP.into()),
        )?;
        let ingest = self.ingestor();
        let ingest_stop = Arc::new(AtomicBool::new(false));
        let flag = ingest_stop.clone();
        let handle = thread::spawn(move || ingest.run(sub.as_mut(), &flag));
        let mut result = Ok(());
        while self.step < total_steps && !stop.load(Ordering::SeqCst) {
            match self.train_step(bus.as_ref()) {
                Ok(r) => on_step(&r),
                Err(LearnerError::EmptyBuffers(_)) => thread::sleep(Duration::from_millis(10)),
                Err(e) => {
                    result = Err(e);
                    break;
                }
            }
        }
        ingest_stop.store(true, Ordering::SeqCst);
        let _ = handle.join();
        result
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envsim::{Action, Observation};

    fn item(task: u32, origin: Origin) -> SampledItem {
        SampledItem {
            task,
            origin,
            frame: Arc::new(BufferedFrame {
                frame: Frame {
                    observation: Observation(vec![0.0]),
                    action: Action::Stay,
                    reward: 0.0,
                    expert_flag: false,
                    advantage_indicator: None,
                },
                episode_id: EpisodeId(0),
            }),
        }
    }

    fn sampler(alpha: f64, on: f64, off: f64) -> SamplerState {
        let cfg = SamplerConfig {
            alpha,
            ..SamplerConfig::default()
        };
        let mut s = SamplerState::new(1, cfg);
        s.record_losses(&[item(0, Origin::Online), item(0, Origin::Offline)], &[on, off]);
        s
    }

    #[test]
    fn mix_examples() {
        assert_eq!(SamplerState::new(1, SamplerConfig::default()).compute_mix(0), 0.5);
        for c in [0.0, 0.7, 3.0] {
            assert!((sampler(1.0, c, c).compute_mix(0) - 0.5).abs() < 1e-15);
        }
        let e = std::f64::consts::E;
        let want = e * e / (e * e + e);
        assert!((sampler(1.0, 2.0, 1.0).compute_mix(0) - want).abs() < 1e-12);
        assert!((want - 0.731059).abs() < 1e-6);
        assert_eq!(sampler(2.0, 10.0, 0.0).compute_mix(0), 0.8);
        assert_eq!(sampler(1.5, 0.0, 5.0).compute_mix(0), 0.2);
    }

    #[test]
    fn non_finite_losses_dropped() {
        let mut s = SamplerState::new(1, SamplerConfig::default());
        s.record_losses(&[item(0, Origin::Online)], &[f64::NAN]);
        assert_eq!(s.window_mean(0, Origin::Online), None);
    }

    #[test]
    fn window_keeps_last_w() {
        let cfg = SamplerConfig {
            window: 3,
            ..SamplerConfig::default()
        };
        let mut s = SamplerState::new(1, cfg);
        let items: Vec<_> = (0..5).map(|_| item(0, Origin::Online)).collect();
        s.record_losses(&items, &[1.0, 2.0, 3.0, 4.0, 5.0]);
        assert_eq!(s.window_mean(0, Origin::Online), Some(4.0));
    }

    #[test]
    fn online_buffer_evicts_oldest() {
        let mut b = BufferSet::new(1, 3, &[]);
        let frames: Vec<Frame> = (0..5)
            .map(|i| {
                item(0, Origin::Online)
                    .frame
                    .frame
                    .clone_with_reward(i as f64)
            })
            .collect();
        b.push_online(0, EpisodeId(1), frames);
        let rewards: Vec<f64> = b.online_frames(0).map(|f| f.frame.reward).collect();
        assert_eq!(rewards, vec![2.0, 3.0, 4.0]);
    }

    trait WithReward {
        fn clone_with_reward(&self, r: f64) -> Frame;
    }

    impl WithReward for Frame {
        fn clone_with_reward(&self, r: f64) -> Frame {
            Frame {
                reward: r,
                ..self.clone()
            }
        }
    }

    #[test]
    fn empty_buffers_error() {
        let b = BufferSet::new(2, 10, &[]);
        let s = SamplerState::new(2, SamplerConfig::default());
        let r = sample_batch(&b, &s, 4, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(matches!(r, Err(LearnerError::EmptyBuffers(_))));
    }

    #[test]
    fn bad_config_rejected() {
        let c = TrainConfig {
            lr: 0.0,
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.sampler.clip_lo = 0.9;
        assert!(c.validate().is_err());
    }
}
