//! Edge client: runs the latest policy on one station, hands control to the
//! expert when the gate fires, uploads finished episodes and adopts new
//! parameters only between episodes.

use std::collections::{BTreeSet, VecDeque};
use std::sync::atomic::{AtomicBool, Ordering};
use std::thread;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::algorithms::recap_sample_dist;
use crate::bus::{
    EpisodeNotification, MessageBus, ParamsMessage, SubscribeMode, Subscription, EPISODES_TOPIC,
    PARAMS_TOPIC,
};
use crate::envsim::{Action, DomainParam, EnvState, EpisodeStatus, InterventionGate, Observation};
use crate::policy::{apply_delta, Head, PolicyError, PolicyParams};
use crate::store::{
    spans_from_flags, EpisodeId, EpisodeRecord, Frame, FsStore, Source, StoreError,
    LATEST_CHECKPOINT_KEY,
};
use crate::util::mix_seed;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RolloutMode {
    Greedy,
    Sample,
    /// Sample from the sharpened advantage-conditioned distribution.
    RecapSample(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActorConfig {
    pub actor_id: u32,
    pub task_id: u32,
    pub domain_seed: u64,
    pub horizon: u32,
    pub gate_window: usize,
    pub intervention_enabled: bool,
    pub rollout_mode: RolloutMode,
    /// Finished episodes kept locally while uploads fail.
    pub outbox_capacity: usize,
    /// Fleet-wide seed; the actor's stream is derived from (seed, actor_id).
    pub seed: u64,
}

impl ActorConfig {
    pub fn new(actor_id: u32, task_id: u32, domain_seed: u64, seed: u64) -> Self {
        ActorConfig {
            actor_id,
            task_id,
            domain_seed,
            horizon: 80,
            gate_window: 3,
            intervention_enabled: true,
            rollout_mode: RolloutMode::Sample,
            outbox_capacity: 64,
            seed,
        }
    }

    pub fn name(&self) -> String {
        format!("actor-{}", self.actor_id)
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.gate_window < 2 {
            return Err("gate window must be at least 2".into());
        }
        if let RolloutMode::RecapSample(b) = self.rollout_mode {
            if b.is_nan() || b < 0.0 {
                return Err("beta must be nonnegative".into());
            }
        }
        if self.outbox_capacity == 0 {
            return Err("outbox capacity must be positive".into());
        }
        Ok(())
    }
}

/// Action the policy picks in `mode`.
pub fn policy_action<R: Rng + ?Sized>(
    params: &PolicyParams,
    obs: &Observation,
    mode: RolloutMode,
    rng: &mut R,
) -> Result<Action, PolicyError> {
    Ok(match mode {
        RolloutMode::Greedy => params.forward(obs, Head::Marginal)?.argmax(),
        RolloutMode::Sample => params
            .forward(obs, Head::Marginal)?
            .sample_with(rng.random()),
        RolloutMode::RecapSample(beta) => {
            recap_sample_dist(params, obs, beta)?.sample_with(rng.random())
        }
    })
}

/// Per-step action source.
pub trait Controller {
    fn act(&mut self, obs: &Observation, state: &EnvState, domain: &DomainParam) -> Action;
}

/// The scripted expert used as a policy.
pub struct ExpertController;

impl Controller for ExpertController {
    fn act(&mut self, _obs: &Observation, state: &EnvState, domain: &DomainParam) -> Action {
        domain.expert_action(state)
    }
}

/// Parametric policy in a given rollout mode.
pub struct PolicyController<'a> {
    pub params: &'a PolicyParams,
    pub mode: RolloutMode,
    pub rng: ChaCha8Rng,
}

impl Controller for PolicyController<'_> {
    fn act(&mut self, obs: &Observation, _state: &EnvState, _domain: &DomainParam) -> Action {
        policy_action(self.params, obs, self.mode, &mut self.rng)
            .expect("observation matches policy dimension")
    }
}

/// One episode in progress.
#[derive(Debug, Clone)]
pub struct EpisodeRun {
    episode_id: EpisodeId,
    state: EnvState,
    obs: Observation,
    gate: Option<InterventionGate>,
    frames: Vec<Frame>,
    env_rng: ChaCha8Rng,
    policy_rng: ChaCha8Rng,
    status: EpisodeStatus,
}

impl EpisodeRun {
    /// Resets the domain. Draws the id and the env/policy sub-streams from `rng`.
    pub fn start<R: Rng + ?Sized>(
        domain: &DomainParam,
        horizon: u32,
        gate_window: Option<usize>,
        rng: &mut R,
    ) -> Self {
        let id = ((rng.next_u64() as u128) << 64) | rng.next_u64() as u128;
        let mut env_rng = ChaCha8Rng::seed_from_u64(rng.next_u64());
        let policy_rng = ChaCha8Rng::seed_from_u64(rng.next_u64());
        let state = domain.reset(horizon, &mut env_rng);
        let obs = domain.observe(&state, &mut env_rng);
        EpisodeRun {
            episode_id: EpisodeId(id),
            state,
            obs,
            gate: gate_window.map(InterventionGate::new),
            frames: Vec::with_capacity(horizon as usize),
            env_rng,
            policy_rng,
            status: EpisodeStatus::Running,
        }
    }

    pub fn status(&self) -> EpisodeStatus {
        self.status
    }

    pub fn state(&self) -> &EnvState {
        &self.state
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    /// One environment step. `policy` is consulted only when the expert is
    /// not in control.
    pub fn step_with(
        &mut self,
        domain: &DomainParam,
        policy: impl FnOnce(&Observation, &EnvState, &mut ChaCha8Rng) -> Action,
    ) -> EpisodeStatus {
        debug_assert_eq!(self.status, EpisodeStatus::Running);
        let expert = match self.gate.as_mut() {
            Some(g) => {
                let d = domain
                    .distance(self.state.agent_cell)
                    .expect("agent on a free cell");
                g.observe(d)
            }
            None => false,
        };
        let action = if expert {
            domain.expert_action(&self.state)
        } else {
            policy(&self.obs, &self.state, &mut self.policy_rng)
        };
        let result = domain.step(&mut self.state, action, &mut self.env_rng);
        let obs = std::mem::replace(&mut self.obs, result.next_observation);
        self.frames.push(Frame {
            observation: obs,
            action,
            reward: result.reward,
            expert_flag: expert,
            advantage_indicator: None,
        });
        self.status = result.status;
        self.status
    }

    pub fn finish(
        self,
        task_id: u32,
        domain_seed: u64,
        policy_version: u64,
        source: Source,
    ) -> EpisodeRecord {
        debug_assert!(self.status.is_terminal());
        let spans = spans_from_flags(self.frames.iter().map(|f| f.expert_flag));
        EpisodeRecord {
            episode_id: self.episode_id,
            task_id,
            domain_seed,
            policy_version,
            sim_duration: self.frames.len() as u64,
            frames: self.frames,
            status: self.status,
            intervention_spans: spans,
            source,
        }
    }
}

/// Runs one full episode from reset to a terminal status.
pub fn rollout<R: Rng + ?Sized>(
    params: &PolicyParams,
    domain: &DomainParam,
    config: &ActorConfig,
    rng: &mut R,
) -> EpisodeRecord {
    let gate = config.intervention_enabled.then_some(config.gate_window);
    let mut run = EpisodeRun::start(domain, config.horizon, gate, rng);
    while run.status() == EpisodeStatus::Running {
        run.step_with(domain, |obs, _, prng| {
            policy_action(params, obs, config.rollout_mode, prng)
                .expect("observation matches policy dimension")
        });
    }
    run.finish(
        config.task_id,
        config.domain_seed,
        params.version(),
        Source::Online,
    )
}

/// Episode driven by an arbitrary controller, optionally gated.
pub fn rollout_with<R: Rng + ?Sized>(
    controller: &mut dyn Controller,
    domain: &DomainParam,
    horizon: u32,
    gate_window: Option<usize>,
    rng: &mut R,
) -> EpisodeRecord {
    let mut run = EpisodeRun::start(domain, horizon, gate_window, rng);
    while run.status() == EpisodeStatus::Running {
        run.step_with(domain, |obs, state, _| controller.act(obs, state, domain));
    }
    run.finish(domain.task_id, domain.obstacle_seed, 0, Source::Online)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ActorStats {
    pub episodes_started: u64,
    pub episodes_completed: u64,
    pub episodes_stored: u64,
    pub episodes_notified: u64,
    pub successes: u64,
    pub intervention_frames: u64,
    pub intervention_spans: u64,
    pub sim_steps: u64,
    pub upload_failures: u64,
    pub adopted_updates: u64,
    pub rejected_updates: u64,
    pub full_fetches: u64,
}

/// Audit entry: the version recorded on an episode and every version that
/// was active while its frames were produced.
#[derive(Debug, Clone, PartialEq)]
pub struct VersionLedgerEntry {
    pub episode_id: EpisodeId,
    pub recorded_version: u64,
    pub versions_used: BTreeSet<u64>,
}

#[derive(Debug)]
struct PendingUpload {
    record: EpisodeRecord,
    stored_key: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TickOutcome {
    Stepped,
    EpisodeFinished(EpisodeStatus),
    /// Outbox full and uploads failing; no new episode started.
    Blocked,
}

/// The actor's state machine. One `tick` is one environment step (plus any
/// boundary work: uploads and parameter adoption).
pub struct ActorUnit {
    config: ActorConfig,
    scenes: Vec<(u64, DomainParam)>,
    scene: usize,
    active: PolicyParams,
    rng: ChaCha8Rng,
    current: Option<EpisodeRun>,
    versions_in_episode: BTreeSet<u64>,
    outbox: VecDeque<PendingUpload>,
    params_sub: Option<Box<dyn Subscription>>,
    stats: ActorStats,
    ledger: Vec<VersionLedgerEntry>,
    keep_ledger: bool,
}

impl ActorUnit {
    pub fn new(config: ActorConfig, domain: DomainParam, initial: PolicyParams) -> Self {
        let rng =
            ChaCha8Rng::seed_from_u64(mix_seed(&[config.seed, config.actor_id as u64, 0xAC7]));
        ActorUnit {
            scenes: vec![(config.domain_seed, domain)],
            scene: 0,
            config,
            active: initial,
            rng,
            current: None,
            versions_in_episode: BTreeSet::new(),
            outbox: VecDeque::new(),
            params_sub: None,
            stats: ActorStats::default(),
            ledger: Vec::new(),
            keep_ledger: false,
        }
    }

    pub fn with_version_ledger(mut self) -> Self {
        self.keep_ledger = true;
        self
    }

    /// Replaces the single station with a pool of `(domain_seed, domain)`
    /// scenes; each episode runs on one drawn uniformly.
    pub fn with_scenes(mut self, scenes: Vec<(u64, DomainParam)>) -> Self {
        assert!(!scenes.is_empty(), "scene pool must be nonempty");
        self.scenes = scenes;
        self.scene = 0;
        self
    }

    pub fn config(&self) -> &ActorConfig {
        &self.config
    }

    /// The scene of the current (or most recent) episode.
    pub fn domain(&self) -> &DomainParam {
        &self.scenes[self.scene].1
    }

    pub fn active_params(&self) -> &PolicyParams {
        &self.active
    }

    pub fn stats(&self) -> &ActorStats {
        &self.stats
    }

    pub fn ledger(&self) -> &[VersionLedgerEntry] {
        &self.ledger
    }

    pub fn outbox_len(&self) -> usize {
        self.outbox.len()
    }

    pub fn in_episode(&self) -> bool {
        self.current.is_some()
    }

    /// Subscribes to parameter fanout; retried at later boundaries on failure.
    pub fn connect(&mut self, bus: &dyn MessageBus) {
        if self.params_sub.is_none() {
            match bus.subscribe(PARAMS_TOPIC, SubscribeMode::Fanout) {
                Ok(s) => self.params_sub = Some(s),
                Err(e) => log::warn!("{}: params subscription failed: {e}", self.config.name()),
            }
        }
    }

    pub fn tick(&mut self, bus: &dyn MessageBus, store: &FsStore) -> TickOutcome {
        if self.current.is_none() {
            self.flush(bus, store);
            if self.outbox.len() >= self.config.outbox_capacity {
                return TickOutcome::Blocked;
            }
            self.poll_params(bus, store);
            let gate = self
                .config
                .intervention_enabled
                .then_some(self.config.gate_window);
            if self.scenes.len() > 1 {
                self.scene = self.rng.random_range(0..self.scenes.len());
            }
            self.current = Some(EpisodeRun::start(
                &self.scenes[self.scene].1,
                self.config.horizon,
                gate,
                &mut self.rng,
            ));
            self.versions_in_episode.clear();
            self.stats.episodes_started += 1;
        }
        let run = self.current.as_mut().expect("episode in progress");
        let params = &self.active;
        let mode = self.config.rollout_mode;
        self.versions_in_episode.insert(params.version());
        let status = run.step_with(&self.scenes[self.scene].1, |obs, _, prng| {
            policy_action(params, obs, mode, prng).expect("observation matches policy dimension")
        });
        self.stats.sim_steps += 1;
        if !status.is_terminal() {
            return TickOutcome::Stepped;
        }
        let run = self.current.take().expect("episode in progress");
        let record = run.finish(
            self.config.task_id,
            self.scenes[self.scene].0,
            self.active.version(),
            Source::Online,
        );
        self.stats.episodes_completed += 1;
        self.stats.intervention_frames += record.intervention_frames() as u64;
        self.stats.intervention_spans += record.intervention_spans.len() as u64;
        if record.status == EpisodeStatus::Success {
            self.stats.successes += 1;
        }
        if self.keep_ledger {
            self.ledger.push(VersionLedgerEntry {
                episode_id: record.episode_id,
                recorded_version: record.policy_version,
                versions_used: std::mem::take(&mut self.versions_in_episode),
            });
        }
        self.outbox.push_back(PendingUpload {
            record,
            stored_key: None,
        });
        self.flush(bus, store);
        TickOutcome::EpisodeFinished(status)
    }

    /// Uploads queued episodes in order: durable put first, then notification.
    /// Returns false if something is still queued.
    pub fn flush(&mut self, bus: &dyn MessageBus, store: &FsStore) -> bool {
        while let Some(front) = self.outbox.front_mut() {
            if front.stored_key.is_none() {
                match store.put_episode(&front.record) {
                    Ok(key) => {
                        front.stored_key = Some(key);
                        self.stats.episodes_stored += 1;
                    }
                    Err(e) => {
                        self.stats.upload_failures += 1;
                        log::debug!("{}: store put failed: {e}", self.config.name());
                        return false;
                    }
                }
            }
            let note = EpisodeNotification {
                episode_id: front.record.episode_id,
                task_id: front.record.task_id,
                storage_key: front.stored_key.clone().expect("stored"),
            };
            if let Err(e) = bus.publish(EPISODES_TOPIC, &self.config.name(), &note.encode()) {
                self.stats.upload_failures += 1;
                log::debug!("{}: notification publish failed: {e}", self.config.name());
                return false;
            }
            self.stats.episodes_notified += 1;
            self.outbox.pop_front();
        }
        true
    }

    /// Drains pending parameter messages and adopts the newest verified one.
    /// Only called between episodes.
    fn poll_params(&mut self, bus: &dyn MessageBus, store: &FsStore) {
        debug_assert!(self.current.is_none());
        self.connect(bus);
        let Some(sub) = self.params_sub.as_mut() else {
            return;
        };
        let mut messages = Vec::new();
        loop {
            match sub.try_recv() {
                Ok(Some(d)) => {
                    let _ = sub.ack(d.envelope.seq);
                    messages.push(d.envelope.payload);
                }
                Ok(None) => break,
                Err(e) => {
                    log::warn!("{}: params receive failed: {e}", self.config.name());
                    self.params_sub = None;
                    break;
                }
            }
        }
        let mut need_full = false;
        for payload in messages {
            match ParamsMessage::decode(&payload) {
                Ok(ParamsMessage::Full(p)) => {
                    if p.version() > self.active.version() {
                        self.adopt(p);
                    }
                }
                Ok(ParamsMessage::Delta(delta)) => {
                    if delta.new_version <= self.active.version() {
                        continue;
                    }
                    match apply_delta(&self.active, &delta) {
                        Ok(p) => self.adopt(p),
                        Err(PolicyError::StaleBase { .. }) => need_full = true,
                        Err(e) => {
                            self.stats.rejected_updates += 1;
                            log::warn!(
                                "{}: discarding checkpoint delta v{}: {e}; keeping v{}",
                                self.config.name(),
                                delta.new_version,
                                self.active.version()
                            );
                            need_full = true;
                        }
                    }
                }
                Err(e) => {
                    self.stats.rejected_updates += 1;
                    log::warn!("{}: undecodable params message: {e}", self.config.name());
                    need_full = true;
                }
            }
        }
        if need_full {
            self.fetch_full(store);
        }
    }

    fn fetch_full(&mut self, store: &FsStore) {
        self.stats.full_fetches += 1;
        match store.get_checkpoint(LATEST_CHECKPOINT_KEY) {
            Ok(p)
                if p.version() > self.active.version()
                    && p.feature_dim() == self.active.feature_dim() =>
            {
                self.adopt(p)
            }
            Ok(_) => {}
            Err(StoreError::NotFound(_)) => {
                log::warn!(
                    "{}: no full checkpoint available; keeping v{}",
                    self.config.name(),
                    self.active.version()
                )
            }
            Err(e) => log::warn!("{}: full checkpoint fetch failed: {e}", self.config.name()),
        }
    }

    fn adopt(&mut self, p: PolicyParams) {
        log::debug!(
            "{}: adopting v{} (hash {:016x})",
            self.config.name(),
            p.version(),
            p.content_hash()
        );
        self.active = p;
        self.stats.adopted_updates += 1;
    }
}

/// Stop conditions for [`run_actor`].
#[derive(Debug, Clone, Default)]
pub struct RunLimits {
    pub max_episodes: Option<u64>,
    /// Real-time pause after each environment step.
    pub step_interval: Option<Duration>,
}

/// Threaded actor loop: runs until `stop` is set or `max_episodes` episodes
/// are completed and uploaded. Upload failures back off exponentially.
pub fn run_actor(
    mut unit: ActorUnit,
    bus: &dyn MessageBus,
    store: &FsStore,
    limits: RunLimits,
    stop: &AtomicBool,
) -> ActorUnit {
    unit.connect(bus);
    let mut backoff = Duration::from_millis(5);
    loop {
        if stop.load(Ordering::SeqCst) {
            break;
        }
        let done = limits
            .max_episodes
            .is_some_and(|m| unit.stats().episodes_completed >= m);
        if done && !unit.in_episode() {
            if unit.flush(bus, store) {
                break;
            }
            thread::sleep(backoff);
            backoff = (backoff * 2).min(Duration::from_secs(1));
            continue;
        }
        match unit.tick(bus, store) {
            TickOutcome::Blocked => {
                thread::sleep(backoff);
                backoff = (backoff * 2).min(Duration::from_secs(1));
            }
            TickOutcome::EpisodeFinished(_) if unit.outbox_len() > 0 => {
                thread::sleep(backoff);
                backoff = (backoff * 2).min(Duration::from_secs(1));
            }
            _ => {
                if unit.outbox_len() == 0 {
                    backoff = Duration::from_millis(5);
                }
                if let Some(d) = limits.step_interval {
                    thread::sleep(d);
                }
            }
        }
    }
    unit
}
