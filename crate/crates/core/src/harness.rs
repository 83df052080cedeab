//! Experiment runner: demo corpus, behavior-cloned base policies, lockstep
//! fleet runs against the real bus and store, frozen-policy evaluation and
//! run summaries.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::actor::{rollout_with, ActorConfig, ActorUnit, EpisodeRun, ExpertController, RolloutMode};
use crate::algorithms::{hgdagger_update, AlgorithmError, AlgorithmKind, AlgorithmSpec, RecapSettings};
use crate::bus::{Broker, BusError, BrokerConfig, MessageBus, SubscribeMode, EPISODES_TOPIC, LEARNER_GROUP};
use crate::envsim::{DomainParam, EnvError, EpisodeStatus, TaskFamily};
use crate::learner::{BufferedFrame, Learner, LearnerError, Origin, SampledItem, TrainConfig};
use crate::policy::PolicyParams;
use crate::store::{EpisodeId, EpisodeRecord, FsStore, Source, StoreError};
use crate::util::mix_seed;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config line {line}: {msg}")]
    Config { line: usize, msg: String },
    #[error("invalid setting: {0}")]
    Invalid(String),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Learner(#[from] LearnerError),
    #[error(transparent)]
    Algorithm(#[from] AlgorithmError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Bus(#[from] BusError),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("no usable rows in {0}")]
    EmptyMetrics(String),
}

/// Every tunable of a run. Read from a `key=value` file; CLI flags override.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub family: TaskFamily,
    pub algorithm: AlgorithmKind,
    pub recap: RecapSettings,
    pub train: TrainConfig,
    /// Learner step budget.
    pub budget: u64,
    pub actors: u32,
    /// Tasks the fleet is deployed on; actor i serves `tasks[i % len]`.
    pub tasks: Vec<u32>,
    /// Layouts per deployed task; each actor episode draws one.
    pub scenes: usize,
    pub gate_window: usize,
    pub demos_per_task: usize,
    /// Demo fraction for the base policy and the offline buffers.
    pub fraction: f64,
    pub pretrain_epochs: usize,
    /// Start from this checkpoint instead of pretraining.
    pub base_ckpt: Option<PathBuf>,
    pub eval_every: u64,
    pub eval_trials: usize,
    pub eval_mode: EvalMode,
    pub target: f64,
    /// Environment steps per simulated second.
    pub steps_per_second: f64,
    /// Learner steps per simulated second.
    pub learner_rate: f64,
    /// Cap on sampled items per ingested online frame; 0 disables the cap.
    pub samples_per_insert: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalMode {
    Greedy,
    Sample,
}

impl Default for RunConfig {
    fn default() -> Self {
        let family = TaskFamily::default();
        RunConfig {
            seed: 0,
            recap: RecapSettings::new(family.num_tasks as usize),
            family,
            algorithm: AlgorithmKind::HgDagger,
            train: TrainConfig::default(),
            budget: 2000,
            actors: 1,
            tasks: vec![0, 1, 2],
            scenes: 4,
            gate_window: 3,
            demos_per_task: 300,
            fraction: 0.5,
            pretrain_epochs: 2,
            base_ckpt: None,
            eval_every: 200,
            eval_trials: 50,
            eval_mode: EvalMode::Sample,
            target: 0.8,
            steps_per_second: 30.0,
            learner_rate: 120.0,
            samples_per_insert: 8.0,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, String> {
    v.parse().map_err(|_| format!("bad value for {key}: {v:?}"))
}

/// Accepts `0.5`, `1/8` or `1`.
pub fn parse_fraction(v: &str) -> Result<f64, String> {
    let f = match v.split_once('/') {
        Some((a, b)) => {
            let a: f64 = a.trim().parse().map_err(|_| format!("bad fraction {v:?}"))?;
            let b: f64 = b.trim().parse().map_err(|_| format!("bad fraction {v:?}"))?;
            a / b
        }
        None => v.trim().parse().map_err(|_| format!("bad fraction {v:?}"))?,
    };
    if f > 0.0 && f <= 1.0 {
        Ok(f)
    } else {
        Err(format!("fraction must lie in (0, 1], got {v}"))
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, HarnessError> {
        let mut cfg = RunConfig::default();
        let mut epsilons = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| HarnessError::Config {
                line: i + 1,
                msg: format!("expected key=value, got {line:?}"),
            })?;
            let (k, v) = (k.trim(), v.trim());
            if let Some(t) = k.strip_prefix("epsilon.task_") {
                let t: usize = parse_num(k, t).map_err(|msg| HarnessError::Config { line: i + 1, msg })?;
                let e: f64 = parse_num(k, v).map_err(|msg| HarnessError::Config { line: i + 1, msg })?;
                epsilons.insert(t, e);
                continue;
            }
            cfg.set(k, v).map_err(|msg| HarnessError::Config { line: i + 1, msg })?;
        }
        cfg.recap.epsilons.resize(cfg.family.num_tasks as usize, 0.0);
        for (t, e) in epsilons {
            if t >= cfg.recap.epsilons.len() {
                return Err(HarnessError::Invalid(format!("epsilon for task {t} but M={}", cfg.family.num_tasks)));
            }
            cfg.recap.epsilons[t] = e;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<(), String> {
        match key {
            "seed" => self.seed = parse_num(key, v)?,
            "M" => {
                self.family.num_tasks = parse_num(key, v)?;
                self.recap.epsilons.resize(self.family.num_tasks as usize, 0.0);
                self.tasks = (0..self.family.num_tasks).collect();
            }
            "alpha" | "α" => self.train.sampler.alpha = parse_num(key, v)?,
            "W" => self.train.sampler.window = parse_num(key, v)?,
            "clip_lo" => self.train.sampler.clip_lo = parse_num(key, v)?,
            "clip_hi" => self.train.sampler.clip_hi = parse_num(key, v)?,
            "K" => self.train.publish_interval = parse_num(key, v)?,
            "lr" => self.train.lr = parse_num(key, v)?,
            "batch_size" => self.train.batch_size = parse_num(key, v)?,
            "online_capacity" => self.train.online_capacity = parse_num(key, v)?,
            "budget" => self.budget = parse_num(key, v)?,
            "algorithm" => {
                self.algorithm = AlgorithmKind::parse(v).ok_or_else(|| format!("unknown algorithm {v:?}"))?
            }
            "gamma" => self.recap.gamma = parse_num(key, v)?,
            "beta_rollout" => self.recap.beta_rollout = parse_num(key, v)?,
            "beta_eval" => self.recap.beta_eval = parse_num(key, v)?,
            "actors" => self.actors = parse_num(key, v)?,
            "tasks" => {
                self.tasks = v
                    .split(',')
                    .map(|t| parse_num::<u32>(key, t.trim()))
                    .collect::<Result<_, _>>()?
            }
            "scenes" => self.scenes = parse_num(key, v)?,
            "width" => self.family.width = parse_num(key, v)?,
            "height" => self.family.height = parse_num(key, v)?,
            "horizon" => self.family.horizon = parse_num(key, v)?,
            "max_slip" => self.family.max_slip = parse_num(key, v)?,
            "max_obs_noise" => self.family.max_obs_noise = parse_num(key, v)?,
            "gate_window" => self.gate_window = parse_num(key, v)?,
            "demos_per_task" => self.demos_per_task = parse_num(key, v)?,
            "fraction" => self.fraction = parse_fraction(v)?,
            "pretrain_epochs" => self.pretrain_epochs = parse_num(key, v)?,
            "base_ckpt" => self.base_ckpt = Some(PathBuf::from(v)),
            "eval_every" => self.eval_every = parse_num(key, v)?,
            "eval_trials" => self.eval_trials = parse_num(key, v)?,
            "eval_mode" => {
                self.eval_mode = match v {
                    "greedy" => EvalMode::Greedy,
                    "sample" => EvalMode::Sample,
                    _ => return Err(format!("eval_mode must be greedy or sample, got {v:?}")),
                }
            }
            "target" => self.target = parse_num(key, v)?,
            "steps_per_second" => self.steps_per_second = parse_num(key, v)?,
            "learner_rate" => self.learner_rate = parse_num(key, v)?,
            "samples_per_insert" => self.samples_per_insert = parse_num(key, v)?,
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        self.family.validate()?;
        self.train.validate()?;
        self.algorithm_spec().validate()?;
        let m = self.family.num_tasks;
        let bad = |s: &str| Err(HarnessError::Invalid(s.into()));
        if self.tasks.is_empty() || self.tasks.iter().any(|&t| t >= m) {
            return bad("tasks must be nonempty and below M");
        }
        if self.scenes == 0 {
            return bad("scenes must be positive");
        }
        if !(self.samples_per_insert >= 0.0 && self.samples_per_insert.is_finite()) {
            return bad("samples_per_insert must be finite and nonnegative");
        }
        if self.actors == 0 {
            return bad("need at least one actor");
        }
        if self.gate_window < 2 {
            return bad("gate_window must be at least 2");
        }
        if self.eval_every == 0 || self.eval_trials == 0 {
            return bad("eval_every and eval_trials must be positive");
        }
        if !(self.steps_per_second > 0.0 && self.learner_rate > 0.0) {
            return bad("steps_per_second and learner_rate must be positive");
        }
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return bad("fraction must lie in (0, 1]");
        }
        if self.demos_per_task == 0 || self.pretrain_epochs == 0 {
            return bad("demos_per_task and pretrain_epochs must be positive");
        }
        Ok(())
    }

    pub fn algorithm_spec(&self) -> AlgorithmSpec {
        AlgorithmSpec {
            kind: self.algorithm,
            recap: self.recap.clone(),
        }
    }

    /// The first station a task is deployed on for this seed.
    pub fn deploy_domain(&self, task: u32) -> Result<DomainParam, HarnessError> {
        Ok(self.family.sample_domain(task, deploy_seed(self.seed, task))?)
    }

    /// All `scenes` stations of a task as `(domain_seed, domain)`.
    pub fn deploy_scenes(&self, task: u32) -> Result<Vec<(u64, DomainParam)>, HarnessError> {
        (0..self.scenes)
            .map(|s| {
                let seed = match s {
                    0 => deploy_seed(self.seed, task),
                    _ => mix_seed(&[self.seed, task as u64, 0xDE9, s as u64]),
                };
                Ok((seed, self.family.sample_domain(task, seed)?))
            })
            .collect()
    }

    pub fn rollout_mode(&self) -> RolloutMode {
        match self.algorithm {
            AlgorithmKind::HgDagger => RolloutMode::Sample,
            AlgorithmKind::Recap => RolloutMode::RecapSample(self.recap.beta_rollout),
        }
    }

    /// Mode used by frozen-policy evaluation.
    pub fn eval_rollout_mode(&self) -> RolloutMode {
        match (self.algorithm, self.eval_mode) {
            (_, EvalMode::Greedy) => RolloutMode::Greedy,
            (AlgorithmKind::HgDagger, EvalMode::Sample) => RolloutMode::Sample,
            (AlgorithmKind::Recap, EvalMode::Sample) => RolloutMode::RecapSample(self.recap.beta_eval),
        }
    }
}

pub fn deploy_seed(seed: u64, task: u32) -> u64 {
    mix_seed(&[seed, task as u64, 0xDE9])
}

/// Expert demonstrations: `per_task` episodes for every task, each on its
/// own freshly drawn layout. Fractions take prefixes, so smaller corpora are
/// nested in larger ones.
pub fn demo_corpus(family: &TaskFamily, per_task: usize, seed: u64) -> Result<Vec<Vec<EpisodeRecord>>, HarnessError> {
    let mut out = Vec::with_capacity(family.num_tasks as usize);
    for task in 0..family.num_tasks {
        let mut eps = Vec::with_capacity(per_task);
        for j in 0..per_task {
            let layout = mix_seed(&[seed, task as u64, j as u64, 0xDE]);
            let domain = family.sample_domain(task, layout)?;
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[layout, 0xE9]));
            let mut rec = rollout_with(&mut ExpertController, &domain, family.horizon, None, &mut rng);
            for f in &mut rec.frames {
                f.expert_flag = true;
            }
            rec.intervention_spans = vec![(0, rec.frames.len() as u32)];
            rec.source = Source::Offline;
            eps.push(rec);
        }
        out.push(eps);
    }
    Ok(out)
}

pub fn corpus_prefix(corpus: &[Vec<EpisodeRecord>], fraction: f64) -> Vec<EpisodeRecord> {
    corpus
        .iter()
        .flat_map(|eps| {
            let n = ((eps.len() as f64 * fraction).round() as usize).clamp(1, eps.len());
            eps[..n].iter().cloned()
        })
        .collect()
}

/// Offline behavior cloning: `epochs` passes of shuffled minibatch SGD on
/// the marginal head.
pub fn behavior_clone(
    initial: &PolicyParams,
    episodes: &[EpisodeRecord],
    epochs: usize,
    lr: f64,
    batch_size: usize,
    seed: u64,
) -> Result<PolicyParams, HarnessError> {
    let items: Vec<SampledItem> = episodes
        .iter()
        .flat_map(|ep| {
            ep.frames.iter().map(|f| SampledItem {
                task: ep.task_id,
                origin: Origin::Offline,
                frame: Arc::new(BufferedFrame {
                    frame: f.clone(),
                    episode_id: ep.episode_id,
                }),
            })
        })
        .collect();
    let mut params = initial.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, 0xBC]));
    let mut order: Vec<usize> = (0..items.len()).collect();
    for _ in 0..epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch_size) {
            let batch: Vec<SampledItem> = chunk.iter().map(|&i| items[i].clone()).collect();
            params = hgdagger_update(&params, &batch, lr)?.params;
        }
    }
    Ok(params)
}

/// Base policy from the demo fraction. Deterministic in (config, fraction, seed).
pub fn cmd_pretrain(config: &RunConfig, fraction: f64, seed: u64) -> Result<PolicyParams, HarnessError> {
    parse_fraction(&fraction.to_string()).map_err(HarnessError::Invalid)?;
    let corpus = demo_corpus(&config.family, config.demos_per_task, seed)?;
    let demos = corpus_prefix(&corpus, fraction);
    let init = PolicyParams::zeros(config.family.feature_dim());
    behavior_clone(&init, &demos, config.pretrain_epochs, config.train.lr, config.train.batch_size, seed)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub trials: usize,
    pub successes: usize,
    pub success_rate: f64,
    pub env_steps: u64,
    /// Completed episodes per simulated hour.
    pub throughput: f64,
}

/// `trials` episodes without interventions, spread round-robin over
/// `domains`. Episode streams depend only on `seed` and the trial index.
pub fn evaluate(
    params: &PolicyParams,
    domains: &[DomainParam],
    trials: usize,
    mode: RolloutMode,
    horizon: u32,
    steps_per_second: f64,
    seed: u64,
) -> EvalResult {
    evaluate_with(domains, trials, horizon, steps_per_second, seed, |run, domain| {
        run.step_with(domain, |obs, _, prng| {
            crate::actor::policy_action(params, obs, mode, prng).expect("observation matches policy dimension")
        })
    })
}

/// The scripted expert under the same protocol as [`evaluate`].
pub fn evaluate_expert(domains: &[DomainParam], trials: usize, horizon: u32, steps_per_second: f64, seed: u64) -> EvalResult {
    evaluate_with(domains, trials, horizon, steps_per_second, seed, |run, domain| {
        run.step_with(domain, |_, state, _| domain.expert_action(state))
    })
}

fn evaluate_with(
    domains: &[DomainParam],
    trials: usize,
    horizon: u32,
    steps_per_second: f64,
    seed: u64,
    mut step: impl FnMut(&mut EpisodeRun, &DomainParam) -> EpisodeStatus,
) -> EvalResult {
    assert!(!domains.is_empty(), "evaluation needs a domain");
    let mut successes = 0;
    let mut env_steps = 0u64;
    for i in 0..trials {
        let domain = &domains[i % domains.len()];
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, 0xE7A1, i as u64]));
        let mut run = EpisodeRun::start(domain, horizon, None, &mut rng);
        let mut status = EpisodeStatus::Running;
        while status == EpisodeStatus::Running {
            status = step(&mut run, domain);
        }
        env_steps += run.frames().len() as u64;
        if status == EpisodeStatus::Success {
            successes += 1;
        }
    }
    let hours = env_steps as f64 / steps_per_second / 3600.0;
    EvalResult {
        trials,
        successes,
        success_rate: if trials == 0 { 0.0 } else { successes as f64 / trials as f64 },
        env_steps,
        throughput: if hours > 0.0 { trials as f64 / hours } else { 0.0 },
    }
}

/// Evaluation seed stream, disjoint from actor and corpus streams.
pub fn eval_seed(seed: u64) -> u64 {
    mix_seed(&[seed, 0xE7A1_5EED])
}

/// Frozen-policy evaluation on the deployed tasks of `config`.
pub fn cmd_eval(config: &RunConfig, params: &PolicyParams, trials: usize) -> Result<EvalResult, HarnessError> {
    let domains = deployed_domains(config)?;
    Ok(evaluate(
        params,
        &domains,
        trials,
        config.eval_rollout_mode(),
        config.family.horizon,
        config.steps_per_second,
        eval_seed(config.seed),
    ))
}

/// Every scene of every deployed task.
pub fn deployed_domains(config: &RunConfig) -> Result<Vec<DomainParam>, HarnessError> {
    let mut tasks = config.tasks.clone();
    tasks.sort_unstable();
    tasks.dedup();
    let mut out = Vec::new();
    for t in tasks {
        out.extend(config.deploy_scenes(t)?.into_iter().map(|(_, d)| d));
    }
    Ok(out)
}

/// One evaluation point of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsPoint {
    pub learner_step: u64,
    pub sim_seconds: f64,
    pub wall_ms: u64,
    pub sim_steps: u64,
    pub eval_success_rate: f64,
    pub eval_throughput: f64,
    pub episodes_completed: u64,
    pub interventions_count: u64,
    pub publishes: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunMetrics {
    pub algorithm: String,
    pub actors: u32,
    pub seed: u64,
    pub points: Vec<MetricsPoint>,
}

pub const METRICS_HEADER: [&str; 12] = [
    "algorithm",
    "actors",
    "seed",
    "learner_step",
    "sim_seconds",
    "wall_ms",
    "sim_steps",
    "eval_success_rate",
    "eval_throughput",
    "episodes_completed",
    "interventions_count",
    "publishes",
];

impl RunMetrics {
    /// First simulated time at which evaluation success reached `target`.
    pub fn time_to_target(&self, target: f64) -> Option<f64> {
        self.points.iter().find(|p| p.eval_success_rate >= target).map(|p| p.sim_seconds)
    }

    pub fn final_success(&self) -> Option<f64> {
        self.points.last().map(|p| p.eval_success_rate)
    }

    /// Fleet episodes completed per simulated hour.
    pub fn throughput(&self) -> Option<f64> {
        let p = self.points.last()?;
        (p.sim_seconds > 0.0).then(|| p.episodes_completed as f64 / (p.sim_seconds / 3600.0))
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), HarnessError> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(METRICS_HEADER)?;
        for p in &self.points {
            w.write_record([
                self.algorithm.clone(),
                self.actors.to_string(),
                self.seed.to_string(),
                p.learner_step.to_string(),
                format!("{:.4}", p.sim_seconds),
                p.wall_ms.to_string(),
                p.sim_steps.to_string(),
                format!("{:.6}", p.eval_success_rate),
                format!("{:.3}", p.eval_throughput),
                p.episodes_completed.to_string(),
                p.interventions_count.to_string(),
                p.publishes.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a metrics file; malformed rows are skipped with a warning.
    pub fn read_csv(path: &Path) -> Result<Self, HarnessError> {
        let mut r = csv::ReaderBuilder::new().flexible(true).from_path(path)?;
        let mut out: Option<RunMetrics> = None;
        for (i, row) in r.records().enumerate() {
            let row = match row {
                Ok(r) => r,
                Err(e) => {
                    log::warn!("{}: skipping row {}: {e}", path.display(), i + 2);
                    continue;
                }
            };
            match parse_metrics_row(&row) {
                Some((alg, actors, seed, p)) => {
                    let m = out.get_or_insert_with(|| RunMetrics {
                        algorithm: alg,
                        actors,
                        seed,
                        points: Vec::new(),
                    });
                    m.points.push(p);
                }
                None => log::warn!("{}: skipping malformed row {}", path.display(), i + 2),
            }
        }
        out.ok_or_else(|| HarnessError::EmptyMetrics(path.display().to_string()))
    }
}

fn parse_metrics_row(row: &csv::StringRecord) -> Option<(String, u32, u64, MetricsPoint)> {
    if row.len() != METRICS_HEADER.len() {
        return None;
    }
    let f = |i: usize| row.get(i).map(str::trim);
    let p = MetricsPoint {
        learner_step: f(3)?.parse().ok()?,
        sim_seconds: f(4)?.parse().ok()?,
        wall_ms: f(5)?.parse().ok()?,
        sim_steps: f(6)?.parse().ok()?,
        eval_success_rate: f(7)?.parse().ok()?,
        eval_throughput: f(8)?.parse().ok()?,
        episodes_completed: f(9)?.parse().ok()?,
        interventions_count: f(10)?.parse().ok()?,
        publishes: f(11)?.parse().ok()?,
    };
    if !(0.0..=1.0).contains(&p.eval_success_rate) {
        return None;
    }
    Some((f(0)?.to_string(), f(1)?.parse().ok()?, f(2)?.parse().ok()?, p))
}

/// Per-run summary row of [`cmd_report`].
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub file: String,
    pub algorithm: String,
    pub actors: u32,
    pub seed: u64,
    pub final_success: f64,
    pub time_to_target: Option<f64>,
    pub throughput: f64,
    pub speedup: Option<f64>,
}

/// Summaries of metrics files. The first file is the speedup baseline;
/// with a single file the speedup column stays empty.
pub fn cmd_report(files: &[PathBuf], target: f64) -> Result<Vec<ReportRow>, HarnessError> {
    if files.is_empty() {
        return Err(HarnessError::Invalid("report needs at least one metrics file".into()));
    }
    let runs: Vec<RunMetrics> = files.iter().map(|f| RunMetrics::read_csv(f)).collect::<Result<_, _>>()?;
    let base_t = runs[0].time_to_target(target);
    let rows = files
        .iter()
        .zip(&runs)
        .map(|(f, m)| {
            let t = m.time_to_target(target);
            let speedup = match (files.len() > 1, base_t, t) {
                (true, Some(b), Some(t)) if t > 0.0 => Some(b / t),
                _ => None,
            };
            let last = m.points.last().expect("nonempty");
            ReportRow {
                file: f.display().to_string(),
                algorithm: m.algorithm.clone(),
                actors: m.actors,
                seed: m.seed,
                final_success: last.eval_success_rate,
                time_to_target: t,
                throughput: last.eval_throughput,
                speedup,
            }
        })
        .collect();
    Ok(rows)
}

pub fn write_report(rows: &[ReportRow], out: impl io::Write) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["file", "algorithm", "actors", "seed", "final_success", "time_to_target_s", "throughput_eph", "speedup"])?;
    let opt = |v: Option<f64>, prec: usize| v.map(|x| format!("{x:.prec$}")).unwrap_or_default();
    for r in rows {
        w.write_record([
            r.file.clone(),
            r.algorithm.clone(),
            r.actors.to_string(),
            r.seed.to_string(),
            format!("{:.4}", r.final_success),
            opt(r.time_to_target, 2),
            format!("{:.1}", r.throughput),
            opt(r.speedup, 3),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Everything a finished run produced.
pub struct RunOutcome {
    pub metrics: RunMetrics,
    pub final_params: PolicyParams,
    pub learner_steps: u64,
    pub publishes: u64,
    pub episodes_ingested: u64,
    pub duplicates: u64,
    pub quarantined: u64,
    /// Ids of every episode that reached the learner's buffers.
    pub trained_episode_ids: Vec<EpisodeId>,
    pub aborted: Option<String>,
}

impl fmt::Debug for RunOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RunOutcome")
            .field("points", &self.metrics.points.len())
            .field("learner_steps", &self.learner_steps)
            .field("publishes", &self.publishes)
            .field("episodes_ingested", &self.episodes_ingested)
            .field("aborted", &self.aborted)
            .finish()
    }
}

/// Resolves the base policy: `base_ckpt` if set, else pretraining on the
/// configured fraction.
pub fn base_policy(config: &RunConfig) -> Result<PolicyParams, HarnessError> {
    match &config.base_ckpt {
        Some(p) => Ok(PolicyParams::decode(&fs::read(p)?).map_err(|e| HarnessError::Invalid(e.to_string()))?),
        None => cmd_pretrain(config, config.fraction, config.seed),
    }
}

/// Lockstep SOP run: every simulated tick each actor takes one environment
/// step, then the learner ingests and trains at `learner_rate`. All traffic
/// goes through an in-process broker and the file store under `run_dir`.
/// Writes `metrics.csv`, `learner.csv` and `final.ckpt` there.
pub fn cmd_run(config: &RunConfig, base: &PolicyParams, run_dir: &Path) -> Result<RunOutcome, HarnessError> {
    config.validate()?;
    fs::create_dir_all(run_dir)?;
    let started = Instant::now();
    let broker = Broker::new(BrokerConfig::default());
    let store = Arc::new(FsStore::open(run_dir.join("store"))?);
    let corpus = demo_corpus(&config.family, config.demos_per_task, config.seed)?;
    let offline = corpus_prefix(&corpus, config.fraction);
    let mut learner = Learner::new(
        base.clone(),
        offline,
        config.family.num_tasks,
        config.algorithm_spec(),
        config.train.clone(),
        store.clone(),
        mix_seed(&[config.seed, 0x1EA2]),
    )?;
    learner.seed_checkpoint()?;
    let ingestor = learner.ingestor();
    let mut episodes_sub = broker.subscribe(EPISODES_TOPIC, SubscribeMode::ConsumerGroup(LEARNER_GROUP.into()))?;

    let eval_domains = deployed_domains(config)?;
    let eval_mode = config.eval_rollout_mode();
    let eval_seed = eval_seed(config.seed);
    let run_eval = |p: &PolicyParams| {
        evaluate(p, &eval_domains, config.eval_trials, eval_mode, config.family.horizon, config.steps_per_second, eval_seed)
    };

    let mut actors: Vec<ActorUnit> = (0..config.actors)
        .map(|i| {
            let task = config.tasks[i as usize % config.tasks.len()];
            let scenes = config.deploy_scenes(task)?;
            let domain = scenes[0].1.clone();
            let mut ac = ActorConfig::new(i, task, deploy_seed(config.seed, task), config.seed);
            ac.horizon = config.family.horizon;
            ac.gate_window = config.gate_window;
            ac.rollout_mode = config.rollout_mode();
            let mut unit = ActorUnit::new(ac, domain, learner.params().clone()).with_scenes(scenes);
            unit.connect(&broker);
            Ok(unit)
        })
        .collect::<Result<_, HarnessError>>()?;

    let mut learner_log = csv::Writer::from_path(run_dir.join("learner.csv"))?;
    learner_log.write_record([
        "step",
        "wall_ms",
        "task",
        "origin_fraction",
        "loss",
        "omega_on",
        "publishes",
        "online_frames",
        "offline_frames",
    ])?;

    let mut metrics = RunMetrics {
        algorithm: config.algorithm.as_str().into(),
        actors: config.actors,
        seed: config.seed,
        points: Vec::new(),
    };
    let mut tick = 0u64;
    let fleet_snapshot = |actors: &[ActorUnit]| -> (u64, u64) {
        actors.iter().fold((0, 0), |(e, s), a| (e + a.stats().episodes_completed, s + a.stats().sim_steps))
    };
    let push_point = |metrics: &mut RunMetrics, step: u64, tick: u64, actors: &[ActorUnit], interventions: u64, publishes: u64, params: &PolicyParams| {
        let ev = run_eval(params);
        let (episodes, steps) = fleet_snapshot(actors);
        metrics.points.push(MetricsPoint {
            learner_step: step,
            sim_seconds: tick as f64 / config.steps_per_second,
            wall_ms: started.elapsed().as_millis() as u64,
            sim_steps: steps,
            eval_success_rate: ev.success_rate,
            eval_throughput: ev.throughput,
            episodes_completed: episodes,
            interventions_count: interventions,
            publishes,
        });
    };
    push_point(&mut metrics, 0, 0, &actors, 0, 0, learner.params());

    let per_tick = config.learner_rate / config.steps_per_second;
    let mut credit = 0.0;
    let mut aborted = None;
    let mut idle_ticks = 0u64;
    while learner.steps() < config.budget {
        tick += 1;
        for a in actors.iter_mut() {
            a.tick(&broker, &store);
        }
        ingestor.drain(episodes_sub.as_mut())?;
        credit = (credit + per_tick).min(per_tick.max(1.0));
        let inserted = ingestor.stats().online_frames as f64;
        let batch = config.train.batch_size as f64;
        while credit >= 1.0 && learner.steps() < config.budget {
            if config.samples_per_insert > 0.0
                && (learner.steps() + 1) as f64 * batch > config.samples_per_insert * inserted
            {
                break;
            }
            credit -= 1.0;
            match learner.train_step(&broker) {
                Ok(r) => {
                    idle_ticks = 0;
                    let wall = started.elapsed().as_millis().to_string();
                    for (t, tr) in r.per_task.iter().enumerate() {
                        let frac = if tr.batch_items > 0 { tr.online_items as f64 / tr.batch_items as f64 } else { 0.0 };
                        learner_log.write_record([
                            r.step.to_string(),
                            wall.clone(),
                            t.to_string(),
                            format!("{frac:.4}"),
                            format!("{:.6}", tr.mean_loss),
                            format!("{:.6}", tr.mix),
                            learner.publishes().to_string(),
                            tr.online_frames.to_string(),
                            tr.offline_frames.to_string(),
                        ])?;
                    }
                    if r.step % config.eval_every == 0 || r.step == config.budget {
                        let spans = actors.iter().map(|a| a.stats().intervention_spans).sum();
                        push_point(&mut metrics, r.step, tick, &actors, spans, learner.publishes(), learner.params());
                    }
                }
                Err(LearnerError::EmptyBuffers(t)) => {
                    idle_ticks += 1;
                    if idle_ticks > 1_000_000 {
                        aborted = Some(format!("no data for task {t}"));
                    }
                    break;
                }
                Err(e) => {
                    log::error!("learner failed at step {}: {e}", learner.steps());
                    aborted = Some(e.to_string());
                    break;
                }
            }
        }
        if aborted.is_some() {
            break;
        }
    }
    learner_log.flush()?;
    metrics.write_csv(&run_dir.join("metrics.csv"))?;
    let final_params = learner.params().clone();
    fs::write(run_dir.join("final.ckpt"), final_params.encode())?;
    let stats = ingestor.stats();
    let trained_episode_ids = ingestor.with_buffers(|b| {
        let mut ids: Vec<EpisodeId> =
            (0..b.num_tasks() as u32).flat_map(|t| b.online_frames(t).map(|f| f.episode_id).collect::<Vec<_>>()).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    });
    Ok(RunOutcome {
        metrics,
        final_params,
        learner_steps: learner.steps(),
        publishes: learner.publishes(),
        episodes_ingested: stats.added,
        duplicates: stats.duplicates,
        quarantined: stats.quarantined,
        trained_episode_ids,
        aborted,
    })
}

/// Median of a small sample; `None` entries (target never reached) sort last.
pub fn median(values: &[Option<f64>]) -> Option<f64> {
    let mut v: Vec<Option<f64>> = values.to_vec();
    v.sort_by(|a, b| match (a, b) {
        (Some(x), Some(y)) => x.total_cmp(y),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => std::cmp::Ordering::Equal,
    });
    if v.is_empty() {
        return None;
    }
    if v.len() % 2 == 1 {
        v[v.len() / 2]
    } else {
        match (v[v.len() / 2 - 1], v[v.len() / 2]) {
            (Some(a), Some(b)) => Some((a + b) / 2.0),
            _ => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trip() {
        let text = "seed=7\nM=3\nalpha=2.0\nW=100\nclip_lo=0.1\nclip_hi=0.9\nK=10\nlr=0.1\nbatch_size=16\n\
                    budget=50\nalgorithm=recap\nepsilon.task_1=0.25\ngamma=0.9\nbeta_rollout=0.5\nbeta_eval=3\n";
        let c = RunConfig::parse(text).unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.train.sampler.alpha, 2.0);
        assert_eq!(c.train.sampler.window, 100);
        assert_eq!(c.train.publish_interval, 10);
        assert_eq!(c.algorithm, AlgorithmKind::Recap);
        assert_eq!(c.recap.epsilons, vec![0.0, 0.25, 0.0]);
        assert_eq!(c.recap.beta_eval, 3.0);
        assert_eq!(c.budget, 50);
    }

    #[test]
    fn config_rejects_unknown_key_and_bad_values() {
        assert!(matches!(RunConfig::parse("nope=1"), Err(HarnessError::Config { line: 1, .. })));
        assert!(RunConfig::parse("clip_lo=0.9\nclip_hi=0.1").is_err());
        assert!(RunConfig::parse("algorithm=ppo").is_err());
        assert!(RunConfig::parse("# comment\n\nseed = 3 # trailing").is_ok());
    }

    #[test]
    fn fraction_parsing() {
        assert_eq!(parse_fraction("1/8").unwrap(), 0.125);
        assert_eq!(parse_fraction("1").unwrap(), 1.0);
        assert!(parse_fraction("0").is_err());
        assert!(parse_fraction("1.5").is_err());
    }

    #[test]
    fn corpus_prefixes_are_nested() {
        let fam = TaskFamily::default();
        let c = demo_corpus(&fam, 8, 1).unwrap();
        let small = corpus_prefix(&c, 0.25);
        let big = corpus_prefix(&c, 0.5);
        assert_eq!(small.len(), 6);
        assert_eq!(big.len(), 12);
        assert!(small.iter().all(|e| big.contains(e)));
        assert!(big.iter().all(|e| e.status == EpisodeStatus::Success && e.frames.iter().all(|f| f.expert_flag)));
    }

    #[test]
    fn median_handles_missing() {
        assert_eq!(median(&[Some(3.0), Some(1.0), Some(2.0)]), Some(2.0));
        assert_eq!(median(&[Some(3.0), None, Some(2.0)]), Some(3.0));
        assert_eq!(median(&[None, None, Some(2.0)]), None);
    }
}
