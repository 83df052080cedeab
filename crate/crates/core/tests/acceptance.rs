//! Acceptance gate. Runs every criterion, prints one PASS/FAIL line each and
//! exits nonzero if any fails.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use astro_float::{BigFloat, Consts, RoundingMode};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sop_core::actor::{ActorConfig, ActorUnit, RolloutMode};
use sop_core::algorithms::{
    fit_value, recap_sample_dist, recap_update, sharpen, AlgorithmKind, AlgorithmSpec,
    RecapSettings,
};
use sop_core::bus::{
    Broker, BrokerConfig, EpisodeNotification, ManualClock, MessageBus, SubscribeMode,
    EPISODES_TOPIC, LEARNER_GROUP,
};
use sop_core::envsim::{Action, Cell, DomainParam, EpisodeStatus, Observation, TaskFamily, NUM_ACTIONS};
use sop_core::harness::{
    base_policy, cmd_eval, cmd_pretrain, cmd_run, corpus_prefix, demo_corpus, median, RunConfig,
};
use sop_core::learner::{
    sample_batch, BufferSet, BufferedFrame, Learner, Origin, SampledItem, SamplerConfig,
    SamplerState, TrainConfig,
};
use sop_core::policy::{BlockId, Head, NllItem, PolicyParams};
use sop_core::store::{
    CrashPoint, EpisodeId, EpisodeRecord, Frame, FsStore, Source, StoreError,
};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn config(name: &str) -> RunConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name);
    RunConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn scratch(name: &str) -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().expect("tempdir");
    let p = dir.path().join(name);
    (dir, p)
}

fn frame(obs: Vec<f64>, action: Action) -> Frame {
    Frame {
        observation: Observation(obs),
        action,
        reward: 0.0,
        expert_flag: true,
        advantage_indicator: None,
    }
}

fn item(task: u32, origin: Origin, f: Frame) -> SampledItem {
    SampledItem {
        task,
        origin,
        frame: Arc::new(BufferedFrame {
            frame: f,
            episode_id: EpisodeId(0),
        }),
    }
}

fn mix_against_oracle() -> Verdict {
    const P: usize = 256;
    let rm = RoundingMode::ToEven;
    let mut cc = Consts::new().expect("constants");
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let triples: Vec<(f64, f64, f64)> = (0..1000)
        .map(|_| {
            (
                rng.random_range(0.0..6.0),
                rng.random_range(0.0..6.0),
                rng.random_range(0.5..4.0),
            )
        })
        .collect();
    let dummy = frame(vec![0.0; 16], Action::Stay);
    let pair = [
        item(0, Origin::Online, dummy.clone()),
        item(0, Origin::Offline, dummy),
    ];

    let started = Instant::now();
    let mixes: Vec<f64> = triples
        .iter()
        .map(|&(l_on, l_off, alpha)| {
            let mut s = SamplerState::new(
                1,
                SamplerConfig {
                    alpha,
                    window: 1,
                    ..SamplerConfig::default()
                },
            );
            s.record_losses(&pair, &[l_on, l_off]);
            s.compute_mix(0)
        })
        .collect();
    let elapsed = started.elapsed();

    let defaults = SamplerConfig::default();
    let lo = BigFloat::from_f64(defaults.clip_lo, P);
    let hi = BigFloat::from_f64(defaults.clip_hi, P);
    let tol = BigFloat::from_f64(1e-9, P);
    let mut failures = 0;
    for (&(l_on, l_off, alpha), &m) in triples.iter().zip(&mixes) {
        let a = BigFloat::from_f64(alpha, P).mul(&BigFloat::from_f64(l_on, P), P, rm);
        let e_on = a.exp(P, rm, &mut cc);
        let e_off = BigFloat::from_f64(l_off, P).exp(P, rm, &mut cc);
        let mut want = e_on.div(&e_on.add(&e_off, P, rm), P, rm);
        if want < lo {
            want = lo.clone();
        }
        if want > hi {
            want = hi.clone();
        }
        let err = BigFloat::from_f64(m, P).sub(&want, P, rm).abs();
        if err > tol {
            failures += 1;
        }
    }
    let pass = failures == 0 && elapsed < Duration::from_secs(1);
    verdict(
        pass,
        format!(
            "{} triples, {failures} beyond 1e-9, {:.1} ms",
            triples.len(),
            elapsed.as_secs_f64() * 1e3
        ),
    )
}

fn task_balance() -> Verdict {
    let started = Instant::now();
    let family = TaskFamily::default();
    let corpus = demo_corpus(&family, 8, 3).expect("corpus");
    let offline = corpus_prefix(&corpus, 1.0);
    let mut buffers = BufferSet::new(3, 10_000, &offline);
    let online = corpus[1][0].frames.clone();
    buffers.push_online(1, EpisodeId(99), online);
    let sampler = SamplerState::new(3, SamplerConfig::default());
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut counts = [0usize; 3];
    let total = 30_000;
    let mut drawn = 0;
    while drawn < total {
        let n = 64.min(total - drawn);
        for it in sample_batch(&buffers, &sampler, n, &mut rng).expect("batch") {
            counts[it.task as usize] += 1;
        }
        drawn += n;
    }
    let freqs: Vec<f64> = counts.iter().map(|&c| c as f64 / total as f64).collect();
    let pass = freqs.iter().all(|f| (f - 1.0 / 3.0).abs() <= 0.02) && started.elapsed() < Duration::from_secs(10);
    verdict(
        pass,
        format!(
            "frequencies {:.4} {:.4} {:.4} over {total} items",
            freqs[0], freqs[1], freqs[2]
        ),
    )
}

fn fleet_scaling() -> Verdict {
    let cfg = config("scaling.cfg");
    let fleet = [1u32, 2, 4];
    let seeds = [0u64, 1, 2];
    let mut slowest = Duration::ZERO;
    let results: Vec<Vec<Option<f64>>> = std::thread::scope(|s| {
        let handles: Vec<_> = seeds
            .iter()
            .map(|&seed| {
                let cfg = cfg.clone();
                s.spawn(move || {
                    let mut c = cfg.clone();
                    c.seed = seed;
                    let base = base_policy(&c).expect("base policy");
                    fleet
                        .iter()
                        .map(|&n| {
                            let mut c = c.clone();
                            c.actors = n;
                            let (_tmp, dir) = scratch("run");
                            let t0 = Instant::now();
                            let out = cmd_run(&c, &base, &dir).expect("run");
                            (out.metrics.time_to_target(c.target), t0.elapsed())
                        })
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| {
                h.join()
                    .expect("scaling worker")
                    .into_iter()
                    .map(|(t, wall)| {
                        slowest = slowest.max(wall);
                        t
                    })
                    .collect()
            })
            .collect()
    });
    let med: Vec<Option<f64>> = (0..fleet.len())
        .map(|i| median(&results.iter().map(|r| r[i]).collect::<Vec<_>>()))
        .collect();
    let fmt = |t: Option<f64>| t.map_or("never".to_string(), |t| format!("{t:.1}s"));
    let pass = match (med[0], med[1], med[2]) {
        (Some(t1), Some(t2), Some(t4)) => {
            let ratio_ok = if t4 > 0.0 { t1 / t4 >= 2.0 } else { t1 > 0.0 };
            t4 <= t2 && t2 <= t1 && ratio_ok
        }
        _ => false,
    } && slowest <= Duration::from_secs(600);
    let ratio = match (med[0], med[2]) {
        (Some(a), Some(b)) if b > 0.0 => format!("{:.2}", a / b),
        _ => "n/a".into(),
    };
    verdict(
        pass,
        format!(
            "median t(N=1,2,4) = {}, {}, {}; t1/t4 = {ratio}; slowest run {:.1}s",
            fmt(med[0]),
            fmt(med[1]),
            fmt(med[2]),
            slowest.as_secs_f64()
        ),
    )
}

/// Per seed: base and post-SOP success for fractions 1/8, 1/2, 1.
struct FractionStudy {
    base: Vec<[f64; 3]>,
    post: Vec<[f64; 3]>,
    elapsed: Duration,
}

const FRACTIONS: [f64; 3] = [0.125, 0.5, 1.0];

fn fraction_study() -> FractionStudy {
    let cfg = config("fraction.cfg");
    let started = Instant::now();
    let rows: Vec<([f64; 3], [f64; 3])> = std::thread::scope(|s| {
        let handles: Vec<_> = [0u64, 1, 2]
            .into_iter()
            .map(|seed| {
                let cfg = cfg.clone();
                s.spawn(move || {
                    let mut base = [0.0; 3];
                    let mut post = [0.0; 3];
                    for (i, &f) in FRACTIONS.iter().enumerate() {
                        let mut c = cfg.clone();
                        c.seed = seed;
                        c.fraction = f;
                        let params = cmd_pretrain(&c, f, seed).expect("pretrain");
                        base[i] = cmd_eval(&c, &params, c.eval_trials).expect("eval").success_rate;
                        let (_tmp, dir) = scratch("run");
                        let out = cmd_run(&c, &params, &dir).expect("run");
                        post[i] = out.metrics.final_success().expect("final point");
                    }
                    (base, post)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("fraction worker")).collect()
    });
    FractionStudy {
        base: rows.iter().map(|r| r.0).collect(),
        post: rows.iter().map(|r| r.1).collect(),
        elapsed: started.elapsed(),
    }
}

fn med_of(rows: &[[f64; 3]], i: usize) -> f64 {
    median(&rows.iter().map(|r| Some(r[i])).collect::<Vec<_>>()).expect("three seeds")
}

fn online_vs_offline(study: &FractionStudy) -> Verdict {
    // Fraction 1 is exactly twice the fraction-1/2 corpus under the same recipe.
    let gaps: Vec<Option<f64>> = study.post.iter().zip(&study.base).map(|(p, b)| Some(p[1] - b[2])).collect();
    let gap = median(&gaps).expect("three seeds");
    let pass = gap >= 0.10 && study.elapsed <= Duration::from_secs(900);
    verdict(
        pass,
        format!(
            "median SOP(1/2) {:.3} vs BC(doubled) {:.3}; median paired gap {gap:.3}; study {:.1}s",
            med_of(&study.post, 1),
            med_of(&study.base, 2),
            study.elapsed.as_secs_f64()
        ),
    )
}

fn fraction_monotone(study: &FractionStudy) -> Verdict {
    let b: Vec<f64> = (0..3).map(|i| med_of(&study.base, i)).collect();
    let p: Vec<f64> = (0..3).map(|i| med_of(&study.post, i)).collect();
    let pass = b[0] <= b[1] && b[1] <= b[2] && p[0] <= p[1] && p[1] <= p[2];
    verdict(
        pass,
        format!(
            "median base {:.3} {:.3} {:.3}; median post-SOP {:.3} {:.3} {:.3}",
            b[0], b[1], b[2], p[0], p[1], p[2]
        ),
    )
}

fn random_params(dim: usize, scale: f64, rng: &mut ChaCha8Rng) -> PolicyParams {
    let mut v = |n: usize| (0..n).map(|_| rng.random_range(-scale..scale)).collect::<Vec<f64>>();
    PolicyParams::from_blocks(
        0,
        NUM_ACTIONS,
        dim,
        v(NUM_ACTIONS * (dim + 1)),
        v(NUM_ACTIONS * dim),
        v(dim),
    )
    .expect("params")
}

/// 5x5 room with a short wall; the goal sits behind it.
fn toy_domain() -> DomainParam {
    let (w, h) = (5u32, 5u32);
    let mut obstacles = vec![false; 25];
    for x in 1..4 {
        obstacles[(2 * w + x) as usize] = true;
    }
    DomainParam::from_layout(0, 3, w, h, obstacles, Cell::new(2, 4)).expect("toy layout")
}

/// Expected discounted return from the uniform start distribution, computed
/// by backward induction over (cell, steps left).
fn exact_return(domain: &DomainParam, horizon: u32, gamma: f64, policy: &dyn Fn(&Observation) -> Vec<f64>) -> f64 {
    let cells: Vec<Cell> = domain.free_cells().collect();
    let idx = |c: Cell| cells.iter().position(|&x| x == c).expect("free cell");
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let probs: Vec<Vec<f64>> = cells
        .iter()
        .map(|&c| {
            let s = sop_core::envsim::EnvState {
                agent_cell: c,
                goal_cell: domain.goal_cell,
                step_count: 0,
                horizon,
            };
            policy(&domain.observe(&s, &mut rng))
        })
        .collect();
    let mut v = vec![0.0; cells.len()];
    for _ in 0..horizon {
        let next: Vec<f64> = cells
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                if c == domain.goal_cell {
                    return 0.0;
                }
                (0..NUM_ACTIONS)
                    .map(|a| {
                        let n = domain.apply_move(c, Action::from_index(a).expect("action"));
                        let r = if n == domain.goal_cell { 1.0 } else { 0.0 };
                        probs[i][a] * (r + gamma * v[idx(n)])
                    })
                    .sum()
            })
            .collect();
        v = next;
    }
    let starts: Vec<usize> = cells.iter().enumerate().filter(|(_, &c)| c != domain.goal_cell).map(|(i, _)| i).collect();
    starts.iter().map(|&i| v[i]).sum::<f64>() / starts.len() as f64
}

fn recap_checks() -> Verdict {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(21);

    let mut worst_a = 0.0f64;
    for _ in 0..200 {
        let p = random_params(16, 2.0, &mut rng);
        let obs = Observation((0..16).map(|_| rng.random_range(-1.0..1.0)).collect());
        let m = p.forward(&obs, Head::Marginal).expect("marginal");
        let r = recap_sample_dist(&p, &obs, 0.0).expect("recap");
        for (x, y) in m.probs.iter().zip(&r.probs) {
            worst_a = worst_a.max((x - y).abs());
        }
    }
    let a_ok = worst_a <= 1e-12;

    // Behavior: a quarter expert, the rest uniform. Indicators come from the
    // exact value gamma^d; eps slightly below zero absorbs rounding.
    let gamma: f64 = 0.99;
    let domain = toy_domain();
    let exact_v = |c: Cell| gamma.powi(domain.distance(c).expect("reachable") as i32);
    let mut data = Vec::new();
    for c in domain.free_cells().filter(|&c| c != domain.goal_cell) {
        let s = sop_core::envsim::EnvState {
            agent_cell: c,
            goal_cell: domain.goal_cell,
            step_count: 0,
            horizon: 80,
        };
        let obs = domain.observe(&s, &mut rng);
        for _ in 0..40 {
            let a = if rng.random::<f64>() < 0.25 {
                domain.expert_action_at(c)
            } else {
                Action::from_index(rng.random_range(0..NUM_ACTIONS)).expect("action")
            };
            let n = domain.apply_move(c, a);
            let (r, vn) = if n == domain.goal_cell { (1.0, 0.0) } else { (0.0, exact_v(n)) };
            let adv = r + gamma * vn - exact_v(c);
            let mut f = frame(obs.0.clone(), a);
            f.advantage_indicator = Some(adv > -1e-9);
            data.push(item(0, Origin::Offline, f));
        }
    }
    let mut params = PolicyParams::zeros(domain.feature_dim());
    for _ in 0..400 {
        for chunk in data.chunks(64) {
            params = recap_update(&params, chunk, 0.5).expect("recap update").params;
        }
    }
    let marginal = |o: &Observation| params.forward(o, Head::Marginal).expect("forward").probs;
    let sharpened = |o: &Observation| recap_sample_dist(&params, o, 1.0).expect("forward").probs;
    let ret_marginal = exact_return(&domain, 80, gamma, &marginal);
    let ret_recap = exact_return(&domain, 80, gamma, &sharpened);
    let b_ok = ret_recap >= ret_marginal;

    let got = sharpen(&[0.5, 0.5], &[0.9, 0.1], 2.0);
    let want = [0.98780, 0.01220];
    let c_err = got.iter().zip(want).map(|(g, w)| (g - w).abs()).fold(0.0, f64::max);
    let c_ok = c_err <= 1e-5;

    let elapsed = started.elapsed();
    verdict(
        a_ok && b_ok && c_ok && elapsed < Duration::from_secs(30),
        format!(
            "(a) max |diff| {worst_a:.1e}; (b) return beta=1 {ret_recap:.4} vs marginal {ret_marginal:.4}; (c) [{:.5}, {:.5}]; {:.1}s",
            got[0],
            got[1],
            elapsed.as_secs_f64()
        ),
    )
}

fn staleness() -> Verdict {
    let family = TaskFamily::default();
    let (_tmp, root) = scratch("store");
    let store = Arc::new(FsStore::open(&root).expect("store"));
    let broker = Broker::new(BrokerConfig::default());
    let corpus = demo_corpus(&family, 20, 4).expect("corpus");
    let offline = corpus_prefix(&corpus, 1.0);
    let base_cfg = RunConfig {
        demos_per_task: 20,
        ..RunConfig::default()
    };
    let base = cmd_pretrain(&base_cfg, 0.125, 4).expect("base");
    let spec = AlgorithmSpec {
        kind: AlgorithmKind::HgDagger,
        recap: RecapSettings::new(3),
    };
    let train = TrainConfig {
        publish_interval: 25,
        ..TrainConfig::default()
    };
    let mut learner = Learner::new(base, offline, 3, spec, train, store.clone(), 4).expect("learner");
    learner.seed_checkpoint().expect("seed checkpoint");
    let ingestor = learner.ingestor();
    let mut sub = broker
        .subscribe(EPISODES_TOPIC, SubscribeMode::ConsumerGroup(LEARNER_GROUP.into()))
        .expect("subscribe");
    let mut actors: Vec<ActorUnit> = (0..4u32)
        .map(|i| {
            let task = i % 3;
            let domain = family.sample_domain(task, 100 + i as u64).expect("domain");
            let mut ac = ActorConfig::new(i, task, 100 + i as u64, 4);
            ac.rollout_mode = RolloutMode::Sample;
            let mut a = ActorUnit::new(ac, domain, learner.params().clone()).with_version_ledger();
            a.connect(&broker);
            a
        })
        .collect();

    // Ten learner steps per environment step: a publish every 2.5 ticks.
    let steps_per_tick = 10;
    let mut ticks = 0u64;
    while actors.iter().map(|a| a.ledger().len()).sum::<usize>() < 1000 {
        ticks += 1;
        for a in actors.iter_mut() {
            a.tick(&broker, &store);
        }
        ingestor.drain(sub.as_mut()).expect("drain");
        for _ in 0..steps_per_tick {
            learner.train_step(&broker).expect("train step");
        }
    }
    let entries: Vec<_> = actors.iter().flat_map(|a| a.ledger().iter()).collect();
    let single = entries
        .iter()
        .filter(|e| e.versions_used.len() == 1 && e.versions_used.contains(&e.recorded_version))
        .count();
    let versions: BTreeSet<u64> = entries.iter().map(|e| e.recorded_version).collect();
    let sim_steps: u64 = actors.iter().map(|a| a.stats().sim_steps).sum();
    let mean_len_ticks = sim_steps as f64 / entries.len() as f64;
    let publish_period_ticks = 25.0 / steps_per_tick as f64;
    let adopted: u64 = actors.iter().map(|a| a.stats().adopted_updates).sum();
    let expected_publishes = learner.steps() / 25;
    let pass = single == entries.len()
        && entries.len() >= 1000
        && learner.publishes() == expected_publishes
        && mean_len_ticks > publish_period_ticks
        && versions.len() > 1
        && adopted > 0;
    verdict(
        pass,
        format!(
            "{single}/{} episodes single-version, {} distinct versions; publishes {} = floor({}/25) = {expected_publishes}; mean episode {mean_len_ticks:.1} ticks vs publish every {publish_period_ticks} ticks; {ticks} ticks",
            entries.len(),
            versions.len(),
            learner.publishes(),
            learner.steps()
        ),
    )
}

fn sample_record(seed: u64, task: u32) -> EpisodeRecord {
    let family = TaskFamily::default();
    let domain = family.sample_domain(task, seed).expect("domain");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rec = sop_core::actor::rollout_with(
        &mut sop_core::actor::ExpertController,
        &domain,
        family.horizon,
        None,
        &mut rng,
    );
    rec.task_id = task;
    rec.source = Source::Online;
    rec
}

fn durability() -> Verdict {
    let (_tmp, root) = scratch("store");
    let store = FsStore::open(&root).expect("store");

    // Crash points: 48 payload prefixes plus the two post-write stages.
    let mut exposed = 0;
    let mut crashes = 0;
    for i in 0..50u64 {
        let rec = sample_record(1000 + i, (i % 3) as u32);
        let len = rec.encode().len();
        let point = match i {
            48 => CrashPoint::BeforeSync,
            49 => CrashPoint::BeforeRename,
            _ => CrashPoint::AfterBytes(len * i as usize / 48),
        };
        store.faults().crash_next_put(point);
        if let Err(StoreError::InjectedCrash(_)) = store.put_episode(&rec) {
            crashes += 1;
        }
        let key = rec.storage_key();
        let listed = store.list("episodes/").expect("list").contains(&key);
        let visible = store.exists(&key) || listed || store.get_episode(&key).is_ok();
        let reopened = FsStore::open(&root).expect("reopen");
        if visible || reopened.exists(&key) {
            exposed += 1;
        }
        reopened.sweep_temp_files().expect("sweep");
        reopened.put_episode(&rec).expect("retry after crash");
        if reopened.get_episode(&key).ok().as_ref() != Some(&rec) {
            exposed += 1;
        }
    }
    let crash_ok = crashes == 50 && exposed == 0;

    // At-least-once delivery: unacked first attempts are redelivered and
    // every fifth notification is also published twice.
    let clock = Arc::new(ManualClock::default());
    let broker = Broker::with_clock(
        BrokerConfig {
            redelivery_timeout: Duration::from_secs(1),
            ..BrokerConfig::default()
        },
        clock.clone(),
    );
    let (_tmp2, root2) = scratch("store");
    let store2 = Arc::new(FsStore::open(&root2).expect("store"));
    let family = TaskFamily::default();
    let corpus = demo_corpus(&family, 4, 9).expect("corpus");
    let spec = AlgorithmSpec {
        kind: AlgorithmKind::HgDagger,
        recap: RecapSettings::new(3),
    };
    let learner = Learner::new(
        PolicyParams::zeros(family.feature_dim()),
        corpus_prefix(&corpus, 1.0),
        3,
        spec,
        TrainConfig::default(),
        store2.clone(),
        9,
    )
    .expect("learner");
    let ingestor = learner.ingestor();
    let mut sub = broker
        .subscribe(EPISODES_TOPIC, SubscribeMode::ConsumerGroup(LEARNER_GROUP.into()))
        .expect("subscribe");
    let unique = 200u64;
    for i in 0..unique {
        let rec = sample_record(5000 + i, (i % 3) as u32);
        let key = store2.put_episode(&rec).expect("put");
        let note = EpisodeNotification {
            episode_id: rec.episode_id,
            task_id: rec.task_id,
            storage_key: key,
        };
        broker.publish(EPISODES_TOPIC, "actor-0", &note.encode()).expect("publish");
        if i % 5 == 0 {
            broker.publish(EPISODES_TOPIC, "actor-0", &note.encode()).expect("republish");
        }
    }
    let mut deliveries = 0u64;
    for round in 0..3 {
        while let Some(d) = sub.try_recv().expect("recv") {
            deliveries += 1;
            let note = EpisodeNotification::decode(&d.envelope.payload).expect("decode");
            ingestor.ingest(&note, d.attempt);
            if round > 0 || d.envelope.seq % 2 == 0 {
                sub.ack(d.envelope.seq).expect("ack");
            }
        }
        clock.advance(Duration::from_secs(2));
    }
    let dup_frames = ingestor.with_buffers(|b| b.duplicate_online_frames());
    let stats = ingestor.stats();
    let dedupe_ok = dup_frames == 0
        && stats.added == unique
        && ingestor.index_len() as u64 == unique
        && deliveries > unique + unique / 5;

    verdict(
        crash_ok && dedupe_ok,
        format!(
            "{crashes} injected crashes, {exposed} partial exposures; {deliveries} deliveries of {unique} episodes, {} added, {} duplicates dropped, {dup_frames} duplicate frames",
            stats.added, stats.duplicates
        ),
    )
}

fn gradient_and_value() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let dim = 16;
    let h = 1e-5;
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let params = random_params(dim, 0.5, &mut rng);
        let obs: Vec<Observation> = (0..8)
            .map(|_| Observation((0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()))
            .collect();
        let heads = [Head::Marginal, Head::Conditioned(false), Head::Conditioned(true)];
        let batch: Vec<NllItem> = obs
            .iter()
            .enumerate()
            .map(|(i, o)| NllItem {
                obs: o,
                action: Action::from_index(rng.random_range(0..NUM_ACTIONS)).expect("action"),
                head: heads[i % 3],
            })
            .collect();
        let g = params.nll_grad(&batch).expect("grad").gradient;
        for (block, analytic) in [(BlockId::Action, &g.action), (BlockId::Marginal, &g.marginal)] {
            let w = params.block(block).to_vec();
            for j in 0..w.len() {
                let mut plus = w.clone();
                plus[j] += h;
                let mut minus = w.clone();
                minus[j] -= h;
                let lp = params.with_block(block, plus).expect("block").nll_grad(&batch).expect("loss").loss;
                let lm = params.with_block(block, minus).expect("block").nll_grad(&batch).expect("loss").loss;
                let fd = (lp - lm) / (2.0 * h);
                let rel = (analytic[j] - fd).abs() / analytic[j].abs().max(fd.abs()).max(1e-3);
                worst = worst.max(rel);
            }
        }
    }
    let grad_ok = worst < 1e-6;

    let gamma: f64 = 0.99;
    let family = TaskFamily::default();
    let mut episodes = Vec::new();
    let mut visited: Vec<(usize, usize, u32)> = Vec::new();
    for j in 0..60u64 {
        let task = (j % 3) as u32;
        let domain = family.sample_domain(task, 7000 + j).expect("domain");
        let mut erng = ChaCha8Rng::seed_from_u64(j);
        let mut state = domain.reset(family.horizon, &mut erng);
        let mut obs = domain.observe(&state, &mut erng);
        let mut frames = Vec::new();
        loop {
            let d = domain.distance(state.agent_cell).expect("reachable");
            visited.push((episodes.len(), frames.len(), d));
            let a = domain.expert_action(&state);
            let r = domain.step(&mut state, a, &mut erng);
            let mut f = frame(obs.0.clone(), a);
            f.reward = r.reward;
            frames.push(f);
            obs = r.next_observation;
            if r.status != EpisodeStatus::Running {
                break;
            }
        }
        episodes.push(EpisodeRecord {
            episode_id: EpisodeId(j as u128),
            task_id: task,
            domain_seed: 7000 + j,
            policy_version: 0,
            intervention_spans: vec![(0, frames.len() as u32)],
            sim_duration: frames.len() as u64,
            frames,
            status: EpisodeStatus::Success,
            source: Source::Offline,
        });
    }
    let w = fit_value(&episodes, gamma).expect("value fit");
    let mae = visited
        .iter()
        .map(|&(e, t, d)| {
            let x = episodes[e].frames[t].observation.features();
            let v: f64 = w.iter().zip(x).map(|(a, b)| a * b).sum();
            (v - gamma.powi(d as i32)).abs()
        })
        .sum::<f64>()
        / visited.len() as f64;
    let value_ok = mae < 0.05;
    verdict(
        grad_ok && value_ok,
        format!(
            "worst gradient relative error {worst:.2e} over 50 batches; value MAE {mae:.4} on {} expert states",
            visited.len()
        ),
    )
}

fn main() {
    let started = Instant::now();
    let study = fraction_study();
    let results = [
        ("1 compute_mix vs high-precision oracle", mix_against_oracle()),
        ("2 task balance", task_balance()),
        ("3 fleet scaling", fleet_scaling()),
        ("4 online vs offline gap", online_vs_offline(&study)),
        ("5 advantage conditioning", recap_checks()),
        ("6 one version per episode", staleness()),
        ("7 durability and dedupe", durability()),
        ("8 gradients and value fit", gradient_and_value()),
        ("9 demo-fraction monotonicity", fraction_monotone(&study)),
    ];
    let mut failed = 0;
    for (name, v) in &results {
        println!("{} {name}: {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
        if !v.pass {
            failed += 1;
        }
    }
    println!(
        "acceptance: {}/{} passed in {:.1}s",
        results.len() - failed,
        results.len(),
        started.elapsed().as_secs_f64()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
