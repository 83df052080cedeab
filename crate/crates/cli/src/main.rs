use std::fs;
use std::io;
use std::path::PathBuf;
use std::sync::atomic::AtomicBool;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use sop_core::actor::{run_actor, ActorConfig, ActorUnit, RunLimits};
use sop_core::algorithms::AlgorithmKind;
use sop_core::bus::{Broker, BrokerConfig, TcpBrokerServer, TcpBus};
use sop_core::harness::{
    base_policy, cmd_eval, cmd_pretrain, cmd_report, cmd_run, corpus_prefix, demo_corpus,
    deployed_domains, evaluate_expert, eval_seed, parse_fraction, write_report, RunConfig,
};
use sop_core::learner::Learner;
use sop_core::policy::PolicyParams;
use sop_core::store::{FsStore, LATEST_CHECKPOINT_KEY};

#[derive(Parser)]
#[command(name = "sop", about = "Closed-loop actor/learner post-training on gridworld tasks")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Behavior-clone a base policy on a prefix of the demo corpus.
    Pretrain {
        #[arg(long, value_parser = parse_fraction)]
        fraction: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Lockstep fleet run: N actors and one learner.
    Run {
        #[arg(long)]
        actors: Option<u32>,
        #[arg(long)]
        algo: Option<String>,
        #[arg(long)]
        budget_steps: Option<u64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory (metrics.csv, learner.csv, final.ckpt, store/).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Frozen-policy evaluation without interventions.
    Eval {
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Evaluate the scripted expert instead of a checkpoint.
        #[arg(long, conflicts_with = "ckpt")]
        expert: bool,
        #[arg(long, default_value_t = 50)]
        trials: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Summary CSV over metrics files; the first file is the speedup baseline.
    Report {
        #[arg(required = true)]
        files: Vec<PathBuf>,
        #[arg(long, default_value_t = 0.8)]
        target: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the deployed scenes of a task as text grids.
    Layout {
        #[arg(long)]
        task: u32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Serve an in-memory broker over TCP.
    Broker {
        #[arg(long, default_value = "127.0.0.1:7450")]
        listen: String,
    },
    /// Standalone actor process.
    Actor {
        #[arg(long)]
        actor_id: u32,
        #[arg(long)]
        task_id: u32,
        #[arg(long)]
        broker: String,
        #[arg(long)]
        store: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Stop after this many episodes.
        #[arg(long)]
        episodes: Option<u64>,
        /// Real-time pause per environment step, in milliseconds.
        #[arg(long)]
        step_ms: Option<u64>,
    },
    /// Standalone learner process.
    Learner {
        #[arg(long)]
        broker: String,
        #[arg(long)]
        store: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        budget_steps: Option<u64>,
    },
}

fn load_config(path: Option<&PathBuf>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p).with_context(|| format!("reading config {}", p.display())),
        None => Ok(RunConfig::default()),
    }
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match Cli::parse().cmd {
        Cmd::Pretrain { fraction, seed, config, out } => {
            let cfg = load_config(config.as_ref())?;
            let params = cmd_pretrain(&cfg, fraction, seed)?;
            let out = out.unwrap_or_else(|| PathBuf::from(format!("base-{fraction}-s{seed}.ckpt")));
            fs::write(&out, params.encode())?;
            println!("wrote {} (version {}, hash {:016x})", out.display(), params.version(), params.content_hash());
        }
        Cmd::Run { actors, algo, budget_steps, seed, config, out } => {
            let mut cfg = load_config(config.as_ref())?;
            if let Some(n) = actors {
                cfg.actors = n;
            }
            if let Some(a) = algo {
                cfg.algorithm = AlgorithmKind::parse(&a).with_context(|| format!("unknown algorithm {a}"))?;
            }
            if let Some(b) = budget_steps {
                cfg.budget = b;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            cfg.validate()?;
            let out = out.unwrap_or_else(|| {
                PathBuf::from(format!("runs/{}-n{}-s{}", cfg.algorithm.as_str(), cfg.actors, cfg.seed))
            });
            let base = base_policy(&cfg)?;
            let outcome = cmd_run(&cfg, &base, &out)?;
            for p in &outcome.metrics.points {
                println!(
                    "step {:>6}  sim {:>8.1}s  success {:.3}  episodes {:>6}  publishes {:>5}",
                    p.learner_step, p.sim_seconds, p.eval_success_rate, p.episodes_completed, p.publishes
                );
            }
            match outcome.metrics.time_to_target(cfg.target) {
                Some(t) => println!("time to {:.2}: {t:.1} simulated seconds", cfg.target),
                None => println!("target {:.2} not reached", cfg.target),
            }
            println!("outputs in {}", out.display());
            if let Some(why) = outcome.aborted {
                bail!("run aborted: {why}");
            }
        }
        Cmd::Eval { ckpt, expert, trials, seed, config } => {
            let mut cfg = load_config(config.as_ref())?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let r = if expert {
                let domains = deployed_domains(&cfg)?;
                evaluate_expert(&domains, trials, cfg.family.horizon, cfg.steps_per_second, eval_seed(cfg.seed))
            } else {
                let Some(path) = ckpt else { bail!("pass --ckpt PATH or --expert") };
                let params = PolicyParams::decode(&fs::read(&path)?)?;
                cmd_eval(&cfg, &params, trials)?
            };
            println!("success_rate={:.4}", r.success_rate);
            println!("throughput_eph={:.1}", r.throughput);
            println!("trials={} successes={} env_steps={}", r.trials, r.successes, r.env_steps);
        }
        Cmd::Report { files, target, out } => {
            let rows = cmd_report(&files, target)?;
            match out {
                Some(p) => write_report(&rows, fs::File::create(p)?)?,
                None => write_report(&rows, io::stdout().lock())?,
            }
        }
        Cmd::Layout { task, seed, config } => {
            let mut cfg = load_config(config.as_ref())?;
            cfg.seed = seed;
            for (i, (domain_seed, d)) in cfg.deploy_scenes(task)?.into_iter().enumerate() {
                println!("scene {i} domain_seed={domain_seed:016x} slip={:.4} obs_noise={:.4}", d.slip_prob, d.obs_noise_std);
                print!("{}", d.render(None));
            }
        }
        Cmd::Broker { listen } => {
            let server = TcpBrokerServer::bind(&listen, Broker::new(BrokerConfig::default()))?;
            println!("broker listening on {}", server.local_addr());
            loop {
                std::thread::park();
            }
        }
        Cmd::Actor { actor_id, task_id, broker, store, seed, config, episodes, step_ms } => {
            let mut cfg = load_config(config.as_ref())?;
            cfg.seed = seed;
            let bus = TcpBus::new(broker.as_str())?;
            let store = FsStore::open(&store)?;
            let initial = store
                .get_checkpoint(LATEST_CHECKPOINT_KEY)
                .context("no checkpoint in store; start the learner first")?;
            let scenes = cfg.deploy_scenes(task_id)?;
            let (domain_seed, domain) = scenes[0].clone();
            let mut ac = ActorConfig::new(actor_id, task_id, domain_seed, seed);
            ac.horizon = cfg.family.horizon;
            ac.gate_window = cfg.gate_window;
            ac.rollout_mode = cfg.rollout_mode();
            ac.validate().map_err(anyhow::Error::msg)?;
            let limits = RunLimits {
                max_episodes: episodes,
                step_interval: step_ms.map(Duration::from_millis),
            };
            let stop = AtomicBool::new(false);
            let unit = ActorUnit::new(ac, domain, initial).with_scenes(scenes);
            let unit = run_actor(unit, &bus, &store, limits, &stop);
            let s = unit.stats();
            println!(
                "actor {actor_id}: {} episodes ({} successes), {} uploaded, final version {}",
                s.episodes_completed,
                s.successes,
                s.episodes_notified,
                unit.active_params().version()
            );
        }
        Cmd::Learner { broker, store, seed, config, budget_steps } => {
            let mut cfg = load_config(config.as_ref())?;
            cfg.seed = seed;
            if let Some(b) = budget_steps {
                cfg.budget = b;
            }
            let base = base_policy(&cfg)?;
            let corpus = demo_corpus(&cfg.family, cfg.demos_per_task, cfg.seed)?;
            let store = Arc::new(FsStore::open(&store)?);
            let bus: Arc<dyn sop_core::bus::MessageBus> = Arc::new(TcpBus::new(broker.as_str())?);
            let mut learner = Learner::new(
                base,
                corpus_prefix(&corpus, cfg.fraction),
                cfg.family.num_tasks,
                cfg.algorithm_spec(),
                cfg.train.clone(),
                store,
                seed,
            )?;
            learner.seed_checkpoint()?;
            let stop = AtomicBool::new(false);
            learner.train_loop(bus, cfg.budget, &stop, |r| {
                if r.published {
                    log::info!("step {} published v{}", r.step, r.version);
                }
            })?;
            println!("learner: {} steps, {} publishes", learner.steps(), learner.publishes());
        }
    }
    Ok(())
}
