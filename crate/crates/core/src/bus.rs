//! At-least-once publish/subscribe fabric.
//!
//! The in-process [`Broker`] keeps one append-only log per topic. Consumer
//! groups share a cursor, so each envelope goes to one member at a time;
//! fanout subscribers get private cursors. Unacked deliveries are handed out
//! again once the redelivery timeout passes. [`TcpBrokerServer`] and
//! [`TcpBus`] expose the same broker to other processes using
//! length-prefixed frames.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::io::{self, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::policy::{CheckpointDelta, PolicyError, PolicyParams, CHECKPOINT_MAGIC, DELTA_MAGIC};
use crate::store::EpisodeId;

pub const EPISODES_TOPIC: &str = "episodes";
pub const PARAMS_TOPIC: &str = "params";
pub const LEARNER_GROUP: &str = "learner";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BusError {
    #[error("payload of {size} bytes exceeds limit of {limit}")]
    PayloadTooLarge { size: usize, limit: usize },
    #[error("bus unavailable")]
    Unavailable,
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("io error: {0}")]
    Io(String),
}

impl From<io::Error> for BusError {
    fn from(e: io::Error) -> Self {
        BusError::Io(e.to_string())
    }
}

/// Time source for redelivery deadlines.
pub trait Clock: Send + Sync + fmt::Debug {
    fn now(&self) -> Duration;
}

#[derive(Debug)]
pub struct SystemClock {
    origin: Instant,
}

impl Default for SystemClock {
    fn default() -> Self {
        SystemClock {
            origin: Instant::now(),
        }
    }
}

impl Clock for SystemClock {
    fn now(&self) -> Duration {
        self.origin.elapsed()
    }
}

/// Clock advanced explicitly by tests.
#[derive(Debug, Default)]
pub struct ManualClock {
    nanos: AtomicU64,
}

impl ManualClock {
    pub fn advance(&self, d: Duration) {
        self.nanos.fetch_add(d.as_nanos() as u64, Ordering::SeqCst);
    }
}

impl Clock for ManualClock {
    fn now(&self) -> Duration {
        Duration::from_nanos(self.nanos.load(Ordering::SeqCst))
    }
}

#[derive(Debug, Clone)]
pub struct BrokerConfig {
    pub max_payload: usize,
    pub redelivery_timeout: Duration,
    pub retain_latest_topics: Vec<String>,
}

impl Default for BrokerConfig {
    fn default() -> Self {
        BrokerConfig {
            max_payload: 16 << 20,
            redelivery_timeout: Duration::from_secs(2),
            retain_latest_topics: vec![PARAMS_TOPIC.to_string()],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Envelope {
    /// Per-topic sequence number, starting at 1.
    pub seq: u64,
    pub topic: Arc<str>,
    pub payload: Arc<[u8]>,
    pub producer_id: Arc<str>,
    /// Gapless per (topic, producer), starting at 1.
    pub producer_seq: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Delivery {
    pub envelope: Envelope,
    /// 1 on first delivery; higher values are redeliveries.
    pub attempt: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum SubscribeMode {
    ConsumerGroup(String),
    Fanout,
}

pub trait MessageBus: Send + Sync {
    fn publish(&self, topic: &str, producer_id: &str, payload: &[u8]) -> Result<u64, BusError>;
    fn subscribe(
        &self,
        topic: &str,
        mode: SubscribeMode,
    ) -> Result<Box<dyn Subscription>, BusError>;
}

pub trait Subscription: Send {
    /// Waits up to `timeout` for the next delivery.
    fn recv(&mut self, timeout: Duration) -> Result<Option<Delivery>, BusError>;

    fn try_recv(&mut self) -> Result<Option<Delivery>, BusError> {
        self.recv(Duration::ZERO)
    }

    /// Returns false (and logs) for an unknown or already-acked seq.
    fn ack(&mut self, seq: u64) -> Result<bool, BusError>;
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
enum CursorKey {
    Group(String),
    Fanout(u64),
}

#[derive(Debug)]
struct Pending {
    deadline: Duration,
    attempts: u32,
}

#[derive(Debug)]
struct Cursor {
    next: usize,
    /// Retained envelope owed to a late-joining fanout subscriber.
    initial: Option<usize>,
    pending: BTreeMap<u64, Pending>,
    acked: HashSet<u64>,
}

#[derive(Debug, Default)]
struct TopicState {
    log: Vec<Envelope>,
    producer_seqs: HashMap<String, u64>,
    cursors: HashMap<CursorKey, Cursor>,
}

#[derive(Debug, Default)]
struct BrokerState {
    topics: HashMap<String, TopicState>,
    next_subscriber: u64,
    available: bool,
    deliveries: u64,
}

#[derive(Debug)]
struct BrokerInner {
    state: Mutex<BrokerState>,
    cond: Condvar,
    config: BrokerConfig,
    clock: Arc<dyn Clock>,
}

/// In-process broker; cheap to clone.
#[derive(Debug, Clone)]
pub struct Broker {
    inner: Arc<BrokerInner>,
}

impl Default for Broker {
    fn default() -> Self {
        Self::new(BrokerConfig::default())
    }
}

impl Broker {
    pub fn new(config: BrokerConfig) -> Self {
        Self::with_clock(config, Arc::new(SystemClock::default()))
    }

    pub fn with_clock(config: BrokerConfig, clock: Arc<dyn Clock>) -> Self {
        Broker {
            inner: Arc::new(BrokerInner {
                state: Mutex::new(BrokerState {
                    available: true,
                    ..Default::default()
                }),
                cond: Condvar::new(),
                config,
                clock,
            }),
        }
    }

    pub fn config(&self) -> &BrokerConfig {
        &self.inner.config
    }

    fn lock(&self) -> MutexGuard<'_, BrokerState> {
        self.inner.state.lock().expect("broker lock poisoned")
    }

    /// Simulates an outage: every operation fails with `Unavailable`.
    pub fn set_available(&self, available: bool) {
        self.lock().available = available;
        self.inner.cond.notify_all();
    }

    /// Number of envelopes published on `topic` so far.
    pub fn published(&self, topic: &str) -> u64 {
        self.lock()
            .topics
            .get(topic)
            .map_or(0, |t| t.log.len() as u64)
    }

    /// Total deliveries handed out, including redeliveries.
    pub fn total_deliveries(&self) -> u64 {
        self.lock().deliveries
    }

    fn retains(&self, topic: &str) -> bool {
        self.inner
            .config
            .retain_latest_topics
            .iter()
            .any(|t| t == topic)
    }

    pub fn publish(&self, topic: &str, producer_id: &str, payload: &[u8]) -> Result<u64, BusError> {
        let limit = self.inner.config.max_payload;
        if payload.len() > limit {
            return Err(BusError::PayloadTooLarge {
                size: payload.len(),
                limit,
            });
        }
        let mut st = self.lock();
        if !st.available {
            return Err(BusError::Unavailable);
        }
        let t = st.topics.entry(topic.to_string()).or_default();
        let seq = t.log.len() as u64 + 1;
        let pseq = t.producer_seqs.entry(producer_id.to_string()).or_insert(0);
        *pseq += 1;
        let producer_seq = *pseq;
        t.log.push(Envelope {
            seq,
            topic: topic.into(),
            payload: payload.into(),
            producer_id: producer_id.into(),
            producer_seq,
        });
        drop(st);
        self.inner.cond.notify_all();
        Ok(seq)
    }

    pub fn subscribe_local(
        &self,
        topic: &str,
        mode: SubscribeMode,
    ) -> Result<LocalSubscription, BusError> {
        let retains = self.retains(topic);
        let mut st = self.lock();
        if !st.available {
            return Err(BusError::Unavailable);
        }
        st.next_subscriber += 1;
        let sub_id = st.next_subscriber;
        let t = st.topics.entry(topic.to_string()).or_default();
        let key = match &mode {
            SubscribeMode::ConsumerGroup(g) => CursorKey::Group(g.clone()),
            SubscribeMode::Fanout => CursorKey::Fanout(sub_id),
        };
        let log_len = t.log.len();
        t.cursors.entry(key.clone()).or_insert_with(|| match mode {
            // Groups start at the beginning of the topic: the queue holds
            // messages until some member consumes them.
            SubscribeMode::ConsumerGroup(_) => Cursor {
                next: 0,
                initial: None,
                pending: BTreeMap::new(),
                acked: HashSet::new(),
            },
            SubscribeMode::Fanout => Cursor {
                next: log_len,
                initial: (retains && log_len > 0).then(|| log_len - 1),
                pending: BTreeMap::new(),
                acked: HashSet::new(),
            },
        });
        Ok(LocalSubscription {
            broker: self.clone(),
            topic: topic.to_string(),
            key,
        })
    }

    fn try_deliver(
        &self,
        st: &mut BrokerState,
        topic: &str,
        key: &CursorKey,
    ) -> Result<Option<Delivery>, BusError> {
        if !st.available {
            return Err(BusError::Unavailable);
        }
        let now = self.inner.clock.now();
        let timeout = self.inner.config.redelivery_timeout;
        let Some(t) = st.topics.get_mut(topic) else {
            return Ok(None);
        };
        let Some(c) = t.cursors.get_mut(key) else {
            return Ok(None);
        };
        let expired = c
            .pending
            .iter()
            .find(|(_, p)| p.deadline <= now)
            .map(|(&s, _)| s);
        let delivery = if let Some(seq) = expired {
            let p = c.pending.get_mut(&seq).expect("pending entry");
            p.attempts += 1;
            p.deadline = now + timeout;
            Some(Delivery {
                envelope: t.log[(seq - 1) as usize].clone(),
                attempt: p.attempts,
            })
        } else if let Some(i) = c.initial.take() {
            let env = t.log[i].clone();
            c.pending.insert(
                env.seq,
                Pending {
                    deadline: now + timeout,
                    attempts: 1,
                },
            );
            Some(Delivery {
                envelope: env,
                attempt: 1,
            })
        } else if c.next < t.log.len() {
            let env = t.log[c.next].clone();
            c.next += 1;
            c.pending.insert(
                env.seq,
                Pending {
                    deadline: now + timeout,
                    attempts: 1,
                },
            );
            Some(Delivery {
                envelope: env,
                attempt: 1,
            })
        } else {
            None
        };
        if delivery.is_some() {
            st.deliveries += 1;
        }
        Ok(delivery)
    }

    fn recv_on(
        &self,
        topic: &str,
        key: &CursorKey,
        timeout: Duration,
    ) -> Result<Option<Delivery>, BusError> {
        let start = Instant::now();
        let mut st = self.lock();
        loop {
            if let Some(d) = self.try_deliver(&mut st, topic, key)? {
                return Ok(Some(d));
            }
            let elapsed = start.elapsed();
            if elapsed >= timeout {
                return Ok(None);
            }
            // Poll granularity bounds how late a redelivery deadline is noticed.
            let wait = (timeout - elapsed).min(Duration::from_millis(20));
            st = self
                .inner
                .cond
                .wait_timeout(st, wait)
                .expect("broker lock poisoned")
                .0;
        }
    }

    fn ack_on(&self, topic: &str, key: &CursorKey, seq: u64) -> Result<bool, BusError> {
        let mut st = self.lock();
        if !st.available {
            return Err(BusError::Unavailable);
        }
        let known = st
            .topics
            .get_mut(topic)
            .and_then(|t| t.cursors.get_mut(key))
            .is_some_and(|c| {
                if c.pending.remove(&seq).is_some() {
                    c.acked.insert(seq);
                    true
                } else {
                    false
                }
            });
        if !known {
            log::warn!("ignoring ack of unknown or settled seq {seq} on topic {topic}");
        }
        Ok(known)
    }

    fn leave(&self, topic: &str, key: &CursorKey) {
        if let CursorKey::Fanout(_) = key {
            if let Ok(mut st) = self.inner.state.lock() {
                if let Some(t) = st.topics.get_mut(topic) {
                    t.cursors.remove(key);
                }
            }
        }
    }
}

impl MessageBus for Broker {
    fn publish(&self, topic: &str, producer_id: &str, payload: &[u8]) -> Result<u64, BusError> {
        Broker::publish(self, topic, producer_id, payload)
    }

    fn subscribe(
        &self,
        topic: &str,
        mode: SubscribeMode,
    ) -> Result<Box<dyn Subscription>, BusError> {
        Ok(Box::new(self.subscribe_local(topic, mode)?))
    }
}

/// Handle of one member. Dropping a group member without acking leaves its
/// in-flight envelopes to be redelivered to the remaining members.
#[derive(Debug)]
pub struct LocalSubscription {
    broker: Broker,
    topic: String,
    key: CursorKey,
}

impl Subscription for LocalSubscription {
    fn recv(&mut self, timeout: Duration) -> Result<Option<Delivery>, BusError> {
        self.broker.recv_on(&self.topic, &self.key, timeout)
    }

    fn ack(&mut self, seq: u64) -> Result<bool, BusError> {
        self.broker.ack_on(&self.topic, &self.key, seq)
    }
}

impl Drop for LocalSubscription {
    fn drop(&mut self) {
        self.broker.leave(&self.topic, &self.key);
    }
}

/// Learner-bound notification that an episode is durable in the store.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EpisodeNotification {
    pub episode_id: EpisodeId,
    pub task_id: u32,
    pub storage_key: String,
}

impl EpisodeNotification {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(24 + self.storage_key.len());
        out.extend_from_slice(&self.episode_id.0.to_le_bytes());
        out.extend_from_slice(&self.task_id.to_le_bytes());
        out.extend_from_slice(&(self.storage_key.len() as u32).to_le_bytes());
        out.extend_from_slice(self.storage_key.as_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, BusError> {
        let bad = || BusError::Protocol("malformed episode notification".into());
        if bytes.len() < 24 {
            return Err(bad());
        }
        let episode_id = EpisodeId(u128::from_le_bytes(
            bytes[..16].try_into().expect("16 bytes"),
        ));
        let task_id = u32::from_le_bytes(bytes[16..20].try_into().expect("4 bytes"));
        let len = u32::from_le_bytes(bytes[20..24].try_into().expect("4 bytes")) as usize;
        if bytes.len() != 24 + len {
            return Err(bad());
        }
        let storage_key = String::from_utf8(bytes[24..].to_vec()).map_err(|_| bad())?;
        Ok(EpisodeNotification {
            episode_id,
            task_id,
            storage_key,
        })
    }
}

/// Payload on the params topic: a delta or a full checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub enum ParamsMessage {
    Delta(CheckpointDelta),
    Full(PolicyParams),
}

impl ParamsMessage {
    pub fn encode(&self) -> Vec<u8> {
        match self {
            ParamsMessage::Delta(d) => d.encode(),
            ParamsMessage::Full(p) => p.encode(),
        }
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, PolicyError> {
        if bytes.starts_with(DELTA_MAGIC) {
            CheckpointDelta::decode(bytes).map(ParamsMessage::Delta)
        } else if bytes.starts_with(CHECKPOINT_MAGIC) {
            PolicyParams::decode(bytes).map(ParamsMessage::Full)
        } else {
            Err(PolicyError::Codec("unknown params message".into()))
        }
    }

    pub fn new_version(&self) -> u64 {
        match self {
            ParamsMessage::Delta(d) => d.new_version,
            ParamsMessage::Full(p) => p.version(),
        }
    }
}

// ---------------------------------------------------------------------------
// TCP transport
// ---------------------------------------------------------------------------

const MSG_PUBLISH: u8 = 0x01;
const MSG_SUBSCRIBE: u8 = 0x02;
const MSG_RECV: u8 = 0x03;
const MSG_ACK: u8 = 0x04;
const MSG_PUBLISHED: u8 = 0x81;
const MSG_SUBSCRIBED: u8 = 0x82;
const MSG_DELIVERY: u8 = 0x83;
const MSG_EMPTY: u8 = 0x84;
const MSG_ACKED: u8 = 0x85;
const MSG_ERROR: u8 = 0xFF;

const ERR_UNAVAILABLE: u8 = 0;
const ERR_TOO_LARGE: u8 = 1;
const ERR_PROTOCOL: u8 = 2;

/// Upper bound on a single wire frame.
pub const MAX_FRAME: usize = 64 << 20;

/// Writes one frame: type byte, 4-byte little-endian length, payload.
pub fn write_frame(w: &mut impl Write, kind: u8, payload: &[u8]) -> io::Result<()> {
    let mut buf = Vec::with_capacity(5 + payload.len());
    buf.push(kind);
    buf.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    buf.extend_from_slice(payload);
    w.write_all(&buf)?;
    w.flush()
}

pub fn read_frame(r: &mut impl Read) -> io::Result<(u8, Vec<u8>)> {
    let mut head = [0u8; 5];
    r.read_exact(&mut head)?;
    let len = u32::from_le_bytes(head[1..5].try_into().expect("4 bytes")) as usize;
    if len > MAX_FRAME {
        return Err(io::Error::new(
            io::ErrorKind::InvalidData,
            format!("frame of {len} bytes exceeds limit"),
        ));
    }
    let mut payload = vec![0u8; len];
    r.read_exact(&mut payload)?;
    Ok((head[0], payload))
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u16).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct WireReader<'a> {
    b: &'a [u8],
    pos: usize,
}

impl<'a> WireReader<'a> {
    fn new(b: &'a [u8]) -> Self {
        WireReader { b, pos: 0 }
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8], BusError> {
        if self.b.len() - self.pos < n {
            return Err(BusError::Protocol("truncated frame".into()));
        }
        let s = &self.b[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, BusError> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32, BusError> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }
    fn u64(&mut self) -> Result<u64, BusError> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
    fn string(&mut self) -> Result<String, BusError> {
        let n = u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")) as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| BusError::Protocol("invalid utf-8".into()))
    }
    fn rest(&mut self) -> &'a [u8] {
        let s = &self.b[self.pos..];
        self.pos = self.b.len();
        s
    }
}

fn encode_error(e: &BusError) -> Vec<u8> {
    let (code, msg) = match e {
        BusError::Unavailable => (ERR_UNAVAILABLE, String::new()),
        BusError::PayloadTooLarge { size, limit } => (ERR_TOO_LARGE, format!("{size}:{limit}")),
        other => (ERR_PROTOCOL, other.to_string()),
    };
    let mut out = vec![code];
    out.extend_from_slice(msg.as_bytes());
    out
}

fn decode_error(payload: &[u8]) -> BusError {
    let msg = String::from_utf8_lossy(payload.get(1..).unwrap_or_default()).to_string();
    match payload.first() {
        Some(&ERR_UNAVAILABLE) => BusError::Unavailable,
        Some(&ERR_TOO_LARGE) => {
            let mut it = msg.split(':').map(|v| v.parse().unwrap_or(0));
            BusError::PayloadTooLarge {
                size: it.next().unwrap_or(0),
                limit: it.next().unwrap_or(0),
            }
        }
        _ => BusError::Protocol(msg),
    }
}

fn encode_delivery(d: &Delivery) -> Vec<u8> {
    let e = &d.envelope;
    let mut out = Vec::with_capacity(32 + e.payload.len());
    out.extend_from_slice(&e.seq.to_le_bytes());
    out.extend_from_slice(&e.producer_seq.to_le_bytes());
    out.extend_from_slice(&d.attempt.to_le_bytes());
    put_str(&mut out, &e.producer_id);
    put_str(&mut out, &e.topic);
    out.extend_from_slice(&e.payload);
    out
}

fn decode_delivery(b: &[u8]) -> Result<Delivery, BusError> {
    let mut r = WireReader::new(b);
    let seq = r.u64()?;
    let producer_seq = r.u64()?;
    let attempt = r.u32()?;
    let producer_id = r.string()?;
    let topic = r.string()?;
    let payload = r.rest();
    Ok(Delivery {
        envelope: Envelope {
            seq,
            topic: topic.into(),
            payload: payload.into(),
            producer_id: producer_id.into(),
            producer_seq,
        },
        attempt,
    })
}

/// Serves a [`Broker`] over TCP; one thread per connection.
pub struct TcpBrokerServer {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    connections: Arc<Mutex<Vec<TcpStream>>>,
    accept_thread: Option<JoinHandle<()>>,
}

impl TcpBrokerServer {
    pub fn bind(addr: impl ToSocketAddrs, broker: Broker) -> io::Result<Self> {
        let listener = TcpListener::bind(addr)?;
        listener.set_nonblocking(true)?;
        let addr = listener.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let connections = Arc::new(Mutex::new(Vec::new()));
        let stop_flag = stop.clone();
        let conns = connections.clone();
        let accept_thread = thread::spawn(move || {
            while !stop_flag.load(Ordering::SeqCst) {
                match listener.accept() {
                    Ok((stream, _)) => {
                        if let Ok(c) = stream.try_clone() {
                            conns.lock().expect("connection list").push(c);
                        }
                        let broker = broker.clone();
                        thread::spawn(move || {
                            if let Err(e) = serve_connection(stream, broker) {
                                log::debug!("bus connection closed: {e}");
                            }
                        });
                    }
                    Err(e) if e.kind() == io::ErrorKind::WouldBlock => {
                        thread::sleep(Duration::from_millis(5))
                    }
                    Err(e) => {
                        log::warn!("bus accept failed: {e}");
                        thread::sleep(Duration::from_millis(50));
                    }
                }
            }
        });
        Ok(TcpBrokerServer {
            addr,
            stop,
            connections,
            accept_thread: Some(accept_thread),
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn shutdown(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(t) = self.accept_thread.take() {
            let _ = t.join();
        }
        for c in self.connections.lock().expect("connection list").drain(..) {
            let _ = c.shutdown(std::net::Shutdown::Both);
        }
    }
}

impl Drop for TcpBrokerServer {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn serve_connection(stream: TcpStream, broker: Broker) -> io::Result<()> {
    stream.set_nonblocking(false)?;
    stream.set_nodelay(true)?;
    let mut reader = stream.try_clone()?;
    let mut writer = stream;
    let mut subscription: Option<LocalSubscription> = None;
    loop {
        let (kind, payload) = read_frame(&mut reader)?;
        let reply: Result<(u8, Vec<u8>), BusError> = (|| {
            let mut r = WireReader::new(&payload);
            match kind {
                MSG_PUBLISH => {
                    let topic = r.string()?;
                    let producer = r.string()?;
                    let seq = broker.publish(&topic, &producer, r.rest())?;
                    Ok((MSG_PUBLISHED, seq.to_le_bytes().to_vec()))
                }
                MSG_SUBSCRIBE => {
                    let topic = r.string()?;
                    let mode = match r.u8()? {
                        0 => SubscribeMode::ConsumerGroup(r.string()?),
                        1 => SubscribeMode::Fanout,
                        m => return Err(BusError::Protocol(format!("unknown mode {m}"))),
                    };
                    subscription = Some(broker.subscribe_local(&topic, mode)?);
                    Ok((MSG_SUBSCRIBED, Vec::new()))
                }
                MSG_RECV => {
                    let timeout = Duration::from_millis(r.u32()? as u64);
                    let sub = subscription
                        .as_mut()
                        .ok_or_else(|| BusError::Protocol("recv before subscribe".into()))?;
                    match sub.recv(timeout)? {
                        Some(d) => Ok((MSG_DELIVERY, encode_delivery(&d))),
                        None => Ok((MSG_EMPTY, Vec::new())),
                    }
                }
                MSG_ACK => {
                    let seq = r.u64()?;
                    let sub = subscription
                        .as_mut()
                        .ok_or_else(|| BusError::Protocol("ack before subscribe".into()))?;
                    Ok((MSG_ACKED, vec![u8::from(sub.ack(seq)?)]))
                }
                other => Err(BusError::Protocol(format!("unknown frame type {other:#x}"))),
            }
        })();
        match reply {
            Ok((k, p)) => write_frame(&mut writer, k, &p)?,
            Err(e) => write_frame(&mut writer, MSG_ERROR, &encode_error(&e))?,
        }
    }
}

/// Client side of the TCP transport.
#[derive(Debug)]
pub struct TcpBus {
    addr: SocketAddr,
    conn: Mutex<Option<TcpStream>>,
}

fn connect(addr: SocketAddr) -> Result<TcpStream, BusError> {
    let s = TcpStream::connect_timeout(&addr, Duration::from_secs(2))
        .map_err(|_| BusError::Unavailable)?;
    s.set_nodelay(true)?;
    Ok(s)
}

fn request(stream: &mut TcpStream, kind: u8, payload: &[u8]) -> Result<(u8, Vec<u8>), BusError> {
    write_frame(stream, kind, payload)?;
    let (k, p) = read_frame(stream)?;
    if k == MSG_ERROR {
        return Err(decode_error(&p));
    }
    Ok((k, p))
}

impl TcpBus {
    pub fn new(addr: impl ToSocketAddrs) -> Result<Self, BusError> {
        let addr = addr
            .to_socket_addrs()?
            .next()
            .ok_or_else(|| BusError::Io("address resolved to nothing".into()))?;
        Ok(TcpBus {
            addr,
            conn: Mutex::new(None),
        })
    }
}

impl MessageBus for TcpBus {
    fn publish(&self, topic: &str, producer_id: &str, payload: &[u8]) -> Result<u64, BusError> {
        let mut msg = Vec::with_capacity(payload.len() + topic.len() + producer_id.len() + 4);
        put_str(&mut msg, topic);
        put_str(&mut msg, producer_id);
        msg.extend_from_slice(payload);
        let mut guard = self.conn.lock().expect("tcp bus lock");
        if guard.is_none() {
            *guard = Some(connect(self.addr)?);
        }
        let stream = guard.as_mut().expect("connected");
        match request(stream, MSG_PUBLISH, &msg) {
            Ok((MSG_PUBLISHED, p)) if p.len() == 8 => {
                Ok(u64::from_le_bytes(p.try_into().expect("8 bytes")))
            }
            Ok((k, _)) => Err(BusError::Protocol(format!("unexpected reply {k:#x}"))),
            Err(e @ BusError::Io(_)) => {
                *guard = None;
                Err(e)
            }
            Err(e) => Err(e),
        }
    }

    fn subscribe(
        &self,
        topic: &str,
        mode: SubscribeMode,
    ) -> Result<Box<dyn Subscription>, BusError> {
        let mut stream = connect(self.addr)?;
        let mut msg = Vec::new();
        put_str(&mut msg, topic);
        match &mode {
            SubscribeMode::ConsumerGroup(g) => {
                msg.push(0);
                put_str(&mut msg, g);
            }
            SubscribeMode::Fanout => msg.push(1),
        }
        match request(&mut stream, MSG_SUBSCRIBE, &msg)? {
            (MSG_SUBSCRIBED, _) => Ok(Box::new(TcpSubscription { stream })),
            (k, _) => Err(BusError::Protocol(format!("unexpected reply {k:#x}"))),
        }
    }
}

#[derive(Debug)]
pub struct TcpSubscription {
    stream: TcpStream,
}

impl Subscription for TcpSubscription {
    fn recv(&mut self, timeout: Duration) -> Result<Option<Delivery>, BusError> {
        let ms = timeout.as_millis().min(u32::MAX as u128) as u32;
        match request(&mut self.stream, MSG_RECV, &ms.to_le_bytes())? {
            (MSG_DELIVERY, p) => decode_delivery(&p).map(Some),
            (MSG_EMPTY, _) => Ok(None),
            (k, _) => Err(BusError::Protocol(format!("unexpected reply {k:#x}"))),
        }
    }

    fn ack(&mut self, seq: u64) -> Result<bool, BusError> {
        match request(&mut self.stream, MSG_ACK, &seq.to_le_bytes())? {
            (MSG_ACKED, p) => Ok(p.first() == Some(&1)),
            (k, _) => Err(BusError::Protocol(format!("unexpected reply {k:#x}"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manual_broker(timeout_ms: u64) -> (Broker, Arc<ManualClock>) {
        let clock = Arc::new(ManualClock::default());
        let cfg = BrokerConfig {
            redelivery_timeout: Duration::from_millis(timeout_ms),
            max_payload: 1024,
            ..Default::default()
        };
        (Broker::with_clock(cfg, clock.clone()), clock)
    }

    #[test]
    fn seqs_start_at_one() {
        let b = Broker::default();
        assert_eq!(b.publish("t", "p", b"a").unwrap(), 1);
        assert_eq!(b.publish("t", "p", b"b").unwrap(), 2);
        assert_eq!(b.publish("t", "q", b"").unwrap(), 3);
    }

    #[test]
    fn oversized_payload_rejected() {
        let (b, _) = manual_broker(100);
        assert_eq!(
            b.publish("t", "p", &[0u8; 1025]).unwrap_err(),
            BusError::PayloadTooLarge {
                size: 1025,
                limit: 1024
            }
        );
        let mut s = b
            .subscribe_local("t", SubscribeMode::ConsumerGroup("g".into()))
            .unwrap();
        b.publish("t", "p", b"").unwrap();
        let d = s.try_recv().unwrap().unwrap();
        assert!(d.envelope.payload.is_empty());
    }

    #[test]
    fn fanout_delivers_to_every_subscriber() {
        let b = Broker::default();
        let mut subs: Vec<_> = (0..4)
            .map(|_| b.subscribe_local("x", SubscribeMode::Fanout).unwrap())
            .collect();
        b.publish("x", "p", b"hello").unwrap();
        for s in &mut subs {
            assert_eq!(&*s.try_recv().unwrap().unwrap().envelope.payload, b"hello");
            assert!(s.try_recv().unwrap().is_none());
        }
    }

    #[test]
    fn crashed_member_work_is_redelivered() {
        let (b, clock) = manual_broker(2000);
        let mut a = b
            .subscribe_local("e", SubscribeMode::ConsumerGroup("g".into()))
            .unwrap();
        let mut c = b
            .subscribe_local("e", SubscribeMode::ConsumerGroup("g".into()))
            .unwrap();
        b.publish("e", "p", b"1").unwrap();
        let d = a.try_recv().unwrap().unwrap();
        assert_eq!(d.attempt, 1);
        drop(a);
        assert!(c.try_recv().unwrap().is_none());
        clock.advance(Duration::from_millis(2001));
        let d2 = c.try_recv().unwrap().unwrap();
        assert_eq!(d2.envelope.seq, 1);
        assert_eq!(d2.attempt, 2);
        assert!(c.ack(1).unwrap());
        assert!(!c.ack(1).unwrap());
    }

    #[test]
    fn acked_envelopes_are_not_redelivered() {
        let (b, clock) = manual_broker(50);
        let mut s = b
            .subscribe_local("e", SubscribeMode::ConsumerGroup("g".into()))
            .unwrap();
        b.publish("e", "p", b"1").unwrap();
        let d = s.try_recv().unwrap().unwrap();
        assert!(s.ack(d.envelope.seq).unwrap());
        clock.advance(Duration::from_secs(10));
        assert!(s.try_recv().unwrap().is_none());
        assert!(!s.ack(42).unwrap());
    }

    #[test]
    fn retained_latest_for_late_joiner() {
        let b = Broker::default();
        let mut none = b
            .subscribe_local(PARAMS_TOPIC, SubscribeMode::Fanout)
            .unwrap();
        assert!(none.try_recv().unwrap().is_none());
        b.publish(PARAMS_TOPIC, "l", b"v3").unwrap();
        b.publish(PARAMS_TOPIC, "l", b"v4").unwrap();
        let mut late = b
            .subscribe_local(PARAMS_TOPIC, SubscribeMode::Fanout)
            .unwrap();
        assert_eq!(&*late.try_recv().unwrap().unwrap().envelope.payload, b"v4");
        assert!(late.try_recv().unwrap().is_none());
        b.publish(PARAMS_TOPIC, "l", b"v5").unwrap();
        assert_eq!(&*late.try_recv().unwrap().unwrap().envelope.payload, b"v5");
        // Topics without retention start strictly at the join point.
        b.publish("other", "l", b"x").unwrap();
        let mut s = b.subscribe_local("other", SubscribeMode::Fanout).unwrap();
        assert!(s.try_recv().unwrap().is_none());
    }

    #[test]
    fn outage_fails_operations() {
        let b = Broker::default();
        let mut s = b
            .subscribe_local("e", SubscribeMode::ConsumerGroup("g".into()))
            .unwrap();
        b.set_available(false);
        assert_eq!(
            b.publish("e", "p", b"x").unwrap_err(),
            BusError::Unavailable
        );
        assert_eq!(s.try_recv().unwrap_err(), BusError::Unavailable);
        b.set_available(true);
        assert!(b.publish("e", "p", b"x").is_ok());
    }

    #[test]
    fn notification_round_trip() {
        let n = EpisodeNotification {
            episode_id: EpisodeId(77),
            task_id: 2,
            storage_key: "episodes/2/abc".into(),
        };
        let bytes = n.encode();
        assert_eq!(bytes.len(), 16 + 4 + 4 + 14);
        assert_eq!(EpisodeNotification::decode(&bytes).unwrap(), n);
        assert!(EpisodeNotification::decode(&bytes[..20]).is_err());
    }

    #[test]
    fn frame_layout() {
        let mut buf = Vec::new();
        write_frame(&mut buf, 0x01, b"abc").unwrap();
        assert_eq!(buf, vec![0x01, 3, 0, 0, 0, b'a', b'b', b'c']);
        let (k, p) = read_frame(&mut buf.as_slice()).unwrap();
        assert_eq!((k, p.as_slice()), (0x01, &b"abc"[..]));
    }
}
