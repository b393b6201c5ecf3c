//! The message-driven backbone.
//!
//! Producers hand [`NewEvent`]s to a sequencer that stamps a per-track (or,
//! for regression ticks, global) sequence number, appends the record to the
//! durable log and only then acknowledges. Acknowledged events are queued to
//! the owning track's worker, which folds them in sequence order and
//! publishes a fresh leaderboard snapshot after each one.
//!
//! Two drivers share that machinery: [`Pipeline`] processes on the caller's
//! thread (tests, the simulator), [`PipelineService`] runs one worker thread
//! per track behind bounded queues.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use chrono::{DateTime, Utc};
use crossbeam::channel::{self, Receiver, Sender, TrySendError};
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::Clock;
use crate::events::{ArenaEvent, EventKind, NewEvent};
use crate::leaderboard::{Leaderboard, LeaderboardSnapshot, DEFAULT_RETENTION};
use crate::persistence::{EventLog, LogError, LogRecord, SnapshotStore};
use crate::state::{
    new_views, ArenaState, DeadLetter, ParamsByTrack, Processed, ReplayError, Replayer, TrackEngine,
    TrackState, TrackView, Views,
};
use crate::track::TrackId;

pub const DEFAULT_QUEUE_CAPACITY: usize = 4096;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid event: {0}")]
    Invalid(String),
    #[error("queue for track {0} is full")]
    QueueFull(TrackId),
    #[error("log append failed, event not acknowledged: {0}")]
    Ingest(LogError),
    #[error(transparent)]
    Replay(#[from] ReplayError),
    #[error("pipeline is stopped")]
    Stopped,
    #[error("internal sequencing fault: {0}")]
    Sequence(#[from] crate::state::SequenceError),
}

#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub params: ParamsByTrack,
    /// Per-track bound on events acknowledged but not yet applied.
    pub queue_capacity: usize,
    pub retention: usize,
    /// Write a checkpoint for a track every N applied events.
    pub checkpoint_every: Option<u64>,
    pub checkpoint_dir: Option<PathBuf>,
    /// Period of the background log sync used with batched flushing.
    pub sync_interval: Option<Duration>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            params: ParamsByTrack::default(),
            queue_capacity: DEFAULT_QUEUE_CAPACITY,
            retention: DEFAULT_RETENTION,
            checkpoint_every: None,
            checkpoint_dir: None,
            sync_interval: None,
        }
    }
}

/// Acknowledgment returned once an event is durable.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Ack {
    pub event_id: String,
    pub kind: EventKind,
    pub track: Option<TrackId>,
    pub seq: u64,
    pub position: u64,
    pub enqueued_at: DateTime<Utc>,
    /// True when this event id had already been acknowledged.
    pub duplicate: bool,
}

enum Stamped {
    Fresh(ArenaEvent, Ack),
    Duplicate(Ack),
}

/// Assigns sequence numbers and writes the log. Single writer.
struct Sequencer {
    log: Box<dyn EventLog>,
    track_seq: BTreeMap<TrackId, u64>,
    global_seq: u64,
    acks: HashMap<String, Ack>,
    clock: Arc<dyn Clock>,
}

impl Sequencer {
    fn new(log: Box<dyn EventLog>, clock: Arc<dyn Clock>) -> Self {
        Self {
            log,
            track_seq: BTreeMap::new(),
            global_seq: 0,
            acks: HashMap::new(),
            clock,
        }
    }

    fn observe(&mut self, position: u64, event: &ArenaEvent) {
        match event.track {
            Some(t) => {
                let s = self.track_seq.entry(t).or_insert(0);
                *s = (*s).max(event.seq);
            }
            None => self.global_seq = self.global_seq.max(event.seq),
        }
        self.acks.insert(event.event_id.clone(), ack_for(event, position, false));
    }

    fn stamp(&mut self, new: NewEvent) -> Result<Stamped, PipelineError> {
        new.validate().map_err(PipelineError::Invalid)?;
        if let Some(ack) = self.acks.get(&new.event_id) {
            return Ok(Stamped::Duplicate(Ack {
                duplicate: true,
                ..ack.clone()
            }));
        }
        let seq = match new.track {
            Some(t) => self.track_seq.get(&t).copied().unwrap_or(0) + 1,
            None => self.global_seq + 1,
        };
        let event = ArenaEvent {
            event_id: new.event_id,
            track: new.track,
            seq,
            enqueued_at: self.clock.now(),
            body: new.body,
        };
        let record = LogRecord::from_event(&event);
        let position = self.log.append(&record).map_err(|e| match e {
            LogError::Malformed(m) => PipelineError::Invalid(m),
            other => PipelineError::Ingest(other),
        })?;
        self.observe(position, &event);
        let ack = ack_for(&event, position, false);
        Ok(Stamped::Fresh(event, ack))
    }
}

fn ack_for(event: &ArenaEvent, position: u64, duplicate: bool) -> Ack {
    Ack {
        event_id: event.event_id.clone(),
        kind: event.kind(),
        track: event.track,
        seq: event.seq,
        position,
        enqueued_at: event.enqueued_at,
        duplicate,
    }
}

struct Recovered {
    sequencer: Sequencer,
    engines: BTreeMap<TrackId, TrackEngine>,
    dead_letters: Vec<DeadLetter>,
}

fn recover(
    log: Box<dyn EventLog>,
    clock: Arc<dyn Clock>,
    config: &PipelineConfig,
    board: &Arc<Leaderboard>,
    views: &Views,
) -> Result<Recovered, PipelineError> {
    config
        .params
        .validate()
        .map_err(|e| PipelineError::Invalid(e.to_string()))?;
    let mut replayer = Replayer::new(&config.params, board.clone(), views.clone());
    if let Some(dir) = &config.checkpoint_dir {
        let store = SnapshotStore::new(dir).map_err(PipelineError::Ingest)?;
        replayer = replayer.with_checkpoints(&store)?;
    }
    let records = log.scan(0).map_err(ReplayError::from)?;
    let mut sequencer = Sequencer::new(log, clock);
    for (pos, rec) in records.iter().enumerate() {
        let pos = pos as u64;
        replayer.apply_record(pos, rec)?;
        let event = rec.to_event().map_err(ReplayError::from)?;
        sequencer.observe(pos, &event);
    }
    if !records.is_empty() {
        tracing::info!(records = records.len(), "recovered pipeline state from event log");
    }
    let (engines, dead_letters) = replayer.into_parts();
    Ok(Recovered {
        sequencer,
        engines,
        dead_letters,
    })
}

struct Checkpointer {
    store: SnapshotStore,
    every: u64,
    counts: BTreeMap<TrackId, u64>,
}

impl Checkpointer {
    fn from_config(config: &PipelineConfig) -> Result<Option<Self>, PipelineError> {
        match (&config.checkpoint_dir, config.checkpoint_every) {
            (Some(dir), Some(every)) if every > 0 => Ok(Some(Self {
                store: SnapshotStore::new(dir).map_err(PipelineError::Ingest)?,
                every,
                counts: BTreeMap::new(),
            })),
            _ => Ok(None),
        }
    }

    fn after(&mut self, engine: &TrackEngine) {
        let track = engine.state().track;
        let n = self.counts.entry(track).or_insert(0);
        *n += 1;
        if n.is_multiple_of(self.every) {
            let cp = engine.checkpoint();
            if let Err(e) = self.store.save(track, cp.state.last_seq, &cp) {
                tracing::warn!(%track, "checkpoint write failed: {e}");
            }
        }
    }
}

/// Single-threaded pipeline: events queue per track until `process_next`.
pub struct Pipeline {
    sequencer: Sequencer,
    engines: BTreeMap<TrackId, TrackEngine>,
    pending: BTreeMap<TrackId, VecDeque<(u64, Arc<ArenaEvent>)>>,
    capacity: usize,
    board: Arc<Leaderboard>,
    views: Views,
    dead_letters: Vec<DeadLetter>,
    checkpointer: Option<Checkpointer>,
}

impl Pipeline {
    /// Opens the pipeline over `log`, replaying whatever it already holds.
    pub fn open(log: Box<dyn EventLog>, config: PipelineConfig, clock: Arc<dyn Clock>) -> Result<Self, PipelineError> {
        let board = Arc::new(Leaderboard::new(config.retention));
        let views = new_views();
        let rec = recover(log, clock, &config, &board, &views)?;
        Ok(Self {
            sequencer: rec.sequencer,
            engines: rec.engines,
            pending: TrackId::ALL.into_iter().map(|t| (t, VecDeque::new())).collect(),
            capacity: config.queue_capacity.max(1),
            board,
            views,
            dead_letters: rec.dead_letters,
            checkpointer: Checkpointer::from_config(&config)?,
        })
    }

    pub fn enqueue(&mut self, event: NewEvent) -> Result<Ack, PipelineError> {
        let targets: Vec<TrackId> = match event.track {
            Some(t) => vec![t],
            None => TrackId::ALL.to_vec(),
        };
        if !self.sequencer.acks.contains_key(&event.event_id) {
            if let Some(&full) = targets.iter().find(|t| self.pending[t].len() >= self.capacity) {
                return Err(PipelineError::QueueFull(full));
            }
        }
        match self.sequencer.stamp(event)? {
            Stamped::Duplicate(ack) => Ok(ack),
            Stamped::Fresh(event, ack) => {
                let event = Arc::new(event);
                for t in targets {
                    self.pending
                        .get_mut(&t)
                        .expect("all tracks present")
                        .push_back((ack.position, event.clone()));
                }
                Ok(ack)
            }
        }
    }

    /// Applies the oldest pending event of `track`, if any.
    pub fn process_next(&mut self, track: TrackId) -> Result<Option<Processed>, PipelineError> {
        let Some((pos, event)) = self.pending.get_mut(&track).and_then(VecDeque::pop_front) else {
            return Ok(None);
        };
        let engine = self.engines.get_mut(&track).expect("all tracks present");
        let processed = engine.handle(&event, pos)?;
        if let Some(cp) = &mut self.checkpointer {
            cp.after(engine);
        }
        if let Err(dl) = &processed.result {
            self.dead_letters.push(dl.clone());
        }
        Ok(Some(processed))
    }

    /// Drains one track. Returns the number of events applied.
    pub fn run_track(&mut self, track: TrackId) -> Result<usize, PipelineError> {
        let mut n = 0;
        while self.process_next(track)?.is_some() {
            n += 1;
        }
        Ok(n)
    }

    pub fn run_until_idle(&mut self) -> Result<usize, PipelineError> {
        let mut n = 0;
        for t in TrackId::ALL {
            n += self.run_track(t)?;
        }
        Ok(n)
    }

    pub fn pending(&self, track: TrackId) -> usize {
        self.pending[&track].len()
    }

    pub fn leaderboard(&self) -> &Arc<Leaderboard> {
        &self.board
    }

    pub fn current(&self, track: TrackId) -> Arc<LeaderboardSnapshot> {
        self.board.current(track)
    }

    pub fn view(&self, track: TrackId) -> Arc<TrackView> {
        self.views[&track].clone()
    }

    pub fn track_state(&self, track: TrackId) -> &TrackState {
        self.engines[&track].state()
    }

    pub fn dead_letters(&self) -> &[DeadLetter] {
        &self.dead_letters
    }

    pub fn log(&self) -> &dyn EventLog {
        self.sequencer.log.as_ref()
    }

    pub fn sync_log(&mut self) -> Result<(), LogError> {
        self.sequencer.log.sync()
    }

    /// Applied state so far (pending events are not included).
    pub fn state(&self) -> ArenaState {
        ArenaState {
            tracks: self
                .engines
                .iter()
                .map(|(t, e)| (*t, e.state().clone()))
                .collect(),
            leaderboard: self.board.clone(),
            dead_letters: self.dead_letters.clone(),
            last_global_seq: self.sequencer.global_seq,
        }
    }
}

struct Job {
    position: u64,
    event: Arc<ArenaEvent>,
    acked_at: Instant,
}

const LATENCY_SAMPLE_CAP: usize = 1 << 21;

#[derive(Default)]
struct Metrics {
    latencies_ns: Mutex<Vec<u64>>,
    max_queue_depth: AtomicUsize,
    processed: AtomicU64,
}

/// Enqueue-ack to snapshot-publish latency and queue depth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencySummary {
    pub samples: usize,
    pub p50_us: f64,
    pub p99_us: f64,
    pub max_us: f64,
    pub max_queue_depth: usize,
    pub processed: u64,
}

/// Nearest-rank percentile of an ascending slice.
pub fn percentile(sorted: &[u64], p: f64) -> u64 {
    if sorted.is_empty() {
        return 0;
    }
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

struct Shared {
    board: Arc<Leaderboard>,
    views: Views,
    dead_letters: Mutex<Vec<DeadLetter>>,
    metrics: Metrics,
    stop: AtomicBool,
    live_workers: AtomicUsize,
    log_ok: AtomicBool,
}

/// Threaded pipeline: one worker per track, bounded queues, blocking or
/// fail-fast enqueue.
pub struct PipelineService {
    sequencer: Arc<Mutex<Sequencer>>,
    senders: BTreeMap<TrackId, Sender<Job>>,
    capacity: usize,
    workers: Vec<JoinHandle<TrackEngine>>,
    flusher: Option<JoinHandle<()>>,
    shared: Arc<Shared>,
}

impl PipelineService {
    pub fn start(log: Box<dyn EventLog>, config: PipelineConfig, clock: Arc<dyn Clock>) -> Result<Self, PipelineError> {
        let board = Arc::new(Leaderboard::new(config.retention));
        let views = new_views();
        let rec = recover(log, clock, &config, &board, &views)?;
        let shared = Arc::new(Shared {
            board,
            views,
            dead_letters: Mutex::new(rec.dead_letters),
            metrics: Metrics::default(),
            stop: AtomicBool::new(false),
            live_workers: AtomicUsize::new(0),
            log_ok: AtomicBool::new(true),
        });
        let capacity = config.queue_capacity.max(1);
        let mut senders = BTreeMap::new();
        let mut workers = Vec::new();
        for (track, engine) in rec.engines {
            let (tx, rx) = channel::bounded(capacity);
            senders.insert(track, tx);
            let shared = shared.clone();
            let checkpointer = Checkpointer::from_config(&config)?;
            shared.live_workers.fetch_add(1, Ordering::SeqCst);
            let handle = std::thread::Builder::new()
                .name(format!("arena-{track}"))
                .spawn(move || worker_loop(engine, rx, shared, checkpointer))
                .map_err(|e| PipelineError::Ingest(LogError::Io(e)))?;
            workers.push(handle);
        }
        let sequencer = Arc::new(Mutex::new(rec.sequencer));
        let flusher = config.sync_interval.map(|every| {
            let seq = sequencer.clone();
            let shared = shared.clone();
            std::thread::spawn(move || {
                while !shared.stop.load(Ordering::Relaxed) {
                    std::thread::sleep(every);
                    if let Err(e) = seq.lock().log.sync() {
                        shared.log_ok.store(false, Ordering::SeqCst);
                        tracing::error!("background log sync failed: {e}");
                    }
                }
            })
        });
        Ok(Self {
            sequencer,
            senders,
            capacity,
            workers,
            flusher,
            shared,
        })
    }

    /// Enqueues, blocking while the target queue is full.
    pub fn enqueue(&self, event: NewEvent) -> Result<Ack, PipelineError> {
        self.submit(event, true)
    }

    /// Enqueues or fails with [`PipelineError::QueueFull`] without logging.
    pub fn try_enqueue(&self, event: NewEvent) -> Result<Ack, PipelineError> {
        self.submit(event, false)
    }

    fn submit(&self, event: NewEvent, block: bool) -> Result<Ack, PipelineError> {
        if self.shared.stop.load(Ordering::SeqCst) {
            return Err(PipelineError::Stopped);
        }
        let targets: Vec<&Sender<Job>> = match event.track {
            Some(t) => vec![&self.senders[&t]],
            None => self.senders.values().collect(),
        };
        let mut seq = self.sequencer.lock();
        if !block && !seq.acks.contains_key(&event.event_id) {
            if let Some((t, _)) = self
                .senders
                .iter()
                .find(|(t, tx)| event.track.is_none_or(|et| et == **t) && tx.len() >= self.capacity)
            {
                return Err(PipelineError::QueueFull(*t));
            }
        }
        let stamped = seq.stamp(event);
        if let Err(PipelineError::Ingest(_)) = &stamped {
            self.shared.log_ok.store(false, Ordering::SeqCst);
        }
        let (event, ack) = match stamped? {
            Stamped::Duplicate(ack) => return Ok(ack),
            Stamped::Fresh(event, ack) => (Arc::new(event), ack),
        };
        let acked_at = Instant::now();
        for tx in targets {
            let job = Job {
                position: ack.position,
                event: event.clone(),
                acked_at,
            };
            // Only this function sends, under the sequencer lock, so a
            // non-blocking caller already knows there is room.
            match tx.try_send(job) {
                Ok(()) => {}
                Err(TrySendError::Full(job)) => tx.send(job).map_err(|_| PipelineError::Stopped)?,
                Err(TrySendError::Disconnected(_)) => return Err(PipelineError::Stopped),
            }
            self.shared
                .metrics
                .max_queue_depth
                .fetch_max(tx.len(), Ordering::Relaxed);
        }
        Ok(ack)
    }

    pub fn leaderboard(&self) -> &Arc<Leaderboard> {
        &self.shared.board
    }

    pub fn current(&self, track: TrackId) -> Arc<LeaderboardSnapshot> {
        self.shared.board.current(track)
    }

    pub fn view(&self, track: TrackId) -> Arc<TrackView> {
        self.shared.views[&track].clone()
    }

    pub fn queue_depth(&self, track: TrackId) -> usize {
        self.senders[&track].len()
    }

    pub fn dead_letters(&self) -> Vec<DeadLetter> {
        self.shared.dead_letters.lock().clone()
    }

    /// Waits until `track` has published a snapshot covering `seq`.
    pub fn wait_for_seq(&self, track: TrackId, seq: u64, timeout: Duration) -> Option<Arc<LeaderboardSnapshot>> {
        let deadline = Instant::now() + timeout;
        loop {
            let snap = self.current(track);
            if snap.produced_by_seq >= seq {
                return Some(snap);
            }
            if Instant::now() >= deadline {
                return None;
            }
            std::thread::sleep(Duration::from_micros(200));
        }
    }

    /// Waits until every queue is empty and every job has been applied.
    pub fn wait_idle(&self, timeout: Duration) -> bool {
        let deadline = Instant::now() + timeout;
        loop {
            let target: u64 = {
                let seq = self.sequencer.lock();
                seq.track_seq.values().sum::<u64>() + seq.global_seq * TrackId::ALL.len() as u64
            };
            let queued: usize = self.senders.values().map(Sender::len).sum();
            if queued == 0 && self.processed_total() >= target {
                return true;
            }
            if Instant::now() >= deadline {
                return false;
            }
            std::thread::sleep(Duration::from_micros(200));
        }
    }

    fn processed_total(&self) -> u64 {
        self.shared.metrics.processed.load(Ordering::SeqCst)
    }

    pub fn latency(&self) -> LatencySummary {
        let mut samples = self.shared.metrics.latencies_ns.lock().clone();
        samples.sort_unstable();
        let us = |ns: u64| ns as f64 / 1000.0;
        LatencySummary {
            samples: samples.len(),
            p50_us: us(percentile(&samples, 50.0)),
            p99_us: us(percentile(&samples, 99.0)),
            max_us: us(samples.last().copied().unwrap_or(0)),
            max_queue_depth: self.shared.metrics.max_queue_depth.load(Ordering::Relaxed),
            processed: self.processed_total(),
        }
    }

    pub fn reset_latency(&self) {
        self.shared.metrics.latencies_ns.lock().clear();
        self.shared.metrics.max_queue_depth.store(0, Ordering::Relaxed);
    }

    /// Workers alive and the log accepting writes.
    pub fn is_healthy(&self) -> bool {
        self.shared.live_workers.load(Ordering::SeqCst) == self.senders.len()
            && self.shared.log_ok.load(Ordering::SeqCst)
            && !self.shared.stop.load(Ordering::SeqCst)
    }

    pub fn sync_log(&self) -> Result<(), LogError> {
        self.sequencer.lock().log.sync()
    }

    /// Stops accepting events, drains every queue and returns final state.
    pub fn shutdown(mut self) -> Result<ArenaState, PipelineError> {
        self.senders.clear();
        let mut tracks = BTreeMap::new();
        for h in self.workers.drain(..) {
            let engine = h.join().map_err(|_| PipelineError::Stopped)?;
            tracks.insert(engine.state().track, engine.into_state());
        }
        self.shared.stop.store(true, Ordering::SeqCst);
        if let Some(f) = self.flusher.take() {
            let _ = f.join();
        }
        let mut seq = self.sequencer.lock();
        seq.log.sync().map_err(PipelineError::Ingest)?;
        Ok(ArenaState {
            tracks,
            leaderboard: self.shared.board.clone(),
            dead_letters: self.shared.dead_letters.lock().clone(),
            last_global_seq: seq.global_seq,
        })
    }

    /// Abrupt stop: workers exit at their next event without draining.
    /// Acknowledged events stay in the log for recovery.
    pub fn kill(mut self) {
        self.shared.stop.store(true, Ordering::SeqCst);
        self.senders.clear();
        for h in self.workers.drain(..) {
            let _ = h.join();
        }
        if let Some(f) = self.flusher.take() {
            let _ = f.join();
        }
    }
}

impl Drop for PipelineService {
    fn drop(&mut self) {
        self.shared.stop.store(true, Ordering::SeqCst);
        self.senders.clear();
        for h in self.workers.drain(..) {
            let _ = h.join();
        }
        if let Some(f) = self.flusher.take() {
            let _ = f.join();
        }
    }
}

fn worker_loop(
    mut engine: TrackEngine,
    rx: Receiver<Job>,
    shared: Arc<Shared>,
    mut checkpointer: Option<Checkpointer>,
) -> TrackEngine {
    struct Alive<'a>(&'a AtomicUsize);
    impl Drop for Alive<'_> {
        fn drop(&mut self) {
            self.0.fetch_sub(1, Ordering::SeqCst);
        }
    }
    let _alive = Alive(&shared.live_workers);
    while let Ok(job) = rx.recv() {
        if shared.stop.load(Ordering::SeqCst) {
            break;
        }
        match engine.handle(&job.event, job.position) {
            Ok(processed) => {
                let elapsed = job.acked_at.elapsed().as_nanos() as u64;
                {
                    let mut l = shared.metrics.latencies_ns.lock();
                    if l.len() < LATENCY_SAMPLE_CAP {
                        l.push(elapsed);
                    }
                }
                if let Err(dl) = processed.result {
                    shared.dead_letters.lock().push(dl);
                }
                if let Some(cp) = &mut checkpointer {
                    cp.after(&engine);
                }
            }
            Err(e) => {
                // The sequencer hands out contiguous seqs, so this is a bug.
                tracing::error!(track = %engine.state().track, "sequence fault: {e}");
            }
        }
        shared.metrics.processed.fetch_add(1, Ordering::SeqCst);
    }
    engine
}
