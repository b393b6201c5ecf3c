//! Wall-clock ingest benchmark against the threaded pipeline.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use arena_core::pipeline::LatencySummary;
use arena_core::{
    Arena, ArenaConfig, ArenaError, Choice, FileLog, PipelineConfig, PipelineError, PipelineService,
    ProviderDescriptor, ProviderGateway, SyncPolicy, SystemClock, TrackId,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::SimError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatencyOptions {
    /// Latent skills of the competing models.
    pub skills: Vec<f64>,
    pub rate_per_sec: f64,
    pub duration_secs: f64,
    /// Concurrent ingest threads sharing the schedule.
    pub ingest_threads: usize,
    /// Batched log flush window (≤ 5 ms).
    pub batch_window_ms: u64,
    pub queue_capacity: usize,
    pub seed: u64,
    pub track: TrackId,
}

impl Default for LatencyOptions {
    fn default() -> Self {
        Self {
            skills: (0..10).map(|i| 900.0 + 25.0 * f64::from(i)).collect(),
            rate_per_sec: 5_000.0,
            duration_secs: 30.0,
            ingest_threads: 1,
            batch_window_ms: 5,
            queue_capacity: arena_core::pipeline::DEFAULT_QUEUE_CAPACITY,
            seed: 1,
            track: TrackId::Ideation,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub options: LatencyOptions,
    /// Votes the schedule called for.
    pub offered: u64,
    pub accepted: u64,
    /// Votes refused with backpressure (queue full).
    pub rejected: u64,
    pub elapsed_secs: f64,
    pub achieved_rate: f64,
    /// Enqueue-to-snapshot latency, queue depth high-water mark.
    pub summary: LatencySummary,
}

/// Paces full battle lifecycles (pair, fetch fixtures, vote) at a fixed
/// rate into a threaded pipeline backed by a batched-flush file log.
pub fn measure_latency(opts: &LatencyOptions) -> Result<LatencyReport, SimError> {
    if opts.skills.len() < 2 || opts.ingest_threads == 0 || opts.rate_per_sec.is_nan() || opts.rate_per_sec <= 0.0 || opts.duration_secs.is_nan() || opts.duration_secs <= 0.0 {
        return Err(SimError::Scenario("latency run needs ≥ 2 models, ≥ 1 thread, positive rate and duration".into()));
    }
    let dir = tempfile::tempdir().map_err(|source| SimError::Io { path: std::env::temp_dir(), source })?;
    let window = Duration::from_millis(opts.batch_window_ms);
    let log = FileLog::open(dir.path().join("events.jsonl"), SyncPolicy::Batched { window })?;
    let config = PipelineConfig {
        queue_capacity: opts.queue_capacity,
        sync_interval: Some(window),
        ..Default::default()
    };
    let clock = Arc::new(SystemClock);
    let service = Arc::new(PipelineService::start(Box::new(log), config, clock.clone())?);
    let arena = Arena::new(
        service.clone(),
        ArenaConfig {
            tie_enabled: false,
            battle_ttl: Duration::from_secs(1),
        },
        clock,
    );
    let ids: Vec<String> = (0..opts.skills.len()).map(|i| format!("m{i:02}")).collect();
    for id in &ids {
        arena.register_model(id, &[opts.track], ProviderDescriptor::placeholder())?;
    }
    service.reset_latency();

    let gateway = ProviderGateway::default();
    let total = (opts.rate_per_sec * opts.duration_secs).round() as u64;
    let period = Duration::from_secs_f64(1.0 / opts.rate_per_sec);
    let accepted = AtomicU64::new(0);
    let rejected = AtomicU64::new(0);
    let threads = opts.ingest_threads as u64;
    let started = Instant::now();
    std::thread::scope(|scope| -> Result<(), SimError> {
        let handles: Vec<_> = (0..threads)
            .map(|t| {
                let (arena, gateway, ids, accepted, rejected) = (&arena, &gateway, &ids, &accepted, &rejected);
                scope.spawn(move || -> Result<(), SimError> {
                    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(t));
                    let mut k = t;
                    while k < total {
                        let due = started + period * k as u32;
                        let now = Instant::now();
                        if due > now {
                            std::thread::sleep(due - now);
                        }
                        let prompt = format!("latency prompt {}", k % 64);
                        let battle = arena.create_battle(opts.track, &prompt, rng.random())?;
                        let fetch = |m: &str| gateway.fetch_fixture(m, None, opts.track, &prompt);
                        arena.attach_responses(
                            &battle.battle_id,
                            fetch(&battle.candidate_left)?,
                            fetch(&battle.candidate_right)?,
                        )?;
                        let skill = |m: &str| opts.skills[ids.iter().position(|x| x == m).expect("known id")];
                        let p = 1.0 / (1.0 + 10f64.powf((skill(&battle.candidate_right) - skill(&battle.candidate_left)) / 400.0));
                        let choice = if rng.random::<f64>() < p { Choice::Left } else { Choice::Right };
                        match arena.cast_vote(&battle.battle_id, choice, "latency", None) {
                            Ok(_) => accepted.fetch_add(1, Ordering::Relaxed),
                            Err(ArenaError::Pipeline(PipelineError::QueueFull(_))) => {
                                rejected.fetch_add(1, Ordering::Relaxed)
                            }
                            Err(e) => return Err(e.into()),
                        };
                        if t == 0 && k % 4096 == 0 {
                            arena.expire_stale();
                        }
                        k += threads;
                    }
                    Ok(())
                })
            })
            .collect();
        for h in handles {
            h.join().expect("ingest thread panicked")?;
        }
        Ok(())
    })?;
    let ingest_elapsed = started.elapsed();
    if !service.wait_idle(Duration::from_secs(30)) {
        return Err(SimError::Scenario("pipeline did not drain within 30 s".into()));
    }
    let summary = service.latency();
    drop(arena);
    if let Ok(svc) = Arc::try_unwrap(service) {
        svc.shutdown()?;
    }
    let accepted = accepted.into_inner();
    Ok(LatencyReport {
        options: opts.clone(),
        offered: total,
        accepted,
        rejected: rejected.into_inner(),
        elapsed_secs: ingest_elapsed.as_secs_f64(),
        achieved_rate: accepted as f64 / ingest_elapsed.as_secs_f64(),
        summary,
    })
}
