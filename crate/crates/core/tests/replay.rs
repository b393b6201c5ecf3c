use std::collections::BTreeMap;
use std::io::Write;
use std::sync::Arc;
use std::time::Duration;

use arena_core::events::VotePayload;
use arena_core::state::replay;
use arena_core::{
    ArenaState, EventLog, FileLog, ManualClock, MemoryLog, NewEvent, Outcome, Pipeline, PipelineConfig,
    PipelineService, ProviderDescriptor, SyncPolicy, TrackId,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TRACKS: [TrackId; 3] = [TrackId::Ideation, TrackId::Reviewer, TrackId::PaperQa];

/// A deterministic mixed stream: registrations, votes (a few naming unknown
/// models), and a regression tick every 500 events. The clock step is
/// returned alongside each event so every driver sees identical timestamps.
fn synthetic_stream(n: usize, seed: u64) -> Vec<(NewEvent, chrono::Duration)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let models: Vec<String> = (0..8).map(|i| format!("m{i}")).collect();
    let mut out = Vec::with_capacity(n);
    for t in TRACKS {
        for m in &models {
            out.push((NewEvent::registration(t, m, ProviderDescriptor::placeholder()), chrono::Duration::zero()));
        }
    }
    let mut i = 0;
    while out.len() < n {
        i += 1;
        if i % 500 == 0 {
            out.push((NewEvent::regression_tick(format!("tick-{i}")), chrono::Duration::days(3)));
            continue;
        }
        let track = TRACKS[rng.random_range(0..TRACKS.len())];
        // only the first 6 models keep playing; m6 and m7 go stale
        let a = rng.random_range(0..6);
        let mut b = rng.random_range(0..6);
        while b == a {
            b = rng.random_range(0..6);
        }
        let model_b = if rng.random_ratio(1, 200) { "ghost".to_string() } else { models[b].clone() };
        let outcome = match rng.random_range(0..3) {
            0 => Outcome::LOSS,
            1 => Outcome::TIE,
            _ => Outcome::WIN,
        };
        let vote = VotePayload {
            battle_id: format!("b{i}"),
            model_a: models[a].clone(),
            model_b,
            outcome,
            voter_id: format!("v{}", i % 17),
            submitted_at: ManualClock::epoch().now(),
        };
        out.push((NewEvent::vote(format!("e{i}"), track, vote), chrono::Duration::minutes(7)));
    }
    out
}

use arena_core::Clock;

fn run_inline(log: Box<dyn EventLog>, stream: &[(NewEvent, chrono::Duration)]) -> ArenaState {
    let clock = Arc::new(ManualClock::epoch());
    let mut p = Pipeline::open(log, PipelineConfig::default(), clock.clone()).unwrap();
    for (ev, step) in stream {
        clock.advance(*step);
        p.enqueue(ev.clone()).unwrap();
        p.run_until_idle().unwrap();
    }
    p.state()
}

fn rating_bits(state: &ArenaState) -> BTreeMap<(TrackId, String), (u64, u64)> {
    state
        .tracks
        .iter()
        .flat_map(|(t, ts)| {
            ts.models
                .iter()
                .map(move |(id, s)| ((*t, id.clone()), (s.rating.to_bits(), s.match_count)))
        })
        .collect()
}

fn assert_same(a: &ArenaState, b: &ArenaState) {
    assert_eq!(rating_bits(a), rating_bits(b));
    assert_eq!(a.snapshot_versions(), b.snapshot_versions());
    for t in TrackId::ALL {
        assert_eq!(a.track(t).pairs, b.track(t).pairs);
        assert_eq!(a.track(t).last_seq, b.track(t).last_seq);
        assert_eq!(*a.leaderboard.current(t), *b.leaderboard.current(t));
    }
    assert_eq!(a.dead_letters, b.dead_letters);
}

#[test]
fn replaying_ten_thousand_events_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("events.jsonl");
    let stream = synthetic_stream(10_000, 11);
    let live = {
        let log = FileLog::open(&path, SyncPolicy::Batched { window: Duration::from_millis(5) }).unwrap();
        run_inline(Box::new(log), &stream)
    };
    let log = FileLog::open(&path, SyncPolicy::EveryAppend).unwrap();
    assert_eq!(log.len(), 10_000);
    let first = replay(log.scan(0).unwrap(), &Default::default()).unwrap();
    let second = replay(log.scan(0).unwrap(), &Default::default()).unwrap();
    assert_same(&first, &second);
    assert_same(&first, &live);
    assert!(!first.dead_letters.is_empty());
    let ideation = first.track(TrackId::Ideation);
    assert_eq!(ideation.models["m6"].match_count, 0);
    assert_eq!(ideation.last_tick_seq, first.last_global_seq);
    assert!(first.last_global_seq > 0);
}

#[test]
fn crash_during_processing_then_recovery_matches_uninterrupted_run() {
    let stream = synthetic_stream(6_000, 5);
    let uninterrupted = run_inline(Box::new(MemoryLog::new()), &stream);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("events.jsonl");
    let clock = Arc::new(ManualClock::epoch());
    {
        let log = FileLog::open(&path, SyncPolicy::Batched { window: Duration::from_millis(2) }).unwrap();
        let config = PipelineConfig {
            sync_interval: Some(Duration::from_millis(2)),
            ..Default::default()
        };
        let svc = PipelineService::start(Box::new(log), config, clock.clone()).unwrap();
        for (ev, step) in &stream[..4_000] {
            clock.advance(*step);
            svc.enqueue(ev.clone()).unwrap();
        }
        svc.kill();
    }
    // Simulate a torn write of an unacknowledged record.
    {
        let mut f = std::fs::OpenOptions::new().append(true).open(&path).unwrap();
        f.write_all(br#"{"event_id":"half","kind":"vo"#).unwrap();
    }
    let log = FileLog::open(&path, SyncPolicy::EveryAppend).unwrap();
    assert_eq!(log.len(), 4_000);
    let mut p = Pipeline::open(Box::new(log), PipelineConfig::default(), clock.clone()).unwrap();
    // Retrying already-acknowledged events is harmless.
    for (ev, _) in &stream[3_990..4_000] {
        assert!(p.enqueue(ev.clone()).unwrap().duplicate);
    }
    for (ev, step) in &stream[4_000..] {
        clock.advance(*step);
        p.enqueue(ev.clone()).unwrap();
        p.run_until_idle().unwrap();
    }
    assert_same(&p.state(), &uninterrupted);
}

#[test]
fn replay_from_checkpoints_equals_replay_from_genesis() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("events.jsonl");
    let cps = dir.path().join("checkpoints");
    let stream = synthetic_stream(3_000, 23);
    let config = PipelineConfig {
        checkpoint_every: Some(250),
        checkpoint_dir: Some(cps.clone()),
        ..Default::default()
    };
    {
        let log = FileLog::open(&path, SyncPolicy::EveryAppend).unwrap();
        let clock = Arc::new(ManualClock::epoch());
        let mut p = Pipeline::open(Box::new(log), config.clone(), clock.clone()).unwrap();
        for (ev, step) in &stream {
            clock.advance(*step);
            p.enqueue(ev.clone()).unwrap();
            p.run_until_idle().unwrap();
        }
    }
    let store = arena_core::SnapshotStore::new(&cps).unwrap();
    assert!(!store.list(TrackId::Ideation).unwrap().is_empty());

    let log = FileLog::open(&path, SyncPolicy::EveryAppend).unwrap();
    let genesis = replay(log.scan(0).unwrap(), &Default::default()).unwrap();
    let from_cp = Pipeline::open(Box::new(log), config, Arc::new(ManualClock::epoch()))
        .unwrap()
        .state();
    assert_eq!(rating_bits(&genesis), rating_bits(&from_cp));
    assert_eq!(genesis.snapshot_versions(), from_cp.snapshot_versions());
    for t in TrackId::ALL {
        assert_eq!(*genesis.leaderboard.current(t), *from_cp.leaderboard.current(t));
    }
}

#[test]
fn replay_rejects_a_sequence_gap() {
    let stream = synthetic_stream(40, 3);
    let mut log = MemoryLog::new();
    {
        let clock = Arc::new(ManualClock::epoch());
        let mut p = Pipeline::open(Box::new(MemoryLog::new()), PipelineConfig::default(), clock).unwrap();
        for (ev, _) in &stream {
            p.enqueue(ev.clone()).unwrap();
        }
        let recs = p.log().scan(0).unwrap();
        for (i, r) in recs.iter().enumerate() {
            if i != 30 {
                log.append(r).unwrap();
            }
        }
    }
    let recs = log.scan(0).unwrap();
    let gap_track = recs[30].track;
    let err = replay(recs, &Default::default()).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("position"), "{msg}");
    assert!(gap_track.is_some());
}
