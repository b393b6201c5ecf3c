//! Immutable, versioned per-track rankings.

use std::cmp::Ordering;
use std::collections::{BTreeMap, VecDeque};
use std::sync::Arc;

use parking_lot::RwLock;
use serde::{Deserialize, Serialize};

use crate::rating::{is_cold_start, RatingParams, RatingState};
use crate::track::TrackId;

pub const DEFAULT_RETENTION: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeaderboardRow {
    pub rank: u32,
    pub model_id: String,
    pub rating: f64,
    pub match_count: u64,
    pub is_cold_start: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeaderboardSnapshot {
    pub track: TrackId,
    pub version: u64,
    pub produced_by_seq: u64,
    pub rows: Vec<LeaderboardRow>,
}

impl LeaderboardSnapshot {
    pub fn empty(track: TrackId) -> Self {
        Self {
            track,
            version: 0,
            produced_by_seq: 0,
            rows: Vec::new(),
        }
    }

    pub fn row(&self, model_id: &str) -> Option<&LeaderboardRow> {
        self.rows.iter().find(|r| r.model_id == model_id)
    }

    pub fn rating(&self, model_id: &str) -> Option<f64> {
        self.row(model_id).map(|r| r.rating)
    }
}

/// Rating desc, then match count desc, then model id asc.
fn rank_order(a: (&String, &RatingState), b: (&String, &RatingState)) -> Ordering {
    b.1.rating
        .total_cmp(&a.1.rating)
        .then(b.1.match_count.cmp(&a.1.match_count))
        .then_with(|| a.0.cmp(b.0))
}

/// Builds sorted rows from the states of one track.
pub fn rank_rows(states: &BTreeMap<String, RatingState>, params: &RatingParams) -> Vec<LeaderboardRow> {
    let mut entries: Vec<_> = states.iter().collect();
    entries.sort_by(|a, b| rank_order(*a, *b));
    entries
        .into_iter()
        .enumerate()
        .map(|(i, (id, s))| LeaderboardRow {
            rank: i as u32 + 1,
            model_id: id.clone(),
            rating: s.rating,
            match_count: s.match_count,
            is_cold_start: is_cold_start(s, params),
        })
        .collect()
}

#[derive(Debug)]
struct History {
    snapshots: VecDeque<Arc<LeaderboardSnapshot>>,
}

/// All six track leaderboards. One writer per track, any number of readers.
#[derive(Debug)]
pub struct Leaderboard {
    tracks: BTreeMap<TrackId, RwLock<History>>,
    retention: usize,
}

impl Default for Leaderboard {
    fn default() -> Self {
        Self::new(DEFAULT_RETENTION)
    }
}

impl Leaderboard {
    pub fn new(retention: usize) -> Self {
        let retention = retention.max(1);
        let tracks = TrackId::ALL
            .into_iter()
            .map(|t| {
                let mut snapshots = VecDeque::with_capacity(retention);
                snapshots.push_back(Arc::new(LeaderboardSnapshot::empty(t)));
                (t, RwLock::new(History { snapshots }))
            })
            .collect();
        Self { tracks, retention }
    }

    fn history(&self, track: TrackId) -> &RwLock<History> {
        &self.tracks[&track]
    }

    /// Publishes the next version for `track`.
    pub fn publish(
        &self,
        track: TrackId,
        states: &BTreeMap<String, RatingState>,
        params: &RatingParams,
        seq: u64,
    ) -> Arc<LeaderboardSnapshot> {
        let rows = rank_rows(states, params);
        let mut h = self.history(track).write();
        let version = h.snapshots.back().map_or(0, |s| s.version) + 1;
        let snap = Arc::new(LeaderboardSnapshot {
            track,
            version,
            produced_by_seq: seq,
            rows,
        });
        if h.snapshots.len() == self.retention {
            h.snapshots.pop_front();
        }
        h.snapshots.push_back(snap.clone());
        snap
    }

    /// Installs a snapshot restored from storage as the current version.
    pub fn restore(&self, snapshot: LeaderboardSnapshot) {
        let mut h = self.history(snapshot.track).write();
        h.snapshots.clear();
        h.snapshots.push_back(Arc::new(snapshot));
    }

    pub fn current(&self, track: TrackId) -> Arc<LeaderboardSnapshot> {
        let h = self.history(track).read();
        h.snapshots.back().cloned().expect("history is never empty")
    }

    /// A retained older version, if still in memory.
    pub fn version(&self, track: TrackId, version: u64) -> Option<Arc<LeaderboardSnapshot>> {
        let h = self.history(track).read();
        h.snapshots.iter().find(|s| s.version == version).cloned()
    }

    pub fn retained(&self, track: TrackId) -> usize {
        self.history(track).read().snapshots.len()
    }
}
