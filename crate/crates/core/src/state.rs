//! Per-track rating state, the fold that applies events to it, and replay.

use std::collections::{BTreeMap, HashSet};
use std::sync::Arc;

use chrono::Duration as ChronoDuration;
use parking_lot::RwLock;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::events::{ArenaEvent, EventBody, EventKind};
use crate::leaderboard::{Leaderboard, LeaderboardSnapshot};
use crate::persistence::{LogError, LogRecord, SnapshotStore};
use crate::provider::ProviderDescriptor;
use crate::rating::{apply_update, regress_toward_mean, PairHistory, RatingParams, RatingState, UpdateResult};
use crate::track::TrackId;

/// Rating parameters with optional per-track overrides.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ParamsByTrack {
    pub default: RatingParams,
    pub overrides: BTreeMap<TrackId, RatingParams>,
}

impl ParamsByTrack {
    pub fn uniform(params: RatingParams) -> Self {
        Self {
            default: params,
            overrides: BTreeMap::new(),
        }
    }

    pub fn get(&self, track: TrackId) -> RatingParams {
        self.overrides.get(&track).copied().unwrap_or(self.default)
    }

    pub fn validate(&self) -> Result<(), crate::rating::RatingError> {
        self.default.validate()?;
        self.overrides.values().try_for_each(RatingParams::validate)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackState {
    pub track: TrackId,
    pub params: RatingParams,
    pub models: BTreeMap<String, RatingState>,
    pub providers: BTreeMap<String, ProviderDescriptor>,
    pub pairs: PairHistory,
    /// Last applied track-scoped sequence number.
    pub last_seq: u64,
    /// Last applied regression tick (global sequence).
    pub last_tick_seq: u64,
    /// Log position of the last folded record.
    pub log_position: Option<u64>,
}

impl TrackState {
    pub fn new(track: TrackId, params: RatingParams) -> Self {
        Self {
            track,
            params,
            models: BTreeMap::new(),
            providers: BTreeMap::new(),
            pairs: PairHistory::new(),
            last_seq: 0,
            last_tick_seq: 0,
            log_position: None,
        }
    }

    pub fn rating(&self, model_id: &str) -> Option<f64> {
        self.models.get(model_id).map(|s| s.rating)
    }

    /// Arithmetic mean over all registered models, in id order.
    pub fn mean_rating(&self) -> Option<f64> {
        if self.models.is_empty() {
            return None;
        }
        let sum: f64 = self.models.values().map(|s| s.rating).sum();
        Some(sum / self.models.len() as f64)
    }

    /// Next sequence number this state expects for `kind`.
    pub fn expected_seq(&self, kind: EventKind) -> u64 {
        if kind.is_track_scoped() {
            self.last_seq + 1
        } else {
            self.last_tick_seq + 1
        }
    }

    /// Whether `event` was already folded into this state.
    pub fn covers(&self, event: &ArenaEvent) -> bool {
        event.seq < self.expected_seq(event.kind())
    }

    /// Applies one event. Sequence errors leave the state untouched; a
    /// rejected event advances the sequence but changes no ratings.
    pub fn apply(&mut self, event: &ArenaEvent) -> Result<Result<Change, String>, SequenceError> {
        if !event.applies_to(self.track) {
            return Err(SequenceError::WrongTrack {
                event_id: event.event_id.clone(),
                track: self.track,
            });
        }
        let expected = self.expected_seq(event.kind());
        if event.seq != expected {
            return Err(SequenceError::OutOfOrder {
                event_id: event.event_id.clone(),
                expected,
                got: event.seq,
            });
        }
        let result = match &event.body {
            EventBody::Vote(v) => {
                self.last_seq = event.seq;
                self.apply_vote(event, &v.model_a, &v.model_b, v.outcome)
            }
            EventBody::Registration(r) => {
                self.last_seq = event.seq;
                if self.models.contains_key(&r.model_id) {
                    Err(format!("model {} already registered", r.model_id))
                } else {
                    let mut st = RatingState::new(self.params.base_rating);
                    st.last_active_at = Some(event.enqueued_at);
                    self.models.insert(r.model_id.clone(), st);
                    self.providers.insert(r.model_id.clone(), r.provider.clone());
                    Ok(Change::Registered {
                        model_id: r.model_id.clone(),
                    })
                }
            }
            EventBody::RegressionTick => {
                self.last_tick_seq = event.seq;
                self.apply_tick(event)
            }
        };
        Ok(result)
    }

    fn apply_vote(
        &mut self,
        event: &ArenaEvent,
        model_a: &str,
        model_b: &str,
        outcome: crate::rating::Outcome,
    ) -> Result<Change, String> {
        if model_a == model_b {
            return Err(format!("model {model_a} cannot play itself"));
        }
        let (Some(a), Some(b)) = (self.models.get(model_a), self.models.get(model_b)) else {
            let missing = if self.models.contains_key(model_a) { model_b } else { model_a };
            return Err(format!("unknown model {missing} in track {}", self.track));
        };
        let n_ab = self.pairs.count(model_a, model_b);
        let update = apply_update(a, b, outcome, n_ab, &self.params).map_err(|e| e.to_string())?;
        for (id, rating) in [(model_a, update.new_rating_a), (model_b, update.new_rating_b)] {
            let st = self.models.get_mut(id).expect("checked above");
            st.rating = rating;
            st.match_count += 1;
            st.last_match_seq = Some(event.seq);
            st.last_active_at = Some(event.enqueued_at);
        }
        self.pairs.increment(model_a, model_b);
        Ok(Change::Vote {
            model_a: model_a.to_owned(),
            model_b: model_b.to_owned(),
            update,
        })
    }

    fn apply_tick(&mut self, event: &ArenaEvent) -> Result<Change, String> {
        let Some(mean) = self.mean_rating() else {
            return Ok(Change::Regressed {
                mean: None,
                models: Vec::new(),
            });
        };
        let threshold = ChronoDuration::from_std(self.params.inactivity_threshold)
            .map_err(|e| e.to_string())?;
        let lambda = self.params.regression_lambda;
        let mut moved = Vec::new();
        for (id, st) in self.models.iter_mut() {
            let inactive = st
                .last_active_at
                .is_none_or(|t| event.enqueued_at - t > threshold);
            if !inactive {
                continue;
            }
            let old = st.rating;
            st.rating = regress_toward_mean(old, mean, lambda).map_err(|e| e.to_string())?;
            moved.push(RegressedModel {
                model_id: id.clone(),
                old_rating: old,
                new_rating: st.rating,
            });
        }
        Ok(Change::Regressed {
            mean: Some(mean),
            models: moved,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SequenceError {
    #[error("event {event_id}: expected seq {expected}, got {got}")]
    OutOfOrder {
        event_id: String,
        expected: u64,
        got: u64,
    },
    #[error("event {event_id} does not belong to track {track}")]
    WrongTrack { event_id: String, track: TrackId },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegressedModel {
    pub model_id: String,
    pub old_rating: f64,
    pub new_rating: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Change {
    Vote {
        model_a: String,
        model_b: String,
        update: UpdateResult,
    },
    Registered {
        model_id: String,
    },
    Regressed {
        mean: Option<f64>,
        models: Vec<RegressedModel>,
    },
}

/// An event that was sequenced but could not be applied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeadLetter {
    pub event_id: String,
    pub track: TrackId,
    pub kind: EventKind,
    pub seq: u64,
    pub reason: String,
}

/// What the worker did with one event.
#[derive(Debug, Clone)]
pub struct Processed {
    pub track: TrackId,
    pub event_id: String,
    pub seq: u64,
    pub result: Result<Change, DeadLetter>,
    pub snapshot: Arc<LeaderboardSnapshot>,
}

/// Models and pair counts of one track, readable while the worker runs.
/// Used for pairing; not part of the replayed state.
#[derive(Debug, Default)]
pub struct TrackView {
    roster: RwLock<Arc<BTreeMap<String, ProviderDescriptor>>>,
    pairs: RwLock<PairHistory>,
}

impl TrackView {
    pub fn roster(&self) -> Arc<BTreeMap<String, ProviderDescriptor>> {
        self.roster.read().clone()
    }

    pub fn pair_count(&self, a: &str, b: &str) -> u64 {
        self.pairs.read().count(a, b)
    }

    pub fn pairs(&self) -> PairHistory {
        self.pairs.read().clone()
    }

    /// Runs `f` under one read lock of the pair history.
    pub fn with_pairs<T>(&self, f: impl FnOnce(&PairHistory) -> T) -> T {
        f(&self.pairs.read())
    }

    fn reset(&self, state: &TrackState) {
        *self.roster.write() = Arc::new(state.providers.clone());
        *self.pairs.write() = state.pairs.clone();
    }
}

pub type Views = BTreeMap<TrackId, Arc<TrackView>>;

pub fn new_views() -> Views {
    TrackId::ALL
        .into_iter()
        .map(|t| (t, Arc::new(TrackView::default())))
        .collect()
}

/// Persisted per-track checkpoint: full state plus the last snapshot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackCheckpoint {
    pub state: TrackState,
    pub snapshot: LeaderboardSnapshot,
}

/// Owns one track's state and publishes a snapshot after every event.
#[derive(Debug)]
pub struct TrackEngine {
    state: TrackState,
    board: Arc<Leaderboard>,
    view: Arc<TrackView>,
}

impl TrackEngine {
    pub fn new(state: TrackState, board: Arc<Leaderboard>, view: Arc<TrackView>) -> Self {
        view.reset(&state);
        Self { state, board, view }
    }

    pub fn restore(checkpoint: TrackCheckpoint, board: Arc<Leaderboard>, view: Arc<TrackView>) -> Self {
        board.restore(checkpoint.snapshot);
        Self::new(checkpoint.state, board, view)
    }

    pub fn state(&self) -> &TrackState {
        &self.state
    }

    pub fn into_state(self) -> TrackState {
        self.state
    }

    pub fn checkpoint(&self) -> TrackCheckpoint {
        TrackCheckpoint {
            state: self.state.clone(),
            snapshot: (*self.board.current(self.state.track)).clone(),
        }
    }

    pub fn handle(&mut self, event: &ArenaEvent, position: u64) -> Result<Processed, SequenceError> {
        let result = self.state.apply(event)?;
        self.state.log_position = Some(position);
        let track = self.state.track;
        let result = result.map_err(|reason| {
            tracing::warn!(event_id = %event.event_id, %track, "dead-lettered event: {reason}");
            DeadLetter {
                event_id: event.event_id.clone(),
                track,
                kind: event.kind(),
                seq: event.seq,
                reason,
            }
        });
        match &result {
            Ok(Change::Vote { model_a, model_b, .. }) => {
                self.view.pairs.write().increment(model_a, model_b);
            }
            Ok(Change::Registered { .. }) => {
                *self.view.roster.write() = Arc::new(self.state.providers.clone());
            }
            _ => {}
        }
        let snapshot = self
            .board
            .publish(track, &self.state.models, &self.state.params, self.state.last_seq);
        Ok(Processed {
            track,
            event_id: event.event_id.clone(),
            seq: event.seq,
            result,
            snapshot,
        })
    }
}

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error("log corrupted at position {position}: {message}")]
    Corruption { position: u64, message: String },
    #[error(transparent)]
    Log(#[from] LogError),
}

/// Everything rebuilt from the log.
#[derive(Debug, Clone)]
pub struct ArenaState {
    pub tracks: BTreeMap<TrackId, TrackState>,
    pub leaderboard: Arc<Leaderboard>,
    pub dead_letters: Vec<DeadLetter>,
    pub last_global_seq: u64,
}

impl ArenaState {
    pub fn track(&self, track: TrackId) -> &TrackState {
        &self.tracks[&track]
    }

    pub fn snapshot_versions(&self) -> BTreeMap<TrackId, u64> {
        TrackId::ALL
            .into_iter()
            .map(|t| (t, self.leaderboard.current(t).version))
            .collect()
    }
}

/// Incremental fold of log records into track engines.
#[derive(Debug)]
pub struct Replayer {
    engines: BTreeMap<TrackId, TrackEngine>,
    board: Arc<Leaderboard>,
    views: Views,
    dead_letters: Vec<DeadLetter>,
    seen: HashSet<String>,
    last_global_seq: u64,
}

impl Replayer {
    pub fn new(params: &ParamsByTrack, board: Arc<Leaderboard>, views: Views) -> Self {
        let engines = TrackId::ALL
            .into_iter()
            .map(|t| {
                let state = TrackState::new(t, params.get(t));
                (t, TrackEngine::new(state, board.clone(), views[&t].clone()))
            })
            .collect();
        Self {
            engines,
            board,
            views,
            dead_letters: Vec::new(),
            seen: HashSet::new(),
            last_global_seq: 0,
        }
    }

    /// Starts each track from its newest stored checkpoint, if any.
    /// Records already covered by a checkpoint are skipped during the fold.
    pub fn with_checkpoints(mut self, store: &SnapshotStore) -> Result<Self, ReplayError> {
        for t in TrackId::ALL {
            if let Some((_, cp)) = store.load_latest::<TrackCheckpoint>(t)? {
                let engine = TrackEngine::restore(cp, self.board.clone(), self.views[&t].clone());
                self.engines.insert(t, engine);
            }
        }
        Ok(self)
    }

    pub fn apply_record(&mut self, position: u64, record: &LogRecord) -> Result<Vec<Processed>, ReplayError> {
        let corrupt = |message: String| ReplayError::Corruption { position, message };
        let event = record.to_event().map_err(|e| corrupt(e.to_string()))?;
        self.apply_event(position, &event)
    }

    pub fn apply_event(&mut self, position: u64, event: &ArenaEvent) -> Result<Vec<Processed>, ReplayError> {
        let corrupt = |message: String| ReplayError::Corruption { position, message };
        if !self.seen.insert(event.event_id.clone()) {
            return Err(corrupt(format!("duplicate event_id {}", event.event_id)));
        }
        if event.kind() == EventKind::RegressionTick {
            if event.seq != self.last_global_seq + 1 {
                return Err(corrupt(format!(
                    "regression tick seq {} follows {}",
                    event.seq, self.last_global_seq
                )));
            }
            self.last_global_seq = event.seq;
        }
        let mut out = Vec::new();
        for (track, engine) in self.engines.iter_mut() {
            if !event.applies_to(*track) || engine.state().covers(event) {
                continue;
            }
            let processed = engine
                .handle(event, position)
                .map_err(|e| corrupt(e.to_string()))?;
            if let Err(dl) = &processed.result {
                self.dead_letters.push(dl.clone());
            }
            out.push(processed);
        }
        Ok(out)
    }

    pub fn into_parts(self) -> (BTreeMap<TrackId, TrackEngine>, Vec<DeadLetter>) {
        (self.engines, self.dead_letters)
    }

    pub fn finish(self) -> ArenaState {
        ArenaState {
            tracks: self
                .engines
                .into_iter()
                .map(|(t, e)| (t, e.into_state()))
                .collect(),
            leaderboard: self.board,
            dead_letters: self.dead_letters,
            last_global_seq: self.last_global_seq,
        }
    }
}

/// Rebuilds arena state by folding `records` (starting at log position 0)
/// in order.
pub fn replay<I>(records: I, params: &ParamsByTrack) -> Result<ArenaState, ReplayError>
where
    I: IntoIterator<Item = LogRecord>,
{
    let mut r = Replayer::new(params, Arc::new(Leaderboard::default()), new_views());
    for (pos, rec) in records.into_iter().enumerate() {
        r.apply_record(pos as u64, &rec)?;
    }
    Ok(r.finish())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::events::{RegistrationPayload, VotePayload};
    use crate::rating::Outcome;
    use chrono::{DateTime, Utc};

    fn t0() -> DateTime<Utc> {
        "2026-01-01T00:00:00Z".parse().unwrap()
    }

    fn reg(seq: u64, model: &str) -> ArenaEvent {
        ArenaEvent {
            event_id: format!("reg-{model}"),
            track: Some(TrackId::Ideation),
            seq,
            enqueued_at: t0(),
            body: EventBody::Registration(RegistrationPayload {
                model_id: model.into(),
                provider: ProviderDescriptor::placeholder(),
            }),
        }
    }

    fn vote(seq: u64, a: &str, b: &str, outcome: Outcome) -> ArenaEvent {
        ArenaEvent {
            event_id: format!("vote-{seq}"),
            track: Some(TrackId::Ideation),
            seq,
            enqueued_at: t0(),
            body: EventBody::Vote(VotePayload {
                battle_id: format!("b{seq}"),
                model_a: a.into(),
                model_b: b.into(),
                outcome,
                voter_id: "u".into(),
                submitted_at: t0(),
            }),
        }
    }

    fn tick(seq: u64, days: i64) -> ArenaEvent {
        ArenaEvent {
            event_id: format!("tick-{seq}"),
            track: None,
            seq,
            enqueued_at: t0() + ChronoDuration::days(days),
            body: EventBody::RegressionTick,
        }
    }

    fn plain() -> TrackState {
        TrackState::new(TrackId::Ideation, RatingParams::plain(32.0))
    }

    #[test]
    fn registration_then_vote() {
        let mut s = plain();
        s.apply(&reg(1, "a")).unwrap().unwrap();
        s.apply(&reg(2, "b")).unwrap().unwrap();
        assert_eq!(s.rating("a"), Some(1000.0));
        s.apply(&vote(3, "a", "b", Outcome::WIN)).unwrap().unwrap();
        assert_eq!(s.rating("a"), Some(1016.0));
        assert_eq!(s.rating("b"), Some(984.0));
        assert_eq!(s.pairs.count("a", "b"), 1);
        assert_eq!(s.models["a"].match_count, 1);
        assert_eq!(s.models["b"].last_match_seq, Some(3));
    }

    #[test]
    fn unknown_model_is_rejected_without_side_effects() {
        let mut s = plain();
        s.apply(&reg(1, "a")).unwrap().unwrap();
        let before = s.models.clone();
        let err = s.apply(&vote(2, "a", "ghost", Outcome::WIN)).unwrap().unwrap_err();
        assert!(err.contains("ghost"));
        assert_eq!(s.models, before);
        assert_eq!(s.last_seq, 2);
        assert!(s.pairs.is_empty());
    }

    #[test]
    fn duplicate_registration_is_rejected() {
        let mut s = plain();
        s.apply(&reg(1, "a")).unwrap().unwrap();
        let mut again = reg(2, "a");
        again.event_id = "other".into();
        assert!(s.apply(&again).unwrap().is_err());
    }

    #[test]
    fn out_of_order_seq_is_a_sequence_error() {
        let mut s = plain();
        assert!(matches!(
            s.apply(&reg(2, "a")),
            Err(SequenceError::OutOfOrder { expected: 1, got: 2, .. })
        ));
        assert_eq!(s.last_seq, 0);
    }

    #[test]
    fn tick_regresses_only_inactive_models() {
        let params = RatingParams {
            regression_lambda: 0.1,
            ..RatingParams::plain(32.0)
        };
        let mut s = TrackState::new(TrackId::Ideation, params);
        s.apply(&reg(1, "a")).unwrap().unwrap();
        s.apply(&reg(2, "b")).unwrap().unwrap();
        s.apply(&vote(3, "a", "b", Outcome::WIN)).unwrap().unwrap();
        // 10 days: nobody is inactive yet.
        let change = s.apply(&tick(1, 10)).unwrap().unwrap();
        assert_eq!(
            change,
            Change::Regressed {
                mean: Some(1000.0),
                models: vec![]
            }
        );
        // Make "a" active at day 20 by hand, then tick at day 30.
        s.models.get_mut("a").unwrap().last_active_at = Some(t0() + ChronoDuration::days(20));
        let Change::Regressed { mean, models } = s.apply(&tick(2, 30)).unwrap().unwrap() else {
            panic!()
        };
        assert_eq!(mean, Some(1000.0));
        assert_eq!(models.len(), 1);
        assert_eq!(models[0].model_id, "b");
        assert!((s.rating("b").unwrap() - (984.0 + 0.1 * 16.0)).abs() < 1e-12);
        assert_eq!(s.rating("a"), Some(1016.0));
        assert_eq!(s.last_tick_seq, 2);
        assert_eq!(s.last_seq, 3);
    }

    #[test]
    fn tick_on_empty_track() {
        let mut s = plain();
        assert!(matches!(
            s.apply(&tick(1, 100)).unwrap().unwrap(),
            Change::Regressed { mean: None, .. }
        ));
    }

    #[test]
    fn engine_publishes_every_event() {
        let board = Arc::new(Leaderboard::default());
        let views = new_views();
        let mut e = TrackEngine::new(plain(), board.clone(), views[&TrackId::Ideation].clone());
        e.handle(&reg(1, "a"), 0).unwrap();
        e.handle(&reg(2, "b"), 1).unwrap();
        let p = e.handle(&vote(3, "a", "ghost", Outcome::WIN), 2).unwrap();
        assert!(p.result.is_err());
        assert_eq!(p.snapshot.version, 3);
        let p = e.handle(&vote(4, "a", "b", Outcome::WIN), 3).unwrap();
        assert_eq!(p.snapshot.version, 4);
        assert_eq!(p.snapshot.produced_by_seq, 4);
        assert_eq!(p.snapshot.rows[0].model_id, "a");
        let p = e.handle(&tick(1, 1), 4).unwrap();
        assert_eq!(p.snapshot.version, 5);
        assert_eq!(p.snapshot.produced_by_seq, 4);
        let view = &views[&TrackId::Ideation];
        assert_eq!(view.roster().len(), 2);
        assert_eq!(view.pair_count("b", "a"), 1);
    }

    #[test]
    fn replay_detects_gaps_and_duplicates() {
        let params = ParamsByTrack::default();
        let recs = |evs: &[ArenaEvent]| evs.iter().map(LogRecord::from_event).collect::<Vec<_>>();
        let ok = replay(recs(&[reg(1, "a"), reg(2, "b")]), &params).unwrap();
        assert_eq!(ok.track(TrackId::Ideation).models.len(), 2);

        match replay(recs(&[reg(1, "a"), reg(3, "b")]), &params) {
            Err(ReplayError::Corruption { position, .. }) => assert_eq!(position, 1),
            other => panic!("{other:?}"),
        }
        let mut dup = reg(2, "b");
        dup.event_id = "reg-a".into();
        assert!(matches!(
            replay(recs(&[reg(1, "a"), dup]), &params),
            Err(ReplayError::Corruption { position: 1, .. })
        ));
        assert!(matches!(
            replay(recs(&[tick(2, 1)]), &params),
            Err(ReplayError::Corruption { position: 0, .. })
        ));
    }

    #[test]
    fn replay_of_empty_log() {
        let s = replay(Vec::new(), &ParamsByTrack::default()).unwrap();
        assert!(s.tracks.values().all(|t| t.models.is_empty()));
        assert!(s.snapshot_versions().values().all(|&v| v == 0));
    }

    #[test]
    fn checkpoint_round_trips_through_json() {
        let mut s = plain();
        s.apply(&reg(1, "a")).unwrap().unwrap();
        let cp = TrackCheckpoint {
            state: s,
            snapshot: LeaderboardSnapshot::empty(TrackId::Ideation),
        };
        let json = serde_json::to_string(&cp).unwrap();
        assert_eq!(serde_json::from_str::<TrackCheckpoint>(&json).unwrap(), cp);
    }
}
