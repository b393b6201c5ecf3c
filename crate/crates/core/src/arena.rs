//! Battles: pairing, anonymized presentation and turning votes into events.

use std::collections::{BTreeSet, HashMap};
use std::sync::Arc;
use std::time::Duration;

use chrono::{DateTime, Utc};
use parking_lot::Mutex;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::Clock;
use crate::events::{NewEvent, VoteEvent, VotePayload};
use crate::pipeline::{Ack, Pipeline, PipelineError, PipelineService};
use crate::provider::{ProviderDescriptor, ProviderError, ProviderGateway};
use crate::rating::Outcome;
use crate::state::TrackView;
use crate::track::TrackId;

#[derive(Debug, Error)]
pub enum ArenaError {
    #[error("track {track} has {models} registered model(s); at least 2 are needed")]
    NotReady { track: TrackId, models: usize },
    #[error("validation failed: {0}")]
    Validation(String),
    #[error("{0} not found")]
    NotFound(String),
    #[error("conflict: {0}")]
    Conflict(String),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Provider(#[from] ProviderError),
}

/// Where the arena sends events and reads rosters from.
pub trait ArenaBackend: Send + Sync {
    fn submit(&self, event: NewEvent) -> Result<Ack, PipelineError>;
    fn view(&self, track: TrackId) -> Arc<TrackView>;
    /// Blocks until `track` has applied `seq`. False on timeout.
    fn wait_applied(&self, _track: TrackId, _seq: u64, _timeout: Duration) -> bool {
        true
    }
}

/// Applies every event synchronously on submit. Deterministic.
pub struct InlineBackend {
    pipeline: Mutex<Pipeline>,
}

impl InlineBackend {
    pub fn new(pipeline: Pipeline) -> Self {
        Self {
            pipeline: Mutex::new(pipeline),
        }
    }

    pub fn with<T>(&self, f: impl FnOnce(&mut Pipeline) -> T) -> T {
        f(&mut self.pipeline.lock())
    }

    pub fn into_inner(self) -> Pipeline {
        self.pipeline.into_inner()
    }
}

impl ArenaBackend for InlineBackend {
    fn submit(&self, event: NewEvent) -> Result<Ack, PipelineError> {
        let mut p = self.pipeline.lock();
        let ack = p.enqueue(event)?;
        match ack.track {
            Some(t) => p.run_track(t)?,
            None => p.run_until_idle()?,
        };
        Ok(ack)
    }

    fn view(&self, track: TrackId) -> Arc<TrackView> {
        self.pipeline.lock().view(track)
    }
}

impl ArenaBackend for PipelineService {
    fn submit(&self, event: NewEvent) -> Result<Ack, PipelineError> {
        self.try_enqueue(event)
    }

    fn view(&self, track: TrackId) -> Arc<TrackView> {
        PipelineService::view(self, track)
    }

    fn wait_applied(&self, track: TrackId, seq: u64, timeout: Duration) -> bool {
        self.wait_for_seq(track, seq, timeout).is_some()
    }
}

impl<B: ArenaBackend + ?Sized> ArenaBackend for Arc<B> {
    fn submit(&self, event: NewEvent) -> Result<Ack, PipelineError> {
        (**self).submit(event)
    }

    fn view(&self, track: TrackId) -> Arc<TrackView> {
        (**self).view(track)
    }

    fn wait_applied(&self, track: TrackId, seq: u64, timeout: Duration) -> bool {
        (**self).wait_applied(track, seq, timeout)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BattleStatus {
    PendingResponses,
    AwaitingVote,
    Voted,
    Expired,
}

impl BattleStatus {
    pub fn is_terminal(self) -> bool {
        matches!(self, BattleStatus::Voted | BattleStatus::Expired)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Choice {
    Left,
    Right,
    Tie,
}

/// Internal battle record. Never hand this to a voter; use [`BattleView`].
#[derive(Debug, Clone, PartialEq)]
pub struct Battle {
    pub battle_id: String,
    pub track: TrackId,
    pub prompt: String,
    pub candidate_left: String,
    pub candidate_right: String,
    pub response_left: Option<String>,
    pub response_right: Option<String>,
    pub created_at: DateTime<Utc>,
    pub status: BattleStatus,
    pub vote: Option<VoteEvent>,
}

impl Battle {
    /// Voter-facing representation. Identities appear only once voted.
    pub fn view(&self) -> BattleView {
        let revealed = self.status == BattleStatus::Voted;
        BattleView {
            battle_id: self.battle_id.clone(),
            track: self.track,
            prompt: self.prompt.clone(),
            status: self.status,
            created_at: self.created_at,
            response_left: self.response_left.clone(),
            response_right: self.response_right.clone(),
            model_left: revealed.then(|| self.candidate_left.clone()),
            model_right: revealed.then(|| self.candidate_right.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BattleView {
    pub battle_id: String,
    pub track: TrackId,
    pub prompt: String,
    pub status: BattleStatus,
    pub created_at: DateTime<Utc>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub response_left: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub response_right: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model_left: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model_right: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VoteReceipt {
    pub event: VoteEvent,
    pub model_left: String,
    pub model_right: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Registration {
    pub model_id: String,
    pub tracks: Vec<TrackId>,
    pub acks: Vec<Ack>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArenaConfig {
    pub tie_enabled: bool,
    #[serde(with = "secs")]
    pub battle_ttl: Duration,
}

impl Default for ArenaConfig {
    fn default() -> Self {
        Self {
            tie_enabled: false,
            battle_ttl: Duration::from_secs(24 * 3600),
        }
    }
}

mod secs {
    use std::time::Duration;

    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_secs())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        u64::deserialize(d).map(Duration::from_secs)
    }
}

/// Picks an unordered pair from `models` with weight `1 / (1 + n_ab)`.
/// Returns indices `(i, j)` with `i < j`.
pub fn select_pair<R: Rng + ?Sized>(
    models: &[&str],
    pair_count: impl Fn(&str, &str) -> u64,
    rng: &mut R,
) -> Option<(usize, usize)> {
    if models.len() < 2 {
        return None;
    }
    let mut pairs = Vec::with_capacity(models.len() * (models.len() - 1) / 2);
    let mut weights = Vec::with_capacity(pairs.capacity());
    for i in 0..models.len() {
        for j in i + 1..models.len() {
            pairs.push((i, j));
            weights.push(1.0 / (1.0 + pair_count(models[i], models[j]) as f64));
        }
    }
    let dist = WeightedIndex::new(&weights).expect("weights are positive and finite");
    Some(pairs[dist.sample(rng)])
}

fn battle_id_from(rng: &mut impl RngCore) -> String {
    let mut bytes = [0u8; 16];
    rng.fill_bytes(&mut bytes);
    uuid::Builder::from_random_bytes(bytes).into_uuid().to_string()
}

const REGISTRATION_WAIT: Duration = Duration::from_secs(5);

pub struct Arena<B> {
    backend: B,
    battles: Mutex<HashMap<String, Arc<Mutex<Battle>>>>,
    registry: Mutex<BTreeSet<String>>,
    config: ArenaConfig,
    clock: Arc<dyn Clock>,
}

impl<B: ArenaBackend> Arena<B> {
    pub fn new(backend: B, config: ArenaConfig, clock: Arc<dyn Clock>) -> Self {
        let registry = TrackId::ALL
            .into_iter()
            .flat_map(|t| backend.view(t).roster().keys().cloned().collect::<Vec<_>>())
            .collect();
        Self {
            backend,
            battles: Mutex::new(HashMap::new()),
            registry: Mutex::new(registry),
            config,
            clock,
        }
    }

    pub fn backend(&self) -> &B {
        &self.backend
    }

    pub fn config(&self) -> &ArenaConfig {
        &self.config
    }

    pub fn register_model(
        &self,
        model_id: &str,
        tracks: &[TrackId],
        provider: ProviderDescriptor,
    ) -> Result<Registration, ArenaError> {
        if model_id.trim().is_empty() {
            return Err(ArenaError::Validation("model_id must be nonempty".into()));
        }
        let tracks: Vec<TrackId> = tracks.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
        if tracks.is_empty() {
            return Err(ArenaError::Validation("at least one track is required".into()));
        }
        provider
            .validate()
            .map_err(|e| ArenaError::Validation(e.to_string()))?;
        let mut registry = self.registry.lock();
        if registry.contains(model_id) {
            return Err(ArenaError::Conflict(format!("model {model_id} already registered")));
        }
        let mut acks = Vec::with_capacity(tracks.len());
        for &t in &tracks {
            let ack = self
                .backend
                .submit(NewEvent::registration(t, model_id, provider.clone()))?;
            if ack.duplicate {
                return Err(ArenaError::Conflict(format!("model {model_id} already registered")));
            }
            acks.push(ack);
        }
        registry.insert(model_id.to_owned());
        drop(registry);
        // Registration is rare; waiting here means a battle created right
        // after the call already sees the new model.
        for ack in &acks {
            if let Some(t) = ack.track {
                if !self.backend.wait_applied(t, ack.seq, REGISTRATION_WAIT) {
                    tracing::warn!(model_id, track = %t, "registration acknowledged but not yet applied");
                }
            }
        }
        Ok(Registration {
            model_id: model_id.to_owned(),
            tracks,
            acks,
        })
    }

    pub fn is_registered(&self, model_id: &str) -> bool {
        self.registry.lock().contains(model_id)
    }

    /// Pairs two models of `track` for `prompt`. The battle starts in
    /// `pending_responses`; responses are attached separately.
    pub fn create_battle(&self, track: TrackId, prompt: &str, pairing_seed: u64) -> Result<Battle, ArenaError> {
        self.create_battle_among(track, prompt, pairing_seed, |_| true)
    }

    /// Like [`Arena::create_battle`], but only pairs models accepted by
    /// `eligible` (e.g. to leave out a model whose provider is offline).
    pub fn create_battle_among(
        &self,
        track: TrackId,
        prompt: &str,
        pairing_seed: u64,
        eligible: impl Fn(&str) -> bool,
    ) -> Result<Battle, ArenaError> {
        if prompt.trim().is_empty() {
            return Err(ArenaError::Validation("prompt must be nonempty".into()));
        }
        let view = self.backend.view(track);
        let roster = view.roster();
        let models: Vec<&str> = roster.keys().map(String::as_str).filter(|m| eligible(m)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(pairing_seed);
        let picked = view.with_pairs(|h| select_pair(&models, |a, b| h.count(a, b), &mut rng));
        let (i, j) = picked.ok_or(
            ArenaError::NotReady {
                track,
                models: models.len(),
            },
        )?;
        let (left, right) = if rng.random::<bool>() { (j, i) } else { (i, j) };
        let battle = Battle {
            battle_id: battle_id_from(&mut rng),
            track,
            prompt: prompt.to_owned(),
            candidate_left: models[left].to_owned(),
            candidate_right: models[right].to_owned(),
            response_left: None,
            response_right: None,
            created_at: self.clock.now(),
            status: BattleStatus::PendingResponses,
            vote: None,
        };
        self.battles
            .lock()
            .insert(battle.battle_id.clone(), Arc::new(Mutex::new(battle.clone())));
        Ok(battle)
    }

    fn slot(&self, battle_id: &str) -> Result<Arc<Mutex<Battle>>, ArenaError> {
        self.battles
            .lock()
            .get(battle_id)
            .cloned()
            .ok_or_else(|| ArenaError::NotFound(format!("battle {battle_id}")))
    }

    pub fn battle(&self, battle_id: &str) -> Result<Battle, ArenaError> {
        let slot = self.slot(battle_id)?;
        let mut b = slot.lock();
        self.expire_if_stale(&mut b);
        Ok(b.clone())
    }

    fn is_stale(&self, battle: &Battle) -> bool {
        let ttl = chrono::Duration::from_std(self.config.battle_ttl).unwrap_or(chrono::Duration::MAX);
        self.clock.now() - battle.created_at > ttl
    }

    fn expire_if_stale(&self, battle: &mut Battle) {
        if !battle.status.is_terminal() && self.is_stale(battle) {
            battle.status = BattleStatus::Expired;
        }
    }

    pub fn attach_responses(&self, battle_id: &str, left: String, right: String) -> Result<Battle, ArenaError> {
        let slot = self.slot(battle_id)?;
        let mut b = slot.lock();
        self.expire_if_stale(&mut b);
        if b.status != BattleStatus::PendingResponses {
            return Err(ArenaError::Conflict(format!(
                "battle {battle_id} is {:?}, not pending responses",
                b.status
            )));
        }
        b.response_left = Some(left);
        b.response_right = Some(right);
        b.status = BattleStatus::AwaitingVote;
        Ok(b.clone())
    }

    /// Marks a battle expired. Voted battles are final and stay voted.
    pub fn expire(&self, battle_id: &str) -> Result<Battle, ArenaError> {
        let slot = self.slot(battle_id)?;
        let mut b = slot.lock();
        if b.status == BattleStatus::Voted {
            return Err(ArenaError::Conflict(format!("battle {battle_id} already voted")));
        }
        b.status = BattleStatus::Expired;
        Ok(b.clone())
    }

    /// Expires battles past their TTL and forgets terminal battles older
    /// than twice the TTL. Returns how many were expired.
    pub fn expire_stale(&self) -> usize {
        let ttl2 = chrono::Duration::from_std(self.config.battle_ttl * 2).unwrap_or(chrono::Duration::MAX);
        let now = self.clock.now();
        let mut expired = 0;
        self.battles.lock().retain(|_, slot| {
            let mut b = slot.lock();
            if !b.status.is_terminal() && self.is_stale(&b) {
                b.status = BattleStatus::Expired;
                expired += 1;
            }
            !(b.status.is_terminal() && now - b.created_at > ttl2)
        });
        expired
    }

    pub fn battle_count(&self) -> usize {
        self.battles.lock().len()
    }

    /// Fetches both candidate responses and moves the battle to
    /// `awaiting_vote`. On provider failure the battle expires.
    pub async fn fill_responses(
        &self,
        battle_id: &str,
        gateway: &ProviderGateway,
        deadline: Duration,
    ) -> Result<Battle, ArenaError> {
        let battle = self.battle(battle_id)?;
        let roster = self.backend.view(battle.track).roster();
        let descriptor = |id: &str| {
            roster
                .get(id)
                .cloned()
                .ok_or_else(|| ArenaError::NotFound(format!("model {id}")))
        };
        let left = descriptor(&battle.candidate_left)?;
        let right = descriptor(&battle.candidate_right)?;
        let fetched = gateway
            .fetch_pair(
                (&battle.candidate_left, &left),
                (&battle.candidate_right, &right),
                battle.track,
                &battle.prompt,
                deadline,
            )
            .await;
        match fetched {
            Ok((l, r)) => self.attach_responses(battle_id, l, r),
            Err(e) => {
                tracing::warn!(battle_id, "provider failure, expiring battle: {e}");
                let _ = self.expire(battle_id);
                Err(e.into())
            }
        }
    }

    pub fn cast_vote(
        &self,
        battle_id: &str,
        choice: Choice,
        voter_id: &str,
        event_id: Option<&str>,
    ) -> Result<VoteReceipt, ArenaError> {
        let slot = self.slot(battle_id)?;
        let mut b = slot.lock();
        if let Some(prior) = &b.vote {
            if event_id == Some(prior.event_id.as_str()) {
                return Ok(VoteReceipt {
                    event: prior.clone(),
                    model_left: b.candidate_left.clone(),
                    model_right: b.candidate_right.clone(),
                });
            }
            return Err(ArenaError::Conflict(format!("battle {battle_id} already voted")));
        }
        self.expire_if_stale(&mut b);
        if b.status != BattleStatus::AwaitingVote {
            return Err(ArenaError::Conflict(format!(
                "battle {battle_id} is {:?}, not awaiting a vote",
                b.status
            )));
        }
        let outcome = match choice {
            Choice::Left => Outcome::WIN,
            Choice::Right => Outcome::LOSS,
            Choice::Tie if self.config.tie_enabled => Outcome::TIE,
            Choice::Tie => return Err(ArenaError::Validation("ties are disabled".into())),
        };
        let event_id = event_id
            .map(str::to_owned)
            .unwrap_or_else(|| uuid::Uuid::new_v4().to_string());
        let payload = VotePayload {
            battle_id: b.battle_id.clone(),
            model_a: b.candidate_left.clone(),
            model_b: b.candidate_right.clone(),
            outcome,
            voter_id: voter_id.to_owned(),
            submitted_at: self.clock.now(),
        };
        let ack = self
            .backend
            .submit(NewEvent::vote(event_id, b.track, payload.clone()))?;
        if ack.duplicate {
            return Err(ArenaError::Conflict(format!(
                "event id {} was already used",
                ack.event_id
            )));
        }
        let event = VoteEvent {
            event_id: ack.event_id,
            seq: ack.seq,
            battle_id: payload.battle_id,
            track: b.track,
            model_a: payload.model_a,
            model_b: payload.model_b,
            outcome,
            voter_id: payload.voter_id,
            submitted_at: payload.submitted_at,
        };
        b.vote = Some(event.clone());
        b.status = BattleStatus::Voted;
        Ok(VoteReceipt {
            event,
            model_left: b.candidate_left.clone(),
            model_right: b.candidate_right.clone(),
        })
    }
}
