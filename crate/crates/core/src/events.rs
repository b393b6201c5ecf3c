//! Arena events: the only things that change rating state.

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::provider::ProviderDescriptor;
use crate::rating::Outcome;
use crate::track::TrackId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Vote,
    Registration,
    RegressionTick,
}

impl EventKind {
    /// Votes and registrations are sequenced per track; ticks globally.
    pub fn is_track_scoped(self) -> bool {
        !matches!(self, EventKind::RegressionTick)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VotePayload {
    pub battle_id: String,
    pub model_a: String,
    pub model_b: String,
    pub outcome: Outcome,
    pub voter_id: String,
    pub submitted_at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistrationPayload {
    pub model_id: String,
    pub provider: ProviderDescriptor,
}

#[derive(Debug, Clone, PartialEq)]
pub enum EventBody {
    Vote(VotePayload),
    Registration(RegistrationPayload),
    /// Regresses inactive models in every track. The tick's own
    /// `enqueued_at` is the reference time for inactivity.
    RegressionTick,
}

impl EventBody {
    pub fn kind(&self) -> EventKind {
        match self {
            EventBody::Vote(_) => EventKind::Vote,
            EventBody::Registration(_) => EventKind::Registration,
            EventBody::RegressionTick => EventKind::RegressionTick,
        }
    }
}

/// An event before the sequencer has stamped it.
#[derive(Debug, Clone, PartialEq)]
pub struct NewEvent {
    pub event_id: String,
    pub track: Option<TrackId>,
    pub body: EventBody,
}

impl NewEvent {
    pub fn vote(event_id: impl Into<String>, track: TrackId, vote: VotePayload) -> Self {
        Self {
            event_id: event_id.into(),
            track: Some(track),
            body: EventBody::Vote(vote),
        }
    }

    pub fn registration(track: TrackId, model_id: &str, provider: ProviderDescriptor) -> Self {
        Self {
            event_id: format!("register:{model_id}:{track}"),
            track: Some(track),
            body: EventBody::Registration(RegistrationPayload {
                model_id: model_id.to_owned(),
                provider,
            }),
        }
    }

    pub fn regression_tick(event_id: impl Into<String>) -> Self {
        Self {
            event_id: event_id.into(),
            track: None,
            body: EventBody::RegressionTick,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.event_id.is_empty() {
            return Err("event_id must be nonempty".into());
        }
        match (&self.body, self.track) {
            (EventBody::RegressionTick, Some(_)) => {
                Err("regression_tick events are not track scoped".into())
            }
            (EventBody::RegressionTick, None) => Ok(()),
            (_, None) => Err(format!("{:?} event requires a track", self.body.kind())),
            (EventBody::Vote(v), Some(_)) => {
                if v.model_a == v.model_b {
                    Err("vote must name two distinct models".into())
                } else {
                    Ok(())
                }
            }
            (EventBody::Registration(r), Some(_)) => {
                if r.model_id.is_empty() {
                    Err("model_id must be nonempty".into())
                } else {
                    Ok(())
                }
            }
        }
    }
}

/// A sequenced, acknowledged event.
#[derive(Debug, Clone, PartialEq)]
pub struct ArenaEvent {
    pub event_id: String,
    pub track: Option<TrackId>,
    pub seq: u64,
    pub enqueued_at: DateTime<Utc>,
    pub body: EventBody,
}

impl ArenaEvent {
    pub fn kind(&self) -> EventKind {
        self.body.kind()
    }

    pub fn applies_to(&self, track: TrackId) -> bool {
        self.track.is_none_or(|t| t == track)
    }
}

/// A vote as seen by the arena: one human judgment on one battle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoteEvent {
    pub event_id: String,
    pub seq: u64,
    pub battle_id: String,
    pub track: TrackId,
    pub model_a: String,
    pub model_b: String,
    pub outcome: Outcome,
    pub voter_id: String,
    pub submitted_at: DateTime<Utc>,
}
