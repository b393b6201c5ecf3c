//! Blind pairwise evaluation arena: an extended Elo rating engine fed by a
//! durable, replayable vote-event pipeline with live per-track leaderboards.

pub mod arena;
pub mod clock;
pub mod events;
pub mod leaderboard;
pub mod persistence;
pub mod pipeline;
pub mod provider;
pub mod rating;
pub mod state;
pub mod track;

pub use arena::{Arena, ArenaBackend, ArenaConfig, ArenaError, Battle, BattleStatus, BattleView, Choice, InlineBackend};
pub use clock::{Clock, ManualClock, SystemClock};
pub use events::{ArenaEvent, EventBody, EventKind, NewEvent, VoteEvent, VotePayload};
pub use leaderboard::{Leaderboard, LeaderboardRow, LeaderboardSnapshot};
pub use persistence::{EventLog, FileLog, LogError, LogRecord, MemoryLog, SnapshotStore, SyncPolicy};
pub use pipeline::{Ack, Pipeline, PipelineConfig, PipelineError, PipelineService};
pub use provider::{ProviderDescriptor, ProviderError, ProviderGateway};
pub use rating::{Outcome, PairHistory, RatingParams, RatingState, UpdateResult};
pub use state::{ArenaState, ParamsByTrack, TrackState};
pub use track::TrackId;
