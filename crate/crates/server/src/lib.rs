//! HTTP boundary of the arena: battles, votes, leaderboards, registration.

pub mod app;
pub mod config;
pub mod error;

pub use app::{router, AppState, Server, Shared, StartError};
pub use config::{ApiConfig, ConfigError};
pub use error::ApiError;
