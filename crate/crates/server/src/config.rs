use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::time::Duration;

use arena_core::ParamsByTrack;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const ENV_PREFIX: &str = "ARENA_";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("parsing {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("environment variable {var}: {message}")]
    Env { var: String, message: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

/// Operator configuration. Keys in the config file match the field names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ApiConfig {
    pub listen: SocketAddr,
    /// Default rating parameters plus per-track overrides.
    pub params: ParamsByTrack,
    pub tie_enabled: bool,
    pub battle_ttl_secs: u64,
    /// 0 disables the periodic regression tick.
    pub regression_tick_interval_secs: u64,
    /// Event log file; `None` keeps the log in memory.
    pub log_path: Option<PathBuf>,
    /// Directory for per-track checkpoints.
    pub snapshot_dir: Option<PathBuf>,
    pub checkpoint_every: Option<u64>,
    /// Batched flush window in ms (≤ 5). `None` flushes every append.
    pub batched_flush_ms: Option<u64>,
    pub queue_capacity: usize,
    /// Shared deadline for fetching both candidate responses.
    pub response_deadline_secs: u64,
    pub response_cap_bytes: usize,
    /// When set, `/models` and `/admin/*` require this bearer token.
    pub admin_token: Option<String>,
}

impl Default for ApiConfig {
    fn default() -> Self {
        Self {
            listen: SocketAddr::from(([127, 0, 0, 1], 8080)),
            params: ParamsByTrack::default(),
            tie_enabled: false,
            battle_ttl_secs: 24 * 3600,
            regression_tick_interval_secs: 24 * 3600,
            log_path: None,
            snapshot_dir: None,
            checkpoint_every: None,
            batched_flush_ms: None,
            queue_capacity: arena_core::pipeline::DEFAULT_QUEUE_CAPACITY,
            response_deadline_secs: 300,
            response_cap_bytes: arena_core::provider::DEFAULT_RESPONSE_CAP,
            admin_token: None,
        }
    }
}

impl ApiConfig {
    /// Reads a `.json` or `.toml` file (TOML unless the extension says JSON).
    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_owned(),
            source,
        })?;
        let parsed = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| e.to_string())
        } else {
            toml::from_str(&text).map_err(|e| e.to_string())
        };
        parsed.map_err(|message| ConfigError::Parse {
            path: path.to_owned(),
            message,
        })
    }

    /// Applies `ARENA_<FIELD>` overrides. Values are read as JSON when they
    /// parse as the field's type, else as plain strings. Unknown keys fail.
    pub fn apply_env<I, K, V>(&mut self, vars: I) -> Result<(), ConfigError>
    where
        I: IntoIterator<Item = (K, V)>,
        K: AsRef<str>,
        V: AsRef<str>,
    {
        for (var, raw) in vars {
            let (var, raw) = (var.as_ref(), raw.as_ref());
            let Some(key) = var.strip_prefix(ENV_PREFIX) else { continue };
            let key = key.to_ascii_lowercase();
            if key == "config" {
                continue;
            }
            let err = |message: String| ConfigError::Env {
                var: var.to_owned(),
                message,
            };
            let mut doc = serde_json::to_value(&*self).expect("config serializes");
            let map = doc.as_object_mut().expect("config is an object");
            if !map.contains_key(&key) {
                return Err(err("no such setting".into()));
            }
            let candidates = serde_json::from_str::<serde_json::Value>(raw)
                .into_iter()
                .chain(std::iter::once(serde_json::Value::String(raw.to_owned())));
            let mut last = String::new();
            let mut applied = false;
            for value in candidates {
                map.insert(key.clone(), value);
                match serde_json::from_value::<ApiConfig>(serde_json::Value::Object(map.clone())) {
                    Ok(next) => {
                        *self = next;
                        applied = true;
                        break;
                    }
                    Err(e) => last = e.to_string(),
                }
            }
            if !applied {
                return Err(err(last));
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.params
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let bad = |m: &str| Err(ConfigError::Invalid(m.to_owned()));
        if self.battle_ttl_secs == 0 {
            return bad("battle_ttl_secs must be positive");
        }
        if self.queue_capacity == 0 {
            return bad("queue_capacity must be positive");
        }
        if self.response_deadline_secs == 0 {
            return bad("response_deadline_secs must be positive");
        }
        if self.response_cap_bytes == 0 {
            return bad("response_cap_bytes must be positive");
        }
        if let Some(ms) = self.batched_flush_ms {
            if ms == 0 || Duration::from_millis(ms) > arena_core::persistence::MAX_BATCH_WINDOW {
                return bad("batched_flush_ms must be in 1..=5");
            }
        }
        if self.checkpoint_every == Some(0) {
            return bad("checkpoint_every must be positive");
        }
        if self.checkpoint_every.is_some() && self.snapshot_dir.is_none() {
            return bad("checkpoint_every needs snapshot_dir");
        }
        Ok(())
    }

    pub fn battle_ttl(&self) -> Duration {
        Duration::from_secs(self.battle_ttl_secs)
    }

    pub fn response_deadline(&self) -> Duration {
        Duration::from_secs(self.response_deadline_secs)
    }
}
