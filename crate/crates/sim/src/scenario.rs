use std::path::Path;

use arena_core::{RatingParams, TrackId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::SimError;

/// How a synthetic voter picks a winner.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VoterModel {
    /// `P(A beats B) = 1 / (1 + 10^((s_B - s_A) / 400))`.
    #[default]
    BradleyTerry,
    /// Higher latent skill always wins; equal skills split by coin flip.
    Deterministic,
}

/// A model that is registered only once `at_vote` votes have been cast.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LateJoin {
    pub model: usize,
    pub at_vote: u64,
}

/// A model that stops being paired after `after_vote` votes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Freeze {
    pub model: usize,
    pub after_vote: u64,
}

/// Linear change of a model's latent skill between two vote indices.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SkillDrift {
    pub model: usize,
    pub target_skill: f64,
    pub start_vote: u64,
    pub end_vote: u64,
}

/// A pair forced into a fixed share of battles.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FocusPair {
    pub a: usize,
    pub b: usize,
    pub share: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimScenario {
    pub model_count: usize,
    /// Per-model skill on the rating scale.
    pub latent_skills: Vec<f64>,
    pub vote_count: u64,
    pub seed: u64,
    #[serde(default)]
    pub params: RatingParams,
    #[serde(default)]
    pub voter: VoterModel,
    #[serde(default = "default_track")]
    pub track: TrackId,
    /// Simulated wall-clock time between consecutive votes.
    #[serde(default = "default_seconds_per_vote")]
    pub seconds_per_vote: u64,
    /// Inject a regression tick every N votes.
    #[serde(default)]
    pub tick_every: Option<u64>,
    #[serde(default)]
    pub late_joiners: Vec<LateJoin>,
    #[serde(default)]
    pub frozen: Vec<Freeze>,
    #[serde(default)]
    pub drift: Vec<SkillDrift>,
    #[serde(default)]
    pub focus: Option<FocusPair>,
    /// Trajectory sampling stride; 0 picks about 500 samples.
    #[serde(default)]
    pub trajectory_every: u64,
}

fn default_track() -> TrackId {
    TrackId::Ideation
}

fn default_seconds_per_vote() -> u64 {
    60
}

/// Steady-state band half-width, rating points.
pub const BAND: f64 = 50.0;
/// Fraction of the run whose mean rating defines the steady state.
pub const STEADY_FRACTION: f64 = 0.2;
/// Updates counted in the tail-variance metric.
pub const TAIL_UPDATES: usize = 1000;

impl SimScenario {
    /// `n` models with skills `spacing` apart, centred on 1000.
    pub fn spaced(n: usize, spacing: f64, vote_count: u64, seed: u64) -> Self {
        let mid = (n as f64 - 1.0) / 2.0;
        Self {
            model_count: n,
            latent_skills: (0..n).map(|i| 1000.0 + spacing * (i as f64 - mid)).collect(),
            vote_count,
            seed,
            params: RatingParams::default(),
            voter: VoterModel::BradleyTerry,
            track: default_track(),
            seconds_per_vote: default_seconds_per_vote(),
            tick_every: None,
            late_joiners: Vec::new(),
            frozen: Vec::new(),
            drift: Vec::new(),
            focus: None,
            trajectory_every: 0,
        }
    }

    /// Twelve incumbents spaced 40 apart play 6,000 votes; then one
    /// newcomer joins for another 6,000. The newcomer's skill is drawn
    /// uniformly from the incumbents' range by a seed-derived stream, so
    /// variants compared on one seed share the same newcomer.
    pub fn late_joiner(seed: u64) -> Self {
        let mut s = Self::spaced(12, 40.0, 12_000, seed);
        let lo = s.latent_skills[0];
        let hi = s.latent_skills[11];
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6c61_7465_6a6f_696e);
        s.model_count = 13;
        s.latent_skills.push(rng.random_range(lo..=hi));
        s.late_joiners.push(LateJoin { model: 12, at_vote: 6_000 });
        s
    }

    /// Eight models spaced 50 apart; half of all battles are forced onto
    /// the two middle models.
    pub fn oversampled_pair(seed: u64) -> Self {
        let mut s = Self::spaced(8, 50.0, 20_000, seed);
        s.focus = Some(FocusPair { a: 3, b: 4, share: 0.5 });
        s
    }

    /// A clear leader (model 9) stops playing after 4,000 votes while an
    /// improver (model 8) climbs to just below the leader's skill. One
    /// vote per simulated hour, a regression tick every 500 votes. Pair
    /// decay is off: with thousands of repeat pairings it would pin every
    /// rating and hide the improver's climb.
    pub fn inactive_leader(seed: u64) -> Self {
        let mut s = Self::spaced(10, 40.0, 20_000, seed);
        s.params.pair_decay_gamma = 1.0;
        s.latent_skills[9] = 1300.0;
        s.latent_skills[8] = 1100.0;
        s.seconds_per_vote = 3600;
        s.tick_every = Some(500);
        s.frozen.push(Freeze { model: 9, after_vote: 4_000 });
        s.drift.push(SkillDrift {
            model: 8,
            target_skill: 1280.0,
            start_vote: 2_000,
            end_vote: 12_000,
        });
        s
    }

    pub fn with_params(mut self, params: RatingParams) -> Self {
        self.params = params;
        self
    }

    pub fn from_file(path: &Path) -> Result<Self, SimError> {
        let text = std::fs::read_to_string(path).map_err(|source| SimError::Io { path: path.to_owned(), source })?;
        let s: Self = serde_json::from_str(&text).map_err(|e| SimError::Scenario(format!("{}: {e}", path.display())))?;
        s.validate()?;
        Ok(s)
    }

    pub fn model_id(i: usize) -> String {
        format!("m{i:02}")
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::Scenario(m));
        if self.model_count < 2 {
            return bad("model_count must be at least 2".into());
        }
        if self.vote_count < 1 {
            return bad("vote_count must be at least 1".into());
        }
        if self.latent_skills.len() != self.model_count {
            return bad(format!(
                "latent_skills has {} entries for {} models",
                self.latent_skills.len(),
                self.model_count
            ));
        }
        if self.latent_skills.iter().any(|s| !s.is_finite()) {
            return bad("latent skills must be finite".into());
        }
        self.params
            .validate()
            .map_err(|e| SimError::Scenario(e.to_string()))?;
        let check = |m: usize, what: &str| {
            if m >= self.model_count {
                Err(SimError::Scenario(format!("{what} names model {m} of {}", self.model_count)))
            } else {
                Ok(())
            }
        };
        for j in &self.late_joiners {
            check(j.model, "late_joiners")?;
        }
        for f in &self.frozen {
            check(f.model, "frozen")?;
        }
        for d in &self.drift {
            check(d.model, "drift")?;
            if d.end_vote < d.start_vote || !d.target_skill.is_finite() {
                return bad("drift needs start_vote <= end_vote and a finite target".into());
            }
        }
        if let Some(f) = self.focus {
            check(f.a, "focus")?;
            check(f.b, "focus")?;
            if f.a == f.b || !(0.0..=1.0).contains(&f.share) {
                return bad("focus needs two distinct models and share in [0, 1]".into());
            }
        }
        if self.tick_every == Some(0) {
            return bad("tick_every must be positive".into());
        }
        if self.late_joiners.len() >= self.model_count - 1 {
            return bad("at least two models must be present from the start".into());
        }
        Ok(())
    }

    /// Latent skill of model `i` when `vote` votes have been cast.
    pub fn skill_at(&self, i: usize, vote: u64) -> f64 {
        let base = self.latent_skills[i];
        match self.drift.iter().find(|d| d.model == i) {
            None => base,
            Some(d) if vote <= d.start_vote => base,
            Some(d) if vote >= d.end_vote => d.target_skill,
            Some(d) => {
                let t = (vote - d.start_vote) as f64 / (d.end_vote - d.start_vote) as f64;
                base + t * (d.target_skill - base)
            }
        }
    }

    pub fn entry_vote(&self, i: usize) -> u64 {
        self.late_joiners
            .iter()
            .find(|j| j.model == i)
            .map_or(0, |j| j.at_vote)
    }

    pub fn is_frozen(&self, i: usize, vote: u64) -> bool {
        self.frozen.iter().any(|f| f.model == i && vote >= f.after_vote)
    }

    pub fn trajectory_stride(&self) -> u64 {
        if self.trajectory_every > 0 {
            self.trajectory_every
        } else {
            (self.vote_count / 500).max(1)
        }
    }
}
