//! Extended Elo mathematics.
//!
//! Everything in this module is a pure function of its inputs: no clock, no
//! I/O, no randomness. The three extensions on top of plain Elo are
//!
//! * a cold-start window, during which the rating gap inside the expected
//!   score is multiplied by `cold_start_alpha`,
//! * pairwise decay, which shrinks the step size geometrically with the
//!   number of prior encounters between the same two models, and
//! * regression toward the track mean for inactive models, applied outside
//!   the match path.

use std::collections::BTreeMap;
use std::time::Duration;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Logistic scale of the Elo curve, in rating points per decade of odds.
pub const ELO_SCALE: f64 = 400.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RatingError {
    #[error("non-finite input: {name} = {value}")]
    NonFinite { name: &'static str, value: f64 },
    #[error("parameter {name} = {value} outside its domain ({domain})")]
    OutOfDomain {
        name: &'static str,
        value: f64,
        domain: &'static str,
    },
    #[error("invalid outcome score {0}; expected 0, 0.5 or 1")]
    InvalidOutcome(f64),
}

fn finite(name: &'static str, value: f64) -> Result<f64, RatingError> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(RatingError::NonFinite { name, value })
    }
}

fn check(
    name: &'static str,
    value: f64,
    ok: bool,
    domain: &'static str,
) -> Result<(), RatingError> {
    finite(name, value)?;
    if ok {
        Ok(())
    } else {
        Err(RatingError::OutOfDomain {
            name,
            value,
            domain,
        })
    }
}

/// Tunable constants of the rating engine. One instance per track.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RatingParams {
    pub base_rating: f64,
    pub k_factor: f64,
    pub cold_start_alpha: f64,
    pub cold_start_window: u32,
    pub pair_decay_gamma: f64,
    pub regression_lambda: f64,
    #[serde(with = "duration_secs")]
    pub inactivity_threshold: Duration,
}

impl Default for RatingParams {
    fn default() -> Self {
        Self {
            base_rating: 1000.0,
            k_factor: 32.0,
            cold_start_alpha: 1.5,
            cold_start_window: 30,
            pair_decay_gamma: 0.9,
            regression_lambda: 0.02,
            inactivity_threshold: Duration::from_secs(14 * 24 * 3600),
        }
    }
}

impl RatingParams {
    /// Plain Elo: no cold-start scaling, no decay, no regression.
    pub fn plain(k_factor: f64) -> Self {
        Self {
            k_factor,
            cold_start_alpha: 1.0,
            cold_start_window: 0,
            pair_decay_gamma: 1.0,
            regression_lambda: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), RatingError> {
        check("base_rating", self.base_rating, self.base_rating > 0.0, "> 0")?;
        check("k_factor", self.k_factor, self.k_factor > 0.0, "> 0")?;
        check(
            "cold_start_alpha",
            self.cold_start_alpha,
            self.cold_start_alpha >= 1.0,
            ">= 1",
        )?;
        check(
            "pair_decay_gamma",
            self.pair_decay_gamma,
            self.pair_decay_gamma > 0.0 && self.pair_decay_gamma <= 1.0,
            "(0, 1]",
        )?;
        check(
            "regression_lambda",
            self.regression_lambda,
            (0.0..1.0).contains(&self.regression_lambda),
            "[0, 1)",
        )?;
        Ok(())
    }
}

/// A model's rating inside one track.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatingState {
    pub rating: f64,
    pub match_count: u64,
    pub last_match_seq: Option<u64>,
    /// Timestamp of the last event that counted as activity (registration or
    /// a vote). Used only by the regression tick.
    pub last_active_at: Option<DateTime<Utc>>,
}

impl RatingState {
    pub fn new(base_rating: f64) -> Self {
        Self {
            rating: base_rating,
            match_count: 0,
            last_match_seq: None,
            last_active_at: None,
        }
    }
}

/// Score of model A in a single comparison.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Outcome(f64);

impl Outcome {
    pub const WIN: Outcome = Outcome(1.0);
    pub const TIE: Outcome = Outcome(0.5);
    pub const LOSS: Outcome = Outcome(0.0);

    pub fn score_a(self) -> f64 {
        self.0
    }

    pub fn score_b(self) -> f64 {
        1.0 - self.0
    }

    pub fn is_tie(self) -> bool {
        self.0 == 0.5
    }

    /// The same result seen from model B's side.
    pub fn flipped(self) -> Outcome {
        Outcome(1.0 - self.0)
    }
}

impl TryFrom<f64> for Outcome {
    type Error = RatingError;

    fn try_from(score: f64) -> Result<Self, Self::Error> {
        if score == 0.0 || score == 0.5 || score == 1.0 {
            Ok(Outcome(score))
        } else {
            Err(RatingError::InvalidOutcome(score))
        }
    }
}

impl From<Outcome> for f64 {
    fn from(outcome: Outcome) -> f64 {
        outcome.0
    }
}

fn ordered<'a>(a: &'a str, b: &'a str) -> (&'a str, &'a str) {
    if a <= b {
        (a, b)
    } else {
        (b, a)
    }
}

/// Encounter counts per unordered model pair. Stored as a nested map keyed
/// by the smaller id first, so lookups need no allocation.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<PairCount>", into = "Vec<PairCount>")]
pub struct PairHistory {
    counts: BTreeMap<String, BTreeMap<String, u64>>,
}

#[derive(Serialize, Deserialize)]
struct PairCount {
    a: String,
    b: String,
    count: u64,
}

impl From<Vec<PairCount>> for PairHistory {
    fn from(rows: Vec<PairCount>) -> Self {
        let mut h = Self::default();
        for r in rows.into_iter().filter(|r| r.count > 0) {
            let (a, b) = ordered(&r.a, &r.b);
            *h.counts.entry(a.to_owned()).or_default().entry(b.to_owned()).or_default() += r.count;
        }
        h
    }
}

impl From<PairHistory> for Vec<PairCount> {
    fn from(history: PairHistory) -> Self {
        history
            .iter()
            .map(|(a, b, count)| PairCount {
                a: a.to_owned(),
                b: b.to_owned(),
                count,
            })
            .collect()
    }
}

impl PairHistory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn count(&self, a: &str, b: &str) -> u64 {
        let (a, b) = ordered(a, b);
        self.counts.get(a).and_then(|m| m.get(b)).copied().unwrap_or(0)
    }

    /// Records one more encounter and returns the new count.
    pub fn increment(&mut self, a: &str, b: &str) -> u64 {
        let (a, b) = ordered(a, b);
        let inner = match self.counts.get_mut(a) {
            Some(m) => m,
            None => self.counts.entry(a.to_owned()).or_default(),
        };
        let slot = match inner.get_mut(b) {
            Some(c) => c,
            None => inner.entry(b.to_owned()).or_insert(0),
        };
        *slot += 1;
        *slot
    }

    /// `(smaller id, larger id, count)` in id order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &str, u64)> {
        self.counts
            .iter()
            .flat_map(|(a, m)| m.iter().map(move |(b, c)| (a.as_str(), b.as_str(), *c)))
    }

    pub fn len(&self) -> usize {
        self.counts.values().map(BTreeMap::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UpdateResult {
    pub new_rating_a: f64,
    pub new_rating_b: f64,
    pub expected_a: f64,
    pub k_effective: f64,
    pub cold_start_applied: bool,
}

impl UpdateResult {
    pub fn delta_a(&self, old_rating_a: f64) -> f64 {
        self.new_rating_a - old_rating_a
    }
}

/// Expected score of A against B, with the rating gap multiplied by `scale`.
///
/// `scale = 1` is the textbook Elo curve.
pub fn expected_score(rating_a: f64, rating_b: f64, scale: f64) -> Result<f64, RatingError> {
    finite("rating_a", rating_a)?;
    finite("rating_b", rating_b)?;
    check("scale", scale, scale >= 1.0, ">= 1")?;
    let exponent = scale * (rating_b - rating_a) / ELO_SCALE;
    Ok(1.0 / (1.0 + 10f64.powf(exponent)))
}

/// Step size after `n_ab` prior encounters of the same pair.
pub fn effective_k(k_factor: f64, gamma: f64, n_ab: u64) -> Result<f64, RatingError> {
    check("k_factor", k_factor, k_factor > 0.0, "> 0")?;
    check("gamma", gamma, gamma > 0.0 && gamma <= 1.0, "(0, 1]")?;
    if gamma == 1.0 || n_ab == 0 {
        return Ok(k_factor);
    }
    Ok(k_factor * gamma.powf(n_ab as f64))
}

pub fn is_cold_start(state: &RatingState, params: &RatingParams) -> bool {
    state.match_count < u64::from(params.cold_start_window)
}

/// Applies one comparison between A and B.
///
/// The caller owns bookkeeping: match counts and the pair history are not
/// touched here.
pub fn apply_update(
    state_a: &RatingState,
    state_b: &RatingState,
    outcome: Outcome,
    n_ab: u64,
    params: &RatingParams,
) -> Result<UpdateResult, RatingError> {
    params.validate()?;
    let cold = is_cold_start(state_a, params) || is_cold_start(state_b, params);
    let scale = if cold { params.cold_start_alpha } else { 1.0 };
    let expected_a = expected_score(state_a.rating, state_b.rating, scale)?;
    let expected_b = 1.0 - expected_a;
    let k_effective = effective_k(params.k_factor, params.pair_decay_gamma, n_ab)?;

    let new_rating_a = state_a.rating + k_effective * (outcome.score_a() - expected_a);
    let new_rating_b = state_b.rating + k_effective * (outcome.score_b() - expected_b);

    Ok(UpdateResult {
        new_rating_a,
        new_rating_b,
        expected_a,
        k_effective,
        cold_start_applied: cold && params.cold_start_alpha != 1.0,
    })
}

/// Pulls `rating` toward `global_mean`, shrinking the distance by `1 - lambda`.
pub fn regress_toward_mean(
    rating: f64,
    global_mean: f64,
    lambda: f64,
) -> Result<f64, RatingError> {
    finite("rating", rating)?;
    finite("global_mean", global_mean)?;
    check("lambda", lambda, (0.0..1.0).contains(&lambda), "[0, 1)")?;
    Ok(rating - lambda * (rating - global_mean))
}

mod duration_secs {
    use std::time::Duration;

    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_secs())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        u64::deserialize(d).map(Duration::from_secs)
    }
}
