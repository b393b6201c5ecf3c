use std::collections::BTreeMap;
use std::sync::Arc;

use arena_core::{
    Arena, ArenaBackend, ArenaConfig, Choice, InlineBackend, LeaderboardSnapshot, ManualClock, MemoryLog, NewEvent,
    ParamsByTrack, Pipeline, PipelineConfig, ProviderDescriptor, ProviderGateway,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::latency::LatencyReport;
use crate::metrics::{mean, spearman, steps_to_band, variance};
use crate::scenario::{SimScenario, VoterModel, BAND, STEADY_FRACTION, TAIL_UPDATES};
use crate::SimError;

const PROMPTS: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelReport {
    pub model_id: String,
    /// Latent skill at the end of the run.
    pub latent_skill: f64,
    pub rating: f64,
    pub match_count: u64,
    pub rank: u32,
    /// Mean rating over the final 20% of the run.
    pub steady_state: f64,
    /// Own matches until the rating stays within ±50 of `steady_state`;
    /// `None` if it never settles.
    pub convergence_steps: Option<u64>,
    /// Rating variance over the model's last 1,000 updates.
    pub tail_variance: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TickRecord {
    /// Votes cast before the tick.
    pub vote: u64,
    /// Track mean just before the tick.
    pub mean: f64,
    /// `(model_id, before, after)` for every model the tick moved.
    pub moved: Vec<(String, f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub every: u64,
    /// Votes cast at each sample.
    pub votes: Vec<u64>,
    /// Rating per model at each sample; `None` before the model joined.
    pub ratings: BTreeMap<String, Vec<Option<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub scenario: SimScenario,
    pub votes_cast: u64,
    pub dead_letters: usize,
    pub snapshot_version: u64,
    /// Spearman correlation between final ratings and final latent skills.
    pub spearman: f64,
    pub models: Vec<ModelReport>,
    pub ticks: Vec<TickRecord>,
    pub trajectory: Trajectory,
    /// Wall-clock measurements; only present when requested, since they
    /// break byte-for-byte reproducibility.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub latency: Option<LatencyReport>,
}

impl SimReport {
    pub fn model(&self, i: usize) -> &ModelReport {
        &self.models[i]
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Wide CSV: `vote,m00,m01,...`; empty cells before a model joined.
    pub fn write_trajectory_csv<W: std::io::Write>(&self, out: W) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(out);
        let ids: Vec<&String> = self.trajectory.ratings.keys().collect();
        let mut header = vec!["vote".to_owned()];
        header.extend(ids.iter().map(|s| s.to_string()));
        w.write_record(&header)?;
        for (row, vote) in self.trajectory.votes.iter().enumerate() {
            let mut rec = vec![vote.to_string()];
            for id in &ids {
                rec.push(self.trajectory.ratings[*id][row].map(|r| r.to_string()).unwrap_or_default());
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// One recorded rating of a model: after `vote` votes had been processed
/// (ticks before vote `v` are recorded at `v`).
#[derive(Debug, Clone, Copy)]
struct Point {
    vote: u64,
    rating: f64,
    matches: u64,
}

struct Driver<'a> {
    s: &'a SimScenario,
    arena: Arena<InlineBackend>,
    clock: Arc<ManualClock>,
    gateway: ProviderGateway,
    ids: Vec<String>,
    index: BTreeMap<String, usize>,
    history: Vec<Vec<Point>>,
    ticks: Vec<TickRecord>,
    rng: ChaCha8Rng,
}

impl Driver<'_> {
    fn snapshot(&self) -> Arc<LeaderboardSnapshot> {
        self.arena.backend().with(|p| p.current(self.s.track))
    }

    fn record(&mut self, vote: u64, snap: &LeaderboardSnapshot, models: impl IntoIterator<Item = usize>) {
        for i in models {
            let row = snap.row(&self.ids[i]).expect("recorded model is on the board");
            self.history[i].push(Point {
                vote,
                rating: row.rating,
                matches: row.match_count,
            });
        }
    }

    fn register(&mut self, i: usize, vote: u64) -> Result<(), SimError> {
        self.arena
            .register_model(&self.ids[i], &[self.s.track], ProviderDescriptor::placeholder())?;
        let snap = self.snapshot();
        self.record(vote, &snap, [i]);
        Ok(())
    }

    fn tick(&mut self, vote: u64) -> Result<(), SimError> {
        let before = self.snapshot();
        let ack = self
            .arena
            .backend()
            .submit(NewEvent::regression_tick(format!("tick-{vote}")))?;
        debug_assert!(!ack.duplicate);
        let after = self.snapshot();
        let ratings: Vec<f64> = before.rows.iter().map(|r| r.rating).collect();
        let mean = mean(&ratings).unwrap_or(f64::NAN);
        let mut moved = Vec::new();
        let mut changed = Vec::new();
        for row in &before.rows {
            let new = after.rating(&row.model_id).expect("ticks never remove models");
            if new.to_bits() != row.rating.to_bits() {
                moved.push((row.model_id.clone(), row.rating, new));
                changed.push(self.index[&row.model_id]);
            }
        }
        self.record(vote, &after, changed);
        self.ticks.push(TickRecord { vote, mean, moved });
        Ok(())
    }

    fn battle(&mut self, vote: u64) -> Result<(), SimError> {
        let s = self.s;
        let mut eligible: Vec<bool> = (0..s.model_count)
            .map(|i| s.entry_vote(i) <= vote && !s.is_frozen(i, vote))
            .collect();
        if let Some(f) = s.focus {
            let forced = self.rng.random_bool(f.share);
            if forced && eligible[f.a] && eligible[f.b] {
                eligible.iter_mut().enumerate().for_each(|(i, e)| *e = i == f.a || i == f.b);
            }
        }
        let prompt = format!("simulated prompt #{}", self.rng.random_range(0..PROMPTS));
        let seed = self.rng.random();
        let index = &self.index;
        let battle = self
            .arena
            .create_battle_among(s.track, &prompt, seed, |m| eligible[index[m]])?;
        let left = self.index[&battle.candidate_left];
        let right = self.index[&battle.candidate_right];
        let fetch = |m: &str| self.gateway.fetch_fixture(m, None, s.track, &prompt);
        let (rl, rr) = (fetch(&battle.candidate_left)?, fetch(&battle.candidate_right)?);
        self.arena.attach_responses(&battle.battle_id, rl, rr)?;

        let (sl, sr) = (s.skill_at(left, vote), s.skill_at(right, vote));
        let left_wins = match s.voter {
            VoterModel::BradleyTerry => {
                let p = 1.0 / (1.0 + 10f64.powf((sr - sl) / 400.0));
                self.rng.random::<f64>() < p
            }
            VoterModel::Deterministic if sl == sr => self.rng.random_bool(0.5),
            VoterModel::Deterministic => sl > sr,
        };
        let choice = if left_wins { Choice::Left } else { Choice::Right };
        self.arena
            .cast_vote(&battle.battle_id, choice, "sim-voter", Some(&format!("sim-{vote}")))?;
        let snap = self.snapshot();
        self.record(vote, &snap, [left, right]);
        Ok(())
    }
}

/// Rating after each vote in `from..to`, as a step function of `points`.
fn ratings_over(points: &[Point], from: u64, to: u64) -> Vec<f64> {
    let mut out = Vec::with_capacity(to.saturating_sub(from) as usize);
    let mut k = 0;
    let mut current = None;
    for v in from..to {
        while k < points.len() && points[k].vote <= v {
            current = Some(points[k].rating);
            k += 1;
        }
        if let Some(r) = current {
            out.push(r);
        }
    }
    out
}

/// Runs the scenario through the real arena with an in-process pipeline.
/// Output is a pure function of the scenario.
pub fn run_scenario(s: &SimScenario) -> Result<SimReport, SimError> {
    s.validate()?;
    let clock = Arc::new(ManualClock::epoch());
    let config = PipelineConfig {
        params: ParamsByTrack::uniform(s.params),
        ..Default::default()
    };
    let pipeline = Pipeline::open(Box::new(MemoryLog::new()), config, clock.clone())?;
    let arena = Arena::new(InlineBackend::new(pipeline), ArenaConfig::default(), clock.clone());
    let ids: Vec<String> = (0..s.model_count).map(SimScenario::model_id).collect();
    let mut d = Driver {
        s,
        arena,
        clock,
        gateway: ProviderGateway::default(),
        index: ids.iter().cloned().enumerate().map(|(i, id)| (id, i)).collect(),
        ids,
        history: vec![Vec::new(); s.model_count],
        ticks: Vec::new(),
        rng: ChaCha8Rng::seed_from_u64(s.seed),
    };
    for i in 0..s.model_count {
        if s.entry_vote(i) == 0 {
            d.register(i, 0)?;
        }
    }
    let stride = s.trajectory_stride();
    let mut trajectory = Trajectory {
        every: stride,
        votes: Vec::new(),
        ratings: d.ids.iter().map(|id| (id.clone(), Vec::new())).collect(),
    };
    let step = chrono::Duration::seconds(s.seconds_per_vote as i64);
    for v in 0..s.vote_count {
        for j in s.late_joiners.iter().filter(|j| j.at_vote == v && j.at_vote > 0) {
            d.register(j.model, v)?;
        }
        if s.tick_every.is_some_and(|e| v > 0 && v % e == 0) {
            d.tick(v)?;
        }
        d.clock.advance(step);
        d.battle(v)?;
        if (v + 1) % stride == 0 || v + 1 == s.vote_count {
            trajectory.votes.push(v + 1);
            for (i, id) in d.ids.iter().enumerate() {
                let r = d.history[i].last().map(|p| p.rating);
                trajectory.ratings.get_mut(id).expect("all ids present").push(r);
            }
        }
        if v % 1000 == 999 {
            d.arena.expire_stale();
        }
    }

    let snap = d.snapshot();
    let dead_letters = d.arena.backend().with(|p| p.dead_letters().len());
    let steady_from = ((1.0 - STEADY_FRACTION) * s.vote_count as f64).floor() as u64;
    let mut models = Vec::with_capacity(s.model_count);
    for (i, id) in d.ids.iter().enumerate() {
        let row = snap.row(id).ok_or_else(|| SimError::Scenario(format!("{id} never joined")))?;
        let steady = mean(&ratings_over(&d.history[i], steady_from, s.vote_count)).unwrap_or(row.rating);
        let mut last_matches = 0;
        let own: Vec<f64> = d.history[i]
            .iter()
            .filter(|p| {
                let played = p.matches > last_matches;
                last_matches = p.matches;
                played
            })
            .map(|p| p.rating)
            .collect();
        let tail = &own[own.len().saturating_sub(TAIL_UPDATES)..];
        models.push(ModelReport {
            model_id: id.clone(),
            latent_skill: s.skill_at(i, s.vote_count),
            rating: row.rating,
            match_count: row.match_count,
            rank: row.rank,
            steady_state: steady,
            convergence_steps: steps_to_band(&own, steady, BAND),
            tail_variance: (tail.len() >= 2).then(|| variance(tail)).flatten(),
        });
    }
    let ratings: Vec<f64> = models.iter().map(|m| m.rating).collect();
    let skills: Vec<f64> = models.iter().map(|m| m.latent_skill).collect();
    Ok(SimReport {
        scenario: s.clone(),
        votes_cast: s.vote_count,
        dead_letters,
        snapshot_version: snap.version,
        spearman: spearman(&ratings, &skills),
        models,
        ticks: d.ticks,
        trajectory,
        latency: None,
    })
}
