use std::time::Duration;

use arena_core::RatingParams;
use serde::{Deserialize, Serialize};

use crate::exec::{self, Exec};
use crate::metrics::median;
use crate::run::{run_scenario, SimReport};
use crate::scenario::SimScenario;
use crate::SimError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub label: String,
    pub params: RatingParams,
}

/// Per-run study metrics. Each is `None` when the scenario lacks the
/// corresponding feature (no late joiner, no focus pair, no frozen model).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub seed: u64,
    pub spearman: f64,
    /// Own matches until the first late joiner stays within ±50 of its
    /// steady state; `None` also when it never settles.
    pub late_joiner_steps: Option<u64>,
    /// Mean of the focus pair's tail rating variances.
    pub focus_tail_variance: Option<f64>,
    pub frozen_rank: Option<u32>,
    pub frozen_rating: Option<f64>,
}

impl RunMetrics {
    pub fn from_report(r: &SimReport) -> Self {
        let s = &r.scenario;
        let focus_tail_variance = s.focus.and_then(|f| {
            let a = r.model(f.a).tail_variance?;
            let b = r.model(f.b).tail_variance?;
            Some((a + b) / 2.0)
        });
        let frozen = s.frozen.first().map(|f| r.model(f.model));
        Self {
            seed: s.seed,
            spearman: r.spearman,
            late_joiner_steps: s.late_joiners.first().and_then(|j| r.model(j.model).convergence_steps),
            focus_tail_variance,
            frozen_rank: frozen.map(|m| m.rank),
            frozen_rating: frozen.map(|m| m.rating),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantResult {
    pub label: String,
    pub params: RatingParams,
    pub runs: Vec<RunMetrics>,
    pub median_spearman: Option<f64>,
    /// Unsettled runs count as +inf; `None` if the median run is unsettled.
    pub median_late_joiner_steps: Option<f64>,
    pub unsettled_runs: usize,
    pub median_focus_tail_variance: Option<f64>,
    pub median_frozen_rank: Option<f64>,
}

impl VariantResult {
    fn summarize(variant: &Variant, runs: Vec<RunMetrics>, has_joiner: bool) -> Self {
        let collect = |f: &dyn Fn(&RunMetrics) -> Option<f64>| -> Vec<f64> { runs.iter().filter_map(f).collect() };
        let steps: Vec<f64> = if has_joiner {
            runs.iter()
                .map(|m| m.late_joiner_steps.map_or(f64::INFINITY, |s| s as f64))
                .collect()
        } else {
            Vec::new()
        };
        Self {
            label: variant.label.clone(),
            params: variant.params,
            median_spearman: median(&collect(&|m| Some(m.spearman).filter(|x| x.is_finite()))),
            median_late_joiner_steps: median(&steps).filter(|x| x.is_finite()),
            unsettled_runs: steps.iter().filter(|x| x.is_infinite()).count(),
            median_focus_tail_variance: median(&collect(&|m| m.focus_tail_variance)),
            median_frozen_rank: median(&collect(&|m| m.frozen_rank.map(f64::from))),
            runs,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Comparison {
    pub seeds: Vec<u64>,
    pub variants: Vec<VariantResult>,
    /// Wall time of the sweep; excluded from equality-sensitive uses.
    #[serde(skip)]
    pub elapsed: Duration,
}

impl PartialEq for Comparison {
    fn eq(&self, other: &Self) -> bool {
        self.seeds == other.seeds && self.variants == other.variants
    }
}

impl Comparison {
    pub fn variant(&self, label: &str) -> Option<&VariantResult> {
        self.variants.iter().find(|v| v.label == label)
    }

    /// One row per (variant, seed).
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "variant",
            "seed",
            "spearman",
            "late_joiner_steps",
            "focus_tail_variance",
            "frozen_rank",
            "frozen_rating",
        ])?;
        let opt = |x: Option<String>| x.unwrap_or_default();
        for v in &self.variants {
            for r in &v.runs {
                w.write_record([
                    v.label.clone(),
                    r.seed.to_string(),
                    r.spearman.to_string(),
                    opt(r.late_joiner_steps.map(|x| x.to_string())),
                    opt(r.focus_tail_variance.map(|x| x.to_string())),
                    opt(r.frozen_rank.map(|x| x.to_string())),
                    opt(r.frozen_rating.map(|x| x.to_string())),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Runs every variant on `scenario` re-seeded with each of `seeds`.
pub fn compare_params(
    scenario: &SimScenario,
    variants: &[Variant],
    seeds: &[u64],
    exec: Exec,
) -> Result<Comparison, SimError> {
    compare_with(|seed| SimScenario { seed, ..scenario.clone() }, variants, seeds, exec)
}

/// Like [`compare_params`], but builds the scenario per seed (e.g. to draw
/// a seed-specific late joiner). Every variant sees the same scenarios.
pub fn compare_with<F>(build: F, variants: &[Variant], seeds: &[u64], exec: Exec) -> Result<Comparison, SimError>
where
    F: Fn(u64) -> SimScenario + Sync + Send,
{
    if variants.len() < 2 {
        return Err(SimError::Scenario("a comparison needs at least two variants".into()));
    }
    if seeds.is_empty() {
        return Err(SimError::Scenario("a comparison needs at least one seed".into()));
    }
    let started = std::time::Instant::now();
    let jobs: Vec<(usize, u64)> = (0..variants.len())
        .flat_map(|v| seeds.iter().map(move |&s| (v, s)))
        .collect();
    let has_joiner = !build(seeds[0]).late_joiners.is_empty();
    let results = exec::map(exec, &jobs, |&(v, seed)| {
        let scenario = build(seed).with_params(variants[v].params);
        run_scenario(&scenario).map(|r| RunMetrics::from_report(&r))
    });
    let mut per_variant: Vec<Vec<RunMetrics>> = vec![Vec::new(); variants.len()];
    for ((v, _), r) in jobs.iter().zip(results) {
        per_variant[*v].push(r?);
    }
    Ok(Comparison {
        seeds: seeds.to_vec(),
        variants: variants
            .iter()
            .zip(per_variant)
            .map(|(v, runs)| VariantResult::summarize(v, runs, has_joiner))
            .collect(),
        elapsed: started.elapsed(),
    })
}

fn set_param(p: &mut RatingParams, name: &str, value: f64) -> Result<(), SimError> {
    let bad = || SimError::Scenario(format!("bad value {value} for {name}"));
    match name {
        "alpha" | "cold_start_alpha" => p.cold_start_alpha = value,
        "gamma" | "pair_decay_gamma" => p.pair_decay_gamma = value,
        "lambda" | "regression_lambda" => p.regression_lambda = value,
        "k" | "k_factor" => p.k_factor = value,
        "r0" | "base_rating" => p.base_rating = value,
        "window" | "cold_start_window" => {
            if value < 0.0 || value.fract() != 0.0 || value > f64::from(u32::MAX) {
                return Err(bad());
            }
            p.cold_start_window = value as u32;
        }
        "inactivity_days" => {
            if !(value >= 0.0 && value.is_finite()) {
                return Err(bad());
            }
            p.inactivity_threshold = Duration::from_secs_f64(value * 86_400.0);
        }
        other => return Err(SimError::Scenario(format!("unknown parameter {other:?}"))),
    }
    Ok(())
}

/// Expands `name=v1,v2,...` specs into the Cartesian product of variants
/// over `base`. Labels read like `alpha=1.5 gamma=0.9`.
pub fn parse_variants(base: &RatingParams, specs: &[String]) -> Result<Vec<Variant>, SimError> {
    let mut out = vec![Variant {
        label: String::new(),
        params: *base,
    }];
    for spec in specs {
        let (name, values) = spec
            .split_once('=')
            .ok_or_else(|| SimError::Scenario(format!("expected name=v1,v2 in {spec:?}")))?;
        let name = name.trim();
        let mut next = Vec::new();
        for v in &out {
            for raw in values.split(',') {
                let value: f64 = raw
                    .trim()
                    .parse()
                    .map_err(|_| SimError::Scenario(format!("bad number {raw:?} in {spec:?}")))?;
                let mut params = v.params;
                set_param(&mut params, name, value)?;
                params
                    .validate()
                    .map_err(|e| SimError::Scenario(format!("{spec}: {e}")))?;
                let part = format!("{name}={}", raw.trim());
                let label = if v.label.is_empty() { part } else { format!("{} {part}", v.label) };
                next.push(Variant { label, params });
            }
        }
        out = next;
    }
    Ok(out)
}
