use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use arena_sim::{
    compare_with, measure_latency, parse_variants, run_scenario, Exec, LatencyOptions, SimError, SimScenario,
};
use clap::{Parser, Subcommand, ValueEnum};

/// Seeded arena simulator.
#[derive(Debug, Parser)]
#[command(version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Run one scenario and write report.json (and trajectory.csv).
    Run {
        #[arg(long)]
        scenario: PathBuf,
        /// Overrides the scenario's seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Also write trajectory.csv.
        #[arg(long)]
        csv: bool,
        /// Additionally run the wall-clock latency benchmark with N
        /// concurrent ingest threads against the threaded pipeline.
        #[arg(long, value_name = "N")]
        parallel_ingest: Option<usize>,
        /// Votes per second for the latency benchmark.
        #[arg(long, default_value_t = 5000.0)]
        rate: f64,
        /// Seconds of sustained ingest for the latency benchmark.
        #[arg(long, default_value_t = 30.0)]
        duration: f64,
        /// Batched log flush window in ms (1..=5).
        #[arg(long, default_value_t = 5)]
        batch_ms: u64,
    },
    /// Run parameter variants over seeds and write comparison.json/.csv.
    Compare {
        #[arg(long, required_unless_present = "preset", conflicts_with = "preset")]
        scenario: Option<PathBuf>,
        /// Rebuild this preset per seed instead of re-seeding a fixed file
        /// (the late joiner's skill is itself drawn from the seed).
        #[arg(long, value_enum)]
        preset: Option<Preset>,
        /// First seed when using --preset.
        #[arg(long, default_value_t = 1)]
        first_seed: u64,
        /// `name=v1,v2,...`; repeat for a grid. Names: alpha, window, gamma,
        /// lambda, k, r0, inactivity_days.
        #[arg(long = "param", required = true)]
        params: Vec<String>,
        /// Number of consecutive seeds starting at the scenario's seed.
        #[arg(long, default_value_t = 1)]
        seeds: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        sequential: bool,
    },
    /// Print a built-in scenario as JSON.
    Preset {
        #[arg(value_enum)]
        name: Preset,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Preset {
    /// 20 models spaced 50 apart, 50,000 votes.
    Convergence,
    /// 2 equal models, 10,000 votes.
    EqualPair,
    LateJoiner,
    OversampledPair,
    InactiveLeader,
}

fn preset(p: Preset, seed: u64) -> SimScenario {
    match p {
        Preset::Convergence => SimScenario::spaced(20, 50.0, 50_000, seed),
        Preset::EqualPair => SimScenario::spaced(2, 0.0, 10_000, seed),
        Preset::LateJoiner => SimScenario::late_joiner(seed),
        Preset::OversampledPair => SimScenario::oversampled_pair(seed),
        Preset::InactiveLeader => SimScenario::inactive_leader(seed),
    }
}

fn create(path: &Path) -> Result<BufWriter<File>, SimError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|source| SimError::Io { path: path.to_owned(), source })
}

fn write(path: &Path, text: &str) -> Result<(), SimError> {
    fs::write(path, text).map_err(|source| SimError::Io { path: path.to_owned(), source })
}

fn mkdir(dir: &Path) -> Result<(), SimError> {
    fs::create_dir_all(dir).map_err(|source| SimError::Io { path: dir.to_owned(), source })
}

fn main() -> ExitCode {
    match real_main(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn real_main(cli: Cli) -> Result<(), SimError> {
    match cli.cmd {
        Cmd::Run {
            scenario,
            seed,
            out,
            csv,
            parallel_ingest,
            rate,
            duration,
            batch_ms,
        } => {
            let mut s = SimScenario::from_file(&scenario)?;
            if let Some(seed) = seed {
                s.seed = seed;
            }
            mkdir(&out)?;
            let mut report = run_scenario(&s)?;
            if let Some(threads) = parallel_ingest {
                report.latency = Some(measure_latency(&LatencyOptions {
                    skills: s.latent_skills.clone(),
                    rate_per_sec: rate,
                    duration_secs: duration,
                    ingest_threads: threads.max(1),
                    batch_window_ms: batch_ms,
                    seed: s.seed,
                    track: s.track,
                    ..Default::default()
                })?);
            }
            write(&out.join("report.json"), &report.to_json())?;
            if csv {
                report.write_trajectory_csv(create(&out.join("trajectory.csv"))?)?;
            }
            println!("votes: {}  spearman: {:.4}", report.votes_cast, report.spearman);
            for m in &report.models {
                println!(
                    "  #{:<3} {}  rating {:>8.2}  skill {:>7.1}  matches {:>6}  settled after {}",
                    m.rank,
                    m.model_id,
                    m.rating,
                    m.latent_skill,
                    m.match_count,
                    m.convergence_steps.map_or("never".into(), |s| s.to_string())
                );
            }
            if let Some(l) = &report.latency {
                println!(
                    "latency: {} accepted, {} rejected, {:.0}/s, p50 {:.0} µs, p99 {:.0} µs, max queue depth {}",
                    l.accepted, l.rejected, l.achieved_rate, l.summary.p50_us, l.summary.p99_us, l.summary.max_queue_depth
                );
            }
            Ok(())
        }
        Cmd::Compare {
            scenario,
            preset: named,
            first_seed,
            params,
            seeds,
            out,
            sequential,
        } => {
            let fixed = scenario.as_deref().map(SimScenario::from_file).transpose()?;
            let base = fixed.clone().unwrap_or_else(|| preset(named.expect("clap enforces one"), first_seed));
            let variants = parse_variants(&base.params, &params)?;
            let start = if fixed.is_some() { base.seed } else { first_seed };
            let seeds: Vec<u64> = (start..start + seeds.max(1)).collect();
            let exec = if sequential { Exec::Sequential } else { Exec::default() };
            let build = |seed| match (&fixed, named) {
                (Some(s), _) => SimScenario { seed, ..s.clone() },
                (None, Some(p)) => preset(p, seed),
                (None, None) => unreachable!(),
            };
            let table = compare_with(build, &variants, &seeds, exec)?;
            mkdir(&out)?;
            write(
                &out.join("comparison.json"),
                &serde_json::to_string_pretty(&table).expect("comparison serializes"),
            )?;
            table.write_csv(create(&out.join("comparison.csv"))?)?;
            let fmt = |x: Option<f64>| x.map_or("-".into(), |v| format!("{v:.3}"));
            println!("{} seeds in {:.1?}", seeds.len(), table.elapsed);
            println!("{:<28} {:>9} {:>12} {:>14} {:>12}", "variant", "spearman", "join steps", "tail variance", "frozen rank");
            for v in &table.variants {
                println!(
                    "{:<28} {:>9} {:>12} {:>14} {:>12}",
                    v.label,
                    fmt(v.median_spearman),
                    fmt(v.median_late_joiner_steps),
                    fmt(v.median_focus_tail_variance),
                    fmt(v.median_frozen_rank)
                );
            }
            Ok(())
        }
        Cmd::Preset { name, seed } => {
            println!(
                "{}",
                serde_json::to_string_pretty(&preset(name, seed)).expect("scenario serializes")
            );
            Ok(())
        }
    }
}
