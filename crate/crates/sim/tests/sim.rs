use std::process::Command;

use arena_core::RatingParams;
use arena_sim::{compare_params, compare_with, parse_variants, run_scenario, Exec, SimError, SimScenario, VoterModel};

#[test]
fn equal_pair_stays_close() {
    let r = run_scenario(&SimScenario::spaced(2, 0.0, 10_000, 1)).unwrap();
    let gap = (r.models[0].rating - r.models[1].rating).abs();
    assert!(gap < 100.0, "gap {gap}");
    assert_eq!(r.votes_cast, 10_000);
    // each vote touches both models
    assert_eq!(r.models.iter().map(|m| m.match_count).sum::<u64>(), 20_000);
    let total: f64 = r.models.iter().map(|m| m.rating).sum();
    assert!((total - 2000.0).abs() < 1e-6);
}

#[test]
fn identical_scenarios_give_identical_reports() {
    let mut s = SimScenario::late_joiner(4);
    s.vote_count = 8_000;
    s.tick_every = Some(700);
    let a = run_scenario(&s).unwrap();
    let b = run_scenario(&s).unwrap();
    assert_eq!(a.to_json(), b.to_json());
    let (mut ca, mut cb) = (Vec::new(), Vec::new());
    a.write_trajectory_csv(&mut ca).unwrap();
    b.write_trajectory_csv(&mut cb).unwrap();
    assert_eq!(ca, cb);

    s.seed = 5;
    assert_ne!(run_scenario(&s).unwrap().to_json(), a.to_json());
}

#[test]
fn deterministic_voter_recovers_exact_order() {
    let mut s = SimScenario::spaced(6, 30.0, 4_000, 9);
    s.voter = VoterModel::Deterministic;
    let r = run_scenario(&s).unwrap();
    for (i, m) in r.models.iter().enumerate() {
        assert_eq!(m.rank as usize, 6 - i, "{} ranked {}", m.model_id, m.rank);
    }
    assert!((r.spearman - 1.0).abs() < 1e-12);
}

#[test]
fn zero_lambda_ticks_change_nothing() {
    let mut s = SimScenario::inactive_leader(2);
    s.params.regression_lambda = 0.0;
    let with_ticks = run_scenario(&s).unwrap();
    assert!(!with_ticks.ticks.is_empty());
    assert!(with_ticks.ticks.iter().all(|t| t.moved.is_empty()));

    s.tick_every = None;
    let without = run_scenario(&s).unwrap();
    for (a, b) in with_ticks.models.iter().zip(&without.models) {
        assert_eq!(a.rating.to_bits(), b.rating.to_bits(), "{}", a.model_id);
    }
}

#[test]
fn ticks_pull_only_the_inactive_model() {
    let r = run_scenario(&SimScenario::inactive_leader(3)).unwrap();
    let frozen = SimScenario::model_id(9);
    let lambda = r.scenario.params.regression_lambda;
    let mut seen = 0;
    for t in &r.ticks {
        for (id, before, after) in &t.moved {
            assert_eq!(id, &frozen, "active model regressed at vote {}", t.vote);
            let want = t.mean + (1.0 - lambda) * (before - t.mean);
            assert!((after - want).abs() < 1e-9);
            seen += 1;
        }
    }
    assert!(seen > 10);
}

#[test]
fn late_joiner_is_absent_until_it_joins() {
    let mut s = SimScenario::late_joiner(1);
    s.vote_count = 7_000;
    s.trajectory_every = 500;
    let r = run_scenario(&s).unwrap();
    let traj = r.trajectory.ratings.get(&SimScenario::model_id(12)).unwrap();
    for (v, x) in r.trajectory.votes.iter().zip(traj) {
        // a sample at `v` is taken after `v` votes; the newcomer enters
        // before vote index 6000 is cast
        assert_eq!(x.is_some(), *v > 6_000, "vote {v}");
    }
    assert!(r.model(12).match_count > 0);
}

#[test]
fn focus_pair_gets_its_share() {
    let mut s = SimScenario::oversampled_pair(1);
    s.vote_count = 4_000;
    let r = run_scenario(&s).unwrap();
    let focus = r.model(3).match_count + r.model(4).match_count;
    let rest: u64 = r.models.iter().map(|m| m.match_count).sum::<u64>() - focus;
    // half the battles are the pair (2 slots each), the rest spread over 8
    assert!(focus > rest / 2, "focus {focus}, rest {rest}");
    assert!(r.model(3).tail_variance.is_some());
}

#[test]
fn invalid_scenarios_are_rejected() {
    let mut s = SimScenario::spaced(3, 50.0, 100, 1);
    s.latent_skills.pop();
    assert!(matches!(run_scenario(&s), Err(SimError::Scenario(_))));

    let mut s = SimScenario::spaced(3, 50.0, 100, 1);
    s.tick_every = Some(0);
    assert!(s.validate().is_err());

    let mut s = SimScenario::spaced(3, 50.0, 100, 1);
    s.params.k_factor = -1.0;
    assert!(s.validate().is_err());

    let json = r#"{"model_count":2,"latent_skills":[1,2],"vote_count":5,"seed":1,"bogus":true}"#;
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("s.json");
    std::fs::write(&p, json).unwrap();
    assert!(SimScenario::from_file(&p).is_err());
}

#[test]
fn sequential_and_parallel_sweeps_agree() {
    let base = RatingParams::default();
    let variants = parse_variants(&base, &["alpha=1.0,1.5".into()]).unwrap();
    let seeds = [1, 2, 3];
    let build = |seed| {
        let mut s = SimScenario::late_joiner(seed);
        s.vote_count = 7_000;
        s
    };
    let par = compare_with(build, &variants, &seeds, Exec::Parallel).unwrap();
    let seq = compare_with(build, &variants, &seeds, Exec::Sequential).unwrap();
    assert_eq!(par, seq);
    assert_eq!(par.variants.len(), 2);
    assert_eq!(par.variants[0].runs.len(), 3);
    assert!(par.variants[0].runs.iter().all(|r| r.late_joiner_steps.is_some()));

    let fixed = compare_params(&SimScenario::spaced(4, 50.0, 500, 1), &variants, &seeds, Exec::Sequential).unwrap();
    assert!(fixed.variants[0].median_late_joiner_steps.is_none());
}

#[test]
fn a_comparison_needs_two_variants() {
    let variants = parse_variants(&RatingParams::default(), &["gamma=0.9".into()]).unwrap();
    let err = compare_params(&SimScenario::spaced(3, 50.0, 100, 1), &variants, &[1], Exec::Sequential);
    assert!(matches!(err, Err(SimError::Scenario(_))));
}

fn cli() -> Command {
    Command::new(env!("CARGO_BIN_EXE_arena-sim"))
}

#[test]
fn cli_writes_report_and_trajectory() {
    let dir = tempfile::tempdir().unwrap();
    let preset = cli().args(["preset", "equal-pair", "--seed", "3"]).output().unwrap();
    assert!(preset.status.success());
    let mut s: SimScenario = serde_json::from_slice(&preset.stdout).unwrap();
    assert_eq!(s.seed, 3);
    s.vote_count = 2_000;
    let scenario = dir.path().join("s.json");
    std::fs::write(&scenario, serde_json::to_string(&s).unwrap()).unwrap();

    let out = dir.path().join("out");
    let run = cli()
        .args(["run", "--scenario"])
        .arg(&scenario)
        .arg("--out")
        .arg(&out)
        .arg("--csv")
        .output()
        .unwrap();
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["votes_cast"], 2_000);
    assert!(report.get("latency").is_none());
    let csv = std::fs::read_to_string(out.join("trajectory.csv")).unwrap();
    assert!(csv.lines().next().unwrap().contains("m00"));

    let cmp_out = dir.path().join("cmp");
    let cmp = cli()
        .args(["compare", "--scenario"])
        .arg(&scenario)
        .args(["--param", "k=16,32", "--seeds", "2", "--sequential", "--out"])
        .arg(&cmp_out)
        .output()
        .unwrap();
    assert!(cmp.status.success(), "{}", String::from_utf8_lossy(&cmp.stderr));
    let rows = std::fs::read_to_string(cmp_out.join("comparison.csv")).unwrap();
    assert_eq!(rows.lines().count(), 1 + 2 * 2);

    let preset_out = dir.path().join("preset");
    let cmp = cli()
        .args(["compare", "--preset", "late-joiner", "--first-seed", "2", "--param", "alpha=1.0,1.5", "--seeds", "2", "--out"])
        .arg(&preset_out)
        .output()
        .unwrap();
    assert!(cmp.status.success(), "{}", String::from_utf8_lossy(&cmp.stderr));
    let table: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(preset_out.join("comparison.json")).unwrap()).unwrap();
    assert_eq!(table["seeds"], serde_json::json!([2, 3]));

    let bad = cli().args(["run", "--scenario", "/nonexistent.json", "--out"]).arg(&out).output().unwrap();
    assert!(!bad.status.success());
    assert!(String::from_utf8_lossy(&bad.stderr).contains("error"));
}
