//! End-to-end tests of the `fedsim` binary: exit codes, output files, and
//! byte-stability across reruns.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fedsim::config::ExperimentConfig;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fedsim"))
}

fn configs_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

/// Quick fleet for subprocess runs: one always-on subpopulation, capped
/// rounds.
fn small_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        master_seed: 99,
        horizon_days: 1,
        ..ExperimentConfig::default()
    };
    cfg.round.goal_client_count = 20;
    cfg.round.min_client_count = 10;
    cfg.server.pacing_base_s = 900;
    cfg.fleet.subpopulations.truncate(1);
    let sub = &mut cfg.fleet.subpopulations[0];
    sub.count = 50;
    sub.availability = vec![0.9; 24];
    cfg
}

fn write_config(dir: &Path, cfg: &ExperimentConfig) -> PathBuf {
    let path = dir.join("experiment.toml");
    std::fs::write(&path, toml::to_string_pretty(cfg).unwrap()).unwrap();
    path
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

#[test]
fn shipped_default_config_matches_builtin() {
    let text = std::fs::read_to_string(configs_dir().join("default.toml")).unwrap();
    let parsed = ExperimentConfig::parse(&text).unwrap();
    assert_eq!(parsed, ExperimentConfig::default());
}

#[test]
fn all_shipped_configs_validate() {
    for name in [
        "default.toml",
        "recovery.toml",
        "skew.toml",
        "narrow_range.toml",
    ] {
        let path = configs_dir().join(name);
        ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{name}: {e}"));
    }
}

#[test]
fn simulate_writes_outputs_and_is_byte_stable() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), &small_config());
    let out_a = tmp.path().join("a");
    let out_b = tmp.path().join("b");

    let run_a = run(&[
        "simulate",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out_a.to_str().unwrap(),
    ]);
    assert_eq!(
        code(&run_a),
        0,
        "stderr: {}",
        String::from_utf8_lossy(&run_a.stderr)
    );
    let run_b = run(&[
        "simulate",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out_b.to_str().unwrap(),
    ]);
    assert_eq!(code(&run_b), 0);

    for name in [
        "rounds.csv",
        "hourly_eval_loss.csv",
        "hourly_train_examples.csv",
        "checkpoint.txt",
        "feature_stats.csv",
    ] {
        let a = std::fs::read(out_a.join(name)).unwrap();
        let b = std::fs::read(out_b.join(name)).unwrap();
        assert!(!a.is_empty(), "{name} empty");
        assert_eq!(a, b, "{name} not byte-stable");
    }

    // at least one round was attempted on the one-day smoke config
    let rounds = std::fs::read_to_string(out_a.join("rounds.csv")).unwrap();
    assert!(rounds.lines().count() > 1, "no rounds logged");
    assert!(rounds
        .starts_with("round_id,kind,sim_time,selected,reported,outcome,mean_loss,example_count"));
}

#[test]
fn seed_override_changes_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), &small_config());
    let out_a = tmp.path().join("a");
    let out_b = tmp.path().join("b");
    assert_eq!(
        code(&run(&[
            "simulate",
            "--config",
            config.to_str().unwrap(),
            "--out",
            out_a.to_str().unwrap(),
        ])),
        0
    );
    assert_eq!(
        code(&run(&[
            "simulate",
            "--config",
            config.to_str().unwrap(),
            "--seed",
            "12345",
            "--out",
            out_b.to_str().unwrap(),
        ])),
        0
    );
    let a = std::fs::read(out_a.join("checkpoint.txt")).unwrap();
    let b = std::fs::read(out_b.join("checkpoint.txt")).unwrap();
    assert_ne!(a, b, "seed override had no effect");
}

#[test]
fn invalid_configs_exit_2_with_diagnostics() {
    let tmp = tempfile::tempdir().unwrap();

    // semantic error: zero horizon
    let mut cfg = small_config();
    cfg.horizon_days = 0;
    let path = tmp.path().join("zero_horizon.toml");
    std::fs::write(&path, toml::to_string_pretty(&cfg).unwrap()).unwrap();
    let out = run(&["simulate", "--config", path.to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("horizon_days"), "stderr: {stderr}");

    // parse error: line-anchored diagnostic
    let path = tmp.path().join("broken.toml");
    std::fs::write(&path, "master_seed = \"zebra\"\n").unwrap();
    let out = run(&["simulate", "--config", path.to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("broken.toml: 1:"), "stderr: {stderr}");
}

#[test]
fn missing_config_file_exits_3() {
    let out = run(&["simulate", "--config", "/nonexistent/nothing.toml"]);
    assert_eq!(code(&out), 3);
}

#[test]
fn sweep_flow_and_failure_modes() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), &small_config());
    let out_dir = tmp.path().join("out");
    assert_eq!(
        code(&run(&[
            "simulate",
            "--config",
            config.to_str().unwrap(),
            "--out",
            out_dir.to_str().unwrap(),
        ])),
        0
    );
    let checkpoint = out_dir.join("checkpoint.txt");

    // happy path, byte-stable across reruns
    let sweep_out = tmp.path().join("sweep");
    let out = run(&[
        "sweep",
        "--checkpoint",
        checkpoint.to_str().unwrap(),
        "--config",
        config.to_str().unwrap(),
        "--out",
        sweep_out.to_str().unwrap(),
    ]);
    assert_eq!(
        code(&out),
        0,
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let sweep_again = tmp.path().join("sweep_again");
    assert_eq!(
        code(&run(&[
            "sweep",
            "--checkpoint",
            checkpoint.to_str().unwrap(),
            "--config",
            config.to_str().unwrap(),
            "--out",
            sweep_again.to_str().unwrap(),
        ])),
        0
    );
    for name in [
        "threshold_training.csv",
        "threshold_deployment.csv",
        "skew.csv",
    ] {
        let a = std::fs::read(sweep_out.join(name)).unwrap();
        assert!(!a.is_empty(), "{name} missing");
        let b = std::fs::read(sweep_again.join(name)).unwrap();
        assert_eq!(a, b, "{name} not byte-stable");
    }

    // a single-threshold grid yields single-row tables
    let mut single = small_config();
    single.analysis.taus = vec![0.1];
    let single_path = tmp.path().join("single.toml");
    std::fs::write(&single_path, toml::to_string_pretty(&single).unwrap()).unwrap();
    let single_out = tmp.path().join("single_out");
    assert_eq!(
        code(&run(&[
            "sweep",
            "--checkpoint",
            checkpoint.to_str().unwrap(),
            "--config",
            single_path.to_str().unwrap(),
            "--out",
            single_out.to_str().unwrap(),
        ])),
        0
    );
    let table = std::fs::read_to_string(single_out.join("threshold_training.csv")).unwrap();
    assert_eq!(table.lines().count(), 2, "header plus one row: {table}");

    // schema mismatch: sweep a checkpoint against an incompatible schema
    let mut other = small_config();
    for group in &mut other.schema.groups {
        if group.name == "baseline_score" {
            group.kind = fedsim::features::GroupKind::BinnedReal {
                bin_edges: vec![0.0, 0.5, 1.0],
            };
        }
    }
    let other_path = tmp.path().join("other.toml");
    std::fs::write(&other_path, toml::to_string_pretty(&other).unwrap()).unwrap();
    let out = run(&[
        "sweep",
        "--checkpoint",
        checkpoint.to_str().unwrap(),
        "--config",
        other_path.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 2);

    // empty populations: no device matches any policy locale
    let mut empty = small_config();
    empty.policy.training.locales = vec!["xx-XX".into()];
    empty.policy.deployment.locales = vec!["xx-XX".into()];
    let empty_path = tmp.path().join("empty.toml");
    std::fs::write(&empty_path, toml::to_string_pretty(&empty).unwrap()).unwrap();
    let out = run(&[
        "sweep",
        "--checkpoint",
        checkpoint.to_str().unwrap(),
        "--config",
        empty_path.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 2);
}

#[test]
fn inspect_flow_and_failure_modes() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), &small_config());
    let out_dir = tmp.path().join("out");
    assert_eq!(
        code(&run(&[
            "simulate",
            "--config",
            config.to_str().unwrap(),
            "--out",
            out_dir.to_str().unwrap(),
        ])),
        0
    );
    let checkpoint = out_dir.join("checkpoint.txt");
    let stats = out_dir.join("feature_stats.csv");

    let report_dir = tmp.path().join("report");
    let out = run(&[
        "inspect",
        "--checkpoint",
        checkpoint.to_str().unwrap(),
        "--stats",
        stats.to_str().unwrap(),
        "--out",
        report_dir.to_str().unwrap(),
    ]);
    assert_eq!(
        code(&out),
        0,
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let stdout = String::from_utf8_lossy(&out.stdout);
    // one line per schema group
    for group in [
        "past_clicks",
        "past_impressions",
        "category_clicks",
        "category_impressions",
        "baseline_score",
        "hour_of_day",
        "day_of_week",
    ] {
        assert_eq!(
            stdout.matches(group).count(),
            1,
            "{group} should appear exactly once:\n{stdout}"
        );
    }
    let csv = std::fs::read_to_string(report_dir.join("weight_report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 8, "header + 7 groups");

    // pinning the layout with --config agrees
    let out = run(&[
        "inspect",
        "--checkpoint",
        checkpoint.to_str().unwrap(),
        "--stats",
        stats.to_str().unwrap(),
        "--config",
        config.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0);

    // an all-zero checkpoint is degenerate but fine
    let zero_ckpt = tmp.path().join("zero.txt");
    let original = std::fs::read_to_string(&checkpoint).unwrap();
    let zeroed: String = original
        .lines()
        .map(|line| {
            let (name, _) = line.rsplit_once(' ').unwrap();
            format!("{name} 0\n")
        })
        .collect();
    std::fs::write(&zero_ckpt, zeroed).unwrap();
    let out = run(&[
        "inspect",
        "--checkpoint",
        zero_ckpt.to_str().unwrap(),
        "--stats",
        stats.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0);
    assert!(String::from_utf8_lossy(&out.stdout).contains("undefined"));

    // malformed checkpoint exits 2
    let bad = tmp.path().join("bad.txt");
    std::fs::write(&bad, "past_clicks zebra\nbias 0\n").unwrap();
    let out = run(&[
        "inspect",
        "--checkpoint",
        bad.to_str().unwrap(),
        "--stats",
        stats.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 2);
}

#[test]
fn usage_errors_exit_2() {
    let out = run(&["simulate"]); // missing --config
    assert_eq!(code(&out), 2);
    let out = run(&["no-such-command"]);
    assert_eq!(code(&out), 2);
}
