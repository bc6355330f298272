use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn cimax(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cimax"))
        .args(args)
        .current_dir(dir)
        .env_remove("CIMAX_SEED")
        .output()
        .expect("binary runs")
}

fn small_sweep(dir: &Path) {
    fs::write(
        dir.join("small.toml"),
        "[sweep]\nx_inits = [-1.0, -0.5]\n\n[run]\nperiods = 8\n",
    )
    .unwrap();
}

fn listing(dir: &Path) -> Vec<String> {
    let mut names: Vec<String> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    names
}

#[test]
fn sweep_reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    small_sweep(dir.path());
    for out in ["a", "b"] {
        let o = cimax(
            &[
                "sweep",
                "--config",
                "small.toml",
                "--seed",
                "7",
                "--runs",
                "2",
                "--out",
                out,
            ],
            dir.path(),
        );
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert_eq!(listing(&a), ["fig5.csv", "sweep_manifest.json", "sweep_runs.csv"]);
    for name in listing(&a) {
        assert_eq!(
            fs::read(a.join(&name)).unwrap(),
            fs::read(b.join(&name)).unwrap(),
            "{name}"
        );
    }
    let table = fs::read_to_string(a.join("fig5.csv")).unwrap();
    assert_eq!(table.lines().count(), 3);
    assert!(table.lines().skip(1).all(|l| l.split(',').nth(1) == Some("2")));
}

#[test]
fn seed_comes_from_environment_when_flag_is_absent() {
    let dir = tempfile::tempdir().unwrap();
    small_sweep(dir.path());
    let o = Command::new(env!("CARGO_BIN_EXE_cimax"))
        .args(["sweep", "--config", "small.toml", "--runs", "1", "--out", "env"])
        .current_dir(dir.path())
        .env("CIMAX_SEED", "42")
        .output()
        .unwrap();
    assert!(o.status.success());
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("env/sweep_manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 42);
    assert_eq!(manifest["config"]["sweep"]["runs"], 1);
    assert_eq!(manifest["config_hash"].as_str().unwrap().len(), 64);
}

#[test]
fn protocol_violation_exits_with_one() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.toml"), "[protocol]\nrefractory = 2\n").unwrap();
    let o = cimax(&["validate", "--config", "bad.toml"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("refractory time must exceed twice the relay delay"));
}

#[test]
fn schema_errors_name_the_line() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("typo.toml"),
        "[swarm]\nagents = 61\n\n[run]\nperiodz = 3\n",
    )
    .unwrap();
    let o = cimax(&["validate", "--config", "typo.toml"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("line 5"), "{err}");
    assert!(err.contains("periodz"), "{err}");
}

#[test]
fn usage_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(cimax(&["sweep", "--bogus"], dir.path()).status.code(), Some(1));
    assert_eq!(cimax(&["frobnicate"], dir.path()).status.code(), Some(1));
    assert_eq!(cimax(&["sweep", "--seed", "minus"], dir.path()).status.code(), Some(1));
    assert_eq!(
        cimax(&["validate", "--config", "missing.toml"], dir.path())
            .status
            .code(),
        Some(1)
    );
    assert!(cimax(&["--help"], dir.path()).status.success());
}

#[test]
fn unwritable_output_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    small_sweep(dir.path());
    fs::write(dir.path().join("taken"), "a file, not a directory").unwrap();
    let o = cimax(
        &["sweep", "--config", "small.toml", "--runs", "1", "--out", "taken"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn trajectory_writes_only_inside_out() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("t.toml"), "[run]\nperiods = 2\nagent_log = true\n").unwrap();
    let o = cimax(
        &[
            "trajectory",
            "--config",
            "t.toml",
            "--preset",
            "gradient",
            "--snapshot",
            "--out",
            "run",
        ],
        dir.path(),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(listing(dir.path()), ["run", "t.toml"]);
    assert_eq!(
        listing(&dir.path().join("run")),
        [
            "agent_log.csv",
            "decisions.csv",
            "fig7b.csv",
            "snapshot.json",
            "trajectory_manifest.json"
        ]
    );
    let path = fs::read_to_string(dir.path().join("run/fig7b.csv")).unwrap();
    assert_eq!(path.lines().next(), Some("period,t,x,y,diversity"));
    assert_eq!(path.lines().count(), 4);
    let snapshot: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("run/snapshot.json")).unwrap()).unwrap();
    assert_eq!(snapshot["agents"].as_array().unwrap().len(), 61);
    assert_eq!(snapshot["field"]["kind"], "linear_gradient");
}

#[test]
fn preset_values_survive_partial_config() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("p.toml"), "[sweep]\nruns = 3\n").unwrap();
    let o = cimax(
        &[
            "validate",
            "--config",
            "p.toml",
            "--preset",
            "gradient",
            "--print-config",
        ],
        dir.path(),
    );
    assert!(o.status.success());
    let resolved: toml::Table = toml::from_str(&String::from_utf8_lossy(&o.stdout)).unwrap();
    assert_eq!(resolved["sweep"]["runs"].as_integer(), Some(3));
    assert_eq!(resolved["sweep"]["x_inits"].as_array().unwrap().len(), 15);
    assert_eq!(resolved["field"]["kind"].as_str(), Some("linear_gradient"));
}

#[test]
fn lab_and_vector_field_run() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("v.toml"),
        "[vector_field]\nxs = [-1.0, 1.0]\nys = [0.0]\nperiod_cycles = 1\n\n[lab]\nrepeats = 1\n",
    )
    .unwrap();
    let o = cimax(
        &["vectorfield", "--config", "v.toml", "--out", "o", "--jobs", "2"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let field = fs::read_to_string(dir.path().join("o/fig6.csv")).unwrap();
    assert_eq!(field.lines().next(), Some("x,y,direction,agreement,seed"));
    assert_eq!(field.lines().count(), 3);
    let o = cimax(&["lab", "--config", "v.toml", "--out", "o"], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let lab = fs::read_to_string(dir.path().join("o/lab.csv")).unwrap();
    // 6 patterns plus 2 alternation steps, 4 agents each
    assert_eq!(lab.lines().count(), 1 + (6 + 2) * 4);
}
