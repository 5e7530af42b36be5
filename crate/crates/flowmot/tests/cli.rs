//! End-to-end tests of the `flowmot` binary: the simulate -> track ->
//! evaluate pipeline, the `mc` subcommand's determinism, and the exit-code
//! contract for bad configs.

use std::path::Path;
use std::process::Command;

fn flowmot() -> Command {
    Command::new(env!("CARGO_BIN_EXE_flowmot"))
}

fn write(path: &Path, contents: &str) {
    std::fs::write(path, contents).unwrap();
}

const SCENARIO: &str = r#"{
    "n_steps": 8,
    "objects": [{"birth": 1, "death": 8}],
    "seed": 3
}"#;

const TRACKER: &str = r#"{
    "method": "pf",
    "n_kernels": 10,
    "n_particles_new": 100,
    "n_particles_legacy": 20,
    "gate_factor": 5.0
}"#;

#[test]
fn simulate_track_evaluate_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = dir.path().join("scenario.json");
    let tracker = dir.path().join("tracker.json");
    write(&scenario, SCENARIO);
    write(&tracker, TRACKER);

    let status = flowmot()
        .args(["simulate", "--scenario"])
        .arg(&scenario)
        .args(["--seed", "3", "--out-dir"])
        .arg(dir.path())
        .status()
        .unwrap();
    assert!(status.success());
    assert!(dir.path().join("truth.json").is_file());
    assert!(dir.path().join("meas.json").is_file());

    let tracks = dir.path().join("tracks.csv");
    let status = flowmot()
        .args(["track", "--tracker"])
        .arg(&tracker)
        .arg("--meas")
        .arg(dir.path().join("meas.json"))
        .arg("--out")
        .arg(&tracks)
        .status()
        .unwrap();
    assert!(status.success());
    let tracks_text = std::fs::read_to_string(&tracks).unwrap();
    assert!(tracks_text.starts_with("run,step,label,x,y,z,vx,vy,vz,existence"));

    let ospa = dir.path().join("ospa.csv");
    let status = flowmot()
        .args(["evaluate", "--truth"])
        .arg(dir.path().join("truth.json"))
        .arg("--tracks")
        .arg(&tracks)
        .args(["--cutoff", "50", "--order", "1", "--out"])
        .arg(&ospa)
        .status()
        .unwrap();
    assert!(status.success());
    let ospa_text = std::fs::read_to_string(&ospa).unwrap();
    let mut lines = ospa_text.lines();
    assert_eq!(lines.next(), Some("step,mean_ospa,stderr"));
    assert_eq!(lines.count(), 8);
}

#[test]
fn mc_is_deterministic_across_invocations() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = dir.path().join("scenario.json");
    let tracker = dir.path().join("tracker.json");
    write(&scenario, SCENARIO);
    write(&tracker, TRACKER);

    let mut outputs = Vec::new();
    for rep in 0..2 {
        let out_dir = dir.path().join(format!("mc_{rep}"));
        let status = flowmot()
            .args(["mc", "--scenario"])
            .arg(&scenario)
            .arg("--tracker")
            .arg(&tracker)
            .args(["--runs", "2", "--seed", "7", "--out-dir"])
            .arg(&out_dir)
            .status()
            .unwrap();
        assert!(status.success());
        outputs.push((
            std::fs::read(out_dir.join("ospa.csv")).unwrap(),
            std::fs::read(out_dir.join("tracks.csv")).unwrap(),
        ));
    }
    assert_eq!(outputs[0].0, outputs[1].0, "ospa.csv differs between reruns");
    assert_eq!(outputs[0].1, outputs[1].1, "tracks.csv differs between reruns");
}

#[test]
fn bad_config_exits_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = dir.path().join("scenario.json");
    write(&scenario, r#"{"n_steps": 8, "unknown_key": 1}"#);
    let status = flowmot()
        .args(["simulate", "--scenario"])
        .arg(&scenario)
        .arg("--out-dir")
        .arg(dir.path())
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));
}

#[test]
fn unknown_preset_exits_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    let status = flowmot()
        .args(["simulate", "--scenario", "preset:nope", "--out-dir"])
        .arg(dir.path())
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));
}
