use std::path::Path;
use std::process::{Command, Output};

fn fdia(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fdia")).args(args).output().expect("binary runs")
}

fn read(p: &Path) -> String {
    std::fs::read_to_string(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn simulate_writes_episodes_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sim");
    let o = fdia(&["simulate", "--episodes", "2", "--steps", "50", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = read(&out.join("episode_00000.csv"));
    assert_eq!(csv.lines().count(), 51);
    assert!(csv.lines().next().unwrap().starts_with("t,"));
    assert!(out.join("episode_00001.csv").exists());
    let m: serde_json::Value = serde_json::from_str(&read(&out.join("manifest.json"))).unwrap();
    assert_eq!(m["episodes"].as_array().unwrap().len(), 2);
    assert_eq!(m["attack"]["entries"], 0);
    assert_ne!(m["episodes"][0]["seed"], m["episodes"][1]["seed"]);
}

#[test]
fn simulate_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        let o = fdia(&["simulate", "--steps", "40", "--seed", "11", "--out", out.to_str().unwrap()]);
        assert!(o.status.success());
        read(&out.join("episode_00000.csv"))
    };
    assert_eq!(run("a"), run("b"));
}

#[test]
fn attacked_simulation_differs_and_records_schedule() {
    let dir = tempfile::tempdir().unwrap();
    let clean = dir.path().join("clean");
    let hit = dir.path().join("hit");
    assert!(fdia(&["simulate", "--steps", "60", "--out", clean.to_str().unwrap()]).status.success());
    let o = fdia(&["simulate", "--steps", "60", "--attack-bus", "7", "--attack-from", "10", "--out", hit.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let a = read(&clean.join("episode_00000.csv"));
    let b = read(&hit.join("episode_00000.csv"));
    let a: Vec<&str> = a.lines().collect();
    let b: Vec<&str> = b.lines().collect();
    assert_eq!(a[..11], b[..11]);
    assert_ne!(a[11], b[11]);
    let m: serde_json::Value = serde_json::from_str(&read(&hit.join("manifest.json"))).unwrap();
    assert_eq!(m["attack"]["entries"], 50);
    assert_eq!(m["attack"]["bus"], 7);
    assert!(m["attack"]["digest"].as_str().unwrap().len() >= 16);
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(fdia(&["run-table", "table-x"]).status.code(), Some(2));
    assert_eq!(fdia(&["simulate", "--attack-bus", "12"]).status.code(), Some(2));
    assert_eq!(fdia(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(fdia(&["config", "--scale", "huge"]).status.code(), Some(2));
}

#[test]
fn config_prints_effective_json() {
    let o = fdia(&["config", "--seed", "99"]);
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["seed"], 99);
    assert_eq!(v["scale"], "desk");

    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("c.json");
    std::fs::write(&p, r#"{"detection": {"n_benign": 12}}"#).unwrap();
    let o = fdia(&["config", "--config", p.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["detection"]["n_benign"], 12);
    assert_eq!(v["detection"]["n_adversarial"], 10000);
}
