use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fade10g"))
}

fn scenario(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(name)
}

fn tmp(name: &str) -> PathBuf {
    Path::new(env!("CARGO_TARGET_TMPDIR")).join(name)
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn write_scenario(name: &str, body: &str) -> PathBuf {
    let path = tmp(name);
    std::fs::write(&path, body).unwrap();
    path
}

#[test]
fn missing_file_is_a_usage_error() {
    let out = run(&["run", "/nonexistent/scenario.toml"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("cannot read"));
}

#[test]
fn unknown_key_is_a_usage_error() {
    let path = write_scenario("typo.toml", "[source]\ntotal_packets = 1\n[channel]\nlos_up = 0.1\n");
    let out = run(&["run", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("los_up"));
}

#[test]
fn bad_flag_is_a_usage_error() {
    assert_eq!(run(&["sweep", "--loss", "0:0.1"]).status.code(), Some(2));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn lossless_run_writes_stats() {
    let json = tmp("lossless.json");
    let file = scenario("lossless.toml");
    let out = run(&["run", file.to_str().unwrap(), "--json", json.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.lines().any(|l| l.starts_with("goodput_fraction")));
    let stats: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
    assert_eq!(stats["retransmissions"], 0);
    assert_eq!(stats["completed"], true);
    assert_eq!(stats["integrity_errors"], 0);
}

#[test]
fn same_seed_gives_identical_output() {
    let path = write_scenario(
        "lossy_small.toml",
        "[channel]\nloss_up = 0.05\nloss_down = 0.05\njitter = 500\n[source]\ntotal_packets = 300\n",
    );
    let outputs: Vec<(String, String)> = ["a", "a", "b"]
        .iter()
        .enumerate()
        .map(|(i, tag)| {
            let json = tmp(&format!("seeded_{tag}_{i}.json"));
            let trace = tmp(&format!("seeded_{tag}_{i}.trace"));
            let seed = if *tag == "a" { "5" } else { "6" };
            let out = run(&[
                "run",
                path.to_str().unwrap(),
                "--seed",
                seed,
                "--quiet",
                "--json",
                json.to_str().unwrap(),
                "--trace",
                trace.to_str().unwrap(),
            ]);
            assert_eq!(out.status.code(), Some(0));
            assert!(out.stdout.is_empty());
            (std::fs::read_to_string(json).unwrap(), std::fs::read_to_string(trace).unwrap())
        })
        .collect();
    assert_eq!(outputs[0], outputs[1]);
    assert_ne!(outputs[0].1, outputs[2].1);
    let first = outputs[0].1.lines().next().unwrap();
    assert!(first.starts_with("t=") && first.contains(" link=0 dir="), "{first}");
}

#[test]
fn fig4_prints_both_schedules() {
    let out = run(&["fig4"]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("# with sequence numbers"));
    assert!(text.contains("# packet numbers only"));
    assert!(text.contains("packet 2 retransmitted 1x, packet 4 retransmitted 1x"));
    assert!(text.contains("packet 2 retransmitted 2x"));
}

#[test]
fn sweep_reports_each_loss_rate() {
    let json = tmp("sweep.json");
    let out = run(&["sweep", "--loss", "0:0.1:0.05", "--packets", "200", "--quiet", "--json", json.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    let rows: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(json).unwrap()).unwrap();
    let rows = rows.as_array().unwrap();
    assert_eq!(rows.len(), 3);
    assert_eq!(rows[0]["stats"]["retransmissions"], 0);
    assert!(rows[2]["stats"]["retransmissions"].as_u64().unwrap() > 0);
}

#[test]
fn shipped_scenarios_run_clean() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios");
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    files.retain(|p| p.extension().is_some_and(|e| e == "toml"));
    assert!(files.len() >= 5);
    for f in files {
        let out = run(&["run", f.to_str().unwrap(), "--quiet"]);
        assert_eq!(out.status.code(), Some(0), "{}: {}", f.display(), String::from_utf8_lossy(&out.stderr));
    }
}
